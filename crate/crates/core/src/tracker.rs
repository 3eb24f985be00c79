//! Target-state estimation: EKF over amplitude measurements, median-based
//! data fusion, the autoregressive trajectory predictor, and accuracy metrics.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::world::{amplitude, distance, Position};

/// EKF state: mean (x, y, vx, vy) and 4x4 covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEstimate {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

impl TrackEstimate {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>) -> Self {
        Self { mean, cov }
    }

    /// Diffuse prior centered on a position.
    pub fn prior(pos: Position, cov_diag: f64) -> Self {
        Self {
            mean: Vector4::new(pos.x, pos.y, 0.0, 0.0),
            cov: Matrix4::identity() * cov_diag,
        }
    }

    pub fn position(&self) -> Position {
        Position::new(self.mean[0], self.mean[1])
    }
}

/// Prediction step: mean' = F mean, P' = F P F^T + Q.
pub fn ekf_predict(est: &TrackEstimate, transfer: &Matrix4<f64>, process_noise: &Matrix4<f64>) -> TrackEstimate {
    let mean = transfer * est.mean;
    let cov = transfer * est.cov * transfer.transpose() + process_noise;
    // re-symmetrize against accumulation drift
    let cov = (cov + cov.transpose()) * 0.5;
    TrackEstimate { mean, cov }
}

/// Per-sensor amplitude batch entering one EKF update.
#[derive(Debug, Clone)]
pub struct MeasurementBatch {
    pub sensor_ids: Vec<usize>,
    pub sensor_pos: Vec<Position>,
    pub amplitudes: Vec<f64>,
    pub noise_var: f64,
}

impl MeasurementBatch {
    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }
}

/// Predicted amplitude at each sensor for the state mean.
pub fn measurement_model(mean: &Vector4<f64>, sensors: &[Position], source_power: f64) -> DVector<f64> {
    DVector::from_iterator(
        sensors.len(),
        sensors.iter().map(|s| {
            let d = distance(Position::new(mean[0], mean[1]), *s);
            amplitude(source_power, d)
        }),
    )
}

/// Jacobian of the amplitude model. Row i is the gradient of
/// sqrt(P / (1 + d_i^2)) in (x, y, vx, vy); velocity columns are zero, and at
/// d = 0 the gradient vanishes analytically.
pub fn measurement_jacobian(mean: &Vector4<f64>, sensors: &[Position], source_power: f64) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(sensors.len(), 4);
    let sqrt_p = source_power.sqrt();
    for (i, s) in sensors.iter().enumerate() {
        let dx = mean[0] - s.x;
        let dy = mean[1] - s.y;
        let d2 = dx * dx + dy * dy;
        let scale = -sqrt_p * (1.0 + d2).powf(-1.5);
        h[(i, 0)] = scale * dx;
        h[(i, 1)] = scale * dy;
    }
    h
}

/// Update step. S = H P H^T (+ R unless `strict_paper_s`); K = P H^T S^-1;
/// mean' = mean + K (z - h(mean)); P' = (I - K H) P.
///
/// Returns `SingularInnovation` when S cannot be inverted; the caller coasts
/// on the prediction for that tick.
pub fn ekf_update(
    est: &TrackEstimate,
    batch: &MeasurementBatch,
    source_power: f64,
    strict_paper_s: bool,
) -> Result<(TrackEstimate, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("measurement batch is empty".into()));
    }
    let h = measurement_jacobian(&est.mean, &batch.sensor_pos, source_power);
    let predicted = measurement_model(&est.mean, &batch.sensor_pos, source_power);
    let z = DVector::from_column_slice(&batch.amplitudes);
    ekf_update_linearized(est, &z, &h, &predicted, batch.noise_var, strict_paper_s)
}

/// Update step for an already-linearized measurement: `h` is the Jacobian at
/// the prior mean and `predicted` the model output there. With a linear model
/// this is exactly the Kalman filter update.
pub fn ekf_update_linearized(
    est: &TrackEstimate,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    predicted: &DVector<f64>,
    noise_var: f64,
    strict_paper_s: bool,
) -> Result<(TrackEstimate, DMatrix<f64>)> {
    let n = z.len();
    let mut s = h * est.cov * h.transpose();
    if !strict_paper_s {
        for i in 0..n {
            s[(i, i)] += noise_var;
        }
    }
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    let cov_dyn = DMatrix::from_column_slice(4, 4, est.cov.as_slice());
    let gain = cov_dyn * h.transpose() * s_inv;
    let innovation = z - predicted;
    let mean = est.mean + &gain * innovation;
    let cov = (Matrix4::identity() - &gain * h) * est.cov;
    let cov = (cov + cov.transpose()) * 0.5;
    Ok((TrackEstimate { mean, cov }, gain))
}

/// Outcome of median-absolute-deviation outlier rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSet {
    /// Indices into the input list that survived.
    pub accepted: Vec<usize>,
    /// Indices rejected as outliers.
    pub rejected: Vec<usize>,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rejects values whose absolute deviation from the sample median exceeds
/// `kappa_f` times the median absolute deviation. The median itself always
/// survives, so the accepted set is never empty.
pub fn fuse_results(values: &[f64], kappa_f: f64) -> FusionSet {
    assert!(!values.is_empty(), "fuse_results needs a non-empty list");
    let med = median_of(values.to_vec());
    let mad = median_of(values.iter().map(|v| (v - med).abs()).collect());
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let dev = (v - med).abs();
        if mad == 0.0 {
            // all mass at the median: only exact median values survive a
            // zero scale, everything else is ridiculous by definition
            if dev == 0.0 {
                accepted.push(i);
            } else {
                rejected.push(i);
            }
        } else if dev <= kappa_f * mad {
            accepted.push(i);
        } else {
            rejected.push(i);
        }
    }
    if accepted.is_empty() {
        // survivor guarantee: keep the value closest to the median
        let (best, _) = values
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                ((*a - med).abs()).partial_cmp(&((*b - med).abs())).unwrap()
            })
            .unwrap();
        accepted.push(best);
        rejected.retain(|&i| i != best);
    }
    FusionSet { accepted, rejected }
}

/// Integrates the accepted per-participant results into one fused value (the
/// mean). Interpretation of the paper's set product lives behind this single
/// function so alternatives can be swapped.
pub fn integrate(values: &[f64], fusion: &FusionSet) -> f64 {
    let sum: f64 = fusion.accepted.iter().map(|&i| values[i]).sum();
    sum / fusion.accepted.len() as f64
}

/// Autoregressive trajectory model fitted over a Hankel system.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub order: usize,
    pub coeffs: Vec<f64>,
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Least-squares fit of x(t+1) = sum_i chi_i x(t-k+i) over the history.
/// Needs at least 2k points so the system has at least k rows.
pub fn fit_predictor(history: &[f64], order: usize) -> Result<PredictorModel> {
    let n = history.len();
    if order == 0 {
        return Err(Error::Domain("predictor order must be >= 1".into()));
    }
    if n < 2 * order {
        return Err(Error::Domain(format!(
            "need at least {} history points for order {order}, got {n}",
            2 * order
        )));
    }
    let rows = n - order;
    let mut hankel = DMatrix::zeros(rows, order);
    let mut future = DVector::zeros(rows);
    for r in 0..rows {
        for c in 0..order {
            hankel[(r, c)] = history[r + c];
        }
        future[r] = history[r + order];
    }
    let svd = hankel.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coeffs = svd
        .solve(&future, tol)
        .map_err(|e| Error::Domain(format!("predictor solve failed: {e}")))?;
    let residual = (&hankel * &coeffs - &future).norm();
    Ok(PredictorModel {
        order,
        coeffs: coeffs.iter().copied().collect(),
        residual,
        rank_deficient: rank < order,
    })
}

/// Rolls the AR recurrence forward `steps` ticks, feeding forecasts back in.
pub fn predict_trajectory(model: &PredictorModel, history: &[f64], steps: usize) -> Vec<f64> {
    assert!(
        history.len() >= model.order,
        "history shorter than predictor order"
    );
    let mut window: Vec<f64> = history[history.len() - model.order..].to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next: f64 = model
            .coeffs
            .iter()
            .zip(&window)
            .map(|(c, x)| c * x)
            .sum();
        out.push(next);
        window.remove(0);
        window.push(next);
    }
    out
}

/// Centroid tracking error of constraint C3: distance between the mean of the
/// supplied position estimates and the true position.
pub fn tracking_error(estimates: &[Position], truth: Position) -> f64 {
    assert!(!estimates.is_empty(), "tracking_error needs estimates");
    let m = estimates.len() as f64;
    let mx = estimates.iter().map(|p| p.x).sum::<f64>() / m;
    let my = estimates.iter().map(|p| p.y).sum::<f64>() / m;
    ((mx - truth.x).powi(2) + (my - truth.y).powi(2)).sqrt()
}

/// Mean squared position error over (estimate, truth) pairs.
pub fn mse(track: &[(Position, Position)]) -> f64 {
    assert!(!track.is_empty(), "mse needs samples");
    track
        .iter()
        .map(|(est, truth)| (est.x - truth.x).powi(2) + (est.y - truth.y).powi(2))
        .sum::<f64>()
        / track.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::cv_transfer_matrix;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ekf_predict_identity_is_noop() {
        let est = TrackEstimate::prior(Position::new(1.0, 2.0), 5.0);
        let out = ekf_predict(&est, &Matrix4::identity(), &Matrix4::zeros());
        assert_eq!(out, est);
    }

    #[test]
    fn ekf_predict_matches_hand_matrix_multiply() {
        let f = cv_transfer_matrix(1.0);
        let p = Matrix4::from_diagonal(&Vector4::new(1.0, 2.0, 3.0, 4.0));
        let est = TrackEstimate::new(Vector4::new(0.0, 0.0, 1.0, 1.0), p);
        let out = ekf_predict(&est, &f, &Matrix4::zeros());
        let expect = f * p * f.transpose();
        assert_relative_eq!(out.cov, expect, epsilon = 1e-12);
        // symmetry holds structurally
        assert_relative_eq!(out.cov, out.cov.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_zero_at_sensor_location() {
        let mean = Vector4::new(5.0, 5.0, 0.0, 0.0);
        let h = measurement_jacobian(&mean, &[Position::new(5.0, 5.0)], 4.0);
        for c in 0..4 {
            assert_eq!(h[(0, c)], 0.0);
        }
    }

    #[test]
    fn jacobian_hand_value() {
        // sensor at origin, target at (1, 0), P = 4:
        // dz/dx = -x * sqrt(P) * (1 + d^2)^(-3/2) = -2 * 2^(-3/2)
        let mean = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let h = measurement_jacobian(&mean, &[Position::new(0.0, 0.0)], 4.0);
        assert_relative_eq!(h[(0, 0)], -2.0 * 2.0f64.powf(-1.5), max_relative = 1e-12);
        assert_eq!(h[(0, 2)], 0.0);
        assert_eq!(h[(0, 3)], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        // central differences at 100 random states, 1e-4 relative agreement
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p_src = 1e4;
        let step = 1e-6;
        for _ in 0..100 {
            let sensors = vec![
                Position::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)),
                Position::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)),
            ];
            let mean = Vector4::new(
                rng.gen_range(0.0..200.0),
                rng.gen_range(0.0..200.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let h = measurement_jacobian(&mean, &sensors, p_src);
            for axis in 0..2 {
                let mut plus = mean;
                let mut minus = mean;
                plus[axis] += step;
                minus[axis] -= step;
                let zp = measurement_model(&plus, &sensors, p_src);
                let zm = measurement_model(&minus, &sensors, p_src);
                for row in 0..sensors.len() {
                    let fd = (zp[row] - zm[row]) / (2.0 * step);
                    let an = h[(row, axis)];
                    if fd.abs() > 1e-9 {
                        assert_relative_eq!(an, fd, max_relative = 1e-4);
                    } else {
                        assert!(an.abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn ekf_update_zero_covariance_keeps_mean() {
        let est = TrackEstimate::new(Vector4::new(1.0, 1.0, 0.0, 0.0), Matrix4::zeros());
        let batch = MeasurementBatch {
            sensor_ids: vec![0],
            sensor_pos: vec![Position::new(0.0, 0.0)],
            amplitudes: vec![5.0],
            noise_var: 0.01,
        };
        let (out, gain) = ekf_update(&est, &batch, 4.0, false).unwrap();
        assert_relative_eq!(out.mean, est.mean, epsilon = 1e-12);
        assert_relative_eq!(gain.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ekf_update_singular_innovation_is_flagged() {
        let est = TrackEstimate::new(Vector4::new(1.0, 1.0, 0.0, 0.0), Matrix4::zeros());
        let batch = MeasurementBatch {
            sensor_ids: vec![0],
            sensor_pos: vec![Position::new(0.0, 0.0)],
            amplitudes: vec![5.0],
            noise_var: 0.0,
        };
        // P = 0 and R = 0 makes S = 0
        assert!(matches!(
            ekf_update(&est, &batch, 4.0, false),
            Err(Error::SingularInnovation)
        ));
    }

    #[test]
    fn covariance_contracts_on_informative_update() {
        let est = TrackEstimate::prior(Position::new(50.0, 50.0), 25.0);
        let pred = ekf_predict(&est, &cv_transfer_matrix(1.0), &Matrix4::identity());
        let sensors = vec![Position::new(40.0, 45.0), Position::new(60.0, 52.0)];
        let z = measurement_model(&pred.mean, &sensors, 1e4);
        let batch = MeasurementBatch {
            sensor_ids: vec![0, 1],
            sensor_pos: sensors,
            amplitudes: z.iter().copied().collect(),
            noise_var: 0.01,
        };
        let (out, _) = ekf_update(&pred, &batch, 1e4, false).unwrap();
        assert!(out.cov.trace() <= pred.cov.trace() + 1e-9);
    }

    #[test]
    fn fuse_rejects_mad_outlier() {
        let fs = fuse_results(&[1.0, 1.0, 1.0, 10.0], 3.0);
        assert_eq!(fs.rejected, vec![3]);
        assert_eq!(fs.accepted, vec![0, 1, 2]);
    }

    #[test]
    fn fuse_keeps_equal_values_and_single_value() {
        let fs = fuse_results(&[2.0, 2.0, 2.0], 3.0);
        assert!(fs.rejected.is_empty());
        let fs = fuse_results(&[7.0], 3.0);
        assert_eq!(fs.accepted, vec![0]);
    }

    #[test]
    fn fuse_against_brute_force_mad() {
        let values = [3.0, 3.1, 2.9, 3.05, 8.0, -1.0, 3.2];
        let kappa = 3.0;
        let fs = fuse_results(&values, kappa);
        // independent MAD computation
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = sorted[sorted.len() / 2];
        let mut devs: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mad = devs[devs.len() / 2];
        for (i, v) in values.iter().enumerate() {
            let rejected = (v - med).abs() > kappa * mad;
            assert_eq!(fs.rejected.contains(&i), rejected, "index {i}");
        }
    }

    #[test]
    fn fuse_is_idempotent() {
        let values = [3.0, 3.1, 2.9, 3.05, 8.0, -1.0, 3.2];
        let fs = fuse_results(&values, 3.0);
        let accepted: Vec<f64> = fs.accepted.iter().map(|&i| values[i]).collect();
        let again = fuse_results(&accepted, 3.0);
        assert!(again.rejected.is_empty());
    }

    #[test]
    fn integrate_means_accepted_values() {
        let values = [2.0];
        let fs = fuse_results(&values, 3.0);
        assert_eq!(integrate(&values, &fs), 2.0);
        let values = [1.0, 3.0];
        let fs = FusionSet { accepted: vec![0, 1], rejected: vec![] };
        assert_eq!(integrate(&values, &fs), 2.0);
        // permutation invariance
        let values2 = [3.0, 1.0];
        assert_eq!(integrate(&values2, &fs), 2.0);
    }

    #[test]
    fn predictor_fits_arithmetic_sequence_exactly() {
        let model = fit_predictor(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert_relative_eq!(model.coeffs[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(model.coeffs[1], 2.0, epsilon = 1e-9);
        assert!(model.residual < 1e-9);
        // chi = (-1, 2), tail (4, 5) -> 6, 7
        let fc = predict_trajectory(&model, &[4.0, 5.0], 2);
        assert_relative_eq!(fc[0], 6.0, epsilon = 1e-9);
        assert_relative_eq!(fc[1], 7.0, epsilon = 1e-9);
    }

    #[test]
    fn predictor_constant_history() {
        let model = fit_predictor(&[4.0, 4.0, 4.0, 4.0], 1).unwrap();
        assert_relative_eq!(model.coeffs[0], 1.0, epsilon = 1e-9);
        assert!(model.residual < 1e-9);
        let fc = predict_trajectory(&model, &[4.0], 3);
        assert!(fc.iter().all(|&v| (v - 4.0).abs() < 1e-9));
        assert!(predict_trajectory(&model, &[4.0], 0).is_empty());
    }

    #[test]
    fn predictor_exact_on_linear_recurrences() {
        // any order-k linear recurrence is recovered with zero residual and
        // exact multi-horizon forecasts
        let coeffs = [0.5, -0.2, 0.9];
        let k = coeffs.len();
        let mut series = vec![1.0, 2.0, -1.0];
        for _ in 0..20 {
            let n = series.len();
            let next: f64 = (0..k).map(|i| coeffs[i] * series[n - k + i]).sum();
            series.push(next);
        }
        let model = fit_predictor(&series[..15], k).unwrap();
        assert!(model.residual < 1e-9, "residual {}", model.residual);
        let fc = predict_trajectory(&model, &series[..15], 8);
        for (i, v) in fc.iter().enumerate() {
            assert_relative_eq!(*v, series[15 + i], epsilon = 1e-7, max_relative = 1e-9);
        }
    }

    #[test]
    fn predictor_noisy_linear_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = 0.05;
        let series: Vec<f64> = (0..40)
            .map(|i| i as f64 + rng.gen_range(-noise..noise))
            .collect();
        let model = fit_predictor(&series, 2).unwrap();
        assert!(model.residual > 0.0);
        let fc = predict_trajectory(&model, &series, 3);
        for (i, v) in fc.iter().enumerate() {
            let truth = (40 + i) as f64;
            assert!((v - truth).abs() < 20.0 * noise, "forecast {v} vs {truth}");
        }
    }

    #[test]
    fn predictor_needs_enough_history() {
        assert!(fit_predictor(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn predictor_flags_rank_deficiency() {
        // all-zero history: Hankel is rank zero, minimum-norm solution
        let model = fit_predictor(&[0.0; 8], 2).unwrap();
        assert!(model.rank_deficient);
        assert!(model.coeffs.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn tracking_error_hand_values() {
        let truth = Position::new(1.0, 0.0);
        assert_eq!(tracking_error(&[truth], truth), 0.0);
        // centroid cancellation
        let e = tracking_error(&[Position::new(0.0, 0.0), Position::new(2.0, 0.0)], truth);
        assert_relative_eq!(e, 0.0, epsilon = 1e-12);
        let e = tracking_error(
            &[Position::new(0.0, 0.0), Position::new(0.0, 2.0)],
            Position::new(0.0, 0.0),
        );
        assert_relative_eq!(e, 1.0);
    }

    #[test]
    fn mse_matches_naive_loop() {
        let truth = Position::new(1.0, 1.0);
        assert_eq!(mse(&[(truth, truth)]), 0.0);
        assert_relative_eq!(mse(&[(Position::new(2.0, 1.0), truth)]), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let track: Vec<(Position, Position)> = (0..50)
            .map(|_| {
                (
                    Position::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
                    Position::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
                )
            })
            .collect();
        let mut naive = 0.0;
        for (e, t) in &track {
            naive += (e.x - t.x).powi(2) + (e.y - t.y).powi(2);
        }
        naive /= track.len() as f64;
        assert_relative_eq!(mse(&track), naive, max_relative = 1e-12);
    }

    #[test]
    fn er_matches_mse_for_single_estimate() {
        let est = Position::new(3.0, 4.0);
        let truth = Position::new(0.0, 0.0);
        let er = tracking_error(&[est], truth);
        assert_relative_eq!(er * er, mse(&[(est, truth)]), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn fuse_partitions_input(values in proptest::collection::vec(-100.0..100.0f64, 1..30)) {
            let fs = fuse_results(&values, 3.0);
            let mut all: Vec<usize> = fs.accepted.iter().chain(&fs.rejected).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..values.len()).collect();
            prop_assert_eq!(all, expect);
            prop_assert!(!fs.accepted.is_empty());
        }

        #[test]
        fn ekf_predict_keeps_symmetry(px in 0.1..100.0f64, pv in 0.1..10.0f64, dt in 0.1..2.0f64) {
            let p = Matrix4::from_diagonal(&Vector4::new(px, px, pv, pv));
            let est = TrackEstimate::new(Vector4::zeros(), p);
            let out = ekf_predict(&est, &cv_transfer_matrix(dt), &Matrix4::identity());
            let asym = (out.cov - out.cov.transpose()).norm();
            prop_assert!(asym < 1e-9);
        }
    }
}
