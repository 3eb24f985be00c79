//! Small fully-connected value network with rectifier hidden layers and an
//! identity output, trained by plain stochastic gradient descent on half the
//! squared TD error. With a one-hot input and no hidden layers it degenerates
//! to a tabular Q-learner.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTTQNET1";

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major (out x in) weights.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Layer {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    /// Layer widths: input, hidden..., output.
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    /// When false, biases stay frozen at zero. A bias-free single linear
    /// layer over one-hot inputs is exactly a tabular Q-learner:
    /// Q(s, a) <- (1 - lr) Q(s, a) + lr * target.
    pub train_bias: bool,
}

impl QNet {
    /// Uniform Glorot-style init from the supplied rng.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let scale = (6.0 / (cols + rows) as f64).sqrt();
                Layer {
                    w: (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
                    b: vec![0.0; rows],
                    rows,
                    cols,
                }
            })
            .collect();
        Self { sizes: sizes.to_vec(), layers, train_bias: true }
    }

    /// All-zero network of the given shape.
    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                w: vec![0.0; w[0] * w[1]],
                b: vec![0.0; w[1]],
                rows: w[1],
                cols: w[0],
            })
            .collect();
        Self { sizes: sizes.to_vec(), layers, train_bias: true }
    }

    /// Bias-free zero-initialized linear net: a Q-table in disguise.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let mut net = Self::zeros(&[n_states, n_actions]);
        net.train_bias = false;
        net
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Deterministic forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Domain(format!(
                "input dimension {} does not match network input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass keeping post-activation values of every layer (input
    /// included), for backprop.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(acts.last().unwrap(), &mut out);
            if i < last {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulates the gradient of 1/2 (Q(s, a) - y)^2 for one sample into
    /// `grads`, returning the per-sample loss.
    fn accumulate_grad(&self, x: &[f64], action: usize, target: f64, grads: &mut [Layer]) -> f64 {
        let acts = self.forward_cached(x);
        let out = acts.last().unwrap();
        let err = out[action] - target;
        let loss = 0.5 * err * err;

        // seed: d loss / d output = err on the taken action only
        let mut delta = vec![0.0; out.len()];
        delta[action] = err;

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let g = &mut grads[li];
            for r in 0..layer.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                g.b[r] += d;
                let grow = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gw, xv) in grow.iter_mut().zip(input) {
                    *gw += d * xv;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let d = delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (p, wv) in prev.iter_mut().zip(row) {
                        *p += d * wv;
                    }
                }
                // rectifier gate: hidden activations are post-ReLU
                for (p, a) in prev.iter_mut().zip(&acts[li]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    /// One SGD step on the mean of per-sample losses. Returns the pre-step
    /// loss, or an error when a non-finite gradient shows up.
    pub fn sgd_step(&mut self, samples: &[(&[f64], usize, f64)], lr: f64) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()], rows: l.rows, cols: l.cols })
            .collect();
        let mut loss = 0.0;
        for (x, a, y) in samples {
            loss += self.accumulate_grad(x, *a, *y, &mut grads);
        }
        let scale = lr / samples.len() as f64;
        let finite = grads
            .iter()
            .all(|g| g.w.iter().chain(&g.b).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Domain("non-finite gradient; step skipped".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads) {
            for (w, gw) in layer.w.iter_mut().zip(&g.w) {
                *w -= scale * gw;
            }
            if self.train_bias {
                for (b, gb) in layer.b.iter_mut().zip(&g.b) {
                    *b -= scale * gb;
                }
            }
        }
        Ok(loss / samples.len() as f64)
    }

    /// Writes the checkpoint container: magic string, layer-size header,
    /// then per layer the row-major weights and biases as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for s in &self.sizes {
            f.write_all(&(*s as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.w.iter().chain(&layer.b) {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Domain("bad checkpoint magic".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n < 2 || n > 64 {
            return Err(Error::Domain("bad checkpoint header".into()));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut u32buf)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut net = QNet::zeros(&sizes);
        let mut f64buf = [0u8; 8];
        for layer in net.layers.iter_mut() {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                f.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_q() {
        let net = QNet::zeros(&[3, 4, 2]);
        let q = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
        assert_eq!(q.len(), net.output_dim());
    }

    #[test]
    fn single_linear_layer_is_a_matrix_product() {
        let mut net = QNet::zeros(&[2, 3]);
        net.layers[0].w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        net.layers[0].b = vec![0.1, 0.2, 0.3];
        let q = net.forward(&[1.0, -1.0]).unwrap();
        assert_relative_eq!(q[0], 1.0 - 2.0 + 0.1, max_relative = 1e-12);
        assert_relative_eq!(q[1], 3.0 - 4.0 + 0.2, max_relative = 1e-12);
        assert_relative_eq!(q[2], 5.0 - 6.0 + 0.3, max_relative = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = QNet::zeros(&[3, 2]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn tabular_update_blend() {
        // one-hot input, bias-free linear net: Q <- (1 - lr) Q + lr * y
        let mut net = QNet::tabular(4, 2);
        let x = [0.0, 1.0, 0.0, 0.0];
        let loss = net.sgd_step(&[(&x, 0, 1.0)], 0.5).unwrap();
        assert_relative_eq!(loss, 0.5, max_relative = 1e-12);
        let q = net.forward(&x).unwrap();
        assert_relative_eq!(q[0], 0.5, max_relative = 1e-12);
        assert_eq!(q[1], 0.0);
        // untouched state rows stay zero
        assert_eq!(net.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = QNet::new(&[3, 8, 2], &mut rng);
        let before = net.clone();
        net.sgd_step(&[(&[0.1, 0.2, 0.3], 1, 5.0)], 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 10 random small nets, central differences at 1e-4 relative
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut net = QNet::new(&[3, 5, 4, 2], &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = rng.gen_range(0..2usize);
            let y = rng.gen_range(-1.0..1.0);

            let mut grads: Vec<Layer> = net
                .layers
                .iter()
                .map(|l| Layer { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()], rows: l.rows, cols: l.cols })
                .collect();
            net.accumulate_grad(&x, a, y, &mut grads);

            let loss_of = |n: &QNet| {
                let q = n.forward(&x).unwrap();
                0.5 * (q[a] - y).powi(2)
            };
            let h = 1e-6;
            for li in 0..net.layers.len() {
                for wi in (0..net.layers[li].w.len()).step_by(3) {
                    let orig = net.layers[li].w[wi];
                    net.layers[li].w[wi] = orig + h;
                    let lp = loss_of(&net);
                    net.layers[li].w[wi] = orig - h;
                    let lm = loss_of(&net);
                    net.layers[li].w[wi] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads[li].w[wi];
                    if fd.abs() > 1e-7 {
                        assert_relative_eq!(an, fd, max_relative = 1e-4);
                    } else {
                        assert!(an.abs() < 1e-5, "analytic {an} vs fd {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = QNet::new(&[4, 8, 3], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.qnet");
        net.save(&path).unwrap();
        let loaded = QNet::load(&path).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.qnet");
        std::fs::write(&path, b"NOTQNETXxxxx").unwrap();
        assert!(QNet::load(&path).is_err());
    }
}
