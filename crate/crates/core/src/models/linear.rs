use rand_chacha::ChaCha8Rng;

use super::{fill_uniform, gemv_acc, gemv_t_acc, outer_acc, softmax_loss, ModelError, Prediction};
use crate::features::{Move, Window};

/// `h_t = A h_{t-1} + B x_t`, `p_t = softmax(C x_t + D h_t + bias)`.
///
/// Layout: `A (m×m) | B (m×d) | C (2×d) | D (2×m) | bias (2)`, row-major,
/// row 0 of `C`, `D` and `bias` feeding the up logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub input_dim: usize,
    pub features: usize,
    pub theta: Vec<f64>,
}

struct Offsets {
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    bias: usize,
    end: usize,
}

impl LinearParams {
    pub fn zeros(input_dim: usize, features: usize) -> Self {
        let mut p = LinearParams {
            input_dim,
            features,
            theta: Vec::new(),
        };
        p.theta = vec![0.0; p.offsets().end];
        p
    }

    fn offsets(&self) -> Offsets {
        let (m, d) = (self.features, self.input_dim);
        let a = 0;
        let b = a + m * m;
        let c = b + m * d;
        let dd = c + 2 * d;
        let bias = dd + 2 * m;
        Offsets {
            a,
            b,
            c,
            d: dd,
            bias,
            end: bias + 2,
        }
    }

    pub fn a(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o.a..o.b]
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.a..o.b]
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.b..o.c]
    }

    pub fn c_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.c..o.d]
    }

    pub fn d_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.d..o.bias]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.bias..o.end]
    }

    pub(crate) fn bias_mask(&self) -> Vec<bool> {
        let o = self.offsets();
        (0..o.end).map(|i| i >= o.bias).collect()
    }

    /// Uniform weights; `A` rescaled so its Frobenius norm, an upper bound
    /// on the spectral radius, is at most 0.9.
    pub(crate) fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        let o = self.offsets();
        let (m, d) = (self.features, self.input_dim);
        fill_uniform(&mut self.theta[o.a..o.b], m, rng);
        fill_uniform(&mut self.theta[o.b..o.c], d, rng);
        fill_uniform(&mut self.theta[o.c..o.d], d, rng);
        fill_uniform(&mut self.theta[o.d..o.bias], m, rng);
        let fro = self.a().iter().map(|v| v * v).sum::<f64>().sqrt();
        if fro > 0.9 {
            let s = 0.9 / fro;
            self.a_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Hidden states `h_0 = 0, h_1, …, h_T`, stacked.
    fn hidden_path(&self, w: &Window) -> Vec<f64> {
        let o = self.offsets();
        let m = self.features;
        let t_len = w.len();
        let mut hs = vec![0.0; (t_len + 1) * m];
        for t in 0..t_len {
            let (prev, next) = hs.split_at_mut((t + 1) * m);
            let h_prev = &prev[t * m..];
            let h = &mut next[..m];
            gemv_acc(h, &self.theta[o.a..o.b], h_prev);
            gemv_acc(h, &self.theta[o.b..o.c], w.step(t));
        }
        hs
    }

    fn logits(&self, x: &[f64], h: &[f64]) -> (f64, f64) {
        let o = self.offsets();
        let d = self.input_dim;
        let m = self.features;
        let c = &self.theta[o.c..o.d];
        let dm = &self.theta[o.d..o.bias];
        let bias = &self.theta[o.bias..o.end];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        (
            dot(&c[..d], x) + dot(&dm[..m], h) + bias[0],
            dot(&c[d..], x) + dot(&dm[m..], h) + bias[1],
        )
    }

    pub(crate) fn backward(
        &self,
        w: &Window,
        targets: &[(usize, Move)],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let o = self.offsets();
        let m = self.features;
        let t_len = w.len();
        let hs = self.hidden_path(w);
        // dh_t injected by the output at step t
        let mut dh_out = vec![0.0; t_len * m];
        let mut total = 0.0;
        for &(t, label) in targets {
            let h = &hs[(t + 1) * m..(t + 2) * m];
            let (zu, zd) = self.logits(w.step(t), h);
            if !(zu.is_finite() && zd.is_finite()) {
                return Err(ModelError::NonFiniteActivation { step: t });
            }
            let (loss, _, dz) = softmax_loss(zu, zd, label, weight);
            total += loss;
            outer_acc(&mut grad[o.c..o.d], &dz, w.step(t));
            outer_acc(&mut grad[o.d..o.bias], &dz, h);
            grad[o.bias] += dz[0];
            grad[o.bias + 1] += dz[1];
            gemv_t_acc(&mut dh_out[t * m..(t + 1) * m], &self.theta[o.d..o.bias], &dz);
        }
        let last = targets.iter().map(|t| t.0).max().unwrap_or(0);
        let mut dh = vec![0.0; m];
        for t in (0..=last).rev() {
            for (a, b) in dh.iter_mut().zip(&dh_out[t * m..(t + 1) * m]) {
                *a += b;
            }
            outer_acc(&mut grad[o.a..o.b], &dh, &hs[t * m..(t + 1) * m]);
            outer_acc(&mut grad[o.b..o.c], &dh, w.step(t));
            let mut prev = vec![0.0; m];
            gemv_t_acc(&mut prev, &self.theta[o.a..o.b], &dh);
            dh = prev;
        }
        Ok(total)
    }
}

/// Per-step predictions, recursing `h` from zero through the window.
pub fn linear_forward(p: &LinearParams, w: &Window) -> Result<Vec<Prediction>, ModelError> {
    if w.dim() != p.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: p.input_dim,
            found: w.dim(),
        });
    }
    let m = p.features;
    let hs = p.hidden_path(w);
    (0..w.len())
        .map(|t| {
            let (zu, zd) = p.logits(w.step(t), &hs[(t + 1) * m..(t + 2) * m]);
            if !(zu.is_finite() && zd.is_finite()) {
                return Err(ModelError::NonFiniteActivation { step: t });
            }
            Ok(Prediction::from_logits(zu, zd))
        })
        .collect()
}
