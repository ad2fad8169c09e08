use rand_chacha::ChaCha8Rng;

use super::{fill_uniform, gemv_acc, gemv_t_acc, outer_acc, softmax_loss, ModelError, Prediction};
use crate::features::{Move, Window};

/// Affine-ReLU stack with a two-way softmax head.
///
/// Layout per layer: `W (out×in) | b (out)`, the head last with `out = 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut p = MlpParams {
            input_dim,
            hidden: hidden.to_vec(),
            theta: Vec::new(),
        };
        let n = p.layers().last().map_or(0, |l| l.2 + l.0 * l.1 + l.1);
        p.theta = vec![0.0; n];
        p
    }

    /// `(fan_in, fan_out, weight offset)` per layer; biases follow weights.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(2);
        let mut off = 0;
        dims.windows(2)
            .map(|w| {
                let l = (w[0], w[1], off);
                off += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub(crate) fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.theta.len()];
        for (i, o, off) in self.layers() {
            mask[off + i * o..off + i * o + o].iter_mut().for_each(|b| *b = true);
        }
        mask
    }

    pub(crate) fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        for (i, o, off) in self.layers() {
            fill_uniform(&mut self.theta[off..off + i * o], i, rng);
        }
    }

    /// Activations of every layer, input first, head logits last.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts = vec![x.to_vec()];
        for (li, &(i, o, off)) in layers.iter().enumerate() {
            let mut z = self.theta[off + i * o..off + i * o + o].to_vec();
            gemv_acc(&mut z, &self.theta[off..off + i * o], acts.last().unwrap());
            if li + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub(crate) fn backward(
        &self,
        w: &Window,
        targets: &[(usize, Move)],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let layers = self.layers();
        let mut total = 0.0;
        for &(t, label) in targets {
            let acts = self.activations(w.step(t));
            let z = acts.last().unwrap();
            if !(z[0].is_finite() && z[1].is_finite()) {
                return Err(ModelError::NonFiniteActivation { step: t });
            }
            let (loss, _, dz) = softmax_loss(z[0], z[1], label, weight);
            total += loss;
            let mut delta = dz.to_vec();
            for (li, &(i, o, off)) in layers.iter().enumerate().rev() {
                let input = &acts[li];
                outer_acc(&mut grad[off..off + i * o], &delta, input);
                for (g, d) in grad[off + i * o..off + i * o + o].iter_mut().zip(&delta) {
                    *g += d;
                }
                if li == 0 {
                    break;
                }
                let mut back = vec![0.0; i];
                gemv_t_acc(&mut back, &self.theta[off..off + i * o], &delta);
                for (b, a) in back.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(total)
    }
}

/// Prediction from a single state vector.
pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<Prediction, ModelError> {
    if x.len() != p.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: p.input_dim,
            found: x.len(),
        });
    }
    let acts = p.activations(x);
    let z = acts.last().unwrap();
    if !(z[0].is_finite() && z[1].is_finite()) {
        return Err(ModelError::NonFiniteActivation { step: 0 });
    }
    Ok(Prediction::from_logits(z[0], z[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_is_even() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut p = MlpParams::zeros(3, &[4]);
        p.randomize(&mut rng);
        let (i, o, off) = p.layers()[1];
        p.theta[off..off + i * o + o].iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(mlp_forward(&p, &[1.0, 2.0, -3.0]).unwrap().p_up, 0.5);
    }

    #[test]
    fn relu_kills_negative_preactivation() {
        let mut p = MlpParams::zeros(1, &[1]);
        p.theta[0] = -1.0;
        let acts = p.activations(&[3.0]);
        assert_eq!(acts[1], vec![0.0]);
    }

    #[test]
    fn two_layer_toy_by_hand() {
        // x = (1, 2); hidden W = [[1, -1], [0.5, 0.5]], b = (0.5, -1)
        // pre = (-0.5, 0.5) -> relu (0, 0.5)
        // head W = [[2, 1], [-1, 3]], b = (0.1, 0)
        // logits (0.6, 1.5)
        let mut p = MlpParams::zeros(2, &[2]);
        p.theta.copy_from_slice(&[1.0, -1.0, 0.5, 0.5, 0.5, -1.0, 2.0, 1.0, -1.0, 3.0, 0.1, 0.0]);
        let pred = mlp_forward(&p, &[1.0, 2.0]).unwrap();
        let want = 1.0 / (1.0 + (1.5f64 - 0.6).exp());
        assert!((pred.p_up - want).abs() < 1e-15);
    }
}
