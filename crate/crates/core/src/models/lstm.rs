use rand_chacha::ChaCha8Rng;

use super::{fill_uniform, gemv_acc, gemv_t_acc, outer_acc, softmax_loss, ModelError, Prediction};
use crate::features::{Move, Window};

/// Stacked LSTM, then `relu(W_r h + b_r)`, then a softmax head.
///
/// Layout per layer: `W (4n×in) | U (4n×n) | b (4n)` with gate rows in the
/// order input, forget, candidate, output; then `W_r (r×n) | b_r (r) |
/// W_o (2×r) | b_o (2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub units: usize,
    pub layers: usize,
    pub relu_units: usize,
    pub theta: Vec<f64>,
}

/// Hidden and cell state of every layer, carried between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(p: &LstmParams) -> Self {
        LstmState {
            h: vec![vec![0.0; p.units]; p.layers],
            c: vec![vec![0.0; p.units]; p.layers],
        }
    }
}

#[derive(Clone, Copy)]
struct LayerOff {
    input: usize,
    w: usize,
    u: usize,
    b: usize,
    end: usize,
}

#[derive(Clone, Copy)]
struct HeadOff {
    wr: usize,
    br: usize,
    wo: usize,
    bo: usize,
    end: usize,
}

/// Forward quantities kept for backpropagation.
struct Trace {
    /// Per layer, `T × 4n` post-activation gates.
    gates: Vec<Vec<f64>>,
    /// Per layer, `(T+1) × n` cell states, initial state first.
    c: Vec<Vec<f64>>,
    /// Per layer, `(T+1) × n` hidden states, initial state first.
    h: Vec<Vec<f64>>,
    /// Per layer, `T × n` values of `tanh(c_t)`.
    tc: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmParams {
    pub fn zeros(input_dim: usize, units: usize, layers: usize, relu_units: usize) -> Self {
        let mut p = LstmParams {
            input_dim,
            units,
            layers,
            relu_units,
            theta: Vec::new(),
        };
        p.theta = vec![0.0; p.head_offsets().end];
        p
    }

    fn layer_offsets(&self) -> Vec<LayerOff> {
        let n = self.units;
        let mut off = 0;
        (0..self.layers)
            .map(|l| {
                let input = if l == 0 { self.input_dim } else { n };
                let w = off;
                let u = w + 4 * n * input;
                let b = u + 4 * n * n;
                off = b + 4 * n;
                LayerOff {
                    input,
                    w,
                    u,
                    b,
                    end: off,
                }
            })
            .collect()
    }

    fn head_offsets(&self) -> HeadOff {
        let start = self.layer_offsets().last().map_or(0, |l| l.end);
        let (n, r) = (self.units, self.relu_units);
        let wr = start;
        let br = wr + r * n;
        let wo = br + r;
        let bo = wo + 2 * r;
        HeadOff {
            wr,
            br,
            wo,
            bo,
            end: bo + 2,
        }
    }

    pub(crate) fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.theta.len()];
        for l in self.layer_offsets() {
            mask[l.b..l.end].iter_mut().for_each(|v| *v = true);
        }
        let h = self.head_offsets();
        mask[h.br..h.wo].iter_mut().for_each(|v| *v = true);
        mask[h.bo..h.end].iter_mut().for_each(|v| *v = true);
        mask
    }

    pub(crate) fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.units;
        for l in self.layer_offsets() {
            fill_uniform(&mut self.theta[l.w..l.u], l.input, rng);
            fill_uniform(&mut self.theta[l.u..l.b], n, rng);
            self.theta[l.b..l.end].iter_mut().for_each(|v| *v = 0.0);
            self.theta[l.b + n..l.b + 2 * n].iter_mut().for_each(|v| *v = 1.0);
        }
        let h = self.head_offsets();
        fill_uniform(&mut self.theta[h.wr..h.br], n, rng);
        fill_uniform(&mut self.theta[h.wo..h.bo], self.relu_units, rng);
    }

    /// Runs the stack over steps `0..steps` of `w` from `init`.
    fn run(&self, w: &Window, steps: usize, init: &LstmState) -> Trace {
        let n = self.units;
        let offs = self.layer_offsets();
        let mut tr = Trace {
            gates: Vec::with_capacity(self.layers),
            c: Vec::with_capacity(self.layers),
            h: Vec::with_capacity(self.layers),
            tc: Vec::with_capacity(self.layers),
        };
        for (l, lo) in offs.iter().enumerate() {
            let mut gates = vec![0.0; steps * 4 * n];
            let mut c = vec![0.0; (steps + 1) * n];
            let mut h = vec![0.0; (steps + 1) * n];
            let mut tc = vec![0.0; steps * n];
            c[..n].copy_from_slice(&init.c[l]);
            h[..n].copy_from_slice(&init.h[l]);
            let wmat = &self.theta[lo.w..lo.u];
            let umat = &self.theta[lo.u..lo.b];
            let bias = &self.theta[lo.b..lo.end];
            for t in 0..steps {
                let x = if l == 0 {
                    w.step(t)
                } else {
                    &tr.h[l - 1][(t + 1) * n..(t + 2) * n]
                };
                let g = &mut gates[t * 4 * n..(t + 1) * 4 * n];
                g.copy_from_slice(bias);
                gemv_acc(g, wmat, x);
                gemv_acc(g, umat, &h[t * n..(t + 1) * n]);
                for k in 0..n {
                    let i = sigmoid(g[k]);
                    let f = sigmoid(g[n + k]);
                    let cand = g[2 * n + k].tanh();
                    let o = sigmoid(g[3 * n + k]);
                    g[k] = i;
                    g[n + k] = f;
                    g[2 * n + k] = cand;
                    g[3 * n + k] = o;
                    let ct = f * c[t * n + k] + i * cand;
                    c[(t + 1) * n + k] = ct;
                    let th = ct.tanh();
                    tc[t * n + k] = th;
                    h[(t + 1) * n + k] = o * th;
                }
            }
            tr.gates.push(gates);
            tr.c.push(c);
            tr.h.push(h);
            tr.tc.push(tc);
        }
        tr
    }

    /// ReLU layer output and logits from a top-layer hidden state.
    fn head(&self, h: &[f64]) -> (Vec<f64>, f64, f64) {
        let ho = self.head_offsets();
        let mut r = self.theta[ho.br..ho.wo].to_vec();
        gemv_acc(&mut r, &self.theta[ho.wr..ho.br], h);
        r.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = self.theta[ho.bo..ho.end].to_vec();
        gemv_acc(&mut z, &self.theta[ho.wo..ho.bo], &r);
        (r, z[0], z[1])
    }

    fn top<'a>(&self, tr: &'a Trace, t: usize) -> &'a [f64] {
        let n = self.units;
        &tr.h[self.layers - 1][(t + 1) * n..(t + 2) * n]
    }

    pub(crate) fn backward(
        &self,
        w: &Window,
        targets: &[(usize, Move)],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let n = self.units;
        let steps = targets.iter().map(|t| t.0).max().unwrap_or(0) + 1;
        let tr = self.run(w, steps, &LstmState::zeros(self));
        let ho = self.head_offsets();
        let offs = self.layer_offsets();

        let mut dh_in = vec![0.0; steps * n];
        let mut total = 0.0;
        for &(t, label) in targets {
            let htop = self.top(&tr, t);
            let (r, zu, zd) = self.head(htop);
            if !(zu.is_finite() && zd.is_finite()) {
                return Err(ModelError::NonFiniteActivation { step: t });
            }
            let (loss, _, dz) = softmax_loss(zu, zd, label, weight);
            total += loss;
            outer_acc(&mut grad[ho.wo..ho.bo], &dz, &r);
            grad[ho.bo] += dz[0];
            grad[ho.bo + 1] += dz[1];
            let mut dr = vec![0.0; self.relu_units];
            gemv_t_acc(&mut dr, &self.theta[ho.wo..ho.bo], &dz);
            for (d, v) in dr.iter_mut().zip(&r) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
            outer_acc(&mut grad[ho.wr..ho.br], &dr, htop);
            for (g, d) in grad[ho.br..ho.wo].iter_mut().zip(&dr) {
                *g += d;
            }
            gemv_t_acc(&mut dh_in[t * n..(t + 1) * n], &self.theta[ho.wr..ho.br], &dr);
        }

        let mut dpre = vec![0.0; 4 * n];
        let mut dh = vec![0.0; n];
        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        for l in (0..self.layers).rev() {
            let lo = offs[l];
            let mut dx_below = if l > 0 { vec![0.0; steps * n] } else { Vec::new() };
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            dc_next.iter_mut().for_each(|v| *v = 0.0);
            let (gates, c, h, tc) = (&tr.gates[l], &tr.c[l], &tr.h[l], &tr.tc[l]);
            for t in (0..steps).rev() {
                for k in 0..n {
                    dh[k] = dh_in[t * n + k] + dh_next[k];
                }
                let g = &gates[t * 4 * n..(t + 1) * 4 * n];
                for k in 0..n {
                    let (i, f, cand, o) = (g[k], g[n + k], g[2 * n + k], g[3 * n + k]);
                    let th = tc[t * n + k];
                    let dc = dh[k] * o * (1.0 - th * th) + dc_next[k];
                    dpre[k] = dc * cand * i * (1.0 - i);
                    dpre[n + k] = dc * c[t * n + k] * f * (1.0 - f);
                    dpre[2 * n + k] = dc * i * (1.0 - cand * cand);
                    dpre[3 * n + k] = dh[k] * th * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                let x = if l == 0 {
                    w.step(t)
                } else {
                    &tr.h[l - 1][(t + 1) * n..(t + 2) * n]
                };
                outer_acc(&mut grad[lo.w..lo.u], &dpre, x);
                outer_acc(&mut grad[lo.u..lo.b], &dpre, &h[t * n..(t + 1) * n]);
                for (gv, d) in grad[lo.b..lo.end].iter_mut().zip(&dpre) {
                    *gv += d;
                }
                if l > 0 {
                    gemv_t_acc(&mut dx_below[t * n..(t + 1) * n], &self.theta[lo.w..lo.u], &dpre);
                }
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                gemv_t_acc(&mut dh_next, &self.theta[lo.u..lo.b], &dpre);
            }
            if l > 0 {
                dh_in = dx_below;
            }
        }
        Ok(total)
    }
}

/// Per-step predictions from a zero initial state, and the final state.
pub fn lstm_forward(p: &LstmParams, w: &Window) -> Result<(Vec<Prediction>, LstmState), ModelError> {
    lstm_forward_from(p, &LstmState::zeros(p), w)
}

/// Continues the recursion from `state` through `w`.
pub fn lstm_forward_from(
    p: &LstmParams,
    state: &LstmState,
    w: &Window,
) -> Result<(Vec<Prediction>, LstmState), ModelError> {
    if w.dim() != p.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: p.input_dim,
            found: w.dim(),
        });
    }
    let n = p.units;
    let steps = w.len();
    let tr = p.run(w, steps, state);
    let mut preds = Vec::with_capacity(steps);
    for t in 0..steps {
        let (_, zu, zd) = p.head(p.top(&tr, t));
        if !(zu.is_finite() && zd.is_finite()) {
            return Err(ModelError::NonFiniteActivation { step: t });
        }
        preds.push(Prediction::from_logits(zu, zd));
    }
    let last = LstmState {
        h: tr.h.iter().map(|h| h[steps * n..].to_vec()).collect(),
        c: tr.c.iter().map(|c| c[steps * n..].to_vec()).collect(),
    };
    Ok((preds, last))
}
