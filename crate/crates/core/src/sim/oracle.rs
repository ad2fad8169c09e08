//! Exact probability that the bid queue empties before the ask queue.
//!
//! The two touch queues evolve independently as birth-death chains (birth
//! `λ`, death `μ + θ·q`) truncated at `N` shares with a reflecting upper
//! boundary. The absorption probability `p(i, j)` satisfies, for
//! `1 ≤ i, j ≤ N`,
//!
//! ```text
//! R(i,j)·p(i,j) = λb·p(i+1,j) + λa·p(i,j+1) + db(i)·p(i-1,j) + da(j)·p(i,j-1)
//! p(0, j) = 1,  p(i, 0) = 0
//! ```
//!
//! With row-major ordering the system is banded with half-bandwidth `N`
//! and is a diagonally dominant M-matrix, so banded Gaussian elimination
//! without pivoting solves it exactly in `O(N^4)` operations.

use super::{Regime, SimConfig, SimError, TouchRates};

pub const DEFAULT_TRUNCATION: usize = 50;
/// Largest change tolerated when the truncation is doubled.
pub const TRUNCATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleQuery {
    pub bid_depth: u32,
    pub ask_depth: u32,
    pub truncation: usize,
}

impl OracleQuery {
    pub fn new(bid_depth: u32, ask_depth: u32) -> Self {
        OracleQuery {
            bid_depth,
            ask_depth,
            truncation: DEFAULT_TRUNCATION,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.bid_depth == 0 || self.ask_depth == 0 {
            return Err(SimError::InvalidQuery("queue sizes must be at least 1".into()));
        }
        if (self.truncation as u32) < self.bid_depth.max(self.ask_depth) {
            return Err(SimError::InvalidQuery(format!(
                "truncation {} below queried depth",
                self.truncation
            )));
        }
        Ok(())
    }
}

/// Solution of the truncated first-passage system for all `(i, j)`.
#[derive(Debug, Clone)]
pub struct FirstPassageSurface {
    truncation: usize,
    p: Vec<f64>,
}

struct Banded {
    n: usize,
    bw: usize,
    /// Row `r` holds columns `r - bw ..= r + bw` at offsets `0 ..= 2bw`.
    a: Vec<f64>,
}

impl Banded {
    fn new(n: usize, bw: usize) -> Self {
        Banded {
            n,
            bw,
            a: vec![0.0; n * (2 * bw + 1)],
        }
    }

    fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        let w = 2 * self.bw + 1;
        &mut self.a[r * w + (c + self.bw - r)]
    }

    fn solve(mut self, mut rhs: Vec<f64>) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.a[k * w + bw];
            let last = (k + bw).min(n - 1);
            for r in k + 1..=last {
                let f = self.a[r * w + (k + bw - r)] / pivot;
                if f == 0.0 {
                    continue;
                }
                self.a[r * w + (k + bw - r)] = 0.0;
                for c in k + 1..=last {
                    let v = self.a[k * w + (c + bw - k)];
                    self.a[r * w + (c + bw - r)] -= f * v;
                }
                rhs[r] -= f * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let last = (k + bw).min(n - 1);
            let mut s = rhs[k];
            for c in k + 1..=last {
                s -= self.a[k * w + (c + bw - k)] * rhs[c];
            }
            rhs[k] = s / self.a[k * w + bw];
        }
        rhs
    }
}

impl FirstPassageSurface {
    pub fn solve(rates: &TouchRates, truncation: usize) -> Self {
        assert!(truncation >= 1);
        let n = truncation;
        let idx = |i: usize, j: usize| (i - 1) * n + (j - 1);
        let mut m = Banded::new(n * n, n);
        let mut rhs = vec![0.0; n * n];
        for i in 1..=n {
            for j in 1..=n {
                let k = idx(i, j);
                let birth_b = if i < n { rates.bid.birth } else { 0.0 };
                let birth_a = if j < n { rates.ask.birth } else { 0.0 };
                let death_b = rates.bid.death(i as u32);
                let death_a = rates.ask.death(j as u32);
                *m.at(k, k) = birth_b + birth_a + death_b + death_a;
                if i < n {
                    *m.at(k, idx(i + 1, j)) -= birth_b;
                }
                if j < n {
                    *m.at(k, idx(i, j + 1)) -= birth_a;
                }
                if i > 1 {
                    *m.at(k, idx(i - 1, j)) -= death_b;
                } else {
                    rhs[k] += death_b;
                }
                if j > 1 {
                    *m.at(k, idx(i, j - 1)) -= death_a;
                }
            }
        }
        FirstPassageSurface {
            truncation,
            p: m.solve(rhs),
        }
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    /// Probability of a downward move from queue sizes `(bid, ask)`.
    pub fn p_down(&self, bid: u32, ask: u32) -> Option<f64> {
        let n = self.truncation;
        let (i, j) = (bid as usize, ask as usize);
        if i == 0 || j == 0 || i > n || j > n {
            return None;
        }
        Some(self.p[(i - 1) * n + (j - 1)])
    }

    /// Solves at `truncation` and `2·truncation`, failing if any point with
    /// both sizes at most `probe_max` moves by more than the tolerance.
    pub fn solve_checked(
        rates: &TouchRates,
        truncation: usize,
        probe_max: u32,
    ) -> Result<Self, SimError> {
        let coarse = Self::solve(rates, truncation);
        let fine = Self::solve(rates, 2 * truncation);
        let top = probe_max.min(truncation as u32);
        let mut change: f64 = 0.0;
        for i in 1..=top {
            for j in 1..=top {
                change = change.max((coarse.p_down(i, j).unwrap() - fine.p_down(i, j).unwrap()).abs());
            }
        }
        if change > TRUNCATION_TOLERANCE {
            return Err(SimError::TruncationTooSmall {
                truncation,
                change,
            });
        }
        Ok(coarse)
    }
}

/// First-passage probability of a downward move for a memoryless stock.
pub fn oracle_p_down(cfg: &SimConfig, query: OracleQuery) -> Result<f64, SimError> {
    if !matches!(cfg.regime, Regime::Memoryless) {
        return Err(SimError::NotMemoryless);
    }
    query.validate()?;
    let top = query.bid_depth.max(query.ask_depth);
    let surface = FirstPassageSurface::solve_checked(&cfg.touch_rates(), query.truncation, top)?;
    Ok(surface
        .p_down(query.bid_depth, query.ask_depth)
        .expect("validated query"))
}
