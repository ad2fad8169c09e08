use std::fmt::Write as _;

use serde::Serialize;

/// Cells with fewer observations are flagged sparse and not compared.
pub const MIN_CELL_COUNT: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceCell {
    pub bid_bin: usize,
    pub ask_bin: usize,
    pub count: usize,
    pub model_p_down: f64,
    pub oracle_p_down: f64,
    pub sparse: bool,
}

/// Mean predicted and oracle `p_down` per (bid depth, ask depth) quantile cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceTable {
    /// Upper edges (inclusive) of the depth bins, shared by both axes and
    /// taken from the pooled bid and ask touch sizes.
    pub edges: Vec<u32>,
    pub cells: Vec<SurfaceCell>,
}

impl SurfaceTable {
    pub fn bins(&self) -> usize {
        self.edges.len()
    }

    pub fn cell(&self, bid_bin: usize, ask_bin: usize) -> &SurfaceCell {
        &self.cells[bid_bin * self.bins() + ask_bin]
    }

    /// Largest model-oracle gap over non-sparse cells.
    pub fn max_abs_gap(&self) -> f64 {
        self.dense()
            .map(|c| (c.model_p_down - c.oracle_p_down).abs())
            .fold(0.0, f64::max)
    }

    /// Largest distance of a non-sparse diagonal cell's model `p_down` from 0.5.
    pub fn max_diagonal_offset(&self) -> f64 {
        self.dense()
            .filter(|c| c.bid_bin == c.ask_bin)
            .map(|c| (c.model_p_down - 0.5).abs())
            .fold(0.0, f64::max)
    }

    /// Fraction of rows along which the model's `p_down` rises with ask depth.
    pub fn monotone_in_ask(&self) -> f64 {
        let n = self.bins();
        let mut rows = 0;
        let mut good = 0;
        for b in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|a| self.cell(b, a))
                .filter(|c| !c.sparse)
                .map(|c| c.model_p_down)
                .collect();
            if row.len() < 2 {
                continue;
            }
            rows += 1;
            if row.windows(2).all(|w| w[1] >= w[0]) {
                good += 1;
            }
        }
        if rows == 0 {
            0.0
        } else {
            good as f64 / rows as f64
        }
    }

    pub fn dense(&self) -> impl Iterator<Item = &SurfaceCell> {
        self.cells.iter().filter(|c| !c.sparse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bid_bin,ask_bin,bid_upper,ask_upper,count,model_p_down,oracle_p_down,sparse\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{}",
                c.bid_bin,
                c.ask_bin,
                self.edges[c.bid_bin],
                self.edges[c.ask_bin],
                c.count,
                c.model_p_down,
                c.oracle_p_down,
                c.sparse
            );
        }
        s
    }
}

/// Bins observations `(bid size, ask size, model p_down, oracle p_down)`
/// on a `grid × grid` quantile lattice; tied quantiles merge bins.
pub fn sensitivity_surface(obs: &[(u32, u32, f64, f64)], grid: usize) -> SurfaceTable {
    assert!(grid >= 1);
    let mut sizes: Vec<u32> = obs.iter().flat_map(|o| [o.0, o.1]).collect();
    sizes.sort_unstable();
    let mut edges: Vec<u32> = (1..=grid)
        .filter_map(|i| {
            let idx = (i * sizes.len()).div_ceil(grid);
            sizes.get(idx.saturating_sub(1)).copied()
        })
        .collect();
    edges.dedup();
    let bins = edges.len();
    let bin = |q: u32| edges.partition_point(|&e| e < q).min(bins - 1);
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); bins * bins];
    for &(b, a, m, o) in obs {
        let cell = &mut acc[bin(b) * bins + bin(a)];
        cell.0 += 1;
        cell.1 += m;
        cell.2 += o;
    }
    let cells = acc
        .iter()
        .enumerate()
        .map(|(i, &(count, m, o))| SurfaceCell {
            bid_bin: i / bins,
            ask_bin: i % bins,
            count,
            model_p_down: if count > 0 { m / count as f64 } else { f64::NAN },
            oracle_p_down: if count > 0 { o / count as f64 } else { f64::NAN },
            sparse: count < MIN_CELL_COUNT,
        })
        .collect();
    SurfaceTable { edges, cells }
}
