use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{Regime, SimConfig, SimError};

/// Closed interval for a log-uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn point(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn check(&self, param: &str) -> Result<(), SimError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo > 0.0 && self.lo <= self.hi) {
            return Err(SimError::EmptyRange {
                param: param.to_string(),
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    /// Log-uniform draw.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        if self.lo == self.hi {
            return self.lo;
        }
        (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
    }
}

/// Per-parameter intervals; unset parameters keep the template value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    #[serde(default)]
    pub lambda: Option<Range>,
    #[serde(default)]
    pub mu: Option<Range>,
    #[serde(default)]
    pub theta_c: Option<Range>,
    #[serde(default)]
    pub initial_depth: Option<Range>,
    #[serde(default)]
    pub activity_skew: Option<Range>,
    /// Common multiplier on every rate (including regime flips); leaves the
    /// embedded jump chain, and hence the oracle, unchanged.
    #[serde(default)]
    pub rate_scale: Option<Range>,
}

impl ParamRanges {
    fn named(&self) -> [(&'static str, Option<Range>); 6] {
        [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("theta_c", self.theta_c),
            ("initial_depth", self.initial_depth),
            ("activity_skew", self.activity_skew),
            ("rate_scale", self.rate_scale),
        ]
    }
}

/// Draws `n_stocks` configurations independently and log-uniformly from
/// `ranges`, filling everything else from `template`. Stock ids are the
/// template id with a zero-padded index; per-stock seeds derive from `seed`.
pub fn make_universe(
    n_stocks: usize,
    template: &SimConfig,
    ranges: &ParamRanges,
    seed: u64,
) -> Result<Vec<SimConfig>, SimError> {
    if n_stocks == 0 {
        return Err(SimError::InvalidConfig {
            field: "n_stocks".into(),
            reason: "must be at least 1".into(),
        });
    }
    for (name, r) in ranges.named() {
        if let Some(r) = r {
            r.check(name)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_stocks);
    for i in 0..n_stocks {
        let mut cfg = template.clone();
        cfg.stock_id = if n_stocks == 1 {
            template.stock_id.clone()
        } else {
            format!("{}{:03}", template.stock_id, i)
        };
        let mut draw = |r: Option<Range>, current: f64| r.map_or(current, |r| r.draw(&mut rng));
        cfg.lambda = draw(ranges.lambda, cfg.lambda);
        cfg.mu = draw(ranges.mu, cfg.mu);
        cfg.theta_c = draw(ranges.theta_c, cfg.theta_c);
        cfg.initial_depth = draw(ranges.initial_depth, cfg.initial_depth);
        cfg.activity_skew = draw(ranges.activity_skew, cfg.activity_skew);
        let scale = draw(ranges.rate_scale, 1.0);
        cfg.seed = if n_stocks == 1 {
            template.seed
        } else {
            rng.gen()
        };
        cfg.lambda *= scale;
        cfg.mu *= scale;
        cfg.theta_c *= scale;
        if let Regime::Persistent { kappa, bias } = cfg.regime {
            cfg.regime = Regime::Persistent {
                kappa: kappa * scale,
                bias,
            };
        }
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}
