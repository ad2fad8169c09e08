//! Properties of the synthetic order flow and of universe generation.

use priceform_core::features::{EventDataset, FeatureSpec, Move};
use priceform_core::sim::{make_universe, simulate_stock, ParamRanges, Range, Regime, SimConfig};
use proptest::prelude::*;

fn base(seed: u64) -> SimConfig {
    let mut c = SimConfig::memoryless("S", 1.0, 1.0, 0.4);
    c.seed = seed;
    c
}

fn moves(cfg: &SimConfig, n: usize) -> Vec<Move> {
    let msgs = simulate_stock(cfg, n).unwrap();
    EventDataset::from_messages(&cfg.stock_id, &msgs, cfg.tick_size, FeatureSpec::depth_only(1))
        .unwrap()
        .moves
}

/// Fraction of consecutive moves in the same direction.
fn persistence(m: &[Move]) -> f64 {
    m.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (m.len() - 1) as f64
}

#[test]
fn scaling_every_rate_only_rescales_the_clock() {
    let a = base(9);
    let mut b = base(9);
    b.lambda *= 2.5;
    b.mu *= 2.5;
    b.theta_c *= 2.5;
    let (ma, mb) = (simulate_stock(&a, 20_000).unwrap(), simulate_stock(&b, 20_000).unwrap());
    let start = a.start_time;
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!((x.kind, x.order_id, x.size, x.price, x.direction), (y.kind, y.order_id, y.size, y.price, y.direction));
        let (tx, ty) = (x.time.as_secs_f64() - start, y.time.as_secs_f64() - start);
        assert!((tx - 2.5 * ty).abs() < 1e-6 * tx.max(1.0), "{tx} vs {ty}");
    }
}

#[test]
fn persistent_pressure_lengthens_runs_of_moves() {
    let memoryless = persistence(&moves(&base(1), 400_000));
    let mut p = base(1);
    p.regime = Regime::Persistent { kappa: 0.005, bias: 0.4 };
    let persistent = persistence(&moves(&p, 400_000));
    assert!(persistent > memoryless + 0.03, "persistent {persistent:.4} vs memoryless {memoryless:.4}");
}

#[test]
fn balanced_book_moves_both_ways_equally() {
    let m = moves(&base(4), 600_000);
    let n = m.len() as f64;
    let up = m.iter().filter(|&&x| x == Move::Up).count() as f64 / n;
    // moves alternate in runs, so allow a wider band than independent draws would need
    assert!((up - 0.5).abs() < 6.0 * (0.25 / n).sqrt(), "up fraction {up:.4} over {n}");
}

#[test]
fn invalid_parameters_are_named() {
    for (field, mutate) in [
        ("lambda", Box::new(|c: &mut SimConfig| c.lambda = -1.0) as Box<dyn Fn(&mut SimConfig)>),
        ("mu", Box::new(|c: &mut SimConfig| c.mu = f64::NAN)),
        ("theta_c", Box::new(|c: &mut SimConfig| c.theta_c = 0.0)),
        ("initial_depth", Box::new(|c: &mut SimConfig| c.initial_depth = 0.5)),
        ("regime.kappa", Box::new(|c: &mut SimConfig| c.regime = Regime::Persistent { kappa: 0.0, bias: 0.1 })),
    ] {
        let mut c = base(0);
        mutate(&mut c);
        let err = simulate_stock(&c, 10).unwrap_err().to_string();
        assert!(err.contains(field), "{field}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn universe_draws_stay_in_range(
        seed in any::<u64>(),
        n in 1usize..30,
        (lo, width) in (0.1f64..2.0, 1.0f64..5.0),
        (slo, swidth) in (0.2f64..1.0, 1.0f64..4.0),
    ) {
        let ranges = ParamRanges {
            lambda: Some(Range::new(lo, lo * width)),
            rate_scale: Some(Range::new(slo, slo * swidth)),
            ..Default::default()
        };
        let t = base(0);
        let u = make_universe(n, &t, &ranges, seed).unwrap();
        prop_assert_eq!(&u, &make_universe(n, &t, &ranges, seed).unwrap());
        let mut ids: Vec<_> = u.iter().map(|c| c.stock_id.clone()).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        for c in &u {
            // mu and theta_c carry the common scale alone
            let scale = c.mu / t.mu;
            prop_assert!(scale >= slo * (1.0 - 1e-12) && scale <= slo * swidth * (1.0 + 1e-12));
            prop_assert!((c.theta_c / t.theta_c - scale).abs() < 1e-9);
            let lambda = c.lambda / scale;
            prop_assert!(lambda >= lo * (1.0 - 1e-12) && lambda <= lo * width * (1.0 + 1e-12));
        }
    }
}
