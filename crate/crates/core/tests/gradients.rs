//! Central finite differences against the analytic gradients.

mod common;

use common::{gradient_batch as batch, random_dataset, worst_gradient_error, FD_TOLERANCE};
use priceform_core::features::{Corpus, SequenceSample};
use priceform_core::models::{Architecture, LossMode, Model};

fn check(model: &Model, samples: &[SequenceSample], l2: f64, mode: LossMode) {
    let (rel, i) = worst_gradient_error(model, samples, l2, mode);
    assert!(
        rel < FD_TOLERANCE,
        "{} coordinate {i}: relative error {rel:e}",
        model.architecture().family()
    );
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    let ds = random_dataset(40, 1);
    let b = batch(&ds, 7);
    for (seed, mode) in [(3, LossMode::LastStep), (4, LossMode::PerStep)] {
        let m = Model::init(&Architecture::lstm(5), 4, seed).unwrap();
        check(&m, &b, 1e-3, mode);
    }
}

#[test]
fn lstm_with_distinct_relu_width() {
    let ds = random_dataset(40, 2);
    let b = batch(&ds, 5);
    let arch = Architecture::Lstm {
        units: 4,
        layers: 2,
        relu_units: Some(6),
    };
    let m = Model::init(&arch, 4, 8).unwrap();
    check(&m, &b, 0.0, LossMode::PerStep);
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let ds = random_dataset(40, 5);
    let b = batch(&ds, 7);
    for (seed, mode) in [(1, LossMode::LastStep), (2, LossMode::PerStep)] {
        let mut m = Model::init(&Architecture::Linear { features: 5 }, 4, seed).unwrap();
        m.params_mut().iter_mut().rev().take(2).for_each(|v| *v = 0.3);
        check(&m, &b, 1e-3, mode);
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let ds = random_dataset(40, 6);
    let b = batch(&ds, 1);
    let m = Model::init(&Architecture::Mlp { hidden: vec![6, 5] }, 4, 11).unwrap();
    check(&m, &b, 1e-3, LossMode::LastStep);
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let ds = random_dataset(40, 7);
    let b = batch(&ds, 6);
    let m = Model::init(&Architecture::lstm(3), 4, 12).unwrap();
    let (_, g) = m.loss_and_gradient(&b, 0.0, LossMode::LastStep).unwrap();
    let mut mean = vec![0.0; m.n_params()];
    for s in &b {
        let (_, gs) = m.loss_and_gradient(std::slice::from_ref(s), 0.0, LossMode::LastStep).unwrap();
        for (a, v) in mean.iter_mut().zip(gs) {
            *a += v / b.len() as f64;
        }
    }
    for (a, v) in g.iter().zip(&mean) {
        assert!((a - v).abs() < 1e-13);
    }
}

#[test]
fn pooled_corpus_samples_are_usable() {
    let c = Corpus::new(vec![random_dataset(20, 1), random_dataset(30, 2)]);
    let refs = c.all_refs();
    assert_eq!(refs.len(), 19 + 29);
    let m = Model::init(&Architecture::lstm(3), 4, 1).unwrap();
    let samples: Vec<_> = refs.iter().map(|r| c.sample(*r, 4)).collect();
    assert!(m.loss(&samples, 0.0, LossMode::LastStep).unwrap().is_finite());
}
