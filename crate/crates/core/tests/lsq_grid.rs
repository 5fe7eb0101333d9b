//! LSQ against an exhaustive (scale, zero) grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use timeq_core::quant::{estimate_range, lsq_optimize, Granularity, LsqConfig, RangeMethod};
use timeq_core::Tensor;

/// Best objective over s on a 1e-3 grid up to twice the largest magnitude and
/// every integer zero offset.
fn grid_optimum(x: &[f64], bits: u32) -> f64 {
    let q = ((1u32 << bits) - 1) as f64;
    let span = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 2.0;
    let steps = (span / 1e-3).ceil() as usize + 1;
    let mut best = f64::INFINITY;
    for k in 1..=steps {
        let s = k as f64 * 1e-3;
        for z in 0..=(q as i64) {
            let err: f64 = x
                .iter()
                .map(|&v| {
                    let c = ((v / s).round_ties_even() + z as f64).clamp(0.0, q);
                    let d = s * (c - z as f64) - v;
                    d * d
                })
                .sum();
            best = best.min(err);
        }
    }
    best
}

#[test]
fn within_five_percent_of_grid_at_three_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let v: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(vec![8], v.clone()).unwrap();
        let p0 = estimate_range(&[x.clone()], RangeMethod::MinMax, 3, Granularity::PerTensor, false).unwrap();
        let out = lsq_optimize(&x, &p0, &LsqConfig::default(), None).unwrap();
        let grid = grid_optimum(&v, 3);
        assert!(out.objective <= out.initial_objective);
        assert!(out.objective <= 1.05 * grid, "case {case}: {} vs grid {grid}", out.objective);
    }
}

#[test]
fn per_channel_lsq_is_never_worse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::new(vec![16, 4], v).unwrap();
    let g = Granularity::PerChannel { axis: 1 };
    let p0 = estimate_range(&[x.clone()], RangeMethod::MinMax, 4, g, false).unwrap();
    let out = lsq_optimize(&x, &p0, &LsqConfig::default(), None).unwrap();
    assert!(out.objective < out.initial_objective);
    assert_eq!(out.params.scale.len(), 4);
}
