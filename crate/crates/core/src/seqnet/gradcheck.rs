//! Finite-difference verification of the hand-written backward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward_logprob, init_weights, NetConfig, Weights};
use crate::error::Result;
use crate::features::PairFeatures;
use crate::scene::{RefExpression, Vocabulary};

pub const FD_EPSILON: f64 = 1e-5;

/// Magnitudes below this are compared absolutely; central differences carry
/// roughly 1e-10 of rounding noise at `FD_EPSILON`.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central-difference gradient of `loss` at `w`, entry by entry.
pub fn numeric_gradient<F>(w: &Weights<f64>, eps: f64, mut loss: F) -> Weights<f64>
where
    F: FnMut(&Weights<f64>) -> f64,
{
    let mut probe = w.clone();
    let mut out = w.clone();
    for ti in 0..Weights::<f64>::NAMES.len() {
        let n = w.tensors()[ti].1.len();
        for k in 0..n {
            let orig = w.tensors()[ti].1.data[k];
            probe.tensors_mut()[ti].1.data[k] = orig + eps;
            let up = loss(&probe);
            probe.tensors_mut()[ti].1.data[k] = orig - eps;
            let down = loss(&probe);
            probe.tensors_mut()[ti].1.data[k] = orig;
            out.tensors_mut()[ti].1.data[k] = (up - down) / (2.0 * eps);
        }
    }
    out
}

/// Worst relative error per tensor between two gradients.
pub fn compare(analytic: &Weights<f64>, numeric: &Weights<f64>) -> BTreeMap<String, f64> {
    analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| {
            let worst = a.data.iter().zip(&n.data).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max);
            (name.to_string(), worst)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst error per tensor, over all trials.
    pub per_tensor: BTreeMap<String, f64>,
    pub trials: usize,
}

/// Random weights, expression, features and per-word loss gradients per
/// trial; dropout is off and everything runs in `f64`.
pub fn grad_check(cfg: &NetConfig, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout_ratio = 0.0;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor: BTreeMap<String, f64> = Weights::<f64>::NAMES.iter().map(|n| (n.to_string(), 0.0)).collect();

    for trial in 0..trials {
        cfg.rng_seed = seed.wrapping_add(trial as u64);
        cfg.init_scale = 0.5;
        let w = init_weights::<f64>(&cfg)?;
        let mut w = w;
        for b in w.lstm_b.data.iter_mut().chain(w.out_b.data.iter_mut()) {
            *b = rng.gen_range(-0.5..0.5);
        }
        let len = rng.gen_range(1..=5);
        let mut tokens = vec![Vocabulary::BOS];
        tokens.extend((0..len).map(|_| rng.gen_range(0..cfg.vocab_size)));
        tokens.push(Vocabulary::EOS);
        let expr = RefExpression { tokens, target: None };
        let feat = PairFeatures((0..cfg.pair_feature_dim).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let g: Vec<f64> = (0..expr.scored_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let trace = forward_logprob(&cfg, &w, &expr, &feat, None)?;
        let analytic = backward(&cfg, &w, &trace, &g)?;
        let numeric = numeric_gradient(&w, FD_EPSILON, |probe| {
            let tr = forward_logprob(&cfg, probe, &expr, &feat, None).expect("shapes fixed");
            tr.word_logps.iter().zip(&g).map(|(lp, gt)| lp * gt).sum()
        });
        for (name, err) in compare(&analytic, &numeric) {
            let e = per_tensor.entry(name).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let max_relative_error = per_tensor.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, per_tensor, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig { hidden_dim: 8, embed_dim: 8, vocab_size: 12, pair_feature_dim: 10, dropout_ratio: 0.0, init_scale: 0.5, rng_seed: 0 }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let r = grad_check(&small(), 3, 11).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert_eq!(r.per_tensor.keys().cloned().collect::<Vec<_>>(), {
            let mut v: Vec<String> = Weights::<f64>::NAMES.iter().map(|s| s.to_string()).collect();
            v.sort();
            v
        });
    }

    #[test]
    fn zero_loss_gradient_has_zero_error() {
        let cfg = small();
        let w = init_weights::<f64>(&cfg).unwrap();
        let expr = RefExpression { tokens: vec![0, 4, 1], target: None };
        let feat = PairFeatures(vec![0.1; 10]);
        let tr = forward_logprob(&cfg, &w, &expr, &feat, None).unwrap();
        let a = backward(&cfg, &w, &tr, &[0.0, 0.0]).unwrap();
        let n = numeric_gradient(&w, FD_EPSILON, |_| 0.0);
        assert!(compare(&a, &n).values().all(|&e| e == 0.0));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let cfg = small();
        let w = init_weights::<f64>(&cfg).unwrap();
        let expr = RefExpression { tokens: vec![0, 4, 5, 1], target: None };
        let feat = PairFeatures(vec![0.2; 10]);
        let tr = forward_logprob(&cfg, &w, &expr, &feat, None).unwrap();
        let mut a = backward(&cfg, &w, &tr, &[-1.0; 3]).unwrap();
        a.out_w.data[7] += 0.01;
        let n = numeric_gradient(&w, FD_EPSILON, |p| -forward_logprob(&cfg, p, &expr, &feat, None).unwrap().logp);
        assert!(compare(&a, &n)["out_w"] > 1e-3);
        assert!(compare(&a, &n)["lstm_w"] < 1e-4);
    }
}
