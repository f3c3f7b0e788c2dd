use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ModelParams, NetConfig, Weights};
use crate::error::{Error, Result};
use crate::features::PairFeatures;
use crate::num::Real;
use crate::scene::RefExpression;

/// Activations of one timestep, kept for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache<T> {
    pub input_token: usize,
    pub target_token: usize,
    /// Embedding after dropout.
    pub embed: Vec<T>,
    pub embed_mask: Option<Vec<T>>,
    /// Activated gates, `[i | f | o | g]`.
    pub gates: Vec<T>,
    pub cell: Vec<T>,
    pub tanh_cell: Vec<T>,
    pub hidden: Vec<T>,
    pub hidden_mask: Option<Vec<T>>,
    /// Hidden state after dropout, as seen by the output layer.
    pub hidden_out: Vec<T>,
    pub probs: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub feat: Vec<T>,
    pub steps: Vec<StepCache<T>>,
    /// Log-probability of each predicted token (every token after `<bos>`).
    pub word_logps: Vec<T>,
    pub logp: T,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

fn dropout_mask<T: Real>(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - ratio));
    (0..n).map(|_| if rng.gen::<f64>() < ratio { T::zero() } else { keep }).collect()
}

/// Scores `expr` under the pair features. Dropout is applied to the
/// embedding and LSTM outputs only when `dropout_rng` is given.
pub fn forward_logprob<T: Real>(
    cfg: &NetConfig,
    w: &Weights<T>,
    expr: &RefExpression,
    feat: &PairFeatures<T>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace<T>> {
    expr.validate(cfg.vocab_size)?;
    if feat.len() != cfg.pair_feature_dim {
        return Err(Error::DimensionMismatch { expected: cfg.pair_feature_dim, got: feat.len() });
    }
    let (e_dim, f_dim, h_dim, v_dim) = (cfg.embed_dim, cfg.pair_feature_dim, cfg.hidden_dim, cfg.vocab_size);
    let feat = feat.as_slice();
    let use_dropout = dropout_rng.is_some() && cfg.dropout_ratio > 0.0;

    // Pair features are identical at every step: fold them into the bias once.
    let mut base = w.lstm_b.data.clone();
    for (r, b) in base.iter_mut().enumerate() {
        *b += dot(&w.lstm_w.row(r)[e_dim..e_dim + f_dim], feat);
    }

    let n = expr.scored_len();
    let mut steps = Vec::with_capacity(n);
    let mut word_logps = Vec::with_capacity(n);
    let mut h_prev = vec![T::zero(); h_dim];
    let mut c_prev = vec![T::zero(); h_dim];
    let mut z = vec![T::zero(); 4 * h_dim];

    for t in 0..n {
        let (tok, next) = (expr.tokens[t], expr.tokens[t + 1]);
        let mut embed = w.embedding.row(tok).to_vec();
        let embed_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if use_dropout => {
                let m = dropout_mask::<T>(e_dim, cfg.dropout_ratio, rng);
                embed.iter_mut().zip(&m).for_each(|(x, &k)| *x *= k);
                Some(m)
            }
            _ => None,
        };

        for (r, zr) in z.iter_mut().enumerate() {
            let row = w.lstm_w.row(r);
            *zr = base[r] + dot(&row[..e_dim], &embed) + dot(&row[e_dim + f_dim..], &h_prev);
        }
        let mut gates = vec![T::zero(); 4 * h_dim];
        for k in 0..3 * h_dim {
            gates[k] = sigmoid(z[k]);
        }
        for k in 3 * h_dim..4 * h_dim {
            gates[k] = z[k].tanh();
        }
        let mut cell = vec![T::zero(); h_dim];
        let mut tanh_cell = vec![T::zero(); h_dim];
        let mut hidden = vec![T::zero(); h_dim];
        for j in 0..h_dim {
            let (i, f, o, g) = (gates[j], gates[h_dim + j], gates[2 * h_dim + j], gates[3 * h_dim + j]);
            cell[j] = f * c_prev[j] + i * g;
            tanh_cell[j] = cell[j].tanh();
            hidden[j] = o * tanh_cell[j];
        }
        let mut hidden_out = hidden.clone();
        let hidden_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if use_dropout => {
                let m = dropout_mask::<T>(h_dim, cfg.dropout_ratio, rng);
                hidden_out.iter_mut().zip(&m).for_each(|(x, &k)| *x *= k);
                Some(m)
            }
            _ => None,
        };

        let mut logits: Vec<T> = (0..v_dim).map(|v| w.out_b.data[v] + dot(w.out_w.row(v), &hidden_out)).collect();
        let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        let log_z = max + sum.ln();
        let probs: Vec<T> = logits.into_iter().map(|e| e / sum).collect();
        let row_logit = w.out_b.data[next] + dot(w.out_w.row(next), &hidden_out);
        word_logps.push(row_logit - log_z);

        c_prev.clone_from(&cell);
        h_prev.clone_from(&hidden);
        steps.push(StepCache {
            input_token: tok,
            target_token: next,
            embed,
            embed_mask,
            gates,
            cell,
            tanh_cell,
            hidden,
            hidden_mask,
            hidden_out,
            probs,
        });
    }

    let logp = word_logps.iter().copied().sum();
    Ok(ForwardTrace { feat: feat.to_vec(), steps, word_logps, logp })
}

/// Gradient of `sum_t loss_grads[t] * word_logps[t]` with respect to every
/// tensor, honouring the dropout masks recorded in the trace.
pub fn backward<T: Real>(
    cfg: &NetConfig,
    w: &Weights<T>,
    trace: &ForwardTrace<T>,
    loss_grads: &[T],
) -> Result<Gradients<T>> {
    let mut g = Gradients::zeros(cfg);
    backward_into(cfg, w, trace, loss_grads, &mut g)?;
    Ok(g)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into<T: Real>(
    cfg: &NetConfig,
    w: &Weights<T>,
    trace: &ForwardTrace<T>,
    loss_grads: &[T],
    grads: &mut Gradients<T>,
) -> Result<()> {
    let n = trace.steps.len();
    if loss_grads.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: loss_grads.len() });
    }
    if trace.feat.len() != cfg.pair_feature_dim || !w.shapes_match(cfg) || !grads.shapes_match(cfg) {
        return Err(Error::DimensionMismatch { expected: cfg.pair_feature_dim, got: trace.feat.len() });
    }
    if loss_grads.iter().all(|g| g.is_zero()) {
        return Ok(());
    }
    let (e_dim, f_dim, h_dim, v_dim) = (cfg.embed_dim, cfg.pair_feature_dim, cfg.hidden_dim, cfg.vocab_size);
    let zeros = vec![T::zero(); h_dim];

    let mut dh_next = vec![T::zero(); h_dim];
    let mut dc_next = vec![T::zero(); h_dim];
    let mut dz_sum = vec![T::zero(); 4 * h_dim];
    let mut dz = vec![T::zero(); 4 * h_dim];
    let mut d_embed = vec![T::zero(); e_dim];
    let mut dh_out = vec![T::zero(); h_dim];

    for t in (0..n).rev() {
        let s = &trace.steps[t];
        let gt = loss_grads[t];

        // d(logp_t)/d(logits) = onehot(target) - probs
        dh_out.iter_mut().for_each(|v| *v = T::zero());
        if !gt.is_zero() {
            for v in 0..v_dim {
                let ind = if v == s.target_token { T::one() } else { T::zero() };
                let dl = gt * (ind - s.probs[v]);
                grads.out_b.data[v] += dl;
                axpy(grads.out_w.row_mut(v), dl, &s.hidden_out);
                axpy(&mut dh_out, dl, w.out_w.row(v));
            }
        }

        let (c_prev, h_prev) = if t > 0 {
            (&trace.steps[t - 1].cell[..], &trace.steps[t - 1].hidden[..])
        } else {
            (&zeros[..], &zeros[..])
        };
        for j in 0..h_dim {
            let mut dh = dh_next[j];
            dh += match &s.hidden_mask {
                Some(m) => dh_out[j] * m[j],
                None => dh_out[j],
            };
            let (i, f, o, g) = (s.gates[j], s.gates[h_dim + j], s.gates[2 * h_dim + j], s.gates[3 * h_dim + j]);
            let tc = s.tanh_cell[j];
            let d_o = dh * tc;
            let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
            let di = dc * g;
            let dg = dc * i;
            let df = dc * c_prev[j];
            dc_next[j] = dc * f;
            dz[j] = di * i * (T::one() - i);
            dz[h_dim + j] = df * f * (T::one() - f);
            dz[2 * h_dim + j] = d_o * o * (T::one() - o);
            dz[3 * h_dim + j] = dg * (T::one() - g * g);
        }

        d_embed.iter_mut().for_each(|v| *v = T::zero());
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr.is_zero() {
                continue;
            }
            dz_sum[r] += dzr;
            let row = w.lstm_w.row(r);
            axpy(&mut d_embed, dzr, &row[..e_dim]);
            axpy(&mut dh_next, dzr, &row[e_dim + f_dim..]);
            let grow = grads.lstm_w.row_mut(r);
            axpy(&mut grow[..e_dim], dzr, &s.embed);
            axpy(&mut grow[e_dim + f_dim..], dzr, h_prev);
        }
        let erow = grads.embedding.row_mut(s.input_token);
        match &s.embed_mask {
            Some(m) => {
                for k in 0..e_dim {
                    erow[k] += d_embed[k] * m[k];
                }
            }
            None => axpy(erow, T::one(), &d_embed),
        }
    }

    for (r, &dzr) in dz_sum.iter().enumerate() {
        grads.lstm_b.data[r] += dzr;
        axpy(&mut grads.lstm_w.row_mut(r)[e_dim..e_dim + f_dim], dzr, &trace.feat);
    }
    Ok(())
}

impl<T: Real> ModelParams<T> {
    pub fn forward(
        &self,
        expr: &RefExpression,
        feat: &PairFeatures<T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace<T>> {
        forward_logprob(&self.config, &self.weights, expr, feat, dropout_rng)
    }

    pub fn backward(&self, trace: &ForwardTrace<T>, loss_grads: &[T]) -> Result<Gradients<T>> {
        backward(&self.config, &self.weights, trace, loss_grads)
    }
}
