//! Attention decoder.
//!
//! At each output step the decoder scores every encoder column against its
//! recurrent state through a small additive network, softmaxes the scores
//! into attention weights, spreads each weight over its neighborhood with
//! the inclusive reweighting matrix, and takes the weighted sum of column
//! features as the step context. The context and the embedded previous
//! symbol drive an LSTM whose new hidden state both classifies the current
//! symbol and serves as that character's domain-adaptation feature.

use crate::config::ModelConfig;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::rnn::lstm_step;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Register all decoder parameters under the `dec.` prefix.
pub fn init_decoder<F: Scalar>(cfg: &ModelConfig, params: &mut ParamSet<F>, rng: &mut Rng) {
    let f = cfg.feature_dim;
    let h = cfg.decoder_hidden;
    let a = cfg.attention_hidden;
    let e = cfg.embed_dim;
    let c = cfg.num_classes();
    params.add_uniform("dec.emb", vec![cfg.embed_rows(), e], e, rng);
    params.add_uniform("dec.att.w_s", vec![a, h], h, rng);
    params.add_uniform("dec.att.w_x", vec![f, a], f, rng);
    params.add_zeros("dec.att.b", vec![a]);
    params.add_uniform("dec.att.v", vec![a], a, rng);
    params.add_uniform("dec.lstm.wx", vec![4 * h, e + f], e + f, rng);
    params.add_uniform("dec.lstm.wh", vec![4 * h, h], h, rng);
    params.add_zeros("dec.lstm.b", vec![4 * h]);
    params.add_uniform("dec.cls.w", vec![c, h], h, rng);
    params.add_zeros("dec.cls.b", vec![c]);
}

/// Inclusive-attention reweighting as a constant `[m, m]` matrix.
///
/// Row `j` of the result spells out where position `j`'s new weight comes
/// from: `lambda` stays on `j` itself, and each neighbor at distance
/// `i <= eta` contributes with weight proportional to `eta + 1 - i`.
/// Neighbors that would fall off either end redirect their share back to
/// `j`, which is what makes every column of the matrix sum to one and hence
/// preserves total attention mass. With `lambda = 1` the matrix is exactly
/// the identity.
pub fn inclusive_matrix<F: Scalar>(m: usize, lambda: f64, eta: usize) -> Tensor<F> {
    let mut t = vec![0.0f64; m * m];
    let norm = (1.0 - lambda) / (eta as f64 * (1.0 + eta as f64));
    for j in 0..m {
        t[j * m + j] += lambda;
        for i in 1..=eta {
            let c = norm * (eta + 1 - i) as f64;
            let left = j as isize - i as isize;
            let k = if left >= 0 { left as usize } else { j };
            t[j * m + k] += c;
            let right = j + i;
            let k = if right < m { right } else { j };
            t[j * m + k] += c;
        }
    }
    Tensor::from_vec(vec![m, m], t.into_iter().map(lit).collect())
        .expect("square matrix data length")
}

/// Raw attention weights for one step: `softmax(v . tanh(Wx x_j + Ws s + b))`
/// over the `m` column features.
pub fn attention_weights<F: Scalar>(
    params: &ParamSet<F>,
    features: &Tensor<F>,
    state_h: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let proj_cols = features.matmul(params.get("dec.att.w_x"))?;
    let proj_state = params.get("dec.att.w_s").matvec(state_h)?;
    proj_cols
        .add(&proj_state)?
        .add(params.get("dec.att.b"))?
        .tanh()
        .matvec(params.get("dec.att.v"))?
        .softmax()
}

pub use crate::config::CharFeature;

/// Everything produced by one teacher-forced pass.
pub struct TeacherForcing<F: Scalar> {
    /// Summed negative log-likelihood across all steps including the end
    /// marker.
    pub loss: Tensor<F>,
    /// Attention context per character step (no end-marker entry).
    pub char_contexts: Vec<Tensor<F>>,
    /// Decoder state per character step (no end-marker entry).
    pub char_states: Vec<Tensor<F>>,
    /// Raw attention rows per step, detached values.
    pub alphas: Vec<Vec<F>>,
    /// Reweighted attention rows per step, detached values.
    pub alphas_inclusive: Vec<Vec<F>>,
}

/// One decode step's outputs: raw attention, reweighted attention, context
/// vector, next hidden state, next cell state, class logits.
type StepOutputs<F> = (
    Tensor<F>,
    Tensor<F>,
    Tensor<F>,
    Tensor<F>,
    Tensor<F>,
    Tensor<F>,
);

fn step_forward<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    features: &Tensor<F>,
    incl: &Tensor<F>,
    prev_index: usize,
    h: &Tensor<F>,
    c: &Tensor<F>,
) -> Result<StepOutputs<F>, TensorError> {
    let alpha = attention_weights(params, features, h)?;
    let alpha_inc = incl.matvec(&alpha)?;
    let context = alpha_inc.vecmat(features)?;
    let emb = params
        .get("dec.emb")
        .gather(&[prev_index])?
        .reshape(vec![cfg.embed_dim])?;
    let x = emb.concat(&context)?;
    let (h2, c2) = lstm_step(
        params.get("dec.lstm.wx"),
        params.get("dec.lstm.wh"),
        params.get("dec.lstm.b"),
        &x,
        h,
        c,
    )?;
    let logits = params
        .get("dec.cls.w")
        .matvec(&h2)?
        .add(params.get("dec.cls.b"))?;
    Ok((alpha, alpha_inc, context, h2, c2, logits))
}

/// Run the decoder with the ground-truth symbols as inputs and return the
/// summed step losses plus per-character features.
pub fn decode_teacher_forced<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    features: &Tensor<F>,
    label: &[usize],
) -> Result<TeacherForcing<F>, TensorError> {
    let m = features.shape()[0];
    let incl = inclusive_matrix::<F>(m, cfg.effective_lambda(), cfg.eta);
    let mut h = Tensor::zeros(vec![cfg.decoder_hidden]);
    let mut c = Tensor::zeros(vec![cfg.decoder_hidden]);
    let mut prev = cfg.start_embed_index();
    let mut step_losses = Vec::with_capacity(label.len() + 1);
    let mut out = TeacherForcing {
        loss: Tensor::scalar(F::zero()),
        char_contexts: Vec::with_capacity(label.len()),
        char_states: Vec::with_capacity(label.len()),
        alphas: Vec::with_capacity(label.len() + 1),
        alphas_inclusive: Vec::with_capacity(label.len() + 1),
    };

    for t in 0..=label.len() {
        let (alpha, alpha_inc, context, h2, c2, logits) =
            step_forward(cfg, params, features, &incl, prev, &h, &c)?;
        let target = if t < label.len() {
            label[t]
        } else {
            cfg.eos_index()
        };
        let logp = logits.log_softmax()?.gather(&[target])?.sum();
        step_losses.push(logp.neg());
        out.alphas.push(alpha.values());
        out.alphas_inclusive.push(alpha_inc.values());
        if t < label.len() {
            out.char_contexts.push(context);
            out.char_states.push(h2.clone());
            prev = label[t];
        }
        h = h2;
        c = c2;
    }
    out.loss = crate::tensor::add_all(&step_losses)?;
    Ok(out)
}

/// Greedy decode: feed back the argmax symbol until the end marker or the
/// step cap. Returns predicted class indices (end marker excluded).
pub struct GreedyDecode<F: Scalar> {
    pub indices: Vec<usize>,
    pub alphas_inclusive: Vec<Vec<F>>,
}

pub fn decode_greedy<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    features: &Tensor<F>,
    max_steps: usize,
) -> Result<GreedyDecode<F>, TensorError> {
    let m = features.shape()[0];
    let incl = inclusive_matrix::<F>(m, cfg.effective_lambda(), cfg.eta);
    let mut h = Tensor::zeros(vec![cfg.decoder_hidden]);
    let mut c = Tensor::zeros(vec![cfg.decoder_hidden]);
    let mut prev = cfg.start_embed_index();
    let mut out = GreedyDecode {
        indices: Vec::new(),
        alphas_inclusive: Vec::new(),
    };
    for _ in 0..=max_steps {
        let (_, alpha_inc, _, h2, c2, logits) =
            step_forward(cfg, params, features, &incl, prev, &h, &c)?;
        out.alphas_inclusive.push(alpha_inc.values());
        let pred = argmax(&logits.values());
        if pred == cfg.eos_index() || out.indices.len() == max_steps {
            break;
        }
        out.indices.push(pred);
        prev = pred;
        h = h2;
        c = c2;
    }
    Ok(out)
}

fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Map a text label to class indices, reporting any symbol outside the
/// alphabet.
pub fn encode_label(cfg: &ModelConfig, label: &str) -> Result<Vec<usize>, char> {
    label
        .chars()
        .map(|ch| cfg.char_index(ch).ok_or(ch))
        .collect()
}

/// Map predicted class indices back to text.
pub fn decode_label(cfg: &ModelConfig, indices: &[usize]) -> String {
    let symbols = cfg.symbols();
    indices.iter().filter_map(|&i| symbols.get(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sample, DomainSpec};
    use crate::encoder::{encode, image_tensor, init_encoder};
    use crate::optim::{grad_check, Adam, Optimizer};
    use crate::rng::seeded;
    use crate::tensor::backward;

    fn desk_model(seed: u64) -> (ModelConfig, ParamSet<f64>) {
        let cfg = ModelConfig::default();
        let mut rng = seeded(seed);
        let mut p = ParamSet::new();
        init_encoder(&cfg, &mut p, &mut rng);
        init_decoder(&cfg, &mut p, &mut rng);
        (cfg, p)
    }

    #[test]
    fn inclusive_hand_values() {
        let t = inclusive_matrix::<f64>(3, 0.75, 1);
        let alpha = Tensor::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let out = t.matvec(&alpha).unwrap().values();
        for (got, want) in out.iter().zip([0.875, 0.125, 0.0]) {
            assert!((got - want).abs() < 1e-12, "{out:?}");
        }
        let alpha = Tensor::from_vec(vec![3], vec![0.5, 0.0, 0.5]).unwrap();
        let out = t.matvec(&alpha).unwrap().values();
        for (got, want) in out.iter().zip([0.4375, 0.125, 0.4375]) {
            assert!((got - want).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn inclusive_identity_at_lambda_one() {
        for m in [1, 2, 5, 17] {
            let t = inclusive_matrix::<f64>(m, 1.0, 2);
            let alpha: Vec<f64> = (0..m).map(|i| (i as f64 + 1.0) / m as f64).collect();
            let a = Tensor::from_vec(vec![m], alpha.clone()).unwrap();
            let out = t.matvec(&a).unwrap().values();
            assert_eq!(
                out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                alpha.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "m={m}"
            );
        }
    }

    #[test]
    fn inclusive_columns_sum_to_one() {
        for (m, eta) in [(1, 1), (3, 1), (4, 2), (16, 3), (5, 9)] {
            let t = inclusive_matrix::<f64>(m, 0.6, eta).values();
            for k in 0..m {
                let col: f64 = (0..m).map(|j| t[j * m + k]).sum();
                assert!((col - 1.0).abs() < 1e-12, "m={m} eta={eta} col {k}: {col}");
            }
        }
    }

    #[test]
    fn attention_rows_are_simplex() {
        let (cfg, p) = desk_model(7);
        let img = render_sample(16, 8, &DomainSpec::clean(), "0123", 0, 0);
        let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
        let state = Tensor::zeros(vec![cfg.decoder_hidden]);
        let alpha = attention_weights(&p, &feats, &state).unwrap().values();
        assert_eq!(alpha.len(), 4);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(alpha.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn fresh_model_loss_is_near_uniform_chance() {
        let (cfg, p) = desk_model(11);
        let img = render_sample(16, 8, &DomainSpec::clean(), "314", 2, 0);
        let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
        let label = encode_label(&cfg, "314").unwrap();
        let tf = decode_teacher_forced(&cfg, &p, &feats, &label).unwrap();
        let per_step = tf.loss.item() / 4.0;
        let chance = (cfg.num_classes() as f64).ln();
        assert!(
            (per_step - chance).abs() < 1.0,
            "per-step loss {per_step} vs chance {chance}"
        );
        assert_eq!(tf.char_states.len(), 3);
        assert_eq!(tf.char_contexts.len(), 3);
        assert_eq!(tf.alphas.len(), 4);
        assert_eq!(tf.char_states[0].shape(), &[cfg.decoder_hidden]);
        assert_eq!(tf.char_contexts[0].shape(), &[cfg.feature_dim]);
    }

    #[test]
    fn teacher_forced_gradients_reach_all_parameters() {
        let (cfg, p) = desk_model(13);
        let img = render_sample(16, 8, &DomainSpec::clean(), "90", 4, 0);
        let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
        let label = encode_label(&cfg, "90").unwrap();
        let tf = decode_teacher_forced(&cfg, &p, &feats, &label).unwrap();
        backward(&tf.loss).unwrap();
        for (name, t) in p.iter() {
            assert!(t.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn decode_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            height: 8,
            glyph_width: 4,
            column_stride: 4,
            conv1_channels: 1,
            conv2_channels: 2,
            feature_dim: 4,
            decoder_hidden: 5,
            attention_hidden: 4,
            embed_dim: 3,
            alphabet: "012".into(),
            ..ModelConfig::default()
        };
        let mut rng = seeded(17);
        let mut p = ParamSet::<f64>::new();
        init_encoder(&cfg, &mut p, &mut rng);
        init_decoder(&cfg, &mut p, &mut rng);
        p.jitter_all(&mut rng, 0.5);
        // Spread the per-column attention inputs: the state projection is
        // shared across columns, so its gradient lives entirely in the
        // tanh-curvature differences between columns and would otherwise sit
        // below finite-difference resolution.
        p.get("dec.att.w_x")
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v *= 3.0));
        p.get("dec.att.v")
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v *= 2.0));
        let batch: Vec<(Tensor<f64>, Vec<usize>)> = ["120210", "021102"]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let img = render_sample(8, 4, &DomainSpec::clean(), s, 6, i as u64);
                (image_tensor(&img), encode_label(&cfg, s).unwrap())
            })
            .collect();
        let report = grad_check(
            &p,
            || {
                let losses: Vec<Tensor<f64>> = batch
                    .iter()
                    .map(|(x, label)| {
                        let feats = encode(&cfg, &p, x).unwrap();
                        decode_teacher_forced(&cfg, &p, &feats, label).unwrap().loss
                    })
                    .collect();
                crate::tensor::add_all(&losses).unwrap()
            },
            5e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn greedy_caps_at_max_steps() {
        let (cfg, p) = desk_model(19);
        let img = render_sample(16, 8, &DomainSpec::clean(), "5", 8, 0);
        let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
        let out = decode_greedy(&cfg, &p, &feats, 3).unwrap();
        assert!(out.indices.len() <= 3);
    }

    #[test]
    fn single_sample_overfit_reaches_exact_decode() {
        let (cfg, p) = desk_model(23);
        let img = render_sample(16, 8, &DomainSpec::clean(), "407", 10, 0);
        let x = image_tensor::<f64>(&img);
        let label = encode_label(&cfg, "407").unwrap();
        let mut opt = Adam::new(0.005);
        for _ in 0..300 {
            let feats = encode(&cfg, &p, &x).unwrap();
            let tf = decode_teacher_forced(&cfg, &p, &feats, &label).unwrap();
            backward(&tf.loss).unwrap();
            opt.step(&p).unwrap();
        }
        let feats = encode(&cfg, &p, &x).unwrap();
        let final_loss = decode_teacher_forced(&cfg, &p, &feats, &label)
            .unwrap()
            .loss
            .item();
        assert!(final_loss < 0.1, "loss stuck at {final_loss}");
        let pred = decode_greedy(&cfg, &p, &feats, cfg.max_len).unwrap();
        assert_eq!(decode_label(&cfg, &pred.indices), "407");
    }

    #[test]
    fn label_codec_roundtrip_and_rejection() {
        let cfg = ModelConfig::default();
        let idx = encode_label(&cfg, "0918").unwrap();
        assert_eq!(idx, vec![0, 9, 1, 8]);
        assert_eq!(decode_label(&cfg, &idx), "0918");
        assert_eq!(encode_label(&cfg, "1A2"), Err('A'));
    }
}
