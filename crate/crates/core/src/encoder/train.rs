use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EncoderModel;
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, rng_from};
use crate::tokenizer::{mask_batch, MaskConfig, MessageVocab, TokenId, TrainSequence, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Share of all steps spent warming up (warmup-linear schedule only).
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask: MaskConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 to the peak rate, then linear decay to 0.
    #[default]
    WarmupLinear,
}

fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warmup() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            schedule: LrSchedule::default(),
            warmup_fraction: d_warmup(),
            seed: 0,
            mask: MaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid optimizer moments".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        self.mask.validate()
    }

    /// Learning rate for update `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::WarmupLinear => {
                let warmup = (self.warmup_fraction * total as f64).round() as usize;
                let t = step + 1;
                let f = if t <= warmup {
                    t as f64 / warmup as f64
                } else {
                    (total - step) as f64 / (total - warmup) as f64
                };
                self.learning_rate * f
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean cross-entropy over labelled positions; 0 when there are none.
    pub loss: f64,
    pub labeled: usize,
    /// Set when the batch had no labelled positions.
    pub no_labels: bool,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row[target] - max - z.ln()
}

/// Masked cross-entropy. `logits[b]` is `len_b × V` row-major and
/// `labels[b]` has `len_b` entries (`IGNORE` where unlabelled).
pub fn mlm_loss(logits: &[Vec<f64>], labels: &[Vec<TokenId>], vocab_size: usize) -> LossOutput {
    let mut sum = 0.0;
    let mut count = 0;
    for (lg, lb) in logits.iter().zip(labels) {
        for (i, &t) in lb.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            sum -= log_softmax_at(&lg[i * vocab_size..(i + 1) * vocab_size], t as usize);
            count += 1;
        }
    }
    LossOutput {
        loss: if count == 0 { 0.0 } else { sum / count as f64 },
        labeled: count,
        no_labels: count == 0,
    }
}

/// Loss and its gradient for a batch. Dropout is active iff `dropout_seed`
/// is given.
pub fn batch_loss_and_grad(
    model: &EncoderModel,
    batch: &[TrainSequence],
    dropout_seed: Option<u64>,
) -> Result<(LossOutput, Vec<f64>)> {
    let v = model.config.vocab_size;
    let labeled: usize = batch
        .iter()
        .map(|s| s.labels.iter().filter(|&&l| l != IGNORE).count())
        .sum();
    if labeled == 0 {
        return Ok((
            LossOutput {
                loss: 0.0,
                labeled: 0,
                no_labels: true,
            },
            vec![0.0; model.param_count()],
        ));
    }
    for s in batch {
        model.check_input(&s.input_ids, &s.attention_flags)?;
    }
    let norm = 1.0 / labeled as f64;

    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, s)| {
            // PAD positions never influence real ones, so only the real
            // prefix is computed.
            let n = s.real_len();
            let mut rng = dropout_seed.map(|seed| rng_from(derive_indexed(seed, "dropout", b as u64)));
            let cache = model.forward_train(&s.input_ids[..n], &s.attention_flags[..n], rng.as_mut());
            let mut dlogits = vec![0.0; n * v];
            let mut loss = 0.0;
            for (i, &t) in s.labels[..n].iter().enumerate() {
                if t == IGNORE {
                    continue;
                }
                let row = &cache.logits[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                loss -= row[t as usize] - max - z.ln();
                let drow = &mut dlogits[i * v..(i + 1) * v];
                for (g, x) in drow.iter_mut().zip(row) {
                    *g = (x - max).exp() / z * norm;
                }
                drow[t as usize] -= norm;
            }
            let mut grad = vec![0.0; model.param_count()];
            model.backward(&cache, &dlogits, &mut grad);
            (loss, grad)
        })
        .collect();

    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((
        LossOutput {
            loss: loss * norm,
            labeled,
            no_labels: false,
        },
        grad,
    ))
}

/// Mean masked loss over a corpus with dropout off.
pub(crate) fn evaluate_loss(model: &EncoderModel, seqs: &[TrainSequence]) -> f64 {
    let v = model.config.vocab_size;
    let (sum, count) = seqs
        .par_iter()
        .map(|s| {
            let n = s.real_len();
            let cache = model.forward_train(&s.input_ids[..n], &s.attention_flags[..n], None);
            let mut sum = 0.0;
            let mut count = 0usize;
            for (i, &t) in s.labels[..n].iter().enumerate() {
                if t != IGNORE {
                    sum -= log_softmax_at(&cache.logits[i * v..(i + 1) * v], t as usize);
                    count += 1;
                }
            }
            (sum, count)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], tc: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g;
            self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + tc.eps);
        }
    }
}

/// One optimizer update on `batch` at rate `lr`; returns the batch loss.
pub fn backward_and_step(
    model: &mut EncoderModel,
    adam: &mut Adam,
    batch: &[TrainSequence],
    tc: &TrainConfig,
    lr: f64,
    dropout_seed: Option<u64>,
) -> Result<LossOutput> {
    let (loss, grad) = batch_loss_and_grad(model, batch, dropout_seed)?;
    for t in &model.layout.tensors {
        if grad[t.range()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: t.name.clone(),
            });
        }
    }
    adam.step(&mut model.params, &grad, tc, lr);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    /// Loss on the first epoch's masked corpus before any update, dropout off.
    pub initial_loss: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on windowed token sequences, re-masking the corpus every epoch.
pub fn train(
    model: &mut EncoderModel,
    windows: &[Vec<TokenId>],
    vocab: &MessageVocab,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainHistory> {
    tc.validate()?;
    if windows.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Dimension(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let seq_len = model.config.max_seq;
    let mask_for = |epoch: usize| -> Result<Vec<TrainSequence>> {
        let mc = MaskConfig {
            seed: derive_indexed(tc.mask.seed, "epoch-mask", epoch as u64),
            ..tc.mask.clone()
        };
        mask_batch(windows, vocab, &mc, seq_len)
    };

    let first = mask_for(0)?;
    let initial_loss = evaluate_loss(model, &first);
    let mut corpus = Some(first);
    let mut adam = Adam::new(model.param_count());
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let per_epoch = windows.len().div_ceil(tc.batch_size);
    let total_steps = per_epoch * tc.epochs;
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let seqs = match corpus.take() {
            Some(c) => c,
            None => mask_for(epoch)?,
        };
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng_from(derive_indexed(tc.seed, "shuffle", epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<TrainSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let dropout = derive_indexed(tc.seed, "dropout-step", step);
            let lr = tc.lr_at(step as usize, total_steps);
            let out = backward_and_step(model, &mut adam, &batch, tc, lr, Some(dropout))?;
            step += 1;
            if !out.no_labels {
                total += out.loss;
                batches += 1;
            }
        }
        let mean = if batches == 0 { 0.0 } else { total / batches as f64 };
        on_epoch(epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainHistory {
        initial_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::flow::Message;

    fn vocab(n: usize) -> MessageVocab {
        MessageVocab::from_messages(
            (0..n)
                .map(|i| format!("a:b:m{i}").parse::<Message>().unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn model(v: usize) -> EncoderModel {
        EncoderModel::new(
            ModelConfig {
                vocab_size: v,
                layers: 1,
                heads: 2,
                d_model: 8,
                d_ff: 8,
                max_seq: 6,
                dropout_rate: 0.1,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn warmup_linear_schedule_shape() {
        let tc = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.2,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|s| tc.lr_at(s, 10)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[2], 1.0);
        assert!((lrs[9] - 0.125).abs() < 1e-12);
        assert!(lrs[1..].windows(2).all(|w| w[1] <= w[0]));
        let flat = TrainConfig {
            schedule: LrSchedule::Constant,
            ..tc
        };
        assert!((0..10).all(|s| flat.lr_at(s, 10) == 1.0));
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let v = 17;
        let logits = vec![vec![0.25; 3 * v]];
        let labels = vec![vec![4, IGNORE, 9]];
        let out = mlm_loss(&logits, &labels, v);
        assert!((out.loss - (17f64).ln()).abs() < 1e-6);
        assert_eq!(out.labeled, 2);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let v = 5;
        let mut row = vec![-50.0; v];
        row[3] = 50.0;
        let out = mlm_loss(&[row], &[vec![3]], v);
        assert!(out.loss >= 0.0 && out.loss < 1e-12);
    }

    #[test]
    fn no_labels_is_flagged_zero() {
        let out = mlm_loss(&[vec![0.0; 5]], &[vec![IGNORE]], 5);
        assert_eq!(out.loss, 0.0);
        assert!(out.no_labels);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let voc = vocab(3);
        let mut m = model(voc.size());
        let before = m.params.clone();
        let seqs = mask_batch(
            &[vec![3, 4, 5, 3]],
            &voc,
            &MaskConfig {
                mask_rate: 1.0,
                ..MaskConfig::default()
            },
            6,
        )
        .unwrap();
        let tc = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(m.param_count());
        let out = backward_and_step(&mut m, &mut adam, &seqs, &tc, tc.learning_rate, Some(3)).unwrap();
        assert!(out.loss > 0.0);
        assert_eq!(m.params, before);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let voc = vocab(3);
        let mut m = model(voc.size());
        let off = m.layout.tensors.iter().find(|t| t.name == "mlm_head.bias").unwrap().offset;
        m.params[off] = f64::NAN;
        let seqs = mask_batch(
            &[vec![3, 4]],
            &voc,
            &MaskConfig {
                mask_rate: 1.0,
                ..MaskConfig::default()
            },
            6,
        )
        .unwrap();
        let mut adam = Adam::new(m.param_count());
        let err = backward_and_step(&mut m, &mut adam, &seqs, &TrainConfig::default(), 1e-3, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }), "{err}");
    }

    #[test]
    fn single_sequence_single_epoch() {
        let voc = vocab(3);
        let mut m = model(voc.size());
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &[vec![3, 4, 5]], &voc, &tc, |_, _| {}).unwrap();
        assert_eq!(h.epoch_losses.len(), 1);
        assert!(train(&mut m, &[], &voc, &tc, |_, _| {}).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let voc = vocab(4);
        let windows = vec![vec![3, 4, 5, 6], vec![4, 5, 6], vec![3, 5, 6, 4, 3]];
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model(voc.size());
            let h = train(&mut m, &windows, &voc, &tc, |_, _| {}).unwrap();
            (h, m.params)
        };
        assert_eq!(run(), run());
    }
}
