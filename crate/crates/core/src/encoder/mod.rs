//! A small bidirectional transformer encoder with a masked-token head,
//! trained from scratch with hand-written gradients in `f64`.

mod checkpoint;
mod model;
mod params;
mod score;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{Layout, TensorInfo};
pub use score::{score_next, ScoreMode, ScoreQuery};
pub use train::{
    backward_and_step, batch_loss_and_grad, mlm_loss, train, Adam, LossOutput, LrSchedule, TrainConfig,
    TrainHistory,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the vocabulary when left at 0.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "d_max_seq")]
    pub max_seq: usize,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    /// Share the output projection with the token embedding.
    #[serde(default = "d_tie")]
    pub tie_head: bool,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
}

fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    2
}
fn d_model() -> usize {
    64
}
fn d_ff() -> usize {
    128
}
fn d_max_seq() -> usize {
    32
}
fn d_dropout() -> f64 {
    0.1
}
fn d_tie() -> bool {
    true
}
fn d_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            layers: d_layers(),
            heads: d_heads(),
            d_model: d_model(),
            d_ff: d_ff(),
            max_seq: d_max_seq(),
            dropout_rate: d_dropout(),
            tie_head: d_tie(),
            init_std: d_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be >= 4");
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers and d_ff must be positive");
        }
        if self.max_seq < 2 {
            return bad("max_seq must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

/// Encoder parameters, flat in `params` and addressed through `layout`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl EncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config, seed);
        Ok(EncoderModel {
            config,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    fn check_input(&self, ids: &[TokenId], flags: &[u8]) -> Result<()> {
        if ids.len() != flags.len() {
            return Err(Error::Dimension(format!(
                "{} token ids but {} attention flags",
                ids.len(),
                flags.len()
            )));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::Dimension(format!(
                "sequence length {} exceeds max_seq {}",
                ids.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Dimension(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::Dimension("attention flags must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Logits (`len × V`, row-major) for one sequence with dropout off.
    pub fn forward_one(&self, ids: &[TokenId], flags: &[u8]) -> Result<Vec<f64>> {
        self.check_input(ids, flags)?;
        Ok(model::forward_seq(&self.config, &self.layout, &self.params, ids, flags, None).logits)
    }

    /// Attention weights of every layer (`heads × len × len` each), dropout off.
    pub fn attention_maps(&self, ids: &[TokenId], flags: &[u8]) -> Result<Vec<Vec<f64>>> {
        self.check_input(ids, flags)?;
        let cache = model::forward_seq(&self.config, &self.layout, &self.params, ids, flags, None);
        Ok((0..self.config.layers)
            .map(|l| cache.attention(l).to_vec())
            .collect())
    }

    pub(crate) fn forward_train(
        &self,
        ids: &[TokenId],
        flags: &[u8],
        rng: Option<&mut Rng>,
    ) -> model::SeqCache {
        model::forward_seq(&self.config, &self.layout, &self.params, ids, flags, rng)
    }

    pub(crate) fn backward(&self, cache: &model::SeqCache, dlogits: &[f64], grad: &mut [f64]) {
        model::backward_seq(&self.config, &self.layout, &self.params, cache, dlogits, grad);
    }
}

/// Batched inference: one `len × V` logit matrix per input row.
pub fn forward(
    model: &EncoderModel,
    input_ids: &[Vec<TokenId>],
    attention_flags: &[Vec<u8>],
) -> Result<Vec<Vec<f64>>> {
    if input_ids.len() != attention_flags.len() {
        return Err(Error::Dimension("batch sizes of ids and flags differ".into()));
    }
    input_ids
        .iter()
        .zip(attention_flags)
        .map(|(ids, flags)| model.forward_one(ids, flags))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD;

    fn tiny(vocab: usize) -> EncoderModel {
        EncoderModel::new(
            ModelConfig {
                vocab_size: vocab,
                layers: 2,
                heads: 2,
                d_model: 8,
                d_ff: 12,
                max_seq: 6,
                dropout_rate: 0.0,
                tie_head: true,
                init_std: 0.3,
            },
            9,
        )
        .unwrap()
    }

    fn softmax_sum(row: &[f64]) -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        row.iter().map(|x| (x - max).exp() / z).sum()
    }

    #[test]
    fn single_real_token_attends_to_itself() {
        let m = tiny(7);
        let ids = vec![4, PAD, PAD, PAD];
        let flags = vec![1, 0, 0, 0];
        let logits = m.forward_one(&ids, &flags).unwrap();
        assert!(logits.iter().all(|x| x.is_finite()));
        for layer in m.attention_maps(&ids, &flags).unwrap() {
            for head in 0..2 {
                assert_eq!(layer[head * 16], 1.0);
            }
        }
    }

    #[test]
    fn attention_rows_and_softmax_normalize() {
        let m = tiny(7);
        let ids = vec![3, 5, 1, 6, PAD];
        let flags = vec![1, 1, 1, 1, 0];
        for layer in m.attention_maps(&ids, &flags).unwrap() {
            for row in layer.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(row[4], 0.0);
            }
        }
        let logits = m.forward_one(&ids, &flags).unwrap();
        for row in logits.chunks(7) {
            assert!((softmax_sum(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = tiny(7);
        let a = m.forward_one(&[3, 4, 5], &[1, 1, 1]).unwrap();
        let b = m
            .forward_one(&[3, 4, 5, PAD, PAD, PAD], &[1, 1, 1, 0, 0, 0])
            .unwrap();
        for (x, y) in a.iter().zip(&b[..a.len()]) {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn dimension_errors() {
        let m = tiny(7);
        assert!(m.forward_one(&[3, 4], &[1]).is_err());
        assert!(m.forward_one(&[3; 7], &[1; 7]).is_err());
        assert!(m.forward_one(&[9], &[1]).is_err());
        assert!(forward(&m, &[vec![3]], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.max_seq = 1;
        assert!(c.validate().is_err());
        c.max_seq = 8;
        c.vocab_size = 3;
        assert!(c.validate().is_err());
    }
}
