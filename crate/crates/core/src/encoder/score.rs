use serde::{Deserialize, Serialize};

use super::EncoderModel;
use crate::error::{Error, Result};
use crate::tokenizer::{MessageVocab, TokenId, MASK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Softmax probability over message tokens.
    Absolute,
    /// Probability divided by the best candidate's probability.
    #[default]
    Renormalized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreQuery {
    pub prefix: Vec<TokenId>,
    pub candidates: Vec<TokenId>,
    pub mode: ScoreMode,
}

/// Score each candidate as the token filling a MASK appended to `prefix`.
/// Returns `(candidate, score)` in candidate order.
pub fn score_next(
    model: &EncoderModel,
    vocab: &MessageVocab,
    q: &ScoreQuery,
) -> Result<Vec<(TokenId, f64)>> {
    if q.candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let ids = vocab.message_ids();
    if let Some(c) = q.candidates.iter().find(|c| !ids.contains(c)) {
        return Err(Error::Config(format!("candidate {c} is not a message token")));
    }
    let keep = model.config.max_seq - 1;
    let ctx = &q.prefix[q.prefix.len().saturating_sub(keep)..];
    let mut input: Vec<TokenId> = ctx.to_vec();
    input.push(MASK);
    let flags = vec![1u8; input.len()];
    let logits = model.forward_one(&input, &flags)?;
    let v = model.config.vocab_size;
    let row = &logits[(input.len() - 1) * v..input.len() * v];

    let msg = &row[ids.start as usize..ids.end as usize];
    let max = msg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = msg.iter().map(|x| (x - max).exp()).sum();
    let prob = |t: TokenId| (row[t as usize] - max).exp() / z;

    let mut out: Vec<(TokenId, f64)> = q.candidates.iter().map(|&c| (c, prob(c))).collect();
    if q.mode == ScoreMode::Renormalized {
        let best = out.iter().map(|&(_, p)| p).fold(0.0, f64::max);
        for (_, p) in &mut out {
            *p = if best > 0.0 { *p / best } else { 0.0 };
        }
    }
    Ok(out)
}
