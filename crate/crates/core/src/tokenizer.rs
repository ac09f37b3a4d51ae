//! Message vocabulary, trace windowing and masked-token corruption.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::Message;
use crate::rng::rng_from;
use crate::tracegen::{Trace, TraceSet};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UNK: TokenId = 2;
pub const FIRST_MESSAGE_ID: TokenId = 3;
/// Label value for positions that carry no prediction target.
pub const IGNORE: TokenId = u32::MAX;

const SPECIAL_NAMES: [&str; 3] = ["<PAD>", "<MASK>", "<UNK>"];

/// Dense bijection between messages and token ids `3..V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageVocab {
    messages: Vec<Message>,
    ids: HashMap<Message, TokenId>,
}

impl MessageVocab {
    pub fn from_messages(messages: Vec<Message>) -> Result<Self> {
        if messages.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut ids = HashMap::with_capacity(messages.len());
        for (i, m) in messages.iter().enumerate() {
            if ids.insert(m.clone(), FIRST_MESSAGE_ID + i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {m}")));
            }
        }
        Ok(MessageVocab { messages, ids })
    }

    /// Total vocabulary size including the three specials.
    pub fn size(&self) -> usize {
        FIRST_MESSAGE_ID as usize + self.messages.len()
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    pub fn id_of(&self, m: &Message) -> Option<TokenId> {
        self.ids.get(m).copied()
    }

    pub fn message_of(&self, id: TokenId) -> Option<&Message> {
        id.checked_sub(FIRST_MESSAGE_ID)
            .and_then(|i| self.messages.get(i as usize))
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn message_ids(&self) -> std::ops::Range<TokenId> {
        FIRST_MESSAGE_ID..self.size() as TokenId
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{name}");
        }
        for (i, m) in self.messages.iter().enumerate() {
            let _ = writeln!(out, "{}\t{m}", FIRST_MESSAGE_ID as usize + i);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut messages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::VocabSyntax { line: i + 1, msg };
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `<id>\\t<token>`".into()))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
            if id != i {
                return Err(err(format!("ids must be dense; expected {i}, found {id}")));
            }
            if i < SPECIAL_NAMES.len() {
                if tok != SPECIAL_NAMES[i] {
                    return Err(err(format!("expected special `{}`", SPECIAL_NAMES[i])));
                }
            } else {
                messages.push(tok.parse().map_err(|e: Error| err(e.to_string()))?);
            }
        }
        MessageVocab::from_messages(messages)
    }

    /// SHA-256 of the rendered vocabulary file.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    /// Token ids of a trace; simultaneous messages ordered by ascending id.
    pub fn linearize(&self, t: &Trace) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(t.len());
        for step in &t.steps {
            let start = out.len();
            out.extend(step.iter().map(|m| self.id_of(m).unwrap_or(UNK)));
            out[start..].sort_unstable();
        }
        out
    }
}

/// Vocabulary in order of first appearance across the trace set.
pub fn build_vocab(ts: &TraceSet) -> Result<MessageVocab> {
    let mut seen = std::collections::HashSet::new();
    let mut messages = Vec::new();
    for m in ts.traces.iter().flat_map(Trace::flatten) {
        if seen.insert(m) {
            messages.push(m.clone());
        }
    }
    MessageVocab::from_messages(messages)
}

/// Cut each linearized trace into overlapping windows of at most `max_len`
/// tokens, starting every `stride` tokens.
pub fn window_traces(
    ts: &TraceSet,
    vocab: &MessageVocab,
    max_len: usize,
    stride: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if max_len < 2 || stride == 0 || stride > max_len {
        return Err(Error::Config(format!(
            "window requires max_len >= 2 and 1 <= stride <= max_len (got {max_len}, {stride})"
        )));
    }
    let mut out = Vec::new();
    for t in &ts.traces {
        let toks = vocab.linearize(t);
        let mut offset = 0;
        loop {
            let end = (offset + max_len).min(toks.len());
            out.push(toks[offset..end].to_vec());
            if end == toks.len() {
                break;
            }
            offset += stride;
        }
    }
    Ok(out)
}

/// Every left context of every linearized trace: for each position `k`, the
/// (at most `max_len`) tokens ending at `k`. These are the shapes a
/// next-message query presents to the model, so training on them teaches the
/// last position to be predicted from its left context alone.
pub fn prefix_windows(ts: &TraceSet, vocab: &MessageVocab, max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if max_len < 2 {
        return Err(Error::Config(format!("window requires max_len >= 2 (got {max_len})")));
    }
    let mut out = Vec::new();
    for t in &ts.traces {
        let toks = vocab.linearize(t);
        for k in 1..=toks.len() {
            out.push(toks[k.saturating_sub(max_len)..k].to_vec());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    /// Probabilities of (replace with MASK, replace with random message, keep).
    #[serde(default = "default_split")]
    pub scheme_split: [f64; 3],
    /// Always select the last real position and replace it with MASK, so
    /// every sequence also trains next-message prediction.
    #[serde(default)]
    pub mask_last: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_mask_rate() -> f64 {
    0.30
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mask_rate: default_mask_rate(),
            scheme_split: default_split(),
            mask_last: false,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask_rate must lie in [0, 1]".into()));
        }
        if self.scheme_split.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (self.scheme_split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("scheme_split must be probabilities summing to 1".into()));
        }
        Ok(())
    }
}

/// One padded, masked training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub input_ids: Vec<TokenId>,
    pub attention_flags: Vec<u8>,
    pub labels: Vec<TokenId>,
}

impl TrainSequence {
    /// Number of leading real (non-PAD) positions.
    pub fn real_len(&self) -> usize {
        self.attention_flags.iter().take_while(|&&f| f == 1).count()
    }
}

/// Pad each sequence to `seq_len` and corrupt a random subset of positions.
pub fn mask_batch(
    seqs: &[Vec<TokenId>],
    vocab: &MessageVocab,
    mc: &MaskConfig,
    seq_len: usize,
) -> Result<Vec<TrainSequence>> {
    mc.validate()?;
    let mut rng = rng_from(mc.seed);
    let ids = vocab.message_ids();
    let [p_mask, p_rand, _] = mc.scheme_split;
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() > seq_len {
            return Err(Error::Dimension(format!(
                "sequence of length {} exceeds model window {seq_len}",
                s.len()
            )));
        }
        let mut input_ids = vec![PAD; seq_len];
        let mut flags = vec![0u8; seq_len];
        let mut labels = vec![IGNORE; seq_len];
        for (i, &tok) in s.iter().enumerate() {
            flags[i] = 1;
            input_ids[i] = tok;
            if mc.mask_last && i + 1 == s.len() {
                labels[i] = tok;
                input_ids[i] = MASK;
                continue;
            }
            if rng.random::<f64>() < mc.mask_rate {
                labels[i] = tok;
                let r: f64 = rng.random();
                if r < p_mask {
                    input_ids[i] = MASK;
                } else if r < p_mask + p_rand {
                    input_ids[i] = rng.random_range(ids.clone());
                }
            }
        }
        out.push(TrainSequence {
            input_ids,
            attention_flags: flags,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> Message {
        s.parse().unwrap()
    }

    fn vocab_ab() -> MessageVocab {
        let ts = TraceSet {
            traces: vec![Trace::from_messages([m("a:b:A"), m("b:c:B"), m("a:b:A")])],
        };
        build_vocab(&ts).unwrap()
    }

    #[test]
    fn first_appearance_ids() {
        let v = vocab_ab();
        assert_eq!(v.id_of(&m("a:b:A")), Some(3));
        assert_eq!(v.id_of(&m("b:c:B")), Some(4));
        assert_eq!(v.size(), 5);
        for id in v.message_ids() {
            assert_eq!(v.id_of(v.message_of(id).unwrap()), Some(id));
        }
        assert!(v.message_of(PAD).is_none());
    }

    #[test]
    fn empty_trace_set_has_no_vocab() {
        assert!(matches!(build_vocab(&TraceSet::default()), Err(Error::EmptyVocabulary)));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab_ab();
        let text = v.render();
        assert!(text.starts_with("0\t<PAD>\n1\t<MASK>\n2\t<UNK>\n3\ta:b:A\n"));
        assert_eq!(MessageVocab::parse(&text).unwrap(), v);
        assert!(MessageVocab::parse("0\t<PAD>\n2\t<MASK>\n").is_err());
    }

    #[test]
    fn simultaneous_messages_linearize_by_id() {
        let v = vocab_ab();
        let t = Trace {
            steps: vec![vec![m("b:c:B"), m("a:b:A")]],
        };
        assert_eq!(v.linearize(&t), vec![3, 4]);
    }

    fn one_trace(n: usize) -> (TraceSet, MessageVocab) {
        let msgs: Vec<Message> = (0..n).map(|i| m(&format!("x:y:c{i}"))).collect();
        let ts = TraceSet {
            traces: vec![Trace::from_messages(msgs)],
        };
        let v = build_vocab(&ts).unwrap();
        (ts, v)
    }

    #[test]
    fn short_trace_is_one_window() {
        let (ts, v) = one_trace(5);
        let w = window_traces(&ts, &v, 8, 4).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].len(), 5);
    }

    #[test]
    fn long_trace_windows() {
        let (ts, v) = one_trace(10);
        let w = window_traces(&ts, &v, 8, 4).unwrap();
        assert_eq!(w.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 6]);
        assert_eq!(w[1][0], 3 + 4);
        assert!(window_traces(&ts, &v, 1, 1).is_err());
        assert!(window_traces(&ts, &v, 4, 5).is_err());
    }

    #[test]
    fn mask_rate_extremes() {
        let v = vocab_ab();
        let seqs = vec![vec![3, 4, 3]];
        let none = mask_batch(
            &seqs,
            &v,
            &MaskConfig {
                mask_rate: 0.0,
                ..MaskConfig::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(none[0].input_ids, vec![3, 4, 3, PAD, PAD]);
        assert!(none[0].labels.iter().all(|&l| l == IGNORE));
        assert_eq!(none[0].real_len(), 3);

        let all = mask_batch(
            &seqs,
            &v,
            &MaskConfig {
                mask_rate: 1.0,
                scheme_split: [1.0, 0.0, 0.0],
                seed: 1,
                mask_last: false,
            },
            5,
        )
        .unwrap();
        assert_eq!(all[0].input_ids, vec![MASK, MASK, MASK, PAD, PAD]);
        assert_eq!(all[0].labels, vec![3, 4, 3, IGNORE, IGNORE]);
    }

    #[test]
    fn bad_split_rejected() {
        let mc = MaskConfig {
            scheme_split: [0.5, 0.1, 0.1],
            ..MaskConfig::default()
        };
        assert!(mask_batch(&[], &vocab_ab(), &mc, 4).is_err());
    }
}
