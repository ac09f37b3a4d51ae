use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }

    fn is_matrix(&self) -> bool {
        self.rows > 1
    }
}

/// Offsets of one transformer block's tensors inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// Named, row-major tensors packed into one contiguous `Vec<f64>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    /// Separate output projection when the head is not tied to `tok`.
    pub head_w: Option<usize>,
    pub head_b: usize,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let offset = self.total;
        self.tensors.push(TensorInfo {
            name,
            rows,
            cols,
            offset,
        });
        self.total += rows * cols;
        offset
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok = b.add("embeddings.token".into(), v, d);
        let pos = b.add("embeddings.position".into(), cfg.max_seq, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut add = |n: &str, r, c| b.add(format!("layer{l}.{n}"), r, c);
                LayerOffsets {
                    wq: add("attn.query.weight", d, d),
                    bq: add("attn.query.bias", 1, d),
                    wk: add("attn.key.weight", d, d),
                    bk: add("attn.key.bias", 1, d),
                    wv: add("attn.value.weight", d, d),
                    bv: add("attn.value.bias", 1, d),
                    wo: add("attn.output.weight", d, d),
                    bo: add("attn.output.bias", 1, d),
                    ln1_g: add("attn.norm.gain", 1, d),
                    ln1_b: add("attn.norm.bias", 1, d),
                    w1: add("ffn.in.weight", d, f),
                    b1: add("ffn.in.bias", 1, f),
                    w2: add("ffn.out.weight", f, d),
                    b2: add("ffn.out.bias", 1, d),
                    ln2_g: add("ffn.norm.gain", 1, d),
                    ln2_b: add("ffn.norm.bias", 1, d),
                }
            })
            .collect();
        let head_w = (!cfg.tie_head).then(|| b.add("mlm_head.weight".into(), d, v));
        let head_b = b.add("mlm_head.bias".into(), 1, v);
        Layout {
            tensors: b.tensors,
            tok,
            pos,
            layers,
            head_w,
            head_b,
            total: b.total,
        }
    }

    /// Tensor containing flat index `i`.
    pub fn tensor_at(&self, i: usize) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }

    /// Fresh parameters: normal(0, std) matrices, zero biases, unit norm gains.
    pub fn init(&self, cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("init_std validated");
        let mut p = vec![0.0; self.total];
        for t in &self.tensors {
            if t.name.ends_with(".gain") {
                p[t.range()].fill(1.0);
            } else if t.is_matrix() {
                for x in &mut p[t.range()] {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        p
    }
}
