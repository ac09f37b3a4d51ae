//! Pipeline stages behind the `flowmine` command line.
//!
//! Every stage reads its inputs from the paths named in a [`RunConfig`] and
//! writes its outputs atomically, so stages can be rerun independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flowmine::causality::{build_causality_graph, dump_edges, CausalityDirection, CausalityGraph};
use flowmine::encoder::{load_checkpoint, save_checkpoint, train, EncoderModel, ModelConfig, TrainConfig};
use flowmine::eval::{compare, EvalReport};
use flowmine::flow::{parse_flow_file_with, render_flow_file, FlowSet};
use flowmine::miner::{mine_all, MineOutcome, MiningConfig};
use flowmine::rng::derive_seed;
use flowmine::tokenizer::{build_vocab, prefix_windows, window_traces, MaskConfig, MessageVocab};
use flowmine::tracegen::{generate_traces, validate_interleaving, GenConfig, TraceSet};

pub const TRACE_FILE: &str = "traces.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<flowmine::Error> for CliError {
    fn from(e: flowmine::Error) -> Self {
        use flowmine::Error as E;
        match e {
            E::Config(_) | E::NoPairs | E::NotInGraph(_) => CliError::Config(e.to_string()),
            E::NonFiniteGradient { .. } | E::Dimension(_) | E::EmptyCandidates => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub flows: PathBuf,
    pub traces: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub loss: PathBuf,
    pub graph: PathBuf,
    pub mined: PathBuf,
    pub scores: PathBuf,
    pub report: PathBuf,
    /// Directory for per-flow before/after graph dumps.
    #[serde(default)]
    pub dumps: Option<PathBuf>,
    /// JSON object mapping mined flow names to ground-truth names.
    #[serde(default)]
    pub pairing: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Overlapping windows of `max_len` tokens every `stride` tokens.
    Strided,
    /// Every left context of every trace, up to `max_len` tokens.
    #[default]
    Prefix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default)]
    pub mode: WindowMode,
    #[serde(default = "d_window")]
    pub max_len: usize,
    #[serde(default = "d_stride")]
    pub stride: usize,
}

fn d_window() -> usize {
    32
}
fn d_stride() -> usize {
    16
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            mode: WindowMode::default(),
            max_len: d_window(),
            stride: d_stride(),
        }
    }
}

/// Everything one pipeline run needs. Seeds inside the stage sections are
/// ignored; each stage derives its own from `seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub causality_direction: CausalityDirection,
    pub paths: Paths,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mining: MiningConfig,
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub theta: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub mask_rate: Option<f64>,
    pub score_mode: Option<flowmine::encoder::ScoreMode>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(ov);
        cfg.finalize()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.flows,
            &mut p.traces,
            &mut p.vocab,
            &mut p.checkpoint,
            &mut p.loss,
            &mut p.graph,
            &mut p.mined,
            &mut p.scores,
            &mut p.report,
        ] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        for path in [&mut p.dumps, &mut p.pairing].into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(t) = ov.theta {
            self.mining.theta = t;
        }
        if let Some(e) = ov.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(r) = ov.mask_rate {
            self.mask.mask_rate = r;
        }
        if let Some(m) = ov.score_mode {
            self.mining.score_mode = m;
        }
    }

    /// Derive stage seeds and validate every section.
    pub fn finalize(&mut self) -> CliResult<()> {
        self.gen.seed = self.stage_seed("gen");
        self.mask.seed = self.stage_seed("mask");
        self.train.seed = self.stage_seed("train");
        self.train.mask = self.mask.clone();
        self.gen.validate()?;
        self.train.validate()?;
        self.mining.validate()?;
        if self.window.max_len > self.model.max_seq {
            return Err(CliError::Config(format!(
                "window.max_len {} exceeds model.max_seq {}",
                self.window.max_len, self.model.max_seq
            )));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage.as_bytes())
    }

    fn trace_file(&self) -> PathBuf {
        self.paths.traces.join(TRACE_FILE)
    }
}

/// Write via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Data(format!("writing {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_flows(cfg: &RunConfig) -> CliResult<FlowSet> {
    let text = read_text(&cfg.paths.flows, "flow file")?;
    Ok(parse_flow_file_with(&text, cfg.causality_direction)?)
}

fn load_traces(cfg: &RunConfig) -> CliResult<TraceSet> {
    Ok(TraceSet::parse(&read_text(&cfg.trace_file(), "trace file")?)?)
}

fn load_vocab(cfg: &RunConfig) -> CliResult<MessageVocab> {
    Ok(MessageVocab::parse(&read_text(&cfg.paths.vocab, "vocabulary")?)?)
}

fn graph_for(cfg: &RunConfig, vocab: &MessageVocab) -> CausalityGraph {
    build_causality_graph(vocab.messages(), cfg.causality_direction)
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<TraceSet> {
    let fs = load_flows(cfg)?;
    let ts = generate_traces(&fs, &cfg.gen)?;
    if let Some(i) = ts
        .traces
        .iter()
        .position(|t| !validate_interleaving(t, &fs, cfg.gen.instances_per_flow))
    {
        return Err(CliError::Internal(format!("generated trace {i} is not a legal interleaving")));
    }
    write_atomic(&cfg.trace_file(), ts.render().as_bytes())?;
    Ok(ts)
}

/// Vocabulary and causality graph from the traces.
pub fn cmd_graph(cfg: &RunConfig) -> CliResult<CausalityGraph> {
    let ts = load_traces(cfg)?;
    let vocab = build_vocab(&ts)?;
    write_atomic(&cfg.paths.vocab, vocab.render().as_bytes())?;
    let g = graph_for(cfg, &vocab);
    write_atomic(&cfg.paths.graph, g.dump().as_bytes())?;
    Ok(g)
}

pub struct TrainOutput {
    pub model: EncoderModel,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(usize, f64)) -> CliResult<TrainOutput> {
    let ts = load_traces(cfg)?;
    let vocab = load_vocab(cfg)?;
    let windows = match cfg.window.mode {
        WindowMode::Strided => window_traces(&ts, &vocab, cfg.window.max_len, cfg.window.stride)?,
        WindowMode::Prefix => prefix_windows(&ts, &vocab, cfg.window.max_len)?,
    };
    let model_cfg = ModelConfig {
        vocab_size: vocab.size(),
        ..cfg.model.clone()
    };
    let mut model = EncoderModel::new(model_cfg, cfg.stage_seed("init"))?;
    let hist = train(&mut model, &windows, &vocab, &cfg.train, &mut on_epoch)?;
    write_atomic(&cfg.paths.checkpoint, &save_checkpoint(&model, &vocab.digest()))?;

    let mut loss = format!("initial\t{:.6}\n", hist.initial_loss);
    for (i, l) in hist.epoch_losses.iter().enumerate() {
        let _ = writeln!(loss, "{}\t{l:.6}", i + 1);
    }
    write_atomic(&cfg.paths.loss, loss.as_bytes())?;
    Ok(TrainOutput {
        model,
        initial_loss: hist.initial_loss,
        epoch_losses: hist.epoch_losses,
    })
}

/// Load the checkpoint and check it was trained on the current vocabulary.
pub fn load_model(cfg: &RunConfig, vocab: &MessageVocab) -> CliResult<EncoderModel> {
    let bytes = fs::read(&cfg.paths.checkpoint)
        .map_err(|e| CliError::Data(format!("cannot read checkpoint {}: {e}", cfg.paths.checkpoint.display())))?;
    let (model, digest) = load_checkpoint(&bytes)?;
    if digest != vocab.digest() || model.config.vocab_size != vocab.size() {
        return Err(CliError::Data(
            "checkpoint was trained on a different vocabulary".into(),
        ));
    }
    Ok(model)
}

pub fn cmd_mine(cfg: &RunConfig) -> CliResult<MineOutcome> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg, &vocab)?;
    let g = graph_for(cfg, &vocab);
    let out = mine_all(&g, &model, &vocab, &cfg.mining)?;

    write_atomic(&cfg.paths.mined, render_flow_file(&out.flows).as_bytes())?;
    let mut scores = String::new();
    for m in &out.mined {
        let status = if m.unreached { " (unreached)" } else { "" };
        let _ = writeln!(scores, "# {} => {}{status}", m.start, m.end);
        scores.push_str(&m.score_report());
    }
    write_atomic(&cfg.paths.scores, scores.as_bytes())?;

    if let Some(dir) = &cfg.paths.dumps {
        for (k, m) in out.mined.iter().enumerate() {
            let before = reachable_between(&g, &m.start, &m.end);
            write_atomic(&dir.join(format!("pair{k}.before.txt")), dump_edges(before).as_bytes())?;
            write_atomic(
                &dir.join(format!("pair{k}.after.txt")),
                dump_edges(m.edges.iter().map(|(u, v)| (u, v))).as_bytes(),
            )?;
        }
    }
    Ok(out)
}

/// Edges of `g` lying on some walk from `start` to `end`.
fn reachable_between<'a>(
    g: &'a CausalityGraph,
    start: &flowmine::flow::Message,
    end: &flowmine::flow::Message,
) -> Vec<(&'a flowmine::flow::Message, &'a flowmine::flow::Message)> {
    use std::collections::BTreeSet;
    let mut fwd = BTreeSet::new();
    let mut stack: Vec<&flowmine::flow::Message> = g.nodes().filter(|n| *n == start).collect();
    while let Some(n) = stack.pop() {
        if fwd.insert(n) && n != end {
            stack.extend(g.successors(n));
        }
    }
    let mut bwd: BTreeSet<&flowmine::flow::Message> = g.nodes().filter(|n| *n == end).collect();
    loop {
        let before = bwd.len();
        for (u, v) in g.edges() {
            if bwd.contains(v) && u != end {
                bwd.insert(u);
            }
        }
        if bwd.len() == before {
            break;
        }
    }
    g.edges()
        .filter(|(u, v)| fwd.contains(u) && bwd.contains(u) && fwd.contains(v) && bwd.contains(v) && *u != end)
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let gt = load_flows(cfg)?;
    let mined = parse_flow_file_with(&read_text(&cfg.paths.mined, "mined flows")?, cfg.causality_direction)?;
    let pairing: Option<BTreeMap<String, String>> = match &cfg.paths.pairing {
        Some(p) => Some(
            serde_json::from_str(&read_text(p, "pairing file")?)
                .map_err(|e| CliError::Data(format!("pairing file: {e}")))?,
        ),
        None => None,
    };
    let report = compare(&mined, &gt, pairing.as_ref());
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_atomic(&cfg.paths.report, json.as_bytes())?;
    Ok(report)
}

pub fn cmd_all(cfg: &RunConfig, on_epoch: impl FnMut(usize, f64)) -> CliResult<EvalReport> {
    cmd_gen(cfg)?;
    cmd_graph(cfg)?;
    cmd_train(cfg, on_epoch)?;
    let mined = cmd_mine(cfg)?;
    if let Some((name, v)) = mined.violations.first() {
        // a union of accepted paths can be cyclic when the model prunes too little
        return Err(CliError::Data(format!("mined flow `{name}` is not a valid flow: {v:?}")));
    }
    cmd_eval(cfg)
}
