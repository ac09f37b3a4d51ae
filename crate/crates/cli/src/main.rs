use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowmine::encoder::ScoreMode;
use flowmine_cli::{cmd_all, cmd_eval, cmd_gen, cmd_graph, cmd_mine, cmd_train, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "flowmine", version, about = "Mine message-flow specifications from interleaved traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON); relative paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    theta: Option<f64>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    mask_rate: Option<f64>,

    #[arg(long, global = true, value_enum)]
    score_mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Absolute,
    Renormalized,
}

#[derive(Subcommand)]
enum Command {
    /// Generate interleaved traces from the flow file.
    Gen,
    /// Extract the vocabulary and dump the causality graph.
    Graph,
    /// Train the encoder on the traces.
    Train,
    /// Mine flows for the configured (start, end) pairs.
    Mine,
    /// Compare mined flows with the flow file.
    Eval,
    /// gen, graph, train, mine and eval in sequence.
    All,
}

fn print_epoch(epoch: usize, loss: f64) {
    eprintln!("epoch {epoch:>3}  loss {loss:.4}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let ov = Overrides {
        theta: cli.theta,
        epochs: cli.epochs,
        seed: cli.seed,
        mask_rate: cli.mask_rate,
        score_mode: cli.score_mode.map(|m| match m {
            Mode::Absolute => ScoreMode::Absolute,
            Mode::Renormalized => ScoreMode::Renormalized,
        }),
    };
    let cfg = RunConfig::load(&path, &ov)?;
    match cli.command {
        Command::Gen => {
            let ts = cmd_gen(&cfg)?;
            eprintln!("wrote {} traces", ts.traces.len());
        }
        Command::Graph => {
            let g = cmd_graph(&cfg)?;
            eprintln!("causality graph: {} nodes, {} edges", g.node_count(), g.edge_count());
        }
        Command::Train => {
            let out = cmd_train(&cfg, print_epoch)?;
            eprintln!("initial loss {:.4}", out.initial_loss);
        }
        Command::Mine => {
            let out = cmd_mine(&cfg)?;
            for m in out.unreached() {
                eprintln!("warning: {} never reached {}", m.start, m.end);
            }
            eprintln!("mined {} flows", out.flows.flows.len());
        }
        Command::Eval => print!("{}", cmd_eval(&cfg)?.render_table()),
        Command::All => print!("{}", cmd_all(&cfg, print_epoch)?.render_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
