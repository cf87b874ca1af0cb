mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dive_core::DiveError;

#[derive(Parser)]
#[command(name = "dive", version, about = "Dense-to-MoE reconstruction by diversity-aware pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Unset flags fall back to the run
/// directory's `config.json`, then to `--preset`.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset: dive-1of8, dive-2of8 or smoke.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// FFN pruning ratio per expert.
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    /// Router temperature during dense router training.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Token budget of the stage being run (sparse stage for multi-stage commands).
    #[arg(long, global = true)]
    pub tokens: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domain corpora.
    GenCorpus,
    /// Train the dense model on all domains.
    TrainDense,
    /// Prune the dense model on a mixture of all domains.
    Prune,
    /// Prune once per domain and evaluate every pruned model on every domain.
    Affinity,
    /// Cluster domains by the correlation of their affinity profiles.
    Cluster,
    /// Build the MoE from per-cluster pruned experts.
    Reconstruct {
        /// Calibrate each expert on a random mixture instead of its cluster.
        #[arg(long)]
        no_dam: bool,
    },
    /// Dense router training with all experts active.
    TrainRouters,
    /// Sparse training of adapters, norms and routers.
    TrainSparse {
        /// Also train the attention projections.
        #[arg(long)]
        with_mha: bool,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score this file instead of the held-out domain streams.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Expert activation ratios per domain.
    RouteStats {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-token expert attribution for a text.
    CaseStudy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "domain")]
        text: Option<String>,
        /// Take a held-out snippet of this domain.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value_t = 256)]
        len: usize,
    },
    /// Perplexity table over every model present in the run directory.
    Compare,
    /// Random channel-split MoE retrained under the same budgets.
    BaselineSplit,
    /// Ablation runs.
    Ablate {
        /// Random calibration mixing instead of affinity clusters.
        #[arg(long)]
        no_dam: bool,
        /// Train attention projections in the sparse stage.
        #[arg(long)]
        with_mha: bool,
    },
    /// Every stage from corpus generation to the comparison table.
    Run,
    /// Render a `row,col,value` CSV as an SVG heatmap.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

/// A required artifact or argument is absent.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 2;
    }
    for e in err.chain() {
        if let Some(d) = e.downcast_ref::<DiveError>() {
            if d.is_numeric() {
                return 3;
            }
            match d.root() {
                DiveError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => return 2,
                DiveError::Registry(_) => return 2,
                _ => {}
            }
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DIVE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("DIVE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(UsageError("DIVE_THREADS must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::dispatch(cli.common, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
