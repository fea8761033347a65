use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_lens, Overrides};
use relpos::Result;

#[derive(Debug, Parser)]
#[command(name = "relpos", version, about = "Position-embedding experiments for self-attention encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print position-parameter counts of every method for (m, h, n, d).
    Paramcount(ParamcountArgs),
    /// Finite-difference gradient check of the configured method.
    Gradcheck(Common),
    /// Compare the two pairwise logit forms and check identity initialization.
    Equivalence(Common),
    /// Train on the configured task; writes metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint at the configured lengths.
    Eval(EvalArgs),
    /// Train one model per clip distance and seed; writes the accuracy-vs-k table.
    SweepK(Common),
    /// Train at short lengths, then evaluate at every configured length.
    Extrapolate(Common),
    /// Export head-averaged attention and position-embedding weights as CSV.
    ExportAttn(ExportArgs),
}

/// Flags shared by every command; they override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Position method: absolute, sinusoid, shaw, xlnet, method1..method4.
    #[arg(long)]
    pub method: Option<String>,
    /// Clip distance.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum training length n (sizes the position tables).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Comma-separated evaluation lengths.
    #[arg(long)]
    pub eval_lens: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Models trained concurrently in a sweep.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Common {
    pub fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            method: self.method.clone(),
            k: self.k,
            seed: self.seed,
            max_len: self.max_len,
            eval_lens: self.eval_lens.as_deref().map(parse_lens).transpose()?,
            out: self.out.clone(),
            workers: self.workers,
        })
    }
}

#[derive(Debug, Args)]
pub struct ParamcountArgs {
    #[command(flatten)]
    pub common: Common,
    /// Layers m (default 12, or the config file's value).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Heads h (default 12, or the config file's value).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-head width d (default 64, or the config file's d_z).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Also build each table and compare its element count.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File of whitespace- or comma-separated token ids.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Head whose position embeddings are exported.
    #[arg(long, default_value_t = 0)]
    pub head: usize,
}
