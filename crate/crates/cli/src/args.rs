use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tiltflow", version, about = "Aligned flow matching and feature guidance on a 2-D toy world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the velocity network and projection head.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Draw unguided samples from a checkpoint (ODE or SDE).
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Draw potential-guided SDE samples toward a condition feature.
    Guide {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Exact samples from the tilted toy density by rejection.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Compare two sample CSVs, or report the support coverage of one.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Embedding-distance scan over random condition pairs.
    Embedscan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        n_per_condition: Option<usize>,
    },
    /// SVG scatter of a CSV (grey) with an optional overlay CSV (red).
    Plot {
        #[command(flatten)]
        common: Common,
        /// Base sample CSV.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Overlay sample CSV.
        #[arg(long)]
        b: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub tap: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// ode or sde.
    #[arg(long)]
    pub mode: Option<String>,
    /// Time clip, also the last grid time.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    /// Condition feature as "a,b"; normalized if not unit length.
    #[arg(long, allow_hyphen_values = true)]
    pub feature: Option<String>,
    /// Potential, e.g. "ipa:full" or "spa:i=1,T=0.1".
    #[arg(long)]
    pub potential: Option<String>,
    /// full (-2 lambda t grad V) or half (-lambda t grad V).
    #[arg(long)]
    pub guidance_convention: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// energy, skl or coverage.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub margin: Option<f64>,
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

fn push_path(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        out.push((key, v.display().to_string()));
    }
}

/// Flag values as config overrides, in a fixed order.
pub trait Overrides {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>);
}

impl Overrides for Common {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "seed", &self.seed);
        push_path(out, "out", &self.out);
    }
}

impl Overrides for TrainArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "epochs", &self.epochs);
        push(out, "batch_size", &self.batch_size);
        push(out, "dataset_size", &self.dataset_size);
        push(out, "learning_rate", &self.learning_rate.map(|v| format!("{v:?}")));
        push(out, "beta", &self.beta.map(|v| format!("{v:?}")));
        push(out, "depth", &self.depth);
        push(out, "hidden", &self.hidden);
        push(out, "tap", &self.tap);
        push(out, "head_hidden", &self.head_hidden);
    }
}

impl Overrides for SamplerArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push_path(out, "ckpt", &self.ckpt);
        push(out, "steps", &self.steps);
        push(out, "mode", &self.mode);
        push(out, "t_end", &self.eps.map(|v| format!("{v:?}")));
        push(out, "n", &self.n);
    }
}

impl Overrides for GuidanceArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "lambda", &self.lambda.map(|v| format!("{v:?}")));
        push(out, "feature", &self.feature);
        push(out, "potential", &self.potential);
        push(out, "guidance_convention", &self.guidance_convention);
    }
}

impl Overrides for EvalArgs {
    fn overrides(&self, out: &mut Vec<(&'static str, String)>) {
        push_path(out, "a", &self.a);
        push_path(out, "b", &self.b);
        push(out, "metric", &self.metric);
        push(out, "margin", &self.margin.map(|v| format!("{v:?}")));
    }
}
