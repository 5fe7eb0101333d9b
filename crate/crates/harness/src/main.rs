use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use timeq_core::maintenance::Strategy;
use timeq_harness::config::parse_override;
use timeq_harness::pipeline::{analyze_cmd, eval_cmd, quantize_cmd, sample_cmd, select_cmd, train_cmd};
use timeq_harness::report::{group_counts, report};
use timeq_harness::{Experiment, ExperimentConfig, Result, Target};

#[derive(Parser)]
#[command(name = "timeq", version, about = "Quantize a toy diffusion model and study its temporal features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    w_bits: Option<u32>,
    #[arg(long)]
    a_bits: Option<u32>,
    #[arg(long)]
    cache_bits: Option<u32>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Checkpoint to read or write instead of `<output_dir>/model.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Which {
    #[arg(long, conflicts_with = "fp")]
    strategy: Option<String>,
    /// Use the full-precision checkpoint.
    #[arg(long)]
    fp: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision denoiser.
    Train(Common),
    /// Quantize the checkpoint with one strategy.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Measure sample quality and temporal-feature error.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        which: Which,
    },
    /// Write generated points as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        which: Which,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a diagnostic experiment.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Choose per timestep and block between the time branch and the cache.
    Select(Common),
    /// Merge run directories into one table and charts.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut over = Vec::new();
        for s in &self.set {
            over.push(parse_override(s)?);
        }
        let mut flag = |k: &str, v: serde_json::Value| over.push((k.to_string(), v));
        if let Some(d) = &self.dataset {
            flag("dataset", d.clone().into());
        }
        if let Some(v) = self.seed {
            flag("seed", v.into());
        }
        if let Some(v) = self.w_bits {
            flag("w_bits", v.into());
        }
        if let Some(v) = self.a_bits {
            flag("a_bits", v.into());
        }
        if let Some(v) = self.cache_bits {
            flag("cache_bits", v.into());
        }
        if let Some(v) = &self.output_dir {
            flag("output_dir", v.display().to_string().into());
        }
        ExperimentConfig::load(self.config.as_deref(), &over)
    }
}

fn strategy(arg: &Option<String>, cfg: &ExperimentConfig) -> Result<Strategy> {
    match arg {
        Some(s) => Ok(s.parse::<Strategy>()?),
        None => Ok(cfg.strategy),
    }
}

fn target(which: &Which, cfg: &ExperimentConfig) -> Result<Target> {
    if which.fp {
        Ok(Target::Fp)
    } else {
        Ok(Target::Quantized(strategy(&which.strategy, cfg)?))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let m = train_cmd(&cfg, c.checkpoint.as_deref())?;
            println!("trained; artifacts: {}", m.artifacts.join(", "));
        }
        Command::Quantize { common, strategy: s } => {
            let cfg = common.load()?;
            let s = strategy(&s, &cfg)?;
            let m = quantize_cmd(&cfg, s, common.checkpoint.as_deref())?;
            println!("quantized with {s}; artifacts: {}", m.artifacts.join(", "));
        }
        Command::Eval { common, which } => {
            let cfg = common.load()?;
            let t = target(&which, &cfg)?;
            let r = eval_cmd(&cfg, t, common.checkpoint.as_deref())?.row;
            println!(
                "{}: mmd2 {} sqnr_db {} mean_E_t {} mean_L_temporal {} mean_abs_delta {}",
                r.strategy, r.mmd2, r.sqnr_db, r.mean_e_t, r.mean_l_temporal, r.mean_abs_delta
            );
        }
        Command::Sample { common, which, count, out } => {
            let cfg = common.load()?;
            let t = target(&which, &cfg)?;
            let p = sample_cmd(&cfg, t, count, out.as_deref(), common.checkpoint.as_deref())?;
            println!("wrote {}", p.display());
        }
        Command::Analyze { common, experiment, strategy: s } => {
            let cfg = common.load()?;
            let e: Experiment = experiment.parse()?;
            let s = strategy(&s, &cfg)?;
            let m = analyze_cmd(&cfg, e, s, common.checkpoint.as_deref())?;
            println!("{}; artifacts: {}", e.name(), m.artifacts.join(", "));
        }
        Command::Select(c) => {
            let cfg = c.load()?;
            let s = select_cmd(&cfg, c.checkpoint.as_deref())?;
            println!(
                "time branch on {}/{} cells; mean MSE tm {} cm {} selected {}",
                s.tib_cells, s.cells, s.mean_mse_tm, s.mean_mse_cm, s.mean_mse_selected
            );
        }
        Command::Report { runs, out } => {
            let r = report(&runs, &out)?;
            for ((s, w, a), n) in group_counts(&r.rows) {
                println!("{s} w{w}a{a}: {n} rows");
            }
            println!("wrote {} and {} charts", r.table.display(), r.charts.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

