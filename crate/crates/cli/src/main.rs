use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use falcon_lab_cli::sweep::{thread_limit, SweepAxis, SweepSpec};
use falcon_lab_cli::{pipeline, verify, Datasets, ExperimentConfig, SplitRef};
use std::path::PathBuf;
use std::process::ExitCode;

/// Toy source-free detector adaptation laboratory.
#[derive(Parser)]
#[command(name = "falcon-lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (dataset seed for gen-data). Also the only sweep seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    no_spar: bool,
    /// Plain cross entropy on pseudo-labels.
    #[arg(long, global = true)]
    no_irpl: bool,
    /// Use prior masks only to filter pseudo-labels. Turns SPAR off.
    #[arg(long, global = true)]
    mask_filter_only: bool,
    #[arg(long, global = true)]
    no_peak_adjust: bool,
    #[arg(long, global = true)]
    no_fgbg: bool,
    #[arg(long, global = true)]
    no_kl: bool,
    /// Flip each prior-mask pixel with this probability.
    #[arg(long, global = true, value_name = "P")]
    noisy_prior: Option<f64>,
    /// Update the teacher once per pass over the target set.
    #[arg(long, global = true)]
    ema_per_epoch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source and target splits.
    GenData,
    /// Train the source model.
    Pretrain,
    /// Mean-teacher adaptation on the target training split.
    Adapt {
        /// Source checkpoint [default: <out>/source.ck]
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Per-class AP and mAP of a checkpoint.
    Eval {
        /// [default: <out>/teacher.ck]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "target-val")]
        split: SplitRef,
    },
    /// Monte-Carlo checks of the noisy-risk bounds.
    VerifyBounds,
    /// Adapt and evaluate over a grid of loss weights and seeds.
    Sweep {
        /// `lambda1|lambda2|m=v1,v2,...`; repeat for a cartesian product.
        #[arg(long = "grid", required = true)]
        grid: Vec<SweepAxis>,
    },
}

impl Common {
    fn resolve(&self, command: &Command) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            if matches!(command, Command::GenData) {
                cfg.dataset.seed = seed;
            } else {
                cfg.train.seed = seed;
                cfg.seeds = vec![seed];
            }
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.clone();
        }
        let s = &mut cfg.switches;
        s.use_spar &= !(self.no_spar || self.mask_filter_only);
        s.use_irpl &= !self.no_irpl;
        s.use_peak_adjust &= !self.no_peak_adjust;
        s.use_fgbg_weighting &= !self.no_fgbg;
        s.use_kl &= !self.no_kl;
        s.mask_filter_only |= self.mask_filter_only;
        if let Some(p) = self.noisy_prior {
            cfg.train.noisy_prior = p;
        }
        cfg.train.ema_per_epoch |= self.ema_per_epoch;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = cli.common.resolve(&cli.command)?;
    match cli.command {
        Command::GenData => {
            println!("{}", pipeline::gen_data(&cfg)?.display());
        }
        Command::Pretrain => {
            println!("{}", pipeline::pretrain(&cfg)?.display());
        }
        Command::Adapt { source } => {
            println!("{}", pipeline::adapt(&cfg, source.as_deref())?.display());
        }
        Command::Eval { checkpoint, split } => {
            print!("{}", pipeline::eval(&cfg, checkpoint.as_deref(), split)?.csv);
        }
        Command::VerifyBounds => {
            let (report, path) = verify::write_bounds_report(&cfg)?;
            for c in &report.checks {
                println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            println!("{}", path.display());
            if !report.all_passed {
                let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
                eprintln!("error: bound checks failed: {}", failed.join(", "));
                return Ok(false);
            }
        }
        Command::Sweep { grid } => {
            let spec = SweepSpec { axes: grid, seeds: cfg.seeds.clone() };
            spec.validate()?;
            let data = Datasets::load(&cfg.data_dir)?;
            let result = falcon_lab_cli::run_sweep(&cfg, &spec, &data, thread_limit()?)?;
            let (rows, summary) = result.write(&cfg)?;
            println!("{}\n{}", rows.display(), summary.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // help and version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
