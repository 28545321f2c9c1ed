use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpot_cli::config::{load_synth_file, DataSource};
use lpot_cli::harness::{self, ALPHA_GRID, K_GRID, LABEL_GRID};
use lpot_cli::{HarnessError, RunSpec};

#[derive(Parser)]
#[command(name = "lpot", about = "Semi-supervised staging with graph propagation and stage transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit once and evaluate on the held-out split.
    Run(Common),
    /// Sweep the labeled fraction over 5%..100%.
    SweepLabels(Common),
    /// Sweep the propagation α.
    SweepAlpha(Common),
    /// Sweep the graph neighbourhood size.
    SweepK(Common),
    /// Majority-class and k-NN baselines on the run protocol.
    Baseline(Common),
    /// Write the synthetic cohort as CSV.
    SynthDump {
        #[command(flatten)]
        common: Common,
        /// Output CSV path (defaults to <out>/synth.csv).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV input with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    unlabeled_token: Option<String>,
    /// key=value synthetic cohort description.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Fraction of training labels kept, e.g. 0.3 or 30%.
    #[arg(long)]
    keep: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Three comma-separated loss weights.
    #[arg(long)]
    betas: Option<String>,
    /// Absolute λ, or `median:f` for f times the median cost.
    #[arg(long)]
    lambda_ot: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn spec(&self) -> Result<RunSpec, HarnessError> {
        let mut spec = RunSpec::default();
        if let Some(path) = &self.config {
            spec.apply_file(path)?;
        }
        if let Some(path) = &self.synth {
            spec.data = DataSource::Synth(load_synth_file(path)?);
        }
        if let Some(path) = &self.data {
            spec.apply("data", &path.display().to_string())?;
        }
        let pairs: [(&str, Option<String>); 12] = [
            ("label_col", self.label_col.clone()),
            ("unlabeled_token", self.unlabeled_token.clone()),
            ("keep", self.keep.clone()),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("betas", self.betas.clone()),
            ("lambda_ot", self.lambda_ot.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("repeats", self.repeats.map(|v| v.to_string())),
            ("jobs", self.jobs.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                spec.apply(key, &v)?;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Label grid for the α and k sweeps: the full grid unless --keep pins one.
    fn keeps(&self, spec: &RunSpec) -> Vec<f64> {
        if self.keep.is_some() {
            vec![spec.keep_fraction]
        } else {
            LABEL_GRID.to_vec()
        }
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(c) => {
            let spec = c.spec()?;
            let report = harness::cmd_run(&spec)?;
            print!("{}", report.metrics.to_table("joint", &report.class_names));
            println!("stop: {:?} after {} outer iteration(s)", report.stop_reason, report.outer_iterations);
            println!("wrote {}", spec.out.display());
        }
        Command::SweepLabels(c) => {
            let spec = c.spec()?;
            let report = harness::sweep_labels(&spec, &LABEL_GRID)?;
            harness::write_sweep(&report, "sweep_labels")?;
            print!("{}", report.to_table());
        }
        Command::SweepAlpha(c) => {
            let spec = c.spec()?;
            let report = harness::sweep_alpha(&spec, &ALPHA_GRID, &c.keeps(&spec))?;
            harness::write_sweep(&report, "sweep_alpha")?;
            print!("{}", report.to_table());
        }
        Command::SweepK(c) => {
            let spec = c.spec()?;
            let report = harness::sweep_k(&spec, &K_GRID, &c.keeps(&spec))?;
            harness::write_sweep(&report, "sweep_k")?;
            print!("{}", report.to_table());
        }
        Command::Baseline(c) => {
            let spec = c.spec()?;
            let report = harness::cmd_baseline(&spec)?;
            let names: Vec<String> = report.majority.support.iter().enumerate().map(|(i, _)| i.to_string()).collect();
            print!("{}", report.majority.to_table("majority", &names));
            println!();
            print!("{}", report.knn.to_table("knn", &names));
            if let Some(raw) = &report.raw_propagation {
                println!();
                print!("{}", raw.to_table("raw-propagation", &names));
            }
        }
        Command::SynthDump { common, file } => {
            let spec = common.spec()?;
            let DataSource::Synth(cfg) = &spec.data else {
                return Err(HarnessError::Config("synth-dump needs a synthetic source".into()));
            };
            let path = file.unwrap_or_else(|| spec.out.join("synth.csv"));
            harness::cmd_synth_dump(cfg, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
