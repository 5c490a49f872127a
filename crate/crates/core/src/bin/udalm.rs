use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use udalm::config::ExperimentConfig;
use udalm::experiment::{self, output_root};
use udalm::Result;

#[derive(Parser)]
#[command(name = "udalm", version, about = "Domain-adaptive anatomical landmark detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config. Defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Forces deterministic mode.
    #[arg(long)]
    deterministic: bool,
    /// Output directory. Falls back to $UDALM_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> PathBuf {
        output_root(self.out.clone())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default config.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
    },
    /// Generate the synthetic benchmark.
    Synth(Common),
    /// Train the source-only model.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Stop after this round (the run stays resumable).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run or resume adaptation.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Initial weights, e.g. the source-only model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this round (the run stays resumable).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Evaluate a checkpoint on a labeled manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Inspect pseudo-label files.
    PseudoLabels {
        #[command(subcommand)]
        action: PseudoLabelsAction,
    },
    /// Summarize run directories into tables and plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to include.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PseudoLabelsAction {
    Show { file: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { profile } => {
            let cfg = match profile {
                Profile::Desk => ExperimentConfig::desk(),
                Profile::Full => ExperimentConfig::full(),
            };
            print!("{}", cfg.to_toml());
        }
        Command::Synth(c) => {
            let out = c.out();
            let s = experiment::cmd_synth(&c.config()?, &out)?;
            println!(
                "wrote {} source, {} target and {} test images to {}",
                s.n_source,
                s.n_target,
                s.n_test,
                out.display()
            );
        }
        Command::TrainSource { common, rounds } => {
            let out = common.out();
            let o = experiment::cmd_train_source(&common.config()?, &out, rounds)?;
            report_rounds(&o.rounds, o.last_round, &out);
        }
        Command::Adapt { common, checkpoint, rounds } => {
            let out = common.out();
            let o = experiment::cmd_adapt(&common.config()?, checkpoint.as_deref(), &out, rounds)?;
            report_rounds(&o.rounds, o.last_round, &out);
        }
        Command::Eval { common, checkpoint, manifest } => {
            let out = common.out();
            let r = experiment::cmd_eval(&common.config()?, &checkpoint, manifest.as_deref(), &out)?;
            print!("{}", experiment::eval_markdown(&r));
        }
        Command::PseudoLabels { action: PseudoLabelsAction::Show { file } } => {
            print!("{}", experiment::cmd_pseudo_labels_show(&file)?);
        }
        Command::Report { common, runs } => {
            print!("{}", experiment::cmd_report(&common.config()?, &runs, &common.out())?);
        }
    }
    Ok(())
}

fn report_rounds(rounds: &[udalm::adaptation::RoundSummary], last: usize, out: &std::path::Path) {
    for r in rounds {
        let loss = r.epochs.last().map_or(f64::NAN, |e| e.base_loss);
        match &r.monitor {
            Some(m) => println!("round {}: loss {loss:.4}, monitor MRE {:.3} mm", r.round, m.mre_mm),
            None => println!("round {}: loss {loss:.4}", r.round),
        }
    }
    println!("last completed round {last}; artifacts in {}", out.display());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
