use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saslab::analysis::{analyze_run, AnalysisConfig, AnalysisReport};
use saslab::data::Dataset;
use saslab::measure::{measure_run, Family};
use saslab::plots::emit_plot_data;
use saslab::store::{append_jsonl, default_root, run_dir, write_atomic, write_json};
use saslab::sweep::{correlate_across_seeds, multistage_sweep, SweepSpec};
use saslab::{run_experiment, ExperimentConfig, LabError, LabResult, RunManifest, RunOptions};

#[derive(Parser)]
#[command(name = "saslab", version, about = "Train and analyze small masked language models")]
struct Cli {
    /// Directory holding all runs (overrides SASLAB_ROOT).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct AnalysisArgs {
    /// Break window in steps (default: five checkpoint spacings).
    #[arg(long)]
    delta: Option<f64>,
    /// Ignore break candidates before this step.
    #[arg(long)]
    exclude_before: Option<f64>,
    /// Spike window in checkpoints.
    #[arg(long, default_value_t = 10)]
    spike_window: usize,
}

impl AnalysisArgs {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig {
            delta: self.delta,
            exclude_before: self.exclude_before,
            spike_window: self.spike_window,
            ..AnalysisConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary, training corpus, held-out set and minimal pairs.
    GenCorpus {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of a config (or one seed).
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many updates, leaving a resumable run.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Replace an existing run trained under a different config.
        #[arg(long)]
        overwrite: bool,
    },
    /// Probe UAS and continuous SAS at every checkpoint of a run directory.
    Probe { run: PathBuf },
    /// Measure every metric family at every checkpoint of a run directory.
    Eval { run: PathBuf },
    /// Analyze a measured run directory and write report.json into it.
    Analyze {
        run: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Train, measure and analyze release-schedule variants of a config.
    Sweep {
        config: PathBuf,
        /// λ applied before release (default: the config's first stage).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        releases: Vec<u64>,
        /// Fixed evaluation step (default: the final step).
        #[arg(long)]
        eval_step: Option<u64>,
        /// Steps after release for the second evaluation convention.
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Correlate two metrics at one step across the seeds of a config.
    Correlate {
        config: PathBuf,
        metric_a: String,
        metric_b: String,
        #[arg(long)]
        step: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze every seed of a config and write plot CSVs and a figure manifest.
    Plots {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
}

fn print_report(r: &AnalysisReport) {
    let clear = |c: bool| if c { "clear" } else { "no clear onset" };
    println!(
        "{} seed {}: structure onset {} ({}), capabilities onset {} ({}): {}; spike {:.3}",
        r.name,
        r.seed,
        r.structure_onset.report.t_star,
        clear(r.structure_onset.clear),
        r.capabilities_onset.report.t_star,
        clear(r.capabilities_onset.clear),
        r.ordering.describe(),
        r.spike.magnitude
    );
    if let Some(a) = &r.alternative_onset {
        println!("  alternative strategy onset {} ({})", a.report.t_star, clear(a.clear));
    }
}

fn measured(cfg: &ExperimentConfig, root: &Path, quiet: bool) -> LabResult<Vec<RunManifest>> {
    cfg.seeds
        .iter()
        .map(|&s| {
            let mut m = RunManifest::load(&run_dir(root, &cfg.name, s))?;
            measure_run(&mut m, &Family::ALL, quiet)?;
            Ok(m)
        })
        .collect()
}

fn run(cli: Cli) -> LabResult<()> {
    let root = cli.root.unwrap_or_else(default_root);
    let quiet = cli.quiet;
    match cli.command {
        Command::GenCorpus { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::build(&cfg)?;
            write_json(&out.join("vocab.json"), &data.vocab)?;
            for (name, rows) in [("train.jsonl", &data.train), ("held_out.jsonl", &data.held_out)] {
                let path = out.join(name);
                write_atomic(&path, b"")?;
                append_jsonl(&path, rows)?;
            }
            let pairs = out.join("pairs.jsonl");
            write_atomic(&pairs, b"")?;
            append_jsonl(&pairs, &data.pairs(&cfg)?)?;
            println!("{}", out.display());
        }
        Command::Train {
            config,
            seed,
            stop_after,
            overwrite,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = seed.map_or(cfg.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let opts = RunOptions {
                    stop_after,
                    overwrite,
                    quiet,
                };
                let m = run_experiment(&cfg, s, &root, opts)?;
                println!("{}", m.dir.display());
            }
        }
        Command::Probe { run } => {
            let mut m = RunManifest::load(&run)?;
            measure_run(&mut m, &[Family::Probe], quiet)?;
        }
        Command::Eval { run } => {
            let mut m = RunManifest::load(&run)?;
            measure_run(&mut m, &Family::ALL, quiet)?;
        }
        Command::Analyze { run, analysis } => {
            let m = RunManifest::load(&run)?;
            let report = analyze_run(&m, &analysis.config())?;
            write_json(&run.join("report.json"), &report)?;
            print_report(&report);
        }
        Command::Sweep {
            config,
            lambda,
            releases,
            eval_step,
            offset,
            out,
            analysis,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let lambda = lambda.unwrap_or_else(|| cfg.regularizer.stages[0].lambda);
            let spec = SweepSpec {
                lambda,
                releases,
                seeds: cfg.seeds.clone(),
                eval_step: eval_step.unwrap_or(cfg.total_steps),
                offset,
            };
            let table = multistage_sweep(&cfg, &spec, &root, &analysis.config(), quiet)?;
            let out = out.unwrap_or_else(|| root.join(format!("{}-sweep.json", cfg.name)));
            write_json(&out, &table)?;
            for r in &table.rows {
                println!(
                    "release {:>6} seed {:>3}: loss {:.4} uas {:.3} acc {:.3} | structure onset {} spike {:.3}",
                    r.release_step,
                    r.seed,
                    r.at_step.loss,
                    r.at_step.uas,
                    r.at_step.pair_accuracy,
                    r.structure_onset,
                    r.spike_magnitude
                );
            }
        }
        Command::Correlate {
            config,
            metric_a,
            metric_b,
            step,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ms = measured(&cfg, &root, quiet)?;
            let c = correlate_across_seeds(&ms, &metric_a, &metric_b, step.unwrap_or(cfg.total_steps))?;
            let out = out.unwrap_or_else(|| root.join(format!("{}-{metric_a}-{metric_b}.json", cfg.name)));
            write_json(&out, &c)?;
            println!(
                "r = {:.4}, R² = {:.4}{} over {} seeds",
                c.pearson_r,
                c.r_squared,
                if c.degenerate { " (degenerate)" } else { "" },
                c.n
            );
        }
        Command::Plots { config, out, analysis } => {
            let cfg = ExperimentConfig::load(&config)?;
            let reports = measured(&cfg, &root, quiet)?
                .iter()
                .map(|m| analyze_run(m, &analysis.config()))
                .collect::<LabResult<Vec<_>>>()?;
            if reports.is_empty() {
                return Err(LabError::Invalid("no runs".into()));
            }
            let out = out.unwrap_or_else(|| root.join(&cfg.name).join("plots"));
            let fm = emit_plot_data(&reports, &out)?;
            for r in &reports {
                print_report(r);
            }
            println!("{} figures in {}", fm.figures.len(), out.display());
        }
    }
    Ok(())
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
