use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use truncsel::data::{load_survey, load_truncated, read_json, save_survey, save_truncated, write_json};
use truncsel::dgp::{truncate, Generator};
use truncsel::estimator::fit_plsim;
use truncsel::harness::{emit_report, run_study, survey_bundle, EstimatorKind, ReportFormat, StudyConfig, StudySummary};
use truncsel::lca::{fit_lca, LcaConfig};
use truncsel::penalty::{fit_penalized_path, select_class_count, write_path_csv};
use truncsel::seeding::stream_seed;
use truncsel::{Error, Result};

#[derive(Parser)]
#[command(name = "truncsel", version, about = "Truncation-bias correction with reference-group shares")]
struct Cli {
    /// Study configuration in TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMode {
    Refined,
    Monolithic,
    Scad,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Write a survey and a truncated sample as CSV.
    Simulate {
        /// Population size before truncation.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        experts: Option<usize>,
    },
    /// Fit a latent class model to a survey file.
    FitLca {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        survey: Option<PathBuf>,
    },
    /// Fit the corrected outcome equation.
    Fit {
        #[arg(long, value_enum)]
        mode: FitMode,
        #[arg(long)]
        survey: Option<PathBuf>,
        #[arg(long)]
        truncated: Option<PathBuf>,
        /// Class count for the refined mode.
        #[arg(long)]
        k: Option<usize>,
        /// Columns of x that also enter the selection index.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        contextual: Vec<usize>,
    },
    /// Run a Monte Carlo study and write its summary and reports.
    Study {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
    /// Render a stored study summary.
    Report {
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<StudyConfig> {
    let mut config = match &cli.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
        config.dgp.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    if let Some(j) = cli.jobs {
        config.jobs = j;
    }
    Ok(config)
}

fn path_or(explicit: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(name))
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Simulate { n, experts } => {
            config.dgp.validate()?;
            let g = Generator::new(config.dgp.clone())?;
            let n = n.unwrap_or(config.dgp.n_population);
            let pop = g.population(n, stream_seed(config.dgp.seed, 0, "population"))?;
            let truncated = truncate(&pop)?;
            let (survey, _) = g.survey(experts.unwrap_or(config.dgp.n_experts), stream_seed(config.dgp.seed, 0, "survey"))?;
            save_survey(&survey, &out.join("survey.csv"))?;
            save_truncated(&truncated, &out.join("truncated.csv"))?;
            println!("survey rows {}, retained {} of {}", survey.n_experts(), truncated.n(), n);
        }
        Command::FitLca { k, survey } => {
            let survey = load_survey(&path_or(survey, &out, "survey.csv"))?;
            let lca = LcaConfig { seed: config.seed, ..config.lca };
            let (model, _) = fit_lca(&survey, *k, &lca)?;
            write_json(&model, &out.join(format!("lca_k{k}.json")))?;
            println!("k {k}: log-likelihood {:.4} after {} iterations", model.log_likelihood, model.n_iterations);
        }
        Command::Fit { mode, survey, truncated, k, contextual } => {
            let survey = load_survey(&path_or(survey, &out, "survey.csv"))?;
            let truncated = load_truncated(&path_or(truncated, &out, "truncated.csv"), contextual.clone())?;
            let lca = LcaConfig { seed: config.seed, ..config.lca };
            let fit = truncsel::estimator::FitConfig { seed: config.seed, ..config.fit.clone() };
            match mode {
                FitMode::Refined | FitMode::Monolithic => {
                    let k = if matches!(mode, FitMode::Refined) { k.unwrap_or(config.dgp.class_count) } else { 1 };
                    let bundle = survey_bundle(&survey, &truncated, &[k], &lca)?;
                    let result = fit_plsim(&bundle, &config.sieve, &fit)?;
                    let name = if k == 1 { "fit_monolithic.json" } else { "fit_refined.json" };
                    write_json(&result, &out.join(name))?;
                    println!("theta {:?} converged {}", result.theta, result.converged);
                }
                FitMode::Scad => {
                    let ks: Vec<usize> = (1..=config.max_classes).collect();
                    let bundle = survey_bundle(&survey, &truncated, &ks, &lca)?;
                    let penalty = truncsel::penalty::PenaltyConfig { fit, ..config.penalty.clone() };
                    let path = fit_penalized_path(&bundle, &config.sieve, None, &penalty)?;
                    write_path_csv(&path, &out.join("scad_path.csv"))?;
                    write_json(&path, &out.join("fit_scad.json"))?;
                    let (count, degenerate) = select_class_count(&path);
                    if degenerate {
                        eprintln!("warning: every share coefficient was removed");
                    }
                    let e = &path.entries[path.selected_index];
                    let theta = &e.params[bundle.layout(&path.sieve).theta()];
                    println!("selected {count} share columns at lambda {:.6}; theta {:?}", e.lambda, theta);
                }
            }
        }
        Command::Study { reps, sizes, estimators } => {
            if let Some(r) = reps {
                config.replications = *r;
            }
            if let Some(s) = sizes {
                config.sample_sizes = s.clone();
            }
            if let Some(e) = estimators {
                config.estimators = e.iter().map(|s| s.parse::<EstimatorKind>()).collect::<Result<_>>()?;
            }
            let summary = run_study(&config)?;
            write_json(&summary, &out.join("summary.json"))?;
            emit_report(&summary, ReportFormat::Csv, &out.join("report.csv"))?;
            emit_report(&summary, ReportFormat::Markdown, &out.join("report.md"))?;
            println!("{} replications, {} failed; reports in {}", summary.replications.len(), summary.failures, out.display());
        }
        Command::Report { format, summary } => {
            let summary: StudySummary = read_json(&path_or(summary, &out, "summary.json"))?;
            let (format, name) = match format {
                Format::Csv => (ReportFormat::Csv, "report.csv"),
                Format::Markdown => (ReportFormat::Markdown, "report.md"),
            };
            emit_report(&summary, format, &out.join(name))?;
            println!("{}", out.join(name).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::StudyAborted { .. } | Error::AllReplicationsFailed(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
