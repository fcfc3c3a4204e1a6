use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cluda::data::{generate_corpus, read_dataset, read_manifest, Corpus, SPLITS};
use cluda::eval::{
    ablate, ablation_profile, evaluate_checkpoint, load_corpus, run_experiment, worker_threads, ExperimentConfig,
    Preset,
};
use cluda::verify::{grad_check, oracle_check, CheckOutcome};
use cluda::Error;

#[derive(Parser)]
#[command(name = "cluda", version, about = "Contrastive domain adaptation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target corpus described by a config.
    GenData { config: PathBuf, out_dir: PathBuf },
    /// Train and evaluate per a config; artifacts go to `run.output_dir`.
    Train { config: PathBuf },
    /// Score a checkpoint on a labelled dataset (a split or a corpus root).
    Eval { checkpoint: PathBuf, dataset: PathBuf },
    /// Run an ablation preset over several seeds.
    Ablate {
        /// table4a, table4b, multires or embed
        preset: String,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Base config (default: the desk ablation profile).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root (default: runs/ablate-<preset>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override schedule.total_iters.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Compare library results with direct re-computations.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

enum Failure {
    Lib(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn report_checks(results: &[CheckOutcome]) -> Result<(), Failure> {
    for r in results {
        println!("{r}");
    }
    match results.iter().filter(|r| !r.pass()).count() {
        0 => Ok(()),
        n => Err(Failure::Checks(n)),
    }
}

/// A split directory (with its own manifest) or a corpus root, whose held-out target split is used.
fn read_labelled(path: &Path) -> cluda::Result<Vec<cluda::data::SegSample>> {
    if read_manifest(path).is_ok() {
        return Ok(read_dataset(path)?.1);
    }
    Ok(read_dataset(&path.join(SPLITS[2]))?.1)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out_dir } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let corpus: Corpus = generate_corpus(&cfg.data.corpus_spec())?;
            corpus.write(&out_dir)?;
            println!(
                "wrote {} source, {} target, {} held-out target images to {}",
                corpus.source.len(),
                corpus.target.len(),
                corpus.target_val.len(),
                out_dir.display()
            );
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let a = run_experiment(&cfg)?;
            let last = a.final_eval();
            println!("iteration={} miou={} output={}", last.iteration, last.report.miou, a.output_dir.display());
        }
        Command::Eval { checkpoint, dataset } => {
            let samples = read_labelled(&dataset)?;
            let (iteration, report) = evaluate_checkpoint(&checkpoint, &samples)?;
            for (c, iou) in report.per_class.iter().enumerate() {
                match iou {
                    Some(v) => println!("class={c} iou={v}"),
                    None => println!("class={c} iou=absent"),
                }
            }
            println!("iteration={iteration} images={} miou={}", samples.len(), report.miou);
        }
        Command::Ablate { preset, seeds, config, out, iters } => {
            let preset: Preset = preset.parse()?;
            let mut base = match config {
                Some(p) => ExperimentConfig::from_file(&p)?,
                None => ablation_profile(ExperimentConfig::default()),
            };
            if let Some(n) = iters {
                base.schedule.total_iters = n;
                base.schedule.warmup_iters = base.schedule.warmup_iters.min(n);
            }
            base.validate()?;
            let corpus = load_corpus(&base)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/ablate-{preset}")));
            let summary = ablate(preset, &seeds, &base, &corpus, &out, worker_threads()?)?;
            print!("{}", summary.table());
        }
        Command::GradCheck { seed, instances } => report_checks(&grad_check(seed, instances)?)?,
        Command::OracleCheck { seed, instances } => report_checks(&oracle_check(seed, instances)?)?,
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('"', "\\\"")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.to_string();
            let lines: Vec<&str> = detail
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            let msg = lines.join(" ");
            eprintln!("error kind=usage message=\"{}\"", one_line(msg.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error kind={} message=\"{}\"", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
        Err(Failure::Checks(n)) => {
            eprintln!("error kind=check-failed message=\"{n} check(s) out of tolerance\"");
            ExitCode::FAILURE
        }
    }
}
