use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use backtrans_core::experiment::{
    compare_runs, emit_report, load_record, resolve_run_dir, run_experiment_until, ExperimentConfig, ExperimentError,
    ReportFormat, ReportTable, Stage,
};
use backtrans_core::metrics::{evaluate_all_with, TokenizerProfile};
use backtrans_core::subword::BpeModel;
use backtrans_core::translator::{load_model, translate, BeamConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "backtrans",
    version,
    about = "Back-translation experiments for low-resource MT"
)]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `[run] dir` in the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Tsv,
    Text,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Tsv => ReportFormat::Tsv,
            Format::Text => ReportFormat::Text,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean every configured corpus.
    Clean,
    /// Build train/valid/test splits.
    Split,
    /// Learn the shared BPE model.
    LearnBpe,
    /// Train the bilingual baseline models.
    Train,
    /// Translate lines from a file or stdin with a saved model.
    Translate {
        #[arg(long)]
        model: PathBuf,
        /// BPE merges; defaults to `bpe/merges.txt` in the run directory.
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = BeamConfig::default().beam_width)]
        beam_width: usize,
    },
    /// Run the configured back-translation strategy.
    Bt,
    /// Evaluate the run's models, or score a hypothesis file against references.
    Evaluate {
        #[arg(long, requires = "reference")]
        hypotheses: Option<PathBuf>,
        #[arg(long = "references", requires = "hypotheses")]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "plain")]
        profile: String,
    },
    /// Run all stages and print the report.
    Report {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long, default_value_t = 2)]
        decimals: usize,
    },
    /// Compare the final models of several runs on a shared test set.
    Compare {
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        direction: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn io_error(path: &Path) -> impl Fn(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ExperimentError::Invalid("--config is required for this command".into()))?;
    if !path.exists() {
        return Err(ExperimentError::MissingPath(path.clone()));
    }
    let config = ExperimentConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn run_until(cli: &Cli, stage: Stage) -> Result<PathBuf, ExperimentError> {
    let config = load_config(cli)?;
    let dir = resolve_run_dir(&config, cli.run_dir.as_deref())?;
    let record = run_experiment_until(&config, &dir, stage)?;
    for s in &record.executed {
        log::info!("stage {s} done");
    }
    Ok(dir)
}

fn read_lines(path: Option<&Path>) -> Result<Vec<String>, ExperimentError> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)
            .map_err(io_error(p))?
            .lines()
            .map(str::to_string)
            .collect()),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_error(Path::new("<stdin>"))),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), ExperimentError> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_error(p)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_error(Path::new("<stdout>"))),
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Clean => println!("{}", run_until(cli, Stage::Clean)?.join("splits/clean").display()),
        Command::Split => println!("{}", run_until(cli, Stage::Split)?.join("splits").display()),
        Command::LearnBpe => println!("{}", run_until(cli, Stage::Bpe)?.join("bpe/merges.txt").display()),
        Command::Train => println!("{}", run_until(cli, Stage::Baseline)?.join("models").display()),
        Command::Bt => println!("{}", run_until(cli, Stage::Bt)?.join("state").display()),
        Command::Translate {
            model,
            bpe,
            input,
            output,
            beam_width,
        } => {
            let bpe_path = match bpe {
                Some(p) => p.clone(),
                None => cli
                    .run_dir
                    .as_ref()
                    .map(|d| d.join("bpe/merges.txt"))
                    .ok_or_else(|| ExperimentError::Invalid("give --bpe or --run-dir".into()))?,
            };
            let model = load_model(model)?;
            let bpe = BpeModel::load(&bpe_path)?;
            let sentences = read_lines(input.as_deref())?;
            let beam = BeamConfig {
                beam_width: *beam_width,
                ..BeamConfig::default()
            };
            let out = translate(&model, &sentences, &beam, &bpe)?;
            log::info!("translated {} lines {}", out.len(), model.direction());
            write_out(
                output.as_deref(),
                &out.iter().map(|l| format!("{l}\n")).collect::<String>(),
            )?;
        }
        Command::Evaluate {
            hypotheses: Some(h),
            reference: Some(r),
            profile,
        } => {
            let hyps = read_lines(Some(h))?;
            let refs = read_lines(Some(r))?;
            let profile = TokenizerProfile::by_name(profile)
                .ok_or_else(|| ExperimentError::Invalid(format!("unknown tokenizer profile {profile}")))?;
            let e = evaluate_all_with(&hyps, &refs, None, &profile)?;
            println!("bleu\t{:.2}", e.bleu.score);
            println!("sacrebleu\t{:.2}", e.sacrebleu.score);
            println!("chrf2\t{:.2}", e.chrf2.score);
            println!("ter\t{:.2}", e.ter.score);
            println!("signature\t{}", e.sacrebleu.signature);
        }
        Command::Evaluate { .. } => {
            let dir = run_until(cli, Stage::Evaluate)?;
            let record = load_record(&dir)?;
            print!(
                "{}",
                emit_report(&ReportTable { rows: record.rows }, ReportFormat::Text, 2)
            );
        }
        Command::Report { format, decimals } => {
            let dir = run_until(cli, Stage::Report)?;
            let record = load_record(&dir)?;
            print!(
                "{}",
                emit_report(&ReportTable { rows: record.rows }, (*format).into(), *decimals)
            );
        }
        Command::Compare {
            runs,
            direction,
            format,
        } => {
            let records = runs.iter().map(|r| load_record(r)).collect::<Result<Vec<_>, _>>()?;
            let table = compare_runs(&records, direction)?;
            print!("{}", emit_report(&table, (*format).into(), 2));
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error\tusage\t{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
