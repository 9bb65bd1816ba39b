use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cdc_core::denoiser::{DenoiserConfig, NgramDenoiser};
use cdc_core::diffusion::{NoiseSchedule, ScheduleKind};
use cdc_core::minilang::{gen_corpus, vocab, Corpus, CorpusConfig};
use cdc_core::suite::{
    denoiser_from_corpus, prepare, report_from_traces, run_suite, surrogate_examples, write_outputs, OperatorChoice,
    RunConfig,
};
use cdc_core::surrogate::{train_surrogate, SurrogateConfig};
use cdc_core::verify::{run_all, VerifyScale};

#[derive(Parser)]
#[command(name = "cdc", about = "Constrained masked diffusion on MiniLang")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Functional,
    Security,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled corpus as JSON lines.
    GenCorpus {
        #[arg(long, value_enum, default_value = "functional")]
        kind: Kind,
        #[arg(long, default_value_t = 3000)]
        size: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        pass_rate: Option<f64>,
        #[arg(long)]
        vulnerability_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the n-gram denoiser on a corpus.
    TrainDenoiser {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON file with denoiser settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also fit feedback tables on the corpus programs labeled safe.
        #[arg(long)]
        feedback: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the constraint surrogate on a functional corpus.
    TrainSurrogate {
        #[arg(long)]
        corpus: PathBuf,
        /// Denoiser used to draw extra interpreter-labeled samples.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        self_samples: usize,
        #[arg(long, default_value_t = 13)]
        sample_seed: u64,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        threshold: i64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a task suite from a JSON config; writes traces and a report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        operator: Option<OperatorChoice>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the sampler, operators and analyzer against the brute-force oracles.
    Verify {
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        json: bool,
    },
    /// Recompute aggregate metrics from a directory of trace files.
    Metrics {
        #[arg(long)]
        traces: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_corpus(path: &PathBuf) -> Result<Corpus> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Corpus::read_jsonl(BufReader::new(f))?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus {
            kind,
            size,
            seed,
            len,
            pass_rate,
            vulnerability_rate,
            out,
        } => {
            let mut cfg = match kind {
                Kind::Functional => CorpusConfig::functional(size),
                Kind::Security => CorpusConfig::security(size, 0.5),
            };
            if let Some(l) = len {
                cfg.len = l;
            }
            if let Some(p) = pass_rate {
                cfg.pass_rate = p;
            }
            if let Some(v) = vulnerability_rate {
                cfg.vulnerability_rate = v;
            }
            let corpus = gen_corpus(&cfg, seed)?;
            corpus.write_jsonl(BufWriter::new(File::create(&out)?))?;
            eprintln!("wrote {} programs to {}", corpus.len(), out.display());
        }
        Command::TrainDenoiser {
            corpus,
            config,
            feedback,
            out,
        } => {
            let cfg: DenoiserConfig = match &config {
                Some(p) => read_json(p)?,
                None => DenoiserConfig::default(),
            };
            let model = denoiser_from_corpus(&read_corpus(&corpus)?, &cfg, feedback)?;
            std::fs::write(&out, model.to_json()?)?;
            eprintln!("wrote denoiser to {}", out.display());
        }
        Command::TrainSurrogate {
            corpus,
            denoiser,
            self_samples,
            sample_seed,
            steps,
            threshold,
            config,
            out,
        } => {
            let cfg: SurrogateConfig = match &config {
                Some(p) => read_json(p)?,
                None => SurrogateConfig::default(),
            };
            let corpus = read_corpus(&corpus)?;
            if self_samples > 0 && denoiser.is_none() {
                bail!("--self-samples needs --denoiser");
            }
            let d = match &denoiser {
                Some(p) => Some(NgramDenoiser::from_json(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let len = corpus.programs.first().map_or(0, Vec::len);
            let schedule = NoiseSchedule::new(steps, ScheduleKind::Linear)?;
            let examples = surrogate_examples(&corpus, d.as_ref(), self_samples, sample_seed, &schedule, len, threshold)?;
            let (model, report) = train_surrogate(&examples, vocab().len(), &cfg)?;
            std::fs::write(&out, model.to_json()?)?;
            eprintln!(
                "wrote surrogate to {} (holdout AUC {})",
                out.display(),
                report.holdout_auc.map_or("n/a".into(), |a| format!("{a:.3}"))
            );
        }
        Command::Run { config, operator, out } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?)?,
                None => RunConfig::default(),
            }
            .with_env_seed()?;
            if let Some(op) = operator {
                cfg.operator = op;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            let prep = prepare(&cfg)?;
            let result = run_suite(&prep, &cfg)?;
            if let Some(dir) = &cfg.output_dir {
                write_outputs(dir, &prep, &result)?;
                eprintln!("wrote traces and report to {}", dir.display());
            }
            println!("{}", serde_json::to_string_pretty(&result.report.aggregate)?);
        }
        Command::Verify { quick, json } => {
            let checks = run_all(if quick { VerifyScale::QUICK } else { VerifyScale::FULL })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&checks)?);
            } else {
                for c in &checks {
                    println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
            }
            if checks.iter().any(|c| !c.passed) {
                std::process::exit(1);
            }
        }
        Command::Metrics { traces } => {
            let dir = if traces.join("traces").is_dir() { traces.join("traces") } else { traces };
            println!("{}", serde_json::to_string_pretty(&report_from_traces(&dir)?)?);
        }
    }
    Ok(())
}
