//! Configuration-driven experiment runner: model preparation, seeded task
//! suites, vanilla vs constrained sampling, and the aggregate report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::denoiser::{train_denoiser, DenoiserConfig, NgramDenoiser};
use crate::diffusion::{sample_vanilla, split_seed, trajectory_rng, Context, NoiseSchedule, ScheduleKind, TokenId};
use crate::engine::{run_constrained, CorrectionOutcome, IdentityOperator, Operator, TrajectoryTrace};
use crate::error::{CdcError, Result};
use crate::gradguide::{GradGuide, GradGuideConfig};
use crate::mdfi::{witness_scan, Mdfi, MdfiConfig};
use crate::metrics::{clusters, mean, median};
use crate::minilang::corpus::CorpusKind;
use crate::minilang::interp::N_FAMILIES;
use crate::minilang::{detok, gen_corpus, mask_id, parse_strict, vocab, Corpus, CorpusConfig, FunctionalTask};
use crate::surrogate::{train_surrogate, Example, SurrogateConfig, SurrogateModel, TrainReport};

pub const SEED_ENV: &str = "CDC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorChoice {
    #[default]
    None,
    Gradguide,
    Mdfi,
    Both,
}

impl std::str::FromStr for OperatorChoice {
    type Err = CdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "gradguide" => Ok(Self::Gradguide),
            "mdfi" => Ok(Self::Mdfi),
            "both" => Ok(Self::Both),
            other => Err(CdcError::Config(format!("unknown operator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleBlock {
    #[serde(rename = "T")]
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            steps: 32,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserBlock {
    /// Load a saved model instead of training.
    pub path: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    pub config: DenoiserConfig,
    /// Fit feedback tables on the sanitized, guarded part of the corpus.
    pub feedback: bool,
}

impl Default for DenoiserBlock {
    fn default() -> Self {
        Self {
            path: None,
            corpus: CorpusConfig::functional(3000),
            corpus_seed: 11,
            config: DenoiserConfig::default(),
            feedback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateBlock {
    pub path: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    /// Extra denoiser samples labeled by the interpreter under both families.
    pub self_samples: usize,
    pub self_sample_seed: u64,
    pub config: SurrogateConfig,
}

impl Default for SurrogateBlock {
    fn default() -> Self {
        Self {
            path: None,
            corpus: CorpusConfig::functional(3000),
            corpus_seed: 12,
            self_samples: 4000,
            self_sample_seed: 13,
            config: SurrogateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub kind: CorpusKind,
    pub family: usize,
    pub threshold: i64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub kind: CorpusKind,
    pub tasks: usize,
    /// `None` means 24 for functional and 32 for security suites.
    pub len: Option<usize>,
    pub threshold: i64,
    /// JSON-lines task file; overrides the generated suite.
    pub path: Option<PathBuf>,
    pub suite_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Functional,
            tasks: 200,
            len: None,
            threshold: 10,
            path: None,
            suite_seed: 7,
        }
    }
}

impl SuiteConfig {
    pub fn program_len(&self) -> usize {
        self.len.unwrap_or(match self.kind {
            CorpusKind::Functional => 24,
            CorpusKind::Security => 32,
        })
    }

    /// Functional tasks alternate families from a seeded draw; security tasks have one family.
    pub fn generate(&self) -> Vec<Task> {
        use rand::Rng;
        let mut rng = trajectory_rng(self.suite_seed);
        (0..self.tasks)
            .map(|id| Task {
                id,
                kind: self.kind,
                family: match self.kind {
                    CorpusKind::Functional => rng.gen_range(0..2),
                    CorpusKind::Security => 0,
                },
                threshold: self.threshold,
                len: self.program_len(),
            })
            .collect()
    }
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_tasks(tasks: &[Task], path: &Path) -> Result<()> {
    let mut s = String::new();
    for t in tasks {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleBlock,
    pub denoiser: DenoiserBlock,
    pub surrogate: SurrogateBlock,
    pub operator: OperatorChoice,
    pub gradguide: GradGuideConfig,
    pub mdfi: MdfiConfig,
    pub suite: SuiteConfig,
    pub output_dir: Option<PathBuf>,
    /// Also run the full-resample comparator on failed vanilla finals.
    pub baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleBlock::default(),
            denoiser: DenoiserBlock::default(),
            surrogate: SurrogateBlock::default(),
            operator: OperatorChoice::None,
            gradguide: GradGuideConfig::default(),
            mdfi: MdfiConfig::default(),
            suite: SuiteConfig::default(),
            output_dir: None,
            baseline: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        Ok(serde_json::from_value(v).map_err(|e| CdcError::Config(e.to_string()))?)
    }

    /// Applies `CDC_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CdcError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Every problem at once, before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        fn note(errs: &mut Vec<String>, r: Result<()>) {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        note(&mut errs, NoiseSchedule::new(self.schedule.steps, self.schedule.kind).map(|_| ()));
        for (name, b) in [("denoiser", &self.denoiser.path), ("surrogate", &self.surrogate.path)] {
            if let Some(p) = b {
                if !p.exists() {
                    errs.push(format!("{name}.path {} does not exist", p.display()));
                }
            }
        }
        if let Some(p) = &self.suite.path {
            if !p.exists() {
                errs.push(format!("suite.path {} does not exist", p.display()));
            }
        }
        if self.denoiser.path.is_none() {
            note(&mut errs, self.denoiser.corpus.validate());
            note(&mut errs, self.denoiser.config.validate());
        }
        if matches!(self.operator, OperatorChoice::Gradguide | OperatorChoice::Both) {
            note(&mut errs, self.gradguide.validate());
            if self.surrogate.path.is_none() {
                note(&mut errs, self.surrogate.corpus.validate());
                note(&mut errs, self.surrogate.config.validate());
                if self.surrogate.corpus.kind != CorpusKind::Functional {
                    errs.push("surrogate.corpus must be functional".into());
                }
            }
        }
        if matches!(self.operator, OperatorChoice::Mdfi | OperatorChoice::Both) {
            note(&mut errs, self.mdfi.validate());
        }
        if self.suite.tasks == 0 && self.suite.path.is_none() {
            errs.push("suite.tasks must be >= 1".into());
        }
        if self.suite.program_len() == 0 {
            errs.push("suite.len must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CdcError::Config(errs.join("; ")))
        }
    }
}

/// Trained or loaded models plus the task list.
pub struct Prepared {
    pub schedule: NoiseSchedule,
    pub denoiser: NgramDenoiser,
    pub surrogate: Option<SurrogateModel>,
    pub surrogate_report: Option<TrainReport>,
    pub tasks: Vec<Task>,
}

pub fn build_denoiser(block: &DenoiserBlock) -> Result<NgramDenoiser> {
    if let Some(p) = &block.path {
        return NgramDenoiser::from_json(&std::fs::read_to_string(p)?);
    }
    let corpus = gen_corpus(&block.corpus, block.corpus_seed)?;
    denoiser_from_corpus(&corpus, &block.config, block.feedback)
}

/// Trains on every program; feedback tables, when asked for, use the programs labeled safe.
pub fn denoiser_from_corpus(corpus: &Corpus, config: &DenoiserConfig, feedback: bool) -> Result<NgramDenoiser> {
    let mut model = train_denoiser(&corpus.programs, vocab().len(), mask_id(), config)?;
    if feedback {
        let safe: Vec<Vec<TokenId>> = corpus
            .programs
            .iter()
            .zip(&corpus.labels)
            .filter(|(_, l)| l.vulnerability.is_some_and(|v| !v.is_vulnerable()))
            .map(|(p, _)| p.clone())
            .collect();
        if safe.is_empty() {
            return Err(CdcError::Config("feedback tables need labeled safe programs".into()));
        }
        model = model.with_feedback_tables(&safe)?;
    }
    Ok(model)
}

/// Corpus programs with their own label, plus `self_samples` denoiser samples
/// of length `len` labeled exactly under both families.
pub fn surrogate_examples(
    corpus: &Corpus,
    denoiser: Option<&NgramDenoiser>,
    self_samples: usize,
    sample_seed: u64,
    schedule: &NoiseSchedule,
    len: usize,
    threshold: i64,
) -> Result<Vec<Example>> {
    let mut out: Vec<Example> = corpus
        .programs
        .iter()
        .zip(&corpus.labels)
        .filter_map(|(p, l)| {
            Some(Example {
                tokens: p.clone(),
                family: l.family?,
                labels: vec![l.passes?],
            })
        })
        .collect();
    let Some(denoiser) = denoiser.filter(|_| self_samples > 0) else {
        return Ok(out);
    };
    let ctx = Context::empty(mask_id());
    let samples: Vec<Vec<TokenId>> = (0..self_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(split_seed(sample_seed, i as u64));
            sample_vanilla(denoiser, &ctx, len, mask_id(), schedule, &mut rng).map(|s| s.tokens)
        })
        .collect::<Result<_>>()?;
    for s in samples {
        for family in 0..N_FAMILIES {
            let task = FunctionalTask { family, threshold };
            out.push(Example {
                labels: vec![task.passes(&s)],
                tokens: s.clone(),
                family,
            });
        }
    }
    Ok(out)
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let schedule = NoiseSchedule::new(config.schedule.steps, config.schedule.kind)?;
    let denoiser = build_denoiser(&config.denoiser)?;
    let (surrogate, surrogate_report) = if matches!(config.operator, OperatorChoice::Gradguide | OperatorChoice::Both) {
        match &config.surrogate.path {
            Some(p) => (Some(SurrogateModel::from_json(&std::fs::read_to_string(p)?)?), None),
            None => {
                let b = &config.surrogate;
                let corpus = gen_corpus(&b.corpus, b.corpus_seed)?;
                let ex = surrogate_examples(
                    &corpus,
                    Some(&denoiser),
                    b.self_samples,
                    b.self_sample_seed,
                    &schedule,
                    b.corpus.len,
                    b.corpus.threshold,
                )?;
                let (m, r) = train_surrogate(&ex, vocab().len(), &config.surrogate.config)?;
                (Some(m), Some(r))
            }
        }
    } else {
        (None, None)
    };
    let tasks = match &config.suite.path {
        Some(p) => read_tasks(p)?,
        None => config.suite.generate(),
    };
    Ok(Prepared {
        schedule,
        denoiser,
        surrogate,
        surrogate_report,
        tasks,
    })
}

/// Runs `first` then `second` on its outcome.
pub struct Compose<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: Operator, B: Operator> Operator for Compose<A, B> {
    fn name(&self) -> &str {
        "both"
    }

    fn correct(
        &mut self,
        proposal: &crate::diffusion::CleanProposal,
        state: &crate::diffusion::TokenState,
        context: &Context,
        t: usize,
    ) -> Result<CorrectionOutcome> {
        let a = self.first.correct(proposal, state, context, t)?;
        if a.intervention.is_some() {
            // A state edit changes shape and what the second operator would read.
            return Ok(a);
        }
        self.second.correct(&a.proposal, &a.state, &a.context, t)
    }

    fn summary(&self) -> serde_json::Value {
        json!({ "mdfi": self.first.summary(), "gradguide": self.second.summary() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionMetrics {
    pub t: usize,
    pub edited: usize,
    pub clusters: usize,
    pub span_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub pass: bool,
    pub regenerated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: usize,
    pub family: usize,
    pub pass: bool,
    pub valid: bool,
    pub witness_positive: bool,
    pub final_len: usize,
    pub steps: usize,
    pub interventions: usize,
    pub corrections: Vec<CorrectionMetrics>,
    pub program: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineResult>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    pub pass_rate: f64,
    pub valid_rate: f64,
    pub witness_positive_rate: f64,
    pub interventions: usize,
    pub max_interventions_per_task: usize,
    pub correction_tasks: usize,
    pub corrections: usize,
    pub edited_median: Option<f64>,
    pub edited_mean: Option<f64>,
    pub clusters_median: Option<f64>,
    pub span_fraction_mean: Option<f64>,
    pub tokens_generated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_pass_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_regenerated_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub operator: OperatorChoice,
    pub kind: CorpusKind,
    pub seed: u64,
    pub aggregate: Aggregate,
    pub tasks: Vec<TaskResult>,
}

fn verdicts(task: &Task, tokens: &[TokenId], mdfi: &MdfiConfig) -> (bool, bool, bool) {
    let valid = parse_strict(tokens).is_ok();
    match task.kind {
        CorpusKind::Functional => {
            let pass = FunctionalTask {
                family: task.family,
                threshold: task.threshold,
            }
            .passes(tokens);
            (pass, valid, false)
        }
        CorpusKind::Security => {
            let positive = !witness_scan(tokens, &mdfi.registry, mdfi.depth).is_empty();
            (valid && !positive, valid, positive)
        }
    }
}

/// Task result recomputed from a trace and its verdicts.
pub fn task_result(task: &Task, trace: &TrajectoryTrace) -> TaskResult {
    let flag = |k: &str| trace.verdicts.get(k).and_then(|v| v.as_bool()).unwrap_or(false);
    let corrections = trace
        .steps
        .iter()
        .filter_map(|s| s.intervention.as_ref().map(|i| (s.t, i)))
        .filter(|(_, i)| i.edits_state())
        .map(|(t, i)| {
            let pos = i.edited_positions();
            CorrectionMetrics {
                t,
                edited: pos.len(),
                clusters: clusters(&pos),
                span_fraction: pos.len() as f64 / i.after.len().max(1) as f64,
            }
        })
        .collect();
    let baseline = trace.verdicts.get("baseline").and_then(|v| serde_json::from_value(v.clone()).ok());
    TaskResult {
        id: task.id,
        family: task.family,
        pass: flag("pass"),
        valid: flag("valid"),
        witness_positive: flag("witness_positive"),
        final_len: trace.final_tokens.len(),
        steps: trace.steps.len(),
        interventions: trace.interventions().count(),
        corrections,
        program: detok(&trace.final_tokens),
        baseline,
    }
}

pub fn aggregate(tasks: &[TaskResult]) -> Aggregate {
    let n = tasks.len();
    let rate = |f: &dyn Fn(&TaskResult) -> bool| {
        if n == 0 {
            0.0
        } else {
            tasks.iter().filter(|t| f(t)).count() as f64 / n as f64
        }
    };
    let corr: Vec<&CorrectionMetrics> = tasks.iter().flat_map(|t| &t.corrections).collect();
    let edited: Vec<f64> = corr.iter().map(|c| c.edited as f64).collect();
    let cl: Vec<f64> = corr.iter().map(|c| c.clusters as f64).collect();
    let span: Vec<f64> = corr.iter().map(|c| c.span_fraction).collect();
    let base: Vec<&BaselineResult> = tasks.iter().filter_map(|t| t.baseline.as_ref()).collect();
    let regen: Vec<f64> = base.iter().filter(|b| b.regenerated > 0).map(|b| b.regenerated as f64).collect();
    Aggregate {
        tasks: n,
        pass_rate: rate(&|t| t.pass),
        valid_rate: rate(&|t| t.valid),
        witness_positive_rate: rate(&|t| t.witness_positive),
        interventions: tasks.iter().map(|t| t.interventions).sum(),
        max_interventions_per_task: tasks.iter().map(|t| t.interventions).max().unwrap_or(0),
        correction_tasks: tasks.iter().filter(|t| !t.corrections.is_empty()).count(),
        corrections: corr.len(),
        edited_median: median(&edited),
        edited_mean: mean(&edited),
        clusters_median: median(&cl),
        span_fraction_mean: mean(&span),
        tokens_generated: tasks.iter().map(|t| t.final_len).sum::<usize>()
            + base.iter().map(|b| b.regenerated).sum::<usize>(),
        baseline_pass_rate: (!base.is_empty())
            .then(|| base.iter().filter(|b| b.pass).count() as f64 / base.len() as f64),
        baseline_regenerated_median: median(&regen),
    }
}

pub fn context_for(task: &Task, config: &RunConfig) -> Context {
    Context::new(Vec::new(), config.mdfi.b_p, task.family, mask_id())
}

fn functional_oracle(task: &Task) -> impl Fn(&[TokenId]) -> Option<bool> + Sync {
    let ft = FunctionalTask {
        family: task.family,
        threshold: task.threshold,
    };
    move |tokens: &[TokenId]| parse_strict(tokens).ok().map(|_| ft.passes(tokens))
}

pub fn run_task(prep: &Prepared, config: &RunConfig, task: &Task) -> Result<TrajectoryTrace> {
    let seed = split_seed(config.seed, task.id as u64);
    let mut rng = trajectory_rng(seed);
    let ctx = context_for(task, config);
    let steps = prep.schedule.steps();
    let need_surrogate = || {
        prep.surrogate
            .as_ref()
            .ok_or_else(|| CdcError::Config("gradguide needs a surrogate".into()))
    };
    let oracle = functional_oracle(task);
    let oracle_ref: Option<crate::gradguide::ExactOracle> = match task.kind {
        CorpusKind::Functional => Some(&oracle),
        CorpusKind::Security => None,
    };
    let run = |op: &mut dyn Operator, rng: &mut crate::diffusion::TrajectoryRng| {
        run_constrained(&prep.denoiser, op, &ctx, task.len, mask_id(), &prep.schedule, rng)
    };
    let (_, mut trace) = match config.operator {
        OperatorChoice::None => run(&mut IdentityOperator, &mut rng)?,
        OperatorChoice::Mdfi => run(&mut Mdfi::new(config.mdfi.clone(), steps)?, &mut rng)?,
        OperatorChoice::Gradguide => {
            let mut op = GradGuide::new(need_surrogate()?, config.gradguide.clone(), task.family, task.len, oracle_ref)?;
            run(&mut op, &mut rng)?
        }
        OperatorChoice::Both => {
            let mut op = Compose {
                first: Mdfi::new(config.mdfi.clone(), steps)?,
                second: GradGuide::new(need_surrogate()?, config.gradguide.clone(), task.family, task.len, oracle_ref)?,
            };
            run(&mut op, &mut rng)?
        }
    };
    let (pass, valid, positive) = verdicts(task, &trace.final_tokens, &config.mdfi);
    trace.verdicts.insert("pass".into(), json!(pass));
    trace.verdicts.insert("valid".into(), json!(valid));
    trace.verdicts.insert("witness_positive".into(), json!(positive));
    trace.verdicts.insert("task".into(), serde_json::to_value(task)?);
    if config.baseline {
        let b = if pass {
            BaselineResult {
                pass: true,
                regenerated: 0,
            }
        } else {
            let mut rng = trajectory_rng(split_seed(seed, 1 << 32));
            let again = sample_vanilla(&prep.denoiser, &ctx, task.len, mask_id(), &prep.schedule, &mut rng)?;
            BaselineResult {
                pass: verdicts(task, &again.tokens, &config.mdfi).0,
                regenerated: again.len(),
            }
        };
        trace.verdicts.insert("baseline".into(), serde_json::to_value(b)?);
    }
    Ok(trace)
}

pub struct SuiteOutput {
    pub report: MetricsReport,
    pub traces: Vec<TrajectoryTrace>,
}

pub fn run_suite(prep: &Prepared, config: &RunConfig) -> Result<SuiteOutput> {
    let traces: Vec<TrajectoryTrace> = prep
        .tasks
        .par_iter()
        .map(|t| run_task(prep, config, t))
        .collect::<Result<_>>()?;
    let tasks: Vec<TaskResult> = prep.tasks.iter().zip(&traces).map(|(t, tr)| task_result(t, tr)).collect();
    let report = MetricsReport {
        operator: config.operator,
        kind: config.suite.kind,
        seed: config.seed,
        aggregate: aggregate(&tasks),
        tasks,
    };
    Ok(SuiteOutput { report, traces })
}

/// Writes `report.json`, `tasks.jsonl`, one trace file and one program file per task.
pub fn write_outputs(dir: &Path, prep: &Prepared, out: &SuiteOutput) -> Result<()> {
    std::fs::create_dir_all(dir.join("traces"))?;
    std::fs::create_dir_all(dir.join("programs"))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    write_tasks(&prep.tasks, &dir.join("tasks.jsonl"))?;
    for (task, trace) in prep.tasks.iter().zip(&out.traces) {
        let f = std::fs::File::create(dir.join("traces").join(format!("task_{:04}.jsonl", task.id)))?;
        trace.write_jsonl(std::io::BufWriter::new(f))?;
        std::fs::write(
            dir.join("programs").join(format!("task_{:04}.ml", task.id)),
            detok(&trace.final_tokens) + "\n",
        )?;
    }
    Ok(())
}

/// Rebuilds the report from a directory of trace files.
pub fn report_from_traces(dir: &Path) -> Result<Aggregate> {
    let mut entries: BTreeMap<PathBuf, ()> = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            entries.insert(p, ());
        }
    }
    let mut tasks = Vec::new();
    for p in entries.keys() {
        let trace = TrajectoryTrace::read_jsonl(std::io::BufReader::new(std::fs::File::open(p)?))?;
        let task: Task = trace
            .verdicts
            .get("task")
            .cloned()
            .ok_or_else(|| CdcError::Config(format!("{} has no task record", p.display())))
            .and_then(|v| Ok(serde_json::from_value(v)?))?;
        tasks.push(task_result(&task, &trace));
    }
    Ok(aggregate(&tasks))
}
