//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use cdc_core::denoiser::{train_denoiser, DenoiserConfig, NgramDenoiser};
use cdc_core::diffusion::{
    forward_corrupt, sample_vanilla, split_seed, trajectory_rng, CleanProposal, Context, Denoiser, NoiseSchedule,
    ScheduleKind, TokenState,
};
use cdc_core::engine::{run_constrained, EditRegion, IdentityOperator, TrajectoryTrace};
use cdc_core::gradguide::{alm_project, AlmParams, GradGuide, GradGuideConfig, LinearPenalty, Penalty, SurrogatePenalty};
use cdc_core::mdfi::{witness_scan, Mdfi, MdfiConfig};
use cdc_core::minilang::{gen_corpus, mask_id, vocab, CorpusConfig, FunctionRegistry};
use cdc_core::oracles::{exact_posterior, fd_gradient, tilt_closed_form, tv};
use cdc_core::suite::{prepare, run_suite, OperatorChoice, RunConfig, SuiteOutput};
use cdc_core::surrogate::{SoftEmbedding, SurrogateConfig, SurrogateModel};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_proposal(rng: &mut impl Rng, len: usize, vocab_size: usize, mask: usize) -> CleanProposal {
    let rows = (0..len)
        .map(|_| {
            let mut r: Vec<f64> = (0..vocab_size).map(|v| if v == mask { 0.0 } else { rng.gen_range(0.01..1.0) }).collect();
            let z: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= z);
            r
        })
        .collect();
    CleanProposal::from_rows(rows, mask).unwrap()
}

fn functional_denoiser() -> NgramDenoiser {
    let c = gen_corpus(&CorpusConfig::functional(1000), 5).unwrap();
    train_denoiser(&c.programs, vocab().len(), mask_id(), &DenoiserConfig::default()).unwrap()
}

fn empirical(
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    len: usize,
    mask: usize,
    runs: usize,
    seed: u64,
) -> BTreeMap<Vec<usize>, usize> {
    let ctx = Context::empty(mask);
    let mut counts = BTreeMap::new();
    for i in 0..runs {
        let x = sample_vanilla(d, &ctx, len, mask, s, &mut trajectory_rng(split_seed(seed, i as u64))).unwrap();
        *counts.entry(x.tokens).or_insert(0) += 1;
    }
    counts
}

fn criterion_1() -> Outcome {
    let mut sum_err = 0.0f64;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in 1..=128 {
            let s = NoiseSchedule::new(steps, kind).unwrap();
            for t in 1..=steps {
                let (g, e) = s.gamma_eta(t).unwrap();
                sum_err = sum_err.max((g + e - 1.0).abs());
            }
        }
    }

    let mut rate_err = 0.0f64;
    let x0 = TokenState::new(vec![1; 20], mask_id(), 0);
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(10, kind).unwrap();
        let mut rng = trajectory_rng(17);
        for t in 0..=10 {
            let n = 10_000;
            let masked: usize = (0..n).map(|_| forward_corrupt(&x0, t, &s, &mut rng).unwrap().n_masked()).sum();
            let rate = masked as f64 / (n * x0.len()) as f64;
            rate_err = rate_err.max((rate - (1.0 - s.alpha(t))).abs());
        }
    }

    // (|V| incl. mask, L, T, schedule, corpus)
    let cases: Vec<(usize, usize, usize, ScheduleKind, Vec<Vec<usize>>)> = vec![
        (3, 2, 2, ScheduleKind::Linear, vec![vec![0, 1], vec![1, 1], vec![0, 0], vec![0, 1]]),
        (5, 3, 4, ScheduleKind::Cosine, vec![vec![0, 1, 2], vec![3, 1, 0], vec![2, 2, 1], vec![0, 3, 3]]),
        (8, 2, 4, ScheduleKind::Linear, vec![vec![0, 1], vec![4, 5], vec![6, 6], vec![2, 3]]),
        (4, 4, 4, ScheduleKind::Cosine, vec![vec![0, 1, 2, 0], vec![2, 1, 0, 0], vec![1, 1, 2, 2]]),
    ];
    let mut worst_tv = 0.0f64;
    let mut mass_err = 0.0f64;
    for (i, (v, len, steps, kind, corpus)) in cases.into_iter().enumerate() {
        let mask = v - 1;
        let d = train_denoiser(&corpus, v, mask, &DenoiserConfig::default()).unwrap();
        let s = NoiseSchedule::new(steps, kind).unwrap();
        let exact = exact_posterior(&d, &s, len, mask, &Context::empty(mask)).unwrap();
        mass_err = mass_err.max((exact.total() - 1.0).abs());
        let counts = empirical(&d, &s, len, mask, 50_000, 100 + i as u64);
        let d = exact.tv_to_counts(&counts);
        // expected TV of an exact sampler at this run count
        let floor: f64 = exact.probs.values().map(|p| (2.0 * p * (1.0 - p) / (std::f64::consts::PI * 50_000.0)).sqrt()).sum::<f64>() / 2.0;
        eprintln!("case {i}: support {} TV {d:.4} noise floor {floor:.4}", exact.probs.len());
        worst_tv = worst_tv.max(d);
    }

    // single step: the product of the all-mask proposal rows
    let d = train_denoiser(&[vec![0, 1, 2], vec![2, 1, 0]], 4, 3, &DenoiserConfig::default()).unwrap();
    let s = NoiseSchedule::new(1, ScheduleKind::Linear).unwrap();
    let exact = exact_posterior(&d, &s, 3, 3, &Context::empty(3)).unwrap();
    let y = d.predict(&TokenState::all_masked(3, 3, 1), &Context::empty(3)).unwrap();
    let mut prod_err = 0.0f64;
    for (seq, p) in &exact.probs {
        let q: f64 = seq.iter().enumerate().map(|(i, &t)| y.row(i)[t]).product();
        prod_err = prod_err.max((p - q).abs());
    }

    outcome(
        sum_err == 0.0 && rate_err <= 0.02 && worst_tv <= 0.02 && mass_err <= 1e-9 && prod_err <= 1e-12,
        format!(
            "gamma+eta err {sum_err:e}, mask-rate dev {rate_err:.4}, enumeration TV {worst_tv:.4}, mass err {mass_err:e}, T=1 product err {prod_err:e}"
        ),
    )
}

fn criterion_2() -> Outcome {
    let d = functional_denoiser();
    let s = NoiseSchedule::new(16, ScheduleKind::Linear).unwrap();
    let ctx = Context::new(Vec::new(), 24, 0, mask_id());
    let model = SurrogateModel::init(vocab().len(), &SurrogateConfig::default()).unwrap();
    let (mut ident, mut mdfi_none, mut mdfi_clean, mut gg_off) = (true, true, true, true);
    for seed in 0..50 {
        let v = sample_vanilla(&d, &ctx, 24, mask_id(), &s, &mut trajectory_rng(seed)).unwrap();
        let run = |op: &mut dyn cdc_core::engine::Operator| {
            run_constrained(&d, op, &ctx, 24, mask_id(), &s, &mut trajectory_rng(seed)).unwrap().0
        };
        ident &= run(&mut IdentityOperator) == v;
        let none = MdfiConfig {
            checkpoints: Some(Default::default()),
            ..Default::default()
        };
        mdfi_none &= run(&mut Mdfi::new(none, 16).unwrap()) == v;
        // a functional denoiser never writes sinks, so checkpoints find no witnesses
        mdfi_clean &= run(&mut Mdfi::new(MdfiConfig::default(), 16).unwrap()) == v;
        let off = GradGuideConfig {
            tau_alm: 0.0,
            budget: 0,
            ..Default::default()
        };
        gg_off &= run(&mut GradGuide::new(&model, off, 0, 24, None).unwrap()) == v;
    }

    let mut rng = trajectory_rng(3);
    let mut alm_err = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(1..12);
        let p = random_proposal(&mut rng, len, vocab().len(), mask_id());
        let region = EditRegion::from_positions((0..len).filter(|_| rng.gen_bool(0.5)));
        let pen = SurrogatePenalty {
            model: &model,
            family: rng.gen_range(0..2),
            lambda: &[0.0],
            mu: &[0.0],
        };
        let params = AlmParams {
            beta: 100.0,
            k_inner: 10,
            step_size: 0.5,
            eps: 1e-8,
        };
        let (y, _) = alm_project(&p, &region, &params, &pen, mask_id(), None).unwrap();
        alm_err = alm_err.max(y.as_flat().iter().zip(p.as_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    outcome(
        ident && mdfi_none && mdfi_clean && gg_off && alm_err <= 1e-9,
        format!(
            "identity==vanilla {ident}, mdfi no-checkpoint {mdfi_none}, mdfi no-witness {mdfi_clean}, gradguide off {gg_off} (50 seeds); alm zero-multiplier err {alm_err:e}"
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

fn criterion_3() -> Outcome {
    let cfg = SurrogateConfig {
        init_scale: 0.5,
        thresholds: vec![0.9, 0.7],
        ..Default::default()
    };
    let model = SurrogateModel::init(vocab().len(), &cfg).unwrap();
    let mut rng = trajectory_rng(23);
    let (mut worst_emb, mut worst_y) = (0.0f64, 0.0f64);
    let mut active = 0;
    for _ in 0..100 {
        let len = rng.gen_range(2..12);
        let family = rng.gen_range(0..2);
        let lambda = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)];
        let mu = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)];
        let data: Vec<f64> = (0..len * cfg.dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let emb = SoftEmbedding {
            len,
            dim: cfg.dim,
            data: data.clone(),
        };
        let (value, g) = model.penalty_grad(&emb, family, &lambda, &mu).unwrap();
        active += usize::from(value > 0.0);
        let f = |x: &[f64]| {
            let e = SoftEmbedding {
                len,
                dim: cfg.dim,
                data: x.to_vec(),
            };
            model.penalty_grad(&e, family, &lambda, &mu).unwrap().0
        };
        worst_emb = worst_emb.max(rel_err(&g.data, &fd_gradient(f, &data, 1e-5)));

        // the same penalty as a function of the proposal entries
        let p = random_proposal(&mut rng, len, vocab().len(), mask_id());
        let pen = SurrogatePenalty {
            model: &model,
            family,
            lambda: &lambda,
            mu: &mu,
        };
        let (_, gy) = pen.eval(&p).unwrap();
        let fy = |x: &[f64]| penalty_of_flat(&pen, x, len);
        worst_y = worst_y.max(rel_err(&gy, &fd_gradient(fy, p.as_flat(), 1e-6)));
    }
    outcome(
        worst_emb <= 1e-4 && worst_y <= 1e-4 && active >= 50,
        format!("max rel err: embedding {worst_emb:e}, proposal {worst_y:e}; {active}/100 points with active penalty"),
    )
}

/// The penalty as a function of the raw `L x V` proposal entries, through `y E`.
fn penalty_of_flat(pen: &SurrogatePenalty, x: &[f64], len: usize) -> f64 {
    let table = pen.model.embedding();
    let dim = table.dim;
    let v = x.len() / len;
    let mut data = vec![0.0; len * dim];
    for i in 0..len {
        for t in 0..v {
            for k in 0..dim {
                data[i * dim + k] += x[i * v + t] * table.row(t)[k];
            }
        }
    }
    let e = SoftEmbedding { len, dim, data };
    pen.model.penalty_grad(&e, pen.family, pen.lambda, pen.mu).unwrap().0
}

fn criterion_4() -> Outcome {
    let mut rng = trajectory_rng(41);
    let mut worst_tilt = 0.0f64;
    for _ in 0..20 {
        let v = rng.gen_range(3..10);
        let mask = v - 1;
        let p = random_proposal(&mut rng, 1, v, mask);
        let cost: Vec<f64> = (0..v).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lambda = rng.gen_range(0.1..4.0);
        let pen = LinearPenalty {
            cost: cost.clone(),
            lambda,
        };
        let params = AlmParams {
            beta: 0.0,
            k_inner: 2000,
            step_size: 0.5,
            eps: 1e-12,
        };
        let (y, _) = alm_project(&p, &EditRegion::from_positions([0]), &params, &pen, mask, None).unwrap();
        worst_tilt = worst_tilt.max(tv(y.row(0), &tilt_closed_form(p.row(0), &cost, lambda)));
    }

    let model = SurrogateModel::init(vocab().len(), &SurrogateConfig { init_scale: 0.5, ..Default::default() }).unwrap();
    let mut worst_off = 0.0f64;
    let mut moved = 0.0f64;
    for _ in 0..10 {
        let len = rng.gen_range(4..16);
        let p = random_proposal(&mut rng, len, vocab().len(), mask_id());
        let region = EditRegion::from_positions((0..len).filter(|i| i % 3 == 0));
        let pen = SurrogatePenalty {
            model: &model,
            family: 0,
            lambda: &[10.0],
            mu: &[10.0],
        };
        let params = AlmParams {
            beta: 1e3,
            k_inner: 10,
            step_size: 0.5,
            eps: 1e-8,
        };
        let (y, _) = alm_project(&p, &region, &params, &pen, mask_id(), None).unwrap();
        for i in 0..len {
            let d = tv(y.row(i), p.row(i));
            if region.contains(i) {
                moved = moved.max(d);
            } else {
                worst_off = worst_off.max(d);
            }
        }
    }
    outcome(
        worst_tilt <= 1e-3 && worst_off <= 1e-3,
        format!("tilt TV {worst_tilt:e}; off-region TV at beta=1e3 {worst_off:e} (in-region max TV {moved:.3e})"),
    )
}

fn criterion_5() -> Outcome {
    let corpus = gen_corpus(&CorpusConfig::security(500, 0.5), 2024).unwrap();
    let reg = FunctionRegistry::default();
    let (mut fnr, mut fpr, mut vulnerable) = (0, 0, 0);
    for (p, l) in corpus.programs.iter().zip(&corpus.labels) {
        let vuln = l.vulnerability.unwrap().is_vulnerable();
        vulnerable += usize::from(vuln);
        let found = !witness_scan(p, &reg, 16).is_empty();
        fnr += usize::from(vuln && !found);
        fpr += usize::from(!vuln && found);
    }
    outcome(
        fnr == 0 && fpr == 0,
        format!("{fnr} false negatives, {fpr} false positives ({vulnerable} vulnerable of 500)"),
    )
}

struct Runs {
    sec_vanilla: SuiteOutput,
    sec_mdfi: SuiteOutput,
    fun_vanilla: SuiteOutput,
    fun_gg: SuiteOutput,
    steps: usize,
    k: usize,
}

fn config(json: &str, op: OperatorChoice) -> RunConfig {
    let mut c = RunConfig::from_json(json).unwrap();
    c.operator = op;
    c
}

fn run(c: &RunConfig) -> SuiteOutput {
    let prep = prepare(c).unwrap();
    run_suite(&prep, c).unwrap()
}

fn suites() -> Runs {
    let sec = include_str!("../../../configs/security_mdfi.json");
    let fun = include_str!("../../../configs/functional_gradguide.json");
    let mdfi_cfg = config(sec, OperatorChoice::Mdfi);
    Runs {
        sec_vanilla: run(&config(sec, OperatorChoice::None)),
        sec_mdfi: run(&mdfi_cfg),
        fun_vanilla: run(&config(fun, OperatorChoice::None)),
        fun_gg: run(&config(fun, OperatorChoice::Gradguide)),
        steps: mdfi_cfg.schedule.steps,
        k: mdfi_cfg.mdfi.k,
    }
}

fn criterion_6(r: &Runs) -> Outcome {
    let v = r.sec_vanilla.report.aggregate.witness_positive_rate;
    let m = r.sec_mdfi.report.aggregate.witness_positive_rate;
    let reduction = if v > 0.0 { 1.0 - m / v } else { 0.0 };
    let max_iv = r.sec_mdfi.report.aggregate.max_interventions_per_task;
    outcome(
        v >= 0.30 && reduction >= 0.50 && max_iv <= 2,
        format!(
            "witness-positive vanilla {:.1}% -> mdfi {:.1}% (relative reduction {:.1}%), max interventions/task {max_iv}, tasks {}",
            100.0 * v,
            100.0 * m,
            100.0 * reduction,
            r.sec_mdfi.report.tasks.len()
        ),
    )
}

fn criterion_7(r: &Runs) -> Outcome {
    let v = r.fun_vanilla.report.aggregate.pass_rate;
    let g = r.fun_gg.report.aggregate.pass_rate;
    outcome(
        g - v >= 0.05,
        format!(
            "exact pass vanilla {:.1}% -> gradguide {:.1}% ({:+.1} pp), tasks {}",
            100.0 * v,
            100.0 * g,
            100.0 * (g - v),
            r.fun_gg.report.tasks.len()
        ),
    )
}

fn criterion_8(r: &Runs) -> Outcome {
    let sv = &r.sec_vanilla.report.aggregate;
    let sm = &r.sec_mdfi.report.aggregate;
    let fv = &r.fun_vanilla.report.aggregate;
    let fg = &r.fun_gg.report.aggregate;
    let lt = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a < b);
    let ok = lt(sm.edited_median, sv.baseline_regenerated_median)
        && lt(fg.edited_median, fv.baseline_regenerated_median)
        && sm.clusters_median.is_some_and(|c| c <= 2.0);
    outcome(
        ok,
        format!(
            "security: mdfi edited median {:?} vs resample {:?}, cluster median {:?}; functional: gradguide edited median {:?} vs resample {:?}",
            sm.edited_median, sv.baseline_regenerated_median, sm.clusters_median, fg.edited_median, fv.baseline_regenerated_median
        ),
    )
}

fn criterion_9(r: &Runs) -> Outcome {
    let all: Vec<&TrajectoryTrace> = [&r.sec_vanilla, &r.sec_mdfi, &r.fun_vanilla, &r.fun_gg]
        .iter()
        .flat_map(|o| &o.traces)
        .collect();
    let steps_ok = all.iter().all(|t| t.steps.len() == r.steps);
    let len_ok = all.iter().all(|t| {
        let ins: Vec<_> = t.interventions().flat_map(|i| &i.inserted).collect();
        ins.iter().all(|i| i.count == r.k) && t.final_tokens.len() == t.initial_len + r.k * ins.len()
    });
    let insertions: usize = r.sec_mdfi.traces.iter().map(|t| t.interventions().map(|i| i.inserted.len()).sum::<usize>()).sum();
    let mut mult_ok = true;
    let mut updates = 0;
    for t in &r.fun_gg.traces {
        let hist: Vec<(Vec<f64>, Vec<f64>)> =
            serde_json::from_value(t.operator_summary["history"].clone()).unwrap_or_default();
        updates += hist.len();
        let mut prev_mu: Option<Vec<f64>> = None;
        for (lambda, mu) in hist {
            mult_ok &= lambda.iter().all(|&l| l >= 0.0);
            if let Some(p) = &prev_mu {
                mult_ok &= mu.iter().zip(p).all(|(a, b)| a >= b);
            }
            prev_mu = Some(mu);
        }
    }
    outcome(
        steps_ok && len_ok && mult_ok && updates > 0,
        format!(
            "{} trajectories: steps == T {steps_ok}, length == L + K*insertions {len_ok} ({insertions} insertions), lambda >= 0 and mu non-decreasing {mult_ok} ({updates} updates)",
            all.len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, start: Instant, o: Outcome| {
        failed += usize::from(!o.passed);
        println!(
            "criterion {n}: {} [{:.1}s] {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    };
    let checks: [(usize, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (n, f) in checks {
        let t = Instant::now();
        report(n, t, f());
    }
    let t = Instant::now();
    let runs = suites();
    println!("suite runs finished in {:.1}s", t.elapsed().as_secs_f64());
    for (n, f) in [(6, criterion_6 as fn(&Runs) -> Outcome), (7, criterion_7), (8, criterion_8), (9, criterion_9)] {
        let t = Instant::now();
        report(n, t, f(&runs));
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
