//! Self-checks against the brute-force oracles, run by `cdc verify`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{train_denoiser, DenoiserConfig};
use crate::diffusion::{
    forward_corrupt, sample_vanilla, split_seed, trajectory_rng, CleanProposal, Context, NoiseSchedule, ScheduleKind,
    TokenState,
};
use crate::engine::{run_constrained, EditRegion, IdentityOperator};
use crate::error::Result;
use crate::gradguide::{alm_project, AlmParams, LinearPenalty, SurrogatePenalty};
use crate::mdfi::{witness_scan, Mdfi, MdfiConfig};
use crate::minilang::{gen_corpus, mask_id, vocab, CorpusConfig, FunctionRegistry};
use crate::oracles::{exact_posterior, fd_gradient, tilt_closed_form, tv};
use crate::surrogate::{SoftEmbedding, SurrogateConfig, SurrogateModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyScale {
    pub forward_samples: usize,
    pub sampler_runs: usize,
    pub gradient_points: usize,
    pub analyzer_programs: usize,
}

impl VerifyScale {
    pub const FULL: Self = Self {
        forward_samples: 10_000,
        sampler_runs: 50_000,
        gradient_points: 100,
        analyzer_programs: 500,
    };
    pub const QUICK: Self = Self {
        forward_samples: 2_000,
        sampler_runs: 50_000,
        gradient_points: 10,
        analyzer_programs: 100,
    };
}

pub fn kernel(scale: VerifyScale) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in 1..=64 {
            let s = NoiseSchedule::new(steps, kind)?;
            for t in 1..=steps {
                let (g, e) = s.gamma_eta(t)?;
                worst = worst.max((g + e - 1.0).abs());
            }
        }
    }
    out.push(check("gamma + eta = 1", worst == 0.0, format!("max |gamma + eta - 1| = {worst:e}")));

    let s = NoiseSchedule::new(8, ScheduleKind::Cosine)?;
    let x0 = TokenState::new(vec![0; 16], mask_id(), 0);
    let mut rng = trajectory_rng(1);
    let mut worst = 0.0f64;
    for t in 1..=8 {
        let mut masked = 0;
        for _ in 0..scale.forward_samples {
            masked += forward_corrupt(&x0, t, &s, &mut rng)?.n_masked();
        }
        let rate = masked as f64 / (scale.forward_samples * 16) as f64;
        worst = worst.max((rate - (1.0 - s.alpha(t))).abs());
    }
    out.push(check("forward mask rate", worst <= 0.02, format!("max deviation {worst:.4}")));

    // vocab {a, b, c} + mask, L = 3, T = 3, denoiser trained on a tiny corpus
    let programs = vec![vec![0, 1, 2], vec![0, 0, 1], vec![2, 1, 0], vec![1, 1, 1]];
    let d = train_denoiser(&programs, 4, 3, &DenoiserConfig::default())?;
    let s = NoiseSchedule::new(3, ScheduleKind::Linear)?;
    let ctx = Context::empty(3);
    let exact = exact_posterior(&d, &s, 3, 3, &ctx)?;
    let mut counts = std::collections::BTreeMap::new();
    for i in 0..scale.sampler_runs {
        let x = sample_vanilla(&d, &ctx, 3, 3, &s, &mut trajectory_rng(split_seed(5, i as u64)))?;
        *counts.entry(x.tokens).or_insert(0usize) += 1;
    }
    let dist = exact.tv_to_counts(&counts);
    out.push(check(
        "sampler matches enumeration",
        dist <= 0.02 && (exact.total() - 1.0).abs() < 1e-9,
        format!("TV {dist:.4} over {} runs", scale.sampler_runs),
    ));
    Ok(out)
}

pub fn identities() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let corpus = gen_corpus(&CorpusConfig::functional(300), 3)?;
    let d = train_denoiser(&corpus.programs, vocab().len(), mask_id(), &DenoiserConfig::default())?;
    let s = NoiseSchedule::new(12, ScheduleKind::Linear)?;
    let ctx = Context::new(Vec::new(), 24, 0, mask_id());
    let mut same = true;
    let mut mdfi_same = true;
    for seed in 0..20 {
        let v = sample_vanilla(&d, &ctx, 24, mask_id(), &s, &mut trajectory_rng(seed))?;
        let (c, _) = run_constrained(&d, &mut IdentityOperator, &ctx, 24, mask_id(), &s, &mut trajectory_rng(seed))?;
        same &= v == c;
        let cfg = MdfiConfig {
            checkpoints: Some(Default::default()),
            ..Default::default()
        };
        let mut op = Mdfi::new(cfg, 12)?;
        let (m, _) = run_constrained(&d, &mut op, &ctx, 24, mask_id(), &s, &mut trajectory_rng(seed))?;
        mdfi_same &= m == v;
    }
    out.push(check("identity operator equals vanilla", same, "20 seeds".into()));
    out.push(check("mdfi without checkpoints equals vanilla", mdfi_same, "20 seeds".into()));

    let model = SurrogateModel::init(vocab().len(), &SurrogateConfig::default())?;
    let mut rng = trajectory_rng(9);
    let p = random_proposal(&mut rng, 8, vocab().len());
    let pen = SurrogatePenalty {
        model: &model,
        family: 0,
        lambda: &[0.0],
        mu: &[0.0],
    };
    let params = AlmParams {
        beta: 100.0,
        k_inner: 10,
        step_size: 0.5,
        eps: 1e-8,
    };
    let (y, _) = alm_project(&p, &EditRegion::from_positions([1, 2, 3]), &params, &pen, mask_id(), None)?;
    let err = max_abs_diff(y.as_flat(), p.as_flat());
    out.push(check("alm with zero multipliers is identity", err <= 1e-9, format!("max |y - x0| = {err:e}")));
    Ok(out)
}

pub fn gradients(scale: VerifyScale) -> Result<Vec<Check>> {
    let cfg = SurrogateConfig {
        init_scale: 0.5,
        thresholds: vec![0.8, 0.6],
        ..Default::default()
    };
    let model = SurrogateModel::init(vocab().len(), &cfg)?;
    let mut rng = trajectory_rng(21);
    let mut worst = 0.0f64;
    for _ in 0..scale.gradient_points {
        let len = rng.gen_range(2..10);
        let family = rng.gen_range(0..2);
        let lambda = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
        let mu = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
        let data: Vec<f64> = (0..len * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = SoftEmbedding {
            len,
            dim: cfg.dim,
            data: data.clone(),
        };
        let (_, g) = model.penalty_grad(&emb, family, &lambda, &mu)?;
        let f = |x: &[f64]| {
            let e = SoftEmbedding {
                len,
                dim: cfg.dim,
                data: x.to_vec(),
            };
            model.penalty_grad(&e, family, &lambda, &mu).map(|r| r.0).unwrap_or(f64::NAN)
        };
        let fd = fd_gradient(f, &data, 1e-5);
        worst = worst.max(rel_err(&g.data, &fd));
    }
    Ok(vec![check(
        "surrogate penalty gradient",
        worst <= 1e-4,
        format!("max relative error {worst:e} over {} points", scale.gradient_points),
    )])
}

pub fn projection() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = trajectory_rng(31);
    let v = 6;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let p = random_proposal(&mut rng, 1, v);
        let cost: Vec<f64> = (0..v).map(|c| if c == v - 1 { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
        let lambda = rng.gen_range(0.5..3.0);
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
        let (y, _) = alm_project(&p, &EditRegion::from_positions([0]), &params, &pen, v - 1, None)?;
        worst = worst.max(tv(y.row(0), &tilt_closed_form(p.row(0), &cost, lambda)));
    }
    out.push(check("alm converges to exponential tilt", worst <= 1e-3, format!("max TV {worst:e}")));

    let model = SurrogateModel::init(vocab().len(), &SurrogateConfig { init_scale: 0.5, ..Default::default() })?;
    let p = random_proposal(&mut rng, 10, vocab().len());
    let pen = SurrogatePenalty {
        model: &model,
        family: 0,
        lambda: &[5.0],
        mu: &[5.0],
    };
    let params = AlmParams {
        beta: 1e3,
        k_inner: 10,
        step_size: 0.5,
        eps: 1e-8,
    };
    let region = EditRegion::from_positions([2, 3, 4]);
    let (y, _) = alm_project(&p, &region, &params, &pen, mask_id(), None)?;
    let off = (0..10)
        .filter(|i| !region.contains(*i))
        .map(|i| tv(y.row(i), p.row(i)))
        .fold(0.0, f64::max);
    out.push(check("locality anchor keeps off-region rows", off <= 1e-3, format!("max off-region TV {off:e}")));
    Ok(out)
}

pub fn analyzer(scale: VerifyScale) -> Result<Vec<Check>> {
    let corpus = gen_corpus(&CorpusConfig::security(scale.analyzer_programs, 0.5), 41)?;
    let reg = FunctionRegistry::default();
    let (mut fnr, mut fpr) = (0, 0);
    for (p, l) in corpus.programs.iter().zip(&corpus.labels) {
        let vulnerable = l.vulnerability.is_some_and(|v| v.is_vulnerable());
        let found = !witness_scan(p, &reg, 16).is_empty();
        fnr += usize::from(vulnerable && !found);
        fpr += usize::from(!vulnerable && found);
    }
    Ok(vec![check(
        "analyzer exact on labeled suite",
        fnr == 0 && fpr == 0,
        format!("{fnr} false negatives, {fpr} false positives over {}", corpus.programs.len()),
    )])
}

pub fn run_all(scale: VerifyScale) -> Result<Vec<Check>> {
    let mut out = kernel(scale)?;
    out.extend(identities()?);
    out.extend(gradients(scale)?);
    out.extend(projection()?);
    out.extend(analyzer(scale)?);
    Ok(out)
}

/// Random rows with zero mask mass; the last column is the mask.
pub fn random_proposal(rng: &mut impl Rng, len: usize, vocab_size: usize) -> CleanProposal {
    let rows = (0..len)
        .map(|_| {
            let mut r: Vec<f64> = (0..vocab_size - 1).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= z);
            r.push(0.0);
            r
        })
        .collect();
    CleanProposal::from_rows(rows, vocab_size - 1).expect("valid rows")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
