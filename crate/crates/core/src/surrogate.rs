//! Differentiable correctness scorer over soft token embeddings.
//!
//! Mean-pooled soft embedding, concatenated with a per-family context vector,
//! through one tanh layer and a sigmoid head per constraint.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{trajectory_rng, CleanProposal, TokenId};
use crate::error::{invalid, CdcError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(invalid("embedding dimension must be >= 2"));
        }
        if data.len() != rows * dim {
            return Err(invalid("embedding data has the wrong size"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("embedding entries must be finite"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.dim..(v + 1) * self.dim]
    }
}

/// `L x d` matrix of expected embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftEmbedding {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SoftEmbedding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn soft_embed(proposal: &CleanProposal, table: &EmbeddingTable) -> Result<SoftEmbedding> {
    if proposal.vocab_size() != table.rows {
        return Err(invalid(format!(
            "proposal has {} columns, embedding table has {} rows",
            proposal.vocab_size(),
            table.rows
        )));
    }
    let d = table.dim;
    let mut data = vec![0.0; proposal.len() * d];
    for (i, row) in proposal.rows().enumerate() {
        let out = &mut data[i * d..(i + 1) * d];
        for (v, &p) in row.iter().enumerate() {
            if p != 0.0 {
                for (o, e) in out.iter_mut().zip(table.row(v)) {
                    *o += p * e;
                }
            }
        }
    }
    Ok(SoftEmbedding {
        len: proposal.len(),
        dim: d,
        data,
    })
}

/// Hard-token embedding; equal to `soft_embed` of the one-hot proposal.
pub fn hard_embed(tokens: &[TokenId], table: &EmbeddingTable) -> SoftEmbedding {
    let d = table.dim;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(table.row(t));
    }
    SoftEmbedding {
        len: tokens.len(),
        dim: d,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub dim: usize,
    pub hidden: usize,
    pub families: usize,
    /// One threshold per constraint.
    pub thresholds: Vec<f64>,
    pub init_seed: u64,
    pub init_scale: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub holdout_fraction: f64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: 32,
            families: 2,
            thresholds: vec![0.8],
            init_seed: 0,
            init_scale: 0.1,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            holdout_fraction: 0.2,
            train_seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.hidden == 0 || self.families == 0 {
            return Err(CdcError::Config("surrogate needs dim >= 2, hidden >= 1, families >= 1".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(CdcError::Config("thresholds must be nonempty and in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(CdcError::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameter block. `w1` is `hidden x (2 * dim)` row-major; `w2` is `m x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embedding: EmbeddingTable,
    pub context: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Params {
            embedding: EmbeddingTable {
                rows: self.embedding.rows,
                dim: self.embedding.dim,
                data: z(&self.embedding.data),
            },
            context: z(&self.context),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.embedding.data,
            &mut self.context,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub version: u32,
    pub config: SurrogateConfig,
    pub params: Params,
}

struct Forward {
    input: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SurrogateModel {
    /// Seeded uniform(-scale, scale) initialization.
    pub fn init(vocab_size: usize, config: &SurrogateConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = trajectory_rng(config.init_seed);
        let s = config.init_scale;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-s..=s)).collect() };
        let (d, h, m) = (config.dim, config.hidden, config.thresholds.len());
        let params = Params {
            embedding: EmbeddingTable::new(vocab_size, d, draw(vocab_size * d))?,
            context: draw(config.families * d),
            w1: draw(h * 2 * d),
            b1: draw(h),
            w2: draw(m * h),
            b2: draw(m),
        };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params,
        })
    }

    /// All parameters zero: every score is exactly 1/2.
    pub fn zeros(vocab_size: usize, config: &SurrogateConfig) -> Result<Self> {
        let mut m = Self::init(vocab_size, config)?;
        m.params.slices_mut().into_iter().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
        Ok(m)
    }

    pub fn constraints(&self) -> usize {
        self.config.thresholds.len()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.config.thresholds
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.params.embedding
    }

    fn forward(&self, emb: &SoftEmbedding, family: usize) -> Result<Forward> {
        let d = self.config.dim;
        if emb.dim != d {
            return Err(invalid("soft embedding dimension mismatch"));
        }
        if emb.len == 0 {
            return Err(invalid("cannot score an empty sequence"));
        }
        if family >= self.config.families {
            return Err(invalid(format!("family {family} outside 0..{}", self.config.families)));
        }
        let mut input = vec![0.0; 2 * d];
        for i in 0..emb.len {
            for (a, e) in input[..d].iter_mut().zip(emb.row(i)) {
                *a += e;
            }
        }
        let inv = 1.0 / emb.len as f64;
        input[..d].iter_mut().for_each(|a| *a *= inv);
        input[d..].copy_from_slice(&self.params.context[family * d..(family + 1) * d]);
        let h = self.config.hidden;
        let z: Vec<f64> = (0..h)
            .map(|k| {
                let w = &self.params.w1[k * 2 * d..(k + 1) * 2 * d];
                (w.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>() + self.params.b1[k]).tanh()
            })
            .collect();
        let g = (0..self.constraints())
            .map(|j| {
                let w = &self.params.w2[j * h..(j + 1) * h];
                sigmoid(w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + self.params.b2[j])
            })
            .collect();
        Ok(Forward { input, z, g })
    }

    /// Per-constraint scores in (0, 1).
    pub fn scores(&self, emb: &SoftEmbedding, family: usize) -> Result<Vec<f64>> {
        Ok(self.forward(emb, family)?.g)
    }

    /// First-constraint score.
    pub fn score(&self, emb: &SoftEmbedding, family: usize) -> Result<f64> {
        Ok(self.scores(emb, family)?[0])
    }

    pub fn score_tokens(&self, tokens: &[TokenId], family: usize) -> Result<f64> {
        self.score(&hard_embed(tokens, self.embedding()), family)
    }

    /// `(dg_j, sum_j dg_j)` with `dg_j = max(0, tau_j - g_j)`.
    pub fn violation(&self, proposal: &CleanProposal, family: usize) -> Result<(Vec<f64>, f64)> {
        let g = self.scores(&soft_embed(proposal, self.embedding())?, family)?;
        Ok(hinge(&g, self.thresholds()))
    }

    /// Value and gradient, w.r.t. each soft-embedding row, of
    /// `sum_j lambda_j dg_j + mu_j / 2 dg_j^2`.
    pub fn penalty_grad(
        &self,
        emb: &SoftEmbedding,
        family: usize,
        lambda: &[f64],
        mu: &[f64],
    ) -> Result<(f64, SoftEmbedding)> {
        let m = self.constraints();
        if lambda.len() != m || mu.len() != m {
            return Err(invalid("multiplier count must match constraint count"));
        }
        let f = self.forward(emb, family)?;
        let (d, h) = (self.config.dim, self.config.hidden);
        let mut value = 0.0;
        let mut dz = vec![0.0; h];
        for j in 0..m {
            let dg = self.config.thresholds[j] - f.g[j];
            // Kink (dg == 0) takes the inactive side.
            if dg <= 0.0 {
                continue;
            }
            value += lambda[j] * dg + 0.5 * mu[j] * dg * dg;
            let d_out = -(lambda[j] + mu[j] * dg) * f.g[j] * (1.0 - f.g[j]);
            for (k, dzk) in dz.iter_mut().enumerate() {
                *dzk += d_out * self.params.w2[j * h + k];
            }
        }
        let mut dmean = vec![0.0; d];
        for k in 0..h {
            let da = dz[k] * (1.0 - f.z[k] * f.z[k]);
            if da == 0.0 {
                continue;
            }
            for (c, dm) in dmean.iter_mut().enumerate() {
                *dm += da * self.params.w1[k * 2 * d + c];
            }
        }
        let inv = 1.0 / emb.len as f64;
        dmean.iter_mut().for_each(|x| *x *= inv);
        let mut data = Vec::with_capacity(emb.len * d);
        for _ in 0..emb.len {
            data.extend_from_slice(&dmean);
        }
        Ok((
            value,
            SoftEmbedding {
                len: emb.len,
                dim: d,
                data,
            },
        ))
    }

    /// Gradient of the aggregate violation `sum_j dg_j` w.r.t. each soft-embedding row.
    pub fn grad_wrt_embeddings(&self, emb: &SoftEmbedding, family: usize) -> Result<SoftEmbedding> {
        let m = self.constraints();
        Ok(self.penalty_grad(emb, family, &vec![1.0; m], &vec![0.0; m])?.1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(CdcError::Config(format!(
                "surrogate checkpoint version {} (expected {CHECKPOINT_VERSION})",
                m.version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }

    /// Class-weighted BCE and its parameter gradient for one hard-token example.
    fn example_grad(&self, ex: &Example, weights: &[(f64, f64)], grad: &mut Params) -> Result<f64> {
        let emb = hard_embed(&ex.tokens, self.embedding());
        let f = self.forward(&emb, ex.family)?;
        let (d, h) = (self.config.dim, self.config.hidden);
        let mut loss = 0.0;
        let mut dz = vec![0.0; h];
        for (j, &g) in f.g.iter().enumerate() {
            let y = ex.labels[j];
            let w = if y { weights[j].0 } else { weights[j].1 };
            let p = g.clamp(1e-12, 1.0 - 1e-12);
            loss -= w * if y { p.ln() } else { (1.0 - p).ln() };
            let d_out = w * (g - y as u8 as f64);
            grad.b2[j] += d_out;
            for k in 0..h {
                grad.w2[j * h + k] += d_out * f.z[k];
                dz[k] += d_out * self.params.w2[j * h + k];
            }
        }
        let mut dinput = vec![0.0; 2 * d];
        for k in 0..h {
            let da = dz[k] * (1.0 - f.z[k] * f.z[k]);
            grad.b1[k] += da;
            for c in 0..2 * d {
                grad.w1[k * 2 * d + c] += da * f.input[c];
                dinput[c] += da * self.params.w1[k * 2 * d + c];
            }
        }
        let inv = 1.0 / ex.tokens.len() as f64;
        for &t in &ex.tokens {
            for c in 0..d {
                grad.embedding.data[t * d + c] += dinput[c] * inv;
            }
        }
        for c in 0..d {
            grad.context[ex.family * d + c] += dinput[d + c];
        }
        Ok(loss)
    }
}

pub fn hinge(g: &[f64], tau: &[f64]) -> (Vec<f64>, f64) {
    let dg: Vec<f64> = g.iter().zip(tau).map(|(g, t)| (t - g).max(0.0)).collect();
    let total = dg.iter().sum();
    (dg, total)
}

/// A labeled training program: `labels[j]` is whether constraint `j` holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub family: usize,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Full training-set loss after each update of the first epoch.
    pub first_epoch_losses: Vec<f64>,
    pub holdout_auc: Option<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
}

/// Area under the ROC curve (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut i) = (0.0, 0);
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[idx[k]]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

fn class_weights(examples: &[Example], m: usize) -> Vec<(f64, f64)> {
    (0..m)
        .map(|j| {
            let n = examples.len() as f64;
            let pos = examples.iter().filter(|e| e.labels[j]).count() as f64;
            (n / (2.0 * pos.max(1.0)), n / (2.0 * (n - pos).max(1.0)))
        })
        .collect()
}

fn dataset_loss(model: &SurrogateModel, examples: &[Example], weights: &[(f64, f64)]) -> Result<f64> {
    let mut scratch = model.params.zeros_like();
    let mut total = 0.0;
    for ex in examples {
        total += model.example_grad(ex, weights, &mut scratch)?;
    }
    Ok(total / examples.len() as f64)
}

/// Seeded training with class-balanced binary cross-entropy.
pub fn train_surrogate(
    examples: &[Example],
    vocab_size: usize,
    config: &SurrogateConfig,
) -> Result<(SurrogateModel, TrainReport)> {
    let mut model = SurrogateModel::init(vocab_size, config)?;
    let m = model.constraints();
    for (i, ex) in examples.iter().enumerate() {
        if ex.labels.len() != m || ex.tokens.is_empty() || ex.tokens.iter().any(|&t| t >= vocab_size) {
            return Err(invalid(format!("example {i} is malformed")));
        }
    }
    for j in 0..m {
        let pos = examples.iter().filter(|e| e.labels[j]).count();
        if pos == 0 || pos == examples.len() {
            return Err(invalid(format!("constraint {j} labels are single-class")));
        }
    }
    let mut rng = trajectory_rng(config.train_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (examples.len() as f64 * config.holdout_fraction).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train: Vec<Example> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let hold: Vec<Example> = hold_idx.iter().map(|&i| examples[i].clone()).collect();
    let weights = class_weights(&train, m);
    let mut report = TrainReport {
        train_size: train.len(),
        holdout_size: hold.len(),
        ..Default::default()
    };
    let batch = if config.batch_size == 0 {
        train.len()
    } else {
        config.batch_size
    };
    let mut m1 = model.params.zeros_like();
    let mut m2 = model.params.zeros_like();
    let mut step = 0i32;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in idx.chunks(batch) {
            let mut grad = model.params.zeros_like();
            for &i in chunk {
                epoch_loss += model.example_grad(&train[i], &weights, &mut grad)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            step += 1;
            let lr = config.learning_rate;
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let corr1 = 1.0 - b1.powi(step);
            let corr2 = 1.0 - b2.powi(step);
            let gs = grad.slices_mut();
            let ms = m1.slices_mut();
            let vs = m2.slices_mut();
            for (((p, g), mm), vv) in model.params.slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
                for k in 0..p.len() {
                    let gk = g[k] * scale;
                    match config.optimizer {
                        Optimizer::Sgd => p[k] -= lr * gk,
                        Optimizer::Adam => {
                            mm[k] = b1 * mm[k] + (1.0 - b1) * gk;
                            vv[k] = b2 * vv[k] + (1.0 - b2) * gk * gk;
                            p[k] -= lr * (mm[k] / corr1) / ((vv[k] / corr2).sqrt() + eps);
                        }
                    }
                }
            }
            if epoch == 0 {
                report.first_epoch_losses.push(dataset_loss(&model, &train, &weights)?);
            }
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);
    }
    if !hold.is_empty() {
        let scores = hold
            .iter()
            .map(|e| model.score_tokens(&e.tokens, e.family))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = hold.iter().map(|e| e.labels[0]).collect();
        report.holdout_auc = auc(&scores, &labels);
    }
    Ok((model, report))
}
