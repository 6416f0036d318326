//! Behavior cloning: cross-entropy on skill labels plus masked squared error
//! on parameters, optimized with Adam.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{softmax_in_place, Model, ModelConfig};
use super::obs::{OBS_DIM, OMEGA_DIM};
use super::SchedulerOutput;
use crate::config::content_hash;
use crate::datagen::{window, Dataset, DemoRecord, LABEL_CONTINUE};
use crate::seeds::substream;
use crate::skills::N_SKILLS;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_omega: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Window length H.
    pub window: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    /// Fraction of episodes held out for evaluation.
    pub holdout: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_omega: 1.0,
            lr: 3e-4,
            batch: 64,
            epochs: 30,
            window: 8,
            d_model: 64,
            layers: 2,
            heads: 4,
            seed: 0,
            holdout: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.window, self.d_model, self.layers, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_omega >= 0.0) {
            return Err(Error::Config("lambda_omega must be >= 0".into()));
        }
        if self.window < 1 || self.batch < 1 {
            return Err(Error::Config("window and batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("lr must be > 0 and holdout in [0, 1)".into()));
        }
        self.model_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Unweighted squared error over masked parameter vectors.
    pub mse: f64,
    /// `lambda_omega * mse`.
    pub omega_term: f64,
    pub total: f64,
}

/// Loss of one record; see `loss_and_grad`.
pub fn loss(out: &SchedulerOutput, rec: &DemoRecord, lambda_omega: f64) -> LossBreakdown {
    let raw = out.to_raw();
    let mut scratch = vec![0.0; raw.len()];
    loss_and_grad(&raw, rec, lambda_omega, 0.0, &mut scratch)
}

/// Per-record loss on a raw output row, adding `scale` times its gradient to
/// `d_out`. Busy arms contribute nothing; the squared error applies only where
/// the record's mask is set.
pub fn loss_and_grad(raw: &[f64], rec: &DemoRecord, lambda_omega: f64, scale: f64, d_out: &mut [f64]) -> LossBreakdown {
    let k = N_SKILLS;
    let mut ce = 0.0;
    let mut mse = 0.0;
    for arm in 0..2 {
        let label = rec.label_k[arm];
        if label != LABEL_CONTINUE {
            let logits = &raw[arm * k..(arm + 1) * k];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - logits[label as usize];
            if scale != 0.0 {
                let mut p = logits.to_vec();
                softmax_in_place(&mut p);
                p[label as usize] -= 1.0;
                for (g, pv) in d_out[arm * k..(arm + 1) * k].iter_mut().zip(&p) {
                    *g += scale * pv;
                }
            }
        }
        if rec.omega_mask[arm] {
            let off = 2 * k + arm * OMEGA_DIM;
            for j in 0..OMEGA_DIM {
                let e = raw[off + j] - rec.label_omega[arm][j] as f64;
                mse += e * e;
                d_out[off + j] += scale * lambda_omega * 2.0 * e;
            }
        }
    }
    let omega_term = lambda_omega * mse;
    LossBreakdown {
        ce,
        mse,
        omega_term,
        total: ce + omega_term,
    }
}

/// Aggregate metrics over a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub records: usize,
    pub ce: f64,
    pub mse: f64,
    pub loss: f64,
    pub acc_l: f64,
    pub acc_r: f64,
}

#[derive(Default)]
struct MetricSum {
    records: usize,
    ce: f64,
    mse: f64,
    loss: f64,
    correct: [usize; 2],
    labelled: [usize; 2],
}

impl MetricSum {
    fn add(&mut self, raw: &[f64], rec: &DemoRecord, b: &LossBreakdown) {
        self.records += 1;
        self.ce += b.ce;
        self.mse += b.mse;
        self.loss += b.total;
        for arm in 0..2 {
            let label = rec.label_k[arm];
            if label == LABEL_CONTINUE {
                continue;
            }
            self.labelled[arm] += 1;
            if argmax(&raw[arm * N_SKILLS..(arm + 1) * N_SKILLS]) == label as usize {
                self.correct[arm] += 1;
            }
        }
    }

    fn finish(&self) -> SplitMetrics {
        let n = self.records.max(1) as f64;
        let acc = |a: usize| {
            if self.labelled[a] == 0 {
                0.0
            } else {
                self.correct[a] as f64 / self.labelled[a] as f64
            }
        };
        SplitMetrics {
            records: self.records,
            ce: self.ce / n,
            mse: self.mse / n,
            loss: self.loss / n,
            acc_l: acc(0),
            acc_r: acc(1),
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Running averages over the epoch's minibatches, before each update.
    pub train: SplitMetrics,
    pub heldout: SplitMetrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub n_params: usize,
    pub train_records: usize,
    pub heldout_records: usize,
    pub heldout_episodes: Vec<u64>,
    pub epochs: Vec<EpochReport>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_ce,train_mse,train_loss,train_acc_l,train_acc_r,heldout_ce,heldout_mse,heldout_loss,heldout_acc_l,heldout_acc_r,seconds\n",
        );
        for e in &self.epochs {
            let (t, h) = (&e.train, &e.heldout);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
                e.epoch, t.ce, t.mse, t.loss, t.acc_l, t.acc_r, h.ce, h.mse, h.loss, h.acc_l, h.acc_r, e.seconds
            )
            .expect("write to string");
        }
        s
    }
}

/// Splits record indices by episode: a seeded shuffle of the episode ids, the
/// first `holdout` fraction held out.
pub fn split_by_episode(records: &[DemoRecord], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<u64>) {
    let mut episodes: Vec<u64> = records.iter().map(|r| r.episode).collect::<BTreeSet<_>>().into_iter().collect();
    episodes.shuffle(&mut substream(seed, "heldout-split"));
    let n_hold = (holdout * episodes.len() as f64).round() as usize;
    let held: BTreeSet<u64> = episodes[..n_hold.min(episodes.len())].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if held.contains(&r.episode) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test, held.into_iter().collect())
}

/// Input block for the given record indices, `len × window × OBS_DIM`.
pub fn batch_input(records: &[DemoRecord], idx: &[usize], h: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(idx.len() * h * OBS_DIM);
    for &i in idx {
        for frame in window(records, i, h) {
            x.extend_from_slice(&frame);
        }
    }
    x
}

/// Metrics of `model` on `records[idx]`, evaluated in chunks.
pub fn score_records(model: &Model, records: &[DemoRecord], idx: &[usize], lambda_omega: f64) -> SplitMetrics {
    let mut sum = MetricSum::default();
    let o = model.cfg.out_dim();
    let mut scratch = vec![0.0; o];
    for chunk in idx.chunks(256) {
        let out = model.forward(&batch_input(records, chunk, model.cfg.window), chunk.len());
        for (row, &i) in out.chunks(o).zip(chunk) {
            let b = loss_and_grad(row, &records[i], lambda_omega, 0.0, &mut scratch);
            sum.add(row, &records[i], &b);
        }
    }
    sum.finish()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a fresh model. `on_epoch` sees each epoch's report as it finishes.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochReport)) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if dataset.header.obs_dim != OBS_DIM || dataset.header.omega_dim != OMEGA_DIM {
        return Err(Error::Format(format!(
            "dataset dims ({}, {}) do not match the model ({OBS_DIM}, {OMEGA_DIM})",
            dataset.header.obs_dim, dataset.header.omega_dim
        )));
    }
    let start = Instant::now();
    let records = &dataset.records;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let (mut train_idx, held_idx, held_eps) = split_by_episode(records, cfg.holdout, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Config("holdout leaves no training records".into()));
    }
    let o = model.cfg.out_dim();
    let mut adam = Adam::new(model.n_params(), cfg.lr);
    let mut grad = vec![0.0; model.n_params()];
    let mut d_out = Vec::new();
    let mut shuffle_rng = substream(cfg.seed, "minibatch");
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        train_idx.shuffle(&mut shuffle_rng);
        let mut sum = MetricSum::default();
        for (bi, chunk) in train_idx.chunks(cfg.batch).enumerate() {
            let x = batch_input(records, chunk, cfg.window);
            let (out, cache) = model.forward_cached(&x, chunk.len());
            d_out.clear();
            d_out.resize(out.len(), 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for ((row, &i), d) in out.chunks(o).zip(chunk).zip(d_out.chunks_mut(o)) {
                let b = loss_and_grad(row, &records[i], cfg.lambda_omega, scale, d);
                if !b.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                sum.add(row, &records[i], &b);
            }
            grad.fill(0.0);
            model.backward(&cache, &d_out, &mut grad);
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                if norm > cfg.grad_clip {
                    let k = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam.step(&mut model.params, &grad);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergent(format!("non-finite parameter after epoch {epoch} batch {bi}")));
            }
        }
        let heldout = score_records(&model, records, &held_idx, cfg.lambda_omega);
        let rep = EpochReport {
            epoch,
            train: sum.finish(),
            heldout,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rep);
        epochs.push(rep);
    }

    let report = TrainReport {
        config: cfg.clone(),
        model: model.cfg.clone(),
        config_hash: content_hash(cfg),
        dataset_hash: dataset.header.config_hash.clone(),
        n_params: model.n_params(),
        train_records: train_idx.len(),
        heldout_records: held_idx.len(),
        heldout_episodes: held_eps,
        epochs,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
