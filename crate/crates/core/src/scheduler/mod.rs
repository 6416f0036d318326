//! Transformer scheduling policy trained by behavior cloning.

pub mod model;
pub mod obs;
pub mod train;

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::executor::{Choice, DecisionContext, HighLevelPolicy};
use crate::skills::{SkillId, N_SKILLS};
use crate::world::{PerArm, WorldConfig, WorldState};
use crate::{Error, Result};
pub use model::{Model, ModelConfig};
use obs::{decode_omega, encode, pad_frame, Frame, OBS_DIM, OMEGA_DIM};
pub use train::{score_records, loss, split_by_episode, train, EpochReport, LossBreakdown, SplitMetrics, TrainConfig, TrainReport};

/// Per-arm skill logits and normalized parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerOutput {
    pub logits: PerArm<[f64; N_SKILLS]>,
    pub omega: PerArm<[f64; OMEGA_DIM]>,
}

impl SchedulerOutput {
    pub fn from_raw(raw: &[f64]) -> Self {
        assert_eq!(raw.len(), 2 * N_SKILLS + 2 * OMEGA_DIM, "output row size");
        let logits = |a: usize| std::array::from_fn(|i| raw[a * N_SKILLS + i]);
        let omega = |a: usize| std::array::from_fn(|i| raw[2 * N_SKILLS + a * OMEGA_DIM + i]);
        Self {
            logits: PerArm::new(logits(0), logits(1)),
            omega: PerArm::new(omega(0), omega(1)),
        }
    }

    pub fn to_raw(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * N_SKILLS + 2 * OMEGA_DIM);
        v.extend_from_slice(&self.logits.left);
        v.extend_from_slice(&self.logits.right);
        v.extend_from_slice(&self.omega.left);
        v.extend_from_slice(&self.omega.right);
        v
    }
}

impl Model {
    /// Output for one window of `window` frames, oldest first.
    pub fn forward_window(&self, frames: &[Frame]) -> SchedulerOutput {
        assert_eq!(frames.len(), self.cfg.window, "window length");
        assert_eq!(self.cfg.obs_dim, OBS_DIM, "observation size");
        let x: Vec<f64> = frames.iter().flat_map(|f| f.iter().copied()).collect();
        SchedulerOutput::from_raw(&self.forward(&x, 1))
    }
}

fn best_single_arm(logits: &[f64; N_SKILLS]) -> SkillId {
    let mut best = SkillId::Wait;
    for s in SkillId::ALL.into_iter().filter(|s| !s.is_bimanual()) {
        if logits[s.index()] > logits[best.index()] {
            best = s;
        }
    }
    best
}

/// Skill choices for the free arms. A bimanual skill is chosen only when
/// both arms are free and both argmaxes name it; it then takes the mean of
/// the two parameter vectors. Otherwise each free arm takes its best
/// single-arm skill or Wait.
pub fn decide(out: &SchedulerOutput, free: PerArm<bool>, state: &WorldState, world: &WorldConfig) -> PerArm<Option<Choice>> {
    let top = out.logits.map(|l| SkillId::ALL[train::argmax(&l)]);
    if free.left && free.right && top.left == top.right && top.left.is_bimanual() {
        let omega: [f64; OMEGA_DIM] = std::array::from_fn(|i| 0.5 * (out.omega.left[i] + out.omega.right[i]));
        let c = Choice::new(top.left, decode_omega(top.left, &omega, state, world));
        return PerArm::new(Some(c.clone()), Some(c));
    }
    PerArm::from_fn(|arm| {
        free[arm].then(|| {
            let skill = best_single_arm(&out.logits[arm]);
            Choice::new(skill, decode_omega(skill, &out.omega[arm], state, world))
        })
    })
}

/// Executor adapter: keeps the frames of earlier decision points of the
/// episode and feeds the model a left-padded window.
pub struct SchedulerPolicy {
    pub model: Model,
    world: WorldConfig,
    history: VecDeque<Frame>,
}

impl SchedulerPolicy {
    pub fn new(model: Model, world: WorldConfig) -> Self {
        Self {
            model,
            world,
            history: VecDeque::new(),
        }
    }

    fn window(&self) -> Vec<Frame> {
        let h = self.model.cfg.window;
        let mut w = vec![pad_frame(); h.saturating_sub(self.history.len())];
        w.extend(self.history.iter().skip(self.history.len().saturating_sub(h)));
        w
    }
}

impl HighLevelPolicy for SchedulerPolicy {
    fn begin_episode(&mut self, _state0: &WorldState) {
        self.history.clear();
    }

    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        // Frames are stored as f32 in datasets; round the same way here.
        let frame = encode(ctx.state, &ctx.active, &self.world, ctx.cap_time).map(|v| v as f32 as f64);
        self.history.push_back(frame);
        if self.history.len() > self.model.cfg.window {
            self.history.pop_front();
        }
        let out = self.model.forward_window(&self.window());
        decide(&out, ctx.free, ctx.state, &self.world)
    }
}

const MAGIC: &[u8; 8] = b"BISCHED\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    config_hash: String,
    n_params: usize,
}

/// Binary checkpoint: magic, version (u32 LE), header length (u32 LE), JSON
/// header with the model config and its hash, then the parameters as f64 LE.
pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.cfg.clone(),
        config_hash: content_hash(&model.cfg),
        n_params: model.n_params(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a scheduler checkpoint".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if content_hash(&header.model) != header.config_hash {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.n_params * 8 {
        return Err(Error::Format(format!(
            "checkpoint holds {} bytes of parameters, expected {}",
            bytes.len(),
            header.n_params * 8
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Model::from_params(header.model, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Dataset, DatasetHeader, DemoRecord, LABEL_CONTINUE};
    use crate::seeds::substream;
    use crate::world::reset_named;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_records(n: usize, seed: u64) -> Vec<DemoRecord> {
        let mut rng = substream(seed, "records");
        (0..n)
            .map(|i| {
                let mut label_k = [0u8; 2];
                let mut mask = [false; 2];
                for a in 0..2 {
                    label_k[a] = rng.gen_range(0..=LABEL_CONTINUE);
                    mask[a] = label_k[a] != LABEL_CONTINUE && label_k[a] != SkillId::Wait.index() as u8;
                }
                DemoRecord {
                    episode: (i / 3) as u64,
                    decision: (i % 3) as u32,
                    obs: (0..OBS_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                    label_k,
                    label_omega: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0))),
                    omega_mask: mask,
                }
            })
            .collect()
    }

    fn dataset(records: Vec<DemoRecord>) -> Dataset {
        Dataset {
            header: DatasetHeader {
                format: crate::datagen::FORMAT.into(),
                version: crate::datagen::FORMAT_VERSION,
                config_hash: "test".into(),
                scenario: "test".into(),
                seed: 0,
                n_episodes: 0,
                retained: 0,
                records: records.len(),
                obs_dim: OBS_DIM,
                omega_dim: OMEGA_DIM,
            },
            records,
        }
    }

    fn batch_loss(m: &Model, records: &[DemoRecord], lambda: f64) -> f64 {
        let idx: Vec<usize> = (0..records.len()).collect();
        let out = m.forward(&train::batch_input(records, &idx, m.cfg.window), idx.len());
        let o = m.cfg.out_dim();
        out.chunks(o)
            .zip(records)
            .map(|(row, r)| loss(&SchedulerOutput::from_raw(row), r, lambda).total)
            .sum::<f64>()
            / records.len() as f64
    }

    fn analytic_grad(m: &Model, records: &[DemoRecord], lambda: f64) -> Vec<f64> {
        let idx: Vec<usize> = (0..records.len()).collect();
        let (out, cache) = m.forward_cached(&train::batch_input(records, &idx, m.cfg.window), idx.len());
        let o = m.cfg.out_dim();
        let mut d_out = vec![0.0; out.len()];
        let scale = 1.0 / records.len() as f64;
        for ((row, r), d) in out.chunks(o).zip(records).zip(d_out.chunks_mut(o)) {
            train::loss_and_grad(row, r, lambda, scale, d);
        }
        let mut g = vec![0.0; m.n_params()];
        m.backward(&cache, &d_out, &mut g);
        g
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut m = Model::new(ModelConfig::new(2, 8, 1, 2), seed).unwrap();
            let records = random_records(6, seed);
            let g = analytic_grad(&m, &records, 1.0);
            let eps = 1e-5;
            let mut worst: (f64, String) = (0.0, String::new());
            for (name, off, len) in m.tensors().to_vec() {
                for i in off..off + len {
                    let p0 = m.params[i];
                    m.params[i] = p0 + eps;
                    let up = batch_loss(&m, &records, 1.0);
                    m.params[i] = p0 - eps;
                    let down = batch_loss(&m, &records, 1.0);
                    m.params[i] = p0;
                    let fd = (up - down) / (2.0 * eps);
                    let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-5);
                    if rel > worst.0 {
                        worst = (rel, format!("{name}[{}] fd {fd} analytic {}", i - off, g[i]));
                    }
                }
            }
            assert!(worst.0 < 1e-4, "seed {seed}: {}", worst.1);
        }
    }

    #[test]
    fn loss_near_zero_for_confident_exact_output() {
        let r = &random_records(4, 1)[1];
        let mut raw = vec![0.0; 2 * N_SKILLS + 2 * OMEGA_DIM];
        for a in 0..2 {
            if r.label_k[a] != LABEL_CONTINUE {
                raw[a * N_SKILLS + r.label_k[a] as usize] = 1e6;
            }
            for j in 0..OMEGA_DIM {
                raw[2 * N_SKILLS + a * OMEGA_DIM + j] = r.label_omega[a][j] as f64;
            }
        }
        let b = loss(&SchedulerOutput::from_raw(&raw), r, 1.0);
        assert!(b.total < 1e-6, "{b:?}");
    }

    #[test]
    fn mask_and_lambda_rules() {
        let mut r = random_records(1, 2).remove(0);
        r.label_k = [SkillId::PushSingle.index() as u8, SkillId::Wait.index() as u8];
        r.omega_mask = [true, false];
        let out = SchedulerOutput::from_raw(&(0..22).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let b1 = loss(&out, &r, 1.0);
        let b2 = loss(&out, &r, 2.0);
        let b0 = loss(&out, &r, 0.0);
        assert!(b1.mse > 0.0);
        assert_eq!(b0.total, b0.ce);
        assert_eq!(b2.omega_term, 2.0 * b1.omega_term);
        r.omega_mask = [false, false];
        assert_eq!(loss(&out, &r, 1.0).total, b1.ce);
    }

    proptest! {
        #[test]
        fn masked_omega_labels_do_not_matter(seed in 0u64..1000, noise in -5.0f32..5.0) {
            let mut r = random_records(1, seed).remove(0);
            r.omega_mask[1] = false;
            let out = SchedulerOutput::from_raw(&(0..22).map(|i| (i as f64 + seed as f64).cos()).collect::<Vec<_>>());
            let before = loss(&out, &r, 1.0);
            for v in &mut r.label_omega[1] {
                *v += noise;
            }
            prop_assert_eq!(loss(&out, &r, 1.0), before);
        }

        #[test]
        fn decide_ignores_logit_offsets(seed in 0u64..500, c in -50.0f64..50.0, left_free: bool, right_free: bool) {
            let w = WorldConfig::default();
            let s = reset_named("two_objects", seed).unwrap();
            let mut rng = substream(seed, "logits");
            let raw: Vec<f64> = (0..22).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = SchedulerOutput::from_raw(&raw);
            let mut shifted = out.clone();
            shifted.logits.left.iter_mut().for_each(|v| *v += c);
            let free = PerArm::new(left_free, right_free);
            prop_assert_eq!(decide(&out, free, &s, &w), decide(&shifted, free, &s, &w));
        }
    }

    fn forced(left: SkillId, right: SkillId) -> SchedulerOutput {
        let mut raw = vec![0.0; 22];
        raw[left.index()] = 5.0;
        raw[N_SKILLS + right.index()] = 5.0;
        // Second choice of each arm is PushSingle.
        raw[SkillId::PushSingle.index()] = 2.0;
        raw[N_SKILLS + SkillId::PushSingle.index()] = 2.0;
        let mut o = SchedulerOutput::from_raw(&raw);
        o.omega.left = [0.0, -0.4, 0.0, -0.1, 0.0];
        o.omega.right = [0.0, -0.4, 0.0, -0.1, 0.0];
        o
    }

    #[test]
    fn decide_rules() {
        let w = WorldConfig::default();
        let s = reset_named("one_object", 4).unwrap();
        let both = PerArm::new(true, true);

        let d = decide(&forced(SkillId::Wait, SkillId::Wait), both, &s, &w);
        assert_eq!(d.left.unwrap().skill, SkillId::Wait);
        assert_eq!(d.right.unwrap().skill, SkillId::Wait);

        let pp = SkillId::PickPlaceBimanual;
        let d = decide(&forced(pp, pp), both, &s, &w);
        assert_eq!(d.left.as_ref().unwrap().skill, pp);
        assert_eq!(d.left, d.right);

        let d = decide(&forced(pp, SkillId::Wait), both, &s, &w);
        assert_eq!(d.left.unwrap().skill, SkillId::PushSingle);
        assert_eq!(d.right.unwrap().skill, SkillId::Wait);

        let d = decide(&forced(pp, pp), PerArm::new(true, false), &s, &w);
        assert_eq!(d.left.unwrap().skill, SkillId::PushSingle);
        assert!(d.right.is_none());
    }

    #[test]
    fn window_order_matters_with_positions() {
        let m = Model::new(ModelConfig::new(3, 16, 1, 2), 9).unwrap();
        let w = WorldConfig::default();
        let a = encode(&reset_named("one_object", 1).unwrap(), &PerArm::default(), &w, 10.0);
        let b = encode(&reset_named("one_object", 2).unwrap(), &PerArm::default(), &w, 10.0);
        let o1 = m.forward_window(&[a, b, a]);
        let o2 = m.forward_window(&[b, a, a]);
        assert_ne!(o1, o2);
        assert_eq!(o1, m.forward_window(&[a, b, a]));
        let pad = m.forward_window(&[pad_frame(); 3]);
        assert!(pad.to_raw().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn memorizes_small_set() {
        let ds = dataset(random_records(10, 5));
        let cfg = TrainConfig {
            epochs: 200,
            batch: 10,
            holdout: 0.0,
            lr: 3e-3,
            d_model: 32,
            ..TrainConfig::default()
        };
        let (m, rep) = train(&ds, &cfg, |_| {}).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let met = score_records(&m, &ds.records, &idx, 1.0);
        assert_eq!(met.acc_l, 1.0);
        assert_eq!(met.acc_r, 1.0);
        assert!(rep.epochs.last().unwrap().train.loss < rep.epochs[0].train.loss);
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_round_trip() {
        let ds = dataset(random_records(60, 6));
        let cfg = TrainConfig {
            epochs: 2,
            batch: 16,
            d_model: 16,
            heads: 2,
            layers: 1,
            window: 3,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&ds, &cfg, |_| {}).unwrap();
        let (m2, r2) = train(&ds, &cfg, |_| {}).unwrap();
        assert_eq!(r1.epochs[0].train.loss, r2.epochs[0].train.loss);
        assert_eq!(m1.params, m2.params);
        assert!(r1.heldout_records > 0);
        let csv = r1.to_csv();
        assert_eq!(csv.lines().count(), 3);

        let mut bytes = Vec::new();
        write_checkpoint(&m1, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.params, m1.params);
        assert_eq!(back.cfg, m1.cfg);
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes[..]).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let ds = dataset(random_records(6, 1));
        let bad = TrainConfig {
            lambda_omega: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&ds, &bad, |_| {}), Err(Error::Config(_))));
        assert!(train(&dataset(vec![]), &TrainConfig::default(), |_| {}).is_err());
    }
}
