//! Demonstration datasets from expert rollouts.
//!
//! File format: one JSON header line, then one JSON record per line. Each
//! record carries the observation frame of its decision point; the window fed
//! to the scheduler is that frame preceded by the frames of the previous
//! records of the same episode, left-padded with the pad frame.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::executor::{run_episode, DecisionPoint, EpisodeTrace, ExecConfig, ReplayPolicy};
use crate::expert::{ExpertConfig, ExpertPolicy, PlanShape};
use crate::scheduler::obs::{encode, encode_omega, pad_frame, Frame, OBS_DIM, OMEGA_DIM};
use crate::seeds::derive_u64;
use crate::skills::{SkillConfig, N_SKILLS};
use crate::world::{reset, Arm, ScenarioSpec, WorldConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "bisched-demos";
pub const FORMAT_VERSION: u32 = 1;
/// Label of a busy arm; excluded from the classification loss.
pub const LABEL_CONTINUE: u8 = N_SKILLS as u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub episode: u64,
    pub decision: u32,
    pub obs: Vec<f32>,
    /// Skill index per arm `[left, right]`, or `LABEL_CONTINUE`.
    pub label_k: [u8; 2],
    pub label_omega: [[f32; OMEGA_DIM]; 2],
    pub omega_mask: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub scenario: String,
    pub seed: u64,
    pub n_episodes: usize,
    pub retained: usize,
    pub records: usize,
    pub obs_dim: usize,
    pub omega_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DemoRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub scenario: String,
    pub attempted: usize,
    pub retained: usize,
    pub retention_rate: f64,
    pub records: usize,
    /// Retained episodes whose replay did not reproduce the end state.
    pub replay_mismatches: usize,
    pub shapes: BTreeMap<String, usize>,
    pub mean_duration: f64,
}

/// Everything a dataset depends on.
#[derive(Serialize)]
struct GenKey<'a> {
    format: &'a str,
    version: u32,
    spec: &'a ScenarioSpec,
    skills: &'a SkillConfig,
    expert: &'a ExpertConfig,
}

pub fn dataset_hash(spec: &ScenarioSpec, skills: &SkillConfig) -> String {
    content_hash(&GenKey {
        format: FORMAT,
        version: FORMAT_VERSION,
        spec,
        skills,
        expert: &ExpertConfig::for_scenario(spec),
    })
}

/// Seed of the `i`-th demonstration episode. Derived, so that evaluation on
/// small consecutive seeds uses layouts absent from the data.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_u64(seed, &format!("demo/{i}"))
}

fn to_f32<const N: usize>(v: &[f64]) -> [f32; N] {
    std::array::from_fn(|i| v[i] as f32)
}

/// One record per decision point; busy arms get `LABEL_CONTINUE`.
pub fn label_at_decision_points(
    episode: u64,
    decisions: &[DecisionPoint],
    world: &WorldConfig,
    cap_time: f64,
) -> Vec<DemoRecord> {
    decisions
        .iter()
        .map(|d| {
            let frame = encode(&d.state, &d.active, world, cap_time);
            let mut label_k = [LABEL_CONTINUE; 2];
            let mut label_omega = [[0.0f32; OMEGA_DIM]; 2];
            let mut omega_mask = [false; 2];
            for a in Arm::BOTH {
                if let Some(c) = d.chosen[a] {
                    let (w, m) = encode_omega(c.skill, &c.params, &d.state);
                    label_k[a.index()] = c.skill.index() as u8;
                    label_omega[a.index()] = to_f32(&w);
                    omega_mask[a.index()] = m;
                }
            }
            DemoRecord {
                episode,
                decision: d.index as u32,
                obs: frame.iter().map(|&v| v as f32).collect(),
                label_k,
                label_omega,
                omega_mask,
            }
        })
        .collect()
}

struct Episode {
    trace: EpisodeTrace,
    shape: Option<PlanShape>,
    replay_ok: bool,
}

fn run_expert(spec: &ScenarioSpec, skills: &SkillConfig, seed: u64) -> Result<Episode> {
    let s0 = reset(spec, seed)?;
    let cfg = ExecConfig::for_scenario(spec, skills.clone());
    let mut pol = ExpertPolicy::for_scenario(spec, skills.clone(), seed);
    let trace = run_episode(&mut pol, &s0, &cfg);
    let shape = pol.plan.as_ref().map(|p| p.shape(spec.n_objects));
    let replay_ok = if trace.success {
        let r = run_episode(&mut ReplayPolicy::from_trace(&trace), &s0, &cfg);
        r.success && r.final_state == trace.final_state && r.timeline == trace.timeline
    } else {
        true
    };
    Ok(Episode { trace, shape, replay_ok })
}

/// Rolls out the expert on `n` derived seeds and keeps successful episodes.
pub fn generate_dataset(spec: &ScenarioSpec, n: usize, seed: u64, skills: &SkillConfig) -> Result<(Dataset, GenReport)> {
    let episodes: Vec<(u64, Episode)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let es = episode_seed(seed, i);
            run_expert(spec, skills, es).map(|e| (es, e))
        })
        .collect::<Result<_>>()?;
    let cap_time = spec.world.time_of(spec.cap_steps());
    let mut records = Vec::new();
    let mut shapes = BTreeMap::new();
    let (mut retained, mut mismatches, mut duration) = (0, 0, 0.0);
    for (es, e) in &episodes {
        if !e.trace.success {
            continue;
        }
        retained += 1;
        duration += e.trace.duration;
        mismatches += (!e.replay_ok) as usize;
        if let Some(shape) = e.shape {
            for t in shape.tags() {
                *shapes.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        records.extend(label_at_decision_points(*es, &e.trace.decisions, &spec.world, cap_time));
    }
    let rate = if n == 0 { 1.0 } else { retained as f64 / n as f64 };
    if rate < 0.5 {
        return Err(Error::LowRetention {
            rate,
            retained,
            attempted: n,
        });
    }
    let header = DatasetHeader {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        config_hash: dataset_hash(spec, skills),
        scenario: spec.name.clone(),
        seed,
        n_episodes: n,
        retained,
        records: records.len(),
        obs_dim: OBS_DIM,
        omega_dim: OMEGA_DIM,
    };
    let report = GenReport {
        scenario: spec.name.clone(),
        attempted: n,
        retained,
        retention_rate: rate,
        records: records.len(),
        replay_mismatches: mismatches,
        shapes,
        mean_duration: if retained > 0 { duration / retained as f64 } else { 0.0 },
    };
    Ok((Dataset { header, records }, report))
}

impl Dataset {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected {FORMAT} v{FORMAT_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::with_capacity(header.records);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: DemoRecord = serde_json::from_str(&line)?;
            if rec.obs.len() != header.obs_dim {
                return Err(Error::Format(format!("record has {} features, header says {}", rec.obs.len(), header.obs_dim)));
            }
            records.push(rec);
        }
        if records.len() != header.records {
            return Err(Error::Format(format!(
                "header counts {} records, file has {}",
                header.records,
                records.len()
            )));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Concatenation of several datasets, for training one model on more than
    /// one scenario. Episode ids must not repeat across parts.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Config("no datasets to combine".into()))?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in parts {
            let eps: std::collections::BTreeSet<u64> = p.records.iter().map(|r| r.episode).collect();
            if eps.iter().any(|e| seen.contains(e)) {
                return Err(Error::Format("episode ids repeat across datasets".into()));
            }
            seen.extend(eps);
        }
        let hashes: Vec<&str> = parts.iter().map(|p| p.header.config_hash.as_str()).collect();
        let records: Vec<DemoRecord> = parts.iter().flat_map(|p| p.records.iter().cloned()).collect();
        let header = DatasetHeader {
            format: FORMAT.to_string(),
            version: FORMAT_VERSION,
            config_hash: content_hash(&hashes),
            scenario: parts.iter().map(|p| p.header.scenario.as_str()).collect::<Vec<_>>().join("+"),
            seed: first.header.seed,
            n_episodes: parts.iter().map(|p| p.header.n_episodes).sum(),
            retained: parts.iter().map(|p| p.header.retained).sum(),
            records: records.len(),
            obs_dim: OBS_DIM,
            omega_dim: OMEGA_DIM,
        };
        Ok(Dataset { header, records })
    }
}

/// Window of `h` frames ending at `records[i]`, oldest first, padded at the
/// start of its episode.
pub fn window(records: &[DemoRecord], i: usize, h: usize) -> Vec<Frame> {
    let mut out = vec![pad_frame(); h];
    let ep = records[i].episode;
    let mut j = i;
    for slot in (0..h).rev() {
        let r = &records[j];
        out[slot] = std::array::from_fn(|k| r.obs[k] as f64);
        if j == 0 || records[j - 1].episode != ep || r.decision == 0 {
            break;
        }
        j -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::SkillId;

    fn spec(name: &str) -> ScenarioSpec {
        ScenarioSpec::builtin(name).unwrap()
    }

    #[test]
    fn empty_dataset_has_valid_header() {
        let (d, rep) = generate_dataset(&spec("one_object"), 0, 1, &SkillConfig::default()).unwrap();
        assert!(d.records.is_empty());
        assert_eq!(rep.attempted, 0);
        let back = Dataset::read_from(&d.to_bytes()[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn generation_is_byte_identical_and_round_trips() {
        let sp = spec("two_objects");
        let (a, ra) = generate_dataset(&sp, 12, 7, &SkillConfig::default()).unwrap();
        let (b, _) = generate_dataset(&sp, 12, 7, &SkillConfig::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(ra.retained >= 9);
        assert_eq!(ra.replay_mismatches, 0);
        let back = Dataset::read_from(&a.to_bytes()[..]).unwrap();
        assert_eq!(back.header.records, a.records.len());
        assert_eq!(back.records.len(), a.records.len());
        for r in &back.records {
            for k in 0..2 {
                let l = r.label_k[k];
                assert!(l <= LABEL_CONTINUE);
                let parameterless = l == LABEL_CONTINUE || l == SkillId::Wait.index() as u8;
                assert_eq!(r.omega_mask[k], !parameterless);
                if !r.omega_mask[k] {
                    assert_eq!(r.label_omega[k], [0.0; OMEGA_DIM]);
                }
                assert!(r.label_omega[k].iter().all(|v| v.abs() <= 4.0));
            }
        }
    }

    #[test]
    fn bimanual_decisions_label_both_arms_identically() {
        let sp = spec("one_object");
        let (d, rep) = generate_dataset(&sp, 6, 3, &SkillConfig::default()).unwrap();
        let pp = SkillId::PickPlaceBimanual.index() as u8;
        let mut seen = 0;
        for r in &d.records {
            if r.label_k[0] == pp || r.label_k[1] == pp {
                assert_eq!(r.label_k, [pp, pp]);
                assert_eq!(r.label_omega[0], r.label_omega[1]);
                assert_eq!(r.omega_mask, [true, true]);
                seen += 1;
            }
        }
        assert!(seen >= rep.retained && rep.retained > 0);
    }

    #[test]
    fn one_record_per_decision_point() {
        let sp = spec("two_objects");
        let es = episode_seed(5, 0);
        let e = run_expert(&sp, &SkillConfig::default(), es).unwrap();
        let recs = label_at_decision_points(es, &e.trace.decisions, &sp.world, 20.0);
        assert_eq!(recs.len(), e.trace.decisions.len());
        for (r, d) in recs.iter().zip(&e.trace.decisions) {
            for a in Arm::BOTH {
                assert_eq!(d.free[a], r.label_k[a.index()] != LABEL_CONTINUE);
            }
        }
    }

    #[test]
    fn wait_label_has_no_parameters() {
        let sp = spec("one_object");
        let s0 = reset(&sp, 1).unwrap();
        let cfg = ExecConfig::for_scenario(&sp, SkillConfig::default());
        let t = run_episode(&mut crate::executor::WaitPolicy, &s0, &cfg);
        let recs = label_at_decision_points(1, &t.decisions[..3], &sp.world, 10.0);
        for r in recs {
            assert_eq!(r.label_k, [SkillId::Wait.index() as u8; 2]);
            assert_eq!(r.omega_mask, [false, false]);
        }
    }

    #[test]
    fn windows_pad_at_episode_start() {
        let mk = |episode, decision, v: f32| DemoRecord {
            episode,
            decision,
            obs: vec![v; OBS_DIM],
            label_k: [0, 0],
            label_omega: [[0.0; OMEGA_DIM]; 2],
            omega_mask: [false; 2],
        };
        let recs = vec![mk(1, 0, 1.0), mk(1, 1, 2.0), mk(2, 0, 3.0), mk(2, 1, 4.0), mk(2, 2, 5.0)];
        let w = window(&recs, 1, 3);
        assert_eq!(w[0], pad_frame());
        assert_eq!(w[1][0], 1.0);
        assert_eq!(w[2][0], 2.0);
        let w = window(&recs, 4, 2);
        assert_eq!((w[0][0], w[1][0]), (4.0, 5.0));
        let w = window(&recs, 2, 2);
        assert_eq!(w[0], pad_frame());
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(Dataset::read_from(&b""[..]).is_err());
        let (d, _) = generate_dataset(&spec("one_object"), 2, 1, &SkillConfig::default()).unwrap();
        let mut bytes = d.to_bytes();
        bytes.extend_from_slice(b"{\"not\": \"a record\"}\n");
        assert!(Dataset::read_from(&bytes[..]).is_err());
    }
}
