//! Learned low-level controllers: a two-hidden-layer tanh network per skill,
//! trained on the dense reward with the cross-entropy method.

use std::io::{Read, Write};
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::geometry::{wrap_angle, Vec2};
use crate::rewards::{total_reward, RewardConfig};
use crate::seeds::{derive_u64, substream};
use crate::skills::nominal::{sample_task, SkillTask};
use crate::skills::{control, push_waypoint, terminated, SkillConfig, SkillId, SkillInstance, SkillStatus};
use crate::world::{step, ArmCommand, Grip, PerArm, WorldConfig, WorldState};
use crate::{Error, Result};

pub const GAMMA: f64 = 0.99;
const PUSH_GAP: f64 = 0.015;
const ENGAGE_SCALE: f64 = 0.02;
const FEATURE_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillLearnConfig {
    pub hidden: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Rollouts per candidate and iteration.
    pub episodes: usize,
    /// Held-out rollouts for the final success rate.
    pub heldout: usize,
    /// Std of the initial hidden-layer weights.
    pub init_std: f64,
    /// Initial search std of the output layer. Hidden layers start at `init_std`.
    pub search_std: f64,
    /// Extra search noise, as a fraction of the initial std, decaying linearly to zero.
    pub extra_noise: f64,
    /// Lower bound on the search std.
    pub min_std: f64,
    pub seed: u64,
    pub reward: RewardConfig,
}

impl Default for SkillLearnConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            population: 64,
            elites: 8,
            iterations: 30,
            episodes: 32,
            heldout: 100,
            init_std: 0.1,
            search_std: 6.0,
            extra_noise: 0.1,
            min_std: 0.01,
            seed: 0,
            reward: RewardConfig::default(),
        }
    }
}

impl SkillLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.population == 0 || self.elites == 0 || self.elites > self.population || self.episodes == 0 {
            return Err(Error::Config("hidden, population, elites and episodes must be positive, elites <= population".into()));
        }
        if !(self.search_std > 0.0) || !(self.min_std >= 0.0) || !(self.init_std >= 0.0) || !(self.extra_noise >= 0.0) {
            return Err(Error::Config("search std must be positive".into()));
        }
        self.reward.validate()
    }
}

/// Input size for `skill`: per acting arm its position and velocity in the
/// object frame, its offset to the push point or route waypoint and the goal
/// direction, both gated by how close the arm is to that point, the other arm's position for
/// single-arm skills, the object's extents and heading, and the goal offset.
pub fn input_dim(skill: SkillId) -> usize {
    let arms = skill.arity();
    8 * arms + if arms == 1 { 2 } else { 0 } + 4 + 4
}

/// Output size: linear and angular velocity per acting arm, plus a grip
/// channel for bimanual skills.
pub fn output_dim(skill: SkillId) -> usize {
    3 * skill.arity() + usize::from(skill.is_bimanual())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPolicyParams {
    pub skill: SkillId,
    pub hidden: usize,
    pub weights: Vec<f64>,
}

impl SkillPolicyParams {
    pub fn n_weights(skill: SkillId, hidden: usize) -> usize {
        let (i, o) = (input_dim(skill), output_dim(skill));
        i * hidden + hidden + hidden * hidden + hidden + hidden * o + o
    }

    /// Gaussian hidden layers, zero output layer: the initial policy is a no-op.
    pub fn init(skill: SkillId, hidden: usize, std: f64, seed: u64) -> Self {
        let (i, o) = (input_dim(skill), output_dim(skill));
        let n = Self::n_weights(skill, hidden);
        let mut rng = substream(seed, "skill-init");
        let dist = Normal::new(0.0, std.max(1e-300)).expect("valid std");
        let hidden_end = i * hidden + hidden + hidden * hidden + hidden;
        let weights = (0..n)
            .map(|k| if k < hidden_end && std > 0.0 { dist.sample(&mut rng) } else { 0.0 })
            .collect();
        debug_assert_eq!(n - hidden_end, hidden * o + o);
        Self { skill, hidden, weights }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (i, o, h) = (input_dim(self.skill), output_dim(self.skill), self.hidden);
        let w = &self.weights;
        let layer = |input: &[f64], off: usize, n_in: usize, n_out: usize| -> Vec<f64> {
            let b = off + n_in * n_out;
            (0..n_out)
                .map(|j| w[b + j] + (0..n_in).map(|k| input[k] * w[off + k * n_out + j]).sum::<f64>())
                .collect()
        };
        let h1: Vec<f64> = layer(x, 0, i, h).into_iter().map(f64::tanh).collect();
        let off2 = i * h + h;
        let h2: Vec<f64> = layer(&h1, off2, h, h).into_iter().map(f64::tanh).collect();
        let off3 = off2 + h * h + h;
        layer(&h2, off3, h, o).into_iter().map(f64::tanh).collect()
    }

    /// Commands for the acting arms, already within the speed limits.
    pub fn commands(&self, inst: &SkillInstance, state: &WorldState, world: &WorldConfig, skills: &SkillConfig) -> PerArm<ArmCommand> {
        let mut out = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        let Some(obj) = state.object(inst.params.object_id) else {
            return out;
        };
        let pose = obj.pose;
        let c = pose.position();
        let arms = inst.arms.arms();
        let half = obj.half_extents;
        let goal = inst.params.goal_position().map_or(Vec2::ZERO, |t| pose.local_dir(t - c));
        // Point just outside the face opposite the goal direction.
        let goal_dir = if goal.norm() > 1e-9 { goal * (1.0 / goal.norm()) } else { Vec2::ZERO };
        let push_point = if goal.norm() > 1e-9 {
            let u = goal * (1.0 / goal.norm());
            let t = (half.x / u.x.abs().max(1e-9)).min(half.y / u.y.abs().max(1e-9));
            u * -(t + PUSH_GAP)
        } else {
            Vec2::ZERO
        };
        let mut x = Vec::with_capacity(input_dim(self.skill));
        for &a in arms {
            let p = pose.local_dir(state.arms[a].position() - c);
            let v = pose.local_dir(state.arms[a].ee_velocity.linear) * (1.0 / world.v_max);
            // Single-arm pushes see the next waypoint of the scripted route.
            let route = match (self.skill, inst.params.goal_position()) {
                (SkillId::PushSingle, Some(t)) => push_waypoint(world, state, skills, a, obj.id, t),
                _ => None,
            };
            let d = route.map_or(push_point, |w| pose.local_dir(w - c)) - p;
            // Near the waypoint the arm should push instead of approach.
            let engaged = 1.0 - (d.norm() / ENGAGE_SCALE).tanh();
            let approach = if d.norm() > 1e-9 { d * ((1.0 - engaged) * FEATURE_SCALE / d.norm()) } else { Vec2::ZERO };
            let push = goal_dir * (engaged * FEATURE_SCALE);
            x.extend_from_slice(&[p.x * 5.0, p.y * 5.0, v.x, v.y, approach.x, approach.y, push.x, push.y]);
        }
        if arms.len() == 1 {
            let p = pose.local_dir(state.arms[arms[0].other()].position() - c) * 2.0;
            x.extend_from_slice(&[p.x, p.y]);
        }
        x.extend_from_slice(&[obj.half_extents.x * 10.0, obj.half_extents.y * 10.0, pose.theta.sin(), pose.theta.cos()]);
        let g = goal * 5.0;
        let dt = inst.params.goal_rotation().map_or(0.0, |t| wrap_angle(t - pose.theta));
        x.extend_from_slice(&[g.x, g.y, dt.sin(), dt.cos() - 1.0]);

        let y = self.forward(&x);
        let hold = self.skill.is_bimanual() && y[3 * arms.len()] > 0.0;
        for (k, &a) in arms.iter().enumerate() {
            let lin = pose.world_dir(Vec2::new(y[3 * k], y[3 * k + 1])) * world.v_max;
            out[a] = ArmCommand {
                linear: lin,
                angular: y[3 * k + 2] * world.omega_max,
                grip: if hold { Grip::Hold } else { Grip::Free },
            }
            .clamped(world);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Low-level controller under evaluation.
pub enum Controller<'a> {
    Learned(&'a SkillPolicyParams),
    Scripted,
}

impl Controller<'_> {
    fn commands(&self, inst: &SkillInstance, state: &WorldState, world: &WorldConfig, skills: &SkillConfig) -> PerArm<ArmCommand> {
        match self {
            Controller::Learned(p) => p.commands(inst, state, world, skills),
            Controller::Scripted => {
                let c = control(inst, state, world, skills);
                PerArm::new(c.left.unwrap_or_else(ArmCommand::zero), c.right.unwrap_or_else(ArmCommand::zero))
            }
        }
    }
}

/// Discounted return and success of one rollout of `task`. Each step is
/// rewarded on the state it leads to. Success is absorbing: the arms stop and
/// the reward of the final state is credited for every step left in the
/// budget, so finishing early never scores below hovering.
pub fn rollout_task(ctrl: &Controller, task: &SkillTask, world: &WorldConfig, skills: &SkillConfig, reward: &RewardConfig) -> (f64, bool) {
    let inst = task.instance(world, skills);
    let arms = inst.arms.arms();
    let mut s = task.state.clone();
    let horizon = inst.budget_steps + 1;
    let zero = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
    let absorb = |s: &WorldState, from: u64, discount: f64| {
        let r = total_reward(s, arms, &zero, &inst.params, reward).total;
        (from..horizon.max(from + 1)).fold((0.0, discount), |(acc, d), _| (acc + d * r, d * GAMMA)).0
    };
    if terminated(&inst, &s, world) == SkillStatus::Succeeded {
        return (absorb(&s, 0, 1.0), true);
    }
    let mut ret = 0.0;
    let mut discount = 1.0;
    for t in 0.. {
        let cmds = ctrl.commands(&inst, &s, world, skills);
        s = step(world, &s, &cmds);
        match terminated(&inst, &s, world) {
            SkillStatus::Running => {}
            SkillStatus::Succeeded => return (ret + absorb(&s, t, discount), true),
            _ => return (ret + discount * total_reward(&s, arms, &cmds, &inst.params, reward).total, false),
        }
        ret += discount * total_reward(&s, arms, &cmds, &inst.params, reward).total;
        discount *= GAMMA;
    }
    unreachable!()
}

/// `rollout_task` on the nominal instance drawn from `seed`.
pub fn rollout_return(ctrl: &Controller, skill: SkillId, seed: u64, skills: &SkillConfig, reward: &RewardConfig) -> Result<(f64, bool)> {
    let task = sample_task(skill, seed)?;
    Ok(rollout_task(ctrl, &task, &WorldConfig::default(), skills, reward))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTrainReport {
    pub skill: SkillId,
    pub config_hash: String,
    pub iterations: usize,
    /// Mean return of the population, per iteration.
    pub mean_return: Vec<f64>,
    /// Mean return of the iteration's best candidate.
    pub best_return: Vec<f64>,
    /// Best mean return seen so far, per iteration.
    pub best_seen: Vec<f64>,
    pub heldout_success: f64,
    pub seconds: f64,
}

fn score(p: &SkillPolicyParams, tasks: &[SkillTask], skills: &SkillConfig, reward: &RewardConfig) -> f64 {
    let world = WorldConfig::default();
    let ctrl = Controller::Learned(p);
    tasks.iter().map(|t| rollout_task(&ctrl, t, &world, skills, reward).0).sum::<f64>() / tasks.len() as f64
}

/// Held-out success rate on seeds disjoint from training.
pub fn heldout_success(p: &SkillPolicyParams, n: usize, seed: u64, skills: &SkillConfig, reward: &RewardConfig) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let tasks = (0..n)
        .map(|i| sample_task(p.skill, derive_u64(seed, &format!("heldout/{i}"))))
        .collect::<Result<Vec<_>>>()?;
    let wins: usize = tasks
        .par_iter()
        .map(|t| rollout_task(&Controller::Learned(p), t, &WorldConfig::default(), skills, reward).1 as usize)
        .sum();
    Ok(wins as f64 / n as f64)
}

/// Cross-entropy method: each iteration samples a population around the
/// current mean, scores every candidate on the same fresh tasks, and refits
/// mean and per-weight std to the elites. Returns the final mean, which
/// generalizes better than the single best-scoring candidate.
pub fn train_skill(skill: SkillId, cfg: &SkillLearnConfig, skills: &SkillConfig) -> Result<(SkillPolicyParams, SkillTrainReport)> {
    cfg.validate()?;
    if skill == SkillId::Wait {
        return Err(Error::Config("wait has no controller to learn".into()));
    }
    let start = Instant::now();
    let init = SkillPolicyParams::init(skill, cfg.hidden, cfg.init_std, cfg.seed);
    let n = init.weights.len();
    let mut mean = init.weights.clone();
    // Hidden layers are searched at their init scale, the output layer wider.
    let out_start = n - (cfg.hidden * output_dim(skill) + output_dim(skill));
    let std0: Vec<f64> = (0..n).map(|j| if j < out_start { cfg.init_std } else { cfg.search_std }).collect();
    let mut std = std0.clone();
    let mut best_score = f64::NEG_INFINITY;
    let (mut mean_curve, mut best_curve, mut seen_curve) = (Vec::new(), Vec::new(), Vec::new());
    let mut pop_rng = substream(cfg.seed, "population");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    for it in 0..cfg.iterations {
        let tasks = (0..cfg.episodes)
            .map(|k| sample_task(skill, derive_u64(cfg.seed, &format!("train/{it}/{k}"))))
            .collect::<Result<Vec<_>>>()?;
        let candidates: Vec<SkillPolicyParams> = (0..cfg.population)
            .map(|_| SkillPolicyParams {
                skill,
                hidden: cfg.hidden,
                weights: (0..n).map(|j| mean[j] + std[j] * unit.sample(&mut pop_rng)).collect(),
            })
            .collect();
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|c| score(c, &tasks, skills, &cfg.reward))
            .collect();
        if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Divergent(format!("non-finite return for candidate {k} at iteration {it}")));
        }
        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let elites = &order[..cfg.elites];
        for j in 0..n {
            let m = elites.iter().map(|&e| candidates[e].weights[j]).sum::<f64>() / cfg.elites as f64;
            let v = elites.iter().map(|&e| (candidates[e].weights[j] - m).powi(2)).sum::<f64>() / cfg.elites as f64;
            mean[j] = m;
            let extra = std0[j] * cfg.extra_noise * (1.0 - it as f64 / cfg.iterations as f64);
            std[j] = (v + extra * extra).sqrt().max(cfg.min_std);
        }
        let top = order[0];
        best_score = best_score.max(scores[top]);
        mean_curve.push(scores.iter().sum::<f64>() / scores.len() as f64);
        best_curve.push(scores[top]);
        seen_curve.push(best_score);
    }

    let policy = SkillPolicyParams { skill, hidden: cfg.hidden, weights: mean };
    let heldout = heldout_success(&policy, cfg.heldout, cfg.seed, skills, &cfg.reward)?;
    let report = SkillTrainReport {
        skill,
        config_hash: content_hash(cfg),
        iterations: cfg.iterations,
        mean_return: mean_curve,
        best_return: best_curve,
        best_seen: seen_curve,
        heldout_success: heldout,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((policy, report))
}

const MAGIC: &[u8; 8] = b"BISKILL\x01";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    skill: SkillId,
    hidden: usize,
    n_weights: usize,
    config_hash: String,
}

/// Binary policy file: magic, version (u32 LE), header length (u32 LE), JSON
/// header, then the weights as f64 LE.
pub fn write_policy<W: Write>(p: &SkillPolicyParams, config_hash: &str, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&PolicyHeader {
        skill: p.skill,
        hidden: p.hidden,
        n_weights: p.weights.len(),
        config_hash: config_hash.to_string(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for x in &p.weights {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a policy file; returns the parameters and the embedded config hash.
pub fn read_policy<R: Read>(mut r: R) -> Result<(SkillPolicyParams, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a skill policy file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(Error::Format("unsupported skill policy version".into()));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let h: PolicyHeader = serde_json::from_slice(&header)?;
    if h.n_weights != SkillPolicyParams::n_weights(h.skill, h.hidden) {
        return Err(Error::Format("weight count does not match the network shape".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * h.n_weights {
        return Err(Error::Format("truncated skill policy weights".into()));
    }
    let weights = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        SkillPolicyParams {
            skill: h.skill,
            hidden: h.hidden,
            weights,
        },
        h.config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::SkillParams;
    use crate::world::reset_named;

    fn quick() -> SkillLearnConfig {
        SkillLearnConfig {
            population: 8,
            elites: 2,
            iterations: 3,
            episodes: 2,
            heldout: 4,
            hidden: 8,
            ..SkillLearnConfig::default()
        }
    }

    #[test]
    fn shapes() {
        for k in SkillId::ALL.into_iter().filter(|k| *k != SkillId::Wait) {
            let p = SkillPolicyParams::init(k, 32, 0.1, 1);
            assert_eq!(p.weights.len(), SkillPolicyParams::n_weights(k, 32));
            assert_eq!(p.forward(&vec![0.3; input_dim(k)]).len(), output_dim(k));
        }
    }

    #[test]
    fn zero_policy_on_satisfied_task_collects_bonus() {
        let mut s = reset_named("one_object", 2).unwrap();
        s.objects[0].pose.x = 0.6;
        let target = s.objects[0].pose.position();
        let task = SkillTask {
            state: s,
            skill: SkillId::PushSingle,
            arms: crate::skills::ArmSet::Left,
            params: SkillParams::push(0, target),
        };
        let p = SkillPolicyParams::init(SkillId::PushSingle, 32, 0.0, 0);
        let cfg = RewardConfig::default();
        let (ret, ok) = rollout_task(&Controller::Learned(&p), &task, &WorldConfig::default(), &SkillConfig::default(), &cfg);
        assert!(ok);
        assert!(ret >= cfg.success_bonus);
    }

    #[test]
    fn initial_policy_is_a_no_op() {
        let p = SkillPolicyParams::init(SkillId::PushSingle, 32, 0.1, 4);
        let task = sample_task(SkillId::PushSingle, 4).unwrap();
        let inst = task.instance(&WorldConfig::default(), &SkillConfig::default());
        let c = p.commands(&inst, &task.state, &WorldConfig::default(), &SkillConfig::default());
        assert_eq!(c.left.linear.norm() + c.right.linear.norm(), 0.0);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let p = SkillPolicyParams::init(SkillId::PushSingle, 16, 0.5, 3);
        let mut q = p.clone();
        let n = q.weights.len();
        q.weights[n - 5] = 0.7;
        let sk = SkillConfig::default();
        let r = RewardConfig::default();
        let a = rollout_return(&Controller::Learned(&q), SkillId::PushSingle, 9, &sk, &r).unwrap();
        let b = rollout_return(&Controller::Learned(&q), SkillId::PushSingle, 9, &sk, &r).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_finite());
    }

    #[test]
    fn zero_iterations_return_the_initial_policy() {
        let cfg = SkillLearnConfig { iterations: 0, ..quick() };
        let (p, rep) = train_skill(SkillId::PushSingle, &cfg, &SkillConfig::default()).unwrap();
        assert_eq!(p, SkillPolicyParams::init(SkillId::PushSingle, cfg.hidden, cfg.init_std, cfg.seed));
        assert!(rep.mean_return.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_best_seen_is_monotone() {
        let cfg = quick();
        let sk = SkillConfig::default();
        let (p1, r1) = train_skill(SkillId::PushSingle, &cfg, &sk).unwrap();
        let (p2, r2) = train_skill(SkillId::PushSingle, &cfg, &sk).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.mean_return, r2.mean_return);
        assert_eq!(r1.best_seen, r2.best_seen);
        assert_eq!(r1.mean_return.len(), cfg.iterations);
        assert!(r1.best_seen.windows(2).all(|w| w[1] >= w[0]));
        assert!((0.0..=1.0).contains(&r1.heldout_success));
    }

    #[test]
    fn policy_file_round_trips() {
        let p = SkillPolicyParams::init(SkillId::PickPlaceBimanual, 8, 0.1, 2);
        let mut bytes = Vec::new();
        write_policy(&p, "abc", &mut bytes).unwrap();
        let (q, h) = read_policy(&bytes[..]).unwrap();
        assert_eq!(q, p);
        assert_eq!(h, "abc");
        assert!(read_policy(&bytes[..bytes.len() - 1]).is_err());
    }
}
