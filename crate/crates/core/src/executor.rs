//! Event-driven runtime for skill schedules. The high-level policy is queried
//! whenever at least one arm is free; running skills are never preempted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2, Vec2};
use crate::skills::{control, feasible, terminated, ArmSet, SkillConfig, SkillId, SkillInstance, SkillParams, SkillStatus};
use crate::world::{step, success_check, Arm, ArmCommand, PerArm, ScenarioSpec, WorldConfig, WorldState};

/// A skill and its parameters requested for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub skill: SkillId,
    pub params: SkillParams,
}

impl Choice {
    pub fn new(skill: SkillId, params: SkillParams) -> Self {
        Self { skill, params }
    }

    pub fn wait() -> Self {
        Self::new(SkillId::Wait, SkillParams::wait())
    }
}

/// What the policy sees at a decision point.
pub struct DecisionContext<'a> {
    pub state: &'a WorldState,
    pub free: PerArm<bool>,
    /// Skill running on each busy arm.
    pub active: PerArm<Option<SkillId>>,
    /// Number of earlier decision points in this episode.
    pub index: usize,
    pub cap_time: f64,
}

impl DecisionContext<'_> {
    pub fn both_free(&self) -> bool {
        self.free.left && self.free.right
    }
}

/// A high-level scheduling policy. Entries for busy arms are ignored (and
/// counted as rejections); a missing entry for a free arm means Wait.
pub trait HighLevelPolicy {
    fn begin_episode(&mut self, _state0: &WorldState) {}
    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>>;
}

impl<P: HighLevelPolicy + ?Sized> HighLevelPolicy for Box<P> {
    fn begin_episode(&mut self, state0: &WorldState) {
        (**self).begin_episode(state0)
    }
    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        (**self).decide(ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecConfig {
    pub world: WorldConfig,
    pub skills: SkillConfig,
    pub cap_steps: u64,
}

impl ExecConfig {
    pub fn for_scenario(spec: &ScenarioSpec, skills: SkillConfig) -> Self {
        Self {
            world: spec.world.clone(),
            skills,
            cap_steps: spec.cap_steps(),
        }
    }

    pub fn cap_time(&self) -> f64 {
        self.world.time_of(self.cap_steps)
    }
}

/// Which instance each arm executes.
#[derive(Debug, Clone, Default)]
pub struct Occupancy {
    pub instances: Vec<SkillInstance>,
}

impl Occupancy {
    pub fn holder(&self, arm: Arm) -> Option<&SkillInstance> {
        self.instances.iter().find(|i| i.arms.contains(arm))
    }

    pub fn free(&self) -> PerArm<bool> {
        PerArm::from_fn(|a| self.holder(a).is_none())
    }

    pub fn active(&self) -> PerArm<Option<SkillId>> {
        PerArm::from_fn(|a| self.holder(a).map(|i| i.id))
    }

    /// Arms referenced by more than one instance.
    pub fn violations(&self) -> usize {
        Arm::BOTH
            .iter()
            .filter(|&&a| self.instances.iter().filter(|i| i.arms.contains(a)).count() > 1)
            .count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchOutcome {
    /// Choices actually bound, per free arm.
    pub bound: PerArm<Option<Choice>>,
    pub rejections: usize,
}

/// Validates `choice` and binds new instances to free arms. Arity, parameter
/// shape and feasibility failures degrade the arm to Wait and count one
/// rejection each.
#[allow(clippy::too_many_arguments)]
pub fn dispatch(
    occ: &mut Occupancy,
    choice: &PerArm<Option<Choice>>,
    state: &WorldState,
    world: &WorldConfig,
    cfg: &SkillConfig,
    next_seq: &mut u64,
) -> DispatchOutcome {
    let free = occ.free();
    let mut out = DispatchOutcome::default();
    for a in Arm::BOTH {
        if !free[a] && choice[a].is_some() {
            out.rejections += 1;
        }
    }
    let mut resolved: PerArm<Option<(Choice, ArmSet)>> = PerArm::new(None, None);
    for a in Arm::BOTH {
        if !free[a] || resolved[a].is_some() {
            continue;
        }
        let c = choice[a].unwrap_or_else(Choice::wait);
        let ok = if c.skill.is_bimanual() {
            let b = a.other();
            let agreed = free[b] && choice[b] == Some(c);
            let ok = agreed && feasible(c.skill, &c.params, ArmSet::Both, state);
            if ok {
                resolved[b] = Some((c, ArmSet::Both));
            }
            ok
        } else {
            feasible(c.skill, &c.params, ArmSet::single(a), state)
        };
        resolved[a] = if ok {
            Some((c, if c.skill.is_bimanual() { ArmSet::Both } else { ArmSet::single(a) }))
        } else {
            out.rejections += 1;
            Some((Choice::wait(), ArmSet::single(a)))
        };
    }
    for a in Arm::BOTH {
        let Some((c, arms)) = resolved[a] else { continue };
        out.bound[a] = Some(c);
        if arms == ArmSet::Both && a == Arm::Right {
            continue;
        }
        occ.instances
            .push(SkillInstance::new(c.skill, arms, c.params, state.step_count, *next_seq, world, cfg));
        *next_seq += 1;
    }
    out
}

/// Arms whose commands are zeroed this step: when two single-arm skills act
/// on the same object, the later-dispatched one is masked.
pub fn conflict_guard(active: &[SkillInstance], _state: &WorldState) -> PerArm<bool> {
    let mut mask = PerArm::new(false, false);
    let acting = |i: &SkillInstance| i.id != SkillId::Wait && !i.id.is_bimanual();
    for i in active.iter().filter(|i| acting(i)) {
        let earlier = active
            .iter()
            .any(|j| acting(j) && j.seq < i.seq && j.params.object_id == i.params.object_id);
        if earlier {
            for &a in i.arms.arms() {
                mask[a] = true;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub arm: Arm,
    pub skill: SkillId,
    pub params: SkillParams,
    pub start: f64,
    pub end: f64,
    /// `Running` marks an interval cut short by the end of the episode.
    pub status: SkillStatus,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
}

impl Timeline {
    pub fn track(&self, arm: Arm) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(move |i| i.arm == arm)
    }

    /// Checks per-arm ordering and disjointness, and that every bimanual
    /// skill appears on both arms with identical bounds.
    pub fn validate(&self) -> Result<(), String> {
        for arm in Arm::BOTH {
            let track: Vec<&Interval> = self.track(arm).collect();
            for i in &track {
                if !(i.end >= i.start) {
                    return Err(format!("{arm:?}: interval {} ends before it starts", i.seq));
                }
            }
            for w in track.windows(2) {
                if w[1].start < w[0].end || w[1].start < w[0].start {
                    return Err(format!("{arm:?}: intervals {} and {} overlap", w[0].seq, w[1].seq));
                }
            }
        }
        for i in self.intervals.iter().filter(|i| i.skill.is_bimanual()) {
            let twin = self
                .intervals
                .iter()
                .find(|j| j.arm != i.arm && j.seq == i.seq)
                .ok_or_else(|| format!("bimanual interval {} has no twin", i.seq))?;
            if twin.start != i.start || twin.end != i.end || twin.skill != i.skill {
                return Err(format!("bimanual interval {} differs between arms", i.seq));
            }
        }
        Ok(())
    }

    /// Pairs of non-Wait intervals on different arms that overlap in time.
    /// A bimanual skill is one skill and does not overlap itself.
    pub fn parallel_overlaps(&self) -> usize {
        let busy: Vec<&Interval> = self.intervals.iter().filter(|i| i.skill != SkillId::Wait).collect();
        let mut n = 0;
        for (k, a) in busy.iter().enumerate() {
            for b in &busy[k + 1..] {
                if a.arm != b.arm && a.seq != b.seq && a.start < b.end && b.start < a.end {
                    n += 1;
                }
            }
        }
        n
    }
}

/// One high-level decision as executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub index: usize,
    pub step: u64,
    pub time: f64,
    pub free: PerArm<bool>,
    pub active: PerArm<Option<SkillId>>,
    pub state: WorldState,
    /// What the policy returned, before dispatch.
    pub proposed: PerArm<Option<Choice>>,
    /// Bound choices; `Some` exactly on the free arms.
    pub chosen: PerArm<Option<Choice>>,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub success: bool,
    /// Time of success detection, or the cap.
    pub duration: f64,
    pub final_state: WorldState,
    pub timeline: Timeline,
    pub decisions: Vec<DecisionPoint>,
    pub rejections: usize,
    pub occupancy_violations: usize,
    pub atomicity_violations: usize,
}

fn close(inst: &SkillInstance, end: f64, status: SkillStatus, timeline: &mut Timeline) {
    for &arm in inst.arms.arms() {
        timeline.intervals.push(Interval {
            arm,
            skill: inst.id,
            params: inst.params,
            start: inst.started_at,
            end,
            status,
            seq: inst.seq,
        });
    }
}

pub fn run_episode<P: HighLevelPolicy + ?Sized>(policy: &mut P, state0: &WorldState, cfg: &ExecConfig) -> EpisodeTrace {
    run_episode_observed(policy, state0, cfg, |_| {})
}

/// Runs one episode, calling `observe` on the initial state and after every
/// simulator step.
pub fn run_episode_observed<P: HighLevelPolicy + ?Sized>(
    policy: &mut P,
    state0: &WorldState,
    cfg: &ExecConfig,
    mut observe: impl FnMut(&WorldState),
) -> EpisodeTrace {
    let world = &cfg.world;
    let mut s = state0.clone();
    observe(&s);
    policy.begin_episode(&s);
    let mut occ = Occupancy::default();
    let mut timeline = Timeline::default();
    let mut decisions = Vec::new();
    let (mut rejections, mut occupancy_violations, mut atomicity_violations) = (0, 0, 0);
    let mut next_seq = 0;
    let success = loop {
        let mut keep = Vec::with_capacity(2);
        for inst in occ.instances.drain(..) {
            let status = terminated(&inst, &s, world);
            if status == SkillStatus::Running {
                keep.push(inst);
            } else {
                close(&inst, s.time, status, &mut timeline);
            }
        }
        occ.instances = keep;
        if success_check(&s, &s.goal) {
            break true;
        }
        if s.step_count >= cfg.cap_steps {
            break false;
        }

        let free = occ.free();
        if free.left || free.right {
            let active = occ.active();
            let ctx = DecisionContext {
                state: &s,
                free,
                active,
                index: decisions.len(),
                cap_time: cfg.cap_time(),
            };
            let choice = policy.decide(&ctx);
            let out = dispatch(&mut occ, &choice, &s, world, &cfg.skills, &mut next_seq);
            rejections += out.rejections;
            decisions.push(DecisionPoint {
                index: decisions.len(),
                step: s.step_count,
                time: s.time,
                free,
                active,
                state: s.clone(),
                proposed: choice,
                chosen: out.bound,
            });
        }

        occupancy_violations += occ.violations();
        atomicity_violations += occ
            .instances
            .iter()
            .filter(|i| i.id.is_bimanual() != (i.arms == ArmSet::Both))
            .count();
        let mask = conflict_guard(&occ.instances, &s);
        let mut cmds = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        for inst in &occ.instances {
            let c = control(inst, &s, world, &cfg.skills);
            for &a in inst.arms.arms() {
                if let Some(cmd) = c[a] {
                    if !mask[a] {
                        cmds[a] = cmd;
                    }
                }
            }
        }
        s = step(world, &s, &cmds);
        observe(&s);
    };
    for inst in occ.instances.drain(..) {
        close(&inst, s.time, SkillStatus::Running, &mut timeline);
    }
    timeline.intervals.sort_by(|a, b| (a.arm, a.seq).cmp(&(b.arm, b.seq)));
    let duration = if success { s.time } else { cfg.cap_time() };
    EpisodeTrace {
        success,
        duration,
        final_state: s,
        timeline,
        decisions,
        rejections,
        occupancy_violations,
        atomicity_violations,
    }
}

/// Re-issues the proposals recorded at each decision point of an earlier run.
pub struct ReplayPolicy {
    pub choices: Vec<PerArm<Option<Choice>>>,
}

impl ReplayPolicy {
    pub fn from_trace(trace: &EpisodeTrace) -> Self {
        Self {
            choices: trace.decisions.iter().map(|d| d.proposed).collect(),
        }
    }
}

impl HighLevelPolicy for ReplayPolicy {
    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        self.choices.get(ctx.index).copied().unwrap_or_default()
    }
}

/// Always waits.
pub struct WaitPolicy;

impl HighLevelPolicy for WaitPolicy {
    fn decide(&mut self, _ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        PerArm::new(Some(Choice::wait()), Some(Choice::wait()))
    }
}

/// Uniformly random skills with loosely sampled parameters, including
/// infeasible and ill-formed requests.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: crate::seeds::substream(seed, "random-policy"),
        }
    }

    fn sample(&mut self, state: &WorldState) -> Choice {
        let skill = SkillId::ALL[self.rng.gen_range(0..SkillId::ALL.len())];
        let n = state.objects.len().max(1) as u32;
        let id = self.rng.gen_range(0..n);
        let base = state.object(id).map_or(Vec2::new(0.6, 0.3), |o| o.pose.position());
        let target = base + Vec2::new(self.rng.gen_range(-0.2..0.2), self.rng.gen_range(-0.2..0.2));
        let theta = self.rng.gen_range(-1.5..1.5);
        let params = match skill {
            SkillId::PushSingle | SkillId::PushBimanual => SkillParams::push(id, target),
            SkillId::RotateSingle | SkillId::RotateBimanual => SkillParams::rotate(id, theta),
            SkillId::PickPlaceBimanual => SkillParams::pick_place(id, Pose2::from_parts(target, theta)),
            SkillId::Wait => SkillParams::wait(),
        };
        Choice::new(skill, params)
    }
}

impl HighLevelPolicy for RandomPolicy {
    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        // propose for busy arms too, occasionally, to exercise rejection
        let mut out = PerArm::new(None, None);
        for a in Arm::BOTH {
            if ctx.free[a] || self.rng.gen_bool(0.05) {
                out[a] = Some(self.sample(ctx.state));
            }
        }
        // often agree on a bimanual skill so that some get through
        if ctx.both_free() && self.rng.gen_bool(0.5) {
            if let Some(c) = out.left.filter(|c| c.skill.is_bimanual()) {
                out.right = Some(c);
            }
        }
        out
    }
}
