//! Privileged expert: template plans executed as a high-level policy.
//!
//! Template: every object reachable by one arm only is pushed by that arm to
//! a staging spot both arms reach (pushes of distinct objects run in
//! parallel), then objects are binned in slot order, each with a bimanual
//! rotate when its orientation is off by more than 0.1 rad and a bimanual
//! pick-and-place. Plan items are checked against the live state, so a step
//! that fails or times out is simply issued again.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::executor::{Choice, DecisionContext, HighLevelPolicy};
use crate::geometry::{angle_error, Vec2};
use crate::seeds::substream;
use crate::skills::{push_leg_clear, ArmSet, SkillConfig, SkillId, SkillParams};
use crate::world::{object_at_target, reach_check, Arm, PerArm, ScenarioSpec, WorldConfig, WorldState, SUCCESS_POS_TOL, SUCCESS_ROT_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub staging_x: Vec<f64>,
    pub staging_y: f64,
    /// Staging spots are jittered by up to this much per axis.
    pub staging_jitter: f64,
    /// Rotation targets are jittered by up to this much around the goal.
    pub rotate_jitter: f64,
    /// Staged means both arms reach the center with this margin.
    pub staged_margin: f64,
    pub max_leg: f64,
}

impl ExpertConfig {
    pub fn for_scenario(spec: &ScenarioSpec) -> Self {
        Self {
            staging_x: spec.staging_x.clone(),
            staging_y: spec.staging_y,
            staging_jitter: 0.02,
            rotate_jitter: 0.03,
            staged_margin: 0.03,
            max_leg: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Stage { object: u32, arm: Arm },
    Rotate { object: u32 },
    PickPlace { object: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlanItem {
    Solo(Task),
    /// Bimanual step; both tracks carry it with the same marker.
    Rendezvous { marker: usize, task: Task },
}

impl PlanItem {
    pub fn task(&self) -> Task {
        match *self {
            PlanItem::Solo(t) | PlanItem::Rendezvous { task: t, .. } => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPlan {
    pub tracks: PerArm<Vec<PlanItem>>,
    pub staging: BTreeMap<u32, Vec2>,
    pub rotation_targets: BTreeMap<u32, f64>,
}

/// Coarse structure of a plan, for diversity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanShape {
    /// Number of arms with a staging push.
    pub staging_arms: usize,
    pub rotations: usize,
    pub skipped_rotations: usize,
}

impl PlanShape {
    pub fn tags(&self) -> Vec<&'static str> {
        let mut t = Vec::new();
        match self.staging_arms {
            2 => t.push("parallel-push"),
            1 => t.push("single-arm-staging"),
            _ => t.push("no-staging"),
        }
        if self.skipped_rotations > 0 {
            t.push("rotate-skip");
        }
        t
    }
}

impl ExpertPlan {
    pub fn is_empty(&self) -> bool {
        self.tracks.left.is_empty() && self.tracks.right.is_empty()
    }

    pub fn shape(&self, n_objects: usize) -> PlanShape {
        let staging_arms = Arm::BOTH
            .iter()
            .filter(|&&a| self.tracks[a].iter().any(|i| matches!(i, PlanItem::Solo(Task::Stage { .. }))))
            .count();
        let rotations = self
            .tracks
            .left
            .iter()
            .filter(|i| matches!(i.task(), Task::Rotate { .. }))
            .count();
        let binned = self
            .tracks
            .left
            .iter()
            .filter(|i| matches!(i.task(), Task::PickPlace { .. }))
            .count();
        PlanShape {
            staging_arms,
            rotations,
            skipped_rotations: binned.min(n_objects) - rotations.min(binned),
        }
    }
}

pub(crate) fn reaches_with_margin(state: &WorldState, arm: Arm, p: Vec2, margin: f64) -> bool {
    p.dist(state.arms[arm].base) <= state.arms[arm].reach_radius - margin
}

/// Objects in the order they go into the bin: by target x.
pub fn binning_order(state: &WorldState) -> Vec<u32> {
    let mut ids: Vec<(f64, u32)> = state
        .objects
        .iter()
        .map(|o| (state.goal.per_object_target.get(&o.id).map_or(0.0, |t| t.x), o.id))
        .collect();
    ids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ids.into_iter().map(|(_, id)| id).collect()
}

pub fn plan(state0: &WorldState, cfg: &ExpertConfig, seed: u64) -> Result<ExpertPlan> {
    let mut rng = substream(seed, "plan");
    let mut tracks: PerArm<Vec<PlanItem>> = PerArm::default();
    let mut staging = BTreeMap::new();
    let mut rotation_targets = BTreeMap::new();
    let order = binning_order(state0);
    for (k, &id) in order.iter().enumerate() {
        let o = state0.object(id).expect("listed object");
        if object_at_target(state0, &state0.goal, id) {
            continue;
        }
        let c = o.pose.position();
        let reach = PerArm::from_fn(|a| reach_check(&state0.arms[a], c));
        let staged = Arm::BOTH
            .iter()
            .all(|&a| reaches_with_margin(state0, a, c, cfg.staged_margin));
        if !staged {
            let arm = match (reach.left, reach.right) {
                (true, false) => Arm::Left,
                (false, true) => Arm::Right,
                (true, true) => {
                    if c.dist(state0.arms.left.base) < c.dist(state0.arms.right.base) {
                        Arm::Left
                    } else {
                        Arm::Right
                    }
                }
                (false, false) => return Err(Error::Unsolvable(format!("object {id} is out of reach of both arms"))),
            };
            let x = cfg.staging_x.get(k).or(cfg.staging_x.last()).copied().unwrap_or(0.6);
            let j = cfg.staging_jitter;
            let spot = Vec2::new(x + rng.gen_range(-j..=j), cfg.staging_y + rng.gen_range(-j..=j));
            staging.insert(id, spot);
            tracks[arm].push(PlanItem::Solo(Task::Stage { object: id, arm }));
        }
    }
    let mut marker = 0;
    for &id in &order {
        if object_at_target(state0, &state0.goal, id) {
            continue;
        }
        let o = state0.object(id).expect("listed object");
        let target = state0.goal.per_object_target[&id];
        if angle_error(o.pose.theta, target.theta) > SUCCESS_ROT_TOL {
            let j = cfg.rotate_jitter;
            rotation_targets.insert(id, target.theta + rng.gen_range(-j..=j));
            for a in Arm::BOTH {
                tracks[a].push(PlanItem::Rendezvous {
                    marker,
                    task: Task::Rotate { object: id },
                });
            }
            marker += 1;
        }
        for a in Arm::BOTH {
            tracks[a].push(PlanItem::Rendezvous {
                marker,
                task: Task::PickPlace { object: id },
            });
        }
        marker += 1;
    }
    Ok(ExpertPlan {
        tracks,
        staging,
        rotation_targets,
    })
}

/// Executes an `ExpertPlan` against the live state.
pub struct ExpertPolicy {
    pub cfg: ExpertConfig,
    pub world: WorldConfig,
    pub skills: SkillConfig,
    pub seed: u64,
    pub plan: Option<ExpertPlan>,
    cursor: PerArm<usize>,
}

impl ExpertPolicy {
    pub fn new(cfg: ExpertConfig, world: WorldConfig, skills: SkillConfig, seed: u64) -> Self {
        Self {
            cfg,
            world,
            skills,
            seed,
            plan: None,
            cursor: PerArm::default(),
        }
    }

    pub fn for_scenario(spec: &ScenarioSpec, skills: SkillConfig, seed: u64) -> Self {
        Self::new(ExpertConfig::for_scenario(spec), spec.world.clone(), skills, seed)
    }

    fn done(&self, task: Task, state: &WorldState) -> bool {
        let goal = &state.goal;
        match task {
            Task::Stage { object, .. } => {
                let Some(o) = state.object(object) else { return true };
                self.staged_at(state, o.pose.position()) || object_at_target(state, goal, object)
            }
            Task::Rotate { object } => {
                let (Some(o), Some(t)) = (state.object(object), goal.per_object_target.get(&object)) else {
                    return true;
                };
                let own = self
                    .plan
                    .as_ref()
                    .and_then(|p| p.rotation_targets.get(&object))
                    .is_some_and(|&r| angle_error(o.pose.theta, r) < SUCCESS_ROT_TOL);
                own || angle_error(o.pose.theta, t.theta) <= SUCCESS_ROT_TOL || object_at_target(state, goal, object)
            }
            Task::PickPlace { object } => object_at_target(state, goal, object),
        }
    }

    /// Next push toward the staging spot. Searches sequences of up to three
    /// straight legs along the object's local axes that stay clear of the bin
    /// and the border and end staged, and returns the first leg of the
    /// cheapest one. The commanded target overshoots the leg by the success
    /// tolerance so the skill ends where the leg does.
    fn stage_leg(&self, state: &WorldState, id: u32, arm: Arm, spot: Vec2) -> SkillParams {
        let mut best: Option<(f64, Vec2)> = None;
        let mut s = state.clone();
        self.search_legs(&mut s, id, arm, spot, 0, 0.0, None, &mut best);
        match best {
            Some((_, target)) => SkillParams::push(id, target),
            None => SkillParams::push(id, spot),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn search_legs(
        &self,
        s: &mut WorldState,
        id: u32,
        arm: Arm,
        spot: Vec2,
        depth: usize,
        cost: f64,
        first: Option<Vec2>,
        best: &mut Option<(f64, Vec2)>,
    ) {
        const MAX_LEGS: usize = 3;
        const LEG_COST: f64 = 0.08;
        let o = s.object(id).expect("staged object exists").clone();
        let c = o.pose.position();
        if depth > 0 && self.staged_at(s, c) {
            let total = cost + c.dist(spot);
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                *best = Some((total, first.expect("at least one leg")));
            }
            return;
        }
        if depth == MAX_LEGS {
            return;
        }
        let e = o.pose.local_dir(spot - c);
        for axis in 0..2 {
            let ea = if axis == 0 { e.x } else { e.y };
            let mut lengths = vec![0.05, -0.05, 0.1, -0.1, 0.15, -0.15, 0.2, -0.2];
            if ea.abs() >= 0.02 {
                lengths.push(ea.signum() * ea.abs().min(self.cfg.max_leg));
            }
            for d in lengths {
                let cost = cost + d.abs() + LEG_COST;
                if best.as_ref().is_some_and(|(b, _)| cost >= *b) {
                    continue;
                }
                let unit = if axis == 0 { Vec2::new(1.0, 0.0) } else { Vec2::new(0.0, 1.0) };
                let dir = o.pose.world_dir(unit);
                let overshoot = c + dir * (d + d.signum() * SUCCESS_POS_TOL * 0.9);
                let ok = reaches_with_margin(s, arm, c + dir * d, 0.005)
                    && reaches_with_margin(s, arm, overshoot, 0.0)
                    && self.world.workspace.contains(overshoot)
                    && push_leg_clear(&self.world, s, &self.skills, id, ArmSet::single(arm), axis, d);
                if !ok {
                    continue;
                }
                let idx = s.objects.iter().position(|q| q.id == id).expect("object index");
                let saved = s.objects[idx].pose;
                let end = c + dir * d;
                s.objects[idx].pose.x = end.x;
                s.objects[idx].pose.y = end.y;
                self.search_legs(s, id, arm, spot, depth + 1, cost, Some(first.unwrap_or(overshoot)), best);
                s.objects[idx].pose = saved;
            }
        }
    }

    fn staged_at(&self, state: &WorldState, c: Vec2) -> bool {
        Arm::BOTH
            .iter()
            .all(|&a| reaches_with_margin(state, a, c, self.cfg.staged_margin))
    }

    fn choice_for(&self, task: Task, state: &WorldState) -> Choice {
        let plan = self.plan.as_ref().expect("plan built at episode start");
        match task {
            Task::Stage { object, arm } => {
                let spot = plan.staging[&object];
                Choice::new(SkillId::PushSingle, self.stage_leg(state, object, arm, spot))
            }
            Task::Rotate { object } => Choice::new(
                SkillId::RotateBimanual,
                SkillParams::rotate(object, plan.rotation_targets[&object]),
            ),
            Task::PickPlace { object } => Choice::new(
                SkillId::PickPlaceBimanual,
                SkillParams::pick_place(object, state.goal.per_object_target[&object]),
            ),
        }
    }
}

impl HighLevelPolicy for ExpertPolicy {
    fn begin_episode(&mut self, state0: &WorldState) {
        self.plan = plan(state0, &self.cfg, self.seed).ok();
        self.cursor = PerArm::default();
    }

    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        let mut out = PerArm::default();
        let Some(plan) = self.plan.clone() else {
            for a in Arm::BOTH {
                if ctx.free[a] {
                    out[a] = Some(Choice::wait());
                }
            }
            return out;
        };
        for a in Arm::BOTH {
            self.cursor[a] = plan.tracks[a]
                .iter()
                .position(|item| !self.done(item.task(), ctx.state))
                .unwrap_or(plan.tracks[a].len());
        }
        let next = PerArm::from_fn(|a| plan.tracks[a].get(self.cursor[a]).copied());
        for a in Arm::BOTH {
            if !ctx.free[a] {
                continue;
            }
            out[a] = Some(match next[a] {
                Some(PlanItem::Solo(task)) => self.choice_for(task, ctx.state),
                Some(PlanItem::Rendezvous { marker, task }) => {
                    let partner_ready = ctx.free[a.other()]
                        && matches!(next[a.other()], Some(PlanItem::Rendezvous { marker: m, .. }) if m == marker);
                    if partner_ready {
                        self.choice_for(task, ctx.state)
                    } else {
                        Choice::wait()
                    }
                }
                None => Choice::wait(),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{run_episode, ExecConfig};
    use crate::world::reset;

    fn spec(name: &str) -> ScenarioSpec {
        ScenarioSpec::builtin(name).unwrap()
    }

    #[test]
    fn object_at_target_gives_empty_plan() {
        let sp = spec("one_object");
        let mut s = reset(&sp, 2).unwrap();
        s.objects[0].pose = s.goal.per_object_target[&0];
        let p = plan(&s, &ExpertConfig::for_scenario(&sp), 2).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn one_sided_object_starts_with_push_on_that_arm() {
        let sp = spec("one_object");
        let mut seen = 0;
        for seed in 0..40 {
            let s = reset(&sp, seed).unwrap();
            let c = s.objects[0].pose.position();
            let reach = PerArm::from_fn(|a| reach_check(&s.arms[a], c));
            if reach.left == reach.right {
                continue;
            }
            seen += 1;
            let arm = if reach.left { Arm::Left } else { Arm::Right };
            let p = plan(&s, &ExpertConfig::for_scenario(&sp), seed).unwrap();
            assert!(matches!(p.tracks[arm][0], PlanItem::Solo(Task::Stage { object: 0, .. })));
            assert!(matches!(p.tracks[arm.other()][0], PlanItem::Rendezvous { .. }));

            let cfg = ExecConfig::for_scenario(&sp, SkillConfig::default());
            let mut pol = ExpertPolicy::for_scenario(&sp, SkillConfig::default(), seed);
            let t = run_episode(&mut pol, &s, &cfg);
            let first = t.decisions[0].chosen;
            assert_eq!(first[arm].unwrap().skill, SkillId::PushSingle);
            assert_eq!(first[arm.other()].unwrap().skill, SkillId::Wait);
        }
        assert!(seen > 10);
    }

    #[test]
    fn two_sided_layout_pushes_in_parallel() {
        let sp = spec("two_objects");
        let seed = (0..50)
            .find(|&seed| {
                let s = reset(&sp, seed).unwrap();
                plan(&s, &ExpertConfig::for_scenario(&sp), seed).unwrap().shape(2).staging_arms == 2
            })
            .expect("a parallel-push layout");
        let s = reset(&sp, seed).unwrap();
        let cfg = ExecConfig::for_scenario(&sp, SkillConfig::default());
        let mut pol = ExpertPolicy::for_scenario(&sp, SkillConfig::default(), seed);
        let t = run_episode(&mut pol, &s, &cfg);
        let first = t.decisions[0].chosen;
        let (l, r) = (first.left.unwrap(), first.right.unwrap());
        assert_eq!((l.skill, r.skill), (SkillId::PushSingle, SkillId::PushSingle));
        assert_ne!(l.params.object_id, r.params.object_id);
        assert!(t.timeline.parallel_overlaps() > 0);
    }

    #[test]
    fn rendezvous_markers_match_across_tracks() {
        let sp = spec("two_objects");
        for seed in 0..30 {
            let s = reset(&sp, seed).unwrap();
            let p = plan(&s, &ExpertConfig::for_scenario(&sp), seed).unwrap();
            let markers = |a: Arm| {
                p.tracks[a]
                    .iter()
                    .filter_map(|i| match i {
                        PlanItem::Rendezvous { marker, task } => Some((*marker, *task)),
                        _ => None,
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(markers(Arm::Left), markers(Arm::Right));
        }
    }
}
