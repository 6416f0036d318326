//! Parameterized primitive skills: feedback controllers, feasibility
//! prechecks and termination predicates.

mod controllers;
pub mod nav;
pub mod nominal;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{angle_error, Pose2, Vec2};
use crate::world::{Arm, ArmCommand, PerArm, WorldConfig, WorldState, SUCCESS_POS_TOL, SUCCESS_ROT_TOL};
use crate::{Error, Result};

pub use controllers::{control, push_leg_clear, push_waypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkillId {
    PushSingle,
    RotateSingle,
    PushBimanual,
    RotateBimanual,
    PickPlaceBimanual,
    Wait,
}

pub const N_SKILLS: usize = 6;

impl SkillId {
    pub const ALL: [SkillId; N_SKILLS] = [
        SkillId::PushSingle,
        SkillId::RotateSingle,
        SkillId::PushBimanual,
        SkillId::RotateBimanual,
        SkillId::PickPlaceBimanual,
        SkillId::Wait,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SkillId> {
        Self::ALL.get(i).copied()
    }

    pub fn is_bimanual(self) -> bool {
        matches!(
            self,
            SkillId::PushBimanual | SkillId::RotateBimanual | SkillId::PickPlaceBimanual
        )
    }

    pub fn arity(self) -> usize {
        if self.is_bimanual() {
            2
        } else {
            1
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillId::PushSingle => "push_single",
            SkillId::RotateSingle => "rotate_single",
            SkillId::PushBimanual => "push_bimanual",
            SkillId::RotateBimanual => "rotate_bimanual",
            SkillId::PickPlaceBimanual => "pick_place_bimanual",
            SkillId::Wait => "wait",
        }
    }

    /// Human-readable parameter schema.
    pub fn schema(self) -> &'static str {
        match self {
            SkillId::PushSingle | SkillId::PushBimanual => "object_id, target_position",
            SkillId::RotateSingle | SkillId::RotateBimanual => "object_id, target_rotation",
            SkillId::PickPlaceBimanual => "object_id, target_pose",
            SkillId::Wait => "-",
        }
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SkillId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownSkill(s.to_string()))
    }
}

/// Goal parameters of a skill. Exactly the fields required by the skill
/// are present.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SkillParams {
    pub target_position: Option<Vec2>,
    pub target_rotation: Option<f64>,
    pub target_pose: Option<Pose2>,
    pub object_id: u32,
}

impl SkillParams {
    pub fn push(object_id: u32, target: Vec2) -> Self {
        Self {
            target_position: Some(target),
            object_id,
            ..Self::default()
        }
    }

    pub fn rotate(object_id: u32, theta: f64) -> Self {
        Self {
            target_rotation: Some(theta),
            object_id,
            ..Self::default()
        }
    }

    pub fn pick_place(object_id: u32, pose: Pose2) -> Self {
        Self {
            target_pose: Some(pose),
            object_id,
            ..Self::default()
        }
    }

    pub fn wait() -> Self {
        Self::default()
    }

    pub fn valid_for(&self, skill: SkillId) -> bool {
        let shape = (
            self.target_position.is_some(),
            self.target_rotation.is_some(),
            self.target_pose.is_some(),
        );
        let finite = self.target_position.is_none_or(|p| p.is_finite())
            && self.target_rotation.is_none_or(f64::is_finite)
            && self.target_pose.is_none_or(|p| p.is_finite());
        finite
            && match skill {
                SkillId::PushSingle | SkillId::PushBimanual => shape == (true, false, false),
                SkillId::RotateSingle | SkillId::RotateBimanual => shape == (false, true, false),
                SkillId::PickPlaceBimanual => shape == (false, false, true),
                SkillId::Wait => shape == (false, false, false),
            }
    }

    pub fn goal_position(&self) -> Option<Vec2> {
        self.target_position.or(self.target_pose.map(|p| p.position()))
    }

    pub fn goal_rotation(&self) -> Option<f64> {
        self.target_rotation.or(self.target_pose.map(|p| p.theta))
    }

    /// Whether the object meets every goal field present, at the task
    /// success thresholds. Parameterless goals are never met.
    pub fn goal_met(&self, state: &WorldState) -> bool {
        let Some(obj) = state.object(self.object_id) else {
            return false;
        };
        let pos = self.goal_position();
        let rot = self.goal_rotation();
        if pos.is_none() && rot.is_none() {
            return false;
        }
        pos.is_none_or(|p| obj.pose.position().dist(p) < SUCCESS_POS_TOL)
            && rot.is_none_or(|t| angle_error(obj.pose.theta, t) < SUCCESS_ROT_TOL)
    }
}

/// Arms bound to a skill instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArmSet {
    Left,
    Right,
    Both,
}

impl ArmSet {
    pub fn single(arm: Arm) -> Self {
        match arm {
            Arm::Left => ArmSet::Left,
            Arm::Right => ArmSet::Right,
        }
    }

    pub fn contains(self, arm: Arm) -> bool {
        matches!(
            (self, arm),
            (ArmSet::Both, _) | (ArmSet::Left, Arm::Left) | (ArmSet::Right, Arm::Right)
        )
    }

    pub fn arms(self) -> &'static [Arm] {
        match self {
            ArmSet::Left => &[Arm::Left],
            ArmSet::Right => &[Arm::Right],
            ArmSet::Both => &Arm::BOTH,
        }
    }

    pub fn len(self) -> usize {
        self.arms().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillStatus {
    Running,
    Succeeded,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillConfig {
    /// Budget of single-arm skills, seconds.
    pub single_budget: f64,
    /// Budget of bimanual skills, seconds.
    pub bimanual_budget: f64,
    /// Wait lasts until the next multiple of this period, seconds.
    pub wait_grid: f64,
    /// Stand-off from a face before pushing.
    pub approach_gap: f64,
    /// Stand-off from a face when grasping.
    pub grasp_gap: f64,
    pub push_gain: f64,
    pub push_min_speed: f64,
    pub lateral_gain: f64,
    /// Contact offset of single-arm rotation, fraction of the face half-length.
    pub rotate_offset: f64,
    /// Contact offsets of the two pushers, fraction of the face half-length.
    pub bimanual_push_offset: f64,
    pub rotate_gain: f64,
    pub rotate_min_speed: f64,
    pub carry_gain: f64,
    pub turn_gain: f64,
    pub nav_node_margin: f64,
    pub nav_segment_margin: f64,
}

impl Default for SkillConfig {
    fn default() -> Self {
        Self {
            single_budget: 3.0,
            bimanual_budget: 4.0,
            wait_grid: 0.25,
            approach_gap: 0.015,
            grasp_gap: 0.01,
            push_gain: 6.0,
            push_min_speed: 0.1,
            lateral_gain: 4.0,
            rotate_offset: 0.7,
            bimanual_push_offset: 0.5,
            rotate_gain: 0.25,
            rotate_min_speed: 0.04,
            carry_gain: 5.0,
            turn_gain: 4.0,
            nav_node_margin: 0.03,
            nav_segment_margin: 0.012,
        }
    }
}

impl SkillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.single_budget > 0.0 && self.bimanual_budget > 0.0 && self.wait_grid > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("skill budgets must be positive".into()))
        }
    }

    pub(crate) fn nav(&self) -> nav::NavParams {
        nav::NavParams {
            node_margin: self.nav_node_margin,
            segment_margin: self.nav_segment_margin,
        }
    }
}

/// A dispatched skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillInstance {
    pub id: SkillId,
    pub arms: ArmSet,
    pub params: SkillParams,
    pub status: SkillStatus,
    pub started_at: f64,
    pub start_step: u64,
    /// Seconds.
    pub budget: f64,
    pub budget_steps: u64,
    /// Dispatch order within the episode.
    pub seq: u64,
}

impl SkillInstance {
    pub fn new(
        id: SkillId,
        arms: ArmSet,
        params: SkillParams,
        start_step: u64,
        seq: u64,
        world: &WorldConfig,
        cfg: &SkillConfig,
    ) -> Self {
        let budget_steps = match id {
            SkillId::Wait => {
                let grid = world.steps(cfg.wait_grid).max(1);
                (start_step / grid + 1) * grid - start_step
            }
            k if k.is_bimanual() => world.steps(cfg.bimanual_budget),
            _ => world.steps(cfg.single_budget),
        };
        Self {
            id,
            arms,
            params,
            status: SkillStatus::Running,
            started_at: world.time_of(start_step),
            start_step,
            budget: world.time_of(budget_steps),
            budget_steps,
            seq,
        }
    }
}

/// Registry row for listings.
pub struct SkillInfo {
    pub id: SkillId,
    pub arity: usize,
    pub schema: &'static str,
}

pub fn registry() -> Vec<SkillInfo> {
    SkillId::ALL
        .into_iter()
        .map(|id| SkillInfo {
            id,
            arity: id.arity(),
            schema: id.schema(),
        })
        .collect()
}

/// Whether `arms` can execute `skill` with `params` from `state`: the acting
/// arms reach the object and the target.
pub fn feasible(skill: SkillId, params: &SkillParams, arms: ArmSet, state: &WorldState) -> bool {
    if !params.valid_for(skill) || arms.len() != skill.arity() {
        return false;
    }
    if skill == SkillId::Wait {
        return true;
    }
    let Some(obj) = state.object(params.object_id) else {
        return false;
    };
    let reach_all = |p: Vec2| arms.arms().iter().all(|&a| crate::world::reach_check(&state.arms[a], p));
    if !reach_all(obj.pose.position()) {
        return false;
    }
    match params.goal_position() {
        Some(p) => reach_all(p),
        None => true,
    }
}

/// Status of a running skill in `state`: success first, then timeout, then
/// failure.
pub fn terminated(skill: &SkillInstance, state: &WorldState, world: &WorldConfig) -> SkillStatus {
    let elapsed = state.step_count.saturating_sub(skill.start_step);
    if skill.id == SkillId::Wait {
        return if elapsed >= skill.budget_steps {
            SkillStatus::TimedOut
        } else {
            SkillStatus::Running
        };
    }
    // Pick-and-place ends with the object set down, not in the grippers.
    let placed = skill.id != SkillId::PickPlaceBimanual || !state.is_held(skill.params.object_id);
    if placed && skill.params.goal_met(state) {
        return SkillStatus::Succeeded;
    }
    if elapsed > skill.budget_steps {
        return SkillStatus::TimedOut;
    }
    let failed = match state.object(skill.params.object_id) {
        None => true,
        Some(o) => {
            !o.rect().inside_aabb(&world.workspace)
                || !skill
                    .arms
                    .arms()
                    .iter()
                    .any(|&a| crate::world::reach_check(&state.arms[a], o.pose.position()))
        }
    };
    if failed {
        SkillStatus::Failed
    } else {
        SkillStatus::Running
    }
}

/// Zero command for every arm.
pub fn idle() -> PerArm<ArmCommand> {
    PerArm::new(ArmCommand::zero(), ArmCommand::zero())
}
