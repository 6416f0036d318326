//! Deterministic planar two-arm tabletop simulator.
//!
//! End-effectors are points moving under velocity commands inside their reach
//! disks. Objects are oriented rectangles that move only when pushed
//! (quasi-statically, no momentum) or when held.

mod physics;
mod scenario;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::geometry::{angle_error, Aabb, Pose2, Rect, Vec2};

pub use physics::{bin_status, face_in_zone, step, BinStatus, Face};
pub use scenario::{reset, reset_named, ScenarioSpec, BUILTIN_SCENARIOS};

/// Position threshold for object pose success, meters.
pub const SUCCESS_POS_TOL: f64 = 0.05;
/// Rotation threshold for object pose success, radians.
pub const SUCCESS_ROT_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    pub fn other(self) -> Arm {
        match self {
            Arm::Left => Arm::Right,
            Arm::Right => Arm::Left,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Arm::Left => "L",
            Arm::Right => "R",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Left => "left",
            Arm::Right => "right",
        })
    }
}

/// One value per arm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerArm<T> {
    pub left: T,
    pub right: T,
}

impl<T> PerArm<T> {
    pub fn new(left: T, right: T) -> Self {
        Self { left, right }
    }

    pub fn from_fn(mut f: impl FnMut(Arm) -> T) -> Self {
        Self {
            left: f(Arm::Left),
            right: f(Arm::Right),
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> PerArm<U> {
        PerArm {
            left: f(self.left),
            right: f(self.right),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Arm, &T)> {
        [(Arm::Left, &self.left), (Arm::Right, &self.right)].into_iter()
    }
}

impl<T> Index<Arm> for PerArm<T> {
    type Output = T;
    fn index(&self, arm: Arm) -> &T {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }
}

impl<T> IndexMut<Arm> for PerArm<T> {
    fn index_mut(&mut self, arm: Arm) -> &mut T {
        match arm {
            Arm::Left => &mut self.left,
            Arm::Right => &mut self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist2 {
    pub linear: Vec2,
    pub angular: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub side: Arm,
    pub ee: Pose2,
    pub ee_velocity: Twist2,
    pub base: Vec2,
    pub reach_radius: f64,
    pub holding: Option<u32>,
}

impl ArmState {
    pub fn position(&self) -> Vec2 {
        self.ee.position()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub pose: Pose2,
    pub half_extents: Vec2,
    /// Needs both arms to lift or carry.
    pub bulky: bool,
}

impl ObjectState {
    pub fn rect(&self) -> Rect {
        Rect::new(self.pose, self.half_extents)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGoal {
    pub bin_region: Aabb,
    pub per_object_target: BTreeMap<u32, Pose2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub arms: PerArm<ArmState>,
    pub objects: Vec<ObjectState>,
    pub goal: TaskGoal,
    pub time: f64,
    pub rng_seed: u64,
    pub step_count: u64,
}

impl WorldState {
    pub fn arm(&self, arm: Arm) -> &ArmState {
        &self.arms[arm]
    }

    pub fn object(&self, id: u32) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Object carried by both arms, if any.
    pub fn lifted_object(&self) -> Option<u32> {
        match (self.arms.left.holding, self.arms.right.holding) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        }
    }

    pub fn is_held(&self, id: u32) -> bool {
        self.arms.left.holding == Some(id) || self.arms.right.holding == Some(id)
    }

    /// Snapshot as JSON; field order follows the struct declarations.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world state serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Grip {
    #[default]
    Free,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmCommand {
    pub linear: Vec2,
    pub angular: f64,
    pub grip: Grip,
}

impl ArmCommand {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn velocity(linear: Vec2) -> Self {
        Self {
            linear,
            ..Self::default()
        }
    }

    pub fn hold(linear: Vec2) -> Self {
        Self {
            linear,
            angular: 0.0,
            grip: Grip::Hold,
        }
    }

    /// Applies the speed limits of `cfg`.
    pub fn clamped(self, cfg: &WorldConfig) -> Self {
        let linear = if self.linear.is_finite() {
            self.linear.clamp_norm(cfg.v_max)
        } else {
            Vec2::ZERO
        };
        let angular = if self.angular.is_finite() {
            self.angular.clamp(-cfg.omega_max, cfg.omega_max)
        } else {
            0.0
        };
        Self {
            linear,
            angular,
            grip: self.grip,
        }
    }
}

/// Fixed physical parameters of the tabletop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub workspace: Aabb,
    pub bases: PerArm<Vec2>,
    pub homes: PerArm<Vec2>,
    pub reach_radius: f64,
    /// Max end-effector speed, m/s.
    pub v_max: f64,
    /// Max end-effector angular rate, rad/s.
    pub omega_max: f64,
    pub dt: f64,
    /// Distance from a face within which an end-effector pushes it.
    pub contact_band: f64,
    /// Distance from a face within which a Hold grip takes effect.
    pub hold_zone: f64,
    /// Largest tolerated object-object overlap when accepting a motion.
    pub penetration_tol: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            workspace: Aabb::new(Vec2::new(0.0, 0.0), Vec2::new(1.2, 0.8)),
            bases: PerArm::new(Vec2::new(0.25, 0.05), Vec2::new(0.95, 0.05)),
            homes: PerArm::new(Vec2::new(0.18, 0.16), Vec2::new(1.02, 0.16)),
            reach_radius: 0.55,
            v_max: 0.25,
            omega_max: 1.5,
            dt: 0.05,
            contact_band: 0.01,
            hold_zone: 0.02,
            penetration_tol: 1e-4,
        }
    }
}

impl WorldConfig {
    /// Steps in `seconds`, rounded to the nearest whole step.
    pub fn steps(&self, seconds: f64) -> u64 {
        (seconds / self.dt).round().max(0.0) as u64
    }

    pub fn time_of(&self, step_count: u64) -> f64 {
        step_count as f64 * self.dt
    }

    pub fn reaches(&self, arm: Arm, p: Vec2) -> bool {
        p.dist(self.bases[arm]) <= self.reach_radius
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.dt > 0.0
            && self.v_max > 0.0
            && self.omega_max > 0.0
            && self.reach_radius > 0.0
            && self.contact_band > 0.0
            && self.hold_zone > 0.0
            && self.workspace.max.x > self.workspace.min.x
            && self.workspace.max.y > self.workspace.min.y;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config("world parameters must be positive".into()))
        }
    }
}

/// Inclusive reach test: `|point - base| <= reach_radius`.
pub fn reach_check(arm: &ArmState, point: Vec2) -> bool {
    point.dist(arm.base) <= arm.reach_radius
}

/// Position and wrapped rotation error of `pose` against `target`.
pub fn pose_errors(pose: &Pose2, target: &Pose2) -> (f64, f64) {
    (
        pose.position().dist(target.position()),
        angle_error(pose.theta, target.theta),
    )
}

pub fn pose_within_tolerance(pose: &Pose2, target: &Pose2) -> bool {
    let (dp, dr) = pose_errors(pose, target);
    dp < SUCCESS_POS_TOL && dr < SUCCESS_ROT_TOL
}

/// Task success: every object within 0.05 m and 0.1 rad of its target pose.
pub fn success_check(state: &WorldState, goal: &TaskGoal) -> bool {
    state.objects.iter().all(|o| {
        goal.per_object_target
            .get(&o.id)
            .is_some_and(|t| pose_within_tolerance(&o.pose, t))
    })
}

/// Per-object success, used by stage ladders.
pub fn object_at_target(state: &WorldState, goal: &TaskGoal, id: u32) -> bool {
    match (state.object(id), goal.per_object_target.get(&id)) {
        (Some(o), Some(t)) => pose_within_tolerance(&o.pose, t),
        _ => false,
    }
}
