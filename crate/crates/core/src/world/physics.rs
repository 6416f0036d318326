//! One fixed-timestep update of the tabletop.
//!
//! Order within a step: grip changes, end-effector kinematics (clipped to the
//! reach disk and workspace), carried objects, pushes, end-effector
//! de-penetration, bookkeeping. Objects are processed in index order so the
//! update is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use super::{Arm, ArmCommand, Grip, ObjectState, PerArm, Twist2, WorldConfig, WorldState};
use crate::geometry::{wrap_angle, Aabb, Pose2, Rect, Vec2};

/// Allowed slack inside a face when testing contact/hold zones.
const FACE_SLACK: f64 = 0.003;
const BISECTION_STEPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinStatus {
    Outside,
    Inside,
    Straddling,
}

/// Where a rectangle sits relative to the bin walls. Objects resting on the
/// table can never change this; only a two-arm carry crosses the walls.
pub fn bin_status(rect: &Rect, bin: &Aabb) -> BinStatus {
    if rect.inside_aabb(bin) {
        BinStatus::Inside
    } else if rect.penetration(&bin.as_rect()) <= 0.0 {
        BinStatus::Outside
    } else {
        BinStatus::Straddling
    }
}

/// One of the four faces of an object, in the object's frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    /// 0 for the local x axis, 1 for y.
    pub axis: usize,
    /// +1 or -1.
    pub sign: i8,
}

impl Face {
    pub const ALL: [Face; 4] = [
        Face { axis: 0, sign: 1 },
        Face { axis: 1, sign: 1 },
        Face { axis: 0, sign: -1 },
        Face { axis: 1, sign: -1 },
    ];

    pub fn new(axis: usize, sign: i8) -> Self {
        Self { axis, sign }
    }

    /// Outward normal, local frame.
    pub fn normal(self) -> Vec2 {
        let s = self.sign as f64;
        if self.axis == 0 {
            Vec2::new(s, 0.0)
        } else {
            Vec2::new(0.0, s)
        }
    }

    pub fn tangent(self) -> Vec2 {
        if self.axis == 0 {
            Vec2::new(0.0, 1.0)
        } else {
            Vec2::new(1.0, 0.0)
        }
    }

    pub fn opposite(self) -> Face {
        Face::new(self.axis, -self.sign)
    }

    pub fn half_normal(self, half: Vec2) -> f64 {
        if self.axis == 0 {
            half.x
        } else {
            half.y
        }
    }

    pub fn half_tangent(self, half: Vec2) -> f64 {
        if self.axis == 0 {
            half.y
        } else {
            half.x
        }
    }

    /// Signed distance of local point `q` outside this face's plane.
    pub fn gap(self, half: Vec2, q: Vec2) -> f64 {
        q.dot(self.normal()) - self.half_normal(half)
    }

    /// Whether `q` projects onto the face segment.
    pub fn covers(self, half: Vec2, q: Vec2) -> bool {
        q.dot(self.tangent()).abs() <= self.half_tangent(half) + 1e-9
    }
}

/// Face whose zone (gap in `[-slack, zone]`) contains the world point `p`.
pub fn face_in_zone(obj: &ObjectState, p: Vec2, zone: f64) -> Option<Face> {
    let q = obj.pose.to_local(p);
    let h = obj.half_extents;
    Face::ALL
        .into_iter()
        .filter(|f| {
            let g = f.gap(h, q);
            (-FACE_SLACK..=zone).contains(&g) && f.covers(h, q)
        })
        .max_by(|a, b| a.gap(h, q).total_cmp(&b.gap(h, q)))
}

/// Squared radius of gyration used by the quasi-static push model.
fn gyration_sq(half: Vec2) -> f64 {
    (half.x * half.x + half.y * half.y) / 3.0
}

/// Object displacement (local frame) and rotation produced by a contact
/// pushing `into` meters this step at local contact point `c` with inward
/// normal `u`. A push through the center translates by exactly `into`.
fn push_increment(half: Vec2, c: Vec2, u: Vec2, into: f64) -> (Vec2, f64) {
    let rho2 = gyration_sq(half);
    let m = c.cross(u);
    let k = into / (1.0 + m * m / rho2);
    (u * k, k * m / rho2)
}

fn push_contact(obj: &ObjectState, p: Vec2, disp: Vec2, band: f64) -> Option<(Vec2, Vec2, f64)> {
    let face = face_in_zone(obj, p, band)?;
    let h = obj.half_extents;
    let q = obj.pose.to_local(p);
    let d = obj.pose.local_dir(disp);
    let n = face.normal();
    let into = -d.dot(n);
    if into <= 0.0 {
        return None;
    }
    let ht = face.half_tangent(h);
    let c = n * face.half_normal(h) + face.tangent() * q.dot(face.tangent()).clamp(-ht, ht);
    Some((c, -n, into))
}

pub(crate) fn limit_position(cfg: &WorldConfig, arm: Arm, p: Vec2) -> Vec2 {
    let base = cfg.bases[arm];
    let d = p.dist(base);
    let p = if d > cfg.reach_radius {
        base + (p - base) * (cfg.reach_radius / d)
    } else {
        p
    };
    cfg.workspace.clamp(p)
}

fn update_grips(cfg: &WorldConfig, s: &mut WorldState, cmds: &PerArm<ArmCommand>) {
    for arm in Arm::BOTH {
        if cmds[arm].grip == Grip::Free {
            s.arms[arm].holding = None;
        }
    }
    for arm in Arm::BOTH {
        if let Some(id) = s.arms[arm].holding {
            let bulky = s.object(id).map(|o| o.bulky).unwrap_or(true);
            if bulky && s.arms[arm.other()].holding != Some(id) {
                s.arms[arm].holding = None;
            }
        }
    }

    let wants = PerArm::from_fn(|a| cmds[a].grip == Grip::Hold && s.arms[a].holding.is_none());
    if wants.left && wants.right {
        let pl = s.arms.left.position();
        let pr = s.arms.right.position();
        let grasp = s.objects.iter().find_map(|o| {
            if s.is_held(o.id) {
                return None;
            }
            let fl = face_in_zone(o, pl, cfg.hold_zone)?;
            let fr = face_in_zone(o, pr, cfg.hold_zone)?;
            (fl.opposite() == fr).then_some(o.id)
        });
        if let Some(id) = grasp {
            s.arms.left.holding = Some(id);
            s.arms.right.holding = Some(id);
        }
    }
    for arm in Arm::BOTH {
        if !wants[arm] || s.arms[arm].holding.is_some() {
            continue;
        }
        let p = s.arms[arm].position();
        let single = s
            .objects
            .iter()
            .find(|o| !o.bulky && !s.is_held(o.id) && face_in_zone(o, p, cfg.hold_zone).is_some())
            .map(|o| o.id);
        s.arms[arm].holding = single;
    }
}

/// Whether object `idx` may occupy `pose`. `participants` are arms allowed to
/// be inside or against it (its pushers or holders).
fn pose_allowed(
    cfg: &WorldConfig,
    s: &WorldState,
    idx: usize,
    pose: Pose2,
    lifted: bool,
    participants: PerArm<bool>,
) -> bool {
    let obj = &s.objects[idx];
    let rect = Rect::new(pose, obj.half_extents);
    if !pose.is_finite() || !rect.inside_aabb(&cfg.workspace) {
        return false;
    }
    for (j, other) in s.objects.iter().enumerate() {
        if j != idx && rect.penetration(&other.rect()) > cfg.penetration_tol {
            return false;
        }
    }
    if !lifted && bin_status(&rect, &s.goal.bin_region) != bin_status(&obj.rect(), &s.goal.bin_region) {
        return false;
    }
    let current = obj.rect();
    for arm in Arm::BOTH {
        if participants[arm] {
            continue;
        }
        let p = s.arms[arm].position();
        if rect.point_depth(p) > 1e-9 && current.point_depth(p) <= 1e-9 {
            return false;
        }
    }
    true
}

fn carried_pose(obj: &Pose2, before: PerArm<Vec2>, after: PerArm<Vec2>) -> Pose2 {
    let turn = wrap_angle((after.right - after.left).angle() - (before.right - before.left).angle());
    let mid0 = (before.left + before.right) * 0.5;
    let mid1 = (after.left + after.right) * 0.5;
    let c = mid1 + (obj.position() - mid0).rotate(turn);
    Pose2::from_parts(c, obj.theta + turn)
}

fn project_out(obj: &ObjectState, p: Vec2) -> Vec2 {
    let mut q = obj.pose.to_local(p);
    let h = obj.half_extents;
    let sx = if q.x >= 0.0 { 1.0 } else { -1.0 };
    let sy = if q.y >= 0.0 { 1.0 } else { -1.0 };
    if h.x - q.x.abs() < h.y - q.y.abs() {
        q.x = h.x * sx;
    } else {
        q.y = h.y * sy;
    }
    obj.pose.to_world(q)
}

/// Advances `state` by one timestep of `cfg.dt` under `commands`.
///
/// Infeasible motion is clipped, never rejected: end-effectors stop at their
/// reach boundary, objects stop where they would overlap another object, leave
/// the workspace, cross a bin wall while resting on the table, or engulf an
/// end-effector that is not pushing them.
pub fn step(cfg: &WorldConfig, state: &WorldState, commands: &PerArm<ArmCommand>) -> WorldState {
    let dt = cfg.dt;
    let cmds = commands.map(|c| c.clamped(cfg));
    let mut s = state.clone();
    update_grips(cfg, &mut s, &cmds);

    let start = PerArm::from_fn(|a| state.arms[a].ee);
    let wanted = PerArm::from_fn(|a| start[a].position() + cmds[a].linear * dt);
    let mut target = PerArm::from_fn(|a| {
        Pose2::from_parts(limit_position(cfg, a, wanted[a]), start[a].theta + cmds[a].angular * dt)
    });
    let clipped = PerArm::from_fn(|a| (target[a].position() - wanted[a]).norm() > 1e-12);

    // Carried objects follow the holding end-effectors rigidly.
    if let Some(id) = s.lifted_object() {
        let idx = s.objects.iter().position(|o| o.id == id).expect("held object exists");
        let before = start.map(|p| p.position());
        let after = target.map(|p| p.position());
        let pose = carried_pose(&s.objects[idx].pose, before, after);
        let ok = !clipped.left
            && !clipped.right
            && pose_allowed(cfg, &s, idx, pose, true, PerArm::new(true, true));
        if ok {
            s.objects[idx].pose = pose;
        } else {
            target = start;
        }
    } else {
        for arm in Arm::BOTH {
            let Some(id) = s.arms[arm].holding else { continue };
            let idx = s.objects.iter().position(|o| o.id == id).expect("held object exists");
            let turn = wrap_angle(target[arm].theta - start[arm].theta);
            let obj = s.objects[idx].pose;
            let c = target[arm].position() + (obj.position() - start[arm].position()).rotate(turn);
            let pose = Pose2::from_parts(c, obj.theta + turn);
            let mut who = PerArm::new(false, false);
            who[arm] = true;
            if !clipped[arm] && pose_allowed(cfg, &s, idx, pose, false, who) {
                s.objects[idx].pose = pose;
            } else {
                target[arm] = start[arm];
            }
        }
    }

    for arm in Arm::BOTH {
        s.arms[arm].ee = target[arm];
    }

    // Pushing by free end-effectors.
    let disp = PerArm::from_fn(|a| target[a].position() - start[a].position());
    let free = PerArm::from_fn(|a| s.arms[a].holding.is_none() && disp[a].norm_sq() > 0.0);
    for idx in 0..s.objects.len() {
        let id = s.objects[idx].id;
        if s.is_held(id) {
            continue;
        }
        let mut participants = PerArm::new(false, false);
        let mut sum = Vec2::ZERO;
        let mut turn = 0.0;
        let mut n = 0usize;
        for arm in Arm::BOTH {
            if !free[arm] {
                continue;
            }
            let obj = &s.objects[idx];
            if let Some((c, u, into)) = push_contact(obj, start[arm].position(), disp[arm], cfg.contact_band) {
                let (dl, dth) = push_increment(obj.half_extents, c, u, into);
                sum += dl;
                turn += dth;
                n += 1;
                participants[arm] = true;
            }
        }
        if n == 0 {
            continue;
        }
        let obj = s.objects[idx].pose;
        let dl = obj.world_dir(sum * (1.0 / n as f64));
        let dth = turn / n as f64;
        let propose = |alpha: f64| Pose2::from_parts(obj.position() + dl * alpha, obj.theta + dth * alpha);
        let pose = if pose_allowed(cfg, &s, idx, propose(1.0), false, participants) {
            propose(1.0)
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if pose_allowed(cfg, &s, idx, propose(mid), false, participants) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            propose(lo)
        };
        s.objects[idx].pose = pose;
    }

    // A moving end-effector never ends up inside a resting object.
    for arm in Arm::BOTH {
        if !free[arm] {
            continue;
        }
        let mut p = s.arms[arm].position();
        for obj in &s.objects {
            if !s.is_held(obj.id) && obj.rect().point_depth(p) > 0.0 {
                p = project_out(obj, p);
            }
        }
        let p = limit_position(cfg, arm, p);
        s.arms[arm].ee = Pose2::from_parts(p, s.arms[arm].ee.theta);
    }

    for arm in Arm::BOTH {
        let end = s.arms[arm].ee;
        s.arms[arm].ee_velocity = Twist2 {
            linear: (end.position() - start[arm].position()) * (1.0 / dt),
            angular: wrap_angle(end.theta - start[arm].theta) / dt,
        };
    }
    s.step_count += 1;
    s.time = cfg.time_of(s.step_count);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::reset_named;
    use proptest::prelude::*;

    fn quiet_state() -> (WorldConfig, WorldState) {
        let cfg = WorldConfig::default();
        let mut s = reset_named("one_object", 2).unwrap();
        s.objects[0].pose = Pose2::new(0.6, 0.15, 0.0);
        s.objects[0].half_extents = Vec2::new(0.06, 0.04);
        (cfg, s)
    }

    #[test]
    fn zero_command_only_advances_time() {
        let (cfg, s) = quiet_state();
        let next = step(&cfg, &s, &PerArm::new(ArmCommand::zero(), ArmCommand::zero()));
        assert_eq!(next.arms, s.arms);
        assert_eq!(next.objects, s.objects);
        assert_eq!(next.step_count, s.step_count + 1);
        assert_eq!(next.time, cfg.dt);
    }

    #[test]
    fn centered_push_translates_by_commanded_distance() {
        let (cfg, mut s) = quiet_state();
        let x0 = s.objects[0].pose.x;
        s.arms.left.ee = Pose2::new(x0 - 0.06 - 0.005, 0.15, 0.0);
        let cmd = PerArm::new(ArmCommand::velocity(Vec2::new(0.1, 0.0)), ArmCommand::zero());
        for _ in 0..cfg.steps(1.0) {
            s = step(&cfg, &s, &cmd);
        }
        assert!((s.objects[0].pose.x - x0 - 0.1).abs() < 1e-6, "{}", s.objects[0].pose.x - x0);
        assert!(s.objects[0].pose.theta.abs() < 1e-12);
    }

    #[test]
    fn outward_command_at_boundary_is_clipped() {
        let (cfg, mut s) = quiet_state();
        let base = cfg.bases.right;
        let out = Vec2::new(-0.6, 0.8);
        s.arms.right.ee = Pose2::from_parts(base + out * cfg.reach_radius, 0.0);
        let before = s.arms.right.position();
        let cmd = PerArm::new(ArmCommand::zero(), ArmCommand::velocity(out * 0.2));
        let next = step(&cfg, &s, &cmd);
        assert!((next.arms.right.position() - before).norm() < 1e-12);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn off_center_push_rotates() {
        let (cfg, mut s) = quiet_state();
        // push -x on the upper half of the +x face: counter-clockwise
        s.arms.right.ee = Pose2::new(0.6 + 0.065, 0.15 + 0.03, 0.0);
        let cmd = PerArm::new(ArmCommand::zero(), ArmCommand::velocity(Vec2::new(-0.1, 0.0)));
        for _ in 0..10 {
            s = step(&cfg, &s, &cmd);
        }
        assert!(s.objects[0].pose.theta > 0.05);
    }

    #[test]
    fn single_arm_hold_on_bulky_is_noop() {
        let (cfg, mut s) = quiet_state();
        s.objects[0].bulky = true;
        s.arms.left.ee = Pose2::new(0.6 - 0.07, 0.15, 0.0);
        let cmd = PerArm::new(ArmCommand::hold(Vec2::ZERO), ArmCommand::zero());
        let next = step(&cfg, &s, &cmd);
        assert_eq!(next.arms.left.holding, None);
    }

    #[test]
    fn two_arm_grasp_carries_over_bin_wall() {
        let (cfg, mut s) = quiet_state();
        s.objects[0].bulky = true;
        s.arms.left.ee = Pose2::new(0.6 - 0.07, 0.15, 0.0);
        s.arms.right.ee = Pose2::new(0.6 + 0.07, 0.15, 0.0);
        let up = Vec2::new(0.0, 0.2);
        let cmd = PerArm::new(ArmCommand::hold(up), ArmCommand::hold(up));
        for _ in 0..20 {
            s = step(&cfg, &s, &cmd);
        }
        assert_eq!(s.lifted_object(), Some(0));
        assert!((s.objects[0].pose.y - 0.15 - 0.2).abs() < 1e-9, "{}", s.objects[0].pose.y);
        assert_ne!(bin_status(&s.objects[0].rect(), &s.goal.bin_region), BinStatus::Outside);
    }

    #[test]
    fn push_stops_at_bin_wall() {
        let (cfg, mut s) = quiet_state();
        s.arms.left.ee = Pose2::new(0.6, 0.15 - 0.045, 0.0);
        let cmd = PerArm::new(ArmCommand::velocity(Vec2::new(0.0, 0.2)), ArmCommand::zero());
        for _ in 0..40 {
            s = step(&cfg, &s, &cmd);
        }
        let r = s.objects[0].rect();
        assert_eq!(bin_status(&r, &s.goal.bin_region), BinStatus::Outside);
        assert!(s.goal.bin_region.min.y - (s.objects[0].pose.y + 0.04) < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_commands_keep_invariants(seed in 0u64..500, cmds in proptest::collection::vec(
            (-0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3, any::<bool>(), any::<bool>()), 1..80)) {
            let cfg = WorldConfig::default();
            let mut s = reset_named("two_objects", seed).unwrap();
            for (i, (a, b, c, d, gl, gr)) in cmds.into_iter().enumerate() {
                let grip = |g: bool| if g { Grip::Hold } else { Grip::Free };
                let cmd = PerArm::new(
                    ArmCommand { linear: Vec2::new(a, b), angular: 0.0, grip: grip(gl) },
                    ArmCommand { linear: Vec2::new(c, d), angular: 0.0, grip: grip(gr) },
                );
                let prev = s.clone();
                s = step(&cfg, &s, &cmd);
                prop_assert_eq!(s.step_count, i as u64 + 1);
                prop_assert_eq!(s.time, s.step_count as f64 * cfg.dt);
                for arm in Arm::BOTH {
                    let st = s.arm(arm);
                    prop_assert!(st.position().dist(st.base) <= st.reach_radius + 1e-9);
                }
                for (j, o) in s.objects.iter().enumerate() {
                    for o2 in s.objects.iter().skip(j + 1) {
                        prop_assert!(o.rect().penetration(&o2.rect()) <= 1e-3);
                    }
                    // untouched objects never move
                    let touched = Arm::BOTH.iter().any(|&arm| {
                        prev.arms[arm].holding == Some(o.id)
                            || face_in_zone(&prev.objects[j], prev.arms[arm].position(), cfg.contact_band).is_some()
                    });
                    if !touched {
                        prop_assert_eq!(o.pose, prev.objects[j].pose);
                    }
                }
            }
        }
    }
}
