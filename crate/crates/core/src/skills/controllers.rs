//! Scripted feedback controllers. Each is a pure function of the state and
//! the skill parameters; phase (approach, push, grasp, carry) is read off the
//! end-effector positions rather than stored.

use super::{nav, SkillConfig, SkillId, SkillInstance};
use crate::geometry::{wrap_angle, Pose2, Rect, Vec2};
use crate::world::{face_in_zone, Arm, ArmCommand, Face, ObjectState, PerArm, WorldConfig, WorldState, SUCCESS_POS_TOL, SUCCESS_ROT_TOL};

/// Residual error along one local axis below which that axis is left alone.
const AXIS_TOL: f64 = 0.01;
/// Gap below which an end-effector counts as touching a face.
const TOUCH_GAP: f64 = 0.011;
const TOUCH_SLACK: f64 = 0.003;
/// Grasp points keep at least this far from other objects.
const GRASP_CLEARANCE: f64 = 0.02;
/// Distance at which an end-effector has arrived at its approach point.
const ARRIVED: f64 = 0.004;
/// A carried object is released once this close to its target pose.
const SETTLE_POS: f64 = 0.01;
const SETTLE_ROT: f64 = 0.02;

/// Commands for the arms bound to `skill`; `None` for arms it does not own.
pub fn control(skill: &SkillInstance, state: &WorldState, world: &WorldConfig, cfg: &SkillConfig) -> PerArm<Option<ArmCommand>> {
    let mut out = PerArm::new(None, None);
    let arms = skill.arms.arms();
    for &a in arms {
        out[a] = Some(ArmCommand::zero());
    }
    let Some(obj) = state.object(skill.params.object_id) else {
        return out;
    };
    let ctx = Ctx { world, cfg, state };
    match skill.id {
        SkillId::Wait => {}
        SkillId::PushSingle => {
            if let Some(t) = skill.params.target_position {
                out[arms[0]] = Some(ctx.push_single(arms[0], obj, t));
            }
        }
        SkillId::RotateSingle => {
            if let Some(t) = skill.params.target_rotation {
                out[arms[0]] = Some(ctx.rotate_single(arms[0], obj, t));
            }
        }
        SkillId::PushBimanual => {
            if let Some(t) = skill.params.target_position {
                let c = ctx.push_bimanual(obj, t);
                out = PerArm::new(Some(c.left), Some(c.right));
            }
        }
        SkillId::RotateBimanual => {
            if let Some(t) = skill.params.target_rotation {
                let c = ctx.grasp_and_move(obj, None, t);
                out = PerArm::new(Some(c.left), Some(c.right));
            }
        }
        SkillId::PickPlaceBimanual => {
            if let Some(p) = skill.params.target_pose {
                let (dp, dr) = crate::world::pose_errors(&obj.pose, &p);
                if state.lifted_object() == Some(obj.id) && dp < SETTLE_POS && dr < SETTLE_ROT {
                    // Zero commands open both grips.
                    return out;
                }
                let c = ctx.grasp_and_move(obj, Some(p.position()), p.theta);
                out = PerArm::new(Some(c.left), Some(c.right));
            }
        }
    }
    out
}

/// Next waypoint on the scripted route of `arm` toward the approach point of
/// the face a single-arm push of object `id` to `target` would use.
pub fn push_waypoint(world: &WorldConfig, state: &WorldState, cfg: &SkillConfig, arm: Arm, id: u32, target: Vec2) -> Option<Vec2> {
    let obj = state.object(id)?;
    let ctx = Ctx { world, cfg, state };
    let e = obj.pose.local_dir(target - obj.pose.position());
    let face = ctx.translation_face(&[arm], obj, e, &[0.0])?;
    let approach = ctx.face_point(obj, face, 0.0, cfg.approach_gap);
    Some(nav::next_waypoint(world, state, arm, approach, &cfg.nav()))
}

fn axis_value(v: Vec2, axis: usize) -> f64 {
    if axis == 0 {
        v.x
    } else {
        v.y
    }
}

/// Short slide used to check that a push can continue.
fn lookahead(e: f64) -> f64 {
    e.signum() * e.abs().min(0.03)
}

fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

struct Ctx<'a> {
    world: &'a WorldConfig,
    cfg: &'a SkillConfig,
    state: &'a WorldState,
}

impl Ctx<'_> {
    fn ee(&self, arm: Arm) -> Vec2 {
        self.state.arms[arm].position()
    }

    /// Velocity toward `goal`, routed around resting objects.
    fn drive(&self, arm: Arm, goal: Vec2) -> Vec2 {
        let w = nav::next_waypoint(self.world, self.state, arm, goal, &self.cfg.nav());
        ((w - self.ee(arm)) * (1.0 / self.world.dt)).clamp_norm(self.world.v_max)
    }

    /// Point `gap` outside `face` at tangential offset `off`, world frame.
    fn face_point(&self, obj: &ObjectState, face: Face, off: f64, gap: f64) -> Vec2 {
        let h = obj.half_extents;
        obj.pose
            .to_world(face.normal() * (face.half_normal(h) + gap) + face.tangent() * off)
    }

    fn usable(&self, arm: Arm, p: Vec2) -> bool {
        let ws = &self.world.workspace;
        let inner = ws.min.x + 0.005 <= p.x && p.x <= ws.max.x - 0.005 && ws.min.y + 0.005 <= p.y && p.y <= ws.max.y - 0.005;
        inner && p.dist(self.world.bases[arm]) <= self.world.reach_radius - 0.005
    }

    /// End-effector of `arm` touches `face` near tangential offset `off`.
    fn touching(&self, arm: Arm, obj: &ObjectState, face: Face, off: f64, tol: f64) -> bool {
        let q = obj.pose.to_local(self.ee(arm));
        let g = face.gap(obj.half_extents, q);
        (-TOUCH_SLACK..=TOUCH_GAP).contains(&g) && (q.dot(face.tangent()) - off).abs() <= tol
    }

    fn arrived(&self, arm: Arm, p: Vec2) -> bool {
        self.ee(arm).dist(p) < ARRIVED
    }

    /// Velocity pushing `face` inward at `speed` while sliding toward offset `off`.
    fn push_velocity(&self, arm: Arm, obj: &ObjectState, face: Face, off: f64, speed: f64) -> Vec2 {
        let q = obj.pose.to_local(self.ee(arm));
        let lateral = (off - q.dot(face.tangent())) * self.cfg.lateral_gain;
        let v = obj.pose.world_dir(-face.normal()) * speed + obj.pose.world_dir(face.tangent()) * lateral;
        v.clamp_norm(self.world.v_max)
    }

    /// Translating the object `dist` along local `axis` keeps clear of the bin
    /// walls and leaves room behind it for a pusher.
    fn slide_clear(&self, obj: &ObjectState, axis: usize, dist: f64) -> bool {
        let dir = obj.pose.world_dir(if axis == 0 { Vec2::new(1.0, 0.0) } else { Vec2::new(0.0, 1.0) });
        let bin = self.state.goal.bin_region.as_rect();
        let ws = &self.world.workspace;
        let m = self.cfg.approach_gap + 0.01;
        let room = crate::geometry::Aabb::new(ws.min + Vec2::new(m, m), ws.max - Vec2::new(m, m));
        let n = 12;
        (1..=n).all(|i| {
            let mut pose = obj.pose;
            let c = pose.position() + dir * (dist * i as f64 / n as f64);
            pose.x = c.x;
            pose.y = c.y;
            let r = Rect::new(pose, obj.half_extents);
            let apart = self
                .state
                .objects
                .iter()
                .filter(|o| o.id != obj.id)
                .all(|o| r.penetration(&o.rect()) <= -0.01);
            r.penetration(&bin) <= -0.003 && apart && (i < n || r.inside_aabb(&room))
        })
    }

    /// Face to push for a translation goal. Prefers the axis with the larger
    /// error whose approach is usable and whose full slide stays clear, then
    /// any axis that can at least make a short step.
    fn translation_face(&self, arms: &[Arm], obj: &ObjectState, e: Vec2, offsets: &[f64]) -> Option<Face> {
        let order = if e.x.abs() >= e.y.abs() { [0, 1] } else { [1, 0] };
        let mut candidates = Vec::with_capacity(2);
        for axis in order {
            let ea = axis_value(e, axis);
            if ea.abs() <= AXIS_TOL {
                continue;
            }
            let face = Face::new(axis, -sign(ea));
            let ht = face.half_tangent(obj.half_extents);
            let usable = arms.iter().zip(offsets).all(|(&a, &o)| {
                self.usable(a, self.face_point(obj, face, o * ht, self.cfg.approach_gap))
            });
            if usable {
                candidates.push((face, ea));
            }
        }
        candidates
            .iter()
            .find(|(f, ea)| self.slide_clear(obj, f.axis, *ea))
            .or_else(|| candidates.iter().find(|(f, ea)| self.slide_clear(obj, f.axis, lookahead(*ea))))
            .or(candidates.first())
            .map(|(f, _)| *f)
    }

    fn push_speed(&self, e_axis: f64) -> f64 {
        (self.cfg.push_gain * e_axis.abs()).clamp(self.cfg.push_min_speed, self.world.v_max)
    }

    fn push_single(&self, arm: Arm, obj: &ObjectState, target: Vec2) -> ArmCommand {
        let ew = target - obj.pose.position();
        if ew.norm() < SUCCESS_POS_TOL {
            return ArmCommand::zero();
        }
        let e = obj.pose.local_dir(ew);
        let h = obj.half_extents;
        // keep pushing a face we already lean on while it still helps
        for face in Face::ALL {
            let ea = axis_value(e, face.axis);
            let helps = ea * -(face.sign as f64) > AXIS_TOL && self.slide_clear(obj, face.axis, lookahead(ea));
            if helps && self.touching(arm, obj, face, 0.0, 0.6 * face.half_tangent(h)) {
                return ArmCommand::velocity(self.push_velocity(arm, obj, face, 0.0, self.push_speed(ea)));
            }
        }
        let Some(face) = self.translation_face(&[arm], obj, e, &[0.0]) else {
            return ArmCommand::zero();
        };
        let approach = self.face_point(obj, face, 0.0, self.cfg.approach_gap);
        if self.arrived(arm, approach) {
            let speed = self.push_speed(axis_value(e, face.axis));
            return ArmCommand::velocity(self.push_velocity(arm, obj, face, 0.0, speed));
        }
        ArmCommand::velocity(self.drive(arm, approach))
    }

    fn rotate_single(&self, arm: Arm, obj: &ObjectState, target: f64) -> ArmCommand {
        let err = wrap_angle(target - obj.pose.theta);
        if err.abs() < SUCCESS_ROT_TOL {
            return ArmCommand::zero();
        }
        let h = obj.half_extents;
        // push the long faces, off-center on the side giving the needed torque
        let axis = if h.x >= h.y { 1 } else { 0 };
        let speed = (self.cfg.rotate_gain * err.abs()).clamp(self.cfg.rotate_min_speed, self.world.v_max);
        let mut options = Vec::with_capacity(2);
        for s in [1i8, -1] {
            let face = Face::new(axis, s);
            let ht = face.half_tangent(h);
            for o in [1.0, -1.0] {
                let off = o * self.cfg.rotate_offset * ht;
                let c = face.normal() * face.half_normal(h) + face.tangent() * off;
                if c.cross(-face.normal()) * err > 0.0 {
                    options.push((face, off));
                }
            }
        }
        for &(face, off) in &options {
            if self.touching(arm, obj, face, off, 0.25 * face.half_tangent(h)) {
                return ArmCommand::velocity(self.push_velocity(arm, obj, face, off, speed));
            }
        }
        let p = self.ee(arm);
        let best = options
            .iter()
            .map(|&(f, off)| (f, off, self.face_point(obj, f, off, self.cfg.approach_gap)))
            .filter(|&(_, _, q)| self.usable(arm, q))
            .min_by(|a, b| a.2.dist(p).total_cmp(&b.2.dist(p)));
        match best {
            Some((face, off, q)) if self.arrived(arm, q) => {
                ArmCommand::velocity(self.push_velocity(arm, obj, face, off, speed))
            }
            Some((_, _, q)) => ArmCommand::velocity(self.drive(arm, q)),
            None => ArmCommand::zero(),
        }
    }

    fn push_bimanual(&self, obj: &ObjectState, target: Vec2) -> PerArm<ArmCommand> {
        let zero = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        let ew = target - obj.pose.position();
        if ew.norm() < SUCCESS_POS_TOL {
            return zero;
        }
        let e = obj.pose.local_dir(ew);
        let h = obj.half_extents;
        let k = self.cfg.bimanual_push_offset;
        let offsets = |face: Face| {
            let ht = face.half_tangent(h);
            let a = self.face_point(obj, face, k * ht, 0.0);
            let b = self.face_point(obj, face, -k * ht, 0.0);
            if a.x <= b.x {
                PerArm::new(k * ht, -k * ht)
            } else {
                PerArm::new(-k * ht, k * ht)
            }
        };
        let touching_on = |face: Face| {
            let off = offsets(face);
            let tol = 0.2 * face.half_tangent(h);
            PerArm::from_fn(|a| self.touching(a, obj, face, off[a], tol))
        };
        let push_with = |face: Face| {
            let off = offsets(face);
            let speed = self.push_speed(axis_value(e, face.axis));
            PerArm::from_fn(|a| ArmCommand::velocity(self.push_velocity(a, obj, face, off[a], speed)))
        };
        for face in Face::ALL {
            let ea = axis_value(e, face.axis);
            let helps = ea * -(face.sign as f64) > AXIS_TOL && self.slide_clear(obj, face.axis, lookahead(ea));
            let t = touching_on(face);
            if helps && t.left && t.right {
                return push_with(face);
            }
        }
        let Some(face) = self.translation_face(&Arm::BOTH, obj, e, &[k, -k]) else {
            return zero;
        };
        let off = offsets(face);
        let approach = PerArm::from_fn(|a| self.face_point(obj, face, off[a], self.cfg.approach_gap));
        let t = touching_on(face);
        let ready = PerArm::from_fn(|a| t[a] || self.arrived(a, approach[a]));
        if ready.left && ready.right {
            return push_with(face);
        }
        PerArm::from_fn(|a| {
            if ready[a] {
                ArmCommand::zero()
            } else {
                ArmCommand::velocity(self.drive(a, approach[a]))
            }
        })
    }

    /// Opposite faces to grasp. Prefers the local axis closest to world x
    /// (Left takes the face pointing toward -x) unless a grasp point there,
    /// now or at the goal pose, crowds another object; then the other axis,
    /// with the faces assigned to the nearer arms.
    fn grasp_faces(&self, obj: &ObjectState, goal: Option<Pose2>) -> PerArm<Face> {
        let (s, c) = obj.pose.theta.sin_cos();
        let preferred = if c.abs() >= s.abs() { 0 } else { 1 };
        let assign = |axis: usize| {
            let plus = Face::new(axis, 1);
            let (pl, mi) = (
                self.face_point(obj, plus, 0.0, self.cfg.grasp_gap),
                self.face_point(obj, plus.opposite(), 0.0, self.cfg.grasp_gap),
            );
            let bases = &self.world.bases;
            let keep = pl.dist(bases.right) + mi.dist(bases.left);
            let swap = pl.dist(bases.left) + mi.dist(bases.right);
            if axis == preferred {
                if obj.pose.world_dir(plus.normal()).x > 0.0 {
                    PerArm::new(plus.opposite(), plus)
                } else {
                    PerArm::new(plus, plus.opposite())
                }
            } else if keep <= swap {
                PerArm::new(plus.opposite(), plus)
            } else {
                PerArm::new(plus, plus.opposite())
            }
        };
        let clear = |faces: &PerArm<Face>| {
            let mut poses = vec![obj.pose];
            poses.extend(goal);
            poses.iter().all(|pose| {
                Arm::BOTH.iter().all(|&a| {
                    let f = faces[a];
                    let h = obj.half_extents;
                    let p = pose.to_world(f.normal() * (f.half_normal(h) + self.cfg.grasp_gap));
                    self.usable(a, p)
                        && self
                            .state
                            .objects
                            .iter()
                            .filter(|o| o.id != obj.id)
                            .all(|o| o.rect().distance_to(p) >= GRASP_CLEARANCE)
                })
            })
        };
        let first = assign(preferred);
        if clear(&first) {
            return first;
        }
        let second = assign(1 - preferred);
        if clear(&second) {
            second
        } else {
            first
        }
    }

    fn grasp_and_move(&self, obj: &ObjectState, goal: Option<Vec2>, theta: f64) -> PerArm<ArmCommand> {
        if self.state.lifted_object() == Some(obj.id) {
            return self.carry(obj, goal, theta);
        }
        let goal_pose = goal.map(|g| Pose2::from_parts(g, theta));
        let faces = self.grasp_faces(obj, goal_pose);
        let ready = PerArm::from_fn(|a| face_in_zone(obj, self.ee(a), self.world.hold_zone) == Some(faces[a]));
        if ready.left && ready.right {
            return PerArm::new(ArmCommand::hold(Vec2::ZERO), ArmCommand::hold(Vec2::ZERO));
        }
        PerArm::from_fn(|a| {
            if ready[a] {
                ArmCommand::zero()
            } else {
                let g = self.face_point(obj, faces[a], 0.0, self.cfg.grasp_gap);
                ArmCommand::velocity(self.drive(a, g))
            }
        })
    }

    /// Rigid motion of both end-effectors that moves the held object toward
    /// `goal` (if any) and `theta`, slowed so neither exceeds the speed limit.
    fn carry(&self, obj: &ObjectState, goal: Option<Vec2>, theta: f64) -> PerArm<ArmCommand> {
        let dt = self.world.dt;
        let c = obj.pose.position();
        let mut tau = goal.map_or(Vec2::ZERO, |g| (g - c) * (self.cfg.carry_gain * dt).min(1.0));
        let step_max = self.world.omega_max * dt;
        let mut alpha = (wrap_angle(theta - obj.pose.theta) * (self.cfg.turn_gain * dt).min(1.0)).clamp(-step_max, step_max);
        let vel = |tau: Vec2, alpha: f64| {
            PerArm::from_fn(|a| {
                let r = self.ee(a) - c;
                (tau + r.rotate(alpha) - r) * (1.0 / dt)
            })
        };
        let limit = self.world.v_max * 0.98;
        let mut v = vel(tau, alpha);
        for _ in 0..2 {
            let m = v.left.norm().max(v.right.norm());
            if m <= limit {
                break;
            }
            let k = limit / m;
            tau = tau * k;
            alpha *= k;
            v = vel(tau, alpha);
        }
        v.map(ArmCommand::hold)
    }
}

/// Whether `arms` can push object `id` by `dist` along its local `axis` in a
/// single straight slide: the approach points are usable and the swept path
/// stays clear of the bin walls and the workspace border.
pub fn push_leg_clear(world: &WorldConfig, state: &WorldState, cfg: &SkillConfig, id: u32, arms: super::ArmSet, axis: usize, dist: f64) -> bool {
    let Some(obj) = state.object(id) else {
        return false;
    };
    let ctx = Ctx { world, cfg, state };
    let face = Face::new(axis, -sign(dist));
    let ht = face.half_tangent(obj.half_extents);
    let k = cfg.bimanual_push_offset;
    let usable = match arms {
        super::ArmSet::Both => {
            let a = ctx.face_point(obj, face, k * ht, cfg.approach_gap);
            let b = ctx.face_point(obj, face, -k * ht, cfg.approach_gap);
            let (l, r) = if a.x <= b.x { (a, b) } else { (b, a) };
            ctx.usable(Arm::Left, l) && ctx.usable(Arm::Right, r)
        }
        _ => arms.arms().iter().all(|&a| ctx.usable(a, ctx.face_point(obj, face, 0.0, cfg.approach_gap))),
    };
    usable && ctx.slide_clear(obj, axis, dist)
}
