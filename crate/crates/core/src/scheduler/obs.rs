//! Fixed-length observation and parameter encodings.
//!
//! Positions are normalized as `x' = (x - 0.6) / 0.6`, `y' = (y - 0.4) / 0.4`;
//! target rotations as `theta / 0.5`; speeds by the command limits.

use crate::geometry::{wrap_angle, Pose2, Vec2};
use crate::skills::{SkillId, SkillParams, N_SKILLS};
use crate::world::{reach_check, Arm, PerArm, WorldConfig, WorldState};

pub const MAX_OBJECTS: usize = 2;
pub const ARM_FEATURES: usize = 14;
pub const OBJECT_FEATURES: usize = 13;
pub const GOAL_FEATURES: usize = 4 + 3 * MAX_OBJECTS;
pub const OBS_DIM: usize = 2 * ARM_FEATURES + MAX_OBJECTS * OBJECT_FEATURES + GOAL_FEATURES + 2;
/// `[ref_x, ref_y, target_x, target_y, target_theta]`, normalized.
pub const OMEGA_DIM: usize = 5;

const X_MID: f64 = 0.6;
const X_SCALE: f64 = 0.6;
const Y_MID: f64 = 0.4;
const Y_SCALE: f64 = 0.4;
const THETA_SCALE: f64 = 0.5;
const EXTENT_SCALE: f64 = 0.1;
/// Decoded rotation targets are clamped to this range.
pub const THETA_LIMIT: f64 = std::f64::consts::FRAC_PI_2;

pub type Frame = [f64; OBS_DIM];

pub fn norm_x(x: f64) -> f64 {
    (x - X_MID) / X_SCALE
}

pub fn norm_y(y: f64) -> f64 {
    (y - Y_MID) / Y_SCALE
}

pub fn denorm(v: [f64; 2]) -> Vec2 {
    Vec2::new(v[0] * X_SCALE + X_MID, v[1] * Y_SCALE + Y_MID)
}

/// Frame used to left-pad windows at the start of an episode.
pub fn pad_frame() -> Frame {
    let mut f = [0.0; OBS_DIM];
    f[OBS_DIM - 1] = 1.0;
    f
}

/// Encodes `state` with the skills running on busy arms.
pub fn encode(state: &WorldState, active: &PerArm<Option<SkillId>>, world: &WorldConfig, cap_time: f64) -> Frame {
    let mut f = Vec::with_capacity(OBS_DIM);
    for arm in Arm::BOTH {
        let a = &state.arms[arm];
        let (s, c) = a.ee.theta.sin_cos();
        f.extend([norm_x(a.ee.x), norm_y(a.ee.y), s, c]);
        f.extend([
            a.ee_velocity.linear.x / world.v_max,
            a.ee_velocity.linear.y / world.v_max,
            a.ee_velocity.angular / world.omega_max,
        ]);
        f.push(active[arm].is_some() as u8 as f64);
        let mut onehot = [0.0; N_SKILLS];
        if let Some(k) = active[arm] {
            onehot[k.index()] = 1.0;
        }
        f.extend(onehot);
    }
    for slot in 0..MAX_OBJECTS {
        match state.objects.get(slot) {
            Some(o) => {
                let p = o.pose.position();
                let t = state.goal.per_object_target.get(&o.id).copied().unwrap_or(o.pose);
                let (s, c) = o.pose.theta.sin_cos();
                f.extend([1.0, norm_x(p.x), norm_y(p.y), s, c]);
                f.extend([o.half_extents.x / EXTENT_SCALE, o.half_extents.y / EXTENT_SCALE, o.bulky as u8 as f64]);
                f.extend(Arm::BOTH.map(|a| reach_check(&state.arms[a], p) as u8 as f64));
                f.extend([
                    (t.x - p.x) / X_SCALE,
                    (t.y - p.y) / Y_SCALE,
                    wrap_angle(t.theta - o.pose.theta) / std::f64::consts::PI,
                ]);
            }
            None => f.extend([0.0; OBJECT_FEATURES]),
        }
    }
    let bin = &state.goal.bin_region;
    let (bc, bh) = (bin.center(), bin.half_extents());
    f.extend([norm_x(bc.x), norm_y(bc.y), bh.x / X_SCALE, bh.y / Y_SCALE]);
    for slot in 0..MAX_OBJECTS {
        match state.objects.get(slot).and_then(|o| state.goal.per_object_target.get(&o.id)) {
            Some(t) => f.extend([norm_x(t.x), norm_y(t.y), t.theta / THETA_SCALE]),
            None => f.extend([0.0; 3]),
        }
    }
    f.push(if cap_time > 0.0 { state.time / cap_time } else { 0.0 });
    f.push(0.0);
    f.try_into().expect("observation layout")
}

/// Normalized parameter vector of a choice and whether it carries meaning.
pub fn encode_omega(skill: SkillId, params: &SkillParams, state: &WorldState) -> ([f64; OMEGA_DIM], bool) {
    let Some(obj) = state.object(params.object_id).filter(|_| skill != SkillId::Wait) else {
        return ([0.0; OMEGA_DIM], false);
    };
    let r = obj.pose.position();
    let (t, theta) = match skill {
        SkillId::PushSingle | SkillId::PushBimanual => (params.target_position.unwrap_or(r), 0.0),
        SkillId::RotateSingle | SkillId::RotateBimanual => (r, params.target_rotation.unwrap_or(0.0)),
        SkillId::PickPlaceBimanual => {
            let p = params.target_pose.unwrap_or(obj.pose);
            (p.position(), p.theta)
        }
        SkillId::Wait => unreachable!(),
    };
    (
        [norm_x(r.x), norm_y(r.y), norm_x(t.x), norm_y(t.y), wrap_angle(theta) / THETA_SCALE],
        true,
    )
}

/// Parameters for `skill` from a regressed vector: the referenced object is
/// the one nearest the decoded reference point; targets are clamped to the
/// workspace and to `THETA_LIMIT`.
pub fn decode_omega(skill: SkillId, omega: &[f64], state: &WorldState, world: &WorldConfig) -> SkillParams {
    if skill == SkillId::Wait || state.objects.is_empty() {
        return SkillParams::wait();
    }
    let r = denorm([omega[0], omega[1]]);
    let id = state
        .objects
        .iter()
        .min_by(|a, b| a.pose.position().dist(r).total_cmp(&b.pose.position().dist(r)))
        .map(|o| o.id)
        .unwrap_or(0);
    let t = world.workspace.clamp(denorm([omega[2], omega[3]]));
    let theta = (omega[4] * THETA_SCALE).clamp(-THETA_LIMIT, THETA_LIMIT);
    match skill {
        SkillId::PushSingle | SkillId::PushBimanual => SkillParams::push(id, t),
        SkillId::RotateSingle | SkillId::RotateBimanual => SkillParams::rotate(id, theta),
        SkillId::PickPlaceBimanual => SkillParams::pick_place(id, Pose2::from_parts(t, theta)),
        SkillId::Wait => SkillParams::wait(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{reset_named, WorldConfig};

    #[test]
    fn layout_is_fixed() {
        assert_eq!(OBS_DIM, 66);
        let w = WorldConfig::default();
        for name in ["one_object", "two_objects"] {
            let s = reset_named(name, 3).unwrap();
            let f = encode(&s, &PerArm::new(None, Some(SkillId::Wait)), &w, 10.0);
            assert!(f.iter().all(|v| v.is_finite() && v.abs() <= 3.0), "{f:?}");
            assert_eq!(f[7], 0.0);
            assert_eq!(f[ARM_FEATURES + 7], 1.0);
            assert_eq!(f[ARM_FEATURES + 8 + SkillId::Wait.index()], 1.0);
            let second = 2 * ARM_FEATURES + OBJECT_FEATURES;
            assert_eq!(f[second], (name == "two_objects") as u8 as f64);
            assert_eq!(f[OBS_DIM - 1], 0.0);
        }
        assert_eq!(pad_frame()[OBS_DIM - 1], 1.0);
    }

    #[test]
    fn omega_round_trip() {
        let w = WorldConfig::default();
        let s = reset_named("two_objects", 5).unwrap();
        let o = &s.objects[1];
        let cases = [
            (SkillId::PushSingle, SkillParams::push(1, Vec2::new(0.7, 0.15))),
            (SkillId::RotateBimanual, SkillParams::rotate(1, 0.15)),
            (SkillId::PickPlaceBimanual, SkillParams::pick_place(1, Pose2::new(0.675, 0.31, -0.1))),
        ];
        for (k, p) in cases {
            let (v, mask) = encode_omega(k, &p, &s);
            assert!(mask);
            assert!((denorm([v[0], v[1]]) - o.pose.position()).norm() < 1e-12);
            let d = decode_omega(k, &v, &s, &w);
            assert_eq!(d.object_id, 1);
            assert!(d.valid_for(k));
            if let (Some(a), Some(b)) = (d.goal_position(), p.goal_position()) {
                assert!((a - b).norm() < 1e-12);
            }
            if let (Some(a), Some(b)) = (d.goal_rotation(), p.goal_rotation()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (v, mask) = encode_omega(SkillId::Wait, &SkillParams::wait(), &s);
        assert!(!mask);
        assert_eq!(v, [0.0; OMEGA_DIM]);
    }
}
