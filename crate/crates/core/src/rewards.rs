//! Dense per-step reward used to train and score skills.

use serde::{Deserialize, Serialize};

use crate::skills::SkillParams;
use crate::world::{pose_errors, Arm, ArmCommand, PerArm, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha_c: f64,
    pub alpha_p: f64,
    pub alpha_r: f64,
    pub sigma_c: f64,
    pub sigma_p: f64,
    /// Rotation shaping scale; rotation distances are taken in degrees.
    pub sigma_r: f64,
    pub c_e: f64,
    pub success_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha_c: 0.5,
            alpha_p: 1.0,
            alpha_r: 0.5,
            sigma_c: 0.2,
            sigma_p: 0.05,
            sigma_r: 10.0,
            c_e: 0.01,
            success_bonus: 10.0,
        }
    }
}

impl RewardConfig {
    pub fn from_toml_str(text: &str) -> crate::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.alpha_c,
            self.alpha_p,
            self.alpha_r,
            self.sigma_c,
            self.sigma_p,
            self.sigma_r,
            self.c_e,
            self.success_bonus,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(crate::Error::Config("reward coefficients must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub contact: f64,
    pub goal_pos: f64,
    pub goal_rot: f64,
    pub success: f64,
    pub energy: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn assemble(contact: f64, goal_pos: f64, goal_rot: f64, success: f64, energy: f64) -> Self {
        Self {
            contact,
            goal_pos,
            goal_rot,
            success,
            energy,
            total: contact + goal_pos + goal_rot + success - energy,
        }
    }
}

fn shaping(alpha: f64, d: f64, sigma: f64) -> f64 {
    debug_assert!(d >= 0.0, "distance must be non-negative, got {d}");
    alpha * (1.0 - (d / sigma).tanh())
}

/// `alpha_c * (1 - tanh(d_c / sigma_c))`.
pub fn contact_reward(d_c: f64, cfg: &RewardConfig) -> f64 {
    shaping(cfg.alpha_c, d_c, cfg.sigma_c)
}

/// Position and rotation shaping terms. `d_r` is in degrees.
pub fn goal_reward(d_p: f64, d_r: f64, cfg: &RewardConfig) -> (f64, f64) {
    (shaping(cfg.alpha_p, d_p, cfg.sigma_p), shaping(cfg.alpha_r, d_r, cfg.sigma_r))
}

pub fn energy_penalty(effort: &[f64], cfg: &RewardConfig) -> f64 {
    cfg.c_e * effort.iter().sum::<f64>()
}

/// Per-channel squared commanded speeds of the acting arms.
pub fn command_effort(arms: &[Arm], commands: &PerArm<ArmCommand>) -> Vec<f64> {
    arms.iter()
        .flat_map(|&a| {
            let c = commands[a];
            [c.linear.x * c.linear.x, c.linear.y * c.linear.y, c.angular * c.angular]
        })
        .collect()
}

/// Reward of taking `commands` in `state` while pursuing `params` with `arms`.
/// Terms for goal fields absent from `params` are zero.
pub fn total_reward(
    state: &WorldState,
    arms: &[Arm],
    commands: &PerArm<ArmCommand>,
    params: &SkillParams,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let energy = energy_penalty(&command_effort(arms, commands), cfg);
    let Some(obj) = state.object(params.object_id) else {
        return RewardBreakdown::assemble(0.0, 0.0, 0.0, 0.0, energy);
    };
    let rect = obj.rect();
    let d_c = if arms.is_empty() {
        0.0
    } else {
        arms.iter().map(|&a| rect.distance_to(state.arms[a].position())).sum::<f64>() / arms.len() as f64
    };
    let contact = contact_reward(d_c, cfg);

    let (mut goal_pos, mut goal_rot) = (0.0, 0.0);
    if let Some(p) = params.goal_position() {
        goal_pos = goal_reward(obj.pose.position().dist(p), 0.0, cfg).0;
    }
    if let Some(t) = params.goal_rotation() {
        let (_, dr) = pose_errors(&obj.pose, &crate::geometry::Pose2::new(0.0, 0.0, t));
        goal_rot = goal_reward(0.0, dr.to_degrees(), cfg).1;
    }
    let success = if params.goal_met(state) {
        cfg.success_bonus
    } else {
        0.0
    };
    RewardBreakdown::assemble(contact, goal_pos, goal_rot, success, energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose2, Vec2};
    use crate::world::reset_named;
    use proptest::prelude::*;

    fn unit() -> RewardConfig {
        RewardConfig {
            alpha_c: 1.0,
            alpha_p: 1.0,
            alpha_r: 1.0,
            ..RewardConfig::default()
        }
    }

    // 1 - tanh(1), 1 - tanh(3) to 20 digits
    const ONE_MINUS_TANH1: f64 = 0.238_405_844_044_235_11;
    const ONE_MINUS_TANH3: f64 = 0.004_945_246_313_269_55;

    #[test]
    fn contact_closed_form() {
        let cfg = unit();
        assert_eq!(contact_reward(0.0, &cfg), 1.0);
        assert!((contact_reward(0.2, &cfg) - ONE_MINUS_TANH1).abs() < 1e-12);
        assert!((contact_reward(0.6, &cfg) - ONE_MINUS_TANH3).abs() < 1e-12);
        assert!(contact_reward(1.5, &cfg) < 1e-6);
    }

    #[test]
    fn goal_closed_form() {
        let cfg = unit();
        assert_eq!(goal_reward(0.0, 0.0, &cfg), (1.0, 1.0));
        assert!((goal_reward(0.05, 0.0, &cfg).0 - ONE_MINUS_TANH1).abs() < 1e-12);
        assert!((goal_reward(0.0, 10.0, &cfg).1 - ONE_MINUS_TANH1).abs() < 1e-12);
    }

    #[test]
    fn energy_is_scaled_sum() {
        let cfg = RewardConfig {
            c_e: 0.1,
            ..RewardConfig::default()
        };
        assert_eq!(energy_penalty(&[0.0; 6], &cfg), 0.0);
        assert!((energy_penalty(&[1.0, 2.0, 3.0], &cfg) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn default_constants_serialize() {
        let text = toml::to_string(&RewardConfig::default()).unwrap();
        assert!(text.contains("sigma_c = 0.2"));
        assert!(text.contains("sigma_p = 0.05"));
        assert!(text.contains("sigma_r = 10.0"));
        assert_eq!(RewardConfig::from_toml_str(&text).unwrap(), RewardConfig::default());
        assert!(RewardConfig::from_toml_str("alpha_c = -1.0").is_err());
    }

    #[test]
    fn success_term_at_target_with_zero_action() {
        let cfg = RewardConfig::default();
        let s = reset_named("one_object", 4).unwrap();
        let o = &s.objects[0];
        let params = SkillParams::pick_place(o.id, o.pose);
        let zero = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        let b = total_reward(&s, &Arm::BOTH, &zero, &params, &cfg);
        assert_eq!(b.success, cfg.success_bonus);
        assert_eq!(b.energy, 0.0);
        assert_eq!(b.total, b.contact + b.goal_pos + b.goal_rot + b.success - b.energy);
    }

    #[test]
    fn far_object_has_only_shaping() {
        let cfg = RewardConfig::default();
        let s = reset_named("one_object", 4).unwrap();
        let params = SkillParams::push(0, Vec2::new(1.1, 0.7));
        let zero = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        let b = total_reward(&s, &[Arm::Left], &zero, &params, &cfg);
        assert_eq!(b.success, 0.0);
        assert_eq!(b.goal_rot, 0.0);
        assert_eq!(b.total, b.contact + b.goal_pos);
    }

    #[test]
    fn rotation_term_uses_wrapped_degrees() {
        let cfg = unit();
        let mut s = reset_named("one_object", 4).unwrap();
        s.objects[0].pose = Pose2::new(0.6, 0.13, 3.0);
        let params = SkillParams::rotate(0, 3.0 - 10f64.to_radians());
        let zero = PerArm::new(ArmCommand::zero(), ArmCommand::zero());
        let b = total_reward(&s, &[Arm::Left], &zero, &params, &cfg);
        assert!((b.goal_rot - ONE_MINUS_TANH1).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn shaping_is_monotone_and_bounded(a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let cfg = RewardConfig::default();
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(contact_reward(lo, &cfg) > contact_reward(hi, &cfg) || contact_reward(hi, &cfg) == 0.0);
            let (plo, _) = goal_reward(lo * 0.1, 0.0, &cfg);
            let (phi, _) = goal_reward(hi * 0.1, 0.0, &cfg);
            prop_assert!(plo > phi);
            let (_, rlo) = goal_reward(0.0, lo * 10.0, &cfg);
            let (_, rhi) = goal_reward(0.0, hi * 10.0, &cfg);
            prop_assert!(rlo > rhi);
            for v in [contact_reward(lo, &cfg), plo, rlo] {
                prop_assert!(v >= 0.0 && v <= 1.0);
            }
            prop_assert!(contact_reward(lo, &cfg) <= cfg.alpha_c);
        }
    }
}
