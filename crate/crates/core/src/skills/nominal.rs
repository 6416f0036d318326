//! Nominal instance distributions and single-skill rollouts, shared by the
//! competence checks and skill learning.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{control, push_leg_clear, terminated, ArmSet, SkillConfig, SkillId, SkillInstance, SkillParams, SkillStatus};
use crate::geometry::Vec2;
use crate::seeds::substream;
use crate::world::{reach_check, step, Arm, ArmCommand, PerArm, ScenarioSpec, WorldConfig, WorldState};
use crate::Result;

/// One skill to execute from a given state.
#[derive(Debug, Clone)]
pub struct SkillTask {
    pub state: WorldState,
    pub skill: SkillId,
    pub arms: ArmSet,
    pub params: SkillParams,
}

impl SkillTask {
    pub fn instance(&self, world: &WorldConfig, cfg: &SkillConfig) -> SkillInstance {
        SkillInstance::new(self.skill, self.arms, self.params, self.state.step_count, 0, world, cfg)
    }
}

fn shared_layout(seed: u64) -> Result<WorldState> {
    let spec = ScenarioSpec {
        out_of_reach_prob: 0.0,
        aligned_prob: 0.0,
        ..ScenarioSpec::one_object()
    };
    crate::world::reset(&spec, seed)
}

/// A straight push of object 0 along one of its local axes, 6 to 20 cm,
/// that `arms` can perform without meeting a wall.
fn sample_leg(state: &WorldState, arms: ArmSet, rng: &mut ChaCha8Rng) -> Option<Vec2> {
    let world = WorldConfig::default();
    let cfg = SkillConfig::default();
    let obj = &state.objects[0];
    (0..LEG_ATTEMPTS).find_map(|_| {
        let axis = rng.gen_range(0..2);
        let dist = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.06..0.2);
        let dir = if axis == 0 { Vec2::new(dist, 0.0) } else { Vec2::new(0.0, dist) };
        push_leg_clear(&world, state, &cfg, obj.id, arms, axis, dist).then(|| obj.pose.position() + obj.pose.world_dir(dir))
    })
}

const LEG_ATTEMPTS: usize = 64;

/// Samples a task from the nominal range of `skill`. Layouts come from the
/// one-object family. Pushes are straight legs along a local axis of the
/// object, the unit the expert composes translations from.
pub fn sample_task(skill: SkillId, seed: u64) -> Result<SkillTask> {
    let mut rng = substream(seed, "nominal");
    let spec = ScenarioSpec::one_object();
    let random_arm = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { Arm::Left } else { Arm::Right };
    let task = match skill {
        SkillId::PushSingle | SkillId::PushBimanual => {
            let mut layout = seed;
            loop {
                let state = if skill == SkillId::PushSingle {
                    crate::world::reset(&spec, layout)?
                } else {
                    shared_layout(layout)?
                };
                let c = state.objects[0].pose.position();
                let arms = if skill == SkillId::PushBimanual {
                    ArmSet::Both
                } else {
                    let reach = PerArm::from_fn(|a| reach_check(&state.arms[a], c));
                    ArmSet::single(match (reach.left, reach.right) {
                        (true, false) => Arm::Left,
                        (false, true) => Arm::Right,
                        _ => random_arm(&mut rng),
                    })
                };
                if let Some(target) = sample_leg(&state, arms, &mut rng) {
                    break SkillTask {
                        state,
                        skill,
                        arms,
                        params: SkillParams::push(0, target),
                    };
                }
                layout = crate::seeds::derive_u64(layout, "nominal-layout");
            }
        }
        SkillId::RotateSingle => {
            let state = shared_layout(seed)?;
            let theta = state.objects[0].pose.theta;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            SkillTask {
                params: SkillParams::rotate(0, theta + sign * rng.gen_range(0.3..0.9)),
                arms: ArmSet::single(random_arm(&mut rng)),
                state,
                skill,
            }
        }
        SkillId::RotateBimanual => {
            let state = shared_layout(seed)?;
            let t = state.goal.per_object_target[&0].theta;
            SkillTask {
                state,
                skill,
                arms: ArmSet::Both,
                params: SkillParams::rotate(0, t),
            }
        }
        SkillId::PickPlaceBimanual => {
            let state = shared_layout(seed)?;
            let t = state.goal.per_object_target[&0];
            SkillTask {
                state,
                skill,
                arms: ArmSet::Both,
                params: SkillParams::pick_place(0, t),
            }
        }
        SkillId::Wait => SkillTask {
            state: crate::world::reset(&spec, seed)?,
            skill,
            arms: ArmSet::single(random_arm(&mut rng)),
            params: SkillParams::wait(),
        },
    };
    Ok(task)
}

/// Runs one skill with its scripted controller until it leaves `Running`.
pub fn run_scripted(task: &SkillTask, world: &WorldConfig, cfg: &SkillConfig) -> (WorldState, SkillStatus) {
    let inst = task.instance(world, cfg);
    let mut s = task.state.clone();
    loop {
        let status = terminated(&inst, &s, world);
        if status != SkillStatus::Running {
            return (s, status);
        }
        let cmd = control(&inst, &s, world, cfg);
        let cmds = PerArm::new(
            cmd.left.unwrap_or_else(ArmCommand::zero),
            cmd.right.unwrap_or_else(ArmCommand::zero),
        );
        s = step(world, &s, &cmds);
    }
}
