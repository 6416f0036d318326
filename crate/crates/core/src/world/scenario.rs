//! Layout families and the seeded initial-state sampler.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arm, ArmState, ObjectState, PerArm, TaskGoal, Twist2, WorldConfig, WorldState};
use crate::geometry::{Aabb, Pose2, Rect, Vec2};
use crate::seeds::substream;
use crate::{Error, Result};

pub const BUILTIN_SCENARIOS: [&str; 2] = ["one_object", "two_objects"];

/// Sampling ranges for one layout family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_objects: usize,
    pub half_x: [f64; 2],
    pub half_y: [f64; 2],
    pub bulky: bool,
    /// Chance that an object starts reachable by one arm only.
    pub out_of_reach_prob: f64,
    /// Chance that an object starts within `aligned_jitter` of its target rotation.
    pub aligned_prob: f64,
    pub aligned_jitter: f64,
    /// Range of the rotation offset for misaligned objects, radians.
    pub misalign: [f64; 2],
    /// Target rotations are drawn from `[-r, r]`.
    pub target_theta_range: f64,
    /// Episode cap, seconds.
    pub episode_cap: f64,
    pub bin_region: Aabb,
    /// Target x per object; all targets share `slot_y`.
    pub slot_x: Vec<f64>,
    pub slot_y: f64,
    /// Staging spot x per object; all spots share `staging_y`.
    pub staging_x: Vec<f64>,
    pub staging_y: f64,
    /// Free space kept around objects, the bin and the arm home poses.
    pub clearance: f64,
    /// One-arm objects lie within `reach - margin_own` of their arm's base.
    pub margin_own: f64,
    /// ... and beyond `reach + margin_other` of the other base.
    pub margin_other: f64,
    /// ... and within this distance of their staging spot.
    pub max_staging_dist: f64,
    /// Shared objects lie within `reach - margin_shared` of both bases.
    pub margin_shared: f64,
    pub max_attempts: usize,
    pub world: WorldConfig,
}

impl ScenarioSpec {
    pub fn one_object() -> Self {
        Self {
            name: "one_object".into(),
            n_objects: 1,
            half_x: [0.045, 0.065],
            half_y: [0.03, 0.04],
            bulky: true,
            out_of_reach_prob: 0.6,
            aligned_prob: 0.3,
            aligned_jitter: 0.07,
            misalign: [0.3, 1.2],
            target_theta_range: 0.2,
            episode_cap: 10.0,
            bin_region: Aabb::new(Vec2::new(0.44, 0.24), Vec2::new(0.76, 0.40)),
            slot_x: vec![0.6],
            slot_y: 0.31,
            staging_x: vec![0.6],
            staging_y: 0.13,
            clearance: 0.03,
            margin_own: 0.12,
            margin_other: 0.02,
            max_staging_dist: 0.36,
            margin_shared: 0.03,
            max_attempts: 1000,
            world: WorldConfig::default(),
        }
    }

    pub fn two_objects() -> Self {
        Self {
            name: "two_objects".into(),
            n_objects: 2,
            out_of_reach_prob: 0.85,
            episode_cap: 20.0,
            slot_x: vec![0.525, 0.675],
            staging_x: vec![0.475, 0.725],
            ..Self::one_object()
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "one_object" => Ok(Self::one_object()),
            "two_objects" => Ok(Self::two_objects()),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }

    /// Parses a TOML document. Keys override the built-in family named by
    /// its `name` key, so a file only needs the values it changes.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let name = overrides
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("scenario file needs a `name`".into()))?;
        let base = Self::builtin(name)?;
        let mut table = toml::Table::try_from(&base)?;
        merge_tables(&mut table, overrides);
        let spec: Self = table.try_into()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("scenario `{}`: {m}", self.name)));
        if self.n_objects == 0 || self.n_objects > 2 {
            return bad("n_objects must be 1 or 2");
        }
        if self.slot_x.len() != self.n_objects || self.staging_x.len() != self.n_objects {
            return bad("slot_x and staging_x need one entry per object");
        }
        if !(self.half_x[0] > 0.0 && self.half_x[0] <= self.half_x[1])
            || !(self.half_y[0] > 0.0 && self.half_y[0] <= self.half_y[1])
        {
            return bad("half extent ranges must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.out_of_reach_prob) || !(0.0..=1.0).contains(&self.aligned_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !self.world.workspace.contains_aabb(&self.bin_region) {
            return bad("bin must lie inside the workspace");
        }
        if self.slot_x.iter().any(|&x| !self.bin_region.contains(Vec2::new(x, self.slot_y))) {
            return bad("targets must lie inside the bin");
        }
        if self.episode_cap <= 0.0 || self.max_attempts == 0 {
            return bad("episode cap and attempt budget must be positive");
        }
        Ok(())
    }

    pub fn cap_steps(&self) -> u64 {
        self.world.steps(self.episode_cap)
    }

    pub fn staging_spot(&self, index: usize) -> Vec2 {
        Vec2::new(self.staging_x[index], self.staging_y)
    }

    /// Arm that can reach object `index` when it starts out of the other's
    /// reach, or `None` when the scenario picks a side at random.
    fn fixed_side(&self, index: usize) -> Option<Arm> {
        match (self.n_objects, index) {
            (2, 0) => Some(Arm::Left),
            (2, _) => Some(Arm::Right),
            _ => None,
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

enum Placement {
    OneArm(Arm),
    Shared,
}

fn placement_ok(spec: &ScenarioSpec, rect: &Rect, placed: &[ObjectState], kind: &Placement) -> bool {
    let cfg = &spec.world;
    let c = rect.pose.position();
    let margin = spec.clearance;
    let inner = Aabb::new(
        cfg.workspace.min + Vec2::new(margin, margin),
        cfg.workspace.max - Vec2::new(margin, margin),
    );
    if !rect.inside_aabb(&inner) {
        return false;
    }
    let grown = Rect::new(rect.pose, rect.half + Vec2::new(margin, margin));
    if grown.penetration(&spec.bin_region.as_rect()) > 0.0 {
        return false;
    }
    if placed.iter().any(|o| grown.penetration(&o.rect()) > 0.0) {
        return false;
    }
    if Arm::BOTH.iter().any(|&a| rect.distance_to(cfg.homes[a]) < margin) {
        return false;
    }
    match kind {
        Placement::OneArm(arm) => {
            c.dist(cfg.bases[*arm]) <= cfg.reach_radius - spec.margin_own
                && c.dist(cfg.bases[arm.other()]) > cfg.reach_radius + spec.margin_other
        }
        Placement::Shared => Arm::BOTH
            .iter()
            .all(|&a| c.dist(cfg.bases[a]) <= cfg.reach_radius - spec.margin_shared),
    }
}

/// Samples the initial state of `spec` for `seed`.
pub fn reset(spec: &ScenarioSpec, seed: u64) -> Result<WorldState> {
    spec.validate()?;
    let cfg = &spec.world;
    let mut rng = substream(seed, "scenario");
    let mut objects: Vec<ObjectState> = Vec::with_capacity(spec.n_objects);
    let mut targets = BTreeMap::new();

    for i in 0..spec.n_objects {
        let half = Vec2::new(uniform(&mut rng, spec.half_x), uniform(&mut rng, spec.half_y));
        let r = spec.target_theta_range;
        let target_theta = uniform(&mut rng, [-r, r]);
        let theta = if rng.gen_bool(spec.aligned_prob) {
            target_theta + uniform(&mut rng, [-spec.aligned_jitter, spec.aligned_jitter])
        } else {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            target_theta + sign * uniform(&mut rng, spec.misalign)
        };
        let kind = if rng.gen_bool(spec.out_of_reach_prob) {
            let side = spec
                .fixed_side(i)
                .unwrap_or_else(|| if rng.gen_bool(0.5) { Arm::Left } else { Arm::Right });
            Placement::OneArm(side)
        } else {
            Placement::Shared
        };
        let spot = spec.staging_spot(i);
        let mut found = None;
        for _ in 0..spec.max_attempts {
            let c = match kind {
                Placement::OneArm(_) => {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let d = spec.max_staging_dist * rng.gen::<f64>().sqrt();
                    spot + Vec2::new(d * a.cos(), d * a.sin())
                }
                Placement::Shared => spot + Vec2::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.02..0.0)),
            };
            let rect = Rect::new(Pose2::from_parts(c, theta), half);
            if placement_ok(spec, &rect, &objects, &kind) {
                found = Some(rect.pose);
                break;
            }
        }
        let pose = found.ok_or_else(|| Error::PlacementFailed {
            scenario: spec.name.clone(),
            object: i,
            attempts: spec.max_attempts,
        })?;
        objects.push(ObjectState {
            id: i as u32,
            pose,
            half_extents: half,
            bulky: spec.bulky,
        });
        targets.insert(i as u32, Pose2::new(spec.slot_x[i], spec.slot_y, target_theta));
    }

    let arms = PerArm::from_fn(|a| ArmState {
        side: a,
        ee: Pose2::from_parts(cfg.homes[a], 0.0),
        ee_velocity: Twist2::default(),
        base: cfg.bases[a],
        reach_radius: cfg.reach_radius,
        holding: None,
    });
    Ok(WorldState {
        arms,
        objects,
        goal: TaskGoal {
            bin_region: spec.bin_region,
            per_object_target: targets,
        },
        time: 0.0,
        rng_seed: seed,
        step_count: 0,
    })
}

/// [`reset`] for a built-in family.
pub fn reset_named(name: &str, seed: u64) -> Result<WorldState> {
    reset(&ScenarioSpec::builtin(name)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::reach_check;

    #[test]
    fn reset_is_deterministic() {
        let a = reset_named("one_object", 7).unwrap();
        let b = reset_named("one_object", 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, reset_named("one_object", 8).unwrap());
    }

    #[test]
    fn two_objects_are_bulky() {
        for seed in 0..20 {
            let s = reset_named("two_objects", seed).unwrap();
            assert_eq!(s.objects.len(), 2);
            assert!(s.objects.iter().all(|o| o.bulky));
        }
    }

    #[test]
    fn unknown_scenario_is_an_error() {
        assert!(matches!(reset_named("three_objects", 0), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn overconstrained_scenario_fails_placement() {
        let mut spec = ScenarioSpec::one_object();
        spec.half_x = [0.5, 0.5];
        spec.half_y = [0.3, 0.3];
        assert!(matches!(reset(&spec, 0), Err(Error::PlacementFailed { .. })));
    }

    #[test]
    fn out_of_reach_sweep() {
        let spec = ScenarioSpec::one_object();
        let mut out = 0;
        for seed in 0..200 {
            let s = reset(&spec, seed).unwrap();
            let c = s.objects[0].pose.position();
            // independent distance computation
            let reach = |b: Vec2| ((c.x - b.x).powi(2) + (c.y - b.y).powi(2)).sqrt() <= 0.55;
            let l = reach(Vec2::new(0.25, 0.05));
            let r = reach(Vec2::new(0.95, 0.05));
            assert_eq!(l, reach_check(s.arm(Arm::Left), c));
            assert_eq!(r, reach_check(s.arm(Arm::Right), c));
            assert!(l || r, "seed {seed}: object reachable by neither arm");
            if !(l && r) {
                out += 1;
            }
        }
        let rate = out as f64 / 200.0;
        // sampler draws one-arm placements with probability 0.6
        assert!((rate - 0.6).abs() < 0.1, "empirical out-of-reach rate {rate}");
    }

    #[test]
    fn two_object_reachability_matches_recomputation() {
        let s = reset_named("two_objects", 3).unwrap();
        for o in &s.objects {
            for arm in Arm::BOTH {
                let st = s.arm(arm);
                let d = o.pose.position() - st.base;
                assert_eq!(reach_check(st, o.pose.position()), d.x * d.x + d.y * d.y <= 0.55 * 0.55);
            }
        }
    }

    #[test]
    fn goals_lie_in_bin_and_objects_start_apart() {
        for seed in 0..100 {
            let s = reset_named("two_objects", seed).unwrap();
            for t in s.goal.per_object_target.values() {
                assert!(s.goal.bin_region.contains(t.position()));
            }
            assert!(s.objects[0].rect().penetration(&s.objects[1].rect()) < 0.0);
        }
    }

    #[test]
    fn toml_overrides_builtin() {
        let spec = ScenarioSpec::from_toml_str("name = \"two_objects\"\nout_of_reach_prob = 0.0\n[world]\nv_max = 0.2\n").unwrap();
        assert_eq!(spec.out_of_reach_prob, 0.0);
        assert_eq!(spec.world.v_max, 0.2);
        assert_eq!(spec.world.dt, 0.05);
        assert_eq!(spec.n_objects, 2);
        assert!(ScenarioSpec::from_toml_str("out_of_reach_prob = 0.1").is_err());
    }
}
