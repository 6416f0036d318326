//! Metrics, baselines, batch evaluation, result tables and Gantt charts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::executor::{run_episode_observed, Choice, DecisionContext, ExecConfig, HighLevelPolicy, ReplayPolicy, Timeline};
use crate::expert::{binning_order, reaches_with_margin};
use crate::geometry::angle_error;
use crate::skills::{SkillConfig, SkillId};
use crate::world::{object_at_target, reset, Arm, PerArm, ScenarioSpec, WorldState, SUCCESS_ROT_TOL};
use crate::{Error, Result};

/// Margin inside both reach disks for an object to count as staged.
pub const STAGED_MARGIN: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Staged,
    Oriented,
    InBin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub object: u32,
    pub kind: StageKind,
}

/// Ordered stage predicates: staged, oriented, in bin for each object in
/// binning order. A binned object also counts as staged and oriented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLadder {
    pub stages: Vec<Stage>,
}

impl StageLadder {
    pub fn for_state(state0: &WorldState) -> Self {
        let stages = binning_order(state0)
            .into_iter()
            .flat_map(|object| {
                [StageKind::Staged, StageKind::Oriented, StageKind::InBin].map(|kind| Stage { object, kind })
            })
            .collect();
        Self { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn satisfied(&self, i: usize, state: &WorldState) -> bool {
        let Stage { object, kind } = self.stages[i];
        let Some(o) = state.object(object) else { return false };
        if object_at_target(state, &state.goal, object) {
            return true;
        }
        match kind {
            StageKind::Staged => Arm::BOTH
                .iter()
                .all(|&a| reaches_with_margin(state, a, o.pose.position(), STAGED_MARGIN)),
            StageKind::Oriented => state
                .goal
                .per_object_target
                .get(&object)
                .is_some_and(|t| angle_error(o.pose.theta, t.theta) < SUCCESS_ROT_TOL),
            StageKind::InBin => false,
        }
    }
}

/// Records which stages were ever satisfied over an episode.
#[derive(Debug, Clone)]
pub struct LadderTracker {
    pub ladder: StageLadder,
    pub reached: Vec<bool>,
}

impl LadderTracker {
    pub fn new(state0: &WorldState) -> Self {
        let ladder = StageLadder::for_state(state0);
        let reached = vec![false; ladder.len()];
        let mut t = Self { ladder, reached };
        t.observe(state0);
        t
    }

    pub fn observe(&mut self, state: &WorldState) {
        for i in 0..self.ladder.len() {
            if !self.reached[i] && self.ladder.satisfied(i, state) {
                self.reached[i] = true;
            }
        }
    }
}

/// Longest all-reached prefix over the ladder length.
pub fn completion_progress(reached: &[bool]) -> f64 {
    if reached.is_empty() {
        return 1.0;
    }
    let prefix = reached.iter().take_while(|r| **r).count();
    prefix as f64 / reached.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub completion_progress: f64,
    /// Success time, or the cap.
    pub episode_duration: f64,
    pub rejected_dispatches: usize,
}

/// One evaluated episode; enough to replay it and redraw its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: EpisodeMetrics,
    pub stages_reached: Vec<bool>,
    pub occupancy_violations: usize,
    pub atomicity_violations: usize,
    pub proposals: Vec<PerArm<Option<Choice>>>,
    pub timeline: Timeline,
}

/// Runs one episode from `seed` and scores it.
pub fn run_scored<P: HighLevelPolicy + ?Sized>(
    policy: &mut P,
    spec: &ScenarioSpec,
    cfg: &ExecConfig,
    seed: u64,
) -> Result<(EpisodeMetrics, Vec<bool>, crate::executor::EpisodeTrace)> {
    let s0 = reset(spec, seed)?;
    let mut tracker = LadderTracker::new(&s0);
    let trace = run_episode_observed(policy, &s0, cfg, |s| tracker.observe(s));
    tracker.observe(&trace.final_state);
    let reached = tracker.reached;
    let metrics = EpisodeMetrics {
        success: trace.success,
        completion_progress: if trace.success { 1.0 } else { completion_progress(&reached) },
        episode_duration: trace.duration,
        rejected_dispatches: trace.rejections,
    };
    Ok((metrics, reached, trace))
}

/// Re-runs a recorded episode from its seed and proposals.
pub fn replay_record(rec: &EpisodeRecord, spec: &ScenarioSpec, skills: &SkillConfig) -> Result<EpisodeMetrics> {
    let cfg = ExecConfig::for_scenario(spec, skills.clone());
    let mut p = ReplayPolicy {
        choices: rec.proposals.clone(),
    };
    Ok(run_scored(&mut p, spec, &cfg, rec.seed)?.0)
}

/// Aggregate row; SR and CP are fractions in [0, 1], ED in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: String,
    pub scenario: String,
    pub n: usize,
    pub sr_mean: f64,
    pub sr_sd: f64,
    pub cp_mean: f64,
    pub cp_sd: f64,
    pub ed_mean: f64,
    pub ed_sd: f64,
    pub config_hash: String,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl RunRow {
    /// Aggregates episodes in the given order (callers sort by seed).
    pub fn from_records(records: &[EpisodeRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Config("cannot aggregate zero episodes".into()))?;
        let col = |f: fn(&EpisodeMetrics) -> f64| records.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
        let (sr_mean, sr_sd) = mean_sd(&col(|m| m.success as u8 as f64));
        let (cp_mean, cp_sd) = mean_sd(&col(|m| m.completion_progress));
        let (ed_mean, ed_sd) = mean_sd(&col(|m| m.episode_duration));
        Ok(Self {
            method: first.method.clone(),
            scenario: first.scenario.clone(),
            n: records.len(),
            sr_mean,
            sr_sd,
            cp_mean,
            cp_sd,
            ed_mean,
            ed_sd,
            config_hash: first.config_hash.clone(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTable {
    pub rows: Vec<RunRow>,
}

const CSV_HEADER: &str = "method,scenario,n,sr_mean,sr_sd,cp_mean,cp_sd,ed_mean,ed_sd,config_hash";

impl RunTable {
    /// Floats are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method, r.scenario, r.n, r.sr_mean, r.sr_sd, r.cp_mean, r.cp_sd, r.ed_mean, r.ed_sd, r.config_hash
            )
            .expect("write to string");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format("unexpected run table header".into()));
        }
        let bad = |what: &str| Error::Format(format!("bad run table field {what}"));
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("run table row has {} fields", f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(f[i]));
            rows.push(RunRow {
                method: f[0].to_string(),
                scenario: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad(f[2]))?,
                sr_mean: num(3)?,
                sr_sd: num(4)?,
                cp_mean: num(5)?,
                cp_sd: num(6)?,
                ed_mean: num(7)?,
                ed_sd: num(8)?,
                config_hash: f[9].to_string(),
            });
        }
        Ok(Self { rows })
    }
}

pub fn records_to_jsonl(records: &[EpisodeRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("episode record serializes"));
        s.push('\n');
    }
    s
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EpisodeRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Serialize)]
struct EvalKey<'a> {
    method: &'a str,
    scenario: &'a ScenarioSpec,
    skills: &'a SkillConfig,
    n: usize,
    seed0: u64,
    policy: &'a str,
}

/// Runs `n` episodes on seeds `seed0..seed0 + n` with a fresh policy from
/// `make` per episode (given the episode seed), in parallel, and aggregates
/// them in seed order. `policy_hash` identifies the policy's own inputs.
pub fn evaluate<P, F>(
    method: &str,
    spec: &ScenarioSpec,
    skills: &SkillConfig,
    n: usize,
    seed0: u64,
    policy_hash: &str,
    make: F,
) -> Result<(RunRow, Vec<EpisodeRecord>)>
where
    P: HighLevelPolicy,
    F: Fn(u64) -> P + Sync,
{
    let cfg = ExecConfig::for_scenario(spec, skills.clone());
    let config_hash = content_hash(&EvalKey {
        method,
        scenario: spec,
        skills,
        n,
        seed0,
        policy: policy_hash,
    });
    let records = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = seed0 + i;
            let mut policy = make(seed);
            let (metrics, reached, trace) = run_scored(&mut policy, spec, &cfg, seed)?;
            Ok(EpisodeRecord {
                method: method.to_string(),
                scenario: spec.name.clone(),
                seed,
                config_hash: config_hash.clone(),
                metrics,
                stages_reached: reached,
                occupancy_violations: trace.occupancy_violations,
                atomicity_violations: trace.atomicity_violations,
                proposals: trace.decisions.iter().map(|d| d.proposed).collect(),
                timeline: trace.timeline,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let row = RunRow::from_records(&records)?;
    Ok((row, records))
}

/// Allows at most one non-Wait skill at a time: while one runs, free arms
/// wait; when both arms are free and the inner policy starts two single-arm
/// skills, the right arm's is replaced by Wait.
pub struct Sequential<P> {
    pub inner: P,
}

impl<P: HighLevelPolicy> HighLevelPolicy for Sequential<P> {
    fn begin_episode(&mut self, state0: &WorldState) {
        self.inner.begin_episode(state0);
    }

    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        let mut out = self.inner.decide(ctx);
        let running = ctx.active.iter().any(|(_, s)| s.is_some_and(|k| k != SkillId::Wait));
        let waits = PerArm::from_fn(|a| ctx.free[a].then(Choice::wait));
        if running {
            return waits;
        }
        let acting = |c: &Option<Choice>| c.as_ref().is_some_and(|c| c.skill != SkillId::Wait);
        let bimanual = out.left.as_ref().is_some_and(|c| c.skill.is_bimanual());
        if ctx.both_free() && acting(&out.left) && acting(&out.right) && !bimanual {
            out.right = waits.right;
        }
        out
    }
}

/// Restricts the inner policy to `arm`: the other arm always waits and is
/// presented to the inner policy as busy, and bimanual choices become Wait.
pub struct SingleArm<P> {
    pub inner: P,
    pub arm: Arm,
}

impl<P: HighLevelPolicy> HighLevelPolicy for SingleArm<P> {
    fn begin_episode(&mut self, state0: &WorldState) {
        self.inner.begin_episode(state0);
    }

    fn decide(&mut self, ctx: &DecisionContext) -> PerArm<Option<Choice>> {
        let other = self.arm.other();
        let mut free = ctx.free;
        let mut active = ctx.active;
        if free[other] {
            free[other] = false;
            active[other] = Some(SkillId::Wait);
        }
        let mut out = PerArm::new(None, None);
        if ctx.free[self.arm] {
            let view = DecisionContext {
                state: ctx.state,
                free,
                active,
                index: ctx.index,
                cap_time: ctx.cap_time,
            };
            let c = self.inner.decide(&view)[self.arm].clone();
            out[self.arm] = Some(c.filter(|c| !c.skill.is_bimanual()).unwrap_or_else(Choice::wait));
        }
        if ctx.free[other] {
            out[other] = Some(Choice::wait());
        }
        out
    }
}

fn skill_color(k: SkillId) -> &'static str {
    match k {
        SkillId::PushSingle => "#4e79a7",
        SkillId::RotateSingle => "#59a14f",
        SkillId::PushBimanual => "#f28e2b",
        SkillId::RotateBimanual => "#b07aa1",
        SkillId::PickPlaceBimanual => "#e15759",
        SkillId::Wait => "#d9d9d9",
    }
}

/// Two-track schedule chart. Bimanual skills span both tracks.
pub fn render_gantt(timeline: &Timeline, title: &str) -> String {
    let (left, top, track_h, px_per_s) = (40.0, 30.0, 40.0, 40.0);
    let horizon = timeline.intervals.iter().map(|i| i.end).fold(0.0f64, f64::max).ceil().max(1.0);
    let width = left + horizon * px_per_s + 20.0;
    let height = top + 2.0 * track_h + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left:.0}" y="16">{}</text>"#, escape(title));
    for (row, arm) in Arm::BOTH.iter().enumerate() {
        let y = top + row as f64 * track_h + track_h / 2.0 + 4.0;
        let _ = writeln!(s, r#"<text x="8" y="{y:.1}">{}</text>"#, arm.short());
    }
    let axis_y = top + 2.0 * track_h;
    let _ = writeln!(
        s,
        r##"<line x1="{left:.1}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="#333"/>"##,
        left + horizon * px_per_s
    );
    for t in 0..=horizon as usize {
        let x = left + t as f64 * px_per_s;
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{axis_y:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"##,
            axis_y + 4.0,
            axis_y + 16.0
        );
    }
    let mut drawn = std::collections::BTreeSet::new();
    for i in &timeline.intervals {
        let bimanual = i.skill.is_bimanual();
        if bimanual && !drawn.insert(i.seq) {
            continue;
        }
        let row = if bimanual { 0.0 } else { i.arm.index() as f64 };
        let h = if bimanual { 2.0 * track_h } else { track_h };
        let x = left + i.start * px_per_s;
        let w = ((i.end - i.start) * px_per_s).max(0.5);
        let y = top + row * track_h;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{:.2}" fill="{}" stroke="#fff"><title>{} {:?} {:.2}-{:.2}</title></rect>"##,
            y + 2.0,
            h - 4.0,
            skill_color(i.skill),
            i.skill,
            i.status,
            i.start,
            i.end
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
