//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use bisched_core::config::sha256_hex;
use bisched_core::datagen::{generate_dataset, Dataset, DemoRecord};
use bisched_core::evalbench::{evaluate, records_from_jsonl, records_to_jsonl, EpisodeRecord, RunRow, RunTable, Sequential, SingleArm};
use bisched_core::executor::{run_episode, ExecConfig, RandomPolicy, ReplayPolicy};
use bisched_core::expert::ExpertPolicy;
use bisched_core::rewards::{contact_reward, goal_reward, total_reward, RewardConfig};
use bisched_core::scheduler::train::{batch_input, loss_and_grad};
use bisched_core::scheduler::{loss, train, Model, ModelConfig, SchedulerOutput, SchedulerPolicy, TrainConfig, TrainReport};
use bisched_core::seeds::derive_u64;
use bisched_core::skills::{SkillConfig, SkillParams};
use bisched_core::world::{reset, reset_named, Arm, ArmCommand, PerArm, ScenarioSpec};
use bisched_core::geometry::Vec2;

const MASTER_SEED: u64 = 0;
const SCENARIOS: [&str; 2] = ["one_object", "two_objects"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1 - tanh(1) and 1 - tanh(3), evaluated to 40 digits in decimal arithmetic.
const ONE_MINUS_TANH1: f64 = 0.238_405_844_044_235_111_880_5;
const ONE_MINUS_TANH3: f64 = 0.004_945_246_313_269_548_668_1;

fn rewards() -> Outcome {
    let cfg = RewardConfig::default();
    let mut worst = 0.0f64;
    for (d_mult, factor) in [(0.0, 1.0), (1.0, ONE_MINUS_TANH1), (3.0, ONE_MINUS_TANH3)] {
        let c = contact_reward(d_mult * cfg.sigma_c, &cfg);
        let (p, _) = goal_reward(d_mult * cfg.sigma_p, 0.0, &cfg);
        let (_, r) = goal_reward(0.0, d_mult * cfg.sigma_r, &cfg);
        worst = worst
            .max((c - cfg.alpha_c * factor).abs())
            .max((p - cfg.alpha_p * factor).abs())
            .max((r - cfg.alpha_r * factor).abs());
    }
    let mut sums_exact = true;
    for seed in 0..50 {
        let s = reset_named("two_objects", seed).unwrap();
        let o = &s.objects[0];
        let params = SkillParams::pick_place(o.id, s.goal.per_object_target[&o.id]);
        let cmd = ArmCommand::velocity(Vec2::new(0.1 * (seed as f64).sin(), 0.05));
        let b = total_reward(&s, &Arm::BOTH, &PerArm::new(cmd, cmd), &params, &cfg);
        sums_exact &= b.total == b.contact + b.goal_pos + b.goal_rot + b.success - b.energy;
    }
    outcome(
        worst <= 1e-9 && sums_exact,
        format!("max closed-form error {worst:.2e}, breakdown sums exact: {sums_exact}"),
    )
}

fn batch_loss(m: &Model, records: &[DemoRecord]) -> f64 {
    let idx: Vec<usize> = (0..records.len()).collect();
    let out = m.forward(&batch_input(records, &idx, m.cfg.window), idx.len());
    out.chunks(m.cfg.out_dim())
        .zip(records)
        .map(|(row, r)| loss(&SchedulerOutput::from_raw(row), r, 1.0).total)
        .sum::<f64>()
        / records.len() as f64
}

fn gradients() -> Outcome {
    let spec = ScenarioSpec::builtin("two_objects").unwrap();
    let (ds, _) = generate_dataset(&spec, 4, 11, &SkillConfig::default()).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..5u64 {
        let mut m = Model::new(ModelConfig::new(2, 8, 1, 2), seed).unwrap();
        let start = (seed as usize * 5) % ds.records.len().saturating_sub(6).max(1);
        let records = &ds.records[start..start + 6];
        let idx: Vec<usize> = (0..records.len()).collect();
        let (out, cache) = m.forward_cached(&batch_input(records, &idx, m.cfg.window), records.len());
        let o = m.cfg.out_dim();
        let mut d_out = vec![0.0; out.len()];
        for ((row, r), d) in out.chunks(o).zip(records).zip(d_out.chunks_mut(o)) {
            loss_and_grad(row, r, 1.0, 1.0 / records.len() as f64, d);
        }
        let mut g = vec![0.0; m.n_params()];
        m.backward(&cache, &d_out, &mut g);
        let eps = 1e-5;
        for i in 0..m.n_params() {
            let p0 = m.params[i];
            m.params[i] = p0 + eps;
            let up = batch_loss(&m, records);
            m.params[i] = p0 - eps;
            let down = batch_loss(&m, records);
            m.params[i] = p0;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-5));
            checked += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!("{checked} parameters over 5 seeds, worst relative error {worst:.2e}"),
    )
}

fn executor_invariants() -> Outcome {
    let skills = SkillConfig::default();
    let (mut occ, mut atom, mut closure_failures, mut invalid) = (0, 0, 0, 0);
    for i in 0..1000u64 {
        let spec = ScenarioSpec::builtin(SCENARIOS[(i % 2) as usize]).unwrap();
        let cfg = ExecConfig::for_scenario(&spec, skills.clone());
        let s0 = reset(&spec, i).unwrap();
        let trace = run_episode(&mut RandomPolicy::new(derive_u64(MASTER_SEED, &format!("random/{i}"))), &s0, &cfg);
        occ += trace.occupancy_violations;
        atom += trace.atomicity_violations;
        invalid += trace.timeline.validate().is_err() as usize;
        let again = run_episode(&mut ReplayPolicy::from_trace(&trace), &s0, &cfg);
        closure_failures += (again.final_state != trace.final_state || again.timeline != trace.timeline) as usize;
    }
    outcome(
        occ == 0 && atom == 0 && closure_failures == 0 && invalid == 0,
        format!("1000 episodes: occupancy {occ}, atomicity {atom}, invalid timelines {invalid}, replay mismatches {closure_failures}"),
    )
}

fn expert_competence() -> Outcome {
    let skills = SkillConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, floor) in [("one_object", 0.9), ("two_objects", 0.8)] {
        let spec = ScenarioSpec::builtin(name).unwrap();
        let (_, report) = generate_dataset(&spec, 200, derive_u64(MASTER_SEED, "expert-check"), &skills).unwrap();
        pass &= report.retention_rate >= floor && report.replay_mismatches == 0;
        parts.push(format!(
            "{name} SR {:.3} (floor {floor}), replay mismatches {}",
            report.retention_rate, report.replay_mismatches
        ));
    }
    outcome(pass, parts.join("; "))
}

/// Everything one pipeline run produces.
struct PipelineRun {
    dataset_hash: String,
    report: TrainReport,
    train_seconds: f64,
    table: RunTable,
    records: BTreeMap<String, Vec<EpisodeRecord>>,
}

const EVAL_EPISODES: usize = 100;

/// Data generation on both scenarios, training at defaults, evaluation of the
/// expert, the scheduler and its wrapped variants on seeds 0..100.
fn pipeline(master: u64) -> PipelineRun {
    let skills = SkillConfig::default();
    let parts: Vec<Dataset> = SCENARIOS
        .iter()
        .map(|name| {
            let spec = ScenarioSpec::builtin(name).unwrap();
            generate_dataset(&spec, 1000, derive_u64(master, &format!("gen/{name}")), &skills)
                .unwrap()
                .0
        })
        .collect();
    let ds = Dataset::concat(&parts).unwrap();
    let dataset_hash = sha256_hex(&ds.to_bytes());
    let cfg = TrainConfig {
        seed: master,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (model, report) = train(&ds, &cfg, |_| {}).unwrap();
    let train_seconds = t.elapsed().as_secs_f64();
    let policy_hash = report.config_hash.clone() + &report.dataset_hash;

    let mut table = RunTable::default();
    let mut records = BTreeMap::new();
    for name in SCENARIOS {
        let spec = ScenarioSpec::builtin(name).unwrap();
        let sched = |_| SchedulerPolicy::new(model.clone(), spec.world.clone());
        let mut runs = vec![
            evaluate("expert", &spec, &skills, EVAL_EPISODES, 0, "expert", |s| {
                ExpertPolicy::for_scenario(&spec, skills.clone(), s)
            })
            .unwrap(),
            evaluate("scheduler", &spec, &skills, EVAL_EPISODES, 0, &policy_hash, sched).unwrap(),
            evaluate("single_arm", &spec, &skills, EVAL_EPISODES, 0, &policy_hash, |s| SingleArm {
                inner: sched(s),
                arm: Arm::Left,
            })
            .unwrap(),
        ];
        if name == "two_objects" {
            runs.push(evaluate("seq", &spec, &skills, EVAL_EPISODES, 0, &policy_hash, |s| Sequential { inner: sched(s) }).unwrap());
        }
        for (row, recs) in runs {
            records.insert(format!("{}/{}", row.method, name), recs);
            table.rows.push(row);
        }
    }
    PipelineRun {
        dataset_hash,
        report,
        train_seconds,
        table,
        records,
    }
}

fn row<'a>(run: &'a PipelineRun, method: &str, scenario: &str) -> &'a RunRow {
    run.table
        .rows
        .iter()
        .find(|r| r.method == method && r.scenario == scenario)
        .expect("row evaluated")
}

fn behavior_cloning(run: &PipelineRun) -> Outcome {
    let last = run.report.epochs.last().expect("at least one epoch");
    let acc = last.heldout.acc_l.min(last.heldout.acc_r);
    let mut pass = acc >= 0.9 && run.train_seconds < 15.0 * 60.0;
    let mut parts = vec![format!(
        "held-out accuracy L {:.3} R {:.3}, training {:.0} s",
        last.heldout.acc_l, last.heldout.acc_r, run.train_seconds
    )];
    for name in SCENARIOS {
        let (e, s) = (row(run, "expert", name), row(run, "scheduler", name));
        let ratio = if e.sr_mean > 0.0 { s.sr_mean / e.sr_mean } else { 0.0 };
        pass &= ratio >= 0.7;
        parts.push(format!("{name} SR {:.2} vs expert {:.2} (ratio {ratio:.3})", s.sr_mean, e.sr_mean));
    }
    outcome(pass, parts.join("; "))
}

fn parallelism(run: &PipelineRun) -> Outcome {
    let (full, seq) = (row(run, "scheduler", "two_objects"), row(run, "seq", "two_objects"));
    let reduction = 1.0 - full.ed_mean / seq.ed_mean;
    outcome(
        reduction >= 0.10 && full.sr_mean >= seq.sr_mean,
        format!(
            "two_objects ED {:.3} s vs sequential {:.3} s ({:.1}% lower), SR {:.2} vs {:.2}",
            full.ed_mean,
            seq.ed_mean,
            100.0 * reduction,
            full.sr_mean,
            seq.sr_mean
        ),
    )
}

fn single_arm(run: &PipelineRun) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in SCENARIOS {
        let r = row(run, "single_arm", name);
        pass &= r.sr_mean == 0.0 && r.cp_mean > 0.0;
        parts.push(format!("{name} SR {:.2} CP {:.3}", r.sr_mean, r.cp_mean));
    }
    outcome(pass, parts.join("; "))
}

fn metric_contracts(run: &PipelineRun) -> Outcome {
    let skills = SkillConfig::default();
    let (mut cp_bad, mut cap_bad, mut episodes) = (0, 0, 0);
    let mut recomputed = RunTable::default();
    for r in &run.table.rows {
        let recs = &run.records[&format!("{}/{}", r.method, r.scenario)];
        let cap = ExecConfig::for_scenario(&ScenarioSpec::builtin(&r.scenario).unwrap(), skills.clone()).cap_time();
        for e in recs {
            episodes += 1;
            if e.metrics.success {
                cp_bad += (e.metrics.completion_progress != 1.0) as usize;
            } else {
                cap_bad += (e.metrics.episode_duration != cap) as usize;
            }
        }
        let parsed = records_from_jsonl(&records_to_jsonl(recs)).unwrap();
        recomputed.rows.push(RunRow::from_records(&parsed).unwrap());
    }
    let identical = recomputed.to_csv() == run.table.to_csv();
    outcome(
        cp_bad == 0 && cap_bad == 0 && identical,
        format!("{episodes} episodes: success with CP < 1: {cp_bad}, failures with ED != cap: {cap_bad}; table recomputed bit-identically: {identical}"),
    )
}

fn determinism(a: &PipelineRun, b: &PipelineRun, seconds: f64) -> Outcome {
    let same_data = a.dataset_hash == b.dataset_hash;
    let (la, lb) = (a.report.epochs[0].train.loss, b.report.epochs[0].train.loss);
    let same_loss = la.to_bits() == lb.to_bits();
    let same_table = a.table.to_csv() == b.table.to_csv();
    outcome(
        same_data && same_loss && same_table && seconds < 20.0 * 60.0,
        format!(
            "dataset bytes equal {same_data}, epoch-0 loss {la} vs {lb}, run tables equal {same_table}, two runs took {seconds:.0} s"
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, budget: Option<f64>, t: Instant, o: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        let in_time = budget.map_or(true, |b| secs < b);
        let pass = o.pass && in_time;
        failures += (!pass) as usize;
        let limit = budget.map_or(String::new(), |b| format!(", limit {b:.0} s"));
        println!(
            "{} [{id}] {name}: {} ({secs:.1} s{limit})",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };

    let t = Instant::now();
    report(1, "reward closed forms", Some(1.0), t, rewards());
    let t = Instant::now();
    report(2, "scheduler gradients", Some(30.0), t, gradients());
    let t = Instant::now();
    report(3, "executor invariants", Some(120.0), t, executor_invariants());
    let t = Instant::now();
    report(4, "expert competence", Some(300.0), t, expert_competence());

    let t_all = Instant::now();
    let run_a = pipeline(MASTER_SEED);
    let t = Instant::now();
    report(5, "behavior cloning", None, t, behavior_cloning(&run_a));
    report(6, "parallelism benefit", None, t, parallelism(&run_a));
    report(7, "single-arm ablation", None, t, single_arm(&run_a));
    let t = Instant::now();
    report(8, "metric contracts", Some(60.0), t, metric_contracts(&run_a));
    let run_b = pipeline(MASTER_SEED);
    let t = Instant::now();
    report(9, "determinism", None, t, determinism(&run_a, &run_b, t_all.elapsed().as_secs_f64()));

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
