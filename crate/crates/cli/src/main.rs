use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bisched_core::config::{sha256_hex, RunConfig};
use bisched_core::datagen::{generate_dataset, Dataset};
use bisched_core::evalbench::{
    evaluate, records_from_jsonl, records_to_jsonl, render_gantt, replay_record, RunRow, RunTable, Sequential, SingleArm,
};
use bisched_core::expert::ExpertPolicy;
use bisched_core::scheduler::{load_checkpoint, train, write_checkpoint, SchedulerPolicy};
use bisched_core::skill_learning::{train_skill, write_policy};
use bisched_core::skills::{registry, SkillId};
use bisched_core::world::{Arm, ScenarioSpec};

#[derive(Parser)]
#[command(name = "bisched", version, about = "Bimanual skill scheduling pipelines")]
struct Cli {
    /// Run configuration (TOML); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical processors.
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the skill library.
    Skills {
        #[command(subcommand)]
        action: SkillsAction,
    },
    /// Roll out the expert and write a demonstration dataset.
    GenData {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a low-level skill controller.
    TrainSkill {
        #[arg(long, default_value = "push_single")]
        skill: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the scheduler on one or more datasets.
    TrainScheduler {
        /// Dataset file; repeat to train on several.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a method and update the run table.
    Eval {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Scheduler checkpoint, for the learned methods.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Acting arm of the single-arm ablation.
        #[arg(long, value_enum, default_value = "left")]
        arm: ArmArg,
        #[command(flatten)]
        common: Common,
    },
    /// Draw Gantt charts of recorded episodes.
    Render {
        #[arg(long)]
        episode: PathBuf,
        /// Only the episode with this seed.
        #[arg(long = "only-seed")]
        only_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run recorded episodes and compare their metrics.
    Replay {
        #[arg(long)]
        episode: PathBuf,
    },
}

#[derive(Subcommand)]
enum SkillsAction {
    List,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Expert,
    #[value(name = "expert_seq")]
    ExpertSeq,
    Scheduler,
    Seq,
    #[value(name = "single_arm")]
    SingleArm,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Expert => "expert",
            Method::ExpertSeq => "expert_seq",
            Method::Scheduler => "scheduler",
            Method::Seq => "seq",
            Method::SingleArm => "single_arm",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Left,
    Right,
}

/// Usage and configuration errors exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    use bisched_core::Error as E;
    let usage = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<E>(),
            Some(E::Config(_) | E::UnknownScenario(_) | E::UnknownSkill(_) | E::TomlDe(_))
        ) || c.downcast_ref::<UsageError>().is_some()
    });
    if usage {
        2
    } else {
        1
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Skills { action: SkillsAction::List } => {
            println!("{:<22} {:>5}  params", "skill", "arity");
            for s in registry() {
                println!("{:<22} {:>5}  {}", s.id.name(), s.arity, s.schema);
            }
            Ok(())
        }
        Command::GenData { scenario, n, common } => {
            apply(&mut cfg, scenario, common)?;
            if let Some(n) = n {
                cfg.episodes = n;
            }
            gen_data(&cfg)
        }
        Command::TrainSkill { skill, iterations, common } => {
            apply(&mut cfg, None, common)?;
            if let Some(i) = iterations {
                cfg.skill_learning.iterations = i;
            }
            train_skill_cmd(&cfg, skill.parse()?)
        }
        Command::TrainScheduler { data, epochs, common } => {
            apply(&mut cfg, None, common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.seed = cfg.seed;
            train_scheduler(&cfg, &data)
        }
        Command::Eval {
            method,
            scenario,
            n,
            checkpoint,
            arm,
            common,
        } => {
            let seed = common.seed;
            apply(&mut cfg, scenario, Common { seed: None, out: common.out })?;
            if let Some(s) = seed {
                cfg.eval_seed = s;
            }
            if let Some(n) = n {
                cfg.eval_episodes = n;
            }
            let arm = match arm {
                ArmArg::Left => Arm::Left,
                ArmArg::Right => Arm::Right,
            };
            eval(&cfg, method, checkpoint.as_deref(), arm)
        }
        Command::Render { episode, only_seed, out } => render(&episode, only_seed, out.as_deref()),
        Command::Replay { episode } => replay(&cfg, &episode),
    }
}

fn apply(cfg: &mut RunConfig, scenario: Option<String>, common: Common) -> Result<()> {
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = common.out {
        cfg.out = o;
    }
    cfg.validate()?;
    Ok(())
}

#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    artifacts: BTreeMap<String, Artifact>,
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    sha256: String,
    bytes: u64,
    command: String,
    config_hash: String,
    seed: u64,
}

/// Writes `bytes` to `dir/name` and records it in `dir/manifest.json`.
fn write_artifact(cfg: &RunConfig, command: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let dir = &cfg.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let mpath = dir.join("manifest.json");
    let mut manifest: Manifest = match fs::read(&mpath) {
        Ok(b) => serde_json::from_slice(&b).with_context(|| format!("parsing {}", mpath.display()))?,
        Err(_) => Manifest::default(),
    };
    manifest.artifacts.insert(
        name.to_string(),
        Artifact {
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
    );
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn write_run_config(cfg: &RunConfig, command: &str, tag: &str) -> Result<()> {
    write_artifact(cfg, command, &format!("{command}{tag}.config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = ScenarioSpec::builtin(&cfg.scenario)?;
    let (ds, report) = generate_dataset(&spec, cfg.episodes, cfg.seed, &cfg.skills)?;
    log::info!(
        "{}: retained {}/{} episodes, {} records",
        report.scenario,
        report.retained,
        report.attempted,
        report.records
    );
    write_run_config(cfg, "gen-data", &format!("_{}", cfg.scenario))?;
    write_artifact(cfg, "gen-data", &format!("demos_{}.jsonl", cfg.scenario), &ds.to_bytes())?;
    write_artifact(
        cfg,
        "gen-data",
        &format!("gen_report_{}.json", cfg.scenario),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(())
}

fn train_skill_cmd(cfg: &RunConfig, skill: SkillId) -> Result<()> {
    let mut sl = cfg.skill_learning.clone();
    sl.seed = cfg.seed;
    sl.reward = cfg.reward.clone();
    let (policy, report) = train_skill(skill, &sl, &cfg.skills)?;
    log::info!(
        "{skill}: held-out success {:.3} after {} iterations ({:.1} s)",
        report.heldout_success,
        report.iterations,
        report.seconds
    );
    let mut bytes = Vec::new();
    write_policy(&policy, &report.config_hash, &mut bytes)?;
    write_run_config(cfg, "train-skill", &format!("_{skill}"))?;
    write_artifact(cfg, "train-skill", &format!("skill_{skill}.bin"), &bytes)?;
    write_artifact(cfg, "train-skill", &format!("skill_{skill}_report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn train_scheduler(cfg: &RunConfig, data: &[PathBuf]) -> Result<()> {
    let parts = data
        .iter()
        .map(|p| Dataset::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::concat(&parts)?;
    log::info!("training on {} records from {}", ds.records.len(), ds.header.scenario);
    let (model, report) = train(&ds, &cfg.train, |e| {
        log::info!(
            "epoch {:>3}: train loss {:.4} acc {:.3}/{:.3}  held-out loss {:.4} acc {:.3}/{:.3}",
            e.epoch,
            e.train.loss,
            e.train.acc_l,
            e.train.acc_r,
            e.heldout.loss,
            e.heldout.acc_l,
            e.heldout.acc_r
        )
    })?;
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes)?;
    write_run_config(cfg, "train-scheduler", "")?;
    write_artifact(cfg, "train-scheduler", "scheduler.bin", &bytes)?;
    write_artifact(cfg, "train-scheduler", "train_report.json", &serde_json::to_vec_pretty(&report)?)?;
    write_artifact(cfg, "train-scheduler", "train_curve.csv", report.to_csv().as_bytes())?;
    Ok(())
}

fn eval(cfg: &RunConfig, method: Method, checkpoint: Option<&Path>, arm: Arm) -> Result<()> {
    let spec = ScenarioSpec::builtin(&cfg.scenario)?;
    let (n, seed0, skills) = (cfg.eval_episodes, cfg.eval_seed, &cfg.skills);
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let name = method.name();
    let expert = |seed| ExpertPolicy::for_scenario(&spec, skills.clone(), seed);
    let (row, records) = match method {
        Method::Expert => evaluate(name, &spec, skills, n, seed0, "expert", expert)?,
        Method::ExpertSeq => evaluate(name, &spec, skills, n, seed0, "expert", |s| Sequential { inner: expert(s) })?,
        Method::Scheduler | Method::Seq | Method::SingleArm => {
            let path = checkpoint.ok_or_else(|| usage(format!("--checkpoint is required for {name}")))?;
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let model = load_checkpoint(path)?;
            let hash = sha256_hex(&bytes);
            let sched = |_| SchedulerPolicy::new(model.clone(), spec.world.clone());
            match method {
                Method::Scheduler => evaluate(name, &spec, skills, n, seed0, &hash, sched)?,
                Method::Seq => evaluate(name, &spec, skills, n, seed0, &hash, |s| Sequential { inner: sched(s) })?,
                _ => evaluate(name, &spec, skills, n, seed0, &hash, |s| SingleArm { inner: sched(s), arm })?,
            }
        }
    };
    println!(
        "{name} on {}: SR {:.3}  CP {:.3}  ED {:.3} s  (n = {})",
        row.scenario, row.sr_mean, row.cp_mean, row.ed_mean, row.n
    );
    write_artifact(
        cfg,
        "eval",
        &format!("episodes_{name}_{}.jsonl", cfg.scenario),
        records_to_jsonl(&records).as_bytes(),
    )?;
    let table_path = cfg.out.join("runtable.csv");
    let mut table = match fs::read_to_string(&table_path) {
        Ok(t) => RunTable::from_csv(&t)?,
        Err(_) => RunTable::default(),
    };
    merge_row(&mut table, row);
    write_artifact(cfg, "eval", "runtable.csv", table.to_csv().as_bytes())?;
    Ok(())
}

/// Replaces the row of the same method and scenario, keeping the table sorted.
fn merge_row(table: &mut RunTable, row: RunRow) {
    table.rows.retain(|r| !(r.method == row.method && r.scenario == row.scenario));
    table.rows.push(row);
    table
        .rows
        .sort_by(|a, b| (&a.scenario, &a.method).cmp(&(&b.scenario, &b.method)));
}

fn render(episode: &Path, only_seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(episode).with_context(|| format!("reading {}", episode.display()))?;
    let records = records_from_jsonl(&text)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let mut written = 0;
    for r in records.iter().filter(|r| only_seed.map_or(true, |s| s == r.seed)) {
        let title = format!(
            "{} on {}, seed {}: {} in {:.2} s (config {})",
            r.method,
            r.scenario,
            r.seed,
            if r.metrics.success { "success" } else { "failure" },
            r.metrics.episode_duration,
            &r.config_hash[..12.min(r.config_hash.len())]
        );
        let path = dir.join(format!("gantt_{}_{}_{}.svg", r.method, r.scenario, r.seed));
        fs::write(&path, render_gantt(&r.timeline, &title))?;
        written += 1;
    }
    if written == 0 {
        bail!("no episode matched");
    }
    println!("wrote {written} chart(s) to {}", dir.display());
    Ok(())
}

fn replay(cfg: &RunConfig, episode: &Path) -> Result<()> {
    let text = fs::read_to_string(episode).with_context(|| format!("reading {}", episode.display()))?;
    let records = records_from_jsonl(&text)?;
    let mut mismatches = 0;
    for r in &records {
        let spec = ScenarioSpec::builtin(&r.scenario)?;
        let m = replay_record(r, &spec, &cfg.skills)?;
        if m != r.metrics {
            mismatches += 1;
            eprintln!("seed {}: recorded {:?}, replayed {:?}", r.seed, r.metrics, m);
        }
    }
    println!("replayed {} episode(s), {} mismatch(es)", records.len(), mismatches);
    if mismatches > 0 {
        bail!("{mismatches} episode(s) did not reproduce");
    }
    Ok(())
}
