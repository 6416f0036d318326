use bisched_core::skills::nominal::{run_scripted, sample_task};
use bisched_core::skills::{SkillConfig, SkillId, SkillStatus};
use bisched_core::world::WorldConfig;

fn success_rate(skill: SkillId, n: u64) -> f64 {
    let world = WorldConfig::default();
    let cfg = SkillConfig::default();
    let mut ok = 0;
    for seed in 0..n {
        let task = sample_task(skill, seed).unwrap();
        let (end, status) = run_scripted(&task, &world, &cfg);
        if status == SkillStatus::Succeeded {
            assert!(task.params.goal_met(&end));
            ok += 1;
        }
    }
    ok as f64 / n as f64
}

#[test]
fn scripted_skills_are_competent() {
    let rates: Vec<_> = SkillId::ALL
        .into_iter()
        .filter(|&k| k != SkillId::Wait)
        .map(|k| (k, success_rate(k, 200)))
        .collect();
    for (skill, rate) in &rates {
        println!("{skill}: {rate:.3}");
    }
    for (skill, rate) in rates {
        assert!(rate >= 0.95, "{skill}: success rate {rate}");
    }
}
