use bisched_core::rewards::RewardConfig;
use bisched_core::skill_learning::{rollout_return, train_skill, Controller, SkillLearnConfig};
use bisched_core::skills::{SkillConfig, SkillId};

#[test]
fn scripted_push_succeeds_through_the_learning_rollout() {
    let (skills, reward) = (SkillConfig::default(), RewardConfig::default());
    let results: Vec<(f64, bool)> = (0..200)
        .map(|i| rollout_return(&Controller::Scripted, SkillId::PushSingle, 1000 + i, &skills, &reward).unwrap())
        .collect();
    let wins = results.iter().filter(|r| r.1).count();
    assert!(wins >= 190, "scripted push won {wins}/200");
    // Successful rollouts collect the bonus, failures cannot.
    let bonus = reward.success_bonus;
    assert!(results.iter().filter(|r| r.1).all(|r| r.0 > bonus));
}

#[test]
fn cem_learns_single_arm_push() {
    let cfg = SkillLearnConfig::default();
    assert_eq!((cfg.population, cfg.elites, cfg.iterations), (64, 8, 30));
    let (_, report) = train_skill(SkillId::PushSingle, &cfg, &SkillConfig::default()).unwrap();
    assert!(report.heldout_success >= 0.7, "held-out success {}", report.heldout_success);
    let first = report.mean_return[0];
    let last = *report.mean_return.last().unwrap();
    assert!(last > first, "population return {first} -> {last}");
}
