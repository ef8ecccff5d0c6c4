use aoi_sched::harness::{mean_and_std_err, run_episode};
use aoi_sched::ppo::{train, PpoHyperparams, PpoScheduler};
use aoi_sched::sim::SimConfig;
use aoi_sched::traffic::ArrivalSpec;
use aoi_sched::derive_seed;

/// Mode evaluation against sampling on 30 paired episodes of a policy
/// trained on the idle/active two-UE instance. The policy keeps some mass
/// on the active UE, but its per-unit mode picks the idle one every slot,
/// so mode evaluation is significantly worse than sampling. This is why
/// evaluation defaults to sampling.
#[test]
fn mode_evaluation_can_starve_the_active_ue() {
    let sim = SimConfig::new(2, 1)
        .with_arrivals(vec![ArrivalSpec::silent(), ArrivalSpec::poisson(1500.0)])
        .with_horizon(512);
    let hp = PpoHyperparams {
        rollout_length: 512,
        max_iterations: 20,
        patience: 0,
        ..PpoHyperparams::default()
    };
    let policy = train(&sim, &hp, 3).unwrap().policy;
    let mut diffs = Vec::new();
    for episode in 0..30 {
        let config = sim.clone().with_seed(derive_seed(77, episode)).with_horizon(1000);
        let mode = run_episode(&config, &mut PpoScheduler::new(policy.clone())).unwrap();
        let sampled = run_episode(&config, &mut PpoScheduler::sampling(policy.clone(), episode)).unwrap();
        diffs.push(mode.total_reward - sampled.total_reward);
    }
    let (mean, se) = mean_and_std_err(&diffs);
    assert!(mean + 2.0 * se < 0.0, "mode minus sample reward {mean} ± {se}");
}
