use manipdiff::sim::{
    evaluate_suite, read_demo, rollout, scripted_expert, success_predicate, write_demo, Policy,
    SuiteEntry,
};
use manipdiff::Scenario;
use proptest::prelude::*;

fn scenario(name: &str) -> Scenario {
    let path = format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    Scenario::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn both() -> [Scenario; 2] {
    [scenario("plate_wipe"), scenario("bar_lift")]
}

#[test]
fn scenario_files_validate_and_round_trip() {
    for s in both() {
        s.validate().unwrap();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}

#[test]
fn expert_meets_the_success_predicate() {
    for s in both() {
        let profile = s.posture_profile();
        let seeds: Vec<u64> = (0..20).collect();
        let demos: Vec<_> = seeds
            .iter()
            .map(|&seed| scripted_expert(&s, &profile, seed).unwrap())
            .collect();
        let passed = demos
            .iter()
            .filter(|d| {
                let tracking: Vec<f64> = d.steps.iter().map(|r| r.tracking_error).collect();
                let tci: Vec<f64> = d
                    .steps
                    .iter()
                    .map(|r| s.tci(&r.bme.velocity_bme).unwrap())
                    .collect();
                success_predicate(&s.success, &tracking, &tci)
            })
            .count();
        assert!(passed >= 19, "{}: {passed}/20 expert demos succeed", s.id);
    }
}

#[test]
fn replayed_demonstrations_always_succeed() {
    for s in both() {
        let profile = s.posture_profile();
        for seed in 0..5 {
            let demo = scripted_expert(&s, &profile, seed).unwrap();
            let entry = SuiteEntry {
                variant: "replay".into(),
                scenario: &s,
                policy: Policy::Replay(&demo),
                guidance: None,
                score: &profile,
            };
            let rows = evaluate_suite(&[entry], &[seed]).unwrap();
            assert_eq!(rows[0].msr, 1.0, "{} seed {seed}", s.id);
        }
    }
}

#[test]
fn random_policy_never_succeeds() {
    for s in both() {
        let profile = s.posture_profile();
        let entry = SuiteEntry {
            variant: "random".into(),
            scenario: &s,
            policy: Policy::Random { scale: 0.3 },
            guidance: None,
            score: &profile,
        };
        let seeds: Vec<u64> = (0..10).collect();
        assert_eq!(evaluate_suite(&[entry], &seeds).unwrap()[0].msr, 0.0);
    }
}

#[test]
fn demonstrations_and_rollouts_are_deterministic() {
    let s = scenario("plate_wipe");
    let profile = s.posture_profile();
    let a = scripted_expert(&s, &profile, 11).unwrap();
    let b = scripted_expert(&s, &profile, 11).unwrap();
    assert_eq!(write_demo(&a), write_demo(&b));
    assert_eq!(read_demo(&write_demo(&a)).unwrap(), a);
    let policy = Policy::Random { scale: 0.1 };
    assert_eq!(
        rollout(&policy, &s, None, &profile, 3).unwrap(),
        rollout(&policy, &s, None, &profile, 3).unwrap()
    );
}

#[test]
fn inattentive_expert_still_tracks_the_path() {
    let mut s = scenario("plate_wipe");
    s.expert.posture_attention = 0.0;
    let d = scripted_expert(&s, &s.posture_profile(), 4).unwrap();
    assert!(!d.attentive);
    let on_path = d
        .steps
        .iter()
        .filter(|r| r.tracking_error < s.success.tracking_tolerance)
        .count();
    assert_eq!(on_path, d.steps.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// An episode that stays on the path but ends in a poorly aligned posture fails.
    #[test]
    fn low_final_compatibility_fails(low in 0.0f64..0.79, early in 0.8f64..1.0) {
        let s = scenario("plate_wipe");
        let n = s.episode_length;
        let tracking = vec![0.0; n];
        let mut tci = vec![early; n];
        for v in &mut tci[n - s.success.hold_steps..] {
            *v = low;
        }
        prop_assert!(!success_predicate(&s.success, &tracking, &tci));
        prop_assert!(success_predicate(&s.success, &tracking, &vec![early; n]));
    }

    /// High compatibility does not rescue an episode that leaves the path.
    #[test]
    fn off_path_episodes_fail(off in 0.06f64..1.0, frac in 0.1f64..1.0) {
        let s = scenario("plate_wipe");
        let n = s.episode_length;
        let bad = ((frac * n as f64).ceil() as usize).max(3);
        let tracking: Vec<f64> = (0..n).map(|i| if i < bad { off } else { 0.0 }).collect();
        prop_assert!(!success_predicate(&s.success, &tracking, &vec![1.0; n]));
    }
}
