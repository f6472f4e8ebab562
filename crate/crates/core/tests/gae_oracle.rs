use proptest::prelude::*;
use rand::Rng;
use rarlhf_core::rng;
use rarlhf_core::trainer::compute_gae;

/// Straightforward reference: walk the generated span backwards, building
/// deltas first and then the discounted sum of deltas.
fn reference_gae(rewards: &[f64], values: &[f64], masks: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
    let span: Vec<usize> = (0..masks.len()).filter(|&t| masks[t]).collect();
    let mut out = vec![0.0; rewards.len()];
    for (k, &t) in span.iter().enumerate() {
        let mut total = 0.0;
        let mut weight = 1.0;
        for &s in &span[k..] {
            let next = span.iter().position(|&x| x == s).unwrap() + 1;
            let v_next = span.get(next).map_or(0.0, |&u| values[u]);
            let delta = rewards[s] + gamma * v_next - values[s];
            total += weight * delta;
            weight *= gamma * lam;
        }
        out[t] = total;
    }
    out
}

#[test]
fn matches_reference_on_random_instances() {
    let mut r = rng::stream(2024, &[]);
    for case in 0..100 {
        let len = r.random_range(1..=16);
        let start = r.random_range(0..len);
        let end = r.random_range(start + 1..=len);
        let masks: Vec<bool> = (0..len).map(|t| t >= start && t < end).collect();
        let rewards: Vec<f64> = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
        let gamma = r.random_range(0.5..=1.0);
        let lam = r.random_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&rewards, &values, &masks, gamma, lam).unwrap();
        let expected = reference_gae(&rewards, &values, &masks, gamma, lam);
        for t in 0..len {
            assert!((adv[t] - expected[t]).abs() <= 1e-9, "case {case} position {t}");
            if masks[t] {
                assert!((ret[t] - (adv[t] + values[t])).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn unit_discount_is_reward_to_go_minus_value(
        rewards in proptest::collection::vec(-3.0f64..3.0, 1..16),
        seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, &[]);
        let values: Vec<f64> = rewards.iter().map(|_| r.random_range(-3.0..3.0)).collect();
        let masks = vec![true; rewards.len()];
        let (adv, _) = compute_gae(&rewards, &values, &masks, 1.0, 1.0).unwrap();
        for t in 0..rewards.len() {
            let to_go: f64 = rewards[t..].iter().sum();
            prop_assert!((adv[t] - (to_go - values[t])).abs() < 1e-9);
        }
    }
}
