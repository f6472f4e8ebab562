use rand::Rng;
use rarlhf_core::mdp::{pad_batch, Trajectory};
use rarlhf_core::policy::{batched_forward_pass, grad_check, PolicyParams};
use rarlhf_core::rng;
use rarlhf_core::trainer::{ppo_loss_and_grad, PpoConfig};

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut r = rng::stream(seed, &[]);
    let mut p = PolicyParams::zeros(2, 2).unwrap();
    for w in p.as_mut_slice() {
        *w = r.random_range(-scale..scale);
    }
    p
}

/// Two episodes, three generated tokens each, over a two-token vocabulary.
/// One position has its old log-probability pushed so its ratio sits in the
/// clipped region and one has its old value pushed so the clipped value
/// error dominates.
#[test]
fn total_loss_gradient_matches_finite_differences() {
    let cfg = PpoConfig::default();
    let mut batch = pad_batch(&[
        Trajectory::from_parts(&[0], &[1, 1, 0]),
        Trajectory::from_parts(&[1, 0], &[0, 1, 1]),
    ])
    .unwrap();

    let params = random_params(7, 0.8);
    let mut old = params.clone();
    let mut r = rng::stream(8, &[]);
    for w in old.as_mut_slice() {
        *w += r.random_range(-0.03..0.03);
    }
    let fwd = batched_forward_pass(&old, &batch).unwrap();
    batch.logprobs_actor = fwd.logprobs;
    batch.values = fwd.values;

    let masked: Vec<(usize, usize)> = (0..batch.rows())
        .flat_map(|row| (0..batch.positions()).map(move |t| (row, t)))
        .filter(|&(row, t)| batch.masks[row][t])
        .collect();
    assert_eq!(masked.len(), 6);

    let mut advantages = vec![vec![0.0; batch.positions()]; 2];
    let mut returns = vec![vec![0.0; batch.positions()]; 2];
    for &(row, t) in &masked {
        advantages[row][t] = r.random_range(-1.5..1.5);
        returns[row][t] = r.random_range(-1.0..1.0);
    }
    let (row, t) = masked[1];
    advantages[row][t] = 1.0;
    batch.logprobs_actor[row][t] -= 0.6;
    let (row, t) = masked[4];
    batch.values[row][t] += 1.0;
    returns[row][t] = batch.values[row][t] - 3.0;

    let err = grad_check(
        &params,
        |p| {
            let (losses, grad) = ppo_loss_and_grad(p, &batch, &advantages, &returns, &cfg).unwrap();
            (losses.total, grad)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}
