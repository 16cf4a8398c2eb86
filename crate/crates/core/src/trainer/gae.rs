/// Generalized advantage estimates and value targets for `envs × steps`
/// transitions stored row-major per environment.
///
/// A done step does not bootstrap. Invalid steps get zero advantage and
/// end the recursion like a terminal step.
#[allow(clippy::too_many_arguments)]
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    valid: &[bool],
    bootstrap: &[f64],
    steps: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    for (e, &boot) in bootstrap.iter().enumerate() {
        let (mut next_v, mut next_a) = (boot, 0.0);
        for t in (0..steps).rev() {
            let i = e * steps + t;
            if !valid[i] {
                next_v = 0.0;
                next_a = 0.0;
                continue;
            }
            let keep = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_v * keep - values[i];
            let a = delta + gamma * lambda * keep * next_a;
            adv[i] = a;
            ret[i] = a + values[i];
            next_v = values[i];
            next_a = a;
        }
    }
    (adv, ret)
}

/// Shifts and scales valid entries to mean 0 and standard deviation 1.
pub fn normalize(adv: &mut [f64], valid: &[bool], eps: f64) {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return;
    }
    let mean = adv.iter().zip(valid).filter(|(_, &v)| v).map(|(a, _)| a).sum::<f64>() / n as f64;
    let var = adv
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(a, _)| (a - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt() + eps;
    for (a, &v) in adv.iter_mut().zip(valid) {
        *a = if v { (*a - mean) / std } else { 0.0 };
    }
}
