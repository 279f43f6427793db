use airway_unet::training::{convergence_check, Convergence, LossHistory, StopReason};

use super::common::Outcome;

fn history(vals: &[f64]) -> LossHistory {
    let mut h = LossHistory::new(50, 20);
    for v in vals {
        h.push(*v, *v);
    }
    h
}

/// Brute-force restatement of the rule: mean of the last 50 values against
/// the mean of the 50 values ending 20 epochs earlier.
fn oracle(vals: &[f64]) -> &'static str {
    let n = vals.len();
    if n < 70 {
        return "continue";
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let now = mean(&vals[n - 50..]);
    let before = mean(&vals[n - 70..n - 20]);
    if now > before * 1.05 {
        "increase"
    } else if now > before * (1.0 - 0.001) {
        "stall"
    } else {
        "continue"
    }
}

fn label(c: Convergence) -> &'static str {
    match c {
        Convergence::Continue => "continue",
        Convergence::Stop(StopReason::Increased { .. }) => "increase",
        Convergence::Stop(StopReason::Stalled { .. }) => "stall",
        Convergence::Stop(StopReason::EpochCap) => "cap",
    }
}

pub fn run() -> Outcome {
    let mut cases: Vec<(&str, Vec<f64>, &str)> = Vec::new();

    // Flat for 50 epochs, then a jump that lifts the moving average by 7%.
    let mut rise = vec![0.4; 50];
    rise.extend(std::iter::repeat(0.4 + 0.4 * 0.07 * 50.0 / 20.0).take(20));
    cases.push(("+7% rise", rise, "increase"));

    // A 4% lift is under the rise threshold, so it stops as a stall.
    let mut small_rise = vec![0.4; 50];
    small_rise.extend(std::iter::repeat(0.4 + 0.4 * 0.04 * 50.0 / 20.0).take(20));
    cases.push(("+4% rise", small_rise, "stall"));

    cases.push(("flat", vec![0.3; 90], "stall"));
    cases.push(("0.05%/20 epochs", (0..100).map(|e| 0.5 * (1.0 - 0.000025 * e as f64)).collect(), "stall"));
    cases.push(("healthy descent", (0..120).map(|e| 0.99f64.powi(e)).collect(), "continue"));
    cases.push(("0.5%/20 epochs", (0..100).map(|e| 0.5 * (1.0 - 0.00025 * e as f64)).collect(), "continue"));
    cases.push(("short history", vec![0.3; 69], "continue"));
    cases.push(("noisy descent", (0..150).map(|e| 0.9 * 0.995f64.powi(e) + 0.01 * ((e * 7919) % 13) as f64 / 13.0).collect(), "continue"));

    let mut bad = Vec::new();
    for (name, vals, want) in &cases {
        let got = label(convergence_check(&history(vals)));
        let orc = oracle(vals);
        if got != *want || orc != *want {
            bad.push(format!("{name}: got {got}, oracle {orc}, want {want}"));
        }
    }

    // Every prefix of a rise-then-stall trajectory must agree with the
    // oracle, so the rule fires at exactly the right epoch.
    let traj: Vec<f64> = (0..200)
        .map(|e| if e < 100 { 0.8 * 0.99f64.powi(e) } else { 0.8 * 0.99f64.powi(100) * (1.0 + 0.01 * (e - 100) as f64) })
        .collect();
    let mut first_stop = None;
    for n in 1..=traj.len() {
        let got = label(convergence_check(&history(&traj[..n])));
        if got != oracle(&traj[..n]) {
            bad.push(format!("prefix {n}: got {got}, oracle {}", oracle(&traj[..n])));
            break;
        }
        if got != "continue" && first_stop.is_none() {
            first_stop = Some((n, got));
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!(
            "{} synthetic histories; trajectory first stops at epoch {:?}{}",
            cases.len(),
            first_stop,
            if bad.is_empty() { String::new() } else { format!(" bad: {}", bad.join(", ")) }
        ),
    )
}
