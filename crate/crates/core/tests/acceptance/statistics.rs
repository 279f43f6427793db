use airway_unet::evaluation::ttest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::common::Outcome;

const T_EXPECTED: f64 = 4.2426;
const T_TOL: f64 = 1e-4;
const P_EXPECTED: f64 = 0.0132;
const P_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-6;
const ALPHA: f64 = 0.01;
const TRIALS: usize = 1000;
const REJECT_RANGE: (f64, f64) = (0.005, 0.02);

fn ln_gamma_half(k: u32) -> f64 {
    // Gamma(k / 2) via Gamma(1/2) = sqrt(pi) and Gamma(1) = 1.
    let (mut x, mut g) = if k % 2 == 0 { (1.0, 1.0) } else { (0.5, std::f64::consts::PI.sqrt()) };
    while x < k as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g.ln()
}

/// Two-sided p from Simpson integration of the t density over [0, |t|].
fn p_oracle(t: f64, df: u32) -> f64 {
    let v = df as f64;
    let c = (ln_gamma_half(df + 1) - ln_gamma_half(df)).exp() / (v * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

pub fn run() -> Outcome {
    let mut parts = Vec::new();
    let b = [0.0, 0.0, 0.0, 0.0, 0.0];
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    match ttest(&a, &b, true) {
        Ok(r) => {
            let oracle = p_oracle(r.t, 4);
            parts.push(Outcome::new(
                (r.t - T_EXPECTED).abs() < T_TOL
                    && r.df == 4.0
                    && (r.p - P_EXPECTED).abs() < P_TOL
                    && (r.p - oracle).abs() < ORACLE_TOL,
                format!("paired t {:.4} df {} p {:.5} (Simpson oracle {oracle:.5})", r.t, r.df, r.p),
            ));
        }
        Err(e) => parts.push(Outcome::fail(e.to_string())),
    }
    // Same differences with shifted baselines.
    let shifted = ttest(&[11.0, 7.0, 103.0, -1.0, 5.5], &[10.0, 5.0, 100.0, -5.0, 0.5], true);
    parts.push(Outcome::new(
        shifted.as_ref().is_ok_and(|r| (r.t - T_EXPECTED).abs() < T_TOL),
        "paired test depends on differences only",
    ));
    parts.push(Outcome::new(ttest(&a, &a, true).is_err(), "a = b is degenerate"));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let normal = Normal::new(0.7, 2.0).unwrap();
    let mut rejected = 0;
    for _ in 0..TRIALS {
        let x: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
        rejected += (ttest(&x, &y, false).unwrap().p < ALPHA) as usize;
    }
    let rate = rejected as f64 / TRIALS as f64;
    parts.push(Outcome::new(
        rate >= REJECT_RANGE.0 && rate <= REJECT_RANGE.1,
        format!(
            "unpaired null reject rate {:.1}% over {TRIALS} trials (accept [{}%, {}%])",
            100.0 * rate,
            100.0 * REJECT_RANGE.0,
            100.0 * REJECT_RANGE.1
        ),
    ));
    Outcome::all(parts)
}
