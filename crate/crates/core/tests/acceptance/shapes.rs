use std::time::Instant;

use airway_unet::unet::{compute_output_shape, validate_input_shape, ShapeCheck, UNetConfig};

use super::common::Outcome;

const FULL_MARGIN: usize = 28;

/// Per-axis walk through the full network, written out by hand: three
/// unpadded levels, two padded ones, pooling needs even extents and the
/// skip crops must be symmetric.
fn oracle(s: usize) -> Option<(usize, &'static str)> {
    let valid = |s: usize| s.checked_sub(4).filter(|v| *v > 0);
    let mut skips = Vec::new();
    let mut s = s;
    const POOLS: [&str; 4] = ["enc1.pool", "enc2.pool", "enc3.pool", "enc4.pool"];
    for level in 0..5 {
        if level < 3 {
            s = match valid(s) {
                Some(v) => v,
                None => return Some((0, "conv")),
            };
        }
        if level < 4 {
            if s % 2 != 0 {
                return Some((0, POOLS[level]));
            }
            skips.push(s);
            s /= 2;
        }
    }
    for level in (0..4).rev() {
        s *= 2;
        let skip = skips[level];
        if skip < s || (skip - s) % 2 != 0 {
            return Some((0, "concat"));
        }
        if level < 3 {
            s = valid(s)?;
        }
    }
    Some((s, ""))
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let full = UNetConfig::full();
    let mut parts = Vec::new();

    for (size, out) in [(252, 196), (124, 68)] {
        let got = validate_input_shape([size; 3], &full);
        let ok = got
            == ShapeCheck::Valid {
                output: [out; 3],
                margin: [FULL_MARGIN; 3],
            };
        parts.push(Outcome::new(ok, format!("{size}^3 -> {out}^3 ({ok})")));
    }
    let rejected = validate_input_shape([250; 3], &full);
    let ok = matches!(&rejected, ShapeCheck::Invalid { layer, .. } if layer == "enc2.pool");
    parts.push(Outcome::new(ok, format!("250^3 rejected: {rejected:?}")));

    let mut valid_sizes = Vec::new();
    let mut disagreements = Vec::new();
    for s in 30..=300 {
        let expected = oracle(s).filter(|(o, _)| *o > 0);
        match (compute_output_shape([s; 3], &full), expected) {
            (Ok((out, margin)), Some((o, _))) if out == [o; 3] && margin == [FULL_MARGIN; 3] => valid_sizes.push(s),
            (Err(_), None) => {}
            (got, want) => disagreements.push(format!("{s}: {got:?} vs {want:?}")),
        }
    }
    // Anisotropic inputs are checked per axis.
    let aniso = compute_output_shape([252, 124, 188], &full).ok();
    let aniso_ok = aniso == Some(([196, 68, 132], [FULL_MARGIN; 3]));
    parts.push(Outcome::new(
        disagreements.is_empty() && valid_sizes.len() >= 5 && aniso_ok,
        format!(
            "sizes 30..=300 agree with oracle, {} valid all with margin {FULL_MARGIN} ({:?}){}",
            valid_sizes.len(),
            valid_sizes,
            if disagreements.is_empty() { String::new() } else { format!(" disagree: {disagreements:?}") }
        ),
    ));
    parts.push(Outcome::new(start.elapsed().as_secs() < 10, format!("runtime {:.1?}", start.elapsed())));
    Outcome::all(parts)
}
