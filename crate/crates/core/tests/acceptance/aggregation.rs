use airway_unet::inference::{aggregate, plan_windows};
use airway_unet::tensor::Tensor;
use airway_unet::volume::BBox;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::Outcome;

const CONST_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-6;

fn filled(b: &BBox, f: impl FnMut() -> f32) -> Tensor<f32> {
    let s = b.size();
    let mut f = f;
    Tensor::new(vec![1, s[2], s[1], s[0]], (0..s.iter().product()).map(|_| f()).collect()).unwrap()
}

fn constant_case() -> Outcome {
    let mut worst = 0.0f64;
    let mut uncovered_bad = 0;
    let mut gaps = 0;
    let cases = [([90, 75, 70], [68; 3], [20; 3]), ([100, 64, 81], [44; 3], [20; 3]), ([40, 40, 40], [16; 3], [2; 3])];
    for (dims, patch, margin) in cases {
        let plan = plan_windows(dims, patch, margin).unwrap();
        let c = 0.3719f32;
        let outs: Vec<_> = plan.outputs.iter().map(|b| (*b, filled(b, || c))).collect();
        let v = aggregate(&outs, dims).unwrap();
        for (i, (val, n)) in v.data().iter().zip(plan.counts()).enumerate() {
            let p = v.coords(i);
            let interior = (0..3).all(|a| p[a] >= margin[a] && p[a] < dims[a] - margin[a]);
            if n == 0 {
                gaps += interior as usize;
                uncovered_bad += (*val != 0.0) as usize;
            } else {
                worst = worst.max((*val as f64 - c as f64).abs());
            }
        }
    }
    Outcome::new(
        worst <= CONST_TOL && uncovered_bad == 0 && gaps == 0,
        format!("constant reconstruction max err {worst:.1e} over {} plans, {gaps} interior gaps", cases.len()),
    )
}

fn random_case(rng: &mut ChaCha8Rng) -> (f64, bool) {
    let dims = [rng.gen_range(10..25), rng.gen_range(10..25), rng.gen_range(10..25)];
    let n = rng.gen_range(5..30);
    let mut outs = Vec::new();
    for _ in 0..n {
        let size = [rng.gen_range(1..=dims[0]), rng.gen_range(1..=dims[1]), rng.gen_range(1..=dims[2])];
        let lo = [
            rng.gen_range(0..=dims[0] - size[0]),
            rng.gen_range(0..=dims[1] - size[1]),
            rng.gen_range(0..=dims[2] - size[2]),
        ];
        let b = BBox::from_corner(lo, size);
        outs.push((b, filled(&b, || rng.gen::<f32>())));
    }
    let v = aggregate(&outs, dims).unwrap();

    // Loop oracle: per voxel, scan every patch that contains it.
    let mut worst = 0.0f64;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (mut s, mut c) = (0.0f64, 0usize);
                for (b, t) in &outs {
                    if b.contains([x, y, z]) {
                        let sz = b.size();
                        let (lx, ly, lz) = (x - b.lo[0], y - b.lo[1], z - b.lo[2]);
                        s += t.data()[lx + sz[0] * (ly + sz[1] * lz)] as f64;
                        c += 1;
                    }
                }
                let want = if c == 0 { 0.0 } else { s / c as f64 };
                worst = worst.max((v.get(x, y, z) as f64 - want).abs());
            }
        }
    }

    let mut shuffled = outs.clone();
    shuffled.shuffle(rng);
    let w = aggregate(&shuffled, dims).unwrap();
    let bitwise = v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    (worst, bitwise)
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut not_bitwise = 0;
    const TRIALS: usize = 50;
    for _ in 0..TRIALS {
        let (e, same) = random_case(&mut rng);
        worst = worst.max(e);
        not_bitwise += (!same) as usize;
    }
    Outcome::all(vec![
        constant_case(),
        Outcome::new(worst <= ORACLE_TOL, format!("{TRIALS} random overlaps vs loop oracle max err {worst:.1e}")),
        Outcome::new(not_bitwise == 0, format!("shuffled order bitwise identical in {}/{TRIALS}", TRIALS - not_bitwise)),
    ])
}
