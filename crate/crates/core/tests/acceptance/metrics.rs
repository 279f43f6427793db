use std::time::{Duration, Instant};

use airway_unet::evaluation::{
    centerline_leakage, dice, evaluate_scan, false_positive_rate, total_tree_length, tree_length,
};
use airway_unet::morphology::skeletonize;
use airway_unet::volume::Volume3D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::{mask_from, random_mask, Outcome};

const PAIRS: usize = 100;
const TIME_LIMIT: Duration = Duration::from_secs(60);
const MM_TOL: f64 = 1e-3;

/// Counts voxels where `f(a, b, c)` holds, one coordinate at a time.
fn count(a: &Volume3D, b: &Volume3D, c: &Volume3D, f: impl Fn(bool, bool, bool) -> bool) -> usize {
    let [d, w, h] = a.dims();
    let mut n = 0;
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                n += f(a.get(x, y, z) != 0.0, b.get(x, y, z) != 0.0, c.get(x, y, z) != 0.0) as usize;
            }
        }
    }
    n
}

struct Brute {
    tl: f64,
    cl: f64,
    fpr: f64,
    dsc: f64,
    mm: f64,
}

fn brute(p: &Volume3D, g: &Volume3D, pc: &Volume3D, gc: &Volume3D, spacing: [f64; 3]) -> Brute {
    let n_gc = count(gc, gc, gc, |a, _, _| a) as f64;
    let n_g = count(g, g, g, |a, _, _| a) as f64;
    let n_p = count(p, p, p, |a, _, _| a) as f64;
    let covered = count(gc, p, p, |c, p, _| c && p) as f64;
    Brute {
        tl: 100.0 * covered / n_gc,
        cl: 100.0 * count(pc, g, g, |c, g, _| c && !g) as f64 / n_gc,
        fpr: 100.0 * count(p, g, g, |p, g, _| p && !g) as f64 / n_g,
        dsc: 2.0 * count(p, g, g, |p, g, _| p && g) as f64 / (n_p + n_g),
        mm: covered * (spacing[0] * spacing[1] * spacing[2]).cbrt(),
    }
}

fn random_pairs() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let dims = [20; 3];
    let (mut mismatches, mut asym) = (0, 0);
    for _ in 0..PAIRS {
        let p = random_mask(dims, rng.gen_range(0.05..0.6), &mut rng);
        let g = random_mask(dims, rng.gen_range(0.05..0.6), &mut rng);
        let pc = random_mask(dims, rng.gen_range(0.01..0.2), &mut rng);
        let gc = random_mask(dims, rng.gen_range(0.01..0.2), &mut rng);
        let spacing = [rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5)];
        let b = brute(&p, &g, &pc, &gc, spacing);
        let got = [
            tree_length(&p, &gc).unwrap(),
            centerline_leakage(&pc, &g, &gc).unwrap(),
            false_positive_rate(&p, &g).unwrap(),
            dice(&p, &g).unwrap(),
        ];
        let want = [b.tl, b.cl, b.fpr, b.dsc];
        mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        let mm = total_tree_length(&p, &gc, spacing).unwrap();
        mismatches += (mm != b.mm) as usize;
        asym += (dice(&p, &g).unwrap() != dice(&g, &p).unwrap()) as usize;
    }
    (mismatches, asym)
}

/// Whole-scan evaluation against the metric-by-metric composition:
/// central airways removed from both masks, then both skeletonized.
fn composition() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let mut bad = 0;
    for _ in 0..10 {
        let dims = [20; 3];
        let g = random_mask(dims, 0.4, &mut rng);
        let p = random_mask(dims, 0.4, &mut rng);
        let central = mask_from(dims, |x, _, _| x < 4);
        let p2 = p.and_not(&central).unwrap();
        let g2 = g.and_not(&central).unwrap();
        let (pc, gc) = (skeletonize(&p2), skeletonize(&g2));
        let b = brute(&p2, &g2, &pc, &gc, [1.0; 3]);
        let r = evaluate_scan("s", &p, &g, &central).unwrap();
        let got = [r.tree_length, r.centerline_leakage, r.false_positive_rate, r.dice, r.total_tree_length_mm];
        let want = [b.tl, b.cl, b.fpr, b.dsc, b.mm];
        bad += got.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    bad
}

fn line(n: usize, f: impl Fn(usize) -> bool) -> Volume3D {
    mask_from([n, 3, 3], |x, y, z| y == 1 && z == 1 && f(x))
}

/// Hand-built cases with exactly known values.
fn hand_cases() -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            bad.push(format!("{name}: {got} != {want}"));
        }
    };
    // |P| = 2, |G| = 2, one shared voxel.
    let p = line(4, |x| x == 0 || x == 1);
    let g = line(4, |x| x == 1 || x == 2);
    check("dice 0.5", dice(&p, &g).unwrap(), 0.5, 0.0);
    check("dice identical", dice(&p, &p).unwrap(), 1.0, 0.0);
    check("dice disjoint", dice(&p, &line(4, |x| x == 3)).unwrap(), 0.0, 0.0);

    let gc = line(10, |_| true);
    check("tl 7/10", tree_length(&line(10, |x| x < 7), &gc).unwrap(), 70.0, 0.0);

    let big = mask_from([20, 3, 3], |x, y, z| x < 10 && y == 1 && z == 1);
    let gc20 = big.clone();
    let three = mask_from([20, 3, 3], |x, y, z| (y == 1 && z == 1 && x < 10) || (z == 0 && y == 0 && x < 3));
    check("cl 3/10", centerline_leakage(&three, &big, &gc20).unwrap(), 30.0, 0.0);
    let fifteen = mask_from([20, 3, 3], |x, y, z| (z == 0 && y == 0 && x < 15) || (y == 1 && z == 1 && x < 10));
    check("cl 15/10", centerline_leakage(&fifteen, &big, &gc20).unwrap(), 150.0, 0.0);

    let g100 = mask_from([10, 10, 2], |_, _, z| z == 0);
    let p105 = mask_from([10, 10, 2], |x, y, z| z == 0 || (z == 1 && y == 0 && x < 5));
    check("fpr 5/100", false_positive_rate(&p105, &g100).unwrap(), 5.0, 0.0);

    let c100 = mask_from([10, 10, 1], |_, _, _| true);
    check("ttl 100 @ (0.5,0.5,1)", total_tree_length(&c100, &c100, [0.5, 0.5, 1.0]).unwrap(), 62.996, MM_TOL);
    check("ttl isotropic", total_tree_length(&c100, &c100, [1.0; 3]).unwrap(), 100.0, 0.0);
    if dice(&line(4, |_| false), &line(4, |_| false)).is_ok() {
        bad.push("dice of two empty masks should be an error".into());
    }
    bad
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let (mismatches, asym) = random_pairs();
    let comp = composition();
    let hand = hand_cases();
    let elapsed = start.elapsed();
    Outcome::all(vec![
        Outcome::new(mismatches == 0, format!("{PAIRS} random 20^3 pairs: {mismatches} metric mismatches vs voxel counting")),
        Outcome::new(asym == 0, format!("dice symmetric on {}/{PAIRS}", PAIRS - asym)),
        Outcome::new(comp == 0, format!("evaluate_scan vs composition: {comp} mismatches")),
        Outcome::new(hand.is_empty(), format!("hand cases {}", if hand.is_empty() { "ok".into() } else { hand.join(", ") })),
        Outcome::new(elapsed < TIME_LIMIT, format!("runtime {elapsed:.1?}")),
    ])
}
