use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use airway_unet::morphology::{connected_components, skeletonize, Connectivity};
use airway_unet::volume::Volume3D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::{mask_from, random_mask, tube, Outcome};

const MASKS: usize = 50;
const TIME_LIMIT: Duration = Duration::from_secs(300);

/// Breadth-first flood fill, neighbours enumerated from the definition.
fn flood_fill(m: &Volume3D, conn: Connectivity) -> Vec<u32> {
    let [d, w, h] = m.dims();
    let mut labels = vec![0u32; m.len()];
    let mut next = 0;
    for start in 0..m.len() {
        if m.data()[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            let [x, y, z] = m.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let l1 = dx.abs() + dy.abs() + dz.abs();
                        if l1 == 0 || (conn == Connectivity::Six && l1 != 1) {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0 || ny < 0 || nz < 0 || nx >= d as i64 || ny >= w as i64 || nz >= h as i64 {
                            continue;
                        }
                        let j = m.index(nx as usize, ny as usize, nz as usize);
                        if m.data()[j] != 0.0 && labels[j] == 0 {
                            labels[j] = next;
                            q.push_back(j);
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Same partition, up to a renaming of labels.
fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(x, y)| {
        (*x == 0) == (*y == 0) && *ab.entry(*x).or_insert(*y) == *y && *ba.entry(*y).or_insert(*x) == *x
    })
}

fn blobs(rng: &mut ChaCha8Rng) -> Volume3D {
    let dims = [rng.gen_range(12..28), rng.gen_range(12..28), rng.gen_range(12..28)];
    let balls: Vec<([f64; 3], f64)> = (0..rng.gen_range(1..6))
        .map(|_| {
            (
                [rng.gen_range(0.0..dims[0] as f64), rng.gen_range(0.0..dims[1] as f64), rng.gen_range(0.0..dims[2] as f64)],
                rng.gen_range(1.5..5.0),
            )
        })
        .collect();
    mask_from(dims, |x, y, z| {
        balls.iter().any(|(c, r)| {
            (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
        })
    })
}

/// Random test masks: half sparse noise, half unions of balls.
fn masks() -> Vec<(String, Volume3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut v = Vec::new();
    for i in 0..MASKS {
        let m = if i % 2 == 0 {
            let dims = [rng.gen_range(8..24), rng.gen_range(8..24), rng.gen_range(8..24)];
            let p = rng.gen_range(0.05..0.6);
            random_mask(dims, p, &mut rng)
        } else {
            blobs(&mut rng)
        };
        v.push((format!("random {i}"), m));
    }
    v
}

fn tubes() -> Vec<(String, Volume3D)> {
    let mut v = Vec::new();
    for r in [1.0, 2.0, 3.5, 5.0] {
        v.push((format!("tube r={r}"), tube([40, 15, 15], r, 3, 36)));
    }
    // A Y-shaped branching tube.
    v.push((
        "branching tube".into(),
        mask_from([40, 30, 12], |x, y, z| {
            let (yf, zf) = (y as f64, z as f64 - 5.5);
            let trunk = x < 20 && (yf - 14.5).powi(2) + zf * zf <= 9.0;
            let off = (x as f64 - 19.0).max(0.0) * 0.6;
            let arm = |c: f64| x >= 18 && x < 38 && (yf - c).powi(2) + zf * zf <= 6.25;
            trunk || arm(14.5 + off) || arm(14.5 - off)
        }),
    ));
    v
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut bad_cc = Vec::new();
    let mut bad_skel = Vec::new();
    let all: Vec<_> = masks().into_iter().chain(tubes()).collect();
    for (name, m) in &all {
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let got = connected_components(m, conn);
            if !same_partition(&got.labels, &flood_fill(m, conn)) {
                bad_cc.push(format!("{name} {conn:?}"));
            }
        }
        let s = skeletonize(m);
        let idempotent = skeletonize(&s).data() == s.data();
        let subset = s.data().iter().zip(m.data()).all(|(a, b)| *a == 0.0 || *b != 0.0);
        let before = connected_components(m, Connectivity::TwentySix).count();
        let after = connected_components(&s, Connectivity::TwentySix).count();
        if !(idempotent && subset && before == after) {
            bad_skel.push(format!("{name} (idempotent {idempotent}, subset {subset}, components {before}->{after})"));
        }
    }
    let elapsed = start.elapsed();
    Outcome::all(vec![
        Outcome::new(
            bad_cc.is_empty(),
            format!("components = flood fill on {} masks x 2 connectivities{}", all.len(), if bad_cc.is_empty() { String::new() } else { format!(" bad: {bad_cc:?}") }),
        ),
        Outcome::new(
            bad_skel.is_empty(),
            format!(
                "skeleton idempotent/subset/component-preserving on {MASKS} random masks + {} tubes{}",
                all.len() - MASKS,
                if bad_skel.is_empty() { String::new() } else { format!(" bad: {bad_skel:?}") }
            ),
        ),
        Outcome::new(elapsed < TIME_LIMIT, format!("runtime {elapsed:.1?}")),
    ])
}
