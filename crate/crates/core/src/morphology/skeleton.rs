//! Directional topology-preserving thinning.
//!
//! Each pass visits the six face directions in turn. In a sub-iteration
//! the candidates are foreground voxels whose face neighbour in that
//! direction is background, that have more than one 26-neighbour (so curve
//! ends survive) and that are simple. Candidates are then deleted one at a
//! time, re-checking simplicity against the current state.

use crate::volume::{ElementKind, Volume3D};

/// Index into a 3x3x3 neighbourhood.
#[inline]
fn nb(dx: usize, dy: usize, dz: usize) -> usize {
    dx + 3 * (dy + 3 * dz)
}

struct Cube {
    /// Pairs of neighbourhood positions that are 26-adjacent, per position.
    adj26: Vec<Vec<usize>>,
    /// 6-adjacent pairs restricted to the 18-neighbourhood.
    adj6_n18: Vec<Vec<usize>>,
    n18: [bool; 27],
    faces: [usize; 6],
}

impl Cube {
    fn new() -> Self {
        let coords = |i: usize| [(i % 3) as isize, ((i / 3) % 3) as isize, (i / 9) as isize];
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        let mut n18 = [false; 27];
        for i in 0..27 {
            let c = coords(i);
            let dist = (c[0] - 1).abs() + (c[1] - 1).abs() + (c[2] - 1).abs();
            n18[i] = dist >= 1 && dist <= 2;
        }
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == 13 || j == 13 {
                    continue;
                }
                let (a, b) = (coords(i), coords(j));
                let d = [(a[0] - b[0]).abs(), (a[1] - b[1]).abs(), (a[2] - b[2]).abs()];
                if d.iter().all(|v| *v <= 1) {
                    adj26[i].push(j);
                    if d.iter().sum::<isize>() == 1 && n18[i] && n18[j] {
                        adj6_n18[i].push(j);
                    }
                }
            }
        }
        Cube {
            adj26,
            adj6_n18,
            n18,
            faces: [nb(0, 1, 1), nb(2, 1, 1), nb(1, 0, 1), nb(1, 2, 1), nb(1, 1, 0), nb(1, 1, 2)],
        }
    }

    /// Whether the center of neighbourhood `n` (bit i = position i is
    /// foreground) can be removed without changing topology: one
    /// 26-component of foreground in N26 and one 6-component of background
    /// in N18 that touches the center.
    fn is_simple(&self, n: u32) -> bool {
        let fg = |i: usize| n >> i & 1 == 1;
        // foreground components in N26
        let mut seen = 0u32;
        let mut comps = 0;
        let mut stack = Vec::with_capacity(27);
        for s in 0..27 {
            if s == 13 || !fg(s) || seen >> s & 1 == 1 {
                continue;
            }
            comps += 1;
            if comps > 1 {
                return false;
            }
            seen |= 1 << s;
            stack.push(s);
            while let Some(p) = stack.pop() {
                for &q in &self.adj26[p] {
                    if fg(q) && seen >> q & 1 == 0 {
                        seen |= 1 << q;
                        stack.push(q);
                    }
                }
            }
        }
        if comps != 1 {
            return false;
        }
        // background 6-components in N18 that contain a face neighbour
        let mut seen = 0u32;
        let mut comps = 0;
        for &s in &self.faces {
            if fg(s) || seen >> s & 1 == 1 {
                continue;
            }
            comps += 1;
            if comps > 1 {
                return false;
            }
            seen |= 1 << s;
            stack.push(s);
            while let Some(p) = stack.pop() {
                for &q in &self.adj6_n18[p] {
                    if self.n18[q] && !fg(q) && seen >> q & 1 == 0 {
                        seen |= 1 << q;
                        stack.push(q);
                    }
                }
            }
        }
        comps == 1
    }
}

fn neighbourhood(data: &[u8], dims: [usize; 3], x: usize, y: usize, z: usize) -> u32 {
    let [d, w, h] = dims;
    let mut n = 0u32;
    for dz in 0..3 {
        let zz = z as isize + dz as isize - 1;
        if zz < 0 || zz >= h as isize {
            continue;
        }
        for dy in 0..3 {
            let yy = y as isize + dy as isize - 1;
            if yy < 0 || yy >= w as isize {
                continue;
            }
            for dx in 0..3 {
                let xx = x as isize + dx as isize - 1;
                if xx < 0 || xx >= d as isize {
                    continue;
                }
                if data[xx as usize + d * (yy as usize + w * zz as usize)] != 0 {
                    n |= 1 << nb(dx, dy, dz);
                }
            }
        }
    }
    n
}

/// Thins `mask` to one-voxel-wide centerlines. The result is a subset of
/// the input with the same 26-connected components and no new cavities.
pub fn skeletonize(mask: &Volume3D) -> Volume3D {
    let cube = Cube::new();
    let dims = mask.dims();
    let [d, w, _] = dims;
    let mut data: Vec<u8> = mask.data().iter().map(|v| (*v != 0.0) as u8).collect();
    let mut active: Vec<usize> = (0..data.len()).filter(|i| data[*i] != 0).collect();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for dir in 0..6 {
            candidates.clear();
            for &i in &active {
                if data[i] == 0 {
                    continue;
                }
                let (x, y, z) = (i % d, (i / d) % w, i / (d * w));
                let n = neighbourhood(&data, dims, x, y, z);
                if n >> cube.faces[dir] & 1 == 1 {
                    continue;
                }
                let count = (n & !(1 << 13)).count_ones();
                if count <= 1 {
                    continue;
                }
                if cube.is_simple(n) {
                    candidates.push(i);
                }
            }
            for &i in &candidates {
                let (x, y, z) = (i % d, (i / d) % w, i / (d * w));
                let n = neighbourhood(&data, dims, x, y, z);
                if (n & !(1 << 13)).count_ones() > 1 && cube.is_simple(n) {
                    data[i] = 0;
                    changed = true;
                }
            }
        }
        active.retain(|i| data[*i] != 0);
        if !changed {
            break;
        }
    }
    let out = data.into_iter().map(|v| v as f32).collect();
    mask.with_data(ElementKind::BinaryMask, out).expect("binary")
}
