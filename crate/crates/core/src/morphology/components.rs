use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::{Dims, ElementKind, Volume3D};

/// Voxel adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Faces only.
    Six,
    /// Faces, edges and corners.
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            v => Err(format!("connectivity must be 6 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets `(dx, dy, dz)`.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    if n == 0 || (self == Connectivity::Six && n > 1) {
                        continue;
                    }
                    v.push([dx, dy, dz]);
                }
            }
        }
        v
    }
}

/// Neighbours of `p` inside `dims`.
pub(crate) fn neighbours(p: [usize; 3], dims: Dims, offs: &[[isize; 3]]) -> impl Iterator<Item = [usize; 3]> + '_ {
    offs.iter().filter_map(move |o| {
        let x = p[0] as isize + o[0];
        let y = p[1] as isize + o[1];
        let z = p[2] as isize + o[2];
        if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
            None
        } else {
            Some([x as usize, y as usize, z as usize])
        }
    })
}

/// Component labels: 0 is background, components are `1..=K` numbered in
/// the scan order of their first voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub labels: Vec<u32>,
    /// `sizes[k - 1]` is the voxel count of label `k`.
    pub sizes: Vec<usize>,
}

impl LabelVolume {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Label of the largest component; the lowest label wins ties.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, usize)> = None;
        for (i, s) in self.sizes.iter().enumerate() {
            if best.map_or(true, |(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
        best.map(|(i, _)| i as u32 + 1)
    }

    /// Binary mask of the labels for which `keep` is true.
    pub fn select(&self, like: &Volume3D, keep: impl Fn(u32) -> bool) -> Volume3D {
        let data = self
            .labels
            .iter()
            .map(|l| if *l != 0 && keep(*l) { 1.0 } else { 0.0 })
            .collect();
        like.with_data(ElementKind::BinaryMask, data).expect("binary")
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let p = parent[a as usize];
        parent[a as usize] = parent[p as usize];
        a = p;
    }
    a
}

/// Two-pass union-find labelling of the nonzero voxels of `mask`.
pub fn connected_components(mask: &Volume3D, conn: Connectivity) -> LabelVolume {
    let dims = mask.dims();
    let [d, w, h] = dims;
    let data = mask.data();
    // neighbours already visited in scan order
    let back: Vec<[isize; 3]> = conn
        .offsets()
        .into_iter()
        .filter(|o| (o[2], o[1], o[0]) < (0, 0, 0))
        .collect();
    let mut prov = vec![0u32; data.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let i = x + d * (y + w * z);
                if data[i] == 0.0 {
                    continue;
                }
                let mut label = 0u32;
                for n in neighbours([x, y, z], dims, &back) {
                    let l = prov[n[0] + d * (n[1] + w * n[2])];
                    if l == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, l);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, l));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                prov[i] = label;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in prov.iter_mut() {
        if *l == 0 {
            continue;
        }
        let r = find(&mut parent, *l) as usize;
        if remap[r] == 0 {
            sizes.push(0);
            remap[r] = sizes.len() as u32;
        }
        *l = remap[r];
        sizes[*l as usize - 1] += 1;
    }
    LabelVolume {
        dims,
        spacing: mask.spacing(),
        labels: prov,
        sizes,
    }
}

/// The largest connected component of `mask` (empty if `mask` is empty).
pub fn largest_component(mask: &Volume3D, conn: Connectivity) -> Volume3D {
    let cc = connected_components(mask, conn);
    match cc.largest() {
        Some(l) => cc.select(mask, |k| k == l),
        None => mask.zeros_like(ElementKind::BinaryMask),
    }
}

/// 6-connected flood from `seed` through voxels with value `< upper`.
pub fn region_grow(v: &Volume3D, seed: [usize; 3], upper: f32) -> Result<Volume3D> {
    let dims = v.dims();
    if (0..3).any(|a| seed[a] >= dims[a]) {
        return Err(Error::OutOfBounds(format!("seed {seed:?} outside {dims:?}")));
    }
    let s = v.index(seed[0], seed[1], seed[2]);
    if !(v.data()[s] < upper) {
        return Err(Error::Segmentation(format!(
            "seed value {} is not below the threshold {upper}",
            v.data()[s]
        )));
    }
    let offs = Connectivity::Six.offsets();
    let mut out = vec![0.0f32; v.len()];
    out[s] = 1.0;
    let mut queue = VecDeque::from([seed]);
    while let Some(p) = queue.pop_front() {
        for n in neighbours(p, dims, &offs) {
            let i = v.index(n[0], n[1], n[2]);
            if out[i] == 0.0 && v.data()[i] < upper {
                out[i] = 1.0;
                queue.push_back(n);
            }
        }
    }
    Ok(v.with_data(ElementKind::BinaryMask, out).expect("binary"))
}
