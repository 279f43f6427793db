use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::components::{connected_components, region_grow, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{ElementKind, Volume3D};

/// Thresholds and sizes used by the classical lung and trachea steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    /// Lung voxels are below this HU value.
    pub lung_threshold: f32,
    /// Trachea region growing accepts voxels below this HU value.
    pub trachea_threshold: f32,
    pub closing_radius: usize,
    /// A second lung component is kept when it has at least this fraction
    /// of the largest one's voxels.
    pub second_lung_fraction: f64,
    /// Cranial slices searched for the trachea seed.
    pub seed_slab: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            lung_threshold: -320.0,
            trachea_threshold: -900.0,
            closing_radius: 2,
            second_lung_fraction: 0.1,
            seed_slab: 10,
        }
    }
}

fn ball(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

/// Binary dilation (`erode = false`) or erosion with a ball. Voxels outside
/// the volume count as background for dilation and foreground for erosion,
/// so a closing never eats into structures touching the border.
fn morph(mask: &Volume3D, radius: usize, erode: bool) -> Volume3D {
    let [d, w, h] = mask.dims();
    let src = mask.data();
    let offs = ball(radius);
    let mut out = vec![0.0f32; src.len()];
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let mut hit = erode;
                for o in &offs {
                    let (xx, yy, zz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    let inside = xx >= 0 && yy >= 0 && zz >= 0 && xx < d as isize && yy < w as isize && zz < h as isize;
                    let v = if inside {
                        src[xx as usize + d * (yy as usize + w * zz as usize)] != 0.0
                    } else {
                        erode
                    };
                    if erode && !v {
                        hit = false;
                        break;
                    }
                    if !erode && v {
                        hit = true;
                        break;
                    }
                }
                out[x + d * (y + w * z)] = hit as u8 as f32;
            }
        }
    }
    mask.with_data(ElementKind::BinaryMask, out).expect("binary")
}

/// Dilation followed by erosion with a ball of `radius`.
pub fn closing(mask: &Volume3D, radius: usize) -> Volume3D {
    if radius == 0 {
        return mask.map_to_mask(|v| v != 0.0);
    }
    morph(&morph(mask, radius, false), radius, true)
}

/// Per axial slice, fills background regions that are not 4-connected to
/// the slice border.
pub fn fill_holes(mask: &Volume3D) -> Volume3D {
    let [d, w, h] = mask.dims();
    let src = mask.data();
    let mut out: Vec<f32> = src.iter().map(|v| (*v != 0.0) as u8 as f32).collect();
    let mut outside = vec![false; d * w];
    let mut queue = VecDeque::new();
    for z in 0..h {
        let slice = &src[d * w * z..d * w * (z + 1)];
        outside.iter_mut().for_each(|v| *v = false);
        for y in 0..w {
            for x in 0..d {
                if (x == 0 || y == 0 || x == d - 1 || y == w - 1) && slice[x + d * y] == 0.0 {
                    outside[x + d * y] = true;
                    queue.push_back((x, y));
                }
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            let mut visit = |xx: usize, yy: usize| {
                let i = xx + d * yy;
                if !outside[i] && slice[i] == 0.0 {
                    outside[i] = true;
                    queue.push_back((xx, yy));
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < d {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < w {
                visit(x, y + 1);
            }
        }
        for i in 0..d * w {
            if !outside[i] {
                out[d * w * z + i] = 1.0;
            }
        }
    }
    mask.with_data(ElementKind::BinaryMask, out).expect("binary")
}

/// Thresholds air-like voxels, keeps the largest one or two 6-connected
/// components that do not touch the in-plane borders (the air around the
/// body does), then closes and fills holes slice by slice.
pub fn segment_lungs(ct: &Volume3D, params: &SegmentationParams) -> Result<Volume3D> {
    let [d, w, _] = ct.dims();
    let air = ct.map_to_mask(|v| v < params.lung_threshold);
    let cc = connected_components(&air, Connectivity::Six);
    let mut touches = vec![false; cc.count() + 1];
    for (i, l) in cc.labels.iter().enumerate() {
        if *l != 0 {
            let (x, y) = (i % d, (i / d) % w);
            if x == 0 || y == 0 || x == d - 1 || y == w - 1 {
                touches[*l as usize] = true;
            }
        }
    }
    let mut candidates: Vec<(usize, u32)> = cc
        .sizes
        .iter()
        .enumerate()
        .filter(|(i, _)| !touches[i + 1])
        .map(|(i, s)| (*s, i as u32 + 1))
        .collect();
    // largest first, lower label on ties
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let Some(&(largest, first)) = candidates.first() else {
        return Err(Error::Segmentation("no enclosed air region that could be a lung".into()));
    };
    let second = candidates
        .get(1)
        .filter(|(s, _)| *s as f64 >= params.second_lung_fraction * largest as f64)
        .map(|c| c.1);
    let lungs = cc.select(ct, |l| l == first || Some(l) == second);
    Ok(fill_holes(&closing(&lungs, params.closing_radius)))
}

/// Seed for the trachea: the largest below-threshold 6-connected region in
/// the cranial slab that stays clear of the in-plane borders. Returns its
/// centroid if that is inside the region, otherwise its voxel nearest to
/// the centroid.
pub fn find_trachea_seed(ct: &Volume3D, params: &SegmentationParams) -> Result<[usize; 3]> {
    let [d, w, h] = ct.dims();
    let slab = params.seed_slab.min(h).max(1);
    let n = d * w * slab;
    let data: Vec<f32> = ct.data()[..n]
        .iter()
        .map(|v| (*v < params.trachea_threshold) as u8 as f32)
        .collect();
    let sub = Volume3D::new([d, w, slab], ct.spacing(), ct.origin(), ElementKind::BinaryMask, data)?;
    let cc = connected_components(&sub, Connectivity::Six);
    let mut touches = vec![false; cc.count() + 1];
    for (i, l) in cc.labels.iter().enumerate() {
        let (x, y) = (i % d, (i / d) % w);
        if *l != 0 && (x == 0 || y == 0 || x == d - 1 || y == w - 1) {
            touches[*l as usize] = true;
        }
    }
    let best = cc
        .sizes
        .iter()
        .enumerate()
        .filter(|(i, _)| !touches[i + 1])
        .fold(None::<(usize, usize)>, |acc, (i, s)| match acc {
            Some((_, bs)) if bs >= *s => acc,
            _ => Some((i, *s)),
        });
    let Some((idx, _)) = best else {
        return Err(Error::Segmentation(format!(
            "no dark tube below {} HU in the {slab} cranial slices",
            params.trachea_threshold
        )));
    };
    let label = idx as u32 + 1;
    let members: Vec<[usize; 3]> = cc
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == label)
        .map(|(i, _)| [i % d, (i / d) % w, i / (d * w)])
        .collect();
    let mut c = [0.0f64; 3];
    for m in &members {
        for a in 0..3 {
            c[a] += m[a] as f64;
        }
    }
    for v in c.iter_mut() {
        *v /= members.len() as f64;
    }
    let rounded = [c[0].round() as usize, c[1].round() as usize, c[2].round() as usize];
    if members.contains(&rounded) {
        return Ok(rounded);
    }
    let dist = |m: &[usize; 3]| (0..3).map(|a| (m[a] as f64 - c[a]).powi(2)).sum::<f64>();
    Ok(*members
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        .expect("component is non-empty"))
}

/// Trachea and extrapulmonary bronchi: region growing from the seed (found
/// automatically when `seed` is `None`), slice-wise hole filling, and
/// removal of everything inside the lung mask.
pub fn extract_central_airways(
    ct: &Volume3D,
    lung_mask: &Volume3D,
    seed: Option<[usize; 3]>,
    params: &SegmentationParams,
) -> Result<Volume3D> {
    if ct.dims() != lung_mask.dims() {
        return Err(Error::DimMismatch(format!(
            "ct {:?} vs lung mask {:?}",
            ct.dims(),
            lung_mask.dims()
        )));
    }
    let seed = match seed {
        Some(s) => s,
        None => find_trachea_seed(ct, params)?,
    };
    let grown = region_grow(ct, seed, params.trachea_threshold)?;
    fill_holes(&grown).and_not(lung_mask)
}
