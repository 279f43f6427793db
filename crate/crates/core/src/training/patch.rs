//! Patch extraction and geometric augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{compute_roi_bbox, crop, embed, mask_apply, BBox, Dims, ElementKind, Volume3D};

/// Clip window for CT normalization, in HU.
pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 500.0;

/// Clips to `[-1000, 500]` HU and maps linearly onto `[0, 1]`.
pub fn normalize_ct(v: &Volume3D) -> Volume3D {
    let data = v
        .data()
        .iter()
        .map(|x| ((x.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0))
        .collect();
    v.with_data(ElementKind::Probability, data)
        .expect("normalized values lie in [0, 1]")
}

/// One training scan: normalized image, ground truth restricted to the ROI,
/// and the ROI (lung) mask, all on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub name: String,
    pub image: Volume3D,
    pub gt: Volume3D,
    pub roi: Volume3D,
}

impl Scan {
    /// Normalizes `ct` and masks `gt` by `roi`.
    pub fn new(name: impl Into<String>, ct: &Volume3D, gt: &Volume3D, roi: &Volume3D) -> Result<Self> {
        let image = if ct.kind() == ElementKind::CtHu {
            normalize_ct(ct)
        } else {
            ct.clone()
        };
        Ok(Scan {
            name: name.into(),
            gt: mask_apply(gt, roi)?,
            roi: roi.clone(),
            image,
        })
    }

    /// Crops all three volumes to the lung bounding box grown by `buffer`
    /// voxels, then builds the scan with the lung mask as ROI.
    pub fn cropped(name: impl Into<String>, ct: &Volume3D, gt: &Volume3D, lung: &Volume3D, buffer: usize) -> Result<Self> {
        let b = compute_roi_bbox(lung, buffer)?;
        Scan::new(name, &crop(ct, &b)?, &crop(gt, &b)?, &crop(lung, &b)?)
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    /// Symmetric zero padding of every field up to at least `patch` per axis.
    /// An odd shortfall puts the extra voxel on the high side.
    pub fn padded_to(&self, patch: Dims) -> Scan {
        let d = self.dims();
        if (0..3).all(|a| d[a] >= patch[a]) {
            return self.clone();
        }
        let mut lo = [0; 3];
        let mut dims = d;
        for a in 0..3 {
            if d[a] < patch[a] {
                lo[a] = (patch[a] - d[a]) / 2;
                dims[a] = patch[a];
            }
        }
        let b = BBox::from_corner(lo, d);
        let pad = |v: &Volume3D| embed(v, &b, dims, 0.0).expect("padding box fits");
        Scan {
            name: self.name.clone(),
            image: pad(&self.image),
            gt: pad(&self.gt),
            roi: pad(&self.roi),
        }
    }
}

/// A patch triple at network input size, before any cropping to the output
/// footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub corner: [usize; 3],
    pub image: Volume3D,
    pub gt: Volume3D,
    pub roi: Volume3D,
}

/// Network-ready sample: image at input size, `gt` and `roi` center-cropped
/// to the output footprint. Tensors are `(1, z, y, x)` with x contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub roi: Tensor<f32>,
}

pub fn volume_tensor(v: &Volume3D) -> Tensor<f32> {
    let [d, w, h] = v.dims();
    Tensor::new(vec![1, h, w, d], v.data().to_vec()).expect("consistent sizes")
}

impl Patch {
    /// Crops `gt` and `roi` by `margin` per side and converts to tensors.
    pub fn into_sample(self, margin: [usize; 3]) -> Result<TrainSample> {
        let d = self.image.dims();
        if (0..3).any(|a| 2 * margin[a] >= d[a]) {
            return Err(Error::Shape(format!("margin {margin:?} leaves nothing of patch {d:?}")));
        }
        let b = BBox::new(margin, [d[0] - margin[0], d[1] - margin[1], d[2] - margin[2]])?;
        Ok(TrainSample {
            image: volume_tensor(&self.image),
            gt: volume_tensor(&crop(&self.gt, &b)?),
            roi: volume_tensor(&crop(&self.roi, &b)?),
        })
    }
}

/// Draws a corner uniformly from `[0, D-d] x [0, W-w] x [0, H-h]` and
/// copies the three fields. Volumes smaller than the patch are zero-padded
/// symmetrically first.
pub fn sample_patch(scan: &Scan, patch: Dims, rng: &mut impl Rng) -> Result<Patch> {
    let s = scan.padded_to(patch);
    let d = s.dims();
    let corner = [
        rng.gen_range(0..=d[0] - patch[0]),
        rng.gen_range(0..=d[1] - patch[1]),
        rng.gen_range(0..=d[2] - patch[2]),
    ];
    extract_patch(&s, corner, patch)
}

pub(crate) fn extract_patch(scan: &Scan, corner: [usize; 3], patch: Dims) -> Result<Patch> {
    let b = BBox::from_corner(corner, patch);
    Ok(Patch {
        corner,
        image: crop(&scan.image, &b)?,
        gt: crop(&scan.gt, &b)?,
        roi: crop(&scan.roi, &b)?,
    })
}

/// Augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_probability: 0.5,
            max_rotation_deg: 10.0,
            scale_min: 0.75,
            scale_max: 1.25,
        }
    }
}

/// One draw of the geometric transform: optional flips per axis, then
/// rotations about x, y and z, then an isotropic scaling, all about the
/// patch center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flips: [bool; 3],
    pub angles_deg: [f64; 3],
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            flips: [false; 3],
            angles_deg: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, p: &AugmentParams) -> Self {
        let flips = [
            rng.gen_bool(p.flip_probability),
            rng.gen_bool(p.flip_probability),
            rng.gen_bool(p.flip_probability),
        ];
        let r = p.max_rotation_deg;
        let angles_deg = [rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
        let scale = if p.scale_max > p.scale_min {
            rng.gen_range(p.scale_min..p.scale_max)
        } else {
            p.scale_min
        };
        Transform {
            flips,
            angles_deg,
            scale,
        }
    }

    /// Matrix taking output offsets from the center to input offsets, in
    /// `(x, y, z)` voxel coordinates.
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let rot = |axis: usize, deg: f64| -> [[f64; 3]; 3] {
            let (s, c) = (-deg.to_radians()).sin_cos();
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (2, 0),
                _ => (0, 1),
            };
            let mut m = [[0.0; 3]; 3];
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m[j][j] = c;
            m
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut m = [[0.0; 3]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
                }
            }
            m
        };
        // forward: x -> S Rz Ry Rx F x, so the inverse is F Rx^-1 Ry^-1 Rz^-1 / s
        let mut f = [[0.0; 3]; 3];
        for a in 0..3 {
            f[a][a] = if self.flips[a] { -1.0 } else { 1.0 };
        }
        let mut m = mul(f, rot(0, self.angles_deg[0]));
        m = mul(m, rot(1, self.angles_deg[1]));
        m = mul(m, rot(2, self.angles_deg[2]));
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= self.scale;
            }
        }
        m
    }
}

fn resample(v: &Volume3D, m: &[[f64; 3]; 3], nearest: bool) -> Vec<f32> {
    let [d, w, h] = v.dims();
    let c = [(d as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    let src = v.data();
    let at = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= d as isize || y >= w as isize || z >= h as isize {
            0.0
        } else {
            src[x as usize + d * (y as usize + w * z as usize)] as f64
        }
    };
    let mut out = Vec::with_capacity(v.len());
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let o = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let q = [
                    c[0] + m[0][0] * o[0] + m[0][1] * o[1] + m[0][2] * o[2],
                    c[1] + m[1][0] * o[0] + m[1][1] * o[1] + m[1][2] * o[2],
                    c[2] + m[2][0] * o[0] + m[2][1] * o[1] + m[2][2] * o[2],
                ];
                let val = if nearest {
                    at(q[0].round() as isize, q[1].round() as isize, q[2].round() as isize)
                } else {
                    let f = [q[0].floor(), q[1].floor(), q[2].floor()];
                    let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
                    let b = [f[0] as isize, f[1] as isize, f[2] as isize];
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
                        if wz == 0.0 {
                            continue;
                        }
                        for dy in 0..2 {
                            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                            if wy == 0.0 {
                                continue;
                            }
                            for dx in 0..2 {
                                let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                                if wx == 0.0 {
                                    continue;
                                }
                                acc += wx * wy * wz * at(b[0] + dx, b[1] + dy, b[2] + dz);
                            }
                        }
                    }
                    acc
                };
                out.push(val as f32);
            }
        }
    }
    out
}

/// Applies `t` to all three fields: trilinear for the image, nearest
/// neighbour for the masks. Reads outside the patch give 0.
pub fn apply_transform(p: &Patch, t: &Transform) -> Patch {
    if *t == Transform::identity() {
        return p.clone();
    }
    let m = t.inverse_matrix();
    let image = resample(&p.image, &m, false)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Patch {
        corner: p.corner,
        image: p.image.with_data(p.image.kind(), image).expect("clamped"),
        gt: p.gt.with_data(ElementKind::BinaryMask, resample(&p.gt, &m, true)).expect("binary"),
        roi: p.roi.with_data(ElementKind::BinaryMask, resample(&p.roi, &m, true)).expect("binary"),
    }
}

/// Random flips, rotations and scaling drawn independently for this patch.
pub fn augment(p: &Patch, rng: &mut impl Rng, params: &AugmentParams) -> Patch {
    let t = Transform::sample(rng, params);
    apply_transform(p, &t)
}
