//! Dense voxel volumes, bounding boxes, ROI cropping and masking.
//!
//! Voxel `(x, y, z)` lives at linear index `x + D * (y + W * z)`, i.e. the
//! payload is stored x-fastest. Axis 2 (`z`) is the slice axis and slice
//! `z = 0` is the cranial end of a scan.

use crate::error::{Error, Result};

/// Voxel extents `(D, W, H)` along x, y, z.
pub type Dims = [usize; 3];

/// What the scalar payload of a [`Volume3D`] means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    /// CT intensities in Hounsfield units, integral and within `i16`.
    CtHu,
    /// Binary labels, 0 or 1.
    BinaryMask,
    /// Reals in `[0, 1]`.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: ElementKind,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: ElementKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        let v = Volume3D {
            dims,
            spacing,
            origin,
            kind,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    /// A volume filled with `value`, unit spacing and zero origin.
    pub fn filled(dims: Dims, kind: ElementKind, value: f32) -> Self {
        Volume3D {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            kind,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// An all-zero volume sharing geometry with `self`.
    pub fn zeros_like(&self, kind: ElementKind) -> Self {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            kind,
            data: vec![0.0; self.len()],
        }
    }

    /// Same geometry as `self` with a new payload.
    pub fn with_data(&self, kind: ElementKind, data: Vec<f32>) -> Result<Self> {
        Volume3D::new(self.dims, self.spacing, self.origin, kind, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.spacing = spacing;
        self.validate()?;
        Ok(self)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [d, w, h] = self.dims;
        if d == 0 || w == 0 || h == 0 {
            return Err(Error::InvalidVolume(format!("zero extent in dims {:?}", self.dims)));
        }
        if self.data.len() != d * w * h {
            return Err(Error::InvalidVolume(format!(
                "payload has {} values, dims {:?} need {}",
                self.data.len(),
                self.dims,
                d * w * h
            )));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {:?}", self.spacing)));
        }
        let bad = match self.kind {
            ElementKind::CtHu => self.data.iter().position(|v| {
                v.fract() != 0.0 || *v < i16::MIN as f32 || *v > i16::MAX as f32
            }),
            ElementKind::BinaryMask => self.data.iter().position(|v| *v != 0.0 && *v != 1.0),
            ElementKind::Probability => self.data.iter().position(|v| !(0.0..=1.0).contains(v)),
        };
        if let Some(i) = bad {
            return Err(Error::InvalidVolume(format!(
                "value {} at index {i} not allowed for {:?}",
                self.data[i], self.kind
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [d, w, _] = self.dims;
        [idx % d, (idx / d) % w, idx / (d * w)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    fn check_same_dims(&self, other: &Volume3D, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Half-open voxel box `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(Error::OutOfBounds(format!("lo {lo:?} exceeds hi {hi:?}")));
        }
        Ok(BBox { lo, hi })
    }

    /// Box of extent `size` starting at `corner`.
    pub fn from_corner(corner: [usize; 3], size: [usize; 3]) -> Self {
        BBox {
            lo: corner,
            hi: [corner[0] + size[0], corner[1] + size[1], corner[2] + size[2]],
        }
    }

    pub fn full(dims: Dims) -> Self {
        BBox { lo: [0; 3], hi: dims }
    }

    pub fn size(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn fits_in(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] <= dims[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }
}

/// Tight box around the foreground of `lung_mask`, grown by `buffer` voxels on
/// every side and clamped to the volume.
pub fn compute_roi_bbox(lung_mask: &Volume3D, buffer: usize) -> Result<BBox> {
    let dims = lung_mask.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, v) in lung_mask.data().iter().enumerate() {
        if *v != 0.0 {
            any = true;
            let c = lung_mask.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask("lung mask has no foreground voxel".into()));
    }
    let mut out = BBox { lo, hi };
    for a in 0..3 {
        out.lo[a] = lo[a].saturating_sub(buffer);
        out.hi[a] = (hi[a] + buffer + 1).min(dims[a]);
    }
    Ok(out)
}

/// Copy of the voxels inside `b`. The origin moves by `lo * spacing`.
pub fn crop(v: &Volume3D, b: &BBox) -> Result<Volume3D> {
    if !b.fits_in(v.dims()) {
        return Err(Error::OutOfBounds(format!(
            "box {b:?} outside volume {:?}",
            v.dims()
        )));
    }
    let size = b.size();
    if size.iter().any(|s| *s == 0) {
        return Err(Error::OutOfBounds(format!("box {b:?} is empty")));
    }
    let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in b.lo[2]..b.hi[2] {
        for y in b.lo[1]..b.hi[1] {
            let start = v.index(b.lo[0], y, z);
            data.extend_from_slice(&v.data()[start..start + size[0]]);
        }
    }
    let sp = v.spacing();
    let o = v.origin();
    let origin = [
        o[0] + b.lo[0] as f64 * sp[0],
        o[1] + b.lo[1] as f64 * sp[1],
        o[2] + b.lo[2] as f64 * sp[2],
    ];
    Ok(Volume3D {
        dims: size,
        spacing: sp,
        origin,
        kind: v.kind(),
        data,
    })
}

/// Writes `src` back into a `dims`-sized frame at `b.lo`; everything else is
/// `fill`. Inverse of [`crop`] on the covered region.
pub fn embed(src: &Volume3D, b: &BBox, dims: Dims, fill: f32) -> Result<Volume3D> {
    if !b.fits_in(dims) || b.size() != src.dims() {
        return Err(Error::OutOfBounds(format!(
            "cannot embed {:?} at {b:?} into {dims:?}",
            src.dims()
        )));
    }
    let mut out = vec![fill; dims[0] * dims[1] * dims[2]];
    let [sd, sw, _] = src.dims();
    for z in 0..src.dims()[2] {
        for y in 0..sw {
            let s = sd * (y + sw * z);
            let t = b.lo[0] + dims[0] * ((b.lo[1] + y) + dims[1] * (b.lo[2] + z));
            out[t..t + sd].copy_from_slice(&src.data()[s..s + sd]);
        }
    }
    let sp = src.spacing();
    let o = src.origin();
    let origin = [
        o[0] - b.lo[0] as f64 * sp[0],
        o[1] - b.lo[1] as f64 * sp[1],
        o[2] - b.lo[2] as f64 * sp[2],
    ];
    Volume3D::new(dims, sp, origin, src.kind(), out)
}

/// Voxelwise product `v * m`; keeps the element kind of `v`.
pub fn mask_apply(v: &Volume3D, m: &Volume3D) -> Result<Volume3D> {
    v.check_same_dims(m, "mask_apply")?;
    let data = v
        .data()
        .iter()
        .zip(m.data())
        .map(|(a, b)| a * b)
        .collect();
    Ok(Volume3D {
        data,
        ..v.clone_geometry()
    })
}

impl Volume3D {
    fn clone_geometry(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            kind: self.kind,
            data: Vec::new(),
        }
    }

    /// Binary volume of `pred(value)`.
    pub fn map_to_mask(&self, pred: impl Fn(f32) -> bool) -> Volume3D {
        Volume3D {
            kind: ElementKind::BinaryMask,
            data: self.data.iter().map(|v| if pred(*v) { 1.0 } else { 0.0 }).collect(),
            ..self.clone_geometry()
        }
    }

    /// Voxelwise `self ∧ ¬other` for masks.
    pub fn and_not(&self, other: &Volume3D) -> Result<Volume3D> {
        self.check_same_dims(other, "and_not")?;
        Ok(Volume3D {
            kind: ElementKind::BinaryMask,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| if *a != 0.0 && *b == 0.0 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone_geometry()
        })
    }

    /// Voxelwise union of two masks.
    pub fn or(&self, other: &Volume3D) -> Result<Volume3D> {
        self.check_same_dims(other, "or")?;
        Ok(Volume3D {
            kind: ElementKind::BinaryMask,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| if *a != 0.0 || *b != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone_geometry()
        })
    }

    /// Voxelwise intersection of two masks.
    pub fn and(&self, other: &Volume3D) -> Result<Volume3D> {
        self.check_same_dims(other, "and")?;
        Ok(Volume3D {
            kind: ElementKind::BinaryMask,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| if *a != 0.0 && *b != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone_geometry()
        })
    }

    /// Symmetric zero padding (or any constant) by `pad` voxels per side.
    pub fn pad(&self, pad: [usize; 3], fill: f32) -> Volume3D {
        let dims = [
            self.dims[0] + 2 * pad[0],
            self.dims[1] + 2 * pad[1],
            self.dims[2] + 2 * pad[2],
        ];
        let b = BBox::from_corner(pad, self.dims);
        // geometry is consistent by construction
        embed(self, &b, dims, fill).expect("padding box always fits")
    }
}
