//! Sliding-window prediction and airway extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{extract_central_airways, largest_component, Connectivity, SegmentationParams};
use crate::tensor::Tensor;
use crate::training::normalize_ct;
use crate::unet::{compute_output_shape, UNetModel};
use crate::volume::{compute_roi_bbox, crop, embed, mask_apply, BBox, Dims, ElementKind, Volume3D};

/// Window placement over a (margin-padded) volume.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub dims: Dims,
    pub patch: Dims,
    pub margin: [usize; 3],
    pub stride: [usize; 3],
    /// Input windows, in `dims` coordinates.
    pub inputs: Vec<BBox>,
    /// Matching output footprints: the input windows shrunk by `margin`.
    pub outputs: Vec<BBox>,
}

impl WindowPlan {
    /// Number of output footprints covering each voxel of `dims`.
    pub fn counts(&self) -> Vec<u32> {
        let [d, w, _] = self.dims;
        let mut c = vec![0u32; self.dims.iter().product()];
        for b in &self.outputs {
            for z in b.lo[2]..b.hi[2] {
                for y in b.lo[1]..b.hi[1] {
                    for x in b.lo[0]..b.hi[0] {
                        c[x + d * (y + w * z)] += 1;
                    }
                }
            }
        }
        c
    }
}

fn axis_starts(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|v| v + patch < size).collect();
    s.push(size - patch);
    s.dedup();
    s
}

/// Windows with 50% overlap: stride `patch / 2`, or the output extent when
/// that is smaller so output footprints never leave gaps. The last start on
/// each axis is clamped to `size - patch`.
pub fn plan_windows(dims: Dims, patch: Dims, margin: [usize; 3]) -> Result<WindowPlan> {
    let mut stride = [0; 3];
    for a in 0..3 {
        if dims[a] < patch[a] {
            return Err(Error::Shape(format!("volume {dims:?} smaller than patch {patch:?}")));
        }
        if 2 * margin[a] >= patch[a] {
            return Err(Error::Shape(format!("margin {margin:?} leaves no output in patch {patch:?}")));
        }
        stride[a] = (patch[a] / 2).min(patch[a] - 2 * margin[a]).max(1);
    }
    let starts: Vec<Vec<usize>> = (0..3).map(|a| axis_starts(dims[a], patch[a], stride[a])).collect();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for &z in &starts[2] {
        for &y in &starts[1] {
            for &x in &starts[0] {
                let lo = [x, y, z];
                inputs.push(BBox::from_corner(lo, patch));
                outputs.push(BBox::from_corner(
                    [x + margin[0], y + margin[1], z + margin[2]],
                    [patch[0] - 2 * margin[0], patch[1] - 2 * margin[1], patch[2] - 2 * margin[2]],
                ));
            }
        }
    }
    Ok(WindowPlan {
        dims,
        patch,
        margin,
        stride,
        inputs,
        outputs,
    })
}

/// Averages overlapping patch outputs: per voxel, the sum of the covering
/// outputs divided by their number; uncovered voxels are 0. Contributions
/// are accumulated in `f64`, in the order of the boxes' corners, so the
/// result does not depend on the order of `outputs`.
pub fn aggregate(outputs: &[(BBox, Tensor<f32>)], dims: Dims) -> Result<Volume3D> {
    let [d, w, h] = dims;
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by_key(|i| {
        let b = &outputs[*i].0;
        (b.lo[2], b.lo[1], b.lo[0], b.hi[2], b.hi[1], b.hi[0])
    });
    let mut sum = vec![0.0f64; d * w * h];
    let mut count = vec![0u32; d * w * h];
    for i in order {
        let (b, t) = &outputs[i];
        let s = b.size();
        if !b.fits_in(dims) || t.shape() != [1, s[2], s[1], s[0]] {
            return Err(Error::Shape(format!(
                "output {:?} does not match placement {b:?} in {dims:?}",
                t.shape()
            )));
        }
        let src = t.data();
        for z in 0..s[2] {
            for y in 0..s[1] {
                let row = &src[s[0] * (y + s[1] * z)..][..s[0]];
                let base = b.lo[0] + d * (b.lo[1] + y + w * (b.lo[2] + z));
                for (x, v) in row.iter().enumerate() {
                    sum[base + x] += *v as f64;
                    count[base + x] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(s, c)| if *c == 0 { 0.0 } else { ((s / *c as f64) as f32).clamp(0.0, 1.0) })
        .collect();
    Volume3D::new(dims, [1.0; 3], [0.0; 3], ElementKind::Probability, data)
}

/// Inference presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Threshold 0.5, largest 26-connected component.
    #[default]
    Default,
    /// Threshold 0.1, largest 6-connected component.
    Exact,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Mode::Default),
            "exact" => Ok(Mode::Exact),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected default or exact)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    pub threshold: f32,
    pub connectivity: Connectivity,
    /// Voxels added around the lung bounding box before tiling.
    pub roi_buffer: usize,
    pub segmentation: SegmentationParams,
    /// Trachea seed; detected automatically when absent.
    pub trachea_seed: Option<[usize; 3]>,
}

impl Default for InferenceParams {
    fn default() -> Self {
        InferenceParams::for_mode(Mode::Default)
    }
}

impl InferenceParams {
    pub fn for_mode(mode: Mode) -> Self {
        let (threshold, connectivity) = match mode {
            Mode::Default => (0.5, Connectivity::TwentySix),
            Mode::Exact => (0.1, Connectivity::Six),
        };
        InferenceParams {
            threshold,
            connectivity,
            roi_buffer: 30,
            segmentation: SegmentationParams::default(),
            trachea_seed: None,
        }
    }
}

/// Voxels kept before component selection: `prob` inside the lungs at or
/// above `threshold`, plus the central airways.
pub fn candidate_mask(prob: &Volume3D, lung_mask: &Volume3D, central: &Volume3D, threshold: f32) -> Result<Volume3D> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    mask_apply(prob, lung_mask)?
        .map_to_mask(|v| v >= threshold)
        .or(central)
}

/// Masks, thresholds, merges the central airways and keeps the largest
/// connected component.
pub fn extract_airways(
    prob: &Volume3D,
    lung_mask: &Volume3D,
    central: &Volume3D,
    threshold: f32,
    connectivity: Connectivity,
) -> Result<Volume3D> {
    let cand = candidate_mask(prob, lung_mask, central, threshold)?;
    if cand.count_nonzero() == 0 {
        log::warn!("no voxel above threshold {threshold}; returning an empty mask");
        return Ok(cand);
    }
    Ok(largest_component(&cand, connectivity))
}

/// Anything that maps a normalized `(1, z, y, x)` patch to probabilities
/// over its centered output footprint.
pub trait PatchModel: Sync {
    fn patch_shape(&self) -> Dims;
    fn margin(&self) -> [usize; 3];
    fn predict_patch(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchModel for UNetModel<f32> {
    fn patch_shape(&self) -> Dims {
        self.config().input_shape
    }

    fn margin(&self) -> [usize; 3] {
        compute_output_shape(self.config().input_shape, self.config())
            .expect("validated at construction")
            .1
    }

    fn predict_patch(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(patch)
    }
}

/// Result of [`predict`], both in the frame of the input scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: Volume3D,
    pub probability: Volume3D,
    pub central: Volume3D,
}

/// Airway probabilities over the whole scan; zero outside the ROI box.
pub fn predict_probability(ct: &Volume3D, lung_mask: &Volume3D, model: &impl PatchModel, roi_buffer: usize) -> Result<Volume3D> {
    if ct.dims() != lung_mask.dims() {
        return Err(Error::DimMismatch(format!("ct {:?} vs lung mask {:?}", ct.dims(), lung_mask.dims())));
    }
    let roi = compute_roi_bbox(lung_mask, roi_buffer)?;
    let image = normalize_ct(&crop(ct, &roi)?);
    let c = image.dims();
    let patch = model.patch_shape();
    let m = model.margin();
    let mut padded_dims = [0; 3];
    for a in 0..3 {
        padded_dims[a] = (c[a] + 2 * m[a]).max(patch[a]);
    }
    let padded = embed(&image, &BBox::from_corner(m, c), padded_dims, 0.0)?;
    let plan = plan_windows(padded_dims, patch, m)?;
    let outputs: Vec<(BBox, Tensor<f32>)> = plan
        .inputs
        .par_iter()
        .zip(plan.outputs.par_iter())
        .map(|(ib, ob)| {
            let window = crop(&padded, ib)?;
            let t = crate::training::volume_tensor(&window);
            let out = model.predict_patch(&t)?;
            // output footprint in crop coordinates
            let shifted = BBox::new(
                [ob.lo[0] - m[0], ob.lo[1] - m[1], ob.lo[2] - m[2]],
                [ob.hi[0] - m[0], ob.hi[1] - m[1], ob.hi[2] - m[2]],
            )?;
            Ok((shifted, out))
        })
        .collect::<Result<_>>()?;
    let frame = [padded_dims[0] - 2 * m[0], padded_dims[1] - 2 * m[1], padded_dims[2] - 2 * m[2]];
    let agg = aggregate(&outputs, frame)?;
    let prob = crop(&agg, &BBox::full(c))?;
    let prob = prob.with_spacing(ct.spacing())?.with_origin(image.origin());
    embed(&prob, &roi, ct.dims(), 0.0)
}

/// Full pipeline: ROI crop, tiled forward passes, aggregation, then
/// [`extract_airways`] with an automatically extracted central-airway mask.
pub fn predict(ct: &Volume3D, lung_mask: &Volume3D, model: &impl PatchModel, params: &InferenceParams) -> Result<Prediction> {
    let probability = predict_probability(ct, lung_mask, model, params.roi_buffer)?;
    let central = extract_central_airways(ct, lung_mask, params.trachea_seed, &params.segmentation)?;
    let mask = extract_airways(&probability, lung_mask, &central, params.threshold, params.connectivity)?;
    Ok(Prediction {
        mask,
        probability,
        central,
    })
}
