use airway_unet::volume::{ElementKind, Volume3D};
use rand::Rng;

/// Result of one criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Outcome::new(false, detail)
    }

    /// All of `parts` must pass; details are joined.
    pub fn all(parts: Vec<Outcome>) -> Self {
        let pass = parts.iter().all(|p| p.pass);
        let detail = parts
            .iter()
            .map(|p| if p.pass { p.detail.clone() } else { format!("FAILED {}", p.detail) })
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { pass, detail }
    }
}

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut impl Rng) -> Volume3D {
    let n = dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| rng.gen_bool(density) as u8 as f32).collect();
    Volume3D::new(dims, [1.0; 3], [0.0; 3], ElementKind::BinaryMask, data).unwrap()
}

pub fn mask_from(dims: [usize; 3], on: impl Fn(usize, usize, usize) -> bool) -> Volume3D {
    let mut data = vec![0.0; dims[0] * dims[1] * dims[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if on(x, y, z) {
                    data[x + dims[0] * (y + dims[1] * z)] = 1.0;
                }
            }
        }
    }
    Volume3D::new(dims, [1.0; 3], [0.0; 3], ElementKind::BinaryMask, data).unwrap()
}

/// Solid tube of `radius` along x from `x0` to `x1` (inclusive), centered
/// in the y-z plane.
pub fn tube(dims: [usize; 3], radius: f64, x0: usize, x1: usize) -> Volume3D {
    let cy = (dims[1] - 1) as f64 / 2.0;
    let cz = (dims[2] - 1) as f64 / 2.0;
    mask_from(dims, |x, y, z| {
        x >= x0 && x <= x1 && (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2) <= radius * radius
    })
}
