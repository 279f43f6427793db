//! Synthetic chest phantoms with a branching airway tree and exact labels.
//!
//! Geometry is laid out in millimetres with voxel `i` centred at
//! `i * spacing`. The trachea runs caudally (increasing z) from the top
//! slice to the carina, the main bronchi leave it in the x-z plane, and
//! later generations branch at random azimuths inside two ellipsoidal
//! lungs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhd::write_mhd;
use crate::volume::{Dims, ElementKind, Volume3D};

type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: P3, b: P3) -> P3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn norm(a: P3) -> f64 {
    dot(a, a).sqrt()
}
fn unit(a: P3) -> P3 {
    scale(a, 1.0 / norm(a))
}

/// Distance from `p` to the segment `[a, b]`.
fn point_segment(p: P3, a: P3, b: P3) -> f64 {
    let ab = sub(b, a);
    let l2 = dot(ab, ab);
    let t = if l2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / l2).clamp(0.0, 1.0) };
    norm(sub(p, add(a, scale(ab, t))))
}

/// Branching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeSpec {
    /// Branching depth below the trachea.
    pub generations: usize,
    /// Trachea lumen radius, mm.
    pub root_radius: f64,
    /// Child radius over parent radius.
    pub taper: f64,
    /// Angle between parent and child direction, degrees.
    pub angle_min: f64,
    pub angle_max: f64,
    /// Segment length over segment radius (bronchi only).
    pub length_ratio: f64,
    pub seed: u64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            generations: 3,
            root_radius: 4.0,
            taper: 0.75,
            angle_min: 35.0,
            angle_max: 50.0,
            length_ratio: 6.0,
            seed: 0,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.taper > 0.0 && self.taper < 1.0) {
            return Err(Error::Phantom(format!("taper {} outside (0, 1)", self.taper)));
        }
        if !(self.root_radius > 0.0) || !(self.length_ratio > 0.0) {
            return Err(Error::Phantom("radius and length ratio must be positive".into()));
        }
        if !(0.0 <= self.angle_min && self.angle_min <= self.angle_max && self.angle_max < 90.0) {
            return Err(Error::Phantom(format!(
                "angle range [{}, {}] invalid",
                self.angle_min, self.angle_max
            )));
        }
        Ok(())
    }
}

/// Lumen intensities and wall thickness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub lumen: f32,
    pub wall: f32,
    pub parenchyma: f32,
    pub vessel: f32,
    pub body: f32,
    pub exterior: f32,
    /// Wall thickness, mm.
    pub wall_thickness: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            lumen: -950.0,
            wall: -200.0,
            parenchyma: -850.0,
            vessel: 0.0,
            body: 40.0,
            exterior: -1000.0,
            wall_thickness: 1.5,
        }
    }
}

/// Everything that determines one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Isotropic voxel size, mm.
    pub spacing: f64,
    pub tree: TreeSpec,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub vessels_per_lung: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128; 3],
            spacing: 0.7,
            tree: TreeSpec::default(),
            intensities: Intensities::default(),
            noise_sigma: 20.0,
            noise_seed: 0,
            vessels_per_lung: 4,
        }
    }
}

impl PhantomSpec {
    /// The `index`-th phantom of a series: tree and noise seeds derived
    /// from `base_seed`.
    pub fn numbered(&self, base_seed: u64, index: u64) -> PhantomSpec {
        let mut s = self.clone();
        s.tree.seed = base_seed.wrapping_mul(1000).wrapping_add(2 * index);
        s.noise_seed = base_seed.wrapping_mul(1000).wrapping_add(2 * index + 1);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipsoid {
    center: P3,
    semi: P3,
}

impl Ellipsoid {
    /// Inside the ellipsoid shrunk by `margin` along every semi-axis.
    fn contains(&self, p: P3, margin: f64) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let r = self.semi[a] - margin;
            if r <= 0.0 {
                return false;
            }
            s += ((p[a] - self.center[a]) / r).powi(2);
        }
        s <= 1.0
    }
}

/// Fixed anatomy of a phantom volume, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    extent: P3,
    lungs: [Ellipsoid; 2],
    body_center: [f64; 2],
    body_semi: [f64; 2],
}

impl Layout {
    fn new(dims: Dims, spacing: f64) -> Layout {
        let e = [dims[0] as f64 * spacing, dims[1] as f64 * spacing, dims[2] as f64 * spacing];
        let lung = |side: f64| Ellipsoid {
            center: [e[0] * (0.5 + side * 0.22), e[1] * 0.5, e[2] * 0.58],
            semi: [e[0] * 0.19, e[1] * 0.36, e[2] * 0.36],
        };
        Layout {
            extent: e,
            lungs: [lung(-1.0), lung(1.0)],
            body_center: [e[0] * 0.5, e[1] * 0.5],
            body_semi: [e[0] * 0.485, e[1] * 0.45],
        }
    }
}

/// One tube of the centerline graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: P3,
    pub end: P3,
    /// Lumen radius, mm.
    pub radius: f64,
    /// 0 for the trachea.
    pub generation: usize,
    pub parent: Option<usize>,
}

impl Segment {
    pub fn length(&self) -> f64 {
        norm(sub(self.end, self.start))
    }

    fn distance(&self, p: P3) -> f64 {
        point_segment(p, self.start, self.end)
    }

    fn samples(&self, n: usize) -> impl Iterator<Item = P3> + '_ {
        let d = sub(self.end, self.start);
        (0..=n).map(move |i| add(self.start, scale(d, i as f64 / n as f64)))
    }
}

/// Centerline graph of an airway tree: nodes are segment end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirwayTree {
    pub segments: Vec<Segment>,
}

impl AirwayTree {
    /// Voxels nearest to points sampled densely along every centerline.
    pub fn centerline_mask(&self, dims: Dims, spacing: f64) -> Volume3D {
        let mut data = vec![0.0f32; dims.iter().product()];
        for s in &self.segments {
            let n = (s.length() / (0.25 * spacing)).ceil().max(1.0) as usize;
            for p in s.samples(n) {
                let i = [
                    (p[0] / spacing).round(),
                    (p[1] / spacing).round(),
                    (p[2] / spacing).round(),
                ];
                if (0..3).all(|a| i[a] >= 0.0 && (i[a] as usize) < dims[a]) {
                    data[i[0] as usize + dims[0] * (i[1] as usize + dims[1] * i[2] as usize)] = 1.0;
                }
            }
        }
        Volume3D::new(dims, [spacing; 3], [0.0; 3], ElementKind::BinaryMask, data).expect("binary")
    }
}

/// Unit vector at `angle` from `dir`, rotated by `azimuth` around it.
fn deflect(dir: P3, angle: f64, azimuth: f64) -> P3 {
    let helper = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = unit(cross(dir, helper));
    let v = cross(dir, u);
    let side = add(scale(u, azimuth.cos()), scale(v, azimuth.sin()));
    unit(add(scale(dir, angle.cos()), scale(side, angle.sin())))
}

const MAX_ATTEMPTS: usize = 500;

/// Grows the tree generation by generation. Each pair of children is
/// resampled until both stay inside the lung with room for the wall and
/// keep clear of every other segment; a tree that gets stuck is restarted
/// from a fresh stream.
fn grow(spec: &TreeSpec, layout: &Layout, wall: f64) -> Result<AirwayTree> {
    spec.validate()?;
    let mut last = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(restart);
        match grow_once(spec, layout, wall, &mut rng) {
            Ok(t) => return Ok(t),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

const RESTARTS: u64 = 20;

fn grow_once(spec: &TreeSpec, layout: &Layout, wall: f64, rng: &mut ChaCha8Rng) -> Result<AirwayTree> {
    let e = layout.extent;
    let carina = [e[0] * 0.5, e[1] * 0.5, e[2] * 0.3];
    let mut segs = vec![Segment {
        start: [carina[0], carina[1], -2.0],
        end: carina,
        radius: spec.root_radius,
        generation: 0,
        parent: None,
    }];
    let angle = |rng: &mut ChaCha8Rng| -> f64 {
        if spec.angle_max > spec.angle_min {
            rng.gen_range(spec.angle_min..=spec.angle_max).to_radians()
        } else {
            spec.angle_min.to_radians()
        }
    };
    let mut frontier = vec![0usize];
    for generation in 1..=spec.generations {
        let mut next = Vec::new();
        for &pi in &frontier {
            let parent = segs[pi];
            let radius = parent.radius * spec.taper;
            let length = radius * spec.length_ratio;
            let margin = radius + wall + 0.5;
            let mut placed = None;
            for _ in 0..MAX_ATTEMPTS {
                let dirs = if generation == 1 {
                    let (a, b) = (angle(rng), angle(rng));
                    [[-a.sin(), 0.0, a.cos()], [b.sin(), 0.0, b.cos()]]
                } else {
                    let dir = unit(sub(parent.end, parent.start));
                    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                    [
                        deflect(dir, angle(rng), phi),
                        deflect(dir, angle(rng), phi + std::f64::consts::PI),
                    ]
                };
                let kids = dirs.map(|d| Segment {
                    start: parent.end,
                    end: add(parent.end, scale(d, length)),
                    radius,
                    generation,
                    parent: Some(pi),
                });
                // leave room for the next generation beyond the end point
                let ahead = if generation < spec.generations { 0.25 * length * spec.taper } else { 0.0 };
                let ok = kids.iter().all(|k| {
                    let lung = layout.lungs.iter().find(|l| l.contains(k.end, margin + ahead));
                    let Some(lung) = lung else { return false };
                    // main bronchi start outside the lungs
                    let inside = generation == 1 || k.samples(12).all(|p| lung.contains(p, margin));
                    inside
                        && segs.iter().enumerate().all(|(j, o)| {
                            if j == pi || o.parent == Some(pi) {
                                return true;
                            }
                            let clear = k.radius + o.radius + wall;
                            k.samples(24).all(|p| o.distance(p) >= clear)
                        })
                });
                if ok {
                    placed = Some(kids);
                    break;
                }
            }
            let Some(kids) = placed else {
                return Err(Error::Phantom(format!(
                    "could not place generation {generation} children of segment {pi} after {MAX_ATTEMPTS} attempts"
                )));
            };
            for k in kids {
                segs.push(k);
                next.push(segs.len() - 1);
            }
        }
        frontier = next;
    }
    Ok(AirwayTree { segments: segs })
}

/// Centerline graph for `spec` inside the default phantom layout of `dims`
/// voxels at `spacing` mm.
pub fn generate_tree(spec: &TreeSpec, dims: Dims, spacing: f64) -> Result<AirwayTree> {
    grow(spec, &Layout::new(dims, spacing), Intensities::default().wall_thickness)
}

/// A rendered phantom with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomBundle {
    pub ct: Volume3D,
    /// Airway lumen.
    pub gt: Volume3D,
    pub lung: Volume3D,
    /// Lumen outside the lungs: trachea and extrapulmonary bronchi.
    pub central: Volume3D,
    pub tree: AirwayTree,
    pub vessels: Vec<Segment>,
    pub spec: PhantomSpec,
}

fn place_vessels(spec: &PhantomSpec, layout: &Layout, tree: &AirwayTree, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let wall = spec.intensities.wall_thickness;
    let mut out: Vec<Segment> = Vec::new();
    for lung in &layout.lungs {
        let mut placed = 0;
        for _ in 0..MAX_ATTEMPTS {
            if placed == spec.vessels_per_lung {
                break;
            }
            let r = rng.gen_range(0.8..1.5);
            let len = rng.gen_range(10.0..25.0);
            let start = [
                lung.center[0] + rng.gen_range(-1.0..1.0) * lung.semi[0],
                lung.center[1] + rng.gen_range(-1.0..1.0) * lung.semi[1],
                lung.center[2] + rng.gen_range(-1.0..1.0) * lung.semi[2],
            ];
            let dir = unit([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let v = Segment {
                start,
                end: add(start, scale(dir, len)),
                radius: r,
                generation: 0,
                parent: None,
            };
            let ok = v.samples(12).all(|p| lung.contains(p, r + 1.0))
                && tree.segments.iter().all(|s| v.samples(24).all(|p| s.distance(p) >= r + s.radius + wall + 1.0))
                && out.iter().all(|o| v.samples(24).all(|p| o.distance(p) >= r + o.radius + 1.0));
            if ok {
                out.push(v);
                placed += 1;
            }
        }
    }
    out
}

/// Renders `spec`: exterior air, body, lungs, vessels, airway walls and
/// lumen (later entries win), then additive Gaussian noise rounded to
/// integer HU.
pub fn render_ct(spec: &PhantomSpec) -> Result<PhantomBundle> {
    if spec.dims.iter().any(|d| *d == 0) || !(spec.spacing > 0.0) {
        return Err(Error::Phantom(format!("bad geometry {:?} @ {}", spec.dims, spec.spacing)));
    }
    let layout = Layout::new(spec.dims, spec.spacing);
    let it = spec.intensities;
    let tree = grow(&spec.tree, &layout, it.wall_thickness)?;
    let mut vrng = ChaCha8Rng::seed_from_u64(spec.tree.seed ^ 0x5eed_7e55e1);
    let vessels = place_vessels(spec, &layout, &tree, &mut vrng);

    let [d, w, h] = spec.dims;
    let n = d * w * h;
    let s = spec.spacing;
    let pos = |x: usize, y: usize, z: usize| [x as f64 * s, y as f64 * s, z as f64 * s];
    let mut ct = vec![it.exterior; n];
    let mut lung = vec![0.0f32; n];
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let p = pos(x, y, z);
                let i = x + d * (y + w * z);
                let bx = (p[0] - layout.body_center[0]) / layout.body_semi[0];
                let by = (p[1] - layout.body_center[1]) / layout.body_semi[1];
                if bx * bx + by * by <= 1.0 {
                    ct[i] = it.body;
                }
                if layout.lungs.iter().any(|l| l.contains(p, 0.0)) {
                    ct[i] = it.parenchyma;
                    lung[i] = 1.0;
                }
            }
        }
    }
    let mut gt = vec![0.0f32; n];
    let mut wall = vec![false; n];
    let paint = |seg: &Segment, reach: f64, f: &mut dyn FnMut(usize, f64)| {
        let lo: Vec<usize> = (0..3)
            .map(|a| ((seg.start[a].min(seg.end[a]) - reach) / s).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| (((seg.start[a].max(seg.end[a]) + reach) / s).ceil().max(0.0) as usize).min(spec.dims[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let dist = seg.distance(pos(x, y, z));
                    if dist <= reach {
                        f(x + d * (y + w * z), dist);
                    }
                }
            }
        }
    };
    for v in &vessels {
        paint(v, v.radius, &mut |i, _| ct[i] = it.vessel);
    }
    for seg in &tree.segments {
        paint(seg, seg.radius + it.wall_thickness, &mut |i, dist| {
            if dist <= seg.radius {
                gt[i] = 1.0;
            } else {
                wall[i] = true;
            }
        });
    }
    for i in 0..n {
        if gt[i] != 0.0 {
            ct[i] = it.lumen;
        } else if wall[i] {
            ct[i] = it.wall;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Phantom(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        for v in ct.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).round().clamp(-1024.0, 3071.0) as f32;
        }
    }
    let sp = [s; 3];
    let ct = Volume3D::new(spec.dims, sp, [0.0; 3], ElementKind::CtHu, ct)?;
    let gt = Volume3D::new(spec.dims, sp, [0.0; 3], ElementKind::BinaryMask, gt)?;
    let lung = Volume3D::new(spec.dims, sp, [0.0; 3], ElementKind::BinaryMask, lung)?;
    let central = gt.and_not(&lung)?;
    Ok(PhantomBundle {
        ct,
        gt,
        lung,
        central,
        tree,
        vessels,
        spec: spec.clone(),
    })
}

/// Paths of the files written by [`write_bundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub ct: PathBuf,
    pub gt: PathBuf,
    pub lung: PathBuf,
    pub central: PathBuf,
    pub manifest: PathBuf,
}

impl BundleFiles {
    pub fn in_dir(dir: &Path, name: &str) -> BundleFiles {
        BundleFiles {
            ct: dir.join(format!("{name}_ct.mhd")),
            gt: dir.join(format!("{name}_gt.mhd")),
            lung: dir.join(format!("{name}_lung.mhd")),
            central: dir.join(format!("{name}_central.mhd")),
            manifest: dir.join(format!("{name}.json")),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    spec: &'a PhantomSpec,
    segments: usize,
    gt_voxels: usize,
    central_voxels: usize,
    lung_voxels: usize,
    vessels: usize,
    tree: &'a AirwayTree,
}

/// Writes the four volumes as MetaImage plus a JSON manifest with the
/// spec and tree statistics.
pub fn write_bundle(b: &PhantomBundle, dir: &Path, name: &str) -> Result<BundleFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = BundleFiles::in_dir(dir, name);
    write_mhd(&b.ct, &f.ct)?;
    write_mhd(&b.gt, &f.gt)?;
    write_mhd(&b.lung, &f.lung)?;
    write_mhd(&b.central, &f.central)?;
    let m = Manifest {
        name,
        spec: &b.spec,
        segments: b.tree.segments.len(),
        gt_voxels: b.gt.count_nonzero(),
        central_voxels: b.central.count_nonzero(),
        lung_voxels: b.lung.count_nonzero(),
        vessels: b.vessels.len(),
        tree: &b.tree,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Phantom(e.to_string()))?;
    std::fs::write(&f.manifest, text).map_err(|e| Error::io(&f.manifest, e))?;
    Ok(f)
}
