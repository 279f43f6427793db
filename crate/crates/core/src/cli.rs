//! Command-line front end: argument parsing, subcommands and run manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{one_line, PipelineConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scan, records_from_csv, records_to_csv, summarize, ttest, Metric, MetricRecord, Quartiles};
use crate::inference::{predict, Mode};
use crate::mhd::{raw_path_for, read_mhd, write_mhd};
use crate::morphology::{segment_lungs, Connectivity};
use crate::phantom::{render_ct, write_bundle};
use crate::training::{normalize_ct, train, Scan};
use crate::unet::{load_checkpoint_for, CHECKPOINT_VERSION};
use crate::volume::{compute_roi_bbox, crop, ElementKind, Volume3D};

#[derive(Debug, Parser)]
#[command(name = "airway-unet", version, about = "Airway segmentation with a 3D U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides training.seed and phantom.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a series of synthetic phantoms into the data directory.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Overrides phantom.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Crop a scan to its lung bounding box and normalize intensities.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ct: PathBuf,
        /// Computed from the CT when omitted.
        #[arg(long)]
        lung_mask: Option<PathBuf>,
    },
    /// Train on the scans listed in paths.train / paths.val.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the best checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segment CT scans (default: paths.test) with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        extraction: Extraction,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lung masks, one per scan; computed from the CT when omitted.
        #[arg(long, value_delimiter = ',')]
        lung_mask: Vec<PathBuf>,
        /// Also write the aggregated probability map.
        #[arg(long)]
        save_probability: bool,
        /// CT volumes (.mhd).
        scans: Vec<PathBuf>,
    },
    /// Score predictions against ground truth (default: paths.test).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        pred: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        gt: Vec<PathBuf>,
        /// Trachea and main bronchi masks excluded from scoring.
        #[arg(long, value_delimiter = ',')]
        central: Vec<PathBuf>,
        /// Scan names for the CSV (default: derived from file names).
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        /// Group label in the JSON summary.
        #[arg(long, default_value = "all")]
        group: String,
    },
    /// Two-sided t-tests between two metrics CSVs, one row per metric.
    Compare {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        /// Paired test; scans must match row by row.
        #[arg(long)]
        paired: bool,
    },
}

/// Airway extraction overrides for `predict`.
#[derive(Debug, Clone, Default, Args)]
pub struct Extraction {
    /// `exact` switches to threshold 0.1 and 6-connectivity.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
}

fn parse_connectivity(s: &str) -> std::result::Result<Connectivity, String> {
    let n: u8 = s.parse().map_err(|_| format!("{s:?} is not 6 or 26"))?;
    Connectivity::try_from(n).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Errors are reported as one `error[<kind>]: <message>` line.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("error[usage]: {}", one_line(&e.to_string()).trim_start_matches("error: "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, count } => {
            let mut cfg = resolve(&common)?;
            if let Some(out) = &common.out {
                cfg.paths.data_dir = out.clone();
            }
            if let Some(n) = count {
                cfg.phantom.count = n;
            }
            cmd_phantom(&cfg)
        }
        Command::Preprocess { common, ct, lung_mask } => {
            let cfg = resolve(&common)?;
            cmd_preprocess(&cfg, &ct, lung_mask.as_deref())
        }
        Command::Train { common, checkpoint } => {
            let cfg = resolve(&common)?;
            cmd_train(&cfg, checkpoint)
        }
        Command::Predict {
            common,
            extraction,
            checkpoint,
            lung_mask,
            save_probability,
            scans,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = extraction.mode {
                // a mode given on the command line replaces the config's
                // threshold and connectivity unless those are given too
                cfg.inference.mode = m;
                cfg.inference.threshold = None;
                cfg.inference.connectivity = None;
            }
            if extraction.threshold.is_some() {
                cfg.inference.threshold = extraction.threshold;
            }
            if extraction.connectivity.is_some() {
                cfg.inference.connectivity = extraction.connectivity;
            }
            cfg.inference.save_probability |= save_probability;
            cfg.validate()?;
            cmd_predict(&cfg, &checkpoint, &scans, &lung_mask)
        }
        Command::Evaluate {
            common,
            pred,
            gt,
            central,
            names,
            group,
        } => {
            let cfg = resolve(&common)?;
            cmd_evaluate(&cfg, pred, gt, central, names, &group)
        }
        Command::Compare { common, a, b, paired } => {
            let cfg = resolve(&common)?;
            cmd_compare(&cfg, &a, &b, paired)
        }
    }
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.training.seed = s;
        cfg.phantom.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

/// Digests of a file and, for MetaImage headers, the raw payload too.
fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in paths {
        out.push(digest(p)?);
        if p.extension().is_some_and(|e| e == "mhd") {
            out.push(digest(&raw_path_for(p))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    config_hash: String,
    seeds: BTreeMap<&'static str, u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
}

struct Run<'a> {
    command: &'static str,
    cfg: &'a PipelineConfig,
    seeds: BTreeMap<&'static str, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    details: serde_json::Value,
}

impl<'a> Run<'a> {
    fn new(command: &'static str, cfg: &'a PipelineConfig) -> Self {
        Run {
            command,
            cfg,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Writes `<dir>/<command>.manifest.json`.
    fn finish(self, dir: &Path) -> Result<PathBuf> {
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: CHECKPOINT_VERSION,
            config_hash: self.cfg.hash(),
            seeds: self.seeds,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            details: self.details,
        };
        let path = dir.join(format!("{}.manifest.json", self.command));
        write_text(&path, &serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
        Ok(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// File stem without a trailing `_ct`, `_airways` or similar role suffix.
fn scan_stem(path: &Path, suffixes: &[&str]) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for s in suffixes {
        if let Some(base) = stem.strip_suffix(s) {
            if !base.is_empty() {
                return base.to_string();
            }
        }
    }
    stem
}

fn cmd_phantom(cfg: &PipelineConfig) -> Result<()> {
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let ph = &cfg.phantom;
    let files = (0..ph.count)
        .into_par_iter()
        .map(|i| {
            let spec = ph.spec.numbered(ph.seed, i as u64);
            let b = render_ct(&spec)?;
            write_bundle(&b, dir, &ph.name(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut run = Run::new("phantom", cfg);
    run.seeds.insert("phantom", ph.seed);
    for f in &files {
        run.outputs.extend([f.ct.clone(), f.gt.clone(), f.lung.clone(), f.central.clone(), f.manifest.clone()]);
    }
    run.details = serde_json::json!({ "names": (0..ph.count).map(|i| ph.name(i)).collect::<Vec<_>>() });
    run.finish(dir)?;
    log::info!("wrote {} phantoms to {}", ph.count, dir.display());
    Ok(())
}

fn lung_for(ct: &Volume3D, path: Option<&Path>, cfg: &PipelineConfig) -> Result<Volume3D> {
    match path {
        Some(p) => {
            let m = read_mhd(p)?;
            if m.dims() != ct.dims() {
                return Err(Error::DimMismatch(format!(
                    "lung mask {} has dims {:?}, CT has {:?}",
                    p.display(),
                    m.dims(),
                    ct.dims()
                )));
            }
            Ok(m.map_to_mask(|v| v != 0.0))
        }
        None => segment_lungs(ct, &cfg.inference.segmentation),
    }
}

fn cmd_preprocess(cfg: &PipelineConfig, ct_path: &Path, lung_path: Option<&Path>) -> Result<()> {
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let ct = read_mhd(ct_path)?;
    let lung = lung_for(&ct, lung_path, cfg)?;
    let b = compute_roi_bbox(&lung, cfg.inference.roi_buffer)?;
    let stem = scan_stem(ct_path, &["_ct"]);
    let ct_c = crop(&ct, &b)?;
    let files = [
        out.join(format!("{stem}_roi_ct.mhd")),
        out.join(format!("{stem}_roi_norm.mhd")),
        out.join(format!("{stem}_roi_lung.mhd")),
    ];
    write_mhd(&ct_c, &files[0])?;
    write_mhd(&normalize_ct(&ct_c), &files[1])?;
    write_mhd(&crop(&lung, &b)?, &files[2])?;
    let bbox = out.join(format!("{stem}_roi.json"));
    let info = serde_json::json!({ "source_dims": ct.dims(), "lo": b.lo, "hi": b.hi, "buffer": cfg.inference.roi_buffer });
    write_text(&bbox, &serde_json::to_string_pretty(&info).expect("json"))?;
    let mut run = Run::new("preprocess", cfg);
    run.inputs.push(ct_path.to_path_buf());
    run.inputs.extend(lung_path.map(Path::to_path_buf));
    run.outputs.extend(files);
    run.outputs.push(bbox);
    run.finish(out)?;
    Ok(())
}

fn load_scan(cfg: &PipelineConfig, name: &str, inputs: &mut Vec<PathBuf>) -> Result<Scan> {
    let f = cfg.paths.files(name);
    let ct = read_mhd(&f.ct)?;
    let gt = read_mhd(&f.gt)?;
    inputs.extend([f.ct.clone(), f.gt.clone()]);
    let lung = if f.lung.is_file() {
        inputs.push(f.lung.clone());
        lung_for(&ct, Some(&f.lung), cfg)?
    } else {
        segment_lungs(&ct, &cfg.inference.segmentation)?
    };
    if gt.dims() != ct.dims() {
        return Err(Error::DimMismatch(format!("scan {name}: gt {:?} vs ct {:?}", gt.dims(), ct.dims())));
    }
    Scan::cropped(name, &ct, &gt.map_to_mask(|v| v != 0.0), &lung, cfg.inference.roi_buffer)
}

fn cmd_train(cfg: &PipelineConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    cfg.check_training_files()?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let mut run = Run::new("train", cfg);
    let mut inputs = Vec::new();
    let train_scans = cfg
        .paths
        .train
        .iter()
        .map(|n| load_scan(cfg, n, &mut inputs))
        .collect::<Result<Vec<_>>>()?;
    let val_scans = cfg
        .paths
        .val
        .iter()
        .map(|n| load_scan(cfg, n, &mut inputs))
        .collect::<Result<Vec<_>>>()?;
    let ckpt = checkpoint.unwrap_or_else(|| out.join("model.ckpt"));
    let csv = out.join("loss.csv");
    let mut tc = cfg.training.clone();
    tc.checkpoint = Some(ckpt.clone());
    tc.loss_csv = Some(csv.clone());
    let outcome = train(&train_scans, &val_scans, &cfg.unet, &tc)?;
    let config_copy = out.join("train.config.toml");
    write_text(&config_copy, &cfg.to_toml()?)?;
    run.seeds.insert("training", cfg.training.seed);
    run.inputs = inputs;
    run.outputs = vec![ckpt, csv, config_copy];
    run.details = serde_json::json!({
        "epochs": outcome.history.epochs(),
        "best_epoch": outcome.best.epoch,
        "stop": format!("{:?}", outcome.stop),
    });
    run.finish(out)?;
    log::info!("stopped after {} epochs: {:?}", outcome.history.epochs(), outcome.stop);
    Ok(())
}

fn cmd_predict(cfg: &PipelineConfig, checkpoint: &Path, scans: &[PathBuf], lungs: &[PathBuf]) -> Result<()> {
    let scans: Vec<PathBuf> = if scans.is_empty() {
        cfg.paths.test.iter().map(|n| cfg.paths.files(n).ct).collect()
    } else {
        scans.to_vec()
    };
    if scans.is_empty() {
        return Err(Error::Config("no scans given and paths.test is empty".into()));
    }
    if !lungs.is_empty() && lungs.len() != scans.len() {
        return Err(Error::Config(format!("{} lung masks for {} scans", lungs.len(), scans.len())));
    }
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let model = load_checkpoint_for(checkpoint, &cfg.unet)?.model;
    let params = cfg.inference.params();
    let mut run = Run::new("predict", cfg);
    run.inputs.push(checkpoint.to_path_buf());
    for (i, scan) in scans.iter().enumerate() {
        let ct = read_mhd(scan)?;
        let lung_path = lungs.get(i).map(PathBuf::as_path);
        let lung = lung_for(&ct, lung_path, cfg)?;
        let pred = predict(&ct, &lung, &model, &params)?;
        let stem = scan_stem(scan, &["_ct"]);
        let mask = out.join(format!("{stem}_airways.mhd"));
        write_mhd(&pred.mask, &mask)?;
        run.outputs.push(mask);
        if cfg.inference.save_probability {
            let prob = out.join(format!("{stem}_prob.mhd"));
            write_mhd(&pred.probability, &prob)?;
            run.outputs.push(prob);
        }
        run.inputs.push(scan.clone());
        run.inputs.extend(lung_path.map(Path::to_path_buf));
        log::info!("{stem}: {} airway voxels", pred.mask.count_nonzero());
    }
    run.details = serde_json::json!({
        "threshold": params.threshold,
        "connectivity": u8::from(params.connectivity),
    });
    run.finish(out)?;
    Ok(())
}

fn cmd_evaluate(
    cfg: &PipelineConfig,
    mut pred: Vec<PathBuf>,
    mut gt: Vec<PathBuf>,
    mut central: Vec<PathBuf>,
    mut names: Vec<String>,
    group: &str,
) -> Result<()> {
    if pred.is_empty() && gt.is_empty() {
        for n in &cfg.paths.test {
            let f = cfg.paths.files(n);
            pred.push(cfg.paths.out_dir.join(format!("{n}_airways.mhd")));
            gt.push(f.gt);
            central.push(f.central);
            names.push(n.clone());
        }
    }
    if pred.is_empty() {
        return Err(Error::Config("no predictions to evaluate".into()));
    }
    if gt.len() != pred.len() {
        return Err(Error::Config(format!("{} predictions but {} ground truths", pred.len(), gt.len())));
    }
    if !central.is_empty() && central.len() != pred.len() {
        return Err(Error::Config(format!("{} predictions but {} central masks", pred.len(), central.len())));
    }
    if !names.is_empty() && names.len() != pred.len() {
        return Err(Error::Config(format!("{} predictions but {} names", pred.len(), names.len())));
    }
    if names.is_empty() {
        names = pred.iter().map(|p| scan_stem(p, &["_airways", "_pred"])).collect();
    }
    let mut records = Vec::new();
    let mut run = Run::new("evaluate", cfg);
    for i in 0..pred.len() {
        let p = read_mhd(&pred[i])?;
        let g = read_mhd(&gt[i])?;
        let c = match central.get(i) {
            Some(path) => read_mhd(path)?,
            None => g.zeros_like(ElementKind::BinaryMask),
        };
        records.push(evaluate_scan(&names[i], &p, &g, &c)?);
        run.inputs.extend([pred[i].clone(), gt[i].clone()]);
        run.inputs.extend(central.get(i).cloned());
    }
    let summary = summarize(&[(group.to_string(), records.clone())])?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let csv = out.join("metrics.csv");
    let json = out.join("summary.json");
    write_text(&csv, &records_to_csv(&records))?;
    write_text(&json, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    run.outputs = vec![csv, json];
    run.finish(out)?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text)
}

/// Significance level for the comparison table.
pub const ALPHA: f64 = 0.01;

pub const COMPARE_HEADER: &str = "metric,n_a,n_b,median_a,median_b,t,df,p,significant";

fn cmd_compare(cfg: &PipelineConfig, a_path: &Path, b_path: &Path, paired: bool) -> Result<()> {
    let a = read_records(a_path)?;
    let b = read_records(b_path)?;
    if paired {
        if a.len() != b.len() {
            return Err(Error::Config(format!("paired comparison of {} and {} scans", a.len(), b.len())));
        }
        if let Some((x, y)) = a.iter().zip(&b).find(|(x, y)| x.scan != y.scan) {
            return Err(Error::Config(format!("paired rows differ: {} vs {}", x.scan, y.scan)));
        }
    }
    let mut table = String::from(COMPARE_HEADER);
    table.push('\n');
    for m in Metric::ALL {
        let va: Vec<f64> = a.iter().map(|r| r.get(m)).collect();
        let vb: Vec<f64> = b.iter().map(|r| r.get(m)).collect();
        let (qa, qb) = (Quartiles::of(&va), Quartiles::of(&vb));
        let stats = match ttest(&va, &vb, paired) {
            Ok(t) => format!("{},{},{},{}", t.t, t.df, t.p, t.p < ALPHA),
            Err(Error::Degenerate(_)) => "NA,NA,NA,NA".to_string(),
            Err(e) => return Err(e),
        };
        table.push_str(&format!("{},{},{},{},{},{stats}\n", m.name(), va.len(), vb.len(), qa.median, qb.median));
    }
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let path = out.join("compare.csv");
    write_text(&path, &table)?;
    print!("{table}");
    let mut run = Run::new("compare", cfg);
    run.inputs = vec![a_path.to_path_buf(), b_path.to_path_buf()];
    run.outputs = vec![path];
    run.details = serde_json::json!({ "paired": paired, "alpha": ALPHA });
    run.finish(out)?;
    Ok(())
}
