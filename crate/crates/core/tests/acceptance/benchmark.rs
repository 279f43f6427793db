use std::time::Instant;

use airway_unet::evaluation::{evaluate_scan, MetricRecord};
use airway_unet::inference::{predict, InferenceParams, Mode};
use airway_unet::morphology::{segment_lungs, SegmentationParams};
use airway_unet::phantom::{render_ct, PhantomBundle, PhantomSpec};
use airway_unet::training::{validation_samples, Scan, TrainConfig, Trainer};
use airway_unet::unet::{compute_output_shape, UNetConfig};
use airway_unet::volume::Volume3D;

use super::common::Outcome;

const SEED: u64 = 1;
const TRAIN: std::ops::Range<u64> = 0..10;
const TEST: std::ops::Range<u64> = 100..105;
/// Of the 10 training phantoms, the last 2 are held out for validation.
const VAL_COUNT: usize = 2;
const EPOCHS: usize = 60;
const LEARNING_RATE: f64 = 2e-5;
const ROI_BUFFER: usize = 30;

const MIN_TL: f64 = 80.0;
const MAX_CL: f64 = 20.0;
const MIN_DSC: f64 = 0.85;
const MAX_MINUTES: f64 = 60.0;

fn phantom(index: u64) -> (PhantomBundle, Volume3D) {
    let b = render_ct(&PhantomSpec::default().numbered(SEED, index)).unwrap();
    let lung = segment_lungs(&b.ct, &SegmentationParams::default()).unwrap();
    (b, lung)
}

fn config() -> TrainConfig {
    TrainConfig {
        seed: SEED,
        max_epochs: EPOCHS,
        learning_rate: LEARNING_RATE,
        ..TrainConfig::default()
    }
}

fn mean(recs: &[MetricRecord], f: impl Fn(&MetricRecord) -> f64) -> f64 {
    recs.iter().map(f).sum::<f64>() / recs.len() as f64
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let net = UNetConfig::desk();
    let scans: Vec<Scan> = TRAIN
        .map(|i| {
            let (b, lung) = phantom(i);
            Scan::cropped(format!("phantom_{i:03}"), &b.ct, &b.gt, &lung, ROI_BUFFER).unwrap()
        })
        .collect();
    let (train, val) = scans.split_at(scans.len() - VAL_COUNT);

    let outcome = Trainer::new(&net, config()).unwrap().run(train, val).unwrap();
    let h = &outcome.history;
    let best = h.best_epoch().unwrap();
    println!(
        "    trained {} epochs ({:?}); train loss {:.4} -> {:.4}; best val {:.4} at epoch {best}",
        h.train.len(),
        outcome.stop,
        h.train[0],
        h.train[h.train.len() - 1],
        h.val[best]
    );

    let mut recs = Vec::new();
    for i in TEST {
        let (b, lung) = phantom(i);
        let p = predict(&b.ct, &lung, &outcome.best.model, &InferenceParams::for_mode(Mode::Default)).unwrap();
        let r = evaluate_scan(&format!("phantom_{i:03}"), &p.mask, &b.gt, &b.central).unwrap();
        println!(
            "    {}: TL {:.1} CL {:.1} FPR {:.1} DSC {:.3}",
            r.scan, r.tree_length, r.centerline_leakage, r.false_positive_rate, r.dice
        );
        recs.push(r);
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    // Same seed, fresh trainer: the first epoch's losses repeat bitwise.
    let mut again = Trainer::new(&net, config()).unwrap();
    let (_, margin) = compute_output_shape(net.input_shape, &net).unwrap();
    let train0 = again.train_epoch(train).unwrap();
    let val0 = again.evaluate(&validation_samples(val, net.input_shape, margin).unwrap()).unwrap();
    let same = train0.to_bits() == h.train[0].to_bits() && val0.to_bits() == h.val[0].to_bits();

    let (tl, cl, dsc) = (
        mean(&recs, |r| r.tree_length),
        mean(&recs, |r| r.centerline_leakage),
        mean(&recs, |r| r.dice),
    );
    Outcome::all(vec![
        Outcome::new(tl >= MIN_TL, format!("mean TL {tl:.1} >= {MIN_TL}")),
        Outcome::new(cl <= MAX_CL, format!("mean CL {cl:.1} <= {MAX_CL}")),
        Outcome::new(dsc >= MIN_DSC, format!("mean DSC {dsc:.3} >= {MIN_DSC}")),
        Outcome::new(minutes <= MAX_MINUTES, format!("train + test {minutes:.1} min <= {MAX_MINUTES}")),
        Outcome::new(same, format!("seeded rerun of epoch 0 bitwise equal: {same}")),
    ])
}
