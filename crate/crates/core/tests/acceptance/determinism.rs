use airway_unet::inference::{predict, InferenceParams, Mode};
use airway_unet::morphology::{segment_lungs, SegmentationParams};
use airway_unet::phantom::{render_ct, PhantomSpec};
use airway_unet::training::{Scan, TrainConfig, Trainer};
use airway_unet::unet::UNetConfig;
use airway_unet::volume::Volume3D;

use super::common::Outcome;

const EPOCHS: usize = 2;

struct Run {
    losses: Vec<u64>,
    params: Vec<u32>,
    mask: Vec<u32>,
    prob: Vec<u32>,
}

fn bits(v: &Volume3D) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

fn run_once(scans: &[Scan], test: &(Volume3D, Volume3D)) -> Run {
    let config = TrainConfig {
        seed: 9,
        patches_per_scan: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&UNetConfig::desk(), config).unwrap();
    let losses = (0..EPOCHS).map(|_| t.train_epoch(scans).unwrap().to_bits()).collect();
    let params = t.model.parameters().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect();
    let p = predict(&test.0, &test.1, &t.model, &InferenceParams::for_mode(Mode::Default)).unwrap();
    Run {
        losses,
        params,
        mask: bits(&p.mask),
        prob: bits(&p.probability),
    }
}

pub fn run() -> Outcome {
    let spec = PhantomSpec::default();
    let scans: Vec<Scan> = (0..2)
        .map(|i| {
            let b = render_ct(&spec.numbered(3, i)).unwrap();
            let lung = segment_lungs(&b.ct, &SegmentationParams::default()).unwrap();
            Scan::cropped(format!("d{i}"), &b.ct, &b.gt, &lung, 30).unwrap()
        })
        .collect();
    let b = render_ct(&spec.numbered(3, 50)).unwrap();
    let lung = segment_lungs(&b.ct, &SegmentationParams::default()).unwrap();
    let test = (b.ct, lung);
    let a = run_once(&scans, &test);
    let c = run_once(&scans, &test);
    Outcome::all(vec![
        Outcome::new(a.losses == c.losses, format!("{EPOCHS}-epoch loss trajectories bitwise equal: {}", a.losses == c.losses)),
        Outcome::new(a.params == c.params, format!("weights bitwise equal: {}", a.params == c.params)),
        Outcome::new(
            a.prob == c.prob && a.mask == c.mask,
            format!("probabilities and masks bitwise equal: {}", a.prob == c.prob && a.mask == c.mask),
        ),
    ])
}
