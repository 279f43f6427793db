use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::convergence::{convergence_check, Convergence, LossHistory, StopReason};
use super::loss::soft_dice_loss;
use super::patch::{augment, extract_patch, sample_patch, AugmentParams, Scan, TrainSample};
use crate::error::{Error, Result};
use crate::tensor::{AdamHyper, AdamState, Graph};
use crate::unet::{compute_output_shape, init_weights, save_checkpoint, Checkpoint, UNetConfig, UNetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub patches_per_scan: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub average_window: usize,
    pub stall_window: usize,
    pub augment: AugmentParams,
    /// Where the best checkpoint is written, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Where the loss history CSV is rewritten after every epoch.
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        TrainConfig {
            seed: 0,
            patches_per_scan: 8,
            max_epochs: 1000,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            average_window: 50,
            stall_window: 20,
            augment: AugmentParams::default(),
            checkpoint: None,
            loss_csv: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub history: LossHistory,
    pub stop: StopReason,
}

/// Mutable training state. Epoch `e` draws its patches from a stream keyed
/// by `(seed, e)`, so a run restored from a checkpoint continues exactly as
/// the uninterrupted run would.
pub struct Trainer {
    pub model: UNetModel<f32>,
    pub optimizer: AdamState<f32>,
    /// Number of completed epochs.
    pub epoch: u64,
    pub history: LossHistory,
    config: TrainConfig,
    margin: [usize; 3],
}

impl Trainer {
    pub fn new(net: &UNetConfig, config: TrainConfig) -> Result<Self> {
        let model = init_weights::<f32>(net, config.seed)?;
        let optimizer = AdamState::new(model.parameters(), config.adam());
        Self::assemble(model, optimizer, 0, config)
    }

    /// Continues from a saved state; `history` holds the epochs run so far.
    pub fn resume(ck: Checkpoint, history: LossHistory, config: TrainConfig) -> Result<Self> {
        let mut t = Self::assemble(ck.model, ck.optimizer, ck.epoch, config)?;
        t.history = history;
        Ok(t)
    }

    fn assemble(model: UNetModel<f32>, optimizer: AdamState<f32>, epoch: u64, config: TrainConfig) -> Result<Self> {
        let (_, margin) = compute_output_shape(model.config().input_shape, model.config())?;
        if config.patches_per_scan == 0 {
            return Err(Error::Training("patches_per_scan must be >= 1".into()));
        }
        Ok(Trainer {
            history: LossHistory::new(config.average_window, config.stall_window),
            model,
            optimizer,
            epoch,
            config,
            margin,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
        }
    }

    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        rng
    }

    /// The augmented samples of epoch `epoch`, in the order they are used:
    /// `patches_per_scan` per scan, scans visited in a shuffled order.
    pub fn epoch_samples(&self, train: &[Scan], epoch: u64) -> Result<Vec<(usize, TrainSample)>> {
        let mut rng = self.epoch_rng(epoch);
        let patch = self.model.config().input_shape;
        let mut order: Vec<usize> = (0..train.len())
            .flat_map(|i| std::iter::repeat(i).take(self.config.patches_per_scan))
            .collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|i| {
                let p = sample_patch(&train[i], patch, &mut rng)?;
                let p = augment(&p, &mut rng, &self.config.augment);
                Ok((i, p.into_sample(self.margin)?))
            })
            .collect()
    }

    /// Forward, loss, backward and one Adam update. Returns the loss before
    /// the update.
    pub fn step(&mut self, s: &TrainSample) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(s.image.clone());
        let rec = self.model.record(&mut g, x, true)?;
        let loss = soft_dice_loss(&mut g, rec.output, &s.gt, &s.roi)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {value} at epoch {} step {}",
                self.epoch, self.optimizer.t
            )));
        }
        let mut grads = g.backward(loss)?;
        let grads = rec.gradients(&mut grads)?;
        self.optimizer.step(self.model.parameters_mut(), &grads)?;
        Ok(value)
    }

    /// Mean Dice loss over fixed samples, without updates.
    pub fn evaluate(&self, samples: &[TrainSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Training("no validation samples".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let mut g = Graph::new();
            let x = g.input(s.image.clone());
            let rec = self.model.record(&mut g, x, false)?;
            let loss = soft_dice_loss(&mut g, rec.output, &s.gt, &s.roi)?;
            total += g.value(loss).data()[0] as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// One epoch of updates; returns the mean training loss.
    pub fn train_epoch(&mut self, train: &[Scan]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Training("empty training split".into()));
        }
        let samples = self.epoch_samples(train, self.epoch)?;
        let mut total = 0.0;
        for (scan, s) in &samples {
            total += self.step(s).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("{m} (scan {})", train[*scan].name)),
                e => e,
            })?;
        }
        self.epoch += 1;
        Ok(total / samples.len() as f64)
    }

    /// Trains until the convergence rule fires or `max_epochs` is reached,
    /// keeping the state with the lowest validation loss.
    pub fn run(mut self, train: &[Scan], val: &[Scan]) -> Result<TrainOutcome> {
        if val.is_empty() {
            return Err(Error::Training("empty validation split".into()));
        }
        let patch = self.model.config().input_shape;
        let val_samples = validation_samples(val, patch, self.margin)?;
        let mut best: Option<(f64, Checkpoint)> = None;
        if let Some(i) = self.history.best_epoch() {
            // resumed: the caller's checkpoint is the best we know of
            best = Some((self.history.val[i], self.checkpoint()));
        }
        let stop = loop {
            if self.epoch as usize >= self.config.max_epochs {
                break StopReason::EpochCap;
            }
            let tl = self.train_epoch(train)?;
            let vl = self.evaluate(&val_samples)?;
            if !vl.is_finite() {
                return Err(Error::Training(format!("non-finite validation loss at epoch {}", self.epoch)));
            }
            self.history.push(tl, vl);
            log::info!("epoch {} train {tl:.5} val {vl:.5}", self.epoch);
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                let ck = self.checkpoint();
                if let Some(path) = &self.config.checkpoint {
                    save_checkpoint(&ck.model, &ck.optimizer, ck.epoch, path)?;
                }
                best = Some((vl, ck));
            }
            if let Some(path) = &self.config.loss_csv {
                std::fs::write(path, self.history.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            if let Convergence::Stop(r) = convergence_check(&self.history) {
                break r;
            }
        };
        let best = match best {
            Some((_, ck)) => ck,
            None => self.checkpoint(),
        };
        Ok(TrainOutcome {
            best,
            history: self.history,
            stop,
        })
    }
}

/// Tile starts along one axis: multiples of `step`, with the last one
/// clamped to `size - patch`.
pub(crate) fn tile_starts(size: usize, patch: usize, step: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..).map(|i| i * step).take_while(|v| v + patch < size).collect();
    s.push(size - patch);
    s.dedup();
    s
}

/// Unaugmented input windows whose output footprints tile each validation
/// scan's interior (the region training outputs can reach) without gaps.
/// Windows whose output footprint contains no ROI voxel are skipped.
pub fn validation_samples(val: &[Scan], patch: [usize; 3], margin: [usize; 3]) -> Result<Vec<TrainSample>> {
    if (0..3).any(|a| 2 * margin[a] >= patch[a]) {
        return Err(Error::Shape(format!("margin {margin:?} leaves nothing of patch {patch:?}")));
    }
    let mut out = Vec::new();
    for scan in val {
        let s = scan.padded_to(patch);
        let d = s.dims();
        let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(d[a], patch[a], patch[a] - 2 * margin[a])).collect();
        for &z in &starts[2] {
            for &y in &starts[1] {
                for &x in &starts[0] {
                    let sample = extract_patch(&s, [x, y, z], patch)?.into_sample(margin)?;
                    if sample.roi.data().iter().any(|v| *v != 0.0) {
                        out.push(sample);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Training("validation scans contain no ROI voxels".into()));
    }
    Ok(out)
}

/// Convenience wrapper: fresh model, full run.
pub fn train(train: &[Scan], val: &[Scan], net: &UNetConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(net, config.clone())?.run(train, val)
}
