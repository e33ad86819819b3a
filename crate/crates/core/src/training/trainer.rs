use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment, fix_size, trajectory_loss, Adam, AdamConfig, AugmentConfig, Schedule, StepOutcome};
use crate::model::{track, ForwardStats};
use crate::strain::trajectory_metrics;
use crate::{Clip, Error, ModelConfig, Network, Result, Tape, Tensor, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Every training clip is cropped or padded to this many frames.
    pub clip_frames: usize,
    /// Every training clip is oversampled to this many tracks.
    pub clip_points: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            clip_frames: 64,
            clip_points: 88,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short training clips for the reduced network.
    pub fn desk() -> Self {
        Self { clip_frames: 16, clip_points: 16, ..Self::default() }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation error, or the
    /// initialization if no epoch finished.
    pub weights: WeightStore,
    pub log: Vec<LogRecord>,
    /// Validation error of the untrained model.
    pub initial_metric: f64,
    /// Validation error after each epoch.
    pub epoch_metrics: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps_run: usize,
    pub skipped_steps: usize,
    /// Step at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn best_metric(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epoch_metrics[e])
    }
}

/// Mean average-trajectory error in pixels over `clips`, with each clip's
/// frame-0 ground truth as queries. Duplicated tracks are skipped.
pub fn evaluate(net: &Network, clips: &[Clip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let mut total = 0.0;
    for clip in clips {
        let keep: Vec<usize> = (0..clip.tracks.points()).filter(|&i| !clip.duplicate[i]).collect();
        let reference = clip.tracks.select_points(&keep);
        let pred = net.forward(&clip.video, &reference.queries())?;
        total += trajectory_metrics(&reference, &pred, clip.scale_mm_per_px as f64)?.avg_px;
    }
    Ok(total / clips.len() as f64)
}

/// Mini-batch training with validation after every pass over `train_set`;
/// the weights of the best validation epoch are returned.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[Clip],
    val_set: &[Clip],
    mut observe: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    if tc.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = Network::new(config.clone())?;
    let initial_metric = evaluate(&net, val_set)?;
    let mut outcome = TrainOutcome {
        weights: net.weights().clone(),
        log: Vec::new(),
        initial_metric,
        epoch_metrics: Vec::new(),
        best_epoch: None,
        steps_run: 0,
        skipped_steps: 0,
        diverged_at: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(tc.adam, net.weights().tensors());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: while outcome.steps_run < tc.steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            if outcome.steps_run == tc.steps {
                break;
            }
            let step = outcome.steps_run;
            let (loss, grads) = batch_gradients(&net, config, tc, train_set, chunk, &mut rng)?;
            let lr = tc.schedule.at(step as u64);
            if !loss.is_finite() {
                outcome.diverged_at = Some(step);
                break 'epochs;
            }
            if let StepOutcome::SkippedNonFinite { .. } = adam.step(net.weights_mut().tensors_mut(), &grads, lr)? {
                outcome.skipped_steps += 1;
            }
            outcome.steps_run += 1;
            let record = LogRecord { step, lr, loss, val_metric: None };
            observe(&record);
            outcome.log.push(record);
        }
        let metric = evaluate(&net, val_set)?;
        if let Some(last) = outcome.log.last_mut() {
            last.val_metric = Some(metric);
            observe(last);
        }
        outcome.epoch_metrics.push(metric);
        let best = outcome.best_metric();
        if metric.is_finite() && best.is_none_or(|b| metric < b) {
            outcome.best_epoch = Some(outcome.epoch_metrics.len() - 1);
            outcome.weights = net.weights().clone();
        }
    }
    Ok(outcome)
}

/// Mean loss and parameter gradients over one batch, one tape per sample.
fn batch_gradients(
    net: &Network,
    config: &ModelConfig,
    tc: &TrainConfig,
    data: &[Clip],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut sums: Vec<Vec<f32>> = net.weights().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss_sum = 0.0;
    for &i in batch {
        let clip = fix_size(&data[i], tc.clip_frames, tc.clip_points, rng)?;
        let clip = augment(&clip, &tc.augment, rng);
        let mut tape = Tape::<f32>::new();
        let params = net.weights().bind(&mut tape, true);
        let video = tape.constant(clip.video.clone());
        let queries = clip.tracks.queries();
        let q = tape.constant(Tensor::new(vec![queries.len(), 2], queries.iter().flatten().copied().collect())?);
        let pred = track(&mut tape, &params, config, video, q, &mut ForwardStats::default())?;
        let target = tape.constant(clip.tracks.to_tensor());
        let loss = trajectory_loss(&mut tape, pred, target)?;
        loss_sum += tape.data(loss)[0] as f64;
        let mut grads = tape.backward(loss)?;
        for (sum, &v) in sums.iter_mut().zip(params.vars()) {
            if let Some(g) = grads.take(v) {
                sum.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    sums.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss_sum / batch.len() as f64, sums))
}
