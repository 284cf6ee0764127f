//! The joint training loop: both encoders, one loss, one optimizer step per
//! batch, periodic checkpoints and an append-only CSV log.
//!
//! Every random draw comes from a stream keyed by the run seed plus
//! `(epoch, step, slot)`, so a run resumed from an epoch checkpoint replays
//! the uninterrupted run exactly.

mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lococontrast_nn::Adam;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, ImageSample, Split, SynthConfig};
use crate::encoders::{build_models, CropEncoder, ModelConfig, PyramidEncoder};
use crate::error::{Error, Result};
use crate::loss::{multi_level_ntxent, LossConfig};
use crate::pairing::{assemble_pair_batch, AnchorCount, LevelSelection, PreparedExample};
use crate::seeding;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataRef {
    /// Manifest file or image directory on disk.
    Path { path: PathBuf },
    /// Generated on the fly; nothing touches the disk.
    Synthetic {
        count: usize,
        #[serde(default)]
        generator: SynthConfig,
    },
}

impl DataRef {
    pub fn open(&self) -> Result<Dataset> {
        match self {
            DataRef::Path { path } => Dataset::open(path),
            DataRef::Synthetic { count, generator } => {
                Ok(Dataset::synthetic(generator, *count, Split::Train))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub anchors_per_image: AnchorCount,
    pub loss: LossConfig,
    pub seed: u64,
    pub levels: LevelSelection,
    pub model: ModelConfig,
    pub data: DataRef,
    /// Save every this many epochs; the final epoch is always saved. 0 saves
    /// only the final epoch.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Defaults to `output_dir/train_log.csv`.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-4,
            anchors_per_image: AnchorCount::default(),
            loss: LossConfig::default(),
            seed: 0,
            levels: LevelSelection::All,
            model: ModelConfig::default(),
            data: DataRef::Synthetic {
                count: 2000,
                generator: SynthConfig::default(),
            },
            checkpoint_every: 1,
            output_dir: PathBuf::from("runs/default"),
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.levels.resolve(self.model.pyramid_levels)?;
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.log_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("train_log.csv"))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.output_dir
            .join(format!("checkpoint-epoch{epoch:04}.ckpt"))
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub crop: CropEncoder<f32>,
    pub pyramid: PyramidEncoder<f32>,
    pub crop_opt: Adam<f32>,
    pub pyramid_opt: Adam<f32>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (crop, pyramid) = build_models::<f32>(&config.model, config.seed)?;
        Ok(Self {
            crop_opt: Adam::new(&crop.params, config.learning_rate),
            pyramid_opt: Adam::new(&pyramid.params, config.learning_rate),
            config,
            epoch: 0,
            global_step: 0,
            crop,
            pyramid,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;

/// Dataset order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream(&[seed, SHUFFLE_TAG, epoch as u64]));
    order
}

/// One stream per batch slot; each drives the crop, the flips and then the
/// anchor draws for its image.
pub fn step_streams(seed: u64, epoch: usize, step: usize, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|slot| seeding::stream(&[seed, STEP_TAG, epoch as u64, step as u64, slot as u64]))
        .collect()
}

pub fn load_training_image(dataset: &Dataset, index: usize) -> Result<ImageSample> {
    dataset.load_normalized(index)
}

/// Loads and augments the images of one batch.
pub fn prepare_batch(
    images: &[ImageSample],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<PreparedExample>> {
    images
        .iter()
        .zip(rngs.iter_mut())
        .map(|(img, rng)| PreparedExample::new(img, rng))
        .collect()
}

/// Diagnostic written when the loss stops being finite.
#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    step: usize,
    image_ids: Vec<&'a str>,
    crops: Vec<crate::cropper::CropSpec>,
    crop_augs: Vec<crate::cropper::AugRecord>,
    full_augs: Vec<crate::cropper::AugRecord>,
    level_losses: Vec<f64>,
}

/// Forward both pipelines, evaluate the loss, and apply one joint Adam
/// update. Returns the loss.
///
/// A non-finite loss leaves the weights untouched and reports the state's
/// current epoch with step 0; [`run`] fills in the position and the dump.
pub fn train_step(
    state: &mut TrainState,
    examples: &[PreparedExample],
    rngs: &mut [ChaCha8Rng],
) -> Result<f64> {
    let cfg = &state.config;
    let levels = cfg.levels.resolve(cfg.model.pyramid_levels)?;
    let anchors = cfg.anchors_per_image.resolve(cfg.batch_size);
    let mut crop_grads = state.crop.params.zero_grads();
    let mut pyramid_grads = state.pyramid.params.zero_grads();
    let loss = {
        let fb = assemble_pair_batch(
            examples,
            &state.crop,
            &state.pyramid,
            &levels,
            anchors,
            rngs,
        )?;
        let (loss, grads) = multi_level_ntxent(&fb.pairs, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step: 0,
                dump: None,
            });
        }
        fb.backward(&grads, &mut crop_grads, &mut pyramid_grads);
        loss
    };
    state.crop_opt.step(&mut state.crop.params, &crop_grads);
    state
        .pyramid_opt
        .step(&mut state.pyramid.params, &pyramid_grads);
    state.global_step += 1;
    Ok(loss)
}

fn write_dump(
    state: &TrainState,
    epoch: usize,
    step: usize,
    ids: &[&str],
    images: &[ImageSample],
) -> Option<PathBuf> {
    let cfg = &state.config;
    let levels = cfg.levels.resolve(cfg.model.pyramid_levels).ok()?;
    let anchors = cfg.anchors_per_image.resolve(cfg.batch_size);
    // Replay the step's draws so the dump describes exactly the failed batch.
    let mut rngs = step_streams(cfg.seed, epoch, step, images.len());
    let examples = &prepare_batch(images, &mut rngs).ok()?;
    let fb = assemble_pair_batch(
        examples,
        &state.crop,
        &state.pyramid,
        &levels,
        anchors,
        &mut rngs,
    )
    .ok()?;
    let level_losses = fb
        .pairs
        .iter()
        .map(|p| crate::loss::anchor_ntxent(p, &cfg.loss).unwrap_or(f64::NAN))
        .collect();
    let dump = NonFiniteDump {
        epoch,
        step,
        image_ids: ids.to_vec(),
        crops: examples.iter().map(|e| e.crop).collect(),
        crop_augs: examples.iter().map(|e| e.crop_aug).collect(),
        full_augs: examples.iter().map(|e| e.full_aug).collect(),
        level_losses,
    };
    let path = cfg
        .output_dir
        .join(format!("nonfinite-epoch{epoch:04}-step{step:05}.json"));
    let json = serde_json::to_vec_pretty(&dump).ok()?;
    dataset::write_atomic(&path, &json).ok()?;
    Some(path)
}

/// Trains from scratch as configured.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let dataset = config.data.open()?;
    run(TrainState::new(config)?, &dataset)
}

/// Continues `state` until `state.config.epochs` epochs are complete,
/// appending to the log and saving checkpoints on schedule.
pub fn run(mut state: TrainState, dataset: &Dataset) -> Result<TrainOutcome> {
    state.config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training dataset has no images".into()));
    }
    let out_dir = state.config.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let log_path = state.config.log_path();
    let partial_log = partial_path(&log_path);
    if state.epoch > 0 && log_path.is_file() {
        fs::rename(&log_path, &partial_log).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = open_log(&partial_log, state.epoch == 0)?;

    let n = dataset.len();
    let batch = state.config.batch_size;
    let steps = state.config.steps_per_epoch(n);
    let seed = state.config.seed;
    let mut records = Vec::new();
    let mut final_checkpoint = None;

    while state.epoch < state.config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(seed, epoch, n);
        for step in 0..steps {
            let started = Instant::now();
            let idx = &order[step * batch..((step + 1) * batch).min(n)];
            let images = idx
                .iter()
                .map(|&i| load_training_image(dataset, i))
                .collect::<Result<Vec<_>>>()?;
            let mut rngs = step_streams(seed, epoch, step, idx.len());
            let examples = prepare_batch(&images, &mut rngs)?;
            let loss = match train_step(&mut state, &examples, &mut rngs) {
                Ok(loss) => loss,
                Err(Error::NonFiniteLoss { .. }) => {
                    let ids: Vec<&str> = idx
                        .iter()
                        .map(|&i| dataset.manifest.items[i].id.as_str())
                        .collect();
                    let dump = write_dump(&state, epoch, step, &ids, &images);
                    log::error!("non-finite loss at epoch {epoch} step {step}; dump: {dump:?}");
                    return Err(Error::NonFiniteLoss { epoch, step, dump });
                }
                Err(e) => return Err(e),
            };
            let record = StepRecord {
                epoch,
                step,
                global_step: state.global_step,
                loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            log.serialize(&record)
                .map_err(|e| csv_err(&partial_log, e))?;
            log.flush().map_err(|e| Error::io(&partial_log, e))?;
            log::debug!("epoch {epoch} step {step}/{steps} loss {loss:.5}");
            records.push(record);
        }
        state.epoch += 1;
        let every = state.config.checkpoint_every;
        let last = state.epoch == state.config.epochs;
        if last || (every > 0 && state.epoch.is_multiple_of(every)) {
            let path = state.config.checkpoint_path(state.epoch);
            save_checkpoint(&state, &path)?;
            final_checkpoint = Some(path);
        }
        let tail = &records[records.len().saturating_sub(steps)..];
        log::info!(
            "epoch {}/{} mean loss {:.5}",
            state.epoch,
            state.config.epochs,
            tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
        );
    }
    drop(log);
    fs::rename(&partial_log, &log_path).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        state,
        records,
        final_checkpoint,
        log_path,
    })
}

/// Resumes from `checkpoint`, optionally extending the epoch budget.
pub fn resume(checkpoint: &Path, epochs: Option<usize>) -> Result<TrainOutcome> {
    let mut state = load_checkpoint(checkpoint)?;
    if let Some(e) = epochs {
        state.config.epochs = e;
    }
    let dataset = state.config.data.open()?;
    run(state, &dataset)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

/// The log is kept under a `.partial` name until the run completes.
fn partial_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".partial");
    PathBuf::from(p)
}

fn open_log(path: &Path, fresh: bool) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let exists = path.is_file() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().create(true).append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(fresh || !exists)
        .from_writer(file))
}

/// Reads a log written by [`run`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}
