//! Training loop: two-stream batches through the network, the full
//! objective, SGD, ramp-up stepping, validation and checkpoints.

mod config;
mod optim;
mod validate;

pub use config::{LrSchedule, SgdConfig, TrainConfig};
pub use optim::Sgd;
pub use validate::{argmax_labels, class_names, predict_volume, validate};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorEntry};
use crate::data::{
    BatchSampler, SamplerState, SliceBatch, SlicePools, SplitTag, SslSplit, VolumeSample,
};
use crate::dbpnet::{ForwardOptions, ForwardRng, ForwardRngState, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::MetricsReport;
use crate::nn::Mode;
use crate::scalar::Scalar;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
const MOMENTUM_PREFIX: &str = "optimizer.momentum.";

/// Network, optimizer and every counter or random stream a run depends on.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub network: Network<T>,
    pub optimizer: Sgd<T>,
    /// Completed optimizer steps.
    pub iteration: u64,
    /// Ramp-up step used by the next optimizer step.
    pub rampup_t: u64,
    pub best_val_dice: Option<f64>,
    pub forward_rng: ForwardRng,
    /// Sampler position after the last consumed batch.
    pub sampler: Option<SamplerState>,
}

/// Scalar part of a checkpointed [`TrainState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub iteration: u64,
    pub rampup_t: u64,
    pub best_val_dice: Option<f64>,
    pub forward_rng: ForwardRngState,
    pub sampler: Option<SamplerState>,
    pub train_config: TrainConfig,
    pub split: Option<SslSplit>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(network_config: NetworkConfig, config: &TrainConfig) -> Result<Self> {
        let network = Network::new(network_config, config.seed)?;
        let optimizer = Sgd::new(
            &network,
            config.optimizer.momentum,
            config.optimizer.weight_decay,
        );
        Ok(Self {
            network,
            optimizer,
            iteration: 0,
            rampup_t: 0,
            best_val_dice: None,
            forward_rng: ForwardRng::from_seed(config.seed),
            sampler: None,
        })
    }

    pub fn to_checkpoint(
        &self,
        config: &TrainConfig,
        split: Option<&SslSplit>,
    ) -> Result<Checkpoint<T>> {
        let meta = TrainMeta {
            iteration: self.iteration,
            rampup_t: self.rampup_t,
            best_val_dice: self.best_val_dice,
            forward_rng: self.forward_rng.state(),
            sampler: self.sampler.clone(),
            train_config: config.clone(),
            split: split.cloned(),
        };
        let mut ck = Checkpoint::from_network(&self.network, serde_json::to_value(meta)?);
        for (name, buf) in &self.optimizer.buffers {
            ck.tensors.push((
                TensorEntry {
                    name: format!("{MOMENTUM_PREFIX}{name}"),
                    shape: vec![buf.len()],
                },
                buf.clone(),
            ));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(
        ck: &Checkpoint<T>,
        expected: Option<&NetworkConfig>,
    ) -> Result<(Self, TrainMeta)> {
        let meta: TrainMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("training metadata: {e}")))?;
        let network = ck.to_network(expected)?;
        let opt = &meta.train_config.optimizer;
        let mut optimizer = Sgd::new(&network, opt.momentum, opt.weight_decay);
        for (name, buf) in &mut optimizer.buffers {
            let key = format!("{MOMENTUM_PREFIX}{name}");
            match ck.tensor(&key) {
                Some((_, v)) if v.len() == buf.len() => buf.clone_from(v),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer buffer {key} missing or mis-sized"
                    )))
                }
            }
        }
        let state = Self {
            network,
            optimizer,
            iteration: meta.iteration,
            rampup_t: meta.rampup_t,
            best_val_dice: meta.best_val_dice,
            forward_rng: ForwardRng::restore(&meta.forward_rng)?,
            sampler: meta.sampler.clone(),
        };
        Ok((state, meta))
    }
}

pub fn save_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    config: &TrainConfig,
    split: Option<&SslSplit>,
    path: &Path,
) -> Result<()> {
    state.to_checkpoint(config, split)?.save(path)
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&NetworkConfig>,
) -> Result<(TrainState<T>, TrainMeta)> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?, expected)
}

/// One line of the loss log. `iteration` is the zero-based index of the
/// step, so `lambda_t` equals the ramp-up weight at `floor(iteration / step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// One line of the validation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Completed steps when validation ran.
    pub iteration: u64,
    pub mean_dsc: f64,
    pub improved: bool,
    pub report: MetricsReport,
}

/// One optimizer step on the full objective. The state is left untouched
/// when the loss is not finite.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &SliceBatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let images = batch.stacked_images().cast::<T>();
    let n_labeled = batch.labeled_images.shape()[0];
    let opts = ForwardOptions {
        bn_split: (batch.unlabeled_images.shape()[0] > 0).then_some(n_labeled),
        ..ForwardOptions::new(Mode::Train)
    };
    let mut rng = state.forward_rng.clone();
    let (pyr, tape) = state.network.forward_with(&images, opts, &mut rng)?;
    let (loss, grads) = config
        .objective
        .evaluate(&pyr, &batch.labeled_labels, state.rampup_t)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            breakdown: serde_json::to_string(&loss).unwrap_or_else(|_| format!("{loss:?}")),
        });
    }
    state.forward_rng = rng;
    state.network.zero_grad();
    state.network.update_running_stats(&tape);
    state.network.backward(tape, &grads);
    state
        .optimizer
        .step(&mut state.network, config.lr_at(state.iteration));
    state.iteration += 1;
    state.rampup_t = config.rampup_t(state.iteration);
    Ok(loss)
}

enum BatchSource {
    Inline(BatchSampler),
    Producer {
        rx: Receiver<(SliceBatch, SamplerState)>,
        _handle: JoinHandle<()>,
    },
}

impl BatchSource {
    fn new(sampler: BatchSampler, workers: usize) -> Self {
        if workers == 0 {
            return Self::Inline(sampler);
        }
        // a single ordered producer keeps the stream identical to inline mode
        let (tx, rx) = sync_channel(2 * workers);
        let mut sampler = sampler;
        let handle = std::thread::spawn(move || loop {
            let batch = sampler.next_batch();
            if tx.send((batch, sampler.state())).is_err() {
                return;
            }
        });
        Self::Producer {
            rx,
            _handle: handle,
        }
    }

    fn next(&mut self) -> Result<(SliceBatch, SamplerState)> {
        match self {
            Self::Inline(s) => {
                let b = s.next_batch();
                Ok((b, s.state()))
            }
            Self::Producer { rx, .. } => rx
                .recv()
                .map_err(|_| Error::Data("batch producer stopped unexpectedly".into())),
        }
    }
}

struct Outputs {
    dir: PathBuf,
    loss_log: BufWriter<File>,
    val_log: BufWriter<File>,
}

/// Keeps the lines of a JSON-lines log whose `iteration` is below `limit`
/// and reopens it for appending.
fn reopen_log(path: &Path, limit: Option<u64>) -> Result<BufWriter<File>> {
    if let (Some(limit), true) = (limit, path.is_file()) {
        let kept: Vec<String> = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v["iteration"].as_u64())
                    .is_some_and(|i| i < limit)
            })
            .collect();
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(limit.is_some())
        .write(true)
        .truncate(limit.is_none())
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_line<S: Serialize>(w: &mut BufWriter<File>, v: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io("log", e))
}

/// Paths and in-memory copies of a run's outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainingArtifacts {
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub val_log: Option<PathBuf>,
}

/// Options that do not affect the numerical result of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints and logs; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Background batch producers (0 produces batches inline).
    pub workers: usize,
    /// Print a progress line to stderr every this many steps.
    pub progress_every: Option<u64>,
}

/// Drives a complete training run.
pub struct Trainer {
    config: TrainConfig,
    split: SslSplit,
    state: TrainState<f32>,
    source: BatchSource,
    val_volumes: Vec<VolumeSample>,
    outputs: Option<Outputs>,
    artifacts: TrainingArtifacts,
    progress_every: Option<u64>,
}

impl Trainer {
    /// Fresh run. When the split has no unlabeled patients the batches
    /// carry labeled slices only.
    pub fn new(
        config: TrainConfig,
        network_config: NetworkConfig,
        volumes: &[VolumeSample],
        split: SslSplit,
        options: RunOptions,
    ) -> Result<Self> {
        let state = TrainState::new(network_config, &config)?;
        Self::assemble(config, state, volumes, split, options, None)
    }

    /// Continues the run stored in `checkpoint`. Logs in the output
    /// directory are cut back to the checkpoint's iteration.
    pub fn resume(
        config: TrainConfig,
        volumes: &[VolumeSample],
        split: SslSplit,
        checkpoint: &Path,
        options: RunOptions,
    ) -> Result<Self> {
        let (state, meta) = load_checkpoint::<f32>(checkpoint, None)?;
        let comparable = TrainConfig {
            max_iterations: config.max_iterations,
            ..meta.train_config.clone()
        };
        if comparable != config {
            return Err(Error::Checkpoint(
                "training configuration differs from the checkpointed run".into(),
            ));
        }
        if meta.split.as_ref() != Some(&split) {
            return Err(Error::Checkpoint(
                "labeled split differs from the checkpointed run".into(),
            ));
        }
        Self::assemble(config, state, volumes, split, options, Some(meta.iteration))
    }

    fn assemble(
        config: TrainConfig,
        state: TrainState<f32>,
        volumes: &[VolumeSample],
        split: SslSplit,
        options: RunOptions,
        resumed_at: Option<u64>,
    ) -> Result<Self> {
        config.validate()?;
        let net_size = state.network.config().input_size;
        if net_size != config.batch.patch_size {
            return Err(Error::config(
                "batch.patch_size",
                format!(
                    "{:?} differs from the network input size {net_size:?}",
                    config.batch.patch_size
                ),
            ));
        }
        let mut spec = config.batch.clone();
        if split.unlabeled_ids.is_empty() {
            spec.unlabeled = 0;
        }
        let pools = Arc::new(SlicePools::build(volumes, &split, spec.patch_size)?);
        let sampler = match &state.sampler {
            Some(s) => BatchSampler::restore(pools, spec, s)?,
            None => BatchSampler::new(pools, spec, config.seed)?,
        };
        let outputs = match &options.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(Outputs {
                    dir: dir.clone(),
                    loss_log: reopen_log(&dir.join(LOSS_LOG), resumed_at)?,
                    val_log: reopen_log(&dir.join(VAL_LOG), resumed_at.map(|i| i + 1))?,
                })
            }
            None => None,
        };
        let artifacts = TrainingArtifacts {
            loss_log: outputs.as_ref().map(|o| o.dir.join(LOSS_LOG)),
            val_log: outputs.as_ref().map(|o| o.dir.join(VAL_LOG)),
            best_checkpoint: outputs
                .as_ref()
                .map(|o| o.dir.join(BEST_CHECKPOINT))
                .filter(|p| resumed_at.is_some() && p.is_file()),
            ..Default::default()
        };
        Ok(Self {
            val_volumes: volumes
                .iter()
                .filter(|v| v.split_tag == SplitTag::Val)
                .cloned()
                .collect(),
            config,
            split,
            state,
            source: BatchSource::new(sampler, options.workers),
            outputs,
            artifacts,
            progress_every: options.progress_every,
        })
    }

    pub fn state(&self) -> &TrainState<f32> {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn artifacts(&self) -> &TrainingArtifacts {
        &self.artifacts
    }

    pub fn into_artifacts(self) -> TrainingArtifacts {
        self.artifacts
    }

    /// Trains until `max_iterations`, then writes the last checkpoint.
    pub fn run(&mut self) -> Result<&TrainingArtifacts> {
        self.run_until(self.config.max_iterations)?;
        self.save_last()?;
        Ok(&self.artifacts)
    }

    /// Trains until `iteration` steps are complete (capped at `max_iterations`).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        let target = iteration.min(self.config.max_iterations);
        let started = Instant::now();
        let first = self.state.iteration;
        while self.state.iteration < target {
            if let Err(e) = self.step() {
                // keep whatever the run produced so far
                let _ = self.save_last();
                return Err(e);
            }
            let done = self.state.iteration;
            if let Some(every) = self.progress_every {
                if done % every == 0 {
                    let l = self
                        .artifacts
                        .losses
                        .last()
                        .expect("a step was logged")
                        .loss;
                    let rate = started.elapsed().as_secs_f64() / (done - first) as f64;
                    eprintln!(
                        "iter {done:>6}  total {:.4}  sup {:.4}  con_main {:.4}  con_aux {:.4}  um {:.4}  lambda {:.5}  {rate:.2}s/it",
                        l.total, l.sup, l.con_main, l.con_aux, l.um, l.lambda_t
                    );
                }
            }
            if done % self.config.val_every == 0 && !self.val_volumes.is_empty() {
                self.validate_and_select()?;
            }
        }
        Ok(())
    }

    fn step(&mut self) -> Result<()> {
        let (batch, sampler_state) = self.source.next()?;
        let iteration = self.state.iteration;
        let loss = train_step(&mut self.state, &batch, &self.config)?;
        self.state.sampler = Some(sampler_state);
        let record = LossRecord { iteration, loss };
        if let Some(o) = &mut self.outputs {
            write_line(&mut o.loss_log, &record)?;
        }
        self.artifacts.losses.push(record);
        Ok(())
    }

    fn validate_and_select(&mut self) -> Result<()> {
        let report = validate(
            &self.state.network,
            &self.val_volumes,
            self.config.inference_branch,
        )?;
        let mean_dsc = report.mean_dsc();
        let improved = self.state.best_val_dice.is_none_or(|b| mean_dsc > b);
        if improved {
            self.state.best_val_dice = Some(mean_dsc);
        }
        let record = ValidationRecord {
            iteration: self.state.iteration,
            mean_dsc,
            improved,
            report,
        };
        if let Some(o) = &mut self.outputs {
            write_line(&mut o.val_log, &record)?;
        }
        self.artifacts.validations.push(record);
        if improved {
            if let Some(dir) = self.outputs.as_ref().map(|o| o.dir.clone()) {
                let path = dir.join(BEST_CHECKPOINT);
                save_checkpoint(&self.state, &self.config, Some(&self.split), &path)?;
                self.artifacts.best_checkpoint = Some(path);
            }
        }
        self.save_last()
    }

    /// Writes the current state to `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.state, &self.config, Some(&self.split), path)
    }

    fn save_last(&mut self) -> Result<()> {
        if let Some(dir) = self.outputs.as_ref().map(|o| o.dir.clone()) {
            let path = dir.join(LAST_CHECKPOINT);
            self.save_checkpoint(&path)?;
            self.artifacts.last_checkpoint = Some(path);
        }
        Ok(())
    }
}
