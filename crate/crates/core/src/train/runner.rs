use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, LabeledDataset, NormStats, SplitSpec};
use crate::error::{Error, Result};
use crate::layers::Param;
use crate::optim::{LrSchedule, Optimizer};
use crate::rng;
use crate::train::checkpoint::{self, Checkpoint, TrainingMeta};
use crate::train::config::{ExperimentConfig, OptimizerChoice};
use crate::train::metrics::{self, EpochMetrics};
use crate::train::network::{build_network, Network, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub flip_prob: f64,
    pub crop_padding: usize,
    /// Drives shuffling, dropout masks and augmentation draws.
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        TrainSettings {
            batch_size: cfg.batch_size,
            flip_prob: cfg.flip_prob,
            crop_padding: cfg.crop_padding,
            seed: cfg.seed,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &crate::tensor::Tensor4, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.sample(i)) == l)
        .count()
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(
    network: &mut Network,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for batch in data::sequential_batches(data, batch_size)? {
        let logits = network.forward(&batch.images, false)?;
        network.loss(&logits, &batch.labels)?;
        for &l in network.sample_losses() {
            loss_sum += l;
        }
        hits += correct(&logits, &batch.labels);
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

pub fn make_optimizer(choice: OptimizerChoice, network: &Network) -> Optimizer {
    match choice {
        OptimizerChoice::Adam(cfg) => Optimizer::adam(cfg, &network.params()),
        OptimizerChoice::Sgd { lr } => Optimizer::Sgd { lr },
    }
}

pub struct Trainer {
    pub network: Network,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub settings: TrainSettings,
    /// Completed epochs; the next epoch is `epochs_done + 1`.
    pub epochs_done: usize,
    /// One row per completed epoch.
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(
        network: Network,
        optimizer: Optimizer,
        schedule: LrSchedule,
        settings: TrainSettings,
    ) -> Self {
        Trainer {
            network,
            optimizer,
            schedule,
            settings,
            epochs_done: 0,
            history: Vec::new(),
        }
    }

    /// One pass over `train`: per batch augment, forward, loss, backward,
    /// optimizer step, constraint projection. Returns mean training loss and
    /// accuracy measured on the training-mode forward passes.
    pub fn train_epoch(&mut self, train: &LabeledDataset) -> Result<(f64, f64)> {
        let epoch = self.epochs_done + 1;
        let lr = self.schedule.lr_at(self.optimizer.base_lr(), epoch);
        let s = self.settings;
        let augmenting = s.flip_prob > 0.0 || s.crop_padding > 0;
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, batch) in data::batches(train, s.batch_size, s.seed, epoch)?.enumerate() {
            let images = if augmenting {
                let mut rng = rng::stream(s.seed, &[rng::TAG_AUGMENT, epoch as u64, b as u64]);
                data::augment(&batch.images, s.flip_prob, s.crop_padding, &mut rng)
            } else {
                batch.images
            };
            self.network
                .set_rng_key(rng::derive_seed(epoch as u64, &[b as u64]));
            self.network.zero_grad();
            let logits = self.network.forward(&images, true)?;
            let loss = self.network.loss(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, batch {b} (sample indices {:?})",
                    batch.indices
                )));
            }
            self.network.backward()?;
            let mut params = self.network.params_mut();
            self.optimizer.step(lr, &mut params).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}"))
                }
                other => other,
            })?;
            self.network.project();
            loss_sum += loss * batch.labels.len() as f64;
            hits += correct(&logits, &batch.labels);
        }
        self.epochs_done = epoch;
        let n = train.len() as f64;
        Ok((loss_sum / n, hits as f64 / n))
    }

    /// Trains one epoch and evaluates on `val`.
    pub fn run_epoch(
        &mut self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        record_wall_time: bool,
    ) -> Result<EpochMetrics> {
        let start = Instant::now();
        let (train_loss, train_acc) = self.train_epoch(train)?;
        let (val_loss, val_acc) = evaluate(&mut self.network, val, self.settings.batch_size)?;
        let row = EpochMetrics {
            epoch: self.epochs_done,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            wall_seconds: if record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.history.push(row.clone());
        Ok(row)
    }

    pub fn checkpoint(&self, stats: Option<&NormStats>, split: Option<SplitSpec>) -> Checkpoint {
        let spec = self.network.spec();
        let mut ckpt = checkpoint::capture(
            &self.network,
            Some(&self.optimizer),
            &TrainingMeta {
                epoch: self.epochs_done,
                network: spec.layer_string(),
                input: spec.input,
                seed: spec.seed,
                stats: stats.cloned(),
                split,
            },
        );
        ckpt.records.push(checkpoint::history_record(&self.history));
        ckpt
    }

    /// Restores parameters, optimizer state, the epoch counter and the
    /// metrics history.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = checkpoint::read_meta(ckpt)?;
        checkpoint::restore_network(&mut self.network, ckpt)?;
        if let Optimizer::Adam(state) = &mut self.optimizer {
            let saved = checkpoint::restore_adam(&self.network, ckpt)?;
            state.moments = saved.moments;
            state.t = saved.t;
        }
        self.epochs_done = meta.epoch;
        self.history = checkpoint::read_history(ckpt)?;
        Ok(())
    }
}

/// Normalized training and validation sets for one experiment.
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub stats: Option<NormStats>,
    /// Present when validation was split off `data_dir`.
    pub split: Option<SplitSpec>,
}

impl ExperimentData {
    pub fn prepare(
        train: LabeledDataset,
        val: Option<LabeledDataset>,
        normalize: bool,
        val_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        let (train, val, split) = match val {
            Some(val) => (train, val, None),
            None => {
                let spec = SplitSpec {
                    val_fraction,
                    shuffle_seed: split_seed,
                };
                let (t, v) = data::split(&train, &spec)?;
                (t, v, Some(spec))
            }
        };
        if train.sample_shape() != val.sample_shape() || train.class_names != val.class_names {
            return Err(Error::Data(
                "training and validation sets differ in image shape or classes".into(),
            ));
        }
        if !normalize {
            return Ok(ExperimentData {
                train,
                val,
                stats: None,
                split,
            });
        }
        let train = data::normalize(&train, None)?;
        let stats = train.stats.clone();
        let val = data::normalize(&val, stats.as_ref())?;
        Ok(ExperimentData {
            train,
            val,
            stats,
            split,
        })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.check_paths()?;
        let train = data::load_image_dir(&cfg.data_dir, cfg.image_size, cfg.channels)?;
        let val = if cfg.val_dir.as_os_str().is_empty() {
            None
        } else {
            Some(data::load_image_dir(
                &cfg.val_dir,
                cfg.image_size,
                cfg.channels,
            )?)
        };
        Self::prepare(train, val, cfg.normalize, cfg.val_fraction, cfg.seed)
    }
}

pub fn network_spec(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<NetworkSpec> {
    let input = data.train.sample_shape();
    let classes = data.train.num_classes();
    if cfg.network == "default" {
        Ok(NetworkSpec::default_gcnn(input, classes, cfg.seed))
    } else {
        NetworkSpec::parse(&cfg.network, input, classes, cfg.seed)
    }
}

pub struct RunOutcome {
    pub rows: Vec<EpochMetrics>,
    pub trainer: Trainer,
    pub wall_seconds: f64,
}

/// Where a run keeps its metrics CSV and checkpoint. Both are rewritten
/// after every epoch, so an interrupted run can resume from the last one.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path, csv: &str, checkpoint: &str) -> Self {
        RunFiles {
            csv: dir.join(csv),
            checkpoint: dir.join(checkpoint),
        }
    }

    fn save(&self, trainer: &Trainer, data: &ExperimentData) -> Result<()> {
        for path in [&self.csv, &self.checkpoint] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        metrics::write_metrics_csv(&trainer.history, &self.csv)?;
        trainer
            .checkpoint(data.stats.as_ref(), data.split)
            .save(&self.checkpoint)
    }
}

/// Trains `spec` up to `cfg.epochs`, optionally continuing from `resume`,
/// reporting each epoch to `progress` and saving to `files` when given.
pub fn run_training(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    data: &ExperimentData,
    resume: Option<&Checkpoint>,
    files: Option<&RunFiles>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let network = build_network(spec)?;
    let optimizer = make_optimizer(cfg.optimizer_choice()?, &network);
    let mut trainer = Trainer::new(
        network,
        optimizer,
        cfg.schedule()?,
        TrainSettings::from_config(cfg),
    );
    if let Some(ckpt) = resume {
        let meta = checkpoint::read_meta(ckpt)?;
        if meta.network != spec.layer_string() || meta.input != spec.input || meta.seed != spec.seed
        {
            return Err(Error::Config(format!(
                "checkpoint holds `{}` (input {:?}, seed {}), config describes `{}` (input {:?}, seed {})",
                meta.network,
                meta.input,
                meta.seed,
                spec.layer_string(),
                spec.input,
                spec.seed
            )));
        }
        trainer.restore(ckpt)?;
    }
    let start = Instant::now();
    while trainer.epochs_done < cfg.epochs {
        let row = trainer.run_epoch(&data.train, &data.val, cfg.record_wall_time)?;
        progress(&row);
        if let Some(files) = files {
            files.save(&trainer, data)?;
        }
    }
    if let Some(files) = files {
        files.save(&trainer, data)?;
    }
    Ok(RunOutcome {
        rows: trainer.history.clone(),
        trainer,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `<prefix>_metrics.csv` and `<prefix>.ckpt` into `dir`.
pub fn save_outcome(
    outcome: &RunOutcome,
    data: &ExperimentData,
    dir: &Path,
    prefix: &str,
) -> Result<()> {
    RunFiles::in_dir(
        dir,
        &format!("{prefix}_metrics.csv"),
        &format!("{prefix}.ckpt"),
    )
    .save(&outcome.trainer, data)
}

fn weight_count(network: &Network) -> usize {
    network
        .layers()
        .iter()
        .map(|l| {
            l.params()
                .iter()
                .filter(|p| p.name != "bias")
                .map(|p| p.len())
                .sum::<usize>()
        })
        .find(|&n| n > 0)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSummary {
    pub gcnn_first_layer_params: usize,
    pub cnn_first_layer_params: usize,
    pub gcnn_first_layer_weights: usize,
    pub cnn_first_layer_weights: usize,
    pub gcnn_total_params: usize,
    pub cnn_total_params: usize,
    pub threshold: f64,
    pub gcnn_epochs_to_threshold: Option<usize>,
    pub cnn_epochs_to_threshold: Option<usize>,
    pub gcnn_final_val_acc: f64,
    pub cnn_final_val_acc: f64,
    pub gcnn_wall_seconds: f64,
    pub cnn_wall_seconds: f64,
}

impl PairedSummary {
    pub fn weight_reduction(&self) -> f64 {
        self.cnn_first_layer_weights as f64 / self.gcnn_first_layer_weights as f64
    }

    pub fn reduction_with_bias(&self) -> f64 {
        self.cnn_first_layer_params as f64 / self.gcnn_first_layer_params as f64
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |e| e.to_string());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "gcnn_first_layer_params = {}",
            self.gcnn_first_layer_params
        );
        let _ = writeln!(
            s,
            "cnn_first_layer_params = {}",
            self.cnn_first_layer_params
        );
        let _ = writeln!(
            s,
            "gcnn_first_layer_weights = {}",
            self.gcnn_first_layer_weights
        );
        let _ = writeln!(
            s,
            "cnn_first_layer_weights = {}",
            self.cnn_first_layer_weights
        );
        let _ = writeln!(
            s,
            "first_layer_weight_reduction = {}",
            metrics::fmt_sig6(self.weight_reduction())
        );
        let _ = writeln!(
            s,
            "first_layer_reduction_with_bias = {}",
            metrics::fmt_sig6(self.reduction_with_bias())
        );
        let _ = writeln!(s, "gcnn_total_params = {}", self.gcnn_total_params);
        let _ = writeln!(s, "cnn_total_params = {}", self.cnn_total_params);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(
            s,
            "gcnn_epochs_to_threshold = {}",
            opt(self.gcnn_epochs_to_threshold)
        );
        let _ = writeln!(
            s,
            "cnn_epochs_to_threshold = {}",
            opt(self.cnn_epochs_to_threshold)
        );
        let _ = writeln!(
            s,
            "gcnn_final_val_acc = {}",
            metrics::fmt_sig6(self.gcnn_final_val_acc)
        );
        let _ = writeln!(
            s,
            "cnn_final_val_acc = {}",
            metrics::fmt_sig6(self.cnn_final_val_acc)
        );
        let _ = writeln!(s, "gcnn_wall_seconds = {:.2}", self.gcnn_wall_seconds);
        let _ = writeln!(s, "cnn_wall_seconds = {:.2}", self.cnn_wall_seconds);
        s
    }
}

pub fn summarize(gcnn: &RunOutcome, cnn: &RunOutcome, threshold: f64) -> PairedSummary {
    let (g, c) = (&gcnn.trainer.network, &cnn.trainer.network);
    let last = |rows: &[EpochMetrics]| rows.last().map_or(0.0, |r| r.val_acc);
    PairedSummary {
        gcnn_first_layer_params: g.first_layer_param_count(),
        cnn_first_layer_params: c.first_layer_param_count(),
        gcnn_first_layer_weights: weight_count(g),
        cnn_first_layer_weights: weight_count(c),
        gcnn_total_params: g.param_count(),
        cnn_total_params: c.param_count(),
        threshold,
        gcnn_epochs_to_threshold: metrics::epochs_to_threshold(&gcnn.rows, threshold),
        cnn_epochs_to_threshold: metrics::epochs_to_threshold(&cnn.rows, threshold),
        gcnn_final_val_acc: last(&gcnn.rows),
        cnn_final_val_acc: last(&cnn.rows),
        gcnn_wall_seconds: gcnn.wall_seconds,
        cnn_wall_seconds: cnn.wall_seconds,
    }
}

/// Trains the Gabor network and its standard-convolution twin with the same
/// seeds and batch order, saving CSVs, checkpoints and `summary.txt`.
pub fn run_paired_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    progress: &mut dyn FnMut(&str, &EpochMetrics),
) -> Result<PairedSummary> {
    let spec = network_spec(cfg, data)?;
    if !spec.has_gabor() {
        return Err(Error::Config(
            "paired experiment needs a network with a gabor_conv layer".into(),
        ));
    }
    let dir = &cfg.output_dir;
    let files = RunFiles::in_dir(dir, "gcnn_metrics.csv", "gcnn.ckpt");
    let gcnn = run_training(cfg, &spec, data, None, Some(&files), &mut |m| {
        progress("gcnn", m)
    })?;
    let files = RunFiles::in_dir(dir, "cnn_metrics.csv", "cnn.ckpt");
    let cnn = run_training(cfg, &spec.cnn_twin(), data, None, Some(&files), &mut |m| {
        progress("cnn", m)
    })?;
    let summary = summarize(&gcnn, &cnn, cfg.threshold);
    let path = cfg.output_dir.join("summary.txt");
    std::fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Parameter tensors by name, for inspection and tests.
pub fn named_params(network: &Network) -> Vec<(String, &Param)> {
    network
        .param_names()
        .into_iter()
        .zip(network.params())
        .collect()
}
