use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{split, Manifest, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion, dsc, Averaging, ConfusionCounts};
use crate::model::{Network, StagePlan};
use crate::optim::{clip_grad_norm, make_optimizer, Optimizer};
use crate::preprocess::{augment, dataset_stats, normalize, prepare, AugmentConfig, Image, NormStats};
use crate::tensor::{GradTape, Mode, Tensor};

use super::checkpoint::{self, Checkpoint, CheckpointMeta};
use super::config::{NormSource, RunConfig, SplitPolicy};
use super::plot;

/// Images after the deterministic median + resize prefix, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl PreparedSet {
    pub fn from_manifest(m: &Manifest, median_window: usize, size: usize) -> Result<Self> {
        let raw = m.load_images()?;
        let images = raw
            .par_iter()
            .map(|img| prepare(img, median_window, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: m.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks `[3, H, W]` tensors into `[N, 3, H, W]`.
fn stack(items: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let inner = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in &items {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(inner);
    Tensor::new(&shape, data)
}

/// Loss, confusion counts and derived scores over one set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub loss: f64,
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub macro_dsc: f64,
    pub micro_dsc: f64,
}

/// Eval-mode pass over `set` in chunks of `batch_size`.
pub fn evaluate_set(net: &mut Network<f32>, set: &PreparedSet, norm: &NormStats, batch_size: usize) -> Result<SetMetrics> {
    if set.is_empty() {
        return Err(Error::validation("cannot evaluate an empty set"));
    }
    let k = net.num_classes();
    if let Some(&g) = set.labels.iter().find(|&&g| g >= k) {
        return Err(Error::validation(format!("label {g} does not fit a {k}-class network")));
    }
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(batch_size) {
        let end = (start + batch_size).min(set.len());
        let batch = stack(
            set.images[start..end]
                .par_iter()
                .map(|img| normalize(img, norm))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let mut tape = GradTape::new();
        let x = tape.constant(batch);
        let out = net.forward(&mut tape, x, Mode::Eval, 0)?;
        let loss = tape.softmax_cross_entropy(out.logits, &set.labels[start..end])?;
        loss_sum += tape.value(loss).item()? as f64 * (end - start) as f64;
        let logits = tape.value(out.logits);
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    let c = confusion(&preds, &set.labels, k)?;
    Ok(SetMetrics {
        loss: loss_sum / set.len() as f64,
        accuracy: accuracy(&c),
        macro_dsc: dsc(&c, Averaging::Macro),
        micro_dsc: dsc(&c, Averaging::Micro),
        confusion: c,
    })
}

/// One row of `epochs.csv`. Train metrics come from an eval-mode pass over
/// the unaugmented training set; `running_loss` is the mean mini-batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub running_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_dsc: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_dsc: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,running_loss,train_loss,train_accuracy,train_dsc,val_loss,val_accuracy,val_dsc";

    /// Validation macro-DSC, or train macro-DSC when there is no validation set.
    pub fn selection_score(&self) -> f64 {
        self.val_dsc.unwrap_or(self.train_dsc)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.epoch,
            self.running_loss,
            self.train_loss,
            self.train_accuracy,
            self.train_dsc,
            opt(self.val_loss),
            opt(self.val_accuracy),
            opt(self.val_dsc)
        )
    }
}

pub fn epochs_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{}\n", EpochLog::CSV_HEADER);
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Datasets for a run: training manifest split per the config's policy.
pub fn load_sets(cfg: &RunConfig, manifest: &Manifest, plan: &StagePlan) -> Result<(PreparedSet, Option<PreparedSet>)> {
    let (train, val) = match &cfg.split {
        SplitPolicy::None => (manifest.clone(), None),
        SplitPolicy::Manifest(path) => (manifest.clone(), Some(Manifest::load_tagged(path, SplitTag::Test)?)),
        SplitPolicy::Stratified { val_fraction } | SplitPolicy::Random { val_fraction } => {
            let stratified = matches!(cfg.split, SplitPolicy::Stratified { .. });
            let s = split(manifest, *val_fraction, cfg.seed, stratified)?;
            for w in &s.warnings {
                log::warn!("{w}");
            }
            let val = (!s.val.is_empty()).then_some(s.val);
            (s.train, val)
        }
    };
    let size = plan.input_resolution();
    let train = PreparedSet::from_manifest(&train, cfg.median_window, size)?;
    let val = val
        .map(|v| PreparedSet::from_manifest(&v, cfg.median_window, size))
        .transpose()?;
    Ok((train, val))
}

/// One training run: network, optimizer and data, advanced an epoch at a time.
pub struct Trainer {
    config: RunConfig,
    network: Network<f32>,
    optimizer: Optimizer<f32>,
    train: PreparedSet,
    val: Option<PreparedSet>,
    norm: NormStats,
    augment: Option<AugmentConfig>,
    history: Vec<EpochLog>,
    best: Option<(usize, f64)>,
}

impl Trainer {
    pub fn new(config: RunConfig, train: PreparedSet, val: Option<PreparedSet>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::validation("training split is empty"));
        }
        let plan = config.plan.load()?;
        let k = config.network.num_classes;
        for set in std::iter::once(&train).chain(val.as_ref()) {
            if let Some(&g) = set.labels.iter().find(|&&g| g >= k) {
                return Err(Error::validation(format!("grade {g} does not fit num_classes = {k}")));
            }
        }
        let norm = match &config.norm {
            NormSource::Fixed(n) => *n,
            NormSource::Dataset => {
                let s = dataset_stats(&train.images)?;
                if s.degenerate {
                    log::warn!("training images have a constant channel; std floored");
                }
                s.stats
            }
        };
        let network = Network::<f32>::build(&plan, config.network, config.seed)?;
        let optimizer = make_optimizer(&config.optimizer, network.params())?;
        let augment = config.augment.map(|a| AugmentConfig { seed: config.seed, ..a });
        Ok(Self {
            config,
            network,
            optimizer,
            train,
            val,
            norm,
            augment,
            history: Vec::new(),
            best: None,
        })
    }

    /// Loads the manifest named in the config and splits it.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let path = config
            .manifest
            .clone()
            .ok_or_else(|| Error::validation("run config has no `manifest`"))?;
        let manifest = Manifest::load(&path)?;
        let plan = config.plan.load()?;
        let (train, val) = load_sets(&config, &manifest, &plan)?;
        Self::new(config, train, val)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.network
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// Epoch and score of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn train_set(&self) -> &PreparedSet {
        &self.train
    }

    pub fn val_set(&self) -> Option<&PreparedSet> {
        self.val.as_ref()
    }

    fn train_batch(&mut self, epoch: usize, batch: usize, indices: &[usize], sample_base: usize) -> Result<f64> {
        let norm = self.norm;
        let aug = self.augment;
        let tensors = indices
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let img = &self.train.images[i];
                match &aug {
                    Some(a) => normalize(&augment(img, a, (sample_base + j) as u64)?, &norm),
                    None => normalize(img, &norm),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.train.labels[i]).collect();
        let mut tape = GradTape::new();
        let x = tape.constant(stack(tensors)?);
        let dropout_seed = mix(self.config.seed, epoch as u64, batch as u64);
        let out = self.network.forward(&mut tape, x, Mode::Train, dropout_seed)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric {
                name: format!("loss at epoch {epoch}, batch {batch}"),
                detail: format!("loss became {value}"),
            });
        }
        tape.backward(loss)?;
        self.network.store_grads(&mut tape, &out.params);
        drop(tape);
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(self.network.params_mut(), max);
        }
        self.optimizer.step(self.network.params_mut()).map_err(|e| match e {
            Error::Numeric { name, detail } => Error::Numeric {
                name: format!("epoch {epoch}, batch {batch}: {name}"),
                detail,
            },
            other => other,
        })?;
        self.network.zero_grad();
        Ok(value)
    }

    /// Runs one epoch of shuffled mini-batches and records its metrics.
    pub fn run_epoch(&mut self) -> Result<&EpochLog> {
        let epoch = self.history.len() + 1;
        let n = self.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let bs = self.config.batch_size;
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let loss = self.train_batch(epoch, b + 1, chunk, (epoch - 1) * n + b * bs)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train = evaluate_set(&mut self.network, &self.train, &self.norm, bs)?;
        let val = match &self.val {
            Some(v) => Some(evaluate_set(&mut self.network, v, &self.norm, bs)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            running_loss: loss_sum / n as f64,
            train_loss: train.loss,
            train_accuracy: train.accuracy,
            train_dsc: train.macro_dsc,
            val_loss: val.as_ref().map(|v| v.loss),
            val_accuracy: val.as_ref().map(|v| v.accuracy),
            val_dsc: val.as_ref().map(|v| v.macro_dsc),
        };
        let score = log.selection_score();
        if self.best.is_none_or(|(_, b)| score > b) {
            self.best = Some((epoch, score));
        }
        self.history.push(log);
        Ok(self.history.last().unwrap())
    }

    pub fn checkpoint_meta(&self, score: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.history.len(),
            norm: self.norm,
            median_window: self.config.median_window,
            score,
            config: Some(self.config.to_text()),
        }
    }

    pub fn save_checkpoint(&self, path: &Path, score: Option<f64>) -> Result<()> {
        checkpoint::save(path, &self.network, &self.checkpoint_meta(score), &self.optimizer.export_state())
    }

    /// Runs the remaining epochs. With an output directory, writes
    /// `best.ckpt` on every improvement, `final.ckpt`, `epochs.csv`,
    /// `config.txt` and `curves.png`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainSummary> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), self.config.to_text())?;
        }
        while self.history.len() < self.config.epochs {
            let before = self.best;
            let log = self.run_epoch()?.clone();
            log::info!(
                "epoch {:>3}: loss {:.4} train acc {:.3} dsc {:.3}{}",
                log.epoch,
                log.train_loss,
                log.train_accuracy,
                log.train_dsc,
                log.val_dsc.map_or(String::new(), |d| format!(" val dsc {d:.3}"))
            );
            if let Some(dir) = out_dir {
                if self.best != before {
                    self.save_checkpoint(&dir.join("best.ckpt"), self.best.map(|b| b.1))?;
                }
                std::fs::write(dir.join("epochs.csv"), epochs_csv(&self.history))?;
            }
        }
        let mut summary = TrainSummary {
            epochs: self.history.len(),
            best: self.best,
            last: self.history.last().cloned(),
            best_checkpoint: None,
            final_checkpoint: None,
        };
        if let Some(dir) = out_dir {
            let final_path = dir.join("final.ckpt");
            self.save_checkpoint(&final_path, None)?;
            plot::curves(&self.history)?.save(&dir.join("curves.png"))?;
            summary.best_checkpoint = Some(dir.join("best.ckpt"));
            summary.final_checkpoint = Some(final_path);
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best: Option<(usize, f64)>,
    pub last: Option<EpochLog>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Builds the run described by `cfg` and trains it to completion.
pub fn train(cfg: RunConfig, manifest: &Manifest) -> Result<(Trainer, TrainSummary)> {
    let plan = cfg.plan.load()?;
    let (train, val) = load_sets(&cfg, manifest, &plan)?;
    let out = cfg.out_dir.clone();
    let mut trainer = Trainer::new(cfg, train, val)?;
    let summary = trainer.run(Some(&out))?;
    Ok((trainer, summary))
}

/// Metrics of a checkpoint over a labelled manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub metrics: SetMetrics,
}

impl EvalReport {
    pub fn class_dsc(&self) -> Vec<Option<f64>> {
        self.metrics.confusion.class_dsc()
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let k = m.confusion.num_classes();
        let mut s = String::new();
        let _ = writeln!(s, "samples    {}", self.samples);
        let _ = writeln!(s, "loss       {:.4}", m.loss);
        let _ = writeln!(s, "accuracy   {:.4}", m.accuracy);
        let _ = writeln!(s, "macro DSC  {:.4}", m.macro_dsc);
        let _ = writeln!(s, "micro DSC  {:.4}", m.micro_dsc);
        let _ = writeln!(s, "\nclass  support  DSC");
        let support = m.confusion.row_sums();
        for (c, d) in self.class_dsc().iter().enumerate() {
            let d = d.map_or("n/a".to_string(), |d| format!("{d:.4}"));
            let _ = writeln!(s, "{c:>5}  {:>7}  {d}", support[c]);
        }
        let _ = writeln!(s, "\nconfusion (rows true, columns predicted)");
        for t in 0..k {
            let row: Vec<String> = (0..k).map(|p| format!("{:>5}", m.confusion.get(t, p))).collect();
            let _ = writeln!(s, "{t:>5} {}", row.join(""));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        let k = m.confusion.num_classes();
        let mut s = String::from("metric,class,value\n");
        let _ = writeln!(s, "loss,,{:.6}", m.loss);
        let _ = writeln!(s, "accuracy,,{:.6}", m.accuracy);
        let _ = writeln!(s, "macro_dsc,,{:.6}", m.macro_dsc);
        let _ = writeln!(s, "micro_dsc,,{:.6}", m.micro_dsc);
        for (c, d) in self.class_dsc().iter().enumerate() {
            let _ = writeln!(s, "dsc,{c},{}", d.map_or(String::new(), |d| format!("{d:.6}")));
        }
        for t in 0..k {
            for p in 0..k {
                let _ = writeln!(s, "confusion_{t}_{p},,{}", m.confusion.get(t, p));
            }
        }
        s
    }
}

/// Eval-mode metrics of a loaded checkpoint on `manifest`.
pub fn evaluate(ck: &mut Checkpoint, manifest: &Manifest, batch_size: usize) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::validation("evaluation manifest is empty"));
    }
    let k = ck.network.num_classes();
    if let Some(r) = manifest.records.iter().find(|r| r.grade >= k) {
        return Err(Error::validation(format!(
            "manifest grade {} ({}) exceeds the checkpoint's {k} classes",
            r.grade, r.image
        )));
    }
    let size = ck.network.plan().input_resolution();
    let set = PreparedSet::from_manifest(manifest, ck.meta.median_window, size)?;
    let metrics = evaluate_set(&mut ck.network, &set, &ck.meta.norm, batch_size.max(1))?;
    Ok(EvalReport {
        samples: set.len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::trainer::config::PlanSource;

    fn tiny_config(epochs: usize) -> RunConfig {
        RunConfig {
            plan: PlanSource::B0 { resolution: 32 },
            epochs,
            batch_size: 4,
            seed: 11,
            split: SplitPolicy::Stratified { val_fraction: 0.5 },
            ..RunConfig::default()
        }
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let set = PreparedSet {
            images: vec![],
            labels: vec![],
        };
        assert!(matches!(Trainer::new(tiny_config(1), set, None), Err(Error::Validation(_))));
    }

    #[test]
    fn identical_runs_log_identically_and_best_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 2, 48, 5).unwrap();
        let plan = StagePlan::b0_at_resolution(32);
        let cfg = tiny_config(3);
        let (train, val) = load_sets(&cfg, &m, &plan).unwrap();
        assert_eq!((train.len(), val.as_ref().map(PreparedSet::len)), (5, Some(5)));

        let mut logs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("run{run}"));
            let mut t = Trainer::new(cfg.clone(), train.clone(), val.clone()).unwrap();
            t.run(Some(&out)).unwrap();
            let best = checkpoint::load(&out.join("best.ckpt")).unwrap();
            let score = best.meta.score.unwrap();
            assert!(t.history().iter().all(|e| e.val_dsc.unwrap() <= score));
            assert!(out.join("curves.png").exists());
            logs.push((t.history().to_vec(), std::fs::read(out.join("final.ckpt")).unwrap()));
        }
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn nan_loss_names_the_epoch_and_batch() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 1, 48, 5).unwrap();
        let cfg = RunConfig {
            split: SplitPolicy::None,
            ..tiny_config(1)
        };
        let (train, _) = load_sets(&cfg, &m, &StagePlan::b0_at_resolution(32)).unwrap();
        let mut t = Trainer::new(cfg, train, None).unwrap();
        t.network_mut().param_mut("classifier.bias").unwrap().data_mut()[0] = f32::NAN;
        let err = t.run_epoch().unwrap_err().to_string();
        assert!(err.contains("epoch 1, batch 1"), "{err}");
    }

    #[test]
    fn evaluate_counts_every_sample_and_rejects_foreign_grades() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 2, 48, 5).unwrap();
        let net = Network::<f32>::build(
            &StagePlan::b0_at_resolution(32),
            crate::model::NetworkConfig::default(),
            1,
        )
        .unwrap();
        let meta = CheckpointMeta {
            epoch: 0,
            norm: NormStats::UNIT,
            median_window: 3,
            score: None,
            config: None,
        };
        let mut ck = checkpoint::decode(&checkpoint::encode(&net, &meta, &[])).unwrap();
        let report = evaluate(&mut ck, &m, 4).unwrap();
        assert_eq!(report.metrics.confusion.row_sums(), vec![2; 5]);
        assert_eq!(report.class_dsc().len(), 5);
        assert_eq!(report.to_csv().lines().filter(|l| l.starts_with("dsc,")).count(), 5);

        let two = Network::<f32>::build(
            &StagePlan::b0_at_resolution(32),
            crate::model::NetworkConfig {
                num_classes: 2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut ck = checkpoint::decode(&checkpoint::encode(&two, &meta, &[])).unwrap();
        assert!(matches!(evaluate(&mut ck, &m, 4), Err(Error::Validation(_))));
    }
}
