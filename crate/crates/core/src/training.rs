//! Adam training loop with step-decay schedule, checkpointing and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::archive::{hex, Archive};
use crate::backbone::check_input_size;
use crate::checkpoint::{restore_params, store_params, FORMAT};
use crate::data::{augment, load_sample, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, total_loss_with_grads, LossBreakdown};
use crate::metrics::{mae, EvalPair};
use crate::network::{Model, ModelConfig, SideOutputs};
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay_factor` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub input_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub adam: AdamConfig,
    /// Write `epoch_NNNN.safetensors` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay_every: 30,
            lr_decay_factor: 0.1,
            batch_size: 20,
            epochs: 200,
            max_steps: None,
            input_size: 352,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            model: ModelConfig::paper(),
        }
    }
}

/// Fields that only control run length or output cadence; a resumed run may change them freely.
const UNHASHED: [&str; 3] = ["epochs", "max_steps", "checkpoint_every"];

impl TrainConfig {
    /// Surrogate backbone at 64×64, batch 4.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            input_size: 64,
            model: ModelConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("train.input_size", "must be a positive multiple of 32"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("train.lr_decay_every", "must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("train.lr_decay_factor", "must lie in (0, 1]"));
        }
        self.model.validate()
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    fn hashed_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            for k in UNHASHED {
                m.remove(k);
            }
        }
        v
    }

    /// SHA-256 of the configuration with run-length fields removed.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.hashed_json()).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// One line per differing leaf, `key: old -> new`.
pub fn config_diff(old: &TrainConfig, new: &TrainConfig) -> String {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &old.hashed_json(), &mut a);
    flatten("", &new.hashed_json(), &mut b);
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).cloned().collect();
    let none = "<unset>".to_string();
    keys.into_iter()
        .filter(|k| a.get(k) != b.get(k))
        .map(|k| format!("  {k}: {} -> {}", a.get(&k).unwrap_or(&none), b.get(&k).unwrap_or(&none)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads {
            if store.kind(*id) != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }

    fn save(&self, store: &ParamStore, archive: &mut Archive) {
        for id in store.ids() {
            if let (Some(m), Some(v)) = (&self.m[id.index()], &self.v[id.index()]) {
                archive.insert(format!("adam.m/{}", store.name(id)), m.clone());
                archive.insert(format!("adam.v/{}", store.name(id)), v.clone());
            }
        }
        archive.metadata.insert("adam_t".into(), self.t.to_string());
    }

    fn restore(&mut self, store: &ParamStore, archive: &Archive) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id);
            self.m[id.index()] = archive.tensors.get(&format!("adam.m/{name}")).cloned();
            self.v[id.index()] = archive.tensors.get(&format!("adam.v/{name}")).cloned();
        }
        self.t = archive.metadata.get("adam_t").and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok(())
    }
}

/// One optimizer step in the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,edge,det1,det2,det3,det4,total,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let d = self.loss.det;
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:e}",
            self.step, self.loss.edge, d[0], d[1], d[2], d[3], self.loss.total, self.lr
        )
    }
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<LossRecord>,
}

/// Stacked `[N, …]` tensors of one mini-batch.
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub edges: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let stack = |f: fn(&Sample) -> &Tensor| Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        Ok(Batch {
            images: stack(|s| &s.image)?,
            masks: stack(|s| &s.mask)?,
            edges: stack(|s| &s.edge)?,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

/// Samples are decoded once and kept when the set is at most this large.
const CACHE_LIMIT: usize = 512;

struct DataSource {
    manifest: DatasetManifest,
    size: usize,
    cache: Vec<Option<Sample>>,
}

impl DataSource {
    fn new(manifest: DatasetManifest, size: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::NoPairs(manifest.root.clone()));
        }
        let cache = vec![None; manifest.len()];
        Ok(DataSource { manifest, size, cache })
    }

    fn get(&mut self, i: usize) -> Result<Sample> {
        if let Some(s) = &self.cache[i] {
            return Ok(s.clone());
        }
        let s = load_sample(&self.manifest.pairs[i], self.size)?;
        if self.manifest.len() <= CACHE_LIMIT {
            self.cache[i] = Some(s.clone());
        }
        Ok(s)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Steps already taken inside `epoch` (non-zero only after a mid-epoch stop).
    batch_in_epoch: usize,
    train: DataSource,
    val: Option<DataSource>,
    best_val_mae: Option<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: DatasetManifest, val: Option<DatasetManifest>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let adam = Adam::new(config.adam.clone(), &model.store);
        let size = config.input_size;
        Ok(Trainer {
            train: DataSource::new(train, size)?,
            val: val.map(|m| DataSource::new(m, size)).transpose()?,
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            batch_in_epoch: 0,
            best_val_mae: None,
        })
    }

    /// Restores weights, optimizer state and counters from `checkpoint`. The
    /// stored configuration hash must match `config`.
    pub fn resume(checkpoint: &Path, config: TrainConfig, train: DatasetManifest, val: Option<DatasetManifest>) -> Result<Self> {
        let archive = Archive::load(checkpoint)?;
        let bad = |message: String| Error::Archive {
            path: checkpoint.to_path_buf(),
            message,
        };
        let stored: TrainConfig = archive
            .metadata
            .get("config")
            .ok_or_else(|| bad("metadata entry `config` missing".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| bad(format!("bad stored config: {e}"))))?;
        if archive.metadata.get("config_hash") != Some(&config.hash()) {
            return Err(Error::ConfigMismatch {
                diff: config_diff(&stored, &config),
            });
        }
        let mut t = Trainer::new(config, train, val)?;
        restore_params(&mut t.model.store, &archive)?;
        t.adam.restore(&t.model.store, &archive)?;
        let num = |k: &str| -> Result<usize> {
            archive
                .metadata
                .get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("metadata entry `{k}` missing")))
        };
        t.epoch = num("epoch")?;
        t.step = num("step")?;
        t.batch_in_epoch = archive.metadata.get("batch_in_epoch").and_then(|s| s.parse().ok()).unwrap_or(0);
        t.best_val_mae = archive.metadata.get("best_val_mae").and_then(|s| s.parse().ok());
        Ok(t)
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    /// Forward, loss and backward on one batch, then an Adam update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let (loss, grads, buffers) = {
            let mut g = Graph::new(&self.model.store, true);
            let x = g.input(batch.images.clone());
            let out = self.model.net.forward(&mut g, x)?;
            let sides = SideOutputs::from_graph(&g, &out);
            let (loss, lg) = total_loss_with_grads(&sides, &batch.masks, &batch.edges)?;
            let finite = loss.total.is_finite() && lg.logits.iter().all(Tensor::all_finite);
            if !finite {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: self.batch_in_epoch,
                    samples: batch.ids.join(","),
                    detail: format!("{loss:?}"),
                });
            }
            let mut seeds: Vec<_> = out.logits.iter().copied().zip(lg.logits).collect();
            if let (Some(b), Some(gb)) = (out.boundary, lg.boundary) {
                seeds.push((b, gb));
            }
            let grads = g.backward(seeds).params(&g);
            (loss, grads, g.into_buffer_updates())
        };
        self.model.store.apply_updates(buffers);
        self.adam.step(&mut self.model.store, &grads, lr);
        Ok(loss)
    }

    fn batch_samples(&mut self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| {
                let s = self.train.get(i)?;
                Ok(if self.config.augment { augment(&s, rng) } else { s })
            })
            .collect()
    }

    /// Trains until `config.epochs` epochs or `config.max_steps` steps are done,
    /// writing `loss.csv` and checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        let ckpt_dir = out_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let csv_path = out_dir.join("loss.csv");
        let fresh = !csv_path.exists();
        let mut csv = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        if fresh {
            writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        }
        let mut history = Vec::new();
        let mut best = None;
        let out_of_steps = |step: usize, cfg: &TrainConfig| cfg.max_steps.is_some_and(|m| step >= m);
        while self.epoch < self.config.epochs && !out_of_steps(self.step, &self.config) {
            let lr = self.lr();
            let mut rng = epoch_rng(self.config.seed, self.epoch);
            let mut order: Vec<usize> = (0..self.train.manifest.len()).collect();
            order.shuffle(&mut rng);
            let batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
            let mut stopped = false;
            for (b, idx) in batches.iter().enumerate() {
                // keep the augmentation stream aligned when resuming mid-epoch
                let samples = self.batch_samples(idx, &mut rng)?;
                if b < self.batch_in_epoch {
                    continue;
                }
                if out_of_steps(self.step, &self.config) {
                    stopped = true;
                    break;
                }
                let batch = Batch::from_samples(&samples)?;
                self.batch_in_epoch = b;
                let loss = self.train_step(&batch, lr)?;
                self.step += 1;
                self.batch_in_epoch = b + 1;
                let rec = LossRecord {
                    step: self.step,
                    epoch: self.epoch,
                    loss,
                    lr,
                };
                log::info!(
                    "step={} epoch={} edge={:.6} det={:.6?} total={:.6} lr={:e}",
                    rec.step,
                    rec.epoch,
                    loss.edge,
                    loss.det,
                    loss.total,
                    lr
                );
                writeln!(csv, "{}", rec.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
                history.push(rec);
            }
            if stopped || self.batch_in_epoch < batches.len() {
                break;
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
            let mut metrics = BTreeMap::new();
            if self.val.is_some() {
                let v = self.validation_mae()?;
                metrics.insert("val_mae".to_string(), v);
                log::info!("epoch={} val_mae={v:.6}", self.epoch);
                if self.best_val_mae.is_none_or(|b| v < b) {
                    self.best_val_mae = Some(v);
                    let p = ckpt_dir.join("best.safetensors");
                    self.save_checkpoint(&p, &metrics)?;
                    best = Some(p);
                }
            }
            if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0 {
                self.save_checkpoint(&ckpt_dir.join(format!("epoch_{:04}.safetensors", self.epoch)), &metrics)?;
            }
        }
        let final_checkpoint = ckpt_dir.join("final.safetensors");
        let mut metrics = BTreeMap::new();
        if let Some(last) = history.last() {
            metrics.insert("train_total".to_string(), last.loss.total);
        }
        self.save_checkpoint(&final_checkpoint, &metrics)?;
        if best.is_none() && self.best_val_mae.is_some() {
            let p = ckpt_dir.join("best.safetensors");
            best = p.exists().then_some(p);
        }
        Ok(TrainOutcome {
            final_checkpoint,
            best_checkpoint: best,
            history,
        })
    }

    /// Mean MAE of `S_1` against the validation masks, at training resolution.
    pub fn validation_mae(&mut self) -> Result<f64> {
        let Some(val) = self.val.as_mut() else {
            return Err(Error::contract("no validation split configured"));
        };
        let mut total = 0.0;
        let n = val.manifest.len();
        for i in 0..n {
            let s = val.get(i)?;
            let x = s.image.clone().reshape(&[1, 3, val.size, val.size])?;
            let out = self.model.forward(&x)?;
            total += mae(&EvalPair::new(&out.maps[0], &s.mask)?);
        }
        Ok(total / n as f64)
    }

    /// Evaluation-mode total loss averaged over the unaugmented training set.
    pub fn train_set_loss(&mut self) -> Result<LossBreakdown> {
        let n = self.train.manifest.len();
        let mut acc = LossBreakdown::default();
        for i in 0..n {
            let s = self.train.get(i)?;
            let size = self.train.size;
            let out = self.model.forward(&s.image.clone().reshape(&[1, 3, size, size])?)?;
            let plane = [1, 1, size, size];
            let l = total_loss(&out, &s.mask.reshape(&plane)?, &s.edge.reshape(&plane)?)?;
            acc.edge += l.edge / n as f64;
            for (a, d) in acc.det.iter_mut().zip(l.det) {
                *a += d / n as f64;
            }
            acc.total += l.total / n as f64;
        }
        Ok(acc)
    }

    pub fn to_archive(&self, metrics: &BTreeMap<String, f64>) -> Archive {
        let mut a = Archive::default();
        store_params(&self.model.store, &mut a);
        self.adam.save(&self.model.store, &mut a);
        let md = &mut a.metadata;
        md.insert("format".into(), FORMAT.into());
        md.insert("model".into(), serde_json::to_string(&self.config.model).expect("serializes"));
        md.insert("config".into(), serde_json::to_string(&self.config).expect("serializes"));
        md.insert("config_hash".into(), self.config.hash());
        md.insert("epoch".into(), self.epoch.to_string());
        md.insert("step".into(), self.step.to_string());
        md.insert("batch_in_epoch".into(), self.batch_in_epoch.to_string());
        if let Some(b) = self.best_val_mae {
            md.insert("best_val_mae".into(), format!("{b:e}"));
        }
        md.insert("metrics".into(), serde_json::to_string(metrics).expect("serializes"));
        a
    }

    pub fn save_checkpoint(&self, path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
        self.to_archive(metrics).save(path)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(manifest: DatasetManifest, config: TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::new(config, manifest, None)?.run(out_dir)
}

/// Continues training from `checkpoint` into `out_dir`.
pub fn resume(checkpoint: &Path, manifest: DatasetManifest, config: TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::resume(checkpoint, config, manifest, None)?.run(out_dir)
}

/// Evaluation-mode `S_1` maps for every sample of `manifest` at `size`².
pub fn predict_manifest(model: &Model, manifest: &DatasetManifest, size: usize) -> Result<Vec<(Sample, Tensor)>> {
    check_input_size(size, size)?;
    manifest
        .pairs
        .iter()
        .map(|e| {
            let s = load_sample(e, size)?;
            let x = s.image.clone().reshape(&[1, 3, size, size])?;
            let map = model.forward(&x)?.maps.swap_remove(0);
            Ok((s, map))
        })
        .collect()
}
