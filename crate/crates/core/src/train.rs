//! SGD with momentum and weight decay, a milestone learning-rate schedule,
//! the epoch loop and binary checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchPlan, LabeledImage};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{build_model, Model, ModelName};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 0.1, momentum: 0.2, weight_decay: 5e-4 }
    }
}

impl OptimizerConfig {
    /// Same as the default but with the common momentum of 0.9.
    pub fn conventional() -> Self {
        OptimizerConfig { momentum: 0.9, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be a deliberate no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { milestones: vec![150, 250], gamma: 0.1 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `base_lr * gamma^m` where m counts milestones at or below `epoch`.
pub fn scheduled_lr(epoch: usize, base_lr: f64, cfg: &SchedulerConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * cfg.gamma.powi(passed as i32)
}

/// One SGD update in place:
/// `g' = g + wd*w` (only where `decay[i]`), `v = m*v + g'`, `w -= lr*v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    buffers: &mut [Tensor<T>],
    decay: &[bool],
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() || buffers.len() != params.len() || decay.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), buffers.len(), decay.len()],
        });
    }
    let lr = T::lit(cfg.learning_rate);
    let m = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for (((w, g), v), &d) in params.iter_mut().zip(grads).zip(buffers.iter_mut()).zip(decay) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::ShapeMismatch { op: "sgd_step", lhs: w.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g2 = if d { gi + wd * *wi } else { gi };
            *vi = m * *vi + g2;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    /// Caps the training batches per epoch; evaluation always covers the full test set.
    pub max_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            seed: 0,
            max_batches: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_batches == Some(0) {
            return Err(Error::Config("max batches must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub train_time_s: f64,
    pub eval_time_s: f64,
}

impl EpochRecord {
    pub fn epoch_time_s(&self) -> f64 {
        self.train_time_s + self.eval_time_s
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let total = self.confusion.total();
        if total == 0 {
            0.0
        } else {
            self.confusion.trace() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    /// Momentum buffers in parameter-registry order.
    pub momentum: Vec<Tensor<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Test confusion matrix of the last completed epoch.
    pub last_eval: Option<ConfusionMatrix>,
}

impl TrainState {
    pub fn new(model: Model<f32>, seed: u64) -> Self {
        let momentum = model.params().iter().map(|p| Tensor::zeros_like(p)).collect();
        TrainState { model, momentum, epoch: 0, seed, history: Vec::new(), last_eval: None }
    }

    pub fn total_time_s(&self) -> f64 {
        self.history.iter().map(EpochRecord::epoch_time_s).sum()
    }

    pub fn train_time_s(&self) -> f64 {
        self.history.iter().map(|r| r.train_time_s).sum()
    }

    pub fn eval_time_s(&self) -> f64 {
        self.history.iter().map(|r| r.eval_time_s).sum()
    }

    /// Runs `epochs` more epochs on top of the completed ones.
    pub fn run_epochs(&mut self, train: &[LabeledImage], test: &[LabeledImage], cfg: &TrainConfig, engine: &Engine, epochs: usize) -> Result<()> {
        cfg.validate()?;
        if epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for _ in 0..epochs {
            let epoch = self.epoch;
            let record = engine.install(|| self.one_epoch(train, test, cfg, engine)).map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
            log::info!(
                "epoch {epoch}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}, {:.2}s",
                record.train_loss,
                record.train_acc,
                record.test_loss,
                record.test_acc,
                record.epoch_time_s()
            );
            self.history.push(record);
            self.epoch += 1;
        }
        Ok(())
    }

    fn one_epoch(&mut self, train: &[LabeledImage], test: &[LabeledImage], cfg: &TrainConfig, engine: &Engine) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = scheduled_lr(epoch, cfg.optimizer.learning_rate, &cfg.scheduler);
        let opt = OptimizerConfig { learning_rate: lr, ..cfg.optimizer };
        let decay: Vec<bool> = self.model.param_info().iter().map(|p| p.decay).collect();

        let t0 = Instant::now();
        let batches = make_batches(train, &BatchPlan::train(cfg.batch_size, self.seed, epoch as u64))?;
        let limit = cfg.max_batches.unwrap_or(usize::MAX);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for batch in batches.take(limit) {
            let logits = self.model.forward(&batch.images, Mode::Train, engine)?;
            let out = softmax_cross_entropy(&logits, &batch.labels)?;
            correct += count_correct(&logits, &batch.labels);
            loss_sum += out.loss as f64 * batch.len() as f64;
            seen += batch.len();
            let grads = self.model.backward(&out.grad_logits, engine)?;
            sgd_step(&mut self.model.params_mut(), &grads.params, &mut self.momentum, &decay, &opt)?;
        }
        self.model.clear();
        let train_time_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let eval = evaluate(&mut self.model, test, cfg.batch_size, engine)?;
        let eval_time_s = t1.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_loss: eval.loss,
            test_acc: eval.accuracy(),
            train_time_s,
            eval_time_s,
        };
        self.last_eval = Some(eval.confusion);
        Ok(record)
    }
}

/// Builds a fresh state and trains it for `epochs`.
pub fn train_epochs(model: Model<f32>, train: &[LabeledImage], test: &[LabeledImage], cfg: &TrainConfig, engine: &Engine, epochs: usize) -> Result<TrainState> {
    let mut st = TrainState::new(model, cfg.seed);
    st.run_epochs(train, test, cfg, engine, epochs)?;
    Ok(st)
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
        .collect()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Mean loss and confusion matrix over `data` in eval mode, no augmentation.
pub fn evaluate(model: &mut Model<f32>, data: &[LabeledImage], batch_size: usize, engine: &Engine) -> Result<Evaluation> {
    let k = model.num_classes();
    let mut confusion = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0f64;
    engine.install(|| -> Result<()> {
        for batch in make_batches(data, &BatchPlan::eval(batch_size))? {
            let logits = model.forward(&batch.images, Mode::Eval, engine)?;
            loss_sum += softmax_cross_entropy(&logits, &batch.labels)?.loss as f64 * batch.len() as f64;
            for (&a, p) in batch.labels.iter().zip(predictions(&logits)) {
                confusion.add(a, p)?;
            }
        }
        Ok(())
    })?;
    let n = confusion.total().max(1) as f64;
    Ok(Evaluation { loss: loss_sum / n, confusion })
}

const MAGIC: &[u8; 8] = b"HPCNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelName,
    pub num_classes: usize,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
}

/// Layout: magic, u32 version, u64 metadata length, metadata JSON, u32
/// tensor count, then per tensor: u32 name length, name, u32 rank, u64
/// dims, f32 little-endian payload. Integers are little-endian.
pub fn checkpoint_save(state: &TrainState, model: ModelName, config_hash: &str, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        model,
        num_classes: state.model.num_classes(),
        epoch: state.epoch,
        seed: state.seed,
        config_hash: config_hash.to_string(),
        history: state.history.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (info, t) in state.model.param_info().into_iter().zip(state.model.params()) {
        tensors.push((format!("param/{}", info.name), t));
    }
    for (info, t) in state.model.param_info().into_iter().zip(&state.momentum) {
        tensors.push((format!("momentum/{}", info.name), t));
    }
    for (name, t) in state.model.buffers() {
        tensors.push((format!("buffer/{name}"), t));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).ok().filter(|&l| l <= self.buf.len()).ok_or_else(|| Error::Corrupt(format!("implausible length {v}")))
    }
}

/// Returns the restored state and its metadata.
pub fn checkpoint_load(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()?;
    let meta_len = r.len(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;

    let count = r.u32()? as usize;
    let mut table = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        table.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut model = build_model::<f32>(meta.model, meta.num_classes, meta.seed)?;
    let mut fetch = |key: String, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = table.remove(&key).ok_or_else(|| Error::Corrupt(format!("missing tensor {key}")))?;
        if t.shape() != shape {
            return Err(Error::Corrupt(format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let infos = model.param_info();
    for (info, p) in infos.iter().zip(model.params_mut()) {
        *p = fetch(format!("param/{}", info.name), &info.shape)?;
    }
    let momentum = infos.iter().map(|i| fetch(format!("momentum/{}", i.name), &i.shape)).collect::<Result<Vec<_>>>()?;
    for (name, b) in model.buffers_mut() {
        let shape = b.shape().to_vec();
        *b = fetch(format!("buffer/{name}"), &shape)?;
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }
    let state = TrainState { model, momentum, epoch: meta.epoch, seed: meta.seed, history: meta.history.clone(), last_eval: None };
    Ok((state, meta))
}
