//! Toy classifier and momentum-SGD harness around one C2F block.
//!
//! Model: `3×3 conv 1→8, SiLU → C2F(-DS) 8→8, n=2 → global mean pool → 1×1 conv 8→4`,
//! trained with softmax cross-entropy.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::c2f::{c2f_backward, c2f_forward_traced, BlockParams, C2fDsConfig, C2fTrace};
use crate::data::{stack_images, Class, SceneSample, NUM_CLASSES};
use crate::dso::GateStatistic;
use crate::error::{Error, Result};
use crate::gating::{Mode, NoiseSource};
use crate::io::{load_bundle, save_bundle};
use crate::layers::Conv;
use crate::ops::{reduce_spatial, reduce_spatial_backward, Reduce};
use crate::scalar::Scalar;
use crate::tensor::{prefixed, prefixed_mut, Dims, Gradients, Parameterized, Tensor4};

pub const CONFIG_FILE: &str = "config.json";

// Independent streams derived from the user seed.
const INIT_STREAM: u64 = 0x1d1d_0001;
const SHUFFLE_STREAM: u64 = 0x1d1d_0002;
const NOISE_STREAM: u64 = 0x1d1d_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub stem_channels: usize,
    pub block: C2fDsConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { stem_channels: 8, block: C2fDsConfig::new(8, 8, 2) }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block.c_in != self.stem_channels {
            return Err(Error::Config(format!(
                "block input {} does not match stem width {}",
                self.block.c_in, self.stem_channels
            )));
        }
        self.block.validate()
    }

    /// Hex SHA-256 of the JSON form; identifies the configuration in metrics.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyConfig,
    pub stem: Conv<T>,
    pub block: BlockParams<T>,
    pub head: Conv<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Seeded uniform `±1/√fan_in` initialization.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM);
        let stem = Conv::uniform(1, config.stem_channels, 3, &mut rng);
        let block = BlockParams::init(&config.block, &mut rng)?;
        let head = Conv::uniform(config.block.c_out, NUM_CLASSES, 1, &mut rng);
        Ok(ToyModel { config, stem, block, head })
    }

    pub fn zeros(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        Ok(ToyModel {
            stem: Conv::zeros(1, config.stem_channels, 3),
            block: BlockParams::zeros(&config.block)?,
            head: Conv::zeros(config.block.c_out, NUM_CLASSES, 1),
            config,
        })
    }

    fn zeros_like(&self) -> Self {
        ToyModel {
            config: self.config.clone(),
            stem: self.stem.zeros_like(),
            block: self.block.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn forward(&self, images: &Tensor4<T>, noise: &mut NoiseSource) -> Result<ToyTrace<T>> {
        // the stem is a bare convolution; the block applies its own activations
        let stem = self.stem.forward(images)?;
        let block = c2f_forward_traced(&stem, &self.block, &self.config.block, noise)?;
        let pooled = reduce_spatial(Reduce::Mean, &block.out);
        let logits = self.head.forward(&pooled)?;
        Ok(ToyTrace { images: images.clone(), stem, block, pooled, logits })
    }

    /// Mean cross-entropy of `trace` against `labels`, with parameter gradients.
    pub fn backward(&self, trace: &ToyTrace<T>, labels: &[Class]) -> Result<(T, ToyModel<T>)> {
        let (loss, g_logits) = cross_entropy(&trace.logits, labels)?;
        let mut grads = self.zeros_like();
        let (g_pooled, g_head) = self.head.backward(&trace.pooled, &g_logits)?;
        grads.head = g_head;
        let g_block_out = reduce_spatial_backward(Reduce::Mean, &trace.block.out, &g_pooled)?;
        let (g_stem, g_block) = c2f_backward(&self.block, &self.config.block, &trace.block, &g_block_out)?;
        grads.block = g_block;
        let (_, g_stem) = self.stem.backward(&trace.images, &g_stem)?;
        grads.stem = g_stem;
        Ok((loss, grads))
    }

    /// Writes the parameter bundle and `config.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_bundle(self, dir)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(dir.join(CONFIG_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let config: ToyConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(e.column(), format!("{CONFIG_FILE}: {e}")))?;
        let mut model = ToyModel::zeros(config)?;
        load_bundle(&mut model, dir)?;
        Ok(model)
    }
}

impl<T: Scalar> Parameterized<T> for ToyModel<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        prefixed("stem", self.stem.named())
            .chain(prefixed("block", self.block.named()))
            .chain(prefixed("head", self.head.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        prefixed_mut("stem", self.stem.named_mut())
            .chain(prefixed_mut("block", self.block.named_mut()))
            .chain(prefixed_mut("head", self.head.named_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ToyTrace<T> {
    pub images: Tensor4<T>,
    pub stem: Tensor4<T>,
    pub block: C2fTrace<T>,
    pub pooled: Tensor4<T>,
    /// `(B, 4, 1, 1)`.
    pub logits: Tensor4<T>,
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[Class]) -> Result<(T, Tensor4<T>)> {
    let d = logits.dims();
    if d.b != labels.len() || d.c != NUM_CLASSES || d.h != 1 || d.w != 1 {
        return Err(Error::shape("cross_entropy", d, Dims::new(labels.len(), NUM_CLASSES, 1, 1)));
    }
    let batch = T::from_usize(d.b).expect("batch fits scalar");
    let mut grad = Tensor4::zeros(d);
    let mut total = T::zero();
    for (b, label) in labels.iter().enumerate() {
        let z: Vec<T> = (0..d.c).map(|c| logits.get(b, c, 0, 0)).collect();
        let top = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in &z {
            sum += (v - top).exp();
        }
        let log_norm = top + sum.ln();
        total += log_norm - z[label.index()];
        for (c, &v) in z.iter().enumerate() {
            let p = (v - log_norm).exp();
            let target = if c == label.index() { T::one() } else { T::zero() };
            grad.set(b, c, 0, 0, (p - target) / batch);
        }
    }
    Ok((total / batch, grad))
}

/// Predicted class per batch row; ties resolve to the lowest index.
pub fn predictions<T: Scalar>(logits: &Tensor4<T>) -> Vec<Class> {
    let d = logits.dims();
    (0..d.b)
        .map(|b| {
            let mut best = 0;
            for c in 1..d.c {
                if logits.get(b, c, 0, 0) > logits.get(b, best, 0, 0) {
                    best = c;
                }
            }
            Class::from_index(best).expect("four logits")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, lr: 0.05, momentum: 0.9, batch_size: 32, seed: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy; epoch 0 is the evaluation-mode loss at initialization.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub records: Vec<EpochRecord>,
    pub seed: u64,
    pub config_digest: String,
}

impl TrainMetrics {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("epoch 0 always recorded")
    }

    /// `epoch,loss,train_acc,val_acc` CSV.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,loss,train_acc,val_acc")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.train_acc, r.val_acc)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ToyModel<T>,
    pub metrics: TrainMetrics,
    /// Gradients of the very first optimizer step, if any step ran.
    pub first_step: Option<Gradients<T>>,
}

/// Trains a freshly initialized model with momentum SGD.
///
/// MSG noise is active on training batches only; validation and the epoch-0
/// record run in evaluation mode.
pub fn train<T: Scalar>(
    config: &ToyConfig,
    data: &[SceneSample<T>],
    val: &[SceneSample<T>],
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let model = ToyModel::init(config.clone(), tc.seed)?;
    train_from(model, data, val, tc)
}

/// Continues training from a given model.
pub fn train_from<T: Scalar>(
    mut model: ToyModel<T>,
    data: &[SceneSample<T>],
    val: &[SceneSample<T>],
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() || val.is_empty() {
        return Err(Error::Domain("training and validation sets must be non-empty".into()));
    }
    if !(tc.lr > 0.0) || tc.batch_size == 0 || !(0.0..1.0).contains(&tc.momentum) {
        return Err(Error::Config(format!(
            "invalid optimizer settings lr={} momentum={} batch={}",
            tc.lr, tc.momentum, tc.batch_size
        )));
    }
    let init = evaluate(&model, data)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        loss: init.loss,
        train_acc: init.accuracy,
        val_acc: evaluate(&model, val)?.accuracy,
    }];
    let mut velocity = model.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ SHUFFLE_STREAM);
    let mut noise = NoiseSource::new(tc.seed ^ NOISE_STREAM, Mode::Train);
    let lr = T::c(tc.lr);
    let momentum = T::c(tc.momentum);
    let mut first_step = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&SceneSample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<Class> = batch.iter().map(|s| s.label).collect();
            let images = stack_images(&batch)?;
            // inside the loop a domain error means activations overflowed
            let diverged = |e| match e {
                Error::Domain(_) => Error::Divergence { epoch, batch: batch_idx, loss: f64::NAN },
                e => e,
            };
            let trace = model.forward(&images, &mut noise).map_err(diverged)?;
            let (loss, grads) = model.backward(&trace, &labels).map_err(diverged)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx, loss });
            }
            if first_step.is_none() {
                first_step = Some(Gradients::from_params(&grads));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += predictions(&trace.logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            for ((_, v), (_, g)) in velocity.named_mut().into_iter().zip(grads.named()) {
                for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                    *vv = momentum * *vv + gv;
                }
            }
            for ((_, p), (_, v)) in model.named_mut().into_iter().zip(velocity.named()) {
                for (pv, &vv) in p.data_mut().iter_mut().zip(v.data()) {
                    *pv -= lr * vv;
                }
            }
            if model.named().iter().any(|(_, p)| !p.is_finite()) {
                return Err(Error::Divergence { epoch, batch: batch_idx, loss });
            }
        }
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc: evaluate(&model, val)?.accuracy,
        });
    }
    let metrics = TrainMetrics { records, seed: tc.seed, config_digest: model.config.digest() };
    Ok(TrainOutcome { model, metrics, first_step })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Range of MSG temperatures seen, when the block has MSG.
    pub temp_range: Option<(f64, f64)>,
}

impl EvalReport {
    /// `class,background,small,large,mixed` rows of the confusion matrix.
    pub fn write_confusion_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "class")?;
        for c in Class::ALL {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for c in Class::ALL {
            write!(out, "{c}")?;
            for n in self.confusion[c.index()] {
                write!(out, ",{n}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

const EVAL_BATCH: usize = 64;

/// Accuracy, loss and confusion counts in evaluation mode (no noise).
pub fn evaluate<T: Scalar>(model: &ToyModel<T>, data: &[SceneSample<T>]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let mut noise = NoiseSource::eval();
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut loss_sum = 0.0;
    let mut temp_range: Option<(f64, f64)> = None;
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&SceneSample<T>> = chunk.iter().collect();
        let labels: Vec<Class> = batch.iter().map(|s| s.label).collect();
        let trace = model.forward(&stack_images(&batch)?, &mut noise)?;
        let (loss, _) = cross_entropy(&trace.logits, &labels)?;
        loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
        for (p, l) in predictions(&trace.logits).into_iter().zip(&labels) {
            confusion[l.index()][p.index()] += 1;
        }
        if let Some(m) = &trace.block.msg {
            for &t in m.temp.data() {
                let t = t.to_f64_lossy();
                temp_range = Some(match temp_range {
                    None => (t, t),
                    Some((lo, hi)) => (lo.min(t), hi.max(t)),
                });
            }
        }
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        confusion,
        temp_range,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Groups,
    Alpha,
    Operator,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Groups => "groups",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Operator => "operator",
        }
    }

    /// Applies one textual axis value to a copy of `base`.
    pub fn apply(self, base: &ToyConfig, value: &str) -> Result<ToyConfig> {
        let mut cfg = base.clone();
        let bad = |e: String| Error::Config(format!("{} value '{value}': {e}", self.name()));
        match self {
            AblationAxis::Groups => {
                cfg.block.groups = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                cfg.block.use_msg = true;
            }
            AblationAxis::Alpha => {
                cfg.block.alpha = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                cfg.block.use_msg = true;
            }
            AblationAxis::Operator => {
                cfg.block.statistic = value.parse::<GateStatistic>()?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groups" => Ok(AblationAxis::Groups),
            "alpha" => Ok(AblationAxis::Alpha),
            "operator" => Ok(AblationAxis::Operator),
            other => Err(Error::Config(format!("unknown ablation axis '{other}' (groups|alpha|operator)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub final_loss: f64,
    pub val_acc: f64,
    pub temp_range: Option<(f64, f64)>,
    /// Whether every observed temperature lay strictly inside `(beta, alpha + beta)`.
    pub temp_in_bounds: Option<bool>,
}

/// One training run per axis value, all with the same data and seeds.
pub fn ablate<T: Scalar>(
    axis: AblationAxis,
    values: &[String],
    base: &ToyConfig,
    data: &[SceneSample<T>],
    val: &[SceneSample<T>],
    tc: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        let out = train(&cfg, data, val, tc)?;
        let report = evaluate(&out.model, val)?;
        let bounds = report.temp_range.map(|(lo, hi)| {
            let (alpha, beta) = (cfg.block.alpha, cfg.block.beta);
            // bounds as seen in the working precision
            lo > T::c(beta).to_f64_lossy() && hi < (T::c(alpha) + T::c(beta)).to_f64_lossy()
        });
        rows.push(AblationRow {
            value: value.clone(),
            final_loss: out.metrics.last().loss,
            val_acc: report.accuracy,
            temp_range: report.temp_range,
            temp_in_bounds: bounds,
        });
    }
    Ok(rows)
}

/// `axis,value,final_loss,val_acc,t_min,t_max,t_in_bounds` CSV.
pub fn write_ablation_csv(axis: AblationAxis, rows: &[AblationRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "axis,value,final_loss,val_acc,t_min,t_max,t_in_bounds")?;
    for r in rows {
        let (lo, hi) = match r.temp_range {
            Some((lo, hi)) => (lo.to_string(), hi.to_string()),
            None => (String::new(), String::new()),
        };
        let ok = r.temp_in_bounds.map(|b| b.to_string()).unwrap_or_default();
        writeln!(out, "{axis},{},{},{},{lo},{hi},{ok}", r.value, r.final_loss, r.val_acc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor4::<f64>::zeros(Dims::new(2, 4, 1, 1));
        let (loss, grad) = cross_entropy(&logits, &[Class::Small, Class::Mixed]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.get(0, 1, 0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((grad.get(0, 0, 0, 0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let logits = Tensor4::<f64>::new(Dims::new(2, 4, 1, 1), vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(predictions(&logits), vec![Class::Background, Class::Small]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = gen_dataset::<f64>(1, 8).unwrap();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&ToyConfig::default(), &data, &data, &tc).unwrap();
        assert_eq!(out.model, ToyModel::init(ToyConfig::default(), tc.seed).unwrap());
        assert_eq!(out.metrics.records.len(), 1);
        assert!(out.first_step.is_none());
    }

    #[test]
    fn constant_model_scores_one_quarter() {
        let data = gen_dataset::<f64>(2, 12).unwrap();
        let model = ToyModel::zeros(ToyConfig::default()).unwrap();
        let r = evaluate(&model, &data).unwrap();
        assert_eq!(r.accuracy, 0.25);
        for c in 0..NUM_CLASSES {
            assert_eq!(r.confusion[c].iter().sum::<usize>(), 3);
            assert_eq!(r.confusion[c][0], 3);
        }
    }

    #[test]
    fn model_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::<f64>::init(ToyConfig::default(), 4).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ToyModel::<f64>::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn axis_parsing() {
        let base = ToyConfig::default();
        assert_eq!(AblationAxis::Groups.apply(&base, "4").unwrap().block.groups, 4);
        assert!(AblationAxis::Groups.apply(&base, "5").is_err());
        assert_eq!(AblationAxis::Alpha.apply(&base, "2.9").unwrap().block.alpha, 2.9);
        assert_eq!(AblationAxis::Operator.apply(&base, "max").unwrap().block.statistic, GateStatistic::Max);
        assert!("depth".parse::<AblationAxis>().is_err());
    }
}
