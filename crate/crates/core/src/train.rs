//! Weighted-loss training loop, metrics and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::{self, Arch, BoundParams, FeatureBlockConfig, ModelParams, TokenBatch};
use crate::corpus::{ClassStats, Corpus, Dataset, SplitSpec, Splits, Vocab};
use crate::error::{Error, Result};
use crate::numeric::tape::{Backward, NodeId, Tape};
use crate::numeric::{adam_step, rng, AdamConfig, AdamState, Rng, Tensor};
use crate::s4d;

pub const FORMAT_VERSION: u32 = 1;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosWeight {
    /// `n_neg / n_pos` of the training split.
    Auto,
    Explicit(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: FeatureBlockConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `model.dropout`.
    pub dropout: f64,
    pub seed: u64,
    pub pos_weight: PosWeight,
    pub split: SplitSpec,
}

impl TrainConfig {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            model: FeatureBlockConfig::new(arch),
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            dropout: 0.5,
            seed,
            pos_weight: PosWeight::Auto,
            split: SplitSpec::standard(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if let PosWeight::Explicit(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("pos_weight must be > 0, got {w}")));
            }
        }
        self.split.validate()?;
        self.model_config().validate()
    }

    /// Model config with the training dropout applied.
    pub fn model_config(&self) -> FeatureBlockConfig {
        FeatureBlockConfig {
            dropout: self.dropout,
            ..self.model.clone()
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of `w·y·softplus(−z) + (1−y)·softplus(z)`.
pub fn weighted_bce(logits: &[f64], labels: &[f64], pos_weight: f64) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("weighted_bce_logits", &[logits.len()], &[labels.len()]));
    }
    if !(pos_weight > 0.0) {
        return Err(Error::InvalidConfig(format!("pos_weight must be > 0, got {pos_weight}")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "weighted_bce_logits" });
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum();
    Ok(total / logits.len() as f64)
}

struct BceRule {
    labels: Vec<f64>,
    pos_weight: f64,
}

impl Backward for BceRule {
    fn name(&self) -> &'static str {
        "weighted_bce_logits"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let z = inputs[0];
        let g = grad_out.item() / z.len() as f64;
        let grad = z
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&z, &y)| {
                let s = sigmoid(z);
                g * (self.pos_weight * y * (s - 1.0) + (1.0 - y) * s)
            })
            .collect();
        Ok(vec![Some(Tensor::new(z.shape(), grad)?)])
    }
}

/// Scalar loss node over a `[batch]` logit node.
pub fn weighted_bce_logits(tape: &mut Tape, logits: NodeId, labels: &[f64], pos_weight: f64) -> Result<NodeId> {
    let loss = weighted_bce(tape.value(logits).data(), labels, pos_weight)?;
    let rule = BceRule {
        labels: labels.to_vec(),
        pos_weight,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(loss), Box::new(rule)))
}

pub fn compute_pos_weight(stats: &ClassStats) -> Result<f64> {
    if stats.n_pos == 0 || stats.n_neg == 0 {
        return Err(Error::DegenerateClass(format!(
            "{} positives, {} negatives",
            stats.n_pos, stats.n_neg
        )));
    }
    Ok(stats.n_neg as f64 / stats.n_pos as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Support-weighted classification metrics, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    /// Per-class precision/recall/F1 weighted by class support. An undefined
    /// precision (class never predicted) counts as zero.
    pub fn from_confusion(c: Confusion) -> Self {
        let n = c.total();
        let (s_pos, s_neg) = (c.tp + c.fn_, c.tn + c.fp);
        let (p_pos, r_pos) = (ratio(c.tp, c.tp + c.fp), ratio(c.tp, s_pos));
        let (p_neg, r_neg) = (ratio(c.tn, c.tn + c.fn_), ratio(c.tn, s_neg));
        let weigh = |neg: f64, pos: f64| {
            if n == 0 {
                0.0
            } else {
                100.0 * (s_neg as f64 * neg + s_pos as f64 * pos) / n as f64
            }
        };
        Self {
            accuracy: 100.0 * ratio(c.tp + c.tn, n),
            precision: weigh(p_neg, p_pos),
            recall: weigh(r_neg, r_pos),
            f1: weigh(f1_score(p_neg, r_neg), f1_score(p_pos, r_pos)),
            confusion: c,
            loss_curve: Vec::new(),
        }
    }
}

pub fn batch_of(dataset: &Dataset, idx: &[usize]) -> Result<TokenBatch> {
    TokenBatch::from_rows(idx.iter().map(|&i| dataset.examples[i].ids.as_slice()))
}

/// Eval-mode logits for every example, in order.
pub fn dataset_logits(params: &ModelParams, config: &FeatureBlockConfig, dataset: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(blocks::predict_logits(params, config, &batch_of(dataset, chunk)?)?);
    }
    Ok(out)
}

/// Threshold `σ(z) ≥ 0.5`, i.e. `z ≥ 0`.
pub fn evaluate_params(params: &ModelParams, config: &FeatureBlockConfig, dataset: &Dataset) -> Result<Metrics> {
    let logits = dataset_logits(params, config, dataset)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "evaluate" });
    }
    let pred: Vec<u8> = logits.iter().map(|&z| (z >= 0.0) as u8).collect();
    Ok(Metrics::from_confusion(Confusion::from_predictions(&pred, &dataset.labels())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
}

/// A checkpoint: everything needed to reproduce evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub arch: Arch,
    /// 1-based epoch these parameters come from.
    pub epoch: usize,
    pub config: TrainConfig,
    pub pos_weight: f64,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub frozen: Vec<String>,
    pub metrics: SplitMetrics,
    pub epochs: Vec<EpochLog>,
}

impl TrainedModel {
    /// Eval-time model config (dropout is inactive at eval but kept for the record).
    pub fn model_config(&self) -> FeatureBlockConfig {
        self.config.model_config()
    }

    pub fn logits(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        dataset_logits(&self.params, &self.model_config(), dataset)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<Metrics> {
        evaluate_params(&self.params, &self.model_config(), dataset)
    }

    pub fn kernels(&self) -> Result<Option<s4d::Kernel>> {
        blocks::extract_kernels(&self.params, &self.model_config())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let model: Self = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        model
            .params
            .validate(&model.model_config())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.frozen != model.params.frozen() {
            return Err(Error::Checkpoint(format!("unexpected frozen set {:?}", model.frozen)));
        }
        if model.params.vocab_size() != model.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "embedding has {} rows, vocab has {}",
                model.params.vocab_size(),
                model.vocab.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Final-epoch model plus the best-validation snapshot.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub best: TrainedModel,
    pub splits: Splits<Dataset>,
}

/// Split, build the vocabulary from the training split and encode.
pub fn prepare(config: &TrainConfig, corpus: &Corpus) -> Result<Splits<Dataset>> {
    let raw = corpus.split(&config.split)?;
    let vocab = raw.train.vocab();
    let len = config.model.seq_len;
    Ok(Splits {
        train: raw.train.encode(&vocab, len),
        val: raw.val.encode(&vocab, len),
        test: raw.test.encode(&vocab, len),
    })
}

fn diverged(epoch: usize, batch: usize, what: &str) -> Error {
    Error::Diverged(format!("{what} at epoch {epoch}, batch {batch}"))
}

/// One optimizer step on one batch; returns the batch loss before the step.
pub struct Trainer {
    pub params: ModelParams,
    pub config: FeatureBlockConfig,
    pub adam: AdamConfig,
    pub pos_weight: f64,
    states: Vec<AdamState>,
    step: u64,
}

impl Trainer {
    pub fn new(params: ModelParams, config: FeatureBlockConfig, lr: f64, pos_weight: f64) -> Self {
        let states = params.named().iter().map(|(_, t)| AdamState::like(t)).collect();
        Self {
            params,
            config,
            adam: AdamConfig { lr, ..Default::default() },
            pos_weight,
            states,
            step: 0,
        }
    }

    pub fn loss(&self, tokens: &TokenBatch, labels: &[f64], train: bool, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let pass = blocks::forward(&mut tape, &bound, &self.params, &self.config, tokens, train, rng)?;
        weighted_bce(tape.value(pass.logits).data(), labels, self.pos_weight)
    }

    pub fn step(&mut self, tokens: &TokenBatch, labels: &[f64], rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let pass = blocks::forward(&mut tape, &bound, &self.params, &self.config, tokens, true, rng)?;
        let loss = weighted_bce_logits(&mut tape, pass.logits, labels, self.pos_weight)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged("non-finite loss".into()));
        }
        let mut grads = tape.backward(loss)?;
        self.step += 1;
        for ((p, &leaf), state) in self.params.tensors_mut().into_iter().zip(&bound.leaves).zip(&mut self.states) {
            let g = grads.take(leaf).unwrap_or_else(|| Tensor::zeros(p.shape()));
            adam_step(p, &g, state, &self.adam, self.step)?;
        }
        Ok(value)
    }
}

pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainedModel> {
    train_run(config, corpus).map(|o| o.model)
}

/// Runs exactly `config.epochs` epochs; no early stopping.
pub fn train_run(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutput> {
    train_run_with(config, corpus, &mut |_| {})
}

/// [`train_run`] with a callback after every epoch.
pub fn train_run_with(config: &TrainConfig, corpus: &Corpus, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutput> {
    config.validate()?;
    let splits = prepare(config, corpus)?;
    if splits.train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    let pos_weight = match config.pos_weight {
        PosWeight::Auto => compute_pos_weight(&splits.train.stats)?,
        PosWeight::Explicit(w) => w,
    };
    let model_cfg = config.model_config();
    let root = Rng::new(config.seed);
    let params = blocks::build(&model_cfg, splits.train.vocab.len(), &mut root.split(rng::INIT))?;
    let mut trainer = Trainer::new(params, model_cfg.clone(), config.lr, pos_weight);
    let mut dropout_rng = root.split(rng::DROPOUT);

    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        root.split_indexed(rng::DATA, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tokens = batch_of(&splits.train, chunk)?;
            let labels: Vec<f64> = chunk.iter().map(|&i| splits.train.examples[i].label as f64).collect();
            let loss = trainer.step(&tokens, &labels, &mut dropout_rng).map_err(|e| match e {
                Error::Diverged(_) | Error::NonFinite { .. } => diverged(epoch, b, &e.to_string()),
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        if let Some(ssm) = &trainer.params.ssm {
            s4d::check_stability(ssm).map_err(|e| diverged(epoch, batches, &e.to_string()))?;
        }
        let val = if splits.val.is_empty() {
            Metrics::from_confusion(Confusion::default())
        } else {
            evaluate_params(&trainer.params, &model_cfg, &splits.val)?
        };
        if best.as_ref().is_none_or(|(_, f1, _)| val.f1 > *f1) {
            best = Some((epoch, val.f1, trainer.params.clone()));
        }
        let log = EpochLog {
            epoch,
            train_loss: total / batches as f64,
            val_f1: val.f1,
            val_accuracy: val.accuracy,
        };
        on_epoch(&log);
        logs.push(log);
    }

    let snapshot = |params: ModelParams, epoch: usize| -> Result<TrainedModel> {
        let eval = |d: &Dataset| {
            if d.is_empty() {
                Ok(Metrics::from_confusion(Confusion::default()))
            } else {
                evaluate_params(&params, &model_cfg, d)
            }
        };
        let mut train_m = eval(&splits.train)?;
        train_m.loss_curve = logs.iter().map(|l| l.train_loss).collect();
        let metrics = SplitMetrics {
            train: train_m,
            val: eval(&splits.val)?,
            test: eval(&splits.test)?,
        };
        Ok(TrainedModel {
            format_version: FORMAT_VERSION,
            arch: config.model.arch,
            epoch,
            config: config.clone(),
            pos_weight,
            vocab: splits.train.vocab.clone(),
            frozen: params.frozen(),
            params,
            metrics,
            epochs: logs.clone(),
        })
    };
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    let model = snapshot(trainer.params, config.epochs)?;
    let best = if best_epoch == config.epochs {
        model.clone()
    } else {
        snapshot(best_params, best_epoch)?
    };
    Ok(TrainOutput { model, best, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::REVEAL_FULL;

    #[test]
    fn bce_closed_forms() {
        let l = weighted_bce(&[0.0], &[1.0], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let w = compute_pos_weight(&REVEAL_FULL).unwrap();
        assert!((w - 9.1491).abs() < 1e-4);
        let l = weighted_bce(&[0.0], &[1.0], w).unwrap();
        assert!((l - w * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 6.342).abs() < 1e-3);
    }

    #[test]
    fn bce_is_stable() {
        let l = weighted_bce(&[50.0], &[1.0], 1.0).unwrap();
        assert!(l.is_finite() && l < 1e-20);
        let l = weighted_bce(&[700.0, -700.0], &[0.0, 1.0], 2.0).unwrap();
        assert!((l - (700.0 + 2.0 * 700.0) / 2.0).abs() < 1e-9);
        assert!(weighted_bce(&[f64::NAN], &[1.0], 1.0).is_err());
        assert!(weighted_bce(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn degenerate_class_rejected() {
        let err = compute_pos_weight(&ClassStats { n_pos: 5, n_neg: 0 }).unwrap_err();
        assert!(err.to_string().contains("degenerate class"));
        assert_eq!(compute_pos_weight(&ClassStats { n_pos: 7, n_neg: 7 }).unwrap(), 1.0);
    }

    #[test]
    fn all_negative_predictor() {
        // 901 negatives, 99 positives, everything predicted negative.
        let m = Metrics::from_confusion(Confusion {
            tp: 0,
            fp: 0,
            tn: 901,
            fn_: 99,
        });
        assert!((m.accuracy - 90.1).abs() < 1e-9);
        assert!((m.recall - 90.1).abs() < 1e-9);
        assert!((m.precision - 81.1801).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictor() {
        let m = Metrics::from_confusion(Confusion {
            tp: 3,
            fp: 0,
            tn: 5,
            fn_: 0,
        });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::new(Arch::Conv1d, 0)
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bce_gradient_matches_difference() {
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 1.0];
        let w = 2.5;
        let mut tape = Tape::new();
        let zn = tape.leaf(Tensor::vector(z.to_vec()));
        let loss = weighted_bce_logits(&mut tape, zn, &y, w).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(zn).unwrap().data().to_vec();
        for i in 0..3 {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (weighted_bce(&zp, &y, w).unwrap() - weighted_bce(&zm, &y, w).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
