//! Training with early stopping, per-subject evaluation and the nested-CV experiment.

pub mod checkpoint;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use indexmap::IndexMap;
use serde::Serialize;

use crate::autograd::Graph;
use crate::data::{augment_sample, nested_cv_plan, AugmentConfig, Fold, Sample, SubjectSet};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, binarize, dice, BinaryMask, DiceReport, RunScore};
use crate::model::{build_model, segmentation_loss, Model, ModelConfig};
use crate::optim::{adam_init, adam_step, DEFAULT_LR};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

/// Minimum rise in validation dice that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    /// Single-threaded fold training with one sequential augmentation stream.
    pub deterministic: bool,
    /// Weight of each deep-supervision term in the loss.
    pub aux_weight: f64,
    /// Ends training as soon as validation dice reaches this value.
    pub stop_at_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            patience: 5,
            batch_size: 8,
            lr: DEFAULT_LR,
            seed: 0,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            deterministic: true,
            aux_weight: 1.0,
            stop_at_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("aux_weight must be >= 0, got {}", self.aux_weight));
        }
        self.augment.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// One JSON object per epoch: `{"epoch":..,"train_loss":..,"val_dice":..}`.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain numeric record") + "\n")
            .collect()
    }
}

/// Patience tracker over a maximized score.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `score` for `epoch`; returns whether it became the new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b + IMPROVEMENT_EPS => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Epoch at which training stops, and the best epoch, for a given score sequence.
pub fn simulate_early_stopping(scores: &[f64], patience: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    for (i, &s) in scores.iter().enumerate() {
        es.observe(i + 1, s);
        if es.should_stop() {
            return (i + 1, es.best().map_or(0, |b| b.0));
        }
    }
    (scores.len(), es.best().map_or(0, |b| b.0))
}

fn stack_images(batch: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())
}

fn stack_masks(batch: &[&Sample]) -> Result<Tensor> {
    let masks: Vec<Tensor> = batch.iter().map(|s| s.mask.to_tensor()).collect();
    Tensor::stack(&masks.iter().collect::<Vec<_>>())
}

fn check_input_dims(model: &Model, samples: &[Sample]) -> Result<()> {
    let want = model.config.input_size;
    if let Some(bad) = samples.iter().find(|s| s.size() != want) {
        return Err(Error::shape(
            "evaluate",
            format!("{}: sample {:?}, model expects {want:?}", bad.source, bad.size()),
        ));
    }
    Ok(())
}

/// Thresholded masks for each sample, computed in batches without recording gradients.
pub fn predict_masks(model: &Model, samples: &[Sample]) -> Result<Vec<BinaryMask>> {
    check_input_dims(model, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let vars: Vec<_> = model.params.values().map(|t| g.input(t.clone())).collect();
        let x = g.input(stack_images(&refs)?);
        let logits = model.forward_with(&mut g, &vars, x)?.logits;
        let prob = g.sigmoid(logits);
        let prob = g.value(prob);
        for i in 0..chunk.len() {
            out.push(binarize(&prob.batch_item(i))?);
        }
    }
    Ok(out)
}

/// Arithmetic mean of per-image dice at threshold 0.5. Never augments.
pub fn mean_dice(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("mean_dice: no samples".into()));
    }
    let preds = predict_masks(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += dice(p, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn evaluate_subject(ck: &Checkpoint, subject: &SubjectSet) -> Result<f64> {
    mean_dice(&ck.model, &subject.samples)
}

fn train_stream_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x5452_4149_4E5F_5354)
}

/// One optimizer pass over the shuffled training set; returns the sample-weighted mean loss.
fn train_epoch(
    model: &mut Model,
    opt: &mut crate::optim::AdamState,
    train: &[Sample],
    order: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    for batch_idx in order.chunks(cfg.batch_size) {
        let augmented: Vec<Sample> = batch_idx
            .iter()
            .map(|&i| augment_sample(&train[i], &cfg.augment, rng))
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        let mut g = Graph::new();
        let x = g.input(stack_images(&refs)?);
        let target = stack_masks(&refs)?;
        let (out, vars) = model.forward(&mut g, x)?;
        let loss = segmentation_loss(&mut g, &out, &target, cfg.aux_weight)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let mut grads = g.backward(loss)?;
        let named: IndexMap<String, Tensor> = model
            .params
            .keys()
            .zip(&vars)
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect();
        match adam_step(&mut model.params, &named, opt) {
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
            other => other?,
        }
        loss_sum += value * batch_idx.len() as f64;
    }
    Ok(loss_sum / train.len() as f64)
}

/// Trains from a fresh initialization and returns the weights of the best validation epoch.
pub fn train_run(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(Checkpoint, RunHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "train_run needs non-empty training and validation sets".into(),
        ));
    }
    let mut model = build_model(&cfg.model, cfg.seed)?;
    check_input_dims(&model, train)?;
    check_input_dims(&model, val)?;
    let mut opt = adam_init(&model.params, cfg.lr)?;
    let mut rng = Rng::new(train_stream_seed(cfg.seed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut es = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = RunHistory::default();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let train_loss = train_epoch(&mut model, &mut opt, train, &order, cfg, &mut rng, epoch)?;
        let val_dice = mean_dice(&model, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_dice,
        });
        if es.observe(epoch, val_dice) {
            best.clone_from(&model.params);
            history.best_epoch = epoch;
        }
        if es.should_stop() || cfg.stop_at_val_dice.is_some_and(|t| val_dice >= t) {
            break;
        }
    }
    model.params = best;
    Ok((Checkpoint::new(model), history))
}

/// Outcome of one (arch, fold) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun {
    pub arch: String,
    pub fold_index: usize,
    pub fold: Fold,
    pub test_dice: f64,
    pub history: RunHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub report: DiceReport,
    /// Ordered by config, then fold.
    pub runs: Vec<FoldRun>,
}

/// Seed of fold `index`: the base seed mixed with the fold index through SplitMix64.
pub fn fold_seed(base: u64, index: usize) -> u64 {
    mix64(base ^ mix64(index as u64))
}

fn subject(subjects: &[SubjectSet], id: u32) -> &SubjectSet {
    subjects.iter().find(|s| s.id == id).expect("plan ids come from the subject list")
}

fn run_fold(subjects: &[SubjectSet], cfg: &TrainConfig, index: usize, fold: &Fold) -> Result<FoldRun> {
    let train: Vec<Sample> = fold
        .train
        .iter()
        .flat_map(|&id| subject(subjects, id).samples.iter().cloned())
        .collect();
    let val = &subject(subjects, fold.val).samples;
    let fold_cfg = TrainConfig {
        seed: fold_seed(cfg.seed, index),
        ..cfg.clone()
    };
    let (ck, history) = train_run(&train, val, &fold_cfg)?;
    let test_dice = evaluate_subject(&ck, subject(subjects, fold.test))?;
    Ok(FoldRun {
        arch: cfg.model.arch.label().to_string(),
        fold_index: index,
        fold: fold.clone(),
        test_dice,
        history,
    })
}

/// Every fold of the nested plan for every config, spread over `jobs` worker threads.
/// Results do not depend on `jobs`. `progress` sees each run as it finishes.
pub fn run_nested_cv(
    subjects: &[SubjectSet],
    configs: &[TrainConfig],
    jobs: usize,
    progress: &(dyn Fn(&FoldRun) + Sync),
) -> Result<CvResult> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("run_nested_cv: no configs".into()));
    }
    for c in configs {
        c.validate()?;
    }
    if let Some(s) = subjects.iter().find(|s| s.samples.is_empty()) {
        return Err(Error::InvalidArgument(format!("subject {} has no samples", s.id)));
    }
    let ids: Vec<u32> = subjects.iter().map(|s| s.id).collect();
    let plan = nested_cv_plan(&ids)?;
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..plan.folds.len()).map(move |f| (c, f)))
        .collect();

    let slots: Mutex<Vec<Option<Result<FoldRun>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    let worker = || loop {
        let t = next.fetch_add(1, Ordering::Relaxed);
        if t >= tasks.len() || failed.load(Ordering::Relaxed) {
            break;
        }
        let (c, f) = tasks[t];
        let r = run_fold(subjects, &configs[c], f, &plan.folds[f]);
        match &r {
            Ok(run) => progress(run),
            Err(_) => failed.store(true, Ordering::Relaxed),
        }
        slots.lock().expect("no panics while holding the lock")[t] = Some(r);
    };
    let jobs = jobs.clamp(1, tasks.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let slots = slots.into_inner().expect("workers joined");
    if let Some(pos) = slots.iter().position(|s| matches!(s, Some(Err(_)))) {
        return Err(slots.into_iter().nth(pos).flatten().expect("found above").unwrap_err());
    }
    let runs: Vec<FoldRun> = slots
        .into_iter()
        .map(|s| s.expect("every task ran").expect("errors handled above"))
        .collect();
    let scores: Vec<RunScore> = runs
        .iter()
        .map(|r| RunScore {
            subject: r.fold.test.to_string(),
            arch: r.arch.clone(),
            dice: r.test_dice,
        })
        .collect();
    Ok(CvResult {
        report: aggregate_report(&scores)?,
        runs,
    })
}
