//! Training pipelines: teacher pretraining, view-head warm-up, joint
//! distillation, evaluation and multi-seed comparisons.
//!
//! Random streams all derive from `Rng::new(cfg.seed)`:
//!
//! | stream | use |
//! |---|---|
//! | `teacher` / `heads` / `student` | initialisation |
//! | `teacher-epoch[e]` → `shuffle` | teacher batch order |
//! | `warmup-epoch[e]` → `shuffle`, `step[s]` | warm-up batch order, head dropout |
//! | `distill-epoch[e]` → `shuffle`, `step[s]` | distillation batch order, head dropout or feature noise |
//! | `eval-noise` | noise views at evaluation time |

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::augment::{combine_ensemble, noise_augment_baseline, AugmentedViews, EnsembleOutput, ViewHeadSet};
use crate::autodiff::{Tape, Var};
use crate::data::{batch_iter, Dataset};
use crate::diversity::{diversity_report, DiversityReport};
use crate::error::{Error, Result};
use crate::losses::{
    aug_gt_loss, feature_contrastive_loss, inter_angle_loss, intra_angle_loss, kd_kl_loss, student_ce_loss, sum_terms,
    total_distill_loss, Level, LossBundle, LOSS_EPS,
};
use crate::nn::{Binder, Mode, Parameterized, StudentBundle, TeacherBundle};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelBundle};
pub use config::{load_datasets, AugMode, TrainConfig};
pub use metrics::{MemorySink, MetricsRow, MetricsSink, MetricsWriter};
pub use optim::SgdState;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn evaluate_top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::param("cannot evaluate on an empty dataset"));
    }
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape("evaluate_top1", logits.shape(), &[labels.len()]));
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Frozen-teacher outputs for every row of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub features: Tensor,
    pub logits: Tensor,
    /// `softmax(logits / τ_Z)`.
    pub probs: Tensor,
}

impl TeacherCache {
    pub fn compute(teacher: &TeacherBundle, x: &Tensor) -> Result<Self> {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let out = teacher.forward(&mut b, tape.constant(x.clone()))?;
        let (features, logits, probs) = (out.features.value().clone(), out.logits.value().clone(), out.probs.value().clone());
        Ok(TeacherCache { features, logits, probs })
    }

    pub fn rows(&self, idx: &[usize]) -> TeacherCache {
        TeacherCache {
            features: self.features.select_rows(idx),
            logits: self.logits.select_rows(idx),
            probs: self.probs.select_rows(idx),
        }
    }
}

/// Optional file written with the models' last good state when a loss
/// turns non-finite.
#[derive(Clone, Debug, Default)]
pub struct FailurePolicy {
    pub checkpoint_path: Option<PathBuf>,
}

fn mean_bundle(acc: &LossBundle, steps: usize) -> (f64, std::collections::BTreeMap<String, f64>) {
    let n = steps.max(1) as f64;
    (acc.total / n, acc.terms.iter().map(|(k, v)| (k.clone(), v / n)).collect())
}

/// Trains the teacher with cross-entropy under the configured schedule.
pub fn pretrain_teacher(cfg: &TrainConfig, train: &Dataset, test: &Dataset, sink: &mut dyn MetricsSink) -> Result<TeacherBundle> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut teacher = ModelBundle::init(cfg, train.input_dim(), train.num_classes, false, false)?.teacher;
    let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.teacher_milestones(), cfg.lr_decay);
    for epoch in 0..cfg.teacher_epochs {
        let erng = root.fork_indexed("teacher-epoch", epoch as u64);
        let batches = batch_iter(train, cfg.batch_size, &mut erng.fork("shuffle"), true)?;
        let (mut total, mut steps) = (0.0, 0);
        for batch in &batches {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, true);
            let out = teacher.forward(&mut b, tape.constant(batch.features.clone()))?;
            let loss = student_ce_loss(&batch.labels, out.logits)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("teacher cross-entropy at epoch {epoch}")));
            }
            tape.backward(loss)?;
            opt.step(teacher.params_mut(), &b.grads(), epoch)?;
            total += value;
            steps += 1;
        }
        let train_acc = evaluate_top1(&TeacherCache::compute(&teacher, &train.features)?.logits, &train.labels)?;
        let test_acc = evaluate_top1(&TeacherCache::compute(&teacher, &test.features)?.logits, &test.labels)?;
        sink.record(&MetricsRow {
            epoch,
            phase: "teacher".into(),
            lr: opt.current_lr,
            loss: total / steps.max(1) as f64,
            loss_terms: [("teacher_ce".to_string(), total / steps.max(1) as f64)].into_iter().collect(),
            train_acc: Some(train_acc),
            test_acc: Some(test_acc),
            steps,
            ..MetricsRow::default()
        })?;
    }
    Ok(teacher)
}

/// `L^aug` over the configured level(s) with the enabled ablation terms.
/// Label supervision always acts on the view probabilities.
pub fn aug_loss<'t>(
    cfg: &TrainConfig,
    tape: &'t Tape,
    teacher_features: Var<'t>,
    teacher_probs: Var<'t>,
    views: &AugmentedViews<'t>,
    gamma: Var<'t>,
    labels: &[usize],
) -> Result<(Var<'t>, LossBundle)> {
    let mut levels: Vec<(Var<'t>, &[Var<'t>])> = Vec::new();
    if cfg.level.uses_logits() {
        levels.push((teacher_probs, &views.logits));
    }
    if cfg.level.uses_features() {
        levels.push((teacher_features, &views.features));
    }
    let mut terms: Vec<(&str, Var<'t>)> = Vec::new();
    let mut gate = Vec::new();
    for (anchor, reps) in levels {
        if cfg.use_inter {
            let inter = inter_angle_loss(anchor, reps, gamma, cfg.tau_c)?;
            terms.push(("inter_constraint", inter.constraint));
            terms.push(("inter_diversity", inter.diversity));
            gate.push(inter.gate_active_fraction);
        }
        if cfg.use_intra {
            terms.push(("intra", intra_angle_loss(anchor, reps, LOSS_EPS)?));
        }
    }
    terms.push(("aug_gt", aug_gt_loss(labels, &views.logits)?));
    let (total, mut bundle) = sum_terms(tape, &terms)?;
    if !gate.is_empty() {
        bundle.gate_active_fraction = Some(gate.iter().sum::<f64>() / gate.len() as f64);
    }
    Ok((total, bundle))
}

/// `L^distill` against a gradient-stopped ensemble target.
pub fn distill_loss<'t>(
    cfg: &TrainConfig,
    tape: &'t Tape,
    target: &EnsembleOutput,
    projected: Var<'t>,
    raw_logits: Var<'t>,
    labels: &[usize],
) -> Result<(Var<'t>, LossBundle)> {
    let feat = if cfg.level.uses_features() {
        Some(feature_contrastive_loss(&target.features, projected, cfg.tau_feat)?)
    } else {
        None
    };
    let logit = if cfg.level.uses_logits() {
        Some(kd_kl_loss(&target.logits, raw_logits, cfg.tau_z)?)
    } else {
        None
    };
    let ce = student_ce_loss(labels, raw_logits)?;
    total_distill_loss(tape, feat, logit, ce, cfg.level)
}

/// Angles between views in eval mode, at the feature level when the angular
/// losses act only on features and at the logit level otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngleSnapshot {
    pub mean_inter_deg: f64,
    pub mean_intra_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarmupReport {
    pub before: Option<AngleSnapshot>,
    pub after: Option<AngleSnapshot>,
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
}

/// Eval-mode view probabilities and features for a whole dataset.
pub fn eval_views(heads: &mut ViewHeadSet, cache: &TeacherCache) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let tape = Tape::new();
    let mut b = Binder::new(&tape, false);
    let views = heads.augment(&mut b, tape.constant(cache.features.clone()), Mode::Eval, &Rng::new(0))?;
    Ok((views.logit_values(), views.feature_values()))
}

fn angle_snapshot(level: Level, cache: &TeacherCache, views: &(Vec<Tensor>, Vec<Tensor>)) -> Result<Option<AngleSnapshot>> {
    if views.0.len() < 2 {
        return Ok(None);
    }
    let s = match level {
        Level::Feature => crate::diversity::angle_stats(&cache.features, &views.1)?,
        _ => crate::diversity::angle_stats(&cache.probs, &views.0)?,
    };
    Ok(Some(AngleSnapshot {
        mean_inter_deg: s.mean_inter_deg,
        mean_intra_deg: s.mean_intra_deg,
    }))
}

/// Trains only the view heads and the margin on `L^aug` at constant `lr`;
/// the teacher is only read.
pub fn warmup_heads(
    teacher: &TeacherBundle,
    heads: &mut ViewHeadSet,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn MetricsSink,
) -> Result<WarmupReport> {
    let checksum_before = teacher.checksum();
    let root = Rng::new(cfg.seed);
    let train_cache = TeacherCache::compute(teacher, &train.features)?;
    let test_cache = TeacherCache::compute(teacher, &test.features)?;
    let before = angle_snapshot(cfg.level, &test_cache, &eval_views(heads, &test_cache)?)?;
    let mut opt = SgdState::constant(cfg.lr, cfg.momentum);
    for epoch in 0..cfg.warmup_epochs {
        let erng = root.fork_indexed("warmup-epoch", epoch as u64);
        let batches = batch_iter(train, cfg.batch_size, &mut erng.fork("shuffle"), true)?;
        let mut acc = LossBundle::default();
        let (mut gate_sum, mut steps) = (0.0, 0);
        for (s, batch) in batches.iter().enumerate() {
            if batch.labels.len() < 2 {
                continue;
            }
            let t = train_cache.rows(&batch.indices);
            let tape = Tape::new();
            let mut hb = Binder::new(&tape, true);
            let f_t = tape.constant(t.features);
            let p_t = tape.constant(t.probs);
            let views = heads.augment(&mut hb, f_t, Mode::Train, &erng.fork_indexed("step", s as u64))?;
            let gamma = heads.bind_gamma(&mut hb);
            let (loss, bundle) = aug_loss(cfg, &tape, f_t, p_t, &views, gamma, &batch.labels)?;
            tape.backward(loss)?;
            opt.step(heads.params_mut(), &hb.grads(), epoch)?;
            heads.clamp_gamma();
            gate_sum += bundle.gate_active_fraction.unwrap_or(0.0);
            acc.merge(&bundle);
            steps += 1;
        }
        let (loss, loss_terms) = mean_bundle(&acc, steps);
        let views = eval_views(heads, &test_cache)?;
        let view_test_acc = views.0.iter().map(|z| evaluate_top1(z, &test.labels)).collect::<Result<Vec<_>>>()?;
        let angles = angle_snapshot(cfg.level, &test_cache, &views)?;
        sink.record(&MetricsRow {
            epoch,
            phase: "warmup".into(),
            lr: opt.current_lr,
            loss,
            loss_terms,
            view_test_acc,
            gamma: Some(heads.gamma()),
            gate_active_fraction: cfg.use_inter.then(|| gate_sum / steps.max(1) as f64),
            mean_inter_deg: angles.map(|a| a.mean_inter_deg),
            mean_intra_deg: angles.and_then(|a| a.mean_intra_deg),
            steps,
            ..MetricsRow::default()
        })?;
    }
    let after = angle_snapshot(cfg.level, &test_cache, &eval_views(heads, &test_cache)?)?;
    Ok(WarmupReport {
        before,
        after,
        teacher_checksum_before: checksum_before,
        teacher_checksum_after: teacher.checksum(),
    })
}

/// Test-set evaluation of a student together with its ensemble.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub student_train_acc: f64,
    pub student_test_acc: f64,
    pub teacher_test_acc: f64,
    pub ensemble_test_acc: f64,
    pub view_test_acc: Vec<f64>,
    pub diversity: Option<DiversityReport>,
}

impl EvalSummary {
    pub fn mean_view_acc(&self) -> Option<f64> {
        (!self.view_test_acc.is_empty()).then(|| self.view_test_acc.iter().sum::<f64>() / self.view_test_acc.len() as f64)
    }
}

fn student_logits(student: &StudentBundle, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let mut b = Binder::new(&tape, false);
    let out = student.forward(&mut b, tape.constant(x.clone()))?;
    let logits = out.logits.value().clone();
    Ok(logits)
}

fn noise_views(teacher: &TeacherBundle, cache: &TeacherCache, cfg: &TrainConfig, rng: &Rng) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let tape = Tape::new();
    let mut b = Binder::new(&tape, false);
    let v = noise_augment_baseline(&mut b, &cache.features, &teacher.classifier, cfg.tau_z, cfg.n_views, cfg.noise_sigma, rng)?;
    Ok((v.logit_values(), v.feature_values()))
}

/// Eval-mode views for the configured mode.
fn views_for(cfg: &TrainConfig, teacher: &TeacherBundle, heads: Option<&mut ViewHeadSet>, cache: &TeacherCache) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    match (cfg.aug_mode, heads) {
        (AugMode::Angular, Some(h)) => eval_views(h, cache),
        (AugMode::Noise, _) => noise_views(teacher, cache, cfg, &Rng::new(cfg.seed).fork("eval-noise")),
        _ => Ok((Vec::new(), Vec::new())),
    }
}

/// Accuracy of the student, the teacher, the ensemble and each view, plus
/// the diversity report of teacher-plus-views when there are at least two views.
pub fn evaluate_run(
    cfg: &TrainConfig,
    teacher: &TeacherBundle,
    heads: Option<&mut ViewHeadSet>,
    student: &StudentBundle,
    train: &Dataset,
    test: &Dataset,
) -> Result<EvalSummary> {
    let cache = TeacherCache::compute(teacher, &test.features)?;
    let (view_probs, view_feats) = views_for(cfg, teacher, heads, &cache)?;
    let ens = combine_ensemble(&cache.probs, &cache.features, &view_probs, &view_feats, cfg.ensemble_weights.as_deref())?;
    let diversity = if view_probs.len() >= 2 {
        Some(diversity_report(&cache.probs, &view_probs, &test.labels)?)
    } else {
        None
    };
    Ok(EvalSummary {
        student_train_acc: evaluate_top1(&student_logits(student, &train.features)?, &train.labels)?,
        student_test_acc: evaluate_top1(&student_logits(student, &test.features)?, &test.labels)?,
        teacher_test_acc: evaluate_top1(&cache.logits, &test.labels)?,
        ensemble_test_acc: evaluate_top1(&ens.logits, &test.labels)?,
        view_test_acc: view_probs.iter().map(|z| evaluate_top1(z, &test.labels)).collect::<Result<_>>()?,
        diversity,
    })
}

/// Everything a finished distillation run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub student: StudentBundle,
    pub heads: Option<ViewHeadSet>,
    pub warmup: Option<WarmupReport>,
    pub summary: EvalSummary,
    /// Mean gate fraction over the last distillation epoch.
    pub final_gate_fraction: Option<f64>,
}

struct EpochTotals {
    losses: LossBundle,
    gate_sum: f64,
    steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn distill_epoch(
    teacher: &TeacherBundle,
    mut heads: Option<&mut ViewHeadSet>,
    student: &mut StudentBundle,
    cfg: &TrainConfig,
    train: &Dataset,
    train_cache: &TeacherCache,
    head_opt: &mut SgdState,
    student_opt: &mut SgdState,
    epoch: usize,
    erng: &Rng,
) -> Result<EpochTotals> {
    let weights = cfg.ensemble_weights.as_deref();
    let batches = batch_iter(train, cfg.batch_size, &mut erng.fork("shuffle"), true)?;
    let mut totals = EpochTotals {
        losses: LossBundle::default(),
        gate_sum: 0.0,
        steps: 0,
    };
    for (s, batch) in batches.iter().enumerate() {
        if cfg.aug_mode == AugMode::Angular && batch.labels.len() < 2 {
            continue;
        }
        let step_rng = erng.fork_indexed("step", s as u64);
        let t = train_cache.rows(&batch.indices);
        let tape = Tape::new();
        let f_t = tape.constant(t.features.clone());
        let p_t = tape.constant(t.probs.clone());
        let mut hb = Binder::new(&tape, true);
        let (aug, ensemble) = match (cfg.aug_mode, heads.as_deref_mut()) {
            (AugMode::Angular, Some(h)) => {
                let views = h.augment(&mut hb, f_t, Mode::Train, &step_rng)?;
                let gamma = h.bind_gamma(&mut hb);
                let aug = aug_loss(cfg, &tape, f_t, p_t, &views, gamma, &batch.labels)?;
                let ens = combine_ensemble(&t.probs, &t.features, &views.logit_values(), &views.feature_values(), weights)?;
                (Some(aug), ens)
            }
            (AugMode::Noise, _) => {
                let mut fb = Binder::new(&tape, false);
                let views = noise_augment_baseline(&mut fb, &t.features, &teacher.classifier, cfg.tau_z, cfg.n_views, cfg.noise_sigma, &step_rng)?;
                let ens = combine_ensemble(&t.probs, &t.features, &views.logit_values(), &views.feature_values(), weights)?;
                (None, ens)
            }
            _ => (None, combine_ensemble(&t.probs, &t.features, &[], &[], weights)?),
        };
        let mut sb = Binder::new(&tape, true);
        let out = student.forward(&mut sb, tape.constant(batch.features.clone()))?;
        let (dist, dist_bundle) = distill_loss(cfg, &tape, &ensemble, out.projected, out.logits, &batch.labels)?;
        let total = match &aug {
            Some((a, _)) => a.add(dist)?,
            None => dist,
        };
        tape.backward(total)?;
        if let (Some((_, b)), Some(h)) = (&aug, heads.as_deref_mut()) {
            head_opt.step(h.params_mut(), &hb.grads(), epoch)?;
            h.clamp_gamma();
            totals.gate_sum += b.gate_active_fraction.unwrap_or(0.0);
            totals.losses.merge(b);
        }
        student_opt.step(student.params_mut(), &sb.grads(), epoch)?;
        totals.losses.merge(&dist_bundle);
        totals.steps += 1;
    }
    Ok(totals)
}

/// Joint training. Each step runs the frozen teacher, builds views, updates
/// the heads and margin on `L^aug` and the student on `L^distill`. The
/// ensemble target is a constant, so no distillation gradient reaches the heads.
///
/// On a non-finite value the models as of the start of the failing epoch are
/// written to `failure.checkpoint_path` (if set) before the error returns.
/// Returns the mean gate fraction of the last epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation(
    teacher: &TeacherBundle,
    mut heads: Option<&mut ViewHeadSet>,
    student: &mut StudentBundle,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn MetricsSink,
    failure: &FailurePolicy,
) -> Result<Option<f64>> {
    let root = Rng::new(cfg.seed);
    if cfg.aug_mode == AugMode::Angular && heads.is_none() {
        return Err(Error::param("angular mode needs view heads"));
    }
    let train_cache = TeacherCache::compute(teacher, &train.features)?;
    let mut head_opt = SgdState::new(cfg.lr, cfg.momentum, cfg.lr_milestones.clone(), cfg.lr_decay);
    let mut student_opt = SgdState::new(cfg.lr, cfg.momentum, cfg.lr_milestones.clone(), cfg.lr_decay);
    let mut last_gate = None;
    for epoch in 0..cfg.epochs {
        let erng = root.fork_indexed("distill-epoch", epoch as u64);
        let snapshot = failure.checkpoint_path.as_ref().map(|_| ModelBundle {
            teacher: teacher.clone(),
            heads: heads.as_deref().cloned(),
            student: Some(student.clone()),
        });
        let result = distill_epoch(
            teacher,
            heads.as_deref_mut(),
            student,
            cfg,
            train,
            &train_cache,
            &mut head_opt,
            &mut student_opt,
            epoch,
            &erng,
        );
        let totals = match (result, snapshot, &failure.checkpoint_path) {
            (Err(e @ Error::Numeric(_)), Some(models), Some(path)) => {
                let ckpt = Checkpoint::capture(cfg, train.input_dim(), train.num_classes, &models, &erng);
                save_checkpoint(&ckpt, path)?;
                return Err(e);
            }
            (r, _, _) => r?,
        };
        let (loss, loss_terms) = mean_bundle(&totals.losses, totals.steps);
        let gate = (cfg.aug_mode == AugMode::Angular && cfg.use_inter).then(|| totals.gate_sum / totals.steps.max(1) as f64);
        last_gate = gate;
        let summary = evaluate_run(cfg, teacher, heads.as_deref_mut(), student, train, test)?;
        sink.record(&MetricsRow {
            epoch,
            phase: "distill".into(),
            lr: student_opt.current_lr,
            loss,
            loss_terms,
            train_acc: Some(summary.student_train_acc),
            test_acc: Some(summary.student_test_acc),
            ensemble_test_acc: Some(summary.ensemble_test_acc),
            view_test_acc: summary.view_test_acc.clone(),
            gamma: heads.as_deref().map(ViewHeadSet::gamma),
            gate_active_fraction: gate,
            diversity: summary.diversity,
            mean_inter_deg: summary.diversity.map(|d| d.mean_inter_angle_deg),
            mean_intra_deg: summary.diversity.and_then(|d| d.mean_intra_angle_deg),
            steps: totals.steps,
        })?;
    }
    Ok(last_gate)
}

/// Warm-up (angular mode only) followed by distillation of a fresh student.
pub fn run_experiment(
    cfg: &TrainConfig,
    teacher: &TeacherBundle,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn MetricsSink,
    failure: &FailurePolicy,
) -> Result<RunResult> {
    cfg.validate()?;
    let angular = cfg.aug_mode == AugMode::Angular;
    let init = ModelBundle::init(cfg, train.input_dim(), train.num_classes, angular, true)?;
    let mut heads = init.heads;
    let mut student = init.student.expect("student requested");
    let warmup = match heads.as_mut() {
        Some(h) if cfg.warmup_epochs > 0 => Some(warmup_heads(teacher, h, cfg, train, test, sink)?),
        _ => None,
    };
    let final_gate_fraction = run_distillation(teacher, heads.as_mut(), &mut student, cfg, train, test, sink, failure)?;
    let summary = evaluate_run(cfg, teacher, heads.as_mut(), &student, train, test)?;
    Ok(RunResult {
        student,
        heads,
        warmup,
        summary,
        final_gate_fraction,
    })
}

/// Which angular losses are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Ablation {
    Full,
    NoInter,
    NoIntra,
    GtOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoInter, Ablation::NoIntra, Ablation::GtOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoInter => "no_inter",
            Ablation::NoIntra => "no_intra",
            Ablation::GtOnly => "gt_only",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.use_inter = matches!(self, Ablation::Full | Ablation::NoIntra);
        c.use_intra = matches!(self, Ablation::Full | Ablation::NoInter);
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown ablation {s:?}")))
    }
}

/// One (mode, ablation, seed) result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: AugMode,
    /// `None` for modes without angular losses.
    pub ablation: Option<Ablation>,
    pub seed: u64,
    pub test_acc: f64,
    pub ensemble_test_acc: f64,
    pub mean_view_acc: Option<f64>,
    pub diversity: Option<f64>,
    pub mean_inter_deg: Option<f64>,
    pub mean_intra_deg: Option<f64>,
    pub gate_frac: Option<f64>,
    pub warmup: Option<WarmupReport>,
}

/// Mean and population standard deviation for one (mode, ablation) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareSummary {
    pub mode: AugMode,
    pub ablation: Option<Ablation>,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub diversity_mean: Option<f64>,
    pub inter_mean: Option<f64>,
    pub intra_mean: Option<f64>,
    pub gate_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_HEADER: &str = "mode,ablation,seed,test_acc,diversity,mean_inter_deg,mean_intra_deg,gate_frac";

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.16e},{},{},{},{}\n",
                r.mode.as_str(),
                r.ablation.map_or("-", Ablation::as_str),
                r.seed,
                r.test_acc,
                cell(r.diversity),
                cell(r.mean_inter_deg),
                cell(r.mean_intra_deg),
                cell(r.gate_frac)
            ));
        }
        s
    }

    pub fn select(&self, mode: AugMode, ablation: Option<Ablation>) -> Vec<&CompareRow> {
        self.rows.iter().filter(|r| r.mode == mode && r.ablation == ablation).collect()
    }

    /// One entry per (mode, ablation) combination, in first-seen order.
    pub fn summary(&self) -> Vec<CompareSummary> {
        let mut keys: Vec<(AugMode, Option<Ablation>)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.mode, r.ablation)) {
                keys.push((r.mode, r.ablation));
            }
        }
        keys.into_iter()
            .map(|(mode, ablation)| {
                let rows = self.select(mode, ablation);
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| r.test_acc).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r.test_acc - mean).powi(2)).sum::<f64>() / n;
                CompareSummary {
                    mode,
                    ablation,
                    runs: rows.len(),
                    acc_mean: mean,
                    acc_std: var.sqrt(),
                    diversity_mean: mean_of(rows.iter().map(|r| r.diversity)),
                    inter_mean: mean_of(rows.iter().map(|r| r.mean_inter_deg)),
                    intra_mean: mean_of(rows.iter().map(|r| r.mean_intra_deg)),
                    gate_mean: mean_of(rows.iter().map(|r| r.gate_frac)),
                }
            })
            .collect()
    }
}

/// Runs every mode for every seed on one dataset. Each seed pretrains its
/// own teacher, which all modes and ablations of that seed share. Ablations
/// only apply to angular mode. `metrics_dir`, when given, receives one
/// metrics file per run.
pub fn compare_experiment(
    cfg: &TrainConfig,
    modes: &[AugMode],
    ablations: &[Ablation],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    metrics_dir: Option<&Path>,
) -> Result<ComparisonTable> {
    if seeds.len() < 2 {
        return Err(Error::param("comparison needs at least two seeds"));
    }
    if modes.is_empty() {
        return Err(Error::param("comparison needs at least one mode"));
    }
    let ablations = if ablations.is_empty() { &[Ablation::Full][..] } else { ablations };
    let mut table = ComparisonTable::default();
    let sink_for = |name: String| -> Result<Box<dyn MetricsSink>> {
        Ok(match metrics_dir {
            Some(dir) => Box::new(MetricsWriter::create(&dir.join(name))?),
            None => Box::new(MemorySink::default()),
        })
    };
    for &seed in seeds {
        let base = TrainConfig { seed, ..cfg.clone() };
        let mut teacher_sink = sink_for(format!("teacher_seed{seed}.jsonl"))?;
        let teacher = pretrain_teacher(&base, train, test, teacher_sink.as_mut())?;
        for &mode in modes {
            let runs: Vec<Option<Ablation>> = if mode == AugMode::Angular {
                ablations.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for ablation in runs {
                let mut run_cfg = TrainConfig { aug_mode: mode, ..base.clone() };
                if let Some(a) = ablation {
                    run_cfg = a.apply(&run_cfg);
                }
                if mode == AugMode::None {
                    run_cfg.ensemble_weights = None;
                }
                let tag = ablation.map_or("-", Ablation::as_str);
                let mut sink = sink_for(format!("{}_{}_seed{seed}.jsonl", mode.as_str(), tag.replace('-', "base")))?;
                let r = run_experiment(&run_cfg, &teacher, train, test, sink.as_mut(), &FailurePolicy::default())?;
                let d = r.summary.diversity;
                table.rows.push(CompareRow {
                    mode,
                    ablation,
                    seed,
                    test_acc: r.summary.student_test_acc,
                    ensemble_test_acc: r.summary.ensemble_test_acc,
                    mean_view_acc: r.summary.mean_view_acc(),
                    diversity: d.map(|d| d.diversity_direct),
                    mean_inter_deg: d.map(|d| d.mean_inter_angle_deg),
                    mean_intra_deg: d.and_then(|d| d.mean_intra_angle_deg),
                    gate_frac: r.final_gate_fraction,
                    warmup: r.warmup,
                });
            }
        }
    }
    Ok(table)
}
