//! Training objectives for the view heads and the student.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for log arguments and offset norms inside losses.
pub const LOSS_EPS: f64 = 1e-12;

/// Representation level at which the angular losses (and distillation) act.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Feature,
    Logit,
    Both,
}

impl Level {
    pub fn uses_features(self) -> bool {
        matches!(self, Level::Feature | Level::Both)
    }

    pub fn uses_logits(self) -> bool {
        matches!(self, Level::Logit | Level::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularLossConfig {
    pub gamma_init: f64,
    pub contrastive_temperature: f64,
    pub level: Level,
    pub epsilon: f64,
}

impl Default for AngularLossConfig {
    fn default() -> Self {
        AngularLossConfig {
            gamma_init: 0.2,
            contrastive_temperature: 0.07,
            level: Level::Logit,
            epsilon: LOSS_EPS,
        }
    }
}

/// The two branches of the inter-view loss, both already batch-averaged.
#[derive(Clone, Copy, Debug)]
pub struct InterAngleLoss<'t> {
    pub constraint: Var<'t>,
    pub diversity: Var<'t>,
    /// Fraction of samples whose margin gate fired.
    pub gate_active_fraction: f64,
}

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

fn check_reps(op: &'static str, anchor: Var<'_>, views: &[Var<'_>]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::param(format!("{op} needs at least one view")));
    }
    let a = anchor.shape();
    if a.len() != 2 || a[0] == 0 {
        return Err(Error::shape(op, &a, &[1, 1]));
    }
    for v in views {
        let s = v.shape();
        if s != a {
            return Err(Error::shape(op, &a, &s));
        }
    }
    Ok(())
}

/// Margin-constrained inter-view angular loss.
///
/// For view `i` and sample `b` the constraint term is a softmax cross-entropy
/// over `cos(R^T_b, R^A_{i,b'}) / τ_C` for all `b'` in the batch, with the
/// diagonal (positive) entry replaced by `min(1, γ + cos(R^T_b, R^A_{i,b}))`.
/// The diversity term `Σ_{i≠j} cos(R^A_{i,b}, R^A_{j,b})` is counted only for
/// samples where every view satisfies `γ + s_i ≥ 1`; the gate carries no
/// gradient.
pub fn inter_angle_loss<'t>(anchor: Var<'t>, views: &[Var<'t>], gamma: Var<'t>, tau_c: f64) -> Result<InterAngleLoss<'t>> {
    check_reps("inter_angle_loss", anchor, views)?;
    if !(tau_c > 0.0) {
        return Err(Error::param(format!("contrastive temperature must be positive, got {tau_c}")));
    }
    let tape = anchor.tape();
    let batch = anchor.shape()[0];
    let g = gamma.item();
    let mut gate = vec![true; batch];
    let mut constraint: Option<Var<'t>> = None;
    for &view in views {
        let sims = anchor.cosine_matrix(view)?;
        let positive = sims.diag()?;
        for (open, s) in gate.iter_mut().zip(positive.value().data()) {
            *open &= g + s >= 1.0;
        }
        let clipped = positive.bcast_add(gamma)?.min_const(1.0)?;
        let logits = sims.with_diagonal(clipped)?.scale(1.0 / tau_c)?;
        let term = logits.log_softmax(1.0)?.diag()?.mean()?.neg()?;
        constraint = Some(match constraint {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let constraint = constraint.expect("at least one view");

    let active = gate.iter().filter(|&&o| o).count();
    let diversity = if views.len() < 2 || active == 0 {
        zero(tape)
    } else {
        let mut pair_sum: Option<Var<'t>> = None;
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                let c = views[i].cosine_rows(views[j])?;
                pair_sum = Some(match pair_sum {
                    Some(acc) => acc.add(c)?,
                    None => c,
                });
            }
        }
        let mask = Tensor::matrix(batch, 1, gate.iter().map(|&o| if o { 2.0 } else { 0.0 }).collect());
        pair_sum.expect("two views").mul(tape.constant(mask))?.mean()?
    };
    Ok(InterAngleLoss {
        constraint,
        diversity,
        gate_active_fraction: active as f64 / batch as f64,
    })
}

/// Offset angular loss: `Σ_{i≠j} cos(Δ_i, Δ_j)` with `Δ_i = R^T − R^A_i`,
/// averaged over the batch. Pairs where either offset norm is below `eps`
/// contribute zero.
pub fn intra_angle_loss<'t>(anchor: Var<'t>, views: &[Var<'t>], eps: f64) -> Result<Var<'t>> {
    check_reps("intra_angle_loss", anchor, views)?;
    let tape = anchor.tape();
    if views.len() < 2 {
        return Ok(zero(tape));
    }
    let batch = anchor.shape()[0];
    let offsets = views.iter().map(|&v| anchor.sub(v)).collect::<Result<Vec<_>>>()?;
    let live: Vec<Vec<bool>> = offsets
        .iter()
        .map(|d| {
            let d = d.value();
            (0..batch)
                .map(|r| d.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() >= eps)
                .collect()
        })
        .collect();
    let mut total: Option<Var<'t>> = None;
    for i in 0..offsets.len() {
        for j in i + 1..offsets.len() {
            let mask = Tensor::matrix(
                batch,
                1,
                (0..batch)
                    .map(|r| if live[i][r] && live[j][r] { 2.0 } else { 0.0 })
                    .collect(),
            );
            let c = offsets[i].cosine_rows(offsets[j])?.mul(tape.constant(mask))?;
            total = Some(match total {
                Some(acc) => acc.add(c)?,
                None => c,
            });
        }
    }
    total.expect("two views").mean()
}

/// Converts one-hot rows to class indices.
pub fn labels_from_one_hot(y: &Tensor) -> Result<Vec<usize>> {
    (0..y.rows())
        .map(|r| {
            let row = y.row(r);
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(c, _)| c).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() == 1 && zeros + 1 == row.len() {
                Ok(ones[0])
            } else {
                Err(Error::Label(format!("row {r} is not one-hot")))
            }
        })
        .collect()
}

/// `Σ_i mean_b −log max(Z^A_{i,b,y_b}, ε)`.
pub fn aug_gt_loss<'t>(labels: &[usize], view_probs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &z in view_probs {
        let term = z.pick(labels)?.clamp_min(LOSS_EPS)?.log()?.mean()?.neg()?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::param("aug_gt_loss needs at least one view"))
}

/// `τ² · mean_b KL(Z^E_b ‖ softmax(raw_b / τ))`; the target is a constant.
pub fn kd_kl_loss<'t>(target: &Tensor, raw_logits: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let tape = raw_logits.tape();
    let shape = raw_logits.shape();
    if target.shape() != shape.as_slice() {
        return Err(Error::shape("kd_kl_loss", target.shape(), &shape));
    }
    let batch = target.rows() as f64;
    let entropy_part: f64 = target
        .data()
        .iter()
        .map(|&p| if p > 0.0 { p * p.max(LOSS_EPS).ln() } else { 0.0 })
        .sum::<f64>()
        / batch;
    let cross = raw_logits
        .log_softmax(tau)?
        .mul(tape.constant(target.clone()))?
        .sum()?
        .scale(-1.0 / batch)?;
    cross.add_scalar(entropy_part)?.scale(tau * tau)
}

/// In-batch contrastive alignment of projected student features with the
/// (constant) ensemble features.
pub fn feature_contrastive_loss<'t>(target: &Tensor, projected: Var<'t>, tau_feat: f64) -> Result<Var<'t>> {
    if !(tau_feat > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau_feat}")));
    }
    if target.shape() != projected.shape().as_slice() {
        return Err(Error::shape("feature_contrastive_loss", target.shape(), &projected.shape()));
    }
    let tape = projected.tape();
    projected
        .cosine_matrix(tape.constant(target.clone()))?.scale(1.0 / tau_feat)?.log_softmax(1.0)?.diag()?.mean()?.neg()
}

/// Mean cross-entropy of `softmax(raw)` against integer labels.
pub fn student_ce_loss<'t>(labels: &[usize], raw_logits: Var<'t>) -> Result<Var<'t>> {
    raw_logits.log_softmax(1.0)?.pick(labels)?.mean()?.neg()
}

/// Named loss values from one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub gate_active_fraction: Option<f64>,
}

impl LossBundle {
    pub fn merge(&mut self, other: &LossBundle) {
        self.total += other.total;
        for (k, v) in &other.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += v;
        }
        if other.gate_active_fraction.is_some() {
            self.gate_active_fraction = other.gate_active_fraction;
        }
    }
}

/// Unit-weight sum of named scalar terms.
pub fn sum_terms<'t>(tape: &'t Tape, terms: &[(&str, Var<'t>)]) -> Result<(Var<'t>, LossBundle)> {
    let mut bundle = LossBundle::default();
    let mut total = zero(tape);
    for &(name, v) in terms {
        let value = v.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss term {name}")));
        }
        *bundle.terms.entry(name.to_string()).or_insert(0.0) += value;
        total = total.add(v)?;
    }
    bundle.total = total.item();
    Ok((total, bundle))
}

/// `L^aug = inter constraint + inter diversity + intra + gt`.
pub fn total_aug_loss<'t>(tape: &'t Tape, inter: &InterAngleLoss<'t>, intra: Var<'t>, gt: Var<'t>) -> Result<(Var<'t>, LossBundle)> {
    let (v, mut b) = sum_terms(
        tape,
        &[
            ("inter_constraint", inter.constraint),
            ("inter_diversity", inter.diversity),
            ("intra", intra),
            ("aug_gt", gt),
        ],
    )?;
    b.gate_active_fraction = Some(inter.gate_active_fraction);
    Ok((v, b))
}

/// `L^distill` over the enabled terms: feature term when the level uses
/// features, KL when it uses logits, and cross-entropy always.
pub fn total_distill_loss<'t>(
    tape: &'t Tape,
    feat: Option<Var<'t>>,
    logit: Option<Var<'t>>,
    gt: Var<'t>,
    level: Level,
) -> Result<(Var<'t>, LossBundle)> {
    let mut terms = Vec::with_capacity(3);
    if level.uses_features() {
        terms.push(("feat_contrastive", feat.ok_or_else(|| Error::param("feature distillation term missing"))?));
    }
    if level.uses_logits() {
        terms.push(("kd_kl", logit.ok_or_else(|| Error::param("logit distillation term missing"))?));
    }
    terms.push(("student_ce", gt));
    sum_terms(tape, &terms)
}
