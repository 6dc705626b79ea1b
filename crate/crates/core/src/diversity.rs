//! Ensemble diversity: the max-normalised variance metric, its inter-view and
//! offset (intra) angular forms, the KL expected-loss bound, and angle
//! statistics.
//!
//! Member sets are slices of `n × C` tensors: member `i`'s output for sample
//! `r` is row `r` of the `i`-th tensor. Every quantity is averaged over rows.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard on norms, maxima and log arguments.
pub const DIV_EPS: f64 = 1e-12;

fn check_members(op: &'static str, members: &[Tensor], min: usize) -> Result<(usize, usize)> {
    if members.len() < min {
        return Err(Error::param(format!("{op} needs at least {min} members, got {}", members.len())));
    }
    let shape = members[0].shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape(op, shape, &[1, 1]));
    }
    for m in members {
        if m.shape() != shape {
            return Err(Error::shape(op, shape, m.shape()));
        }
    }
    Ok((shape[0], shape[1]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(DIV_EPS)
}

/// Angle in degrees, via the half-angle form which stays accurate near 0° and 180°.
fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < DIV_EPS || nb < DIV_EPS {
        return cosine(a, b).clamp(-1.0, 1.0).acos().to_degrees();
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
}

/// `E_x Σ_c Var_i[z_i^c / max_k z_k^c]` with population variance.
pub fn generalized_diversity(members: &[Tensor]) -> Result<f64> {
    let (n, c) = check_members("generalized_diversity", members, 2)?;
    let m = members.len() as f64;
    let mut total = 0.0;
    for r in 0..n {
        for k in 0..c {
            let max = members.iter().map(|z| z.get(r, k)).fold(f64::NEG_INFINITY, f64::max).max(DIV_EPS);
            let scaled: Vec<f64> = members.iter().map(|z| z.get(r, k) / max).collect();
            let mean = scaled.iter().sum::<f64>() / m;
            total += scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        }
    }
    Ok(total / n as f64)
}

/// `E_x [E_i ‖Z_i‖² − ‖E_i Z_i‖²]`.
pub fn total_logit_variance(members: &[Tensor]) -> Result<f64> {
    let (n, c) = check_members("total_logit_variance", members, 2)?;
    let m = members.len() as f64;
    let mut total = 0.0;
    for r in 0..n {
        let mut mean = vec![0.0; c];
        let mut sq = 0.0;
        for z in members {
            let row = z.row(r);
            sq += dot(row, row);
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v / m;
            }
        }
        total += sq / m - dot(&mean, &mean);
    }
    Ok(total / n as f64)
}

/// `E_x [E_i ‖Z_i‖² − (1/N²) Σ_{i,j} ‖Z_i‖ ‖Z_j‖ cos(Z_i, Z_j)]`, all ordered
/// pairs including `i = j`.
pub fn diversity_inter_form(members: &[Tensor]) -> Result<f64> {
    let (n, _) = check_members("diversity_inter_form", members, 2)?;
    let m = members.len() as f64;
    let mut total = 0.0;
    for r in 0..n {
        let rows: Vec<&[f64]> = members.iter().map(|z| z.row(r)).collect();
        let norms: Vec<f64> = rows.iter().map(|v| norm(v)).collect();
        let sq = norms.iter().map(|v| v * v).sum::<f64>() / m;
        let mut pairs = 0.0;
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                pairs += norms[i] * norms[j] * cosine(rows[i], rows[j]);
            }
        }
        total += sq - pairs / (m * m);
    }
    Ok(total / n as f64)
}

/// Offset form of the variance with its applicability diagnostic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraForm {
    pub value: f64,
    /// Largest `‖Σ_i Δ_i‖` over samples; the identity with the total variance
    /// needs this to vanish.
    pub max_offset_sum: f64,
}

impl IntraForm {
    pub fn identity_applicable(&self, tol: f64) -> bool {
        self.max_offset_sum <= tol
    }
}

/// `E_x [−(1/N) Σ_{i≠j} ‖Δ_i‖ ‖Δ_j‖ cos(Δ_i, Δ_j)]` with `Δ_i = Z^T − Z_i`.
pub fn diversity_intra_form(teacher: &Tensor, members: &[Tensor]) -> Result<IntraForm> {
    let (n, _) = check_members("diversity_intra_form", members, 2)?;
    if teacher.shape() != members[0].shape() {
        return Err(Error::shape("diversity_intra_form", teacher.shape(), members[0].shape()));
    }
    let m = members.len() as f64;
    let mut total = 0.0;
    let mut max_offset_sum: f64 = 0.0;
    for r in 0..n {
        let t = teacher.row(r);
        let offsets: Vec<Vec<f64>> = members
            .iter()
            .map(|z| t.iter().zip(z.row(r)).map(|(a, b)| a - b).collect())
            .collect();
        let norms: Vec<f64> = offsets.iter().map(|d| norm(d)).collect();
        let mut pairs = 0.0;
        for i in 0..offsets.len() {
            for j in 0..offsets.len() {
                if i != j {
                    pairs += norms[i] * norms[j] * cosine(&offsets[i], &offsets[j]);
                }
            }
        }
        total += -pairs / m;
        let mut sum = vec![0.0; t.len()];
        for d in &offsets {
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v;
            }
        }
        max_offset_sum = max_offset_sum.max(norm(&sum));
    }
    Ok(IntraForm {
        value: total / n as f64,
        max_offset_sum,
    })
}

/// Same as [`diversity_intra_form`] but with the diagonal `i = j` included.
/// Used only as a negative control: the identity must fail under it.
pub fn diversity_intra_form_with_diagonal(teacher: &Tensor, members: &[Tensor]) -> Result<f64> {
    let off = diversity_intra_form(teacher, members)?;
    let m = members.len() as f64;
    let (n, _) = check_members("diversity_intra_form", members, 2)?;
    let mut diag = 0.0;
    for r in 0..n {
        for z in members {
            let d: Vec<f64> = teacher.row(r).iter().zip(z.row(r)).map(|(a, b)| a - b).collect();
            diag += dot(&d, &d);
        }
    }
    Ok(off.value - diag / (m * n as f64))
}

/// Both sides of the KL expected-loss inequality for one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlBound {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// True when some input entry had to be raised to the ε floor.
    pub clamped: bool,
}

/// `KL(y ‖ z̄) ≤ E_i KL(y ‖ z_i) − E_i Σ_c y_c (z_i^c − z̄^c)² / (2 (max_k z_k^c)²)`.
pub fn kl_bound_check(y: &[f64], members: &[Vec<f64>]) -> Result<KlBound> {
    if members.len() < 2 {
        return Err(Error::param(format!("kl_bound_check needs at least 2 members, got {}", members.len())));
    }
    let c = y.len();
    if let Some(m) = members.iter().find(|m| m.len() != c) {
        return Err(Error::shape("kl_bound_check", &[c], &[m.len()]));
    }
    let mut clamped = false;
    let mut floor = |v: f64| {
        if v < DIV_EPS {
            clamped = true;
            DIV_EPS
        } else {
            v
        }
    };
    let y: Vec<f64> = y.iter().map(|&v| floor(v)).collect();
    let z: Vec<Vec<f64>> = members.iter().map(|m| m.iter().map(|&v| floor(v)).collect()).collect();
    let m = z.len() as f64;
    let mean: Vec<f64> = (0..c).map(|k| z.iter().map(|zi| zi[k]).sum::<f64>() / m).collect();
    let max: Vec<f64> = (0..c).map(|k| z.iter().map(|zi| zi[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let kl = |q: &[f64]| -> f64 { y.iter().zip(q).map(|(p, q)| p * (p.ln() - q.ln())).sum() };
    let lhs = kl(&mean);
    let mean_kl = z.iter().map(|zi| kl(zi)).sum::<f64>() / m;
    let spread = z
        .iter()
        .map(|zi| (0..c).map(|k| y[k] * (zi[k] - mean[k]).powi(2) / (2.0 * max[k] * max[k])).sum::<f64>())
        .sum::<f64>()
        / m;
    let rhs = mean_kl - spread;
    Ok(KlBound {
        lhs,
        rhs,
        slack: rhs - lhs,
        clamped,
    })
}

/// Mean pairwise angles between views and between their offsets from the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngleStats {
    pub mean_inter_deg: f64,
    /// `None` when every offset pair was below the norm guard.
    pub mean_intra_deg: Option<f64>,
}

/// Mean over samples and unordered view pairs of the angle `arccos(cos)` in degrees.
pub fn angle_stats(teacher: &Tensor, views: &[Tensor]) -> Result<AngleStats> {
    let (n, _) = check_members("angle_stats", views, 2)?;
    if teacher.shape() != views[0].shape() {
        return Err(Error::shape("angle_stats", teacher.shape(), views[0].shape()));
    }
    let (mut inter, mut inter_n) = (0.0, 0usize);
    let (mut intra, mut intra_n) = (0.0, 0usize);
    for r in 0..n {
        let t = teacher.row(r);
        let offsets: Vec<Vec<f64>> = views
            .iter()
            .map(|z| t.iter().zip(z.row(r)).map(|(a, b)| a - b).collect())
            .collect();
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                inter += angle_deg(views[i].row(r), views[j].row(r));
                inter_n += 1;
                if norm(&offsets[i]) >= DIV_EPS && norm(&offsets[j]) >= DIV_EPS {
                    intra += angle_deg(&offsets[i], &offsets[j]);
                    intra_n += 1;
                }
            }
        }
    }
    Ok(AngleStats {
        mean_inter_deg: inter / inter_n as f64,
        mean_intra_deg: (intra_n > 0).then(|| intra / intra_n as f64),
    })
}

/// Everything the harness reports about an ensemble on one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Max-normalised variance over teacher plus views.
    pub diversity_direct: f64,
    pub inter_form: f64,
    pub intra_form: f64,
    pub raw_variance: f64,
    pub mean_inter_angle_deg: f64,
    pub mean_intra_angle_deg: Option<f64>,
    pub kl_bound_lhs: f64,
    pub kl_bound_rhs: f64,
    pub bound_slack: f64,
}

/// Builds a [`DiversityReport`] from teacher probabilities, view probabilities
/// and labels. The KL bound uses one-hot targets smoothed by `1e-6`, averaged
/// over samples, with the teacher included among the members.
pub fn diversity_report(teacher: &Tensor, views: &[Tensor], labels: &[usize]) -> Result<DiversityReport> {
    let (n, c) = check_members("diversity_report", views, 2)?;
    if labels.len() != n {
        return Err(Error::shape("diversity_report", &[n], &[labels.len()]));
    }
    let mut all = Vec::with_capacity(views.len() + 1);
    all.push(teacher.clone());
    all.extend(views.iter().cloned());
    let angles = angle_stats(teacher, views)?;
    let smooth = 1e-6;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (r, &label) in labels.iter().enumerate() {
        let y: Vec<f64> = (0..c)
            .map(|k| if k == label { 1.0 - smooth * (c - 1) as f64 } else { smooth })
            .collect();
        let members: Vec<Vec<f64>> = all.iter().map(|z| z.row(r).to_vec()).collect();
        let b = kl_bound_check(&y, &members)?;
        lhs += b.lhs;
        rhs += b.rhs;
    }
    let (lhs, rhs) = (lhs / n as f64, rhs / n as f64);
    Ok(DiversityReport {
        diversity_direct: generalized_diversity(&all)?,
        inter_form: diversity_inter_form(views)?,
        intra_form: diversity_intra_form(teacher, views)?.value,
        raw_variance: total_logit_variance(views)?,
        mean_inter_angle_deg: angles.mean_inter_deg,
        mean_intra_angle_deg: angles.mean_intra_deg,
        kl_bound_lhs: lhs,
        kl_bound_rhs: rhs,
        bound_slack: rhs - lhs,
    })
}

/// Shifts members so their per-sample mean equals `teacher`.
pub fn recenter(teacher: &Tensor, members: &[Tensor]) -> Result<Vec<Tensor>> {
    check_members("recenter", members, 1)?;
    let m = members.len() as f64;
    let mut shift = teacher.clone();
    for z in members {
        shift.axpy(-1.0 / m, z)?;
    }
    members
        .iter()
        .map(|z| {
            let mut z = z.clone();
            z.axpy(1.0, &shift)?;
            Ok(z)
        })
        .collect()
}

#[cfg(test)]
mod tests;
