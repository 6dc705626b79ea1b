//! View augmentation heads, the teacher-plus-views ensemble, and the
//! random-noise comparator.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{dropout_forward, BatchNormState, Binder, Linear, Mode, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dropout probabilities used for five views.
pub const DEFAULT_DROPOUT_PROBS: [f64; 5] = [0.2, 0.25, 0.3, 0.35, 0.4];

/// One view: `F^A = BN(W_φ (M ⊙ F^T))`, `Z^A = softmax(W_ψ F^A / τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewHead {
    pub index: usize,
    pub dropout_prob: f64,
    pub feature_linear: Linear,
    pub bn: BatchNormState,
    pub logit_linear: Linear,
}

/// All heads plus the learnable angular margin γ (a `1×1` tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewHeadSet {
    pub heads: Vec<ViewHead>,
    pub logit_temperature: f64,
    pub gamma: Tensor,
}

/// Outputs of the heads for one batch.
#[derive(Clone, Debug)]
pub struct AugmentedViews<'t> {
    pub features: Vec<Var<'t>>,
    /// Softened probabilities, one `B×C` matrix per view.
    pub logits: Vec<Var<'t>>,
    pub masks: Vec<Tensor>,
}

impl<'t> AugmentedViews<'t> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_values(&self) -> Vec<Tensor> {
        self.features.iter().map(|v| v.value().clone()).collect()
    }

    pub fn logit_values(&self) -> Vec<Tensor> {
        self.logits.iter().map(|v| v.value().clone()).collect()
    }
}

/// Builds `n` heads with independent orthogonal initialisations.
pub fn build_view_heads(
    n: usize,
    feature_dim: usize,
    num_classes: usize,
    dropout_probs: &[f64],
    tau: f64,
    gamma_init: f64,
    rng: &Rng,
) -> Result<ViewHeadSet> {
    if dropout_probs.len() != n {
        return Err(Error::param(format!(
            "{n} views but {} dropout probabilities",
            dropout_probs.len()
        )));
    }
    if let Some(p) = dropout_probs.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
    }
    if !(tau > 0.0) {
        return Err(Error::param(format!("logit temperature must be positive, got {tau}")));
    }
    let heads = dropout_probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let r = rng.fork_indexed("view-head", i as u64);
            ViewHead {
                index: i,
                dropout_prob: p,
                feature_linear: Linear::new(feature_dim, feature_dim, false, 1.0, &mut r.fork("phi")),
                bn: BatchNormState::new(feature_dim),
                logit_linear: Linear::new(feature_dim, num_classes, false, 1.0, &mut r.fork("psi")),
            }
        })
        .collect();
    Ok(ViewHeadSet {
        heads,
        logit_temperature: tau,
        gamma: Tensor::matrix(1, 1, vec![gamma_init]),
    })
}

impl ViewHeadSet {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.item()
    }

    /// Runs every head on the teacher feature `f_t`. Each head draws its
    /// dropout mask from its own stream forked off `rng`.
    ///
    /// Head parameters are bound through `b` in `params()` order; γ is not
    /// bound here (see [`ViewHeadSet::bind_gamma`]).
    pub fn augment<'t>(&mut self, b: &mut Binder<'t>, f_t: Var<'t>, mode: Mode, rng: &Rng) -> Result<AugmentedViews<'t>> {
        let mut views = AugmentedViews {
            features: Vec::with_capacity(self.len()),
            logits: Vec::with_capacity(self.len()),
            masks: Vec::with_capacity(self.len()),
        };
        let tau = self.logit_temperature;
        for head in &mut self.heads {
            let width = f_t.value().cols();
            if width != head.feature_linear.input_dim() {
                return Err(Error::shape("augment_views", &[width], &[head.feature_linear.input_dim()]));
            }
            let mut r = rng.fork_indexed("dropout", head.index as u64);
            let (dropped, mask) = dropout_forward(f_t, head.dropout_prob, &mut r, mode)?;
            let h = head.feature_linear.forward(b, dropped)?;
            let f = head.bn.forward(b, h, mode)?;
            let z = head.logit_linear.forward(b, f)?.softmax(tau)?;
            views.features.push(f);
            views.logits.push(z);
            views.masks.push(mask);
        }
        Ok(views)
    }

    /// Binds γ; call after [`ViewHeadSet::augment`] so binding order matches `params()`.
    pub fn bind_gamma<'t>(&self, b: &mut Binder<'t>) -> Var<'t> {
        b.bind(&self.gamma)
    }

    /// Keeps γ inside `[0, 1]`.
    pub fn clamp_gamma(&mut self) {
        let g = self.gamma.data_mut();
        g[0] = g[0].clamp(0.0, 1.0);
    }
}

impl Parameterized for ViewHeadSet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for h in &self.heads {
            p.extend(h.feature_linear.params());
            p.extend(h.bn.params());
            p.extend(h.logit_linear.params());
        }
        p.push(&self.gamma);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for h in &mut self.heads {
            p.extend(h.feature_linear.params_mut());
            p.extend(h.bn.params_mut());
            p.extend(h.logit_linear.params_mut());
        }
        p.push(&mut self.gamma);
        p
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut s = Vec::new();
        for h in &self.heads {
            let i = h.index;
            s.extend(h.feature_linear.state().into_iter().map(|(n, t)| (format!("head{i}.phi.{n}"), t)));
            s.extend(h.bn.state().into_iter().map(|(n, t)| (format!("head{i}.bn.{n}"), t)));
            s.extend(h.logit_linear.state().into_iter().map(|(n, t)| (format!("head{i}.psi.{n}"), t)));
        }
        s.push(("gamma".into(), &self.gamma));
        s
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut s = Vec::new();
        for h in &mut self.heads {
            let i = h.index;
            s.extend(h.feature_linear.state_mut().into_iter().map(|(n, t)| (format!("head{i}.phi.{n}"), t)));
            s.extend(h.bn.state_mut().into_iter().map(|(n, t)| (format!("head{i}.bn.{n}"), t)));
            s.extend(h.logit_linear.state_mut().into_iter().map(|(n, t)| (format!("head{i}.psi.{n}"), t)));
        }
        s.push(("gamma".into(), &mut self.gamma));
        s
    }
}

/// Weighted average of the teacher and its views.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub logits: Tensor,
    pub features: Tensor,
    pub weights: Vec<f64>,
}

/// `Z^E = w₀ Z^T + Σ wᵢ Z^A_i` (and likewise for features) with weights
/// normalised to sum to one. `None` means uniform weights.
pub fn combine_ensemble(
    z_t: &Tensor,
    f_t: &Tensor,
    view_logits: &[Tensor],
    view_features: &[Tensor],
    weights: Option<&[f64]>,
) -> Result<EnsembleOutput> {
    let members = view_logits.len() + 1;
    if view_features.len() != view_logits.len() {
        return Err(Error::param(format!(
            "{} view logits but {} view features",
            view_logits.len(),
            view_features.len()
        )));
    }
    let raw: Vec<f64> = match weights {
        Some(w) if w.len() != members => {
            return Err(Error::param(format!("expected {members} ensemble weights, got {}", w.len())))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; members],
    };
    if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::param("ensemble weights must be finite and nonnegative"));
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(Error::param("ensemble weights are all zero"));
    }
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let blend = |first: &Tensor, rest: &[Tensor]| -> Result<Tensor> {
        let mut acc = first.map(|v| v * w[0]);
        for (t, &wi) in rest.iter().zip(&w[1..]) {
            acc.axpy(wi, t)?;
        }
        Ok(acc)
    };
    Ok(EnsembleOutput {
        logits: blend(z_t, view_logits)?,
        features: blend(f_t, view_features)?,
        weights: w,
    })
}

/// Random-perturbation views: `F^A_i = F^T + N(0, σ²)` pushed through the
/// frozen teacher classifier. Returned as constants.
pub fn noise_augment_baseline<'t>(
    b: &mut Binder<'t>,
    f_t: &Tensor,
    classifier: &Linear,
    tau: f64,
    n: usize,
    sigma: f64,
    rng: &Rng,
) -> Result<AugmentedViews<'t>> {
    if !(sigma >= 0.0) {
        return Err(Error::param(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let tape = b.tape();
    let mut frozen = Binder::new(tape, false);
    let mut views = AugmentedViews {
        features: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        masks: Vec::new(),
    };
    for i in 0..n {
        let mut r = rng.fork_indexed("noise-view", i as u64);
        let mut noisy = f_t.clone();
        for v in noisy.data_mut() {
            *v += sigma * r.normal();
        }
        let f = tape.constant(noisy);
        let z = classifier.forward(&mut frozen, f)?.softmax(tau)?;
        views.features.push(f);
        views.logits.push(z.detach());
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect())
    }

    #[test]
    fn build_defaults_and_errors() {
        let rng = Rng::new(0);
        let set = build_view_heads(5, 8, 3, &DEFAULT_DROPOUT_PROBS, 4.0, 0.2, &rng).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.heads[2].dropout_prob, 0.3);
        assert_eq!(set.gamma(), 0.2);
        assert_eq!(set.heads[0].bn.running_var.data(), &[1.0; 8]);
        assert!(build_view_heads(0, 8, 3, &[], 4.0, 0.2, &rng).unwrap().is_empty());
        assert!(build_view_heads(2, 8, 3, &[0.1], 4.0, 0.2, &rng).is_err());
        assert!(build_view_heads(1, 8, 3, &[1.0], 4.0, 0.2, &rng).is_err());
        let again = build_view_heads(5, 8, 3, &DEFAULT_DROPOUT_PROBS, 4.0, 0.2, &Rng::new(0)).unwrap();
        assert_eq!(set, again);
        assert_ne!(set.heads[0].feature_linear, set.heads[1].feature_linear);
    }

    #[test]
    fn views_have_expected_shapes_and_simplex_rows() {
        let mut rng = Rng::new(1);
        let mut set = build_view_heads(5, 64, 7, &DEFAULT_DROPOUT_PROBS, 4.0, 0.2, &rng.fork("h")).unwrap();
        let tape = Tape::new();
        let f = tape.constant(randn(&mut rng, 6, 64));
        let mut b = Binder::new(&tape, true);
        let views = set.augment(&mut b, f, Mode::Train, &rng.fork("d")).unwrap();
        assert_eq!(views.len(), 5);
        for (fa, za) in views.features.iter().zip(&views.logits) {
            assert_eq!(fa.shape(), vec![6, 64]);
            assert_eq!(za.shape(), vec![6, 7]);
            for r in 0..6 {
                assert!((za.value().row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(views.masks[i], views.masks[j]);
            }
        }
        let gamma = set.bind_gamma(&mut b);
        assert_eq!(gamma.item(), 0.2);
        let params = set.params();
        assert_eq!(b.vars().len(), params.len());
        for (v, p) in b.vars().iter().zip(params) {
            assert_eq!(v.shape(), p.shape());
        }
        let bad = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(set.augment(&mut b, bad, Mode::Train, &rng), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_head_in_eval_reproduces_teacher_feature() {
        let rng = Rng::new(2);
        let mut set = build_view_heads(1, 4, 3, &[0.0], 4.0, 0.2, &rng).unwrap();
        set.heads[0].feature_linear.weight = Tensor::identity(4);
        set.heads[0].bn.eps = 0.0;
        let tape = Tape::new();
        let ft = Tensor::matrix(2, 4, vec![0.1, -2.0, 3.0, 0.0, 1.0, 1.5, -0.3, 2.2]);
        let f = tape.constant(ft.clone());
        let views = set.augment(&mut Binder::new(&tape, false), f, Mode::Eval, &rng).unwrap();
        assert_eq!(*views.features[0].value(), ft);
    }

    #[test]
    fn ensemble_examples() {
        let z = Tensor::matrix(1, 2, vec![0.3, 0.7]);
        let f = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let e = combine_ensemble(&z, &f, &[z.clone(), z.clone()], &[f.clone(), f.clone()], None).unwrap();
        assert!(e.logits.max_abs_diff(&z) < 1e-15);
        assert!(e.features.max_abs_diff(&f) < 1e-15);

        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let b = Tensor::matrix(1, 2, vec![0.0, 1.0]);
        let e = combine_ensemble(&a, &a, std::slice::from_ref(&b), std::slice::from_ref(&b), None).unwrap();
        assert_eq!(e.logits.data(), &[0.5, 0.5]);

        let e = combine_ensemble(&z, &f, &[], &[], None).unwrap();
        assert_eq!(e.logits, z);
        assert_eq!(e.features, f);

        assert!(combine_ensemble(&a, &a, std::slice::from_ref(&b), std::slice::from_ref(&b), Some(&[0.0, 0.0])).is_err());
        let e = combine_ensemble(&a, &a, std::slice::from_ref(&b), std::slice::from_ref(&b), Some(&[3.0, 1.0])).unwrap();
        assert_eq!(e.weights, vec![0.75, 0.25]);
        assert_eq!(e.logits.data(), &[0.75, 0.25]);
    }

    #[test]
    fn ensemble_is_permutation_invariant_and_on_simplex() {
        let mut rng = Rng::new(5);
        let members: Vec<Tensor> = (0..4)
            .map(|_| {
                let d = rng.dirichlet(&[1.0; 5]);
                Tensor::matrix(1, 5, d)
            })
            .collect();
        let f = Tensor::zeros([1, 2]);
        let fs = vec![f.clone(); 3];
        let e1 = combine_ensemble(&members[0], &f, &members[1..], &fs, None).unwrap();
        let perm = vec![members[3].clone(), members[1].clone(), members[2].clone()];
        let e2 = combine_ensemble(&members[0], &f, &perm, &fs, None).unwrap();
        assert!(e1.logits.max_abs_diff(&e2.logits) < 1e-15);
        assert!((e1.logits.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_baseline() {
        let mut rng = Rng::new(6);
        let classifier = Linear::new(3, 4, true, 1.0, &mut rng);
        let ft = randn(&mut rng, 2, 3);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let v = noise_augment_baseline(&mut b, &ft, &classifier, 4.0, 3, 0.0, &rng).unwrap();
        for f in &v.features {
            assert_eq!(*f.value(), ft);
        }
        let v1 = noise_augment_baseline(&mut b, &ft, &classifier, 4.0, 2, 0.1, &Rng::new(7)).unwrap();
        let v2 = noise_augment_baseline(&mut b, &ft, &classifier, 4.0, 2, 0.1, &Rng::new(7)).unwrap();
        assert_eq!(v1.feature_values(), v2.feature_values());
        assert_eq!(v1.logit_values(), v2.logit_values());
        assert!(noise_augment_baseline(&mut b, &ft, &classifier, 4.0, 2, -1.0, &rng).is_err());
    }

    #[test]
    fn noise_views_average_to_teacher() {
        let rng = Rng::new(8);
        let classifier = Linear::new(3, 2, true, 1.0, &mut rng.fork("c"));
        let ft = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let n = 1000;
        let sigma = 0.1;
        let v = noise_augment_baseline(&mut Binder::new(&tape, false), &ft, &classifier, 4.0, n, sigma, &rng).unwrap();
        let mut mean = Tensor::zeros([1, 3]);
        for f in &v.features {
            mean.axpy(1.0 / n as f64, &f.value()).unwrap();
        }
        assert!(mean.max_abs_diff(&ft) <= 3.0 * sigma / (n as f64).sqrt());
    }
}
