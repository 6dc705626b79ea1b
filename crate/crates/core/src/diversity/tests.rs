use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec())
}

fn simplex_members(rng: &mut Rng, m: usize, n: usize, c: usize) -> Vec<Tensor> {
    (0..m)
        .map(|_| {
            let mut t = Tensor::zeros([n, c]);
            for r in 0..n {
                t.row_mut(r).copy_from_slice(&rng.dirichlet(&vec![0.7; c]));
            }
            t
        })
        .collect()
}

#[test]
fn generalized_diversity_examples() {
    let a = row(&[0.2, 0.5, 0.3]);
    assert_eq!(generalized_diversity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
    let d = generalized_diversity(&[row(&[1.0, 0.0]), row(&[0.0, 1.0])]).unwrap();
    assert!((d - 0.5).abs() < 1e-15);
    let mut rng = Rng::new(1);
    let mut ms = simplex_members(&mut rng, 4, 3, 5);
    let before = generalized_diversity(&ms).unwrap();
    ms.reverse();
    ms.swap(0, 2);
    assert!((generalized_diversity(&ms).unwrap() - before).abs() < 1e-14);
    assert!(generalized_diversity(&ms[..1]).is_err());
    // a class where every member is zero is guarded rather than dividing by zero
    assert_eq!(generalized_diversity(&[row(&[1.0, 0.0]), row(&[1.0, 0.0])]).unwrap(), 0.0);
}

#[test]
fn total_variance_examples() {
    let a = row(&[0.2, 0.8]);
    assert_eq!(total_logit_variance(&[a.clone(), a.clone()]).unwrap(), 0.0);
    let v = total_logit_variance(&[row(&[1.0, 0.0]), row(&[0.0, 1.0])]).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
    let mut rng = Rng::new(2);
    let ms = simplex_members(&mut rng, 3, 2, 4);
    let shifted: Vec<Tensor> = ms.iter().map(|t| t.map(|v| v + 3.7)).collect();
    assert!((total_logit_variance(&ms).unwrap() - total_logit_variance(&shifted).unwrap()).abs() < 1e-12);
}

#[test]
fn inter_form_examples() {
    let v = diversity_inter_form(&[row(&[1.0, 0.0]), row(&[0.0, 1.0])]).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
    let a = row(&[0.3, 0.3, 0.4]);
    assert!(diversity_inter_form(&[a.clone(), a.clone()]).unwrap().abs() < 1e-15);
}

#[test]
fn intra_form_examples() {
    // T = 0, Δ = ±e1 ⇒ members ∓e1
    let t = row(&[0.0, 0.0]);
    let ms = [row(&[-1.0, 0.0]), row(&[1.0, 0.0])];
    let f = diversity_intra_form(&t, &ms).unwrap();
    assert!((f.value - 1.0).abs() < 1e-15);
    assert!(f.identity_applicable(1e-12));
    assert!((total_logit_variance(&ms).unwrap() - 1.0).abs() < 1e-15);

    let same = [row(&[-1.0, 2.0]), row(&[-1.0, 2.0])];
    let f = diversity_intra_form(&t, &same).unwrap();
    assert!((f.value + 5.0).abs() < 1e-12);
    assert!(!f.identity_applicable(1e-9));
}

#[test]
fn identities_hold_on_random_sets() {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let m = 2 + rng.below(7);
        let c = 2 + rng.below(19);
        let ms = simplex_members(&mut rng, m, 3, c);
        let var = total_logit_variance(&ms).unwrap();
        assert!((diversity_inter_form(&ms).unwrap() - var).abs() <= 1e-9);
        let teacher = simplex_members(&mut rng, 1, 3, c).remove(0);
        let centred = recenter(&teacher, &ms).unwrap();
        let f = diversity_intra_form(&teacher, &centred).unwrap();
        assert!(f.identity_applicable(1e-9));
        assert!((f.value - total_logit_variance(&centred).unwrap()).abs() <= 1e-9);
    }
}

#[test]
fn diagonal_convention_breaks_the_identity() {
    let mut rng = Rng::new(4);
    let ms = simplex_members(&mut rng, 4, 2, 6);
    let teacher = simplex_members(&mut rng, 1, 2, 6).remove(0);
    let centred = recenter(&teacher, &ms).unwrap();
    let wrong = diversity_intra_form_with_diagonal(&teacher, &centred).unwrap();
    assert!((wrong - total_logit_variance(&centred).unwrap()).abs() > 1e-6);
}

#[test]
fn kl_bound_examples() {
    let y = [0.2, 0.3, 0.5];
    let z = vec![0.1, 0.6, 0.3];
    let b = kl_bound_check(&y, &[z.clone(), z.clone(), z]).unwrap();
    assert!(b.slack.abs() <= 1e-12);
    assert!(!b.clamped);

    let mut rng = Rng::new(5);
    let mut min_slack = f64::INFINITY;
    for trial in 0..1000 {
        let m = 2 + rng.below(5);
        let c = 2 + rng.below(19);
        let y = if trial % 3 == 0 {
            let eps = 1e-6;
            let hot = rng.below(c);
            (0..c).map(|k| if k == hot { 1.0 - eps * (c - 1) as f64 } else { eps }).collect()
        } else {
            rng.dirichlet(&vec![1.0; c]).into_iter().map(|v| v.max(1e-9)).collect::<Vec<_>>()
        };
        let members: Vec<Vec<f64>> = (0..m)
            .map(|_| rng.dirichlet(&vec![0.8; c]).into_iter().map(|v| v.max(1e-9)).collect())
            .collect();
        let b = kl_bound_check(&y, &members).unwrap();
        assert!((b.slack - (b.rhs - b.lhs)).abs() == 0.0);
        min_slack = min_slack.min(b.slack);
    }
    assert!(min_slack >= -1e-12, "{min_slack}");

    let b = kl_bound_check(&[1.0, 0.0], &[vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
    assert!(b.clamped);
    assert!(b.slack >= -1e-12);
    assert!(kl_bound_check(&[1.0], &[vec![1.0]]).is_err());
}

#[test]
fn angle_examples() {
    let t = row(&[0.0, 0.0, 0.0]);
    let a = row(&[1.0, 2.0, 0.0]);
    let s = angle_stats(&t, &[a.clone(), a.clone()]).unwrap();
    assert!(s.mean_inter_deg.abs() < 1e-6);
    let s = angle_stats(&t, &[row(&[1.0, 0.0, 0.0]), row(&[0.0, 1.0, 0.0])]).unwrap();
    assert!((s.mean_inter_deg - 90.0).abs() < 1e-12);
    assert!((s.mean_intra_deg.unwrap() - 90.0).abs() < 1e-12);
    let s = angle_stats(&t, &[row(&[1.0, 0.0, 0.0]), row(&[0.96, 0.28, 0.0])]).unwrap();
    assert!((s.mean_inter_deg - 16.26).abs() < 0.005);
    // every offset is zero ⇒ intra undefined
    let s = angle_stats(&a, &[a.clone(), a.clone()]).unwrap();
    assert_eq!(s.mean_intra_deg, None);
    assert!(angle_stats(&t, &[a]).is_err());
}

#[test]
fn report_fields_are_consistent() {
    let mut rng = Rng::new(6);
    let views = simplex_members(&mut rng, 4, 5, 6);
    let teacher = simplex_members(&mut rng, 1, 5, 6).remove(0);
    let r = diversity_report(&teacher, &views, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(r.bound_slack, r.kl_bound_rhs - r.kl_bound_lhs);
    assert!(r.bound_slack >= -1e-12);
    assert!((r.inter_form - r.raw_variance).abs() <= 1e-9);
    assert!(r.diversity_direct > 0.0);
}

/// Members `mean + t·p_i` with `Σ_i p_i = 0` and each `p_i` summing to zero
/// over classes; diversity must not decrease in `t` while on the simplex.
#[test]
fn diversity_grows_with_perturbation_scale() {
    let mut rng = Rng::new(7);
    for _ in 0..50 {
        let m = 2 + rng.below(5);
        let c = 2 + rng.below(8);
        let mean = rng.dirichlet(&vec![2.0; c]);
        let mut p: Vec<Vec<f64>> = (0..m).map(|_| (0..c).map(|_| rng.normal()).collect()).collect();
        for v in &mut p {
            let s = v.iter().sum::<f64>() / c as f64;
            v.iter_mut().for_each(|x| *x -= s);
        }
        for k in 0..c {
            let s = p.iter().map(|v| v[k]).sum::<f64>() / m as f64;
            p.iter_mut().for_each(|v| v[k] -= s);
        }
        let t_max = p
            .iter()
            .flat_map(|v| v.iter().zip(&mean).filter(|(d, _)| **d < 0.0).map(|(d, mu)| -mu / d))
            .fold(f64::INFINITY, f64::min);
        let mut prev = -1.0;
        for step in 0..=20 {
            let t = t_max * step as f64 / 20.0;
            let members: Vec<Tensor> = p
                .iter()
                .map(|v| row(&mean.iter().zip(v).map(|(mu, d)| (mu + t * d).max(0.0)).collect::<Vec<_>>()))
                .collect();
            let d = generalized_diversity(&members).unwrap();
            assert!(d >= prev - 1e-12, "t={t}: {d} < {prev}");
            prev = d;
        }
    }
}

proptest! {
    #[test]
    fn diversity_nonnegative_and_zero_iff_identical(seed in 0u64..1000, m in 2usize..6, c in 2usize..8) {
        let mut rng = Rng::new(seed);
        let ms = simplex_members(&mut rng, m, 2, c);
        prop_assert!(generalized_diversity(&ms).unwrap() > 0.0);
        let same = vec![ms[0].clone(); m];
        prop_assert_eq!(generalized_diversity(&same).unwrap(), 0.0);
    }

    #[test]
    fn inter_identity_is_unconditional(seed in 0u64..1000, m in 2usize..9, c in 2usize..21) {
        let mut rng = Rng::new(seed);
        // arbitrary real vectors, not only simplex points
        let ms: Vec<Tensor> = (0..m).map(|_| Tensor::matrix(1, c, (0..c).map(|_| rng.normal()).collect())).collect();
        prop_assert!((diversity_inter_form(&ms).unwrap() - total_logit_variance(&ms).unwrap()).abs() <= 1e-9);
    }
}
