//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its criterion.
//! The blobs-hard comparison behind criteria 7 to 9 is computed once and shared.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use angular_distill::autodiff::{finite_difference_report, FdCoordinate};
use angular_distill::augment::combine_ensemble;
use angular_distill::data::{batch_iter, load_idx, make_imbalanced, take_fraction, write_idx, Dataset};
use angular_distill::diversity::{
    diversity_inter_form, diversity_intra_form, kl_bound_check, recenter, total_logit_variance,
};
use angular_distill::harness::{
    compare_experiment, load_datasets, pretrain_teacher, run_experiment, Ablation, AugMode, Checkpoint, ComparisonTable,
    CompareRow, FailurePolicy, MemorySink, MetricsWriter, ModelBundle, SgdState, TeacherCache, TrainConfig, warmup_heads,
};
use angular_distill::losses::{
    aug_gt_loss, feature_contrastive_loss, inter_angle_loss, intra_angle_loss, kd_kl_loss, student_ce_loss, Level,
    LOSS_EPS,
};
use angular_distill::nn::{orthogonal_init, Binder, Mode, Parameterized};
use angular_distill::{Rng, Tape, Tensor, Var};

const IDENTITY_TOL: f64 = 1e-9;
const SLACK_TOL: f64 = 1e-12;
const FD_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const ORTHO_TOL: f64 = 1e-8;
const ROUNDTRIP_TOL: f64 = 1e-15;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(n: usize, ok: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let within = limit.is_none_or(|l| elapsed <= l);
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    println!("criterion {n:>2}: {verdict}  ({:.1}s) {detail}", elapsed.as_secs_f64());
    assert!(ok, "criterion {n} failed: {detail}");
    if let Some(l) = limit {
        assert!(within, "criterion {n} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64());
    }
}

fn randn(rng: &mut Rng, r: usize, c: usize, s: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| s * rng.normal()).collect())
}

fn simplex(rng: &mut Rng, n: usize, c: usize, alpha: f64) -> Tensor {
    let mut t = Tensor::zeros([n, c]);
    for r in 0..n {
        t.row_mut(r).copy_from_slice(&rng.dirichlet(&vec![alpha; c]));
    }
    t
}

/// Random simplex members for one identity trial.
fn member_set(rng: &mut Rng) -> Vec<Tensor> {
    let m = 2 + rng.below(7);
    let c = 2 + rng.below(19);
    let n = 1 + rng.below(4);
    (0..m).map(|_| simplex(rng, n, c, 0.7)).collect()
}

#[test]
fn criterion_01_inter_form_identity() {
    let start = Instant::now();
    let root = Rng::new(101);
    let mut worst: f64 = 0.0;
    for t in 0..1000 {
        let members = member_set(&mut root.fork_indexed("trial", t));
        worst = worst.max((diversity_inter_form(&members).unwrap() - total_logit_variance(&members).unwrap()).abs());
    }
    report(1, worst <= IDENTITY_TOL, start.elapsed(), Some(Duration::from_secs(5)), &format!("max deviation {worst:.3e}"));
}

#[test]
fn criterion_02_intra_form_identity() {
    let start = Instant::now();
    let root = Rng::new(102);
    let mut worst: f64 = 0.0;
    for t in 0..1000 {
        let mut rng = root.fork_indexed("trial", t);
        let members = member_set(&mut rng);
        let teacher = simplex(&mut rng, members[0].rows(), members[0].cols(), 1.0);
        let centred = recenter(&teacher, &members).unwrap();
        let intra = diversity_intra_form(&teacher, &centred).unwrap();
        assert!(intra.identity_applicable(1e-12));
        worst = worst.max((intra.value - total_logit_variance(&centred).unwrap()).abs());
    }
    report(2, worst <= IDENTITY_TOL, start.elapsed(), Some(Duration::from_secs(5)), &format!("max deviation {worst:.3e}"));
}

#[test]
fn criterion_03_kl_bound() {
    let start = Instant::now();
    let root = Rng::new(103);
    let (mut min_slack, mut eq_gap) = (f64::INFINITY, 0.0f64);
    let mut near_one_hot = 0;
    for t in 0..1000 {
        let mut rng = root.fork_indexed("trial", t);
        let m = 2 + rng.below(5);
        let c = 2 + rng.below(19);
        let y: Vec<f64> = if t % 3 == 0 {
            near_one_hot += 1;
            let hot = rng.below(c);
            (0..c).map(|k| if k == hot { 1.0 - 1e-6 * (c - 1) as f64 } else { 1e-6 }).collect()
        } else {
            rng.dirichlet(&vec![1.0; c])
        };
        let zs: Vec<Vec<f64>> = (0..m).map(|_| rng.dirichlet(&vec![0.8; c])).collect();
        min_slack = min_slack.min(kl_bound_check(&y, &zs).unwrap().slack);
        eq_gap = eq_gap.max(kl_bound_check(&y, &vec![zs[0].clone(); m]).unwrap().slack.abs());
    }
    let ok = min_slack >= -SLACK_TOL && eq_gap <= SLACK_TOL && near_one_hot > 300;
    report(
        3,
        ok,
        start.elapsed(),
        Some(Duration::from_secs(5)),
        &format!("min slack {min_slack:.3e}, coinciding-member gap {eq_gap:.3e}"),
    );
}

type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> angular_distill::Result<Var<'t>>>;

fn worst_rel(f: &Objective, params: &[Tensor]) -> f64 {
    let report: Vec<FdCoordinate> = finite_difference_report(f, params, FD_STEP).unwrap();
    report.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

fn cos_rows(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `[anchor, gamma, views..]`, with every `γ + s` kept away from 1 so no
/// central difference straddles the clip or the gate.
fn inter_point(rng: &mut Rng, active: bool) -> Vec<Tensor> {
    loop {
        let (b, d, n) = (2 + rng.below(4), 3 + rng.below(5), 2 + rng.below(3));
        let anchor = randn(rng, b, d, 1.0);
        let (gamma, views): (f64, Vec<Tensor>) = if active {
            let vs = (0..n)
                .map(|_| {
                    let mut v = anchor.clone();
                    v.axpy(1.0, &randn(rng, b, d, 0.3)).unwrap();
                    v
                })
                .collect();
            (0.6 + 0.3 * rng.uniform(), vs)
        } else {
            (0.1 + 0.2 * rng.uniform(), (0..n).map(|_| randn(rng, b, d, 1.0)).collect())
        };
        let clear = views
            .iter()
            .all(|v| (0..b).all(|r| (gamma + cos_rows(anchor.row(r), v.row(r)) - 1.0).abs() > 1e-3));
        if clear {
            let mut p = vec![anchor, Tensor::matrix(1, 1, vec![gamma])];
            p.extend(views);
            return p;
        }
    }
}

fn gate_of(p: &[Tensor], tau: f64) -> f64 {
    let tape = Tape::new();
    let v: Vec<Var> = p.iter().map(|t| tape.constant(t.clone())).collect();
    inter_angle_loss(v[0], &v[2..], v[1], tau).unwrap().gate_active_fraction
}

fn normalised(mut t: Tensor) -> Tensor {
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

#[test]
fn criterion_04_gradients() {
    let start = Instant::now();
    let mut rng = Rng::new(104);
    let mut worst: Vec<(&str, f64, usize)> = Vec::new();
    let mut record = |name, err: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => {
            w.1 = w.1.max(err);
            w.2 += 1;
        }
        None => worst.push((name, err, 1)),
    };
    let (mut active, mut inactive) = (0, 0);
    for trial in 0..40 {
        let p = inter_point(&mut rng, trial % 2 == 0);
        let tau = 0.2 + 0.8 * rng.uniform();
        let gate = gate_of(&p, tau);
        active += usize::from(gate > 0.0);
        inactive += usize::from(gate < 1.0);
        let constraint: Objective = Box::new(move |_, v| inter_angle_loss(v[0], &v[2..], v[1], tau)?.constraint.scale(1.0));
        record("inter_constraint", worst_rel(&constraint, &p));
        let total: Objective = Box::new(move |_, v| {
            let l = inter_angle_loss(v[0], &v[2..], v[1], tau)?;
            l.constraint.add(l.diversity)
        });
        record("inter_total", worst_rel(&total, &p));
        if gate > 0.0 {
            let div: Objective = Box::new(move |_, v| inter_angle_loss(v[0], &v[2..], v[1], tau)?.diversity.scale(1.0));
            record("inter_diversity", worst_rel(&div, &p));
        }
    }
    for _ in 0..20 {
        let (b, c) = (2 + rng.below(4), 2 + rng.below(6));
        let n = 2 + rng.below(4);
        let p: Vec<Tensor> = (0..=n).map(|_| randn(&mut rng, b, c, 1.0)).collect();
        let intra: Objective = Box::new(|_, v| intra_angle_loss(v[0], &v[1..], LOSS_EPS));
        record("intra", worst_rel(&intra, &p));

        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let gt_labels = labels.clone();
        let gt: Objective = Box::new(move |_, v| {
            let probs = v.iter().map(|x| x.softmax(4.0)).collect::<angular_distill::Result<Vec<_>>>()?;
            aug_gt_loss(&gt_labels, &probs)
        });
        record("aug_gt", worst_rel(&gt, &p[..3]));

        let target = normalised(simplex(&mut rng, b, c, 1.0));
        let kl: Objective = Box::new(move |_, v| kd_kl_loss(&target, v[0], 4.0));
        record("kd_kl", worst_rel(&kl, &p[..1]));

        let feat_target = randn(&mut rng, b, c, 1.0);
        let tau_feat = 0.2 + 0.8 * rng.uniform();
        let feat: Objective = Box::new(move |_, v| feature_contrastive_loss(&feat_target, v[0], tau_feat));
        record("feat_contrastive", worst_rel(&feat, &p[..1]));

        let ce: Objective = Box::new(move |_, v| student_ce_loss(&labels, v[0]));
        record("student_ce", worst_rel(&ce, &p[..1]));
    }
    let ok = active >= 20
        && inactive >= 20
        && worst.len() == 8
        && worst.iter().all(|&(_, e, n)| e <= FD_REL_TOL && n >= 20);
    let detail = worst.iter().map(|(k, e, n)| format!("{k} {e:.1e}/{n}")).collect::<Vec<_>>().join(", ");
    report(4, ok, start.elapsed(), Some(Duration::from_secs(30)), &detail);
}

#[test]
fn criterion_05_orthogonal_init() {
    let start = Instant::now();
    let mut rng = Rng::new(105);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rows = 1 + rng.below(24);
        let cols = rows + rng.below(24);
        let w = orthogonal_init(rows, cols, &mut rng);
        let g = w.matmul(&w.transpose().unwrap()).unwrap();
        worst = worst.max(g.max_abs_diff(&Tensor::identity(rows)));
    }
    report(5, worst <= ORTHO_TOL, start.elapsed(), None, &format!("max |WWᵀ - I| {worst:.3e}"));
}

struct Comparison {
    table: ComparisonTable,
    elapsed: Duration,
}

fn blobs_hard_comparison() -> &'static Comparison {
    static CELL: OnceLock<Comparison> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = TrainConfig::default();
        let (train, test) = load_datasets(&cfg).unwrap();
        let table = compare_experiment(
            &cfg,
            &[AugMode::None, AugMode::Noise, AugMode::Angular],
            &Ablation::ALL,
            &SEEDS,
            &train,
            &test,
            None,
        )
        .unwrap();
        Comparison {
            table,
            elapsed: start.elapsed(),
        }
    })
}

fn rows(mode: AugMode, ablation: Option<Ablation>) -> Vec<&'static CompareRow> {
    let rows = blobs_hard_comparison().table.select(mode, ablation);
    assert_eq!(rows.len(), SEEDS.len());
    rows
}

fn mean(v: &[&CompareRow]) -> f64 {
    v.iter().map(|r| r.test_acc).sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_angles_grow_during_warmup() {
    let start = Instant::now();
    let base = TrainConfig::default();
    let (train, test) = load_datasets(&base).unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig { seed, ..base.clone() };
        let teacher = pretrain_teacher(&cfg, &train, &test, &mut MemorySink::default()).unwrap();
        let mut heads = ModelBundle::init(&cfg, train.input_dim(), train.num_classes, true, false)
            .unwrap()
            .heads
            .unwrap();
        let w = warmup_heads(&teacher, &mut heads, &cfg, &train, &test, &mut MemorySink::default()).unwrap();
        let (b, a) = (w.before.unwrap(), w.after.unwrap());
        let (bi, ai) = (b.mean_intra_deg.unwrap(), a.mean_intra_deg.unwrap());
        wins += usize::from(a.mean_inter_deg > b.mean_inter_deg && ai > bi);
        detail.push(format!("inter {:.1}->{:.1} intra {bi:.1}->{ai:.1}", b.mean_inter_deg, a.mean_inter_deg));
    }
    report(6, wins >= 4, start.elapsed(), Some(Duration::from_secs(180)), &format!("{wins}/5 seeds; {}", detail.join("; ")));
}

#[test]
fn criterion_07_diversity_ablation() {
    let gt = rows(AugMode::Angular, Some(Ablation::GtOnly));
    let wins = |a: Ablation| {
        rows(AugMode::Angular, Some(a))
            .iter()
            .zip(&gt)
            .filter(|(r, g)| r.seed == g.seed && r.diversity.unwrap() > g.diversity.unwrap())
            .count()
    };
    let (full, inter, intra) = (wins(Ablation::Full), wins(Ablation::NoIntra), wins(Ablation::NoInter));
    let ok = full >= 4 && inter >= 3 && intra >= 3;
    report(
        7,
        ok,
        blobs_hard_comparison().elapsed,
        Some(Duration::from_secs(600)),
        &format!("both > gt-only {full}/5, inter alone {inter}/5, intra alone {intra}/5"),
    );
}

#[test]
fn criterion_08_kd_improvement() {
    let angular = mean(&rows(AugMode::Angular, Some(Ablation::Full)));
    let none = mean(&rows(AugMode::None, None));
    let noise = mean(&rows(AugMode::Noise, None));
    report(
        8,
        angular > none && angular >= noise,
        blobs_hard_comparison().elapsed,
        Some(Duration::from_secs(900)),
        &format!("mean student top-1: angular {angular:.4}, none {none:.4}, noise {noise:.4}"),
    );
}

#[test]
fn criterion_09_ensemble_quality() {
    let full = rows(AugMode::Angular, Some(Ablation::Full));
    let wins = full
        .iter()
        .filter(|r| r.ensemble_test_acc >= r.mean_view_acc.unwrap())
        .count();
    let detail = full
        .iter()
        .map(|r| format!("{:.3} vs {:.3}", r.ensemble_test_acc, r.mean_view_acc.unwrap()))
        .collect::<Vec<_>>()
        .join(", ");
    report(9, wins >= 4, blobs_hard_comparison().elapsed, None, &format!("{wins}/5 seeds; ensemble vs mean view: {detail}"));
}

fn reduction_config() -> TrainConfig {
    TrainConfig {
        seed: 11,
        epochs: 12,
        warmup_epochs: 2,
        teacher_epochs: 10,
        lr_milestones: vec![6, 9],
        level: Level::Logit,
        aug_mode: AugMode::None,
        n_views: 0,
        num_classes: 8,
        input_dim: 10,
        train_per_class: 40,
        test_per_class: 10,
        ..TrainConfig::default()
    }
}

/// Plain distillation: frozen-teacher soft targets, `τ²·KL + CE`, SGD with momentum.
/// Returns per-epoch `(mean loss, mean KL, mean CE)`.
fn plain_kd(cfg: &TrainConfig, teacher: &angular_distill::nn::TeacherBundle, train: &Dataset) -> Vec<(f64, f64, f64)> {
    let root = Rng::new(cfg.seed);
    let mut student = ModelBundle::init(cfg, train.input_dim(), train.num_classes, false, true)
        .unwrap()
        .student
        .unwrap();
    let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.lr_milestones.clone(), cfg.lr_decay);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let erng = root.fork_indexed("distill-epoch", epoch as u64);
        let batches = batch_iter(train, cfg.batch_size, &mut erng.fork("shuffle"), true).unwrap();
        let (mut total, mut kl_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let tape = Tape::new();
            let mut tb = Binder::new(&tape, false);
            let target = teacher.forward(&mut tb, tape.constant(batch.features.clone())).unwrap().probs.value().clone();
            let mut sb = Binder::new(&tape, true);
            let s = student.forward(&mut sb, tape.constant(batch.features.clone())).unwrap();
            let kl = kd_kl_loss(&target, s.logits, cfg.tau_z).unwrap();
            let ce = student_ce_loss(&batch.labels, s.logits).unwrap();
            let loss = kl.add(ce).unwrap();
            tape.backward(loss).unwrap();
            opt.step(student.params_mut(), &sb.grads(), epoch).unwrap();
            total += loss.item();
            kl_sum += kl.item();
            ce_sum += ce.item();
        }
        let n = batches.len() as f64;
        out.push((total / n, kl_sum / n, ce_sum / n));
    }
    out
}

#[test]
fn criterion_10_reduction_to_plain_kd() {
    let start = Instant::now();
    let cfg = reduction_config();
    let (train, test) = load_datasets(&cfg).unwrap();
    let teacher = pretrain_teacher(&cfg, &train, &test, &mut MemorySink::default()).unwrap();
    let mut sink = MemorySink::default();
    run_experiment(&cfg, &teacher, &train, &test, &mut sink, &FailurePolicy::default()).unwrap();
    let harness: Vec<(f64, f64, f64)> = sink
        .rows
        .iter()
        .filter(|r| r.phase == "distill")
        .map(|r| (r.loss, r.loss_terms["kd_kl"], r.loss_terms["student_ce"]))
        .collect();
    let oracle = plain_kd(&cfg, &teacher, &train);
    let identical = harness.len() == cfg.epochs
        && harness
            .iter()
            .zip(&oracle)
            .all(|(h, o)| h.0.to_bits() == o.0.to_bits() && h.1.to_bits() == o.1.to_bits() && h.2.to_bits() == o.2.to_bits());
    report(
        10,
        identical,
        start.elapsed(),
        None,
        &format!("{} epochs, first loss {:.6} vs {:.6}", harness.len(), harness[0].0, oracle[0].0),
    );
}

fn determinism_config() -> TrainConfig {
    TrainConfig {
        seed: 12,
        epochs: 6,
        warmup_epochs: 2,
        teacher_epochs: 4,
        lr_milestones: vec![4],
        batch_size: 32,
        n_views: 3,
        num_classes: 5,
        input_dim: 8,
        train_per_class: 30,
        test_per_class: 10,
        teacher_hidden: vec![24],
        teacher_feature_dim: 12,
        student_hidden: vec![12],
        student_feature_dim: 8,
        ..TrainConfig::default()
    }
}

fn run_to_file(cfg: &TrainConfig, path: &std::path::Path) -> (ModelBundle, Vec<u8>) {
    let (train, test) = load_datasets(cfg).unwrap();
    let mut w = MetricsWriter::create(path).unwrap();
    let teacher = pretrain_teacher(cfg, &train, &test, &mut w).unwrap();
    let r = run_experiment(cfg, &teacher, &train, &test, &mut w, &FailurePolicy::default()).unwrap();
    drop(w);
    let models = ModelBundle {
        teacher,
        heads: r.heads,
        student: Some(r.student),
    };
    (models, std::fs::read(path).unwrap())
}

#[test]
fn criterion_11_determinism_and_roundtrips() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = determinism_config();
    let (mut models, first) = run_to_file(&cfg, &dir.path().join("a.jsonl"));
    let (_, second) = run_to_file(&cfg, &dir.path().join("b.jsonl"));
    let metrics_identical = !first.is_empty() && first == second;

    let mut rng = Rng::new(111);
    let (n, rows, cols) = (17, 3, 4);
    let pixels = Tensor::matrix(n, rows * cols, (0..n * rows * cols).map(|_| rng.below(256) as f64 / 255.0).collect());
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(&img, &lab, &pixels, rows, cols, &labels).unwrap();
    let loaded = load_idx(&img, &lab).unwrap();
    let idx_exact = loaded.features == pixels && loaded.labels == labels;

    let (train, _) = load_datasets(&cfg).unwrap();
    let ckpt = Checkpoint::capture(&cfg, train.input_dim(), train.num_classes, &models, &Rng::new(cfg.seed));
    let mut restored = Checkpoint::from_text(&ckpt.to_text().unwrap()).unwrap().restore().unwrap();
    let x = &train.features;
    let forward = |m: &mut ModelBundle| -> Vec<Tensor> {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let t = m.teacher.forward(&mut b, tape.constant(x.clone())).unwrap();
        let s = m.student.as_ref().unwrap().forward(&mut b, tape.constant(x.clone())).unwrap();
        let mut outs = vec![t.logits.value().clone(), s.logits.value().clone(), s.projected.value().clone()];
        let cache = TeacherCache::compute(&m.teacher, x).unwrap();
        let heads = m.heads.as_mut().unwrap();
        let v = heads.augment(&mut b, tape.constant(cache.features.clone()), Mode::Eval, &Rng::new(0)).unwrap();
        outs.extend(v.logit_values());
        outs.extend(v.feature_values());
        let ens = combine_ensemble(&cache.probs, &cache.features, &v.logit_values(), &v.feature_values(), None).unwrap();
        outs.push(ens.logits);
        outs
    };
    let worst = forward(&mut models)
        .iter()
        .zip(forward(&mut restored))
        .map(|(a, b)| a.max_abs_diff(&b))
        .fold(0.0, f64::max);
    assert_eq!(models.teacher.checksum(), restored.teacher.checksum());

    report(
        11,
        metrics_identical && idx_exact && worst <= ROUNDTRIP_TOL,
        start.elapsed(),
        None,
        &format!("metrics identical {metrics_identical}, idx exact {idx_exact}, checkpoint forward deviation {worst:.1e}"),
    );
}

/// Samples whose single feature is their original position.
fn indexed_dataset(labels: Vec<usize>, classes: usize) -> Dataset {
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()), labels, classes, "indexed").unwrap()
}

fn positions(d: &Dataset) -> Vec<usize> {
    d.features.data().iter().map(|&v| v as usize).collect()
}

#[test]
fn criterion_12_protocol_fidelity() {
    let start = Instant::now();
    let mut rng = Rng::new(112);
    // 4 classes, 120 samples each, in a scrambled but fixed order
    let mut labels: Vec<usize> = (0..480).map(|i| i % 4).collect();
    rng.shuffle(&mut labels);
    let d = indexed_dataset(labels.clone(), 4);
    let capped: BTreeSet<usize> = [1, 3].into_iter().collect();
    let imbalanced = make_imbalanced(&d, &capped, 50).unwrap();
    let mut expected = Vec::new();
    let mut seen = [0usize; 4];
    for (i, &l) in labels.iter().enumerate() {
        seen[l] += 1;
        if !capped.contains(&l) || seen[l] <= 50 {
            expected.push(i);
        }
    }
    let counts = imbalanced.class_counts();
    let imbalance_ok = positions(&imbalanced) == expected && counts == vec![120, 50, 120, 50];

    let small = indexed_dataset((0..400).map(|i| (i * 3) % 7).collect(), 7);
    let quarter = take_fraction(&small, 0.25).unwrap();
    let fraction_ok = positions(&quarter) == (0..100).collect::<Vec<_>>()
        && quarter.labels == small.labels[..100]
        && positions(&take_fraction(&d, 0.25).unwrap()) == (0..120).collect::<Vec<_>>();

    report(
        12,
        imbalance_ok && fraction_ok,
        start.elapsed(),
        None,
        &format!("imbalanced counts {counts:?}, quarter keeps {} of {}", quarter.len(), small.len()),
    );
}
