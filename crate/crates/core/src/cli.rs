//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input (usage, config, parameters),
//! 2 runtime failure (numeric divergence, IO while writing, failed checks).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{write_idx, Dataset};
use crate::diversity::{
    diversity_inter_form, diversity_intra_form, diversity_intra_form_with_diagonal, diversity_report, generalized_diversity,
    kl_bound_check, recenter, total_logit_variance,
};
use crate::error::Error;
use crate::harness::{
    self, compare_experiment, load_checkpoint, load_datasets, pretrain_teacher, run_experiment, save_checkpoint, Ablation,
    AugMode, Checkpoint, FailurePolicy, MetricsWriter, ModelBundle, TeacherCache, TrainConfig,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "angular-distill", version, about = "View-augmented distillation with angular diversity losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory for all outputs; created if missing.
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntraConvention {
    /// Off-diagonal pairs only.
    Pairs,
    /// Also counts each offset with itself; breaks the identity.
    Diagonal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured train/test split as CSV (and optionally IDX).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write min-max scaled IDX files.
        #[arg(long)]
        idx: bool,
    },
    /// Pretrain a teacher and save its checkpoint.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Warm up view heads and distil a student.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint; a teacher is pretrained when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Check the diversity identities and the ensemble loss bound on random draws.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = IntraConvention::Pairs)]
        intra_convention: IntraConvention,
    },
    /// Run several modes over several seeds and tabulate the results.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "none,noise,angular")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "full")]
        ablations: Vec<String>,
    },
    /// Diversity report of a saved run on its test set.
    ReportDiversity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Label(_) | Error::BatchSize(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let base = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Validation(format!("config file {} not found", path.display())));
            }
            TrainConfig::load(path).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

fn dataset_csv(d: &Dataset) -> String {
    let mut s = String::from("label");
    for j in 0..d.input_dim() {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (r, l) in d.labels.iter().enumerate() {
        let _ = write!(s, "{l}");
        for v in d.features.row(r) {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

fn min_max_scaled(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.map(|v| (v - lo) / span)
}

fn dispatch(cmd: Command) -> CliResult<String> {
    match cmd {
        Command::GenData { cfg, idx } => {
            let c = resolve_config(&cfg)?;
            prepare_dir(&cfg.output_dir)?;
            let (train, test) = load_datasets(&c)?;
            write_file(&cfg.output_dir.join("config.toml"), &c.to_toml()?)?;
            write_file(&cfg.output_dir.join("train.csv"), &dataset_csv(&train))?;
            write_file(&cfg.output_dir.join("test.csv"), &dataset_csv(&test))?;
            if idx {
                for (name, d) in [("train", &train), ("test", &test)] {
                    write_idx(
                        &cfg.output_dir.join(format!("{name}-images.idx")),
                        &cfg.output_dir.join(format!("{name}-labels.idx")),
                        &min_max_scaled(&d.features),
                        1,
                        d.input_dim(),
                        &d.labels,
                    )?;
                }
            }
            Ok(format!("wrote {} train and {} test samples to {}", train.len(), test.len(), cfg.output_dir.display()))
        }
        Command::TrainTeacher { cfg } => {
            let c = resolve_config(&cfg)?;
            prepare_dir(&cfg.output_dir)?;
            let (train, test) = load_datasets(&c)?;
            write_file(&cfg.output_dir.join("config.toml"), &c.to_toml()?)?;
            let mut sink = MetricsWriter::create(&cfg.output_dir.join("metrics_teacher.jsonl"))?;
            let teacher = pretrain_teacher(&c, &train, &test, &mut sink)?;
            let models = ModelBundle {
                teacher,
                heads: None,
                student: None,
            };
            let ckpt = Checkpoint::capture(&c, train.input_dim(), train.num_classes, &models, &Rng::new(c.seed));
            save_checkpoint(&ckpt, &cfg.output_dir.join("teacher.ckpt"))?;
            let last = sink.rows.last().and_then(|r| r.test_acc).unwrap_or(f64::NAN);
            Ok(format!("teacher test accuracy {last:.4}"))
        }
        Command::Distill { cfg, teacher } => {
            let c = resolve_config(&cfg)?;
            prepare_dir(&cfg.output_dir)?;
            let (train, test) = load_datasets(&c)?;
            write_file(&cfg.output_dir.join("config.toml"), &c.to_toml()?)?;
            let mut sink = MetricsWriter::create(&cfg.output_dir.join("metrics.jsonl"))?;
            let teacher = match teacher {
                Some(path) => {
                    let ckpt = load_checkpoint(&path).map_err(|e| CliError::Validation(e.to_string()))?;
                    if ckpt.input_dim != train.input_dim() || ckpt.num_classes != train.num_classes {
                        return Err(CliError::Validation(format!(
                            "teacher checkpoint expects {} inputs and {} classes, data has {} and {}",
                            ckpt.input_dim,
                            ckpt.num_classes,
                            train.input_dim(),
                            train.num_classes
                        )));
                    }
                    ckpt.restore()?.teacher
                }
                None => pretrain_teacher(&c, &train, &test, &mut sink)?,
            };
            let failure = FailurePolicy {
                checkpoint_path: Some(cfg.output_dir.join("last_good.ckpt")),
            };
            let r = run_experiment(&c, &teacher, &train, &test, &mut sink, &failure)?;
            let models = ModelBundle {
                teacher,
                heads: r.heads.clone(),
                student: Some(r.student.clone()),
            };
            let ckpt = Checkpoint::capture(&c, train.input_dim(), train.num_classes, &models, &Rng::new(c.seed));
            save_checkpoint(&ckpt, &cfg.output_dir.join("final.ckpt"))?;
            #[derive(Serialize)]
            struct Summary<'a> {
                aug_mode: &'a str,
                summary: &'a harness::EvalSummary,
                warmup: &'a Option<harness::WarmupReport>,
                final_gate_fraction: Option<f64>,
            }
            write_json(
                &cfg.output_dir.join("summary.json"),
                &Summary {
                    aug_mode: c.aug_mode.as_str(),
                    summary: &r.summary,
                    warmup: &r.warmup,
                    final_gate_fraction: r.final_gate_fraction,
                },
            )?;
            Ok(format!(
                "student test accuracy {:.4}, ensemble {:.4}",
                r.summary.student_test_acc, r.summary.ensemble_test_acc
            ))
        }
        Command::VerifyTheory {
            trials,
            seed,
            output_dir,
            intra_convention,
        } => {
            if trials == 0 {
                return Err(CliError::Validation("trials must be at least 1".into()));
            }
            prepare_dir(&output_dir)?;
            let report = verify_theory(trials, seed, intra_convention)?;
            write_json(&output_dir.join("theory.json"), &report)?;
            if report.passed {
                Ok(format!(
                    "all checks passed: max identity deviation {:.3e}, min bound slack {:.3e}",
                    report.max_identity_a_deviation.max(report.max_identity_b_deviation),
                    report.min_bound_slack
                ))
            } else {
                Err(CliError::Runtime(format!("theory checks failed: {}", report.failures.join("; "))))
            }
        }
        Command::Compare {
            cfg,
            seeds,
            modes,
            ablations,
        } => {
            let c = resolve_config(&cfg)?;
            let modes = modes.iter().map(|m| m.parse::<AugMode>()).collect::<Result<Vec<_>, _>>()?;
            let ablations = ablations.iter().map(|a| a.parse::<Ablation>()).collect::<Result<Vec<_>, _>>()?;
            prepare_dir(&cfg.output_dir)?;
            let (train, test) = load_datasets(&c)?;
            write_file(&cfg.output_dir.join("config.toml"), &c.to_toml()?)?;
            let table = compare_experiment(&c, &modes, &ablations, &seeds, &train, &test, Some(&cfg.output_dir))?;
            write_file(&cfg.output_dir.join("compare.csv"), &table.to_csv())?;
            let summary = table.summary();
            write_json(&cfg.output_dir.join("summary.json"), &summary)?;
            let mut out = String::new();
            for s in &summary {
                let _ = writeln!(
                    out,
                    "{:<8} {:<9} acc {:.4} ± {:.4}  diversity {}",
                    s.mode.as_str(),
                    s.ablation.map_or("-", Ablation::as_str),
                    s.acc_mean,
                    s.acc_std,
                    s.diversity_mean.map_or("-".to_string(), |d| format!("{d:.5}"))
                );
            }
            Ok(out.trim_end().to_string())
        }
        Command::ReportDiversity { checkpoint, output_dir } => {
            let ckpt = load_checkpoint(&checkpoint).map_err(|e| CliError::Validation(e.to_string()))?;
            let cfg = &ckpt.config;
            let mut models = ckpt.restore()?;
            let (_, test) = load_datasets(cfg)?;
            let cache = TeacherCache::compute(&models.teacher, &test.features)?;
            let views = match (cfg.aug_mode, models.heads.as_mut()) {
                (AugMode::Angular, Some(h)) => harness::eval_views(h, &cache)?.0,
                (AugMode::Noise, _) => {
                    let tape = crate::autodiff::Tape::new();
                    let mut b = crate::nn::Binder::new(&tape, false);
                    crate::augment::noise_augment_baseline(
                        &mut b,
                        &cache.features,
                        &models.teacher.classifier,
                        cfg.tau_z,
                        cfg.n_views,
                        cfg.noise_sigma,
                        &Rng::new(cfg.seed).fork("eval-noise"),
                    )?
                    .logit_values()
                }
                _ => Vec::new(),
            };
            if views.len() < 2 {
                return Err(CliError::Validation("diversity needs a run with at least two views".into()));
            }
            prepare_dir(&output_dir)?;
            let report = diversity_report(&cache.probs, &views, &test.labels)?;
            write_json(&output_dir.join("diversity.json"), &report)?;
            Ok(format!("diversity {:.6}, bound slack {:.3e}", report.diversity_direct, report.bound_slack))
        }
    }
}

/// Outcome of [`verify_theory`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryReport {
    pub trials: usize,
    pub seed: u64,
    pub intra_convention: String,
    pub max_identity_a_deviation: f64,
    pub max_identity_b_deviation: f64,
    pub min_bound_slack: f64,
    pub max_equal_members_gap: f64,
    pub monotone_violations: usize,
    pub passed: bool,
    pub failures: Vec<String>,
}

pub const IDENTITY_TOL: f64 = 1e-9;
pub const SLACK_TOL: f64 = 1e-12;

fn simplex_tensor(rng: &mut Rng, n: usize, c: usize, alpha: f64) -> Tensor {
    let mut t = Tensor::zeros([n, c]);
    for r in 0..n {
        t.row_mut(r).copy_from_slice(&rng.dirichlet(&vec![alpha; c]));
    }
    t
}

/// Random checks of both variance identities, the ensemble KL bound
/// (including near-one-hot targets and coinciding members) and the monotone
/// link between perturbation scale and diversity.
pub fn verify_theory(trials: usize, seed: u64, convention: IntraConvention) -> crate::error::Result<TheoryReport> {
    let root = Rng::new(seed);
    let (mut dev_a, mut dev_b, mut min_slack, mut eq_gap, mut violations) = (0.0f64, 0.0f64, f64::INFINITY, 0.0f64, 0);
    for t in 0..trials {
        let mut rng = root.fork_indexed("trial", t as u64);
        let m = 2 + rng.below(7);
        let c = 2 + rng.below(19);
        let n = 1 + rng.below(4);
        let members: Vec<Tensor> = (0..m).map(|_| simplex_tensor(&mut rng, n, c, 0.7)).collect();
        dev_a = dev_a.max((diversity_inter_form(&members)? - total_logit_variance(&members)?).abs());

        let teacher = simplex_tensor(&mut rng, n, c, 1.0);
        let centred = recenter(&teacher, &members)?;
        let intra = match convention {
            IntraConvention::Pairs => diversity_intra_form(&teacher, &centred)?.value,
            IntraConvention::Diagonal => diversity_intra_form_with_diagonal(&teacher, &centred)?,
        };
        dev_b = dev_b.max((intra - total_logit_variance(&centred)?).abs());

        let y: Vec<f64> = if t % 3 == 0 {
            let hot = rng.below(c);
            (0..c).map(|k| if k == hot { 1.0 - 1e-6 * (c - 1) as f64 } else { 1e-6 }).collect()
        } else {
            rng.dirichlet(&vec![1.0; c]).into_iter().map(|v| v.max(1e-9)).collect()
        };
        let zs: Vec<Vec<f64>> = (0..m).map(|_| rng.dirichlet(&vec![0.8; c]).into_iter().map(|v| v.max(1e-9)).collect()).collect();
        min_slack = min_slack.min(kl_bound_check(&y, &zs)?.slack);
        let same = vec![zs[0].clone(); m];
        eq_gap = eq_gap.max(kl_bound_check(&y, &same)?.slack.abs());

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
        for step in 0..=10 {
            let s = t_max * step as f64 / 10.0;
            let zs: Vec<Tensor> = p
                .iter()
                .map(|v| Tensor::matrix(1, c, mean.iter().zip(v).map(|(mu, d)| (mu + s * d).max(0.0)).collect()))
                .collect();
            let d = generalized_diversity(&zs)?;
            if d < prev - 1e-12 {
                violations += 1;
            }
            prev = d;
        }
    }
    let mut failures = Vec::new();
    if dev_a > IDENTITY_TOL {
        failures.push(format!("inter-form identity deviation {dev_a:.3e}"));
    }
    if dev_b > IDENTITY_TOL {
        failures.push(format!("intra-form identity deviation {dev_b:.3e}"));
    }
    if min_slack < -SLACK_TOL {
        failures.push(format!("bound slack {min_slack:.3e}"));
    }
    if eq_gap > SLACK_TOL {
        failures.push(format!("coinciding-member bound gap {eq_gap:.3e}"));
    }
    if violations > 0 {
        failures.push(format!("{violations} monotone-link violations"));
    }
    Ok(TheoryReport {
        trials,
        seed,
        intra_convention: match convention {
            IntraConvention::Pairs => "pairs".into(),
            IntraConvention::Diagonal => "diagonal".into(),
        },
        max_identity_a_deviation: dev_a,
        max_identity_b_deviation: dev_b,
        min_bound_slack: min_slack,
        max_equal_members_gap: eq_gap,
        monotone_violations: violations,
        passed: failures.is_empty(),
        failures,
    })
}
