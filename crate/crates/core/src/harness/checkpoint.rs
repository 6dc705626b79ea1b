//! Plain-text checkpoints of the teacher, view heads and student.
//!
//! Layout, one item per line:
//!
//! ```text
//! angular-distill-checkpoint
//! format_version 1
//! input_dim <d>
//! num_classes <C>
//! rng_seed <u64>
//! rng_word_pos <u128>
//! config_lines <k>
//! <k lines of TOML>
//! tensor <name> <rank> <dim>...
//! <values separated by spaces>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::augment::{build_view_heads, ViewHeadSet};
use crate::error::{Error, Result};
use crate::nn::{Parameterized, StudentBundle, TeacherBundle};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &str = "angular-distill-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Every model a run may own.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub teacher: TeacherBundle,
    pub heads: Option<ViewHeadSet>,
    pub student: Option<StudentBundle>,
}

impl ModelBundle {
    /// Freshly initialised models with the architecture `cfg` describes.
    pub fn init(cfg: &TrainConfig, input_dim: usize, num_classes: usize, with_heads: bool, with_student: bool) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let teacher = TeacherBundle::new(
            input_dim,
            &cfg.teacher_hidden,
            cfg.teacher_feature_dim,
            num_classes,
            cfg.tau_z,
            &mut root.fork("teacher"),
        )?;
        let heads = if with_heads {
            Some(build_view_heads(
                cfg.n_views,
                cfg.teacher_feature_dim,
                num_classes,
                &cfg.view_dropout_probs(),
                cfg.tau_z,
                cfg.gamma_init,
                &root.fork("heads"),
            )?)
        } else {
            None
        };
        let student = if with_student {
            Some(StudentBundle::new(
                input_dim,
                &cfg.student_hidden,
                cfg.student_feature_dim,
                cfg.teacher_feature_dim,
                num_classes,
                cfg.tau_z,
                &mut root.fork("student"),
            )?)
        } else {
            None
        };
        Ok(ModelBundle { teacher, heads, student })
    }

    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut s: Vec<(String, &Tensor)> = self.teacher.state().into_iter().map(|(n, t)| (format!("teacher.{n}"), t)).collect();
        if let Some(h) = &self.heads {
            s.extend(h.state().into_iter().map(|(n, t)| (format!("heads.{n}"), t)));
        }
        if let Some(st) = &self.student {
            s.extend(st.state().into_iter().map(|(n, t)| (format!("student.{n}"), t)));
        }
        s
    }

    fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut s: Vec<(String, &mut Tensor)> =
            self.teacher.state_mut().into_iter().map(|(n, t)| (format!("teacher.{n}"), t)).collect();
        if let Some(h) = &mut self.heads {
            s.extend(h.state_mut().into_iter().map(|(n, t)| (format!("heads.{n}"), t)));
        }
        if let Some(st) = &mut self.student {
            s.extend(st.state_mut().into_iter().map(|(n, t)| (format!("student.{n}"), t)));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, input_dim: usize, num_classes: usize, models: &ModelBundle, rng: &Rng) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            input_dim,
            num_classes,
            config: cfg.clone(),
            rng_seed: rng.seed(),
            rng_word_pos: rng.word_pos(),
            tensors: models.named_state().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn rng(&self) -> Rng {
        Rng::restore(self.rng_seed, self.rng_word_pos)
    }

    /// Rebuilds the models. Which of heads and student exist is inferred from
    /// the stored tensor names; every expected tensor must be present with
    /// its exact shape.
    pub fn restore(&self) -> Result<ModelBundle> {
        let has = |p: &str| self.tensors.iter().any(|(n, _)| n.starts_with(p));
        let mut models = ModelBundle::init(&self.config, self.input_dim, self.num_classes, has("heads."), has("student."))?;
        let mut slots = models.named_state_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (stored_name, stored)) in slots.iter_mut().zip(&self.tensors) {
            if name != stored_name {
                return Err(Error::Format(format!("expected tensor {name}, found {stored_name}")));
            }
            if slot.shape() != stored.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: stored shape {:?}, model shape {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            **slot = stored.clone();
        }
        drop(slots);
        Ok(models)
    }

    pub fn to_text(&self) -> Result<String> {
        let config = self.config.to_toml()?;
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "format_version {}", self.format_version);
        let _ = writeln!(s, "input_dim {}", self.input_dim);
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        let _ = writeln!(s, "rng_seed {}", self.rng_seed);
        let _ = writeln!(s, "rng_word_pos {}", self.rng_word_pos);
        let lines: Vec<&str> = config.lines().collect();
        let _ = writeln!(s, "config_lines {}", lines.len());
        for l in lines {
            let _ = writeln!(s, "{l}");
        }
        for (name, t) in &self.tensors {
            let _ = write!(s, "tensor {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s.push_str("end\n");
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Format(format!("checkpoint ends before {what}")));
        if next("header")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::Format(format!("expected {key}, found {line:?}")))?;
            value.trim().parse().map_err(|_| Error::Format(format!("bad {key} value {value:?}")))
        }
        let format_version: u32 = field(next("format_version")?, "format_version")?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {format_version}; this build reads version {FORMAT_VERSION}"
            )));
        }
        let input_dim = field(next("input_dim")?, "input_dim")?;
        let num_classes = field(next("num_classes")?, "num_classes")?;
        let rng_seed = field(next("rng_seed")?, "rng_seed")?;
        let rng_word_pos = field(next("rng_word_pos")?, "rng_word_pos")?;
        let k: usize = field(next("config_lines")?, "config_lines")?;
        let mut config = String::new();
        for _ in 0..k {
            config.push_str(next("config")?);
            config.push('\n');
        }
        let config = TrainConfig::from_toml(&config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut tensors = Vec::new();
        loop {
            let line = next("end")?;
            if line == "end" {
                break;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(Error::Format(format!("expected tensor header, found {line:?}")));
            }
            let name = parts.next().ok_or_else(|| Error::Format("tensor without name".into()))?.to_string();
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| Error::Format(format!("tensor {name}: bad shape field {p:?}"))))
                .collect::<Result<_>>()?;
            let (&rank, shape) = dims.split_first().ok_or_else(|| Error::Format(format!("tensor {name}: missing rank")))?;
            if rank != shape.len() {
                return Err(Error::Format(format!("tensor {name}: rank {rank} but {} dims", shape.len())));
            }
            let values: Vec<f64> = next("tensor values")?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Format(format!("tensor {name}: bad value {v:?}"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape.to_vec(), values).map_err(|_| Error::Format(format!("tensor {name}: value count does not match shape {shape:?}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint {
            format_version,
            input_dim,
            num_classes,
            config,
            rng_seed,
            rng_word_pos,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_text()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text)
}
