//! Layers and the teacher/student MLP models.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Train or eval behaviour for dropout and batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Places model tensors on a tape, in a fixed order, and remembers the handles.
///
/// With `trainable = false` the tensors become constants, which is how the
/// frozen teacher is evaluated.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    vars: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, t: &Tensor) -> Var<'t> {
        let v = if self.trainable {
            self.tape.leaf(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients of every bound tensor, in binding order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(|&v| self.tape.grad(v)).collect()
    }
}

/// Anything holding trainable tensors plus persisted buffers.
///
/// `params` lists tensors in exactly the order the forward pass binds them.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Parameters and buffers under stable names, for checkpoints.
    fn state(&self) -> Vec<(String, &Tensor)>;
    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Order-sensitive fingerprint of all state, used by the frozen-model checks.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.state() {
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn prefixed_mut<'a>(prefix: &str, items: Vec<(String, &'a mut Tensor)>) -> Vec<(String, &'a mut Tensor)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Semi-orthogonal `rows × cols` matrix from the QR factorisation of a Gaussian draw.
///
/// The signs of `R`'s diagonal are folded into `Q` so the result is uniformly
/// distributed. Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::from_fn(m, n, |_, _| rng.normal());
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let w = if rows >= cols { q } else { q.transpose() };
    Tensor::matrix(rows, cols, (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect())
}

/// Affine map `x Wᵀ + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Orthogonally initialised weight scaled by `gain`; zero bias when requested.
    pub fn new(input: usize, output: usize, bias: bool, gain: f64, rng: &mut Rng) -> Self {
        let weight = orthogonal_init(output, input, rng).map(|v| v * gain);
        Linear {
            weight,
            bias: bias.then(|| Tensor::zeros([1, output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.bind(&self.weight);
        let y = x.matmul(w.t()?)?;
        match &self.bias {
            Some(bias) => y.bcast_add(b.bind(bias)),
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}

/// Batch normalisation with learnable scale/shift and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            scale: Tensor::ones([1, dim]),
            shift: Tensor::zeros([1, dim]),
            running_mean: Tensor::zeros([1, dim]),
            running_var: Tensor::ones([1, dim]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Train mode normalises by batch statistics (divisor `B`) and updates the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward<'t>(&mut self, b: &mut Binder<'t>, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let scale = b.bind(&self.scale);
        let shift = b.bind(&self.shift);
        match mode {
            Mode::Train => {
                let rows = x.value().rows();
                if rows < 2 {
                    return Err(Error::BatchSize(format!(
                        "batch norm in train mode needs at least 2 rows, got {rows}"
                    )));
                }
                let (y, mean, var) = x.batch_norm(scale, shift, self.eps)?;
                let m = self.momentum;
                for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let tape = b.tape();
                let neg_mean = tape.constant(self.running_mean.map(|v| -v));
                let inv_std = tape.constant(self.running_var.map(|v| 1.0 / (v + self.eps).sqrt()));
                x.bcast_add(neg_mean)?
                    .bcast_mul(inv_std)?
                    .bcast_mul(scale)?
                    .bcast_add(shift)
            }
        }
    }
}

impl Parameterized for BatchNormState {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.scale, &mut self.shift]
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("scale".into(), &self.scale),
            ("shift".into(), &self.shift),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("scale".into(), &mut self.scale),
            ("shift".into(), &mut self.shift),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

/// Inverted dropout. Returns the output and the 0/1 keep mask.
pub fn dropout_forward<'t>(x: Var<'t>, p: f64, rng: &mut Rng, mode: Mode) -> Result<(Var<'t>, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let shape = x.shape();
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x, Tensor::ones(shape)));
    }
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.bernoulli(1.0 - p) { 1.0 } else { 0.0 };
    }
    let scaled = mask.map(|m| m / (1.0 - p));
    let y = x.mul(x.tape().constant(scaled))?;
    Ok((y, mask))
}

/// Stack of `Linear + relu` stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`; He-style gain √2 on each orthogonal weight.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], true, 2f64.sqrt(), &mut rng.fork_indexed("layer", i as u64)))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let width = x.value().cols();
        if width != self.input_dim() {
            return Err(Error::shape("mlp", &[width], &[self.input_dim()]));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(b, h)?.relu()?;
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Parameterized::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Parameterized::params_mut).collect()
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.state()))
            .collect()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&format!("layer{i}"), l.state_mut()))
            .collect()
    }
}

/// Teacher: MLP feature extractor plus linear classifier with softened output.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBundle {
    pub extractor: Mlp,
    pub classifier: Linear,
    pub logit_temperature: f64,
}

/// Forward results of a teacher or student.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput<'t> {
    pub features: Var<'t>,
    /// Pre-softmax classifier output.
    pub logits: Var<'t>,
    /// `softmax(logits / τ)`.
    pub probs: Var<'t>,
}

impl TeacherBundle {
    pub fn new(input_dim: usize, hidden: &[usize], feature_dim: usize, num_classes: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::param(format!("logit temperature must be positive, got {tau}")));
        }
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(feature_dim))
            .collect();
        Ok(TeacherBundle {
            extractor: Mlp::new(&dims, &mut rng.fork("extractor")),
            classifier: Linear::new(feature_dim, num_classes, true, 1.0, &mut rng.fork("classifier")),
            logit_temperature: tau,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t>, x: Var<'t>) -> Result<ModelOutput<'t>> {
        let features = self.extractor.forward(b, x)?;
        let logits = self.classifier.forward(b, features)?;
        let probs = logits.softmax(self.logit_temperature)?;
        Ok(ModelOutput { features, logits, probs })
    }
}

impl Parameterized for TeacherBundle {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.classifier.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut s = prefixed("extractor", self.extractor.state());
        s.extend(prefixed("classifier", self.classifier.state()));
        s
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut s = prefixed_mut("extractor", self.extractor.state_mut());
        s.extend(prefixed_mut("classifier", self.classifier.state_mut()));
        s
    }
}

/// Student: same layout as the teacher plus a projection into teacher feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBundle {
    pub base: TeacherBundle,
    pub projection: Linear,
}

/// Student forward results, including projected features.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput<'t> {
    pub features: Var<'t>,
    pub projected: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

impl StudentBundle {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        teacher_feature_dim: usize,
        num_classes: usize,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(StudentBundle {
            base: TeacherBundle::new(input_dim, hidden, feature_dim, num_classes, tau, rng)?,
            projection: Linear::new(feature_dim, teacher_feature_dim, true, 1.0, &mut rng.fork("projection")),
        })
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t>, x: Var<'t>) -> Result<StudentOutput<'t>> {
        let out = self.base.forward(b, x)?;
        let projected = self.projection.forward(b, out.features)?;
        Ok(StudentOutput {
            features: out.features,
            projected,
            logits: out.logits,
            probs: out.probs,
        })
    }
}

impl Parameterized for StudentBundle {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.base.params();
        p.extend(self.projection.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.base.params_mut();
        p.extend(self.projection.params_mut());
        p
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut s = self.base.state();
        s.extend(prefixed("projection", self.projection.state()));
        s
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut s = self.base.state_mut();
        s.extend(prefixed_mut("projection", self.projection.state_mut()));
        s
    }
}
