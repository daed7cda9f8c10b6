//! Desk-scale architectures and their parameter sets.
//!
//! Two architectures are provided: a two-hidden-layer `mlp` and `conv3s`, a
//! three-block convolutional net (conv → [norm] → relu → 2×2 max-pool) whose
//! last feature map is globally average pooled into a linear head. Because of
//! the pooling, `conv3s` parameter shapes do not depend on the input's spatial
//! size, which is what makes cross-dataset ticket transfer possible.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Config(String),
    #[error("parameter set has no initial snapshot")]
    MissingSnapshot,
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Mlp,
    Conv3s,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Conv3s => "conv3s",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv3s" => Ok(Arch::Conv3s),
            other => Err(ModelError::Config(format!("unsupported architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    None,
    Batch,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::Batch => "batch",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Norm::None),
            "batch" => Ok(Norm::Batch),
            other => Err(ModelError::Config(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Hidden widths (mlp) or conv channel counts (conv3s).
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub norm: Norm,
}

impl ModelSpec {
    pub fn mlp(input: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            widths: vec![256, 128],
            num_classes,
            input,
            norm: Norm::None,
        }
    }

    pub fn conv3s(input: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: Arch::Conv3s,
            widths: vec![16, 32, 64],
            num_classes,
            input,
            norm: Norm::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::Config(format!(
                "widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        if self.input.contains(&0) {
            return Err(ModelError::Config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        if self.arch == Arch::Conv3s {
            let min = 1usize << self.widths.len();
            if self.input[1] < min || self.input[2] < min {
                return Err(ModelError::Config(format!(
                    "conv3s with {} blocks needs spatial size >= {min}, got {}x{}",
                    self.widths.len(),
                    self.input[1],
                    self.input[2]
                )));
            }
        }
        Ok(())
    }

    /// Width of the features entering the head.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Conv,
    Linear,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::Conv | ParamKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Part of the output layer.
    pub head: bool,
    pub value: Tensor,
}

/// Named model parameters θ together with the frozen snapshot θ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    initial: Option<Vec<Tensor>>,
}

impl ParameterSet {
    /// A set without an initial snapshot, e.g. freshly loaded from disk.
    pub fn new(params: Vec<Param>) -> Self {
        Self { params, initial: None }
    }

    /// Captures the current values as θ₀.
    pub fn with_snapshot(mut self) -> Self {
        self.initial = Some(self.params.iter().map(|p| p.value.clone()).collect());
        self
    }

    pub fn from_parts(params: Vec<Param>, initial: Option<Vec<Tensor>>) -> Result<Self> {
        if let Some(init) = &initial {
            let aligned = init.len() == params.len()
                && init.iter().zip(&params).all(|(t, p)| t.shape() == p.value.shape());
            if !aligned {
                return Err(ModelError::Config("snapshot does not align with parameters".into()));
            }
        }
        Ok(Self { params, initial })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn named_tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|p| (p.name.as_str(), &mut p.value))
    }

    pub fn initial(&self) -> Option<&[Tensor]> {
        self.initial.as_deref()
    }

    pub fn has_snapshot(&self) -> bool {
        self.initial.is_some()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.params
            .iter_mut()
            .for_each(|p| p.value.set_requires_grad(requires_grad));
    }

    /// Resets every tensor to θ₀.
    pub fn reset_to_initial(&mut self) -> Result<()> {
        let init = self.initial.as_ref().ok_or(ModelError::MissingSnapshot)?;
        for (p, t) in self.params.iter_mut().zip(init) {
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Overwrites a tensor's value and its θ₀ entry.
    pub fn replace(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = &mut self.params[index];
        if let Some(init) = &mut self.initial {
            init[index] = value.clone();
        }
        let requires_grad = slot.value.requires_grad();
        slot.value = value.with_requires_grad(requires_grad);
        Ok(())
    }

    fn push(&mut self, name: String, kind: ParamKind, head: bool, value: Tensor) {
        self.params.push(Param { name, kind, head, value });
    }
}

pub(crate) fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

const HEAD_STREAM: u64 = 0x4845_4144;

/// A model spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParameterSet,
}

/// Output of [`Model::forward`]: logits plus the tape handles of every
/// parameter, in [`ParameterSet`] order.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Model {
    /// Builds a Xavier-uniform initialized model; biases start at zero and
    /// norm scales at one. θ₀ is captured before returning.
    ///
    /// Body tensors are drawn first from the seed's main stream and the head
    /// from a separate stream, so the body does not depend on `num_classes`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new(Vec::new());
        let [c_in, h, w] = spec.input;
        match spec.arch {
            Arch::Conv3s => {
                let mut c = c_in;
                for (i, &f) in spec.widths.iter().enumerate() {
                    let k = 3;
                    params.push(
                        format!("conv{}.weight", i + 1),
                        ParamKind::Conv,
                        false,
                        xavier(&mut rng, &[f, c, k, k], c * k * k, f * k * k),
                    );
                    params.push(format!("conv{}.bias", i + 1), ParamKind::Bias, false, Tensor::zeros(&[f]));
                    if spec.norm == Norm::Batch {
                        params.push(format!("bn{}.gamma", i + 1), ParamKind::Norm, false, Tensor::full(&[f], 1.0));
                        params.push(format!("bn{}.beta", i + 1), ParamKind::Norm, false, Tensor::zeros(&[f]));
                    }
                    c = f;
                }
            }
            Arch::Mlp => {
                let mut d = c_in * h * w;
                for (i, &f) in spec.widths.iter().enumerate() {
                    params.push(
                        format!("fc{}.weight", i + 1),
                        ParamKind::Linear,
                        false,
                        xavier(&mut rng, &[d, f], d, f),
                    );
                    params.push(format!("fc{}.bias", i + 1), ParamKind::Bias, false, Tensor::zeros(&[f]));
                    if spec.norm == Norm::Batch {
                        params.push(format!("bn{}.gamma", i + 1), ParamKind::Norm, false, Tensor::full(&[f], 1.0));
                        params.push(format!("bn{}.beta", i + 1), ParamKind::Norm, false, Tensor::zeros(&[f]));
                    }
                    d = f;
                }
            }
        }
        let (hw, hb) = head_tensors(spec.feature_dim(), spec.num_classes, seed);
        params.push("head.weight".into(), ParamKind::Linear, true, hw);
        params.push("head.bias".into(), ParamKind::Bias, true, hb);
        let mut params = params.with_snapshot();
        params.set_requires_grad(true);
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn from_parts(spec: ModelSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        let reference = Model::build(&spec, 0)?;
        let aligned = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !aligned {
            return Err(ModelError::Config(format!(
                "parameters do not match a {} model",
                spec.arch.as_str()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    /// Re-initializes the output layer for `new_num_classes` outputs. The new
    /// head's θ₀ is its fresh initialization; other tensors are untouched.
    pub fn replace_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        if new_num_classes < 2 {
            return Err(ModelError::Config(format!(
                "num_classes must be at least 2, got {new_num_classes}"
            )));
        }
        let wi = self
            .params
            .index_of("head.weight")
            .ok_or_else(|| ModelError::UnknownParam("head.weight".into()))?;
        let bi = self
            .params
            .index_of("head.bias")
            .ok_or_else(|| ModelError::UnknownParam("head.bias".into()))?;
        let (hw, hb) = head_tensors(self.spec.feature_dim(), new_num_classes, seed);
        self.params.replace(wi, hw)?;
        self.params.replace(bi, hb)?;
        self.spec.num_classes = new_num_classes;
        Ok(())
    }

    /// Records a forward pass for `input[B×C×H×W]` on `tape`.
    ///
    /// Spatial size may differ from `spec.input` for `conv3s`.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<ForwardPass> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(&p.value)).collect();
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("parameter layout matches spec");
        let batch = tape.shape(input)[0];
        let mut x = input;
        match self.spec.arch {
            Arch::Conv3s => {
                for _ in &self.spec.widths {
                    let (w, b) = (take(), take());
                    x = tape.conv2d(x, w, 1, 1)?;
                    x = tape.add_channel_bias(x, b)?;
                    if self.spec.norm == Norm::Batch {
                        let (g, be) = (take(), take());
                        x = tape.batch_norm(x, g, be)?;
                    }
                    x = tape.relu(x);
                    x = tape.max_pool2d(x)?;
                }
                x = tape.global_avg_pool(x)?;
            }
            Arch::Mlp => {
                let d: usize = tape.shape(input)[1..].iter().product();
                x = tape.reshape(x, &[batch, d])?;
                for _ in &self.spec.widths {
                    let (w, b) = (take(), take());
                    x = tape.matmul(x, w)?;
                    x = tape.add_row_bias(x, b)?;
                    if self.spec.norm == Norm::Batch {
                        let (g, be) = (take(), take());
                        x = tape.batch_norm(x, g, be)?;
                    }
                    x = tape.relu(x);
                }
            }
        }
        let (hw, hb) = (take(), take());
        let logits = tape.matmul(x, hw)?;
        let logits = tape.add_row_bias(logits, hb)?;
        Ok(ForwardPass { logits, params: vars })
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(&input.clone().with_requires_grad(false));
        let pass = self.forward(&mut tape, x)?;
        Ok(tape.to_tensor(pass.logits))
    }
}

fn head_tensors(feature_dim: usize, num_classes: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(HEAD_STREAM);
    let w = xavier(&mut rng, &[feature_dim, num_classes], feature_dim, num_classes);
    (w, Tensor::zeros(&[num_classes]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * c * h * w).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
        Tensor::new(&[b, c, h, w], data).unwrap()
    }

    #[test]
    fn same_seed_same_initialization() {
        let spec = ModelSpec::conv3s([1, 16, 16], 10);
        let a = Model::build(&spec, 7).unwrap();
        let b = Model::build(&spec, 7).unwrap();
        assert_eq!(a.params().initial(), b.params().initial());
        let c = Model::build(&spec, 8).unwrap();
        assert_ne!(a.params().initial(), c.params().initial());
    }

    #[test]
    fn xavier_bound_holds_for_every_weight() {
        for spec in [ModelSpec::conv3s([3, 16, 16], 10), ModelSpec::mlp([1, 8, 8], 4)] {
            let m = Model::build(&spec, 3).unwrap();
            for p in m.params().iter().filter(|p| p.kind.is_weight()) {
                let s = p.value.shape();
                let (fan_in, fan_out) = if s.len() == 4 {
                    (s[1] * s[2] * s[3], s[0] * s[2] * s[3])
                } else {
                    (s[0], s[1])
                };
                let bound = (6.0f64 / (fan_in + fan_out) as f64).sqrt();
                assert!(
                    p.value.data().iter().all(|&w| f64::from(w.abs()) <= bound + 1e-7),
                    "{}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn conv3s_output_shape() {
        let m = Model::build(&ModelSpec::conv3s([1, 16, 16], 10), 0).unwrap();
        let y = m.logits(&input(3, 1, 16, 16)).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
    }

    #[test]
    fn conv3s_accepts_other_input_sizes() {
        let m = Model::build(&ModelSpec::conv3s([1, 16, 16], 6), 0).unwrap();
        assert_eq!(m.logits(&input(2, 1, 20, 20)).unwrap().shape(), &[2, 6]);
        assert_eq!(m.logits(&input(2, 1, 12, 24)).unwrap().shape(), &[2, 6]);
    }

    #[test]
    fn body_does_not_depend_on_class_count() {
        let a = Model::build(&ModelSpec::conv3s([1, 16, 16], 4), 11).unwrap();
        let b = Model::build(&ModelSpec::conv3s([1, 16, 16], 8), 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()).filter(|(p, _)| !p.head) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        for (spec, shape) in [
            (ModelSpec::conv3s([1, 16, 16], 5), [4, 1, 16, 16]),
            (ModelSpec::mlp([1, 6, 6], 3), [4, 1, 6, 6]),
        ] {
            let mut m = Model::build(&spec, 1).unwrap();
            for (_, t) in m.params_mut().named_tensors_mut() {
                t.data_mut().fill(0.0);
            }
            let x = input(shape[0], shape[1], shape[2], shape[3]);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let pass = m.forward(&mut tape, xv).unwrap();
            assert!(tape.value(pass.logits).iter().all(|&v| v == 0.0));
            let loss = tape.softmax_cross_entropy(pass.logits, &[0, 1, 2, 0]).unwrap();
            let k = spec.num_classes as f32;
            assert!((tape.value(loss)[0] - k.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn replace_head_resizes_only_the_head() {
        let mut m = Model::build(&ModelSpec::conv3s([1, 16, 16], 5), 2).unwrap();
        let before = m.clone();
        m.replace_head(10, 99).unwrap();
        assert_eq!(m.params().get("head.weight").unwrap().value.shape(), &[64, 10]);
        assert_eq!(before.params().get("head.weight").unwrap().value.shape(), &[64, 5]);
        for (a, b) in m.params().iter().zip(before.params().iter()).filter(|(p, _)| !p.head) {
            assert_eq!(a.value.data(), b.value.data());
        }
        let hi = m.params().index_of("head.weight").unwrap();
        assert_eq!(m.params().initial().unwrap()[hi], m.params().params()[hi].value.clone().with_requires_grad(false));
    }

    #[test]
    fn replace_head_is_deterministic() {
        let mut a = Model::build(&ModelSpec::mlp([1, 4, 4], 5), 2).unwrap();
        let mut b = a.clone();
        a.replace_head(7, 5).unwrap();
        b.replace_head(7, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsupported_arch_is_rejected() {
        assert!("resnet18".parse::<Arch>().is_err());
        let mut spec = ModelSpec::mlp([1, 4, 4], 1);
        assert!(Model::build(&spec, 0).is_err());
        spec.num_classes = 2;
        spec.widths = vec![0];
        assert!(Model::build(&spec, 0).is_err());
    }
}
