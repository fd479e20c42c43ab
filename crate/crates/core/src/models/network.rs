use super::arch::{Architecture, LayerSpec};
use super::params::ParamSet;
use crate::error::{MpbmError, Result};
use crate::numerics::{Reduction, Rng, Tape, Tensor, Var};

/// Rows per chunk when evaluating large inputs outside of training.
const EVAL_CHUNK: usize = 256;

/// Scores are kept inside `[SCORE_EPS, 1 - SCORE_EPS]` so their logs stay finite.
pub const SCORE_EPS: f64 = 1e-7;

fn fan_in_gaussian(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    rng.normal_tensor(shape, 1.0 / (fan_in as f64).sqrt())
}

fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}

/// Convolution/pooling/affine stack `f_θ: X → Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    arch: Architecture,
    params: ParamSet,
    output_dim: usize,
}

impl FeatureExtractor {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let shapes = arch.shapes()?;
        let output_dim = arch.feature_dim()?;
        let mut params = ParamSet::new();
        let mut in_shape = arch.input_shape.clone();
        for (i, layer) in arch.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let c = in_shape[0];
                    let fan_in = c * kernel * kernel;
                    params.push(
                        format!("{i}.weight"),
                        fan_in_gaussian(rng, &[*out_channels, c, *kernel, *kernel], fan_in),
                    );
                    params.push(format!("{i}.bias"), Tensor::zeros(&[*out_channels]));
                }
                LayerSpec::Affine { out } => {
                    let fan_in = in_shape[0];
                    params.push(format!("{i}.weight"), fan_in_gaussian(rng, &[fan_in, *out], fan_in));
                    params.push(format!("{i}.bias"), Tensor::zeros(&[1, *out]));
                }
                _ => {}
            }
            in_shape = shapes[i].clone();
        }
        Ok(FeatureExtractor {
            arch,
            params,
            output_dim,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() == 0 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(MpbmError::shape(
                "extract",
                format!(
                    "input batch {:?} does not match architecture input {:?}",
                    x.shape(),
                    self.arch.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass with parameters already bound on the tape.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.value())?;
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or_else(|| MpbmError::shape("extract", "missing parameters"));
        let mut h = x;
        for layer in &self.arch.layers {
            h = match layer {
                LayerSpec::Conv { padding, .. } => {
                    let (w, b) = (next()?, next()?);
                    h.conv2d(w, b, *padding)?
                }
                LayerSpec::MaxPool { size } => h.max_pool2d(*size)?,
                LayerSpec::Flatten => h.flatten()?,
                LayerSpec::Affine { .. } => {
                    let (w, b) = (next()?, next()?);
                    affine(h, w, b)?
                }
                LayerSpec::Relu => h.relu(),
                LayerSpec::Tanh => h.tanh(),
            };
        }
        Ok(h)
    }

    /// Bind parameters and run the stack. With `stop_grad` the parameters are
    /// constants, so no gradient reaches θ.
    pub fn extract<'t>(&self, tape: &'t Tape, x: Var<'t>, stop_grad: bool) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let params = self.params.bind(tape, !stop_grad);
        let z = self.forward(&params, x)?;
        Ok((z, params))
    }

    /// Plain evaluation, chunked.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        let n = x.rows();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let tape = Tape::new();
            let (z, _) = self.extract(&tape, tape.constant(x.select_rows(&idx)), true)?;
            parts.push((*z.value()).clone());
            start = end;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

/// Linear classifier `h_ψ: Z → Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    params: ParamSet,
    num_classes: usize,
}

impl Classifier {
    pub fn new(d: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        params.push("weight", fan_in_gaussian(rng, &[d, num_classes], d));
        params.push("bias", Tensor::zeros(&[1, num_classes]));
        Classifier { params, num_classes }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[_, k] = weight.shape() else {
            return Err(MpbmError::shape("Classifier", "weight must be d×K"));
        };
        if bias.shape() != [1, k] {
            return Err(MpbmError::shape("Classifier", "bias must be 1×K"));
        }
        let mut params = ParamSet::new();
        params.push("weight", weight);
        params.push("bias", bias);
        Ok(Classifier { params, num_classes: k })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(0).shape()[0]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn classify<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(MpbmError::shape(
                "classify",
                format!("features {shape:?}, classifier expects d = {}", self.input_dim()),
            ));
        }
        affine(z, params[0], params[1])
    }
}

/// Real-vs-mixed feature scorer `D_ω`: two tanh hidden layers of width `d`
/// and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    params: ParamSet,
}

impl Discriminator {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        params.push("0.weight", fan_in_gaussian(rng, &[d, d], d));
        params.push("0.bias", Tensor::zeros(&[1, d]));
        params.push("1.weight", fan_in_gaussian(rng, &[d, d], d));
        params.push("1.bias", Tensor::zeros(&[1, d]));
        params.push("2.weight", fan_in_gaussian(rng, &[d, 1], d));
        params.push("2.bias", Tensor::zeros(&[1, 1]));
        Discriminator { params }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.len() != 6 {
            return Err(MpbmError::shape("Discriminator", "expected 6 parameter tensors"));
        }
        Ok(Discriminator { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// N×1 scores strictly inside (0, 1).
    pub fn discriminate<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let h = affine(z, params[0], params[1])?.tanh();
        let h = affine(h, params[2], params[3])?.tanh();
        Ok(affine(h, params[4], params[5])?
            .sigmoid()
            .clamp(SCORE_EPS, 1.0 - SCORE_EPS))
    }
}

/// `h_ψ ∘ f_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionModel {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
}

impl PredictionModel {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let k = arch.num_classes;
        let extractor = FeatureExtractor::new(arch, rng)?;
        let classifier = Classifier::new(extractor.output_dim(), k, rng);
        Ok(PredictionModel {
            extractor,
            classifier,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        self.extractor.architecture()
    }

    /// Logits with `x` and all parameters as constants, chunked.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.extractor.features(x)?;
        let tape = Tape::new();
        let psi = self.classifier.params.bind(&tape, false);
        let out = self.classifier.classify(&psi, tape.constant(z))?;
        Ok((*out.value()).clone())
    }

    /// Fraction of rows whose arg-max logit matches the arg-max label.
    pub fn accuracy(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let pred = self.logits(x)?.argmax_rows();
        let truth = y.argmax_rows();
        let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / truth.len().max(1) as f64)
    }

    /// Per-instance gradient of `ℓ_ce(h(f(x_i)), y_i)` with respect to the
    /// inputs, parameters held fixed.
    pub fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, f64)> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (z, _) = self.extractor.extract(&tape, xv, true)?;
        let psi = self.classifier.params.bind(&tape, false);
        let logits = self.classifier.classify(&psi, z)?;
        let loss = logits.cross_entropy(tape.constant(y.clone()), Reduction::Sum)?;
        let g = tape.backward(loss)?;
        Ok((g.get(xv), loss.value().item()))
    }

    /// Mean cross-entropy on a labeled batch.
    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let logits = tape.constant(self.logits(x)?);
        Ok(logits
            .cross_entropy(tape.constant(y.clone()), Reduction::Mean)?
            .value()
            .item())
    }
}
