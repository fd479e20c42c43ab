//! Parametric batch-wise mixup generator.
//!
//! Given a query feature vector `z_q` (1×d) and a base batch `Z_b` (N_b×d)
//! with one-hot labels `Y_b`, each feature `j` gets its own attention
//! distribution over the batch:
//!
//! ```text
//! q_j = z_q · diag(c_j) · W_Q        K_j = Z_b · diag(c_j) · W_K
//! a_j = softmax(q_j K_jᵀ / √d)       V   = Z_b · W_V
//! z_mix[j] = a_j · V[:, j]           y_mix = softmax(mean_j a_j) · Y_b
//! ```
//!
//! The d score rows are computed together. With `Q = (C ⊙ 1·z_q) W_Q` the
//! score for feature `j` and instance `n` is `Σ_k Z_b[n,k] · C[j,k] · (Q W_Kᵀ)[j,k]`,
//! so the full d×N_b score matrix is `(C ⊙ Q W_Kᵀ) Z_bᵀ / √d` and no per-feature
//! key tensor is ever built.

use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationMatrix;
use crate::data::LabeledBatch;
use crate::error::{MpbmError, Result};
use crate::models::{FeatureExtractor, ParamSet};
use crate::numerics::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixgenOptions {
    /// Apply the outer softmax to the mean attention before mixing labels.
    pub label_softmax: bool,
}

impl Default for MixgenOptions {
    fn default() -> Self {
        MixgenOptions { label_softmax: true }
    }
}

/// `W_Q`, `W_K`, `W_V`, each d×d.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupGeneratorParams {
    params: ParamSet,
}

impl MixupGeneratorParams {
    /// Fan-in scaled Gaussian initialization.
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        for name in ["w_q", "w_k", "w_v"] {
            params.push(name, rng.normal_tensor(&[d, d], std));
        }
        MixupGeneratorParams { params }
    }

    pub fn from_matrices(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != [d, d] {
                return Err(MpbmError::shape(
                    "MixupGeneratorParams",
                    format!("{name} is {:?}, expected {d}×{d}", w.shape()),
                ));
            }
        }
        let mut params = ParamSet::new();
        params.push("w_q", w_q);
        params.push("w_k", w_k);
        params.push("w_v", w_v);
        Ok(MixupGeneratorParams { params })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.names() != ["w_q", "w_k", "w_v"] {
            return Err(MpbmError::shape(
                "MixupGeneratorParams",
                format!("unexpected tensors {:?}", params.names()),
            ));
        }
        let [q, k, v] = [0, 1, 2].map(|i| params.get(i).clone());
        Self::from_matrices(q, k, v)
    }

    pub fn dim(&self) -> usize {
        self.params.get(0).rows()
    }

    pub fn w_q(&self) -> &Tensor {
        self.params.get(0)
    }

    pub fn w_k(&self) -> &Tensor {
        self.params.get(1)
    }

    pub fn w_v(&self) -> &Tensor {
        self.params.get(2)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> BoundGenerator<'t> {
        let v = self.params.bind(tape, track);
        BoundGenerator {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
        }
    }
}

/// Generator parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundGenerator<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
}

impl<'t> BoundGenerator<'t> {
    pub fn vars(&self) -> [Var<'t>; 3] {
        [self.w_q, self.w_k, self.w_v]
    }
}

/// d×N_b attention matrix; row `j` is the distribution `a_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    /// 1×d
    pub z_mix: Tensor,
    /// 1×K
    pub y_mix: Tensor,
}

fn check_dims(z_q: &Tensor, z_b: &Tensor, c: &CorrelationMatrix, d: usize) -> Result<()> {
    if z_q.shape() != [1, d] {
        return Err(MpbmError::shape("attention", format!("query {:?}, d = {d}", z_q.shape())));
    }
    if z_b.ndim() != 2 || z_b.cols() != d || z_b.rows() == 0 {
        return Err(MpbmError::shape("attention", format!("batch {:?}, d = {d}", z_b.shape())));
    }
    if c.dim() != d {
        return Err(MpbmError::shape("attention", format!("correlation is {0}×{0}, d = {d}", c.dim())));
    }
    Ok(())
}

/// Attention scores on the tape, d×N_b.
pub fn attention_var<'t>(
    z_q: Var<'t>,
    z_b: Var<'t>,
    c: &CorrelationMatrix,
    p: &BoundGenerator<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    let d = c.dim();
    check_dims(&z_q.value(), &z_b.value(), c, p.w_q.value().rows())?;
    let cm = tape.constant(c.matrix().clone());
    let q = cm.mul_row(z_q)?.matmul(p.w_q)?;
    let r = q.matmul_t(p.w_k)?;
    let scores = cm.mul(r)?.matmul_t(z_b)?.scale(1.0 / (d as f64).sqrt());
    Ok(scores.softmax())
}

/// `(z_mix, y_mix)` on the tape: 1×d and 1×K.
pub fn synthesize_var<'t>(
    z_q: Var<'t>,
    z_b: Var<'t>,
    y_b: Var<'t>,
    c: &CorrelationMatrix,
    p: &BoundGenerator<'t>,
    opts: MixgenOptions,
    tape: &'t Tape,
) -> Result<(Var<'t>, Var<'t>)> {
    let yb = y_b.value();
    if yb.ndim() != 2 || yb.rows() != z_b.value().rows() {
        return Err(MpbmError::shape(
            "synthesize",
            format!("labels {:?} for batch {:?}", yb.shape(), z_b.shape()),
        ));
    }
    let d = c.dim();
    let a = attention_var(z_q, z_b, c, p, tape)?;
    let v = z_b.matmul(p.w_v)?;
    let z_mix = a.mul(v.t()?)?.sum_cols().reshape(&[1, d])?;
    let mean_a = a.mean_rows();
    let weights = if opts.label_softmax { mean_a.softmax() } else { mean_a };
    let y_mix = weights.matmul(y_b)?;
    Ok((z_mix, y_mix))
}

fn check_one_hot(y_b: &Tensor) -> Result<()> {
    for i in 0..y_b.rows() {
        let row = y_b.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MpbmError::Invariant(format!("base label row {i} is not one-hot")));
        }
    }
    Ok(())
}

pub fn attention(
    z_q: &Tensor,
    z_b: &Tensor,
    c: &CorrelationMatrix,
    p: &MixupGeneratorParams,
) -> Result<AttentionScores> {
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let a = attention_var(tape.constant(z_q.clone()), tape.constant(z_b.clone()), c, &bound, &tape)?;
    Ok(AttentionScores {
        a: (*a.value()).clone(),
    })
}

pub fn synthesize(
    z_q: &Tensor,
    z_b: &Tensor,
    y_b: &Tensor,
    c: &CorrelationMatrix,
    p: &MixupGeneratorParams,
    opts: MixgenOptions,
) -> Result<MixupSample> {
    check_one_hot(y_b)?;
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let (z, y) = synthesize_var(
        tape.constant(z_q.clone()),
        tape.constant(z_b.clone()),
        tape.constant(y_b.clone()),
        c,
        &bound,
        opts,
        &tape,
    )?;
    Ok(MixupSample {
        z_mix: (*z.value()).clone(),
        y_mix: (*y.value()).clone(),
    })
}

/// Extract query and batch features with a frozen extractor, then mix.
pub fn generate(
    x_q_hat: &Tensor,
    batch: &LabeledBatch,
    f: &FeatureExtractor,
    c: &CorrelationMatrix,
    p: &MixupGeneratorParams,
    opts: MixgenOptions,
) -> Result<MixupSample> {
    let z_q = f.features(x_q_hat)?;
    let z_b = f.features(&batch.inputs)?;
    synthesize(&z_q, &z_b, &batch.labels, c, p, opts)
}

/// Feature-only variant of [`generate`].
pub fn generate_z(
    x_q_hat: &Tensor,
    batch: &LabeledBatch,
    f: &FeatureExtractor,
    c: &CorrelationMatrix,
    p: &MixupGeneratorParams,
) -> Result<Tensor> {
    Ok(generate(x_q_hat, batch, f, c, p, MixgenOptions::default())?.z_mix)
}

/// Pre-extracted generator inputs for one query.
#[derive(Clone, Debug)]
pub struct MixupTask {
    /// 1×d
    pub z_q: Tensor,
    /// N_b×d
    pub z_b: Tensor,
    /// N_b×K one-hot
    pub y_b: Tensor,
}

/// Run the generator over many tasks on one tape; returns m×d and m×K.
pub fn synthesize_many<'t>(
    tasks: &[MixupTask],
    c: &CorrelationMatrix,
    p: &BoundGenerator<'t>,
    opts: MixgenOptions,
    tape: &'t Tape,
) -> Result<(Var<'t>, Var<'t>)> {
    let mut zs = Vec::with_capacity(tasks.len());
    let mut ys = Vec::with_capacity(tasks.len());
    for t in tasks {
        let (z, y) = synthesize_var(
            tape.constant(t.z_q.clone()),
            tape.constant(t.z_b.clone()),
            tape.constant(t.y_b.clone()),
            c,
            p,
            opts,
            tape,
        )?;
        zs.push(z);
        ys.push(y);
    }
    Ok((Var::concat_rows(&zs)?, Var::concat_rows(&ys)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, relative_error, FD_STEP};
    use crate::numerics::Reduction;

    fn one_hot(rows: &[usize], k: usize) -> Tensor {
        let mut d = vec![0.0; rows.len() * k];
        for (i, &c) in rows.iter().enumerate() {
            d[i * k + c] = 1.0;
        }
        Tensor::new(vec![rows.len(), k], d).unwrap()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    /// Per-feature transcription with materialized diagonal matrices.
    fn brute_force(z_q: &Tensor, z_b: &Tensor, y_b: &Tensor, c: &Tensor, p: &MixupGeneratorParams) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let d = c.rows();
        let nb = z_b.rows();
        let mut a_rows = Vec::new();
        for j in 0..d {
            let mut cj = Tensor::zeros(&[d, d]).into_data();
            for k in 0..d {
                cj[k * d + k] = c.at(j, k);
            }
            let cj = Tensor::new(vec![d, d], cj).unwrap();
            let q = z_q.matmul(&cj).unwrap().matmul(p.w_q()).unwrap();
            let kj = z_b.matmul(&cj).unwrap().matmul(p.w_k()).unwrap();
            let s: Vec<f64> = (0..nb)
                .map(|n| (0..d).map(|l| q.at(0, l) * kj.at(n, l)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            a_rows.push(softmax(&s));
        }
        let v = z_b.matmul(p.w_v()).unwrap();
        let z_mix: Vec<f64> = (0..d).map(|j| (0..nb).map(|n| a_rows[j][n] * v.at(n, j)).sum()).collect();
        let mean: Vec<f64> = (0..nb).map(|n| a_rows.iter().map(|r| r[n]).sum::<f64>() / d as f64).collect();
        let w = softmax(&mean);
        let k = y_b.cols();
        let y_mix = (0..k).map(|c| (0..nb).map(|n| w[n] * y_b.at(n, c)).sum()).collect();
        (a_rows, z_mix, y_mix)
    }

    fn random_corr(d: usize, rng: &mut Rng) -> CorrelationMatrix {
        let f = rng.normal_tensor(&[20, d], 1.0);
        CorrelationMatrix::from_features(&f, 10_000, rng).unwrap()
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut rng = Rng::new(0);
        let p = MixupGeneratorParams::new(3, &mut rng);
        let c = random_corr(3, &mut rng);
        let a = attention(&rng.normal_tensor(&[1, 3], 1.0), &rng.normal_tensor(&[1, 3], 1.0), &c, &p).unwrap();
        assert!(a.a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let mut rng = Rng::new(1);
        let p = MixupGeneratorParams::new(4, &mut rng);
        let c = random_corr(4, &mut rng);
        let row = rng.normal_tensor(&[1, 4], 1.0);
        let zb = Tensor::concat_rows(&[&row, &row, &row]).unwrap();
        let a = attention(&rng.normal_tensor(&[1, 4], 1.0), &zb, &c, &p).unwrap();
        assert!(a.a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn scalar_closed_form() {
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let p = MixupGeneratorParams::from_matrices(one.clone(), one.clone(), one.clone()).unwrap();
        let c = CorrelationMatrix::from_normalized(one.clone()).unwrap();
        let zb = Tensor::new(vec![2, 1], vec![0.0, 3f64.ln()]).unwrap();
        let a = attention(&one, &zb, &c, &p).unwrap();
        assert!((a.a.data()[0] - 0.25).abs() < 1e-15);
        assert!((a.a.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_batch() {
        let mut rng = Rng::new(2);
        let p = MixupGeneratorParams::new(3, &mut rng);
        let c = random_corr(3, &mut rng);
        let z1 = rng.normal_tensor(&[1, 3], 1.0);
        let s = synthesize(&rng.normal_tensor(&[1, 3], 1.0), &z1, &one_hot(&[2], 4), &c, &p, MixgenOptions::default()).unwrap();
        let expect = z1.matmul(p.w_v()).unwrap();
        assert!(s.z_mix.max_abs_diff(&expect) <= 1e-12);
        assert_eq!(s.y_mix.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_attention_mixes_labels_evenly() {
        let mut rng = Rng::new(3);
        let p = MixupGeneratorParams::new(2, &mut rng);
        let c = random_corr(2, &mut rng);
        let row = rng.normal_tensor(&[1, 2], 1.0);
        let zb = Tensor::concat_rows(&[&row, &row]).unwrap();
        let s = synthesize(&row, &zb, &one_hot(&[0, 1], 3), &c, &p, MixgenOptions::default()).unwrap();
        assert!(s.y_mix.max_abs_diff(&Tensor::row_vector(&[0.5, 0.5, 0.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let p = MixupGeneratorParams::new(3, &mut rng);
            let c = random_corr(3, &mut rng);
            let zq = rng.normal_tensor(&[1, 3], 1.0);
            let zb = rng.normal_tensor(&[2, 3], 1.0);
            let yb = one_hot(&[0, 2], 3);
            let (a_bf, z_bf, y_bf) = brute_force(&zq, &zb, &yb, c.matrix(), &p);
            let a = attention(&zq, &zb, &c, &p).unwrap();
            let s = synthesize(&zq, &zb, &yb, &c, &p, MixgenOptions::default()).unwrap();
            for j in 0..3 {
                for n in 0..2 {
                    assert!((a.a.at(j, n) - a_bf[j][n]).abs() <= 1e-12);
                }
            }
            for j in 0..3 {
                assert!((s.z_mix.data()[j] - z_bf[j]).abs() <= 1e-12);
                assert!((s.y_mix.data()[j] - y_bf[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn label_softmax_off_uses_mean_attention() {
        let mut rng = Rng::new(8);
        let p = MixupGeneratorParams::new(3, &mut rng);
        let c = random_corr(3, &mut rng);
        let zq = rng.normal_tensor(&[1, 3], 1.0);
        let zb = rng.normal_tensor(&[3, 3], 1.0);
        let yb = one_hot(&[0, 1, 2], 3);
        let a = attention(&zq, &zb, &c, &p).unwrap();
        let s = synthesize(&zq, &zb, &yb, &c, &p, MixgenOptions { label_softmax: false }).unwrap();
        for n in 0..3 {
            let mean = (0..3).map(|j| a.a.at(j, n)).sum::<f64>() / 3.0;
            assert!((s.y_mix.data()[n] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = Rng::new(5);
        let p = MixupGeneratorParams::new(3, &mut rng);
        let c = random_corr(3, &mut rng);
        let zq = rng.normal_tensor(&[1, 3], 1.0);
        assert!(synthesize(&zq, &rng.normal_tensor(&[2, 4], 1.0), &one_hot(&[0, 1], 2), &c, &p, MixgenOptions::default()).is_err());
        let soft = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            synthesize(&zq, &rng.normal_tensor(&[1, 3], 1.0), &soft, &c, &p, MixgenOptions::default()),
            Err(MpbmError::Invariant(_))
        ));
        assert!(MixupGeneratorParams::from_matrices(Tensor::eye(2), Tensor::eye(3), Tensor::eye(2)).is_err());
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let d = 3;
        let p = MixupGeneratorParams::new(d, &mut rng);
        let c = random_corr(d, &mut rng);
        let task = MixupTask {
            z_q: rng.normal_tensor(&[1, d], 1.0),
            z_b: rng.normal_tensor(&[3, d], 1.0),
            y_b: one_hot(&[0, 1, 1], 2),
        };
        let head = rng.normal_tensor(&[d, 2], 1.0);
        let loss_of = |params: &MixupGeneratorParams| -> f64 {
            let tape = Tape::new();
            let b = params.bind(&tape, false);
            let (z, y) = synthesize_many(std::slice::from_ref(&task), &c, &b, MixgenOptions::default(), &tape).unwrap();
            let logits = z.matmul(tape.constant(head.clone())).unwrap();
            logits.cross_entropy(y, Reduction::Mean).unwrap().value().item()
        };
        let tape = Tape::new();
        let b = p.bind(&tape, true);
        let (z, y) = synthesize_many(std::slice::from_ref(&task), &c, &b, MixgenOptions::default(), &tape).unwrap();
        let loss = z.matmul(tape.constant(head.clone())).unwrap().cross_entropy(y, Reduction::Mean).unwrap();
        let g = tape.backward(loss).unwrap();
        for (i, var) in b.vars().into_iter().enumerate() {
            let fd = central_difference(
                |w| {
                    let mut q = p.clone();
                    q.params_mut().replace(i, w.clone()).unwrap();
                    loss_of(&q)
                },
                p.params().get(i),
                FD_STEP,
            );
            assert!(relative_error(&g.get(var), &fd) < 1e-6, "param {i}");
        }
    }
}
