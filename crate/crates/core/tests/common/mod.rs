//! Independent oracles and measurement helpers shared by the integration
//! tests and the acceptance runner. Nothing here reuses the library's math:
//! the brute-force generator works on plain `Vec`s with explicit diagonal
//! matrices, and gradients are checked against central differences.

#![allow(dead_code)]

use mpbm::correlation::{pearson_matrix, CorrelationMatrix};
use mpbm::data::one_hot;
use mpbm::mixgen::{attention, synthesize, synthesize_many, MixgenOptions, MixupGeneratorParams, MixupTask};
use mpbm::models::{Architecture, Discriminator, PredictionModel};
use mpbm::numerics::gradcheck::{central_difference, relative_error, FD_STEP};
use mpbm::numerics::Reduction;
use mpbm::query::{sgld_query, InputGradient, SgldConfig};
use mpbm::trainer::adversarial_loss;
use mpbm::{Rng, Tape, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn diag(v: &[f64]) -> Mat {
    let mut m = vec![vec![0.0; v.len()]; v.len()];
    for (i, &x) in v.iter().enumerate() {
        m[i][i] = x;
    }
    m
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// One generator input.
#[derive(Clone, Debug)]
pub struct Instance {
    pub z_q: Tensor,
    pub z_b: Tensor,
    pub y_b: Tensor,
    pub c: CorrelationMatrix,
    pub gen: MixupGeneratorParams,
}

pub fn instance(rng: &mut Rng, d: usize, nb: usize, k: usize) -> Instance {
    let feats = rng.normal_tensor(&[d + 4, d], 1.0);
    let c = CorrelationMatrix::from_features(&feats, usize::MAX, rng).expect("correlation");
    let labels: Vec<usize> = (0..nb).map(|_| rng.below(k)).collect();
    Instance {
        z_q: rng.normal_tensor(&[1, d], 1.0),
        z_b: rng.normal_tensor(&[nb, d], 1.0),
        y_b: one_hot(&labels, k).expect("labels"),
        c,
        gen: MixupGeneratorParams::from_matrices(
            rng.normal_tensor(&[d, d], 0.8),
            rng.normal_tensor(&[d, d], 0.8),
            rng.normal_tensor(&[d, d], 0.8),
        )
        .expect("generator"),
    }
}

pub struct Brute {
    /// d×N_b; row j is the attention of feature j.
    pub a: Mat,
    pub z_mix: Vec<f64>,
    pub y_mix: Vec<f64>,
}

/// Per-feature transcription: for each feature j build diag(c_j), project
/// query and keys through it, softmax the scaled dot products.
pub fn brute_force(inst: &Instance, label_softmax: bool) -> Brute {
    let zq = to_mat(&inst.z_q);
    let zb = to_mat(&inst.z_b);
    let yb = to_mat(&inst.y_b);
    let (wq, wk, wv) = (to_mat(inst.gen.w_q()), to_mat(inst.gen.w_k()), to_mat(inst.gen.w_v()));
    let d = zq[0].len();
    let nb = zb.len();
    let mut a = Vec::with_capacity(d);
    for j in 0..d {
        let dj = diag(inst.c.row(j));
        let q_j = mm(&mm(&zq, &dj), &wq);
        let k_j = mm(&mm(&zb, &dj), &wk);
        let scores: Vec<f64> = (0..nb)
            .map(|n| (0..d).map(|p| q_j[0][p] * k_j[n][p]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        a.push(softmax(&scores));
    }
    let v = mm(&zb, &wv);
    let z_mix = (0..d).map(|j| (0..nb).map(|n| a[j][n] * v[n][j]).sum()).collect();
    let mean_a: Vec<f64> = (0..nb).map(|n| (0..d).map(|j| a[j][n]).sum::<f64>() / d as f64).collect();
    let w = if label_softmax { softmax(&mean_a) } else { mean_a };
    let k = yb[0].len();
    let y_mix = (0..k).map(|c| (0..nb).map(|n| w[n] * yb[n][c]).sum()).collect();
    Brute { a, z_mix, y_mix }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest gap between the fast path and the brute-force transcription.
pub fn oracle_gap(inst: &Instance) -> f64 {
    let mut worst = 0.0f64;
    for label_softmax in [true, false] {
        let b = brute_force(inst, label_softmax);
        let fast = synthesize(&inst.z_q, &inst.z_b, &inst.y_b, &inst.c, &inst.gen, MixgenOptions { label_softmax }).unwrap();
        let att = attention(&inst.z_q, &inst.z_b, &inst.c, &inst.gen).unwrap().a;
        worst = worst
            .max(max_abs(fast.z_mix.data(), &b.z_mix))
            .max(max_abs(fast.y_mix.data(), &b.y_mix));
        for (j, row) in b.a.iter().enumerate() {
            worst = worst.max(max_abs(att.row(j), row));
        }
    }
    worst
}

/// Distance of every row from the probability simplex.
pub fn simplex_violation(t: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..t.rows() {
        let row = t.row(i);
        let neg = row.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        worst = worst.max(neg).max((row.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Largest change in (z_mix, y_mix) over every reordering of the base batch,
/// plus the largest mismatch between permuted attention columns.
pub fn permutation_gap(inst: &Instance, opts: MixgenOptions) -> f64 {
    let base = synthesize(&inst.z_q, &inst.z_b, &inst.y_b, &inst.c, &inst.gen, opts).unwrap();
    let base_a = attention(&inst.z_q, &inst.z_b, &inst.c, &inst.gen).unwrap().a;
    let mut worst = 0.0f64;
    for p in permutations(inst.z_b.rows()) {
        let zb = inst.z_b.select_rows(&p);
        let yb = inst.y_b.select_rows(&p);
        let s = synthesize(&inst.z_q, &zb, &yb, &inst.c, &inst.gen, opts).unwrap();
        worst = worst
            .max(s.z_mix.max_abs_diff(&base.z_mix))
            .max(s.y_mix.max_abs_diff(&base.y_mix));
        let a = attention(&inst.z_q, &zb, &inst.c, &inst.gen).unwrap().a;
        for j in 0..a.rows() {
            for (col, &src) in p.iter().enumerate() {
                worst = worst.max((a.at(j, col) - base_a.at(j, src)).abs());
            }
        }
    }
    worst
}

/// With one base instance the mix must be `z_b · W_V` and the label `y_b`.
pub fn single_instance_gap(inst: &Instance, opts: MixgenOptions) -> f64 {
    assert_eq!(inst.z_b.rows(), 1);
    let s = synthesize(&inst.z_q, &inst.z_b, &inst.y_b, &inst.c, &inst.gen, opts).unwrap();
    let want = mm(&to_mat(&inst.z_b), &to_mat(inst.gen.w_v()));
    max_abs(s.z_mix.data(), &want[0]).max(s.y_mix.max_abs_diff(&inst.y_b))
}

/// Symmetry, unit diagonal and range of the raw Pearson matrix, and row sums
/// / signs of its normalized form.
pub fn correlation_gap(features: &Tensor) -> f64 {
    let r = pearson_matrix(features).unwrap();
    let d = r.rows();
    let mut worst = 0.0f64;
    for a in 0..d {
        worst = worst.max((r.at(a, a) - 1.0).abs());
        for b in 0..d {
            worst = worst.max((r.at(a, b) - r.at(b, a)).abs());
            worst = worst.max((r.at(a, b).abs() - 1.0).max(0.0));
        }
    }
    let c = CorrelationMatrix::normalize_rows(&r).unwrap();
    worst.max(simplex_violation(c.matrix()))
}

/// Pearson coefficient of columns a, b computed directly from its definition.
pub fn pearson_direct(x: &Tensor, a: usize, b: usize) -> f64 {
    let n = x.rows() as f64;
    let ma = (0..x.rows()).map(|i| x.at(i, a)).sum::<f64>() / n;
    let mb = (0..x.rows()).map(|i| x.at(i, b)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..x.rows() {
        let (u, v) = (x.at(i, a) - ma, x.at(i, b) - mb);
        sab += u * v;
        saa += u * u;
        sbb += v * v;
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------- gradients

fn with_replaced(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Central differences restricted to `coords` (all coordinates when `None`).
fn fd_subset(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, coords: Option<&[usize]>) -> (Tensor, Vec<usize>) {
    match coords {
        None => (central_difference(|t| f(t), x, FD_STEP), (0..x.len()).collect()),
        Some(c) => {
            let vals: Vec<f64> = c
                .iter()
                .map(|&i| {
                    let up = f(&with_replaced(x, i, x.data()[i] + FD_STEP));
                    let down = f(&with_replaced(x, i, x.data()[i] - FD_STEP));
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect();
            (Tensor::new(vec![c.len()], vals).unwrap(), c.to_vec())
        }
    }
}

fn pick(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).unwrap()
}

/// Relative error of ∂L/∂{W_Q, W_K, W_V} for a random linear read-out of
/// (z_mix, y_mix) over two mixup tasks.
pub fn mixgen_grad_error(rng: &mut Rng, label_softmax: bool) -> f64 {
    let d = 2 + rng.below(3);
    let k = 2 + rng.below(3);
    let tasks: Vec<MixupTask> = (0..2)
        .map(|_| {
            let nb = 1 + rng.below(4);
            let inst = instance(rng, d, nb, k);
            MixupTask {
                z_q: inst.z_q,
                z_b: inst.z_b,
                y_b: inst.y_b,
            }
        })
        .collect();
    let base = instance(rng, d, 2, k);
    let (c, gen) = (base.c, base.gen);
    let rz = rng.normal_tensor(&[2, d], 1.0);
    let ry = rng.normal_tensor(&[2, k], 1.0);
    let opts = MixgenOptions { label_softmax };
    let loss_of = |g: &MixupGeneratorParams| -> (f64, Option<Vec<Tensor>>) {
        let tape = Tape::new();
        let bound = g.bind(&tape, true);
        let (z, y) = synthesize_many(&tasks, &c, &bound, opts, &tape).unwrap();
        let l = z
            .mul(tape.constant(rz.clone()))
            .unwrap()
            .sum()
            .add(y.mul(tape.constant(ry.clone())).unwrap().sum())
            .unwrap();
        let gr = tape.backward(l).unwrap();
        (l.value().item(), Some(bound.vars().iter().map(|v| gr.get(*v)).collect()))
    };
    let analytic = loss_of(&gen).1.unwrap();
    let mats = [gen.w_q().clone(), gen.w_k().clone(), gen.w_v().clone()];
    let mut worst = 0.0f64;
    for which in 0..3 {
        let fd = central_difference(
            |w| {
                let mut m = mats.clone();
                m[which] = w.clone();
                let g = MixupGeneratorParams::from_matrices(m[0].clone(), m[1].clone(), m[2].clone()).unwrap();
                loss_of(&g).0
            },
            &mats[which],
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic[which], &fd));
    }
    worst
}

/// Mean cross-entropy of `model` and its analytic gradients for θ then ψ.
fn model_loss(model: &PredictionModel, x: &Tensor, y: &Tensor) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let (z, theta) = model.extractor.extract(&tape, tape.constant(x.clone()), false).unwrap();
    let psi = model.classifier.params().bind(&tape, true);
    let l = model
        .classifier
        .classify(&psi, z)
        .unwrap()
        .cross_entropy(tape.constant(y.clone()), Reduction::Mean)
        .unwrap();
    let g = tape.backward(l).unwrap();
    let grads = theta.iter().chain(psi.iter()).map(|v| g.get(*v)).collect();
    (l.value().item(), grads)
}

/// Relative error of ∂CE/∂(θ, ψ). `max_coords` limits the coordinates probed
/// per tensor for large conv layers.
pub fn model_grad_error(rng: &mut Rng, arch: Architecture, batch: usize, max_coords: Option<usize>) -> f64 {
    let model = PredictionModel::new(arch.clone(), rng).unwrap();
    let mut shape = vec![batch];
    shape.extend(&arch.input_shape);
    let x = rng.uniform_tensor(&shape, 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(arch.num_classes)).collect();
    let y = one_hot(&labels, arch.num_classes).unwrap();
    let (_, analytic) = model_loss(&model, &x, &y);
    let n_theta = model.extractor.params().len();
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        let current = if i < n_theta {
            model.extractor.params().get(i).clone()
        } else {
            model.classifier.params().get(i - n_theta).clone()
        };
        let coords = max_coords.filter(|&m| m < current.len()).map(|m| rng.choose_distinct(current.len(), m));
        let mut f = |t: &Tensor| {
            let mut m = model.clone();
            if i < n_theta {
                m.extractor.params_mut().replace(i, t.clone()).unwrap();
            } else {
                m.classifier.params_mut().replace(i - n_theta, t.clone()).unwrap();
            }
            m.loss(&x, &y).unwrap()
        };
        let (fd, idx) = fd_subset(&mut f, &current, coords.as_deref());
        let an = if coords.is_some() { pick(g, &idx) } else { g.clone() };
        let fd = if coords.is_some() { fd } else { fd.reshape(g.shape()).unwrap() };
        worst = worst.max(relative_error(&an, &fd));
    }
    worst
}

/// Relative error of the adversarial loss gradient with respect to ω and to
/// the mixed features.
pub fn discriminator_grad_error(rng: &mut Rng) -> f64 {
    let d = 2 + rng.below(4);
    let disc = Discriminator::new(d, rng);
    let (n_real, n_mix) = (1 + rng.below(4), 1 + rng.below(4));
    let real = rng.normal_tensor(&[n_real, d], 1.0);
    let mix = rng.normal_tensor(&[n_mix, d], 1.0);
    let loss = |disc: &Discriminator, mix: &Tensor| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let omega = disc.params().bind(&tape, true);
        let mv = tape.leaf(mix.clone());
        let l = adversarial_loss(tape.constant(real.clone()), mv, disc, &omega).unwrap();
        let g = tape.backward(l).unwrap();
        let mut grads: Vec<Tensor> = omega.iter().map(|v| g.get(*v)).collect();
        grads.push(g.get(mv));
        (l.value().item(), grads)
    };
    let (_, analytic) = loss(&disc, &mix);
    let mut worst = 0.0f64;
    for (i, an) in analytic.iter().enumerate() {
        let fd = if i < disc.params().len() {
            central_difference(
                |t| {
                    let mut dd = disc.clone();
                    dd.params_mut().replace(i, t.clone()).unwrap();
                    loss(&dd, &mix).0
                },
                disc.params().get(i),
                FD_STEP,
            )
        } else {
            central_difference(|t| loss(&disc, t).0, &mix, FD_STEP)
        };
        worst = worst.max(relative_error(an, &fd));
    }
    worst
}

/// Relative error of the per-instance input gradient used by the SGLD chain.
pub fn input_grad_error(rng: &mut Rng) -> f64 {
    let dim = 2 + rng.below(4);
    let k = 2 + rng.below(3);
    let model = PredictionModel::new(Architecture::mlp(dim, &[4], 3, k), rng).unwrap();
    let n = 1 + rng.below(4);
    let x = rng.uniform_tensor(&[n, dim], 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let y = one_hot(&labels, k).unwrap();
    let (g, _) = model.input_gradient(&x, &y).unwrap();
    let fd = central_difference(|t| model.loss(t, &y).unwrap() * n as f64, &x, FD_STEP);
    relative_error(&g, &fd)
}

pub struct GradSummary {
    pub instances: usize,
    pub worst: f64,
    pub by_group: Vec<(&'static str, usize, f64)>,
}

/// The full randomized gradient suite.
pub fn gradient_suite(seed: u64) -> GradSummary {
    let mut rng = Rng::new(seed);
    let mut by_group = Vec::new();
    let mut run = |name: &'static str, n: usize, f: &mut dyn FnMut(&mut Rng, usize) -> f64| {
        let worst = (0..n).map(|i| f(&mut rng, i)).fold(0.0, f64::max);
        by_group.push((name, n, worst));
    };
    run("mixgen W_Q/W_K/W_V", 40, &mut |r, i| mixgen_grad_error(r, i % 2 == 0));
    run("mlp extractor/classifier", 30, &mut |r, _| {
        let dim = 2 + r.below(3);
        let k = 2 + r.below(3);
        let (hidden, d) = (3 + r.below(3), 2 + r.below(3));
        model_grad_error(r, Architecture::mlp(dim, &[hidden], d, k), 3, None)
    });
    run("lenet-small extractor/classifier", 4, &mut |r, _| {
        model_grad_error(r, Architecture::lenet_small(&[1, 16, 16], 4, 3), 2, Some(24))
    });
    run("discriminator", 20, &mut |r, _| discriminator_grad_error(r));
    run("sgld input gradient", 20, &mut |r, _| input_grad_error(r));
    GradSummary {
        instances: by_group.iter().map(|g| g.1).sum(),
        worst: by_group.iter().map(|g| g.2).fold(0.0, f64::max),
        by_group,
    }
}

// --------------------------------------------------------------------- sgld

/// Gradient field of `½‖x − a‖²`; the ascent chain has the closed form
/// `x_t = a + (1 + η)^t (x_0 − a)`.
pub struct Quadratic(pub Tensor);

impl InputGradient for Quadratic {
    fn input_gradient(&self, x: &Tensor, _: &Tensor) -> mpbm::Result<(Tensor, f64)> {
        let g = x.zip_map(&self.0, |a, b| a - b)?;
        let v = 0.5 * g.data().iter().map(|v| v * v).sum::<f64>();
        Ok((g, v))
    }
}

/// Gradient of a linear score `w · x` per row: constant, so `x_t = x_0 + tηw`.
pub struct Linear(pub Vec<f64>);

impl InputGradient for Linear {
    fn input_gradient(&self, x: &Tensor, _: &Tensor) -> mpbm::Result<(Tensor, f64)> {
        let data = (0..x.rows()).flat_map(|_| self.0.iter().copied()).collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, 0.0))
    }
}

pub fn noiseless(steps: usize, eta: f64) -> SgldConfig {
    SgldConfig {
        steps,
        eta,
        noise_scale_override: Some(0.0),
        clamp: None,
    }
}

/// Largest deviation of the quadratic and linear chains from their closed
/// forms, over T = 1..=8 and a few step sizes.
pub fn sgld_closed_form_gap(rng: &mut Rng) -> f64 {
    let mut worst = 0.0f64;
    for &eta in &[0.01, 0.05, 0.3] {
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let x0 = rng.normal_tensor(&[3, 4], 1.0);
        let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y = Tensor::zeros(&[3, 1]);
        for t in 1..=8 {
            let q = sgld_query(&x0, &y, &Quadratic(a.clone()), &noiseless(t, eta), &mut Rng::new(0)).unwrap();
            let growth = (1.0 + eta).powi(t as i32);
            let want = x0.zip_map(&a, |x, a| a + growth * (x - a)).unwrap();
            worst = worst.max(q.query.max_abs_diff(&want));
            let l = sgld_query(&x0, &y, &Linear(w.clone()), &noiseless(t, eta), &mut Rng::new(0)).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    let want = x0.at(i, j) + t as f64 * eta * w[j];
                    worst = worst.max((l.query.at(i, j) - want).abs());
                }
            }
        }
    }
    worst
}

/// One noise-free step from a random model equals `x + η ∇ₓ CE`, bit for bit.
pub fn sgld_single_step_exact(rng: &mut Rng) -> bool {
    let model = PredictionModel::new(Architecture::mlp(3, &[5], 4, 3), rng).unwrap();
    let x = rng.uniform_tensor(&[6, 3], 0.1, 0.9);
    let y = one_hot(&[0, 1, 2, 2, 1, 0], 3).unwrap();
    let eta = 0.01;
    let out = sgld_query(&x, &y, &model, &noiseless(1, eta), &mut Rng::new(1)).unwrap();
    let (g, _) = model.input_gradient(&x, &y).unwrap();
    out.query == x.zip_map(&g, |a, b| a + eta * b).unwrap()
}

struct Zero;

impl InputGradient for Zero {
    fn input_gradient(&self, x: &Tensor, _: &Tensor) -> mpbm::Result<(Tensor, f64)> {
        Ok((Tensor::zeros(x.shape()), 0.0))
    }
}

/// Sample variance of one injected noise step over `n` draws, relative to 2η.
pub fn sgld_noise_variance_ratio(n: usize, eta: f64, seed: u64) -> f64 {
    let cfg = SgldConfig {
        steps: 1,
        eta,
        noise_scale_override: None,
        clamp: None,
    };
    let x = Tensor::zeros(&[n, 1]);
    let out = sgld_query(&x, &Tensor::zeros(&[n, 1]), &Zero, &cfg, &mut Rng::new(seed)).unwrap();
    let v = out.query.data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var / (2.0 * eta)
}

/// Summed CE along a noise-free chain, one entry per iterate.
pub fn ascent_trace(model: &PredictionModel, x: &Tensor, y: &Tensor, steps: usize, eta: f64) -> Vec<f64> {
    let mut cur = x.clone();
    let mut out = vec![model.loss(&cur, y).unwrap()];
    for _ in 0..steps {
        cur = sgld_query(&cur, y, model, &noiseless(1, eta), &mut Rng::new(0)).unwrap().query;
        out.push(model.loss(&cur, y).unwrap());
    }
    out
}
