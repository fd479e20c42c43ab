//! Training loop.
//!
//! A run is a supervised pretrain followed by `I` outer iterations. Each outer
//! iteration freezes the prediction model, builds SGLD queries and base
//! batches, trains the mixup generator against a feature-space discriminator
//! for `J` steps, appends `m` frozen mixup features to the augmentation store
//! and fine-tunes the prediction model on real batches plus store samples.
//!
//! Randomness is split into independent streams by purpose, so switching a
//! loss term off changes nothing upstream of it: with `lambda_mix = 0` the
//! prediction model follows the ERM trajectory bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationMatrix, DEFAULT_MAX_ROWS};
use crate::data::{Dataset, LabeledBatch};
use crate::error::{MpbmError, Result};
use crate::mixgen::{synthesize_many, MixgenOptions, MixupGeneratorParams, MixupTask};
use crate::models::{Architecture, Checkpoint, Direction, Discriminator, ParamSet, PredictionModel, RmsProp};
use crate::numerics::{Reduction, Rng, Tape, Tensor, Var};
use crate::query::{sgld_query, SgldConfig};

/// Stream ids under the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const PRETRAIN: u64 = 1;
    pub const FINETUNE: u64 = 2;
    pub const QUERY_SEEDS: u64 = 3;
    pub const SGLD_NOISE: u64 = 4;
    pub const BASE_BATCHES: u64 = 5;
    pub const REAL_BATCHES: u64 = 6;
    pub const STORE: u64 = 7;
    pub const CORRELATION: u64 = 8;
    pub const GENERATOR_INIT: u64 = 9;
    pub const DISCRIMINATOR_INIT: u64 = 10;
    pub const MIXUP: u64 = 11;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Mpbm,
    /// Supervised fine-tuning only.
    Erm,
    /// Input-space pairwise mixup with `λ ~ Beta(α, α)`.
    Mixup,
}

/// How fine-tuning draws from the augmentation store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreSampling {
    /// `batch_size` distinct samples per step.
    #[default]
    Minibatch,
    /// Every stored sample, every step.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_mix_tr: bool,
    pub no_adv: bool,
    pub no_mix_gen: bool,
    pub no_sgld: bool,
}

impl Ablation {
    pub const VARIANTS: [(&'static str, Ablation); 5] = [
        ("full", Ablation { no_mix_tr: false, no_adv: false, no_mix_gen: false, no_sgld: false }),
        ("no_mix_tr", Ablation { no_mix_tr: true, no_adv: false, no_mix_gen: false, no_sgld: false }),
        ("no_adv", Ablation { no_mix_tr: false, no_adv: true, no_mix_gen: false, no_sgld: false }),
        ("no_mix_gen", Ablation { no_mix_tr: false, no_adv: false, no_mix_gen: true, no_sgld: false }),
        ("no_sgld", Ablation { no_mix_tr: false, no_adv: false, no_mix_gen: false, no_sgld: true }),
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_adv: f64,
    pub lambda_mix: f64,
    pub n_b: usize,
    pub sgld: SgldConfig,
    /// `I`; defaults to `epochs`.
    pub outer_iters: Option<usize>,
    /// `J`.
    pub generator_iters: usize,
    /// `T_ft`; defaults to one pass over the training set.
    pub finetune_iters: Option<usize>,
    /// `m`; defaults to `batch_size`.
    pub queries_per_outer: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Prediction-model learning rate.
    pub lr: f64,
    /// Multiplier applied once half of the fine-tuning iterations are done.
    pub lr_decay: f64,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub label_softmax: bool,
    pub store_sampling: StoreSampling,
    pub correlation_max_rows: usize,
    pub mixup_alpha: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Mpbm,
            lambda_adv: 0.5,
            lambda_mix: 0.5,
            n_b: 5,
            sgld: SgldConfig::default(),
            outer_iters: None,
            generator_iters: 20,
            finetune_iters: None,
            queries_per_outer: None,
            batch_size: 32,
            epochs: 50,
            pretrain_epochs: 10,
            lr: 1e-4,
            lr_decay: 0.1,
            generator_lr: 1e-4,
            discriminator_lr: 1e-4,
            label_softmax: true,
            store_sampling: StoreSampling::Minibatch,
            correlation_max_rows: DEFAULT_MAX_ROWS,
            mixup_alpha: 0.2,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_b", self.n_b),
            ("batch_size", self.batch_size),
            ("correlation_max_rows", self.correlation_max_rows),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MpbmError::config(name, "must be positive"));
            }
        }
        if self.correlation_max_rows < 2 {
            return Err(MpbmError::config("correlation_max_rows", "must be at least 2"));
        }
        if self.queries_per_outer == Some(0) {
            return Err(MpbmError::config("queries_per_outer", "must be positive"));
        }
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_mix", self.lambda_mix)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MpbmError::config(name, format!("must be a finite non-negative number, got {v}")));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("generator_lr", self.generator_lr),
            ("discriminator_lr", self.discriminator_lr),
            ("mixup_alpha", self.mixup_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MpbmError::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(MpbmError::config("lr_decay", "must be positive"));
        }
        self.sgld.validate()
    }

    pub fn outer_iters(&self) -> usize {
        self.outer_iters.unwrap_or(self.epochs)
    }

    pub fn queries_per_outer(&self) -> usize {
        self.queries_per_outer.unwrap_or(self.batch_size)
    }

    pub fn finetune_iters(&self, n: usize) -> usize {
        self.finetune_iters.unwrap_or_else(|| n.div_ceil(self.batch_size))
    }

    /// Effective weights after ablation flags.
    pub fn effective_lambda_mix(&self) -> f64 {
        if self.ablation.no_mix_tr {
            0.0
        } else {
            self.lambda_mix
        }
    }

    pub fn effective_lambda_adv(&self) -> f64 {
        if self.ablation.no_adv {
            0.0
        } else {
            self.lambda_adv
        }
    }

    pub fn finetune_lr(&self, iter: usize) -> f64 {
        if 2 * iter > self.outer_iters() {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    fn mixgen(&self) -> MixgenOptions {
        MixgenOptions {
            label_softmax: self.label_softmax,
        }
    }
}

/// One stored mixup sample and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub outer_iter: usize,
    pub query_id: usize,
    /// Training-set index of the query seed.
    pub seed_index: usize,
}

/// Append-only `D_mix`. Features are frozen at generation time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentStore {
    d: usize,
    k: usize,
    z: Vec<f64>,
    y: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl AugmentStore {
    pub fn new(d: usize, k: usize) -> Self {
        AugmentStore {
            d,
            k,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn append(&mut self, z_mix: &Tensor, y_mix: &Tensor, provenance: Vec<Provenance>) -> Result<()> {
        let n = provenance.len();
        if z_mix.shape() != [n, self.d] || y_mix.shape() != [n, self.k] {
            return Err(MpbmError::shape(
                "AugmentStore::append",
                format!("{:?} / {:?} for {n} samples, d = {}, K = {}", z_mix.shape(), y_mix.shape(), self.d, self.k),
            ));
        }
        if !z_mix.is_finite() || !y_mix.is_finite() {
            return Err(MpbmError::NonFinite("mixup sample"));
        }
        self.z.extend_from_slice(z_mix.data());
        self.y.extend_from_slice(y_mix.data());
        self.provenance.extend(provenance);
        Ok(())
    }

    pub fn sample(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let mut z = Vec::with_capacity(idx.len() * self.d);
        let mut y = Vec::with_capacity(idx.len() * self.k);
        for &i in idx {
            z.extend_from_slice(&self.z[i * self.d..(i + 1) * self.d]);
            y.extend_from_slice(&self.y[i * self.k..(i + 1) * self.k]);
        }
        (
            Tensor::from_parts(vec![idx.len(), self.d], z),
            Tensor::from_parts(vec![idx.len(), self.k], y),
        )
    }

    pub fn all(&self) -> (Tensor, Tensor) {
        (
            Tensor::from_parts(vec![self.len(), self.d], self.z.clone()),
            Tensor::from_parts(vec![self.len(), self.k], self.y.clone()),
        )
    }
}

/// Shuffled passes over `0..n` in chunks of `b`; the last chunk of a pass may
/// be short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: Rng,
    n: usize,
    b: usize,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, b: usize, rng: Rng) -> Self {
        BatchSampler {
            rng,
            n,
            b,
            perm: Vec::new(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.perm = self.rng.permutation(self.n);
            self.pos = 0;
        }
        let end = (self.pos + self.b).min(self.n);
        let out = self.perm[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn batches_per_pass(&self) -> usize {
        self.n.div_ceil(self.b)
    }
}

/// Mean CE of the classifier on mixup features, classifier gradient-stopped.
/// `y_mix` stays on the tape, so the generator receives gradient through both
/// the features and the soft labels.
pub fn generator_loss<'t>(z_mix: Var<'t>, y_mix: Var<'t>, model: &PredictionModel, tape: &'t Tape) -> Result<Var<'t>> {
    let psi = model.classifier.params().bind(tape, false);
    model.classifier.classify(&psi, z_mix)?.cross_entropy(y_mix, Reduction::Mean)
}

/// `E log D(real) + E log(1 − D(mix))`.
pub fn adversarial_loss<'t>(
    real: Var<'t>,
    mix: Var<'t>,
    disc: &Discriminator,
    omega: &[Var<'t>],
) -> Result<Var<'t>> {
    if real.value().rows() == 0 || mix.value().rows() == 0 {
        return Err(MpbmError::shape("adversarial_loss", "empty batch"));
    }
    let on_real = disc.discriminate(omega, real)?.ln()?.mean();
    let on_mix = disc.discriminate(omega, mix)?.affine(-1.0, 1.0).ln()?.mean();
    on_real.add(on_mix)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratorReport {
    pub l_mix_gen: Option<f64>,
    pub l_adv: Option<f64>,
    pub steps: usize,
    /// A non-finite loss or gradient stopped the phase; φ and ω were rolled
    /// back to their values at phase start.
    pub rolled_back: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    #[serde(rename = "L_sup")]
    pub l_sup: Option<f64>,
    #[serde(rename = "L_mix_gen")]
    pub l_mix_gen: Option<f64>,
    #[serde(rename = "L_adv")]
    pub l_adv: Option<f64>,
    #[serde(rename = "L_mix_tr")]
    pub l_mix_tr: Option<f64>,
    pub store_size: usize,
    pub eval: BTreeMap<String, f64>,
}

/// Inputs to one generator phase, fixed for all `J` steps.
pub struct GeneratorInputs {
    pub correlation: CorrelationMatrix,
    pub tasks: Vec<MixupTask>,
    /// Training-set features, for real batches fed to the discriminator.
    pub features: Tensor,
    pub seed_indices: Vec<usize>,
}

struct Streams {
    query_seeds: Rng,
    sgld_noise: Rng,
    base_batches: Rng,
    real_batches: Rng,
    store: Rng,
    correlation: Rng,
    mixup: Rng,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: PredictionModel,
    pub generator: MixupGeneratorParams,
    pub discriminator: Discriminator,
    pub store: AugmentStore,
    opt_f: RmsProp,
    opt_h: RmsProp,
    opt_g: RmsProp,
    opt_d: RmsProp,
    streams: Streams,
    finetune_sampler: Option<BatchSampler>,
    iter: usize,
}

fn check_loss(phase: &'static str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(MpbmError::Divergence { phase, step, loss })
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, arch: Architecture) -> Result<Self> {
        let model = PredictionModel::new(arch, &mut Rng::stream(cfg.seed, streams::INIT))?;
        Self::with_model(cfg, model)
    }

    /// Start from an existing (typically pretrained) prediction model.
    pub fn with_model(cfg: TrainConfig, model: PredictionModel) -> Result<Self> {
        cfg.validate()?;
        let d = model.extractor.output_dim();
        let k = model.classifier.num_classes();
        let s = cfg.seed;
        Ok(Trainer {
            generator: MixupGeneratorParams::new(d, &mut Rng::stream(s, streams::GENERATOR_INIT)),
            discriminator: Discriminator::new(d, &mut Rng::stream(s, streams::DISCRIMINATOR_INIT)),
            store: AugmentStore::new(d, k),
            opt_f: RmsProp::new(cfg.lr),
            opt_h: RmsProp::new(cfg.lr),
            opt_g: RmsProp::new(cfg.generator_lr),
            opt_d: RmsProp::new(cfg.discriminator_lr),
            streams: Streams {
                query_seeds: Rng::stream(s, streams::QUERY_SEEDS),
                sgld_noise: Rng::stream(s, streams::SGLD_NOISE),
                base_batches: Rng::stream(s, streams::BASE_BATCHES),
                real_batches: Rng::stream(s, streams::REAL_BATCHES),
                store: Rng::stream(s, streams::STORE),
                correlation: Rng::stream(s, streams::CORRELATION),
                mixup: Rng::stream(s, streams::MIXUP),
            },
            finetune_sampler: None,
            iter: 0,
            model,
            cfg,
        })
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let arch = self.model.architecture();
        if data.input_shape() != arch.input_shape.as_slice() || data.num_classes() != arch.num_classes {
            return Err(MpbmError::shape(
                "trainer",
                format!(
                    "dataset {:?} / {} classes, model {:?} / {} classes",
                    data.input_shape(),
                    data.num_classes(),
                    arch.input_shape,
                    arch.num_classes
                ),
            ));
        }
        Ok(())
    }

    /// Supervised CE training for `pretrain_epochs` passes, with its own
    /// optimizer state.
    pub fn pretrain(&mut self, data: &Dataset) -> Result<PretrainReport> {
        self.check_data(data)?;
        let mut sampler = BatchSampler::new(data.len(), self.cfg.batch_size, Rng::stream(self.cfg.seed, streams::PRETRAIN));
        let mut opt_f = RmsProp::new(self.cfg.lr);
        let mut opt_h = RmsProp::new(self.cfg.lr);
        let mut report = PretrainReport::default();
        let mut step = 0;
        for _ in 0..self.cfg.pretrain_epochs {
            let mut total = 0.0;
            let passes = sampler.batches_per_pass();
            for _ in 0..passes {
                let batch = data.batch(&sampler.next_batch());
                let (l, _) = supervised_step(&mut self.model, &mut opt_f, &mut opt_h, &batch.inputs, &batch.labels, None, "pretrain", step)?;
                total += l;
                step += 1;
            }
            report.epoch_losses.push(total / passes as f64);
        }
        report.train_accuracy = self.model.accuracy(data.inputs(), data.labels())?;
        Ok(report)
    }

    /// Correlation matrix, SGLD queries and base batches for one generator
    /// phase, all under the frozen prediction model.
    pub fn prepare_generator_inputs(&mut self, data: &Dataset) -> Result<GeneratorInputs> {
        let f = &self.model.extractor;
        let features = f.features(data.inputs())?;
        let correlation = CorrelationMatrix::from_features(&features, self.cfg.correlation_max_rows, &mut self.streams.correlation)?;
        let m = self.cfg.queries_per_outer();
        let n = data.len();
        let seed_indices = if m <= n {
            self.streams.query_seeds.choose_distinct(n, m)
        } else {
            self.streams.query_seeds.choose_with_replacement(n, m)
        };
        let seeds = data.batch(&seed_indices);
        let queries = if self.cfg.ablation.no_sgld {
            seeds.inputs
        } else {
            sgld_query(&seeds.inputs, &seeds.labels, &self.model, &self.cfg.sgld, &mut self.streams.sgld_noise)?.query
        };
        let z_q = f.features(&queries)?;
        let mut tasks = Vec::with_capacity(m);
        for i in 0..m {
            let idx = self.streams.base_batches.choose_distinct(n, self.cfg.n_b);
            tasks.push(MixupTask {
                z_q: Tensor::from_parts(vec![1, z_q.cols()], z_q.row(i).to_vec()),
                z_b: features.select_rows(&idx),
                y_b: data.labels().select_rows(&idx),
            });
        }
        Ok(GeneratorInputs {
            correlation,
            tasks,
            features,
            seed_indices,
        })
    }

    /// `J` steps. Each step generates the mixup batch once, then takes an
    /// ascent step on `L_adv` in ω and a descent step on
    /// `L_mix^gen + λ_adv·L_adv` in φ, both from that forward pass.
    pub fn train_generator(&mut self, inputs: &GeneratorInputs) -> Result<GeneratorReport> {
        let lambda_adv = self.cfg.effective_lambda_adv();
        let use_gen = !self.cfg.ablation.no_mix_gen;
        let use_adv = lambda_adv > 0.0;
        let mut report = GeneratorReport::default();
        if self.cfg.generator_iters == 0 || !(use_gen || use_adv) {
            return Ok(report);
        }
        let snapshot = (self.generator.clone(), self.discriminator.clone(), self.opt_g.clone(), self.opt_d.clone());
        let (mut sum_gen, mut sum_adv) = (0.0, 0.0);
        let b = self.cfg.batch_size.min(inputs.features.rows());
        for step in 0..self.cfg.generator_iters {
            let tape = Tape::new();
            let phi = self.generator.bind(&tape, true);
            let omega = self.discriminator.params().bind(&tape, use_adv);
            let (z_mix, y_mix) = synthesize_many(&inputs.tasks, &inputs.correlation, &phi, self.cfg.mixgen(), &tape)?;
            let l_gen_term = generator_loss(z_mix, y_mix, &self.model, &tape)?;
            let l_adv = if use_adv {
                let idx = self.streams.real_batches.choose_distinct(inputs.features.rows(), b);
                let real = tape.constant(inputs.features.select_rows(&idx));
                Some(adversarial_loss(real, z_mix, &self.discriminator, &omega)?)
            } else {
                None
            };
            let mut total = if use_gen { Some(l_gen_term) } else { None };
            if let Some(adv) = l_adv {
                let weighted = adv.scale(lambda_adv);
                total = Some(match total {
                    Some(t) => t.add(weighted)?,
                    None => weighted,
                });
            }
            let total = total.expect("at least one generator term is active");
            let gen_value = l_gen_term.value().item();
            let adv_value = l_adv.map(|v| v.value().item());
            if !gen_value.is_finite() || adv_value.is_some_and(|v| !v.is_finite()) {
                return Ok(self.roll_back(snapshot, step));
            }

            let omega_grads = match l_adv {
                Some(adv) => {
                    let g = tape.backward(adv)?;
                    Some(omega.iter().map(|&w| g.get(w)).collect::<Vec<_>>())
                }
                None => None,
            };
            let g = tape.backward(total)?;
            let phi_grads: Vec<Tensor> = phi.vars().iter().map(|&w| g.get(w)).collect();
            let finite = phi_grads.iter().all(Tensor::is_finite)
                && omega_grads.as_ref().is_none_or(|gs| gs.iter().all(Tensor::is_finite));
            if !finite {
                return Ok(self.roll_back(snapshot, step));
            }
            if let Some(gs) = omega_grads {
                self.opt_d.step(self.discriminator.params_mut(), &gs, Direction::Ascent)?;
            }
            self.opt_g.step(self.generator.params_mut(), &phi_grads, Direction::Descent)?;
            sum_gen += gen_value;
            sum_adv += adv_value.unwrap_or(0.0);
            report.steps += 1;
        }
        let j = report.steps as f64;
        report.l_mix_gen = use_gen.then_some(sum_gen / j);
        report.l_adv = use_adv.then_some(sum_adv / j);
        Ok(report)
    }

    fn roll_back(
        &mut self,
        snapshot: (MixupGeneratorParams, Discriminator, RmsProp, RmsProp),
        steps: usize,
    ) -> GeneratorReport {
        (self.generator, self.discriminator, self.opt_g, self.opt_d) = snapshot;
        GeneratorReport {
            steps,
            rolled_back: true,
            ..Default::default()
        }
    }

    /// Generate `m` samples with the current φ and append them to the store.
    pub fn populate_store(&mut self, inputs: &GeneratorInputs) -> Result<()> {
        let tape = Tape::new();
        let phi = self.generator.bind(&tape, false);
        let (z, y) = synthesize_many(&inputs.tasks, &inputs.correlation, &phi, self.cfg.mixgen(), &tape)?;
        let provenance = inputs
            .seed_indices
            .iter()
            .enumerate()
            .map(|(q, &s)| Provenance {
                outer_iter: self.iter + 1,
                query_id: q,
                seed_index: s,
            })
            .collect();
        self.store.append(&z.value(), &y.value(), provenance)
    }

    /// `T_ft` steps on `L_sup + λ_mix·L_mix^tr`. Returns the mean of each
    /// term; the second is `None` when the store is unused.
    pub fn finetune(&mut self, data: &Dataset) -> Result<(f64, Option<f64>)> {
        self.check_data(data)?;
        let sampler = self.finetune_sampler.get_or_insert_with(|| {
            BatchSampler::new(data.len(), self.cfg.batch_size, Rng::stream(self.cfg.seed, streams::FINETUNE))
        });
        let steps = self.cfg.finetune_iters(data.len());
        let lr = self.cfg.finetune_lr(self.iter + 1);
        self.opt_f.lr = lr;
        self.opt_h.lr = lr;
        let lambda_mix = self.cfg.effective_lambda_mix();
        let use_store = self.cfg.method == Method::Mpbm && lambda_mix > 0.0 && !self.store.is_empty();
        let (mut sum_sup, mut sum_mix) = (0.0, 0.0);
        for step in 0..steps {
            let mut batch = data.batch(&sampler.next_batch());
            if self.cfg.method == Method::Mixup {
                batch = pairwise_mixup(&batch, self.cfg.mixup_alpha, &mut self.streams.mixup)?;
            }
            let mix = if use_store {
                let (z, y) = match self.cfg.store_sampling {
                    StoreSampling::Full => self.store.all(),
                    StoreSampling::Minibatch => {
                        let idx = self.streams.store.choose_distinct(self.store.len(), self.cfg.batch_size);
                        self.store.sample(&idx)
                    }
                };
                Some((z, y, lambda_mix))
            } else {
                None
            };
            let (ls, lm) = supervised_step(
                &mut self.model,
                &mut self.opt_f,
                &mut self.opt_h,
                &batch.inputs,
                &batch.labels,
                mix.as_ref().map(|(z, y, l)| (z, y, *l)),
                "finetune",
                step,
            )?;
            sum_sup += ls;
            sum_mix += lm.unwrap_or(0.0);
        }
        let n = steps.max(1) as f64;
        Ok((sum_sup / n, use_store.then_some(sum_mix / n)))
    }

    /// One full outer iteration.
    pub fn outer_iteration(&mut self, data: &Dataset, evals: &[&Dataset]) -> Result<IterMetrics> {
        self.check_data(data)?;
        let mut gen = GeneratorReport::default();
        if self.cfg.method == Method::Mpbm {
            let inputs = self.prepare_generator_inputs(data)?;
            gen = self.train_generator(&inputs)?;
            self.populate_store(&inputs)?;
        }
        let (l_sup, l_mix_tr) = self.finetune(data)?;
        self.iter += 1;
        Ok(IterMetrics {
            iter: self.iter,
            l_sup: Some(l_sup),
            l_mix_gen: gen.l_mix_gen,
            l_adv: gen.l_adv,
            l_mix_tr,
            store_size: self.store.len(),
            eval: self.evaluate(data, evals)?,
        })
    }

    pub fn evaluate(&self, source: &Dataset, targets: &[&Dataset]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        out.insert("source".to_string(), self.model.accuracy(source.inputs(), source.labels())?);
        for t in targets {
            out.insert(t.domain.clone(), self.model.accuracy(t.inputs(), t.labels())?);
        }
        Ok(out)
    }

    /// Remaining outer iterations; `observe` sees every record as it is
    /// produced and may abort the run by returning an error.
    pub fn run(
        &mut self,
        data: &Dataset,
        evals: &[&Dataset],
        mut observe: impl FnMut(&IterMetrics, &Trainer) -> Result<()>,
    ) -> Result<Vec<IterMetrics>> {
        let mut trace = Vec::new();
        while self.iter < self.cfg.outer_iters() {
            let m = self.outer_iteration(data, evals)?;
            observe(&m, self)?;
            trace.push(m);
        }
        Ok(trace)
    }

    /// All parameters: `f.*` extractor, `h.*` classifier, `g.*` generator,
    /// `d.*` discriminator.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut p = self.model.extractor.params().prefixed("f.");
        p.extend(self.model.classifier.params().prefixed("h."));
        p.extend(self.generator.params().prefixed("g."));
        p.extend(self.discriminator.params().prefixed("d."));
        let mut ck = Checkpoint::new(arch_value(self.model.architecture()), self.cfg.seed, self.iter as u64, p);
        ck.header.meta = serde_json::json!({ "store_size": self.store.len() });
        ck
    }
}

fn arch_value(arch: &Architecture) -> serde_json::Value {
    serde_json::to_value(arch).expect("architecture serializes")
}

/// Architecture recorded in a checkpoint header.
pub fn checkpoint_architecture(ck: &Checkpoint) -> Result<Architecture> {
    Ok(serde_json::from_value(ck.header.architecture.clone())?)
}

/// Load the prediction model from a checkpoint, refusing a different
/// architecture.
pub fn model_from_checkpoint(ck: &Checkpoint, arch: Architecture) -> Result<PredictionModel> {
    if ck.header.architecture != arch_value(&arch) {
        return Err(MpbmError::ArchitectureMismatch {
            checkpoint: ck.header.architecture.to_string(),
            expected: arch.describe(),
        });
    }
    let mut model = PredictionModel::new(arch, &mut Rng::new(0))?;
    model.extractor.params_mut().load_from(&ck.params.strip_prefix("f."))?;
    model.classifier.params_mut().load_from(&ck.params.strip_prefix("h."))?;
    Ok(model)
}

/// Pretrained-model checkpoint (`f.*`, `h.*` only).
pub fn model_checkpoint(model: &PredictionModel, seed: u64, step: u64) -> Checkpoint {
    let mut p: ParamSet = model.extractor.params().prefixed("f.");
    p.extend(model.classifier.params().prefixed("h."));
    Checkpoint::new(arch_value(model.architecture()), seed, step, p)
}

/// Mix each example with a random partner from the same batch.
pub fn pairwise_mixup(batch: &LabeledBatch, alpha: f64, rng: &mut Rng) -> Result<LabeledBatch> {
    let n = batch.inputs.rows();
    let perm = rng.permutation(n);
    let lam = rng.beta(alpha);
    let other_x = batch.inputs.select_rows(&perm);
    let other_y = batch.labels.select_rows(&perm);
    Ok(LabeledBatch {
        inputs: batch.inputs.zip_map(&other_x, |a, b| lam * a + (1.0 - lam) * b)?,
        labels: batch.labels.zip_map(&other_y, |a, b| lam * a + (1.0 - lam) * b)?,
    })
}

/// One descent step on mean CE, plus `λ · CE(h(z_mix), y_mix)` when a store
/// batch is given. The store term reaches only the classifier.
#[allow(clippy::too_many_arguments)]
fn supervised_step(
    model: &mut PredictionModel,
    opt_f: &mut RmsProp,
    opt_h: &mut RmsProp,
    x: &Tensor,
    y: &Tensor,
    mix: Option<(&Tensor, &Tensor, f64)>,
    phase: &'static str,
    step: usize,
) -> Result<(f64, Option<f64>)> {
    let tape = Tape::new();
    let (z, theta) = model.extractor.extract(&tape, tape.constant(x.clone()), false)?;
    let psi = model.classifier.params().bind(&tape, true);
    let l_sup = model.classifier.classify(&psi, z)?.cross_entropy(tape.constant(y.clone()), Reduction::Mean)?;
    let mut total = l_sup;
    let mut l_mix_value = None;
    if let Some((zm, ym, lambda)) = mix {
        let l_mix = model
            .classifier
            .classify(&psi, tape.constant(zm.clone()))?
            .cross_entropy(tape.constant(ym.clone()), Reduction::Mean)?;
        l_mix_value = Some(l_mix.value().item());
        check_loss(phase, step, l_mix.value().item())?;
        total = total.add(l_mix.scale(lambda))?;
    }
    let l_sup_value = l_sup.value().item();
    check_loss(phase, step, l_sup_value)?;
    let g = tape.backward(total)?;
    let gf: Vec<Tensor> = theta.iter().map(|&v| g.get(v)).collect();
    let gh: Vec<Tensor> = psi.iter().map(|&v| g.get(v)).collect();
    if gf.iter().chain(&gh).any(|t| !t.is_finite()) {
        return Err(MpbmError::Divergence {
            phase,
            step,
            loss: f64::NAN,
        });
    }
    opt_f.step(model.extractor.params_mut(), &gf, Direction::Descent)?;
    opt_h.step(model.classifier.params_mut(), &gh, Direction::Descent)?;
    Ok((l_sup_value, l_mix_value))
}
