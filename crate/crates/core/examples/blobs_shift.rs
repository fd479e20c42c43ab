//! Source/target experiment on 2-D blobs: pretrain once per seed, then
//! fine-tune ERM, MPBM and the ablations from the same pretrained model.
//!
//! ```text
//! cargo run --release --example blobs_shift -- [overrides.json]
//! ```

use std::time::Instant;

use mpbm::data::{apply_shifts, synth_blobs, BlobSpec, Dataset, ShiftKind, ShiftSpec};
use mpbm::models::Architecture;
use mpbm::trainer::{Ablation, Method, TrainConfig, Trainer};

#[derive(serde::Deserialize)]
#[serde(default)]
struct Setup {
    classes: usize,
    per_class: usize,
    target_per_class: usize,
    separation: f64,
    std: f64,
    rotate: f64,
    translate: [f64; 2],
    target_noise: f64,
    hidden: Vec<usize>,
    d: usize,
    seeds: Vec<u64>,
    train: TrainConfig,
    variants: Vec<String>,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            classes: 3,
            per_class: 5,
            target_per_class: 250,
            separation: 0.25,
            std: 0.06,
            rotate: 35.0,
            translate: [0.0, 0.0],
            target_noise: 0.0,
            hidden: vec![32],
            d: 16,
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig {
                epochs: 30,
                pretrain_epochs: 30,
                batch_size: 8,
                lr: 1e-2,
                generator_lr: 1e-2,
                discriminator_lr: 1e-2,
                lambda_mix: 1.0,
                label_softmax: false,
                sgld: mpbm::query::SgldConfig {
                    eta: 0.05,
                    ..Default::default()
                },
                ..Default::default()
            },
            variants: ["erm", "mixup", "full", "no_mix_tr", "no_adv", "no_mix_gen", "no_sgld"]
                .map(String::from)
                .to_vec(),
        }
    }
}

fn main() -> mpbm::Result<()> {
    let setup: Setup = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).expect("read setup"))?,
        None => Setup::default(),
    };
    let t0 = Instant::now();
    let mut sums = vec![0.0; setup.variants.len()];
    for &seed in &setup.seeds {
        let blobs = |per_class, s| {
            synth_blobs(&BlobSpec {
                num_classes: setup.classes,
                per_class,
                separation: setup.separation,
                std: setup.std,
                seed: s,
            })
        };
        let source = blobs(setup.per_class, 1000 + seed)?;
        let chain = [
            ShiftSpec::new(ShiftKind::Rotate { degrees: setup.rotate }, 0),
            ShiftSpec::new(
                ShiftKind::AffineWarp {
                    shear: 0.0,
                    scale: 1.0,
                    translate: setup.translate,
                },
                0,
            ),
            ShiftSpec::new(ShiftKind::GaussianNoise { std: setup.target_noise }, 7 + seed),
        ];
        let mut target = apply_shifts(&blobs(setup.target_per_class, 2000 + seed)?, &chain)?;
        target.domain = "target".into();
        let arch = Architecture::mlp(2, &setup.hidden, setup.d, setup.classes);
        let mut base_cfg = setup.train.clone();
        base_cfg.seed = seed;
        let mut pre = Trainer::new(base_cfg.clone(), arch)?;
        let report = pre.pretrain(&source)?;
        let pre_acc = pre.evaluate(&source, &[&target])?;
        print!("seed {seed}: pretrain src {:.3} tgt {:.3} |", report.train_accuracy, pre_acc["target"]);
        for (vi, v) in setup.variants.iter().enumerate() {
            let mut cfg = base_cfg.clone();
            match v.as_str() {
                "erm" => cfg.method = Method::Erm,
                "mixup" => cfg.method = Method::Mixup,
                name => {
                    cfg.ablation = Ablation::VARIANTS.iter().find(|(n, _)| *n == name).expect("variant").1;
                }
            }
            let acc = finetune(cfg, &pre, &source, &target)?;
            sums[vi] += acc;
            print!(" {v} {acc:.3}");
        }
        println!();
    }
    print!("mean:");
    for (v, s) in setup.variants.iter().zip(&sums) {
        print!(" {v} {:.4}", s / setup.seeds.len() as f64);
    }
    println!("\nelapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn finetune(cfg: TrainConfig, pre: &Trainer, source: &Dataset, target: &Dataset) -> mpbm::Result<f64> {
    let mut t = Trainer::with_model(cfg, pre.model.clone())?;
    let trace = t.run(source, &[target], |_, _| Ok(()))?;
    if std::env::var_os("BLOBS_TRACE").is_some() {
        let tgt: Vec<String> = trace.iter().map(|m| format!("{:.2}", m.eval["target"])).collect();
        eprintln!("  [{:?} {:?}] target trace {}", t.cfg.method, t.cfg.ablation, tgt.join(" "));
        for m in trace.iter().step_by(5) {
            eprintln!("    {}", serde_json::to_string(m).unwrap());
        }
    }
    Ok(trace.last().map_or(0.0, |m| m.eval["target"]))
}
