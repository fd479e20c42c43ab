//! The `mpbm` command line.
//!
//! ```text
//! mpbm train  --config cfg.json [--seed 7] [--override lambda_adv=0] [--out runs]
//! mpbm eval   --manifest m.json --checkpoint a.mpbm --checkpoint b.mpbm [--config cfg.json] [--out dir]
//! mpbm ablate --config cfg.json [--seeds 0,1,2,3,4] [--with-baselines]
//! mpbm sweep  --config cfg.json --param N_b --values 1,3,5,8 [--seeds 0,1]
//! ```
//!
//! Output root: `--out`, else the config's `output_dir`, else `$MPBM_OUT_DIR`,
//! else `./runs`. Exit status 0 on success, 2 for configuration or input
//! errors, 3 when training aborts (a checkpoint of the failing state is kept),
//! 1 otherwise.

pub mod config;
pub mod report;
pub mod run;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{apply_override, RunConfig};
use report::{csv_string, num, summary_rows, write_csv};
use run::{execute, headline_accuracy, initial_model, load_for_seed, run_variants, Variant, VariantResult};

use crate::data::Manifest;
use crate::error::{MpbmError, Result};
use crate::models::Checkpoint;
use crate::trainer::{checkpoint_architecture, model_from_checkpoint, Ablation, Method};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mpbm", version, about = "Model-aware parametric batch-wise mixup")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain and fine-tune one run per seed.
    Train(TrainArgs),
    /// Accuracy of saved checkpoints on every domain of a manifest.
    Eval(EvalArgs),
    /// The full model and its four ablations from a shared pretrain.
    Ablate(AblateArgs),
    /// One run per value of a hyper-parameter per seed.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Set a config key, e.g. `lambda_adv=0` or `sgld.eta=0.05`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset manifest; defaults to the one named by `--config`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Refuse checkpoints whose architecture differs from this config's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `eval.csv` and `eval_summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Also run ERM and input-space mixup from the same pretrain.
    #[arg(long)]
    pub with_baselines: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "lambda_adv")]
    LambdaAdv,
    #[value(name = "lambda_mix")]
    LambdaMix,
    /// SGLD steps.
    #[value(name = "T")]
    T,
    /// Mixup batch size.
    #[value(name = "N_b")]
    NB,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaAdv => "lambda_adv",
            SweepParam::LambdaMix => "lambda_mix",
            SweepParam::T => "T",
            SweepParam::NB => "N_b",
        }
    }

    /// Apply `value` to `cfg`, returning its canonical text.
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<String> {
        let int = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(MpbmError::config(self.name(), format!("needs a positive integer, got {value}")))
            }
        };
        Ok(match self {
            SweepParam::LambdaAdv => {
                cfg.train.lambda_adv = value;
                num(value)
            }
            SweepParam::LambdaMix => {
                cfg.train.lambda_mix = value;
                num(value)
            }
            SweepParam::T => {
                cfg.train.sgld.steps = int()?;
                cfg.train.sgld.steps.to_string()
            }
            SweepParam::NB => {
                cfg.train.n_b = int()?;
                cfg.train.n_b.to_string()
            }
        })
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

pub fn exit_code(e: &MpbmError) -> u8 {
    match e {
        MpbmError::Divergence { .. } | MpbmError::NonFinite(_) => EXIT_ABORT,
        MpbmError::Config { .. }
        | MpbmError::Json(_)
        | MpbmError::Io { .. }
        | MpbmError::Format { .. }
        | MpbmError::ArchitectureMismatch { .. }
        | MpbmError::UnsupportedShift { .. }
        | MpbmError::Shape { .. } => EXIT_CONFIG,
        MpbmError::Invariant(_) | MpbmError::Index { .. } => EXIT_OTHER,
    }
}

/// Parse `args` (including the program name) and run; never panics on bad
/// input.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match execute_command(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn execute_command(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn load_config(a: &RunArgs, seeds: &[u64]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
        cfg.train.seed = s;
    } else if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    Ok(cfg)
}

fn output_root(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os("MPBM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_root(a: &RunArgs, cfg: &RunConfig) -> PathBuf {
    output_root(a.out.as_deref(), Some(cfg)).join(cfg.name.as_deref().unwrap_or("run"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.run, &[])?;
    let manifest = cfg.manifest()?;
    let root = run_root(&a.run, &cfg);
    let mut cache = None;
    for seed in cfg.seed_list() {
        let data = load_for_seed(&manifest, seed, &mut cache)?;
        let seeded = cfg.for_seed(seed);
        let dir = root.join(format!("seed-{seed}"));
        let model = initial_model(&seeded, data, &dir)?;
        let eval = execute(&seeded, model, data, &dir)?;
        eprintln!("seed {seed}: {}", run::format_eval(&eval));
        println!("{}", dir.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.config.as_ref().map(|p| RunConfig::load(p, &[])).transpose()?;
    let manifest = match (&a.manifest, &cfg) {
        (Some(p), _) => Manifest::load(p)?,
        (None, Some(c)) => c.manifest()?,
        (None, None) => return Err(MpbmError::config("--manifest", "give --manifest or --config")),
    };
    let mut cache = None;
    let mut rows = Vec::new();
    let mut per_domain: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for path in &a.checkpoints {
        let ck = Checkpoint::load(path)?;
        let data = load_for_seed(&manifest, ck.header.seed, &mut cache)?;
        let mut domains = vec![&data.source];
        domains.extend(data.targets.iter());
        let found = checkpoint_architecture(&ck).map_err(|_| MpbmError::ArchitectureMismatch {
            checkpoint: ck.header.architecture.to_string(),
            expected: "a known architecture".into(),
        })?;
        let expected = match &cfg {
            Some(c) => c.architecture_for(&data.source)?,
            None => {
                if found.input_shape != data.source.input_shape() || found.num_classes != data.source.num_classes() {
                    return Err(MpbmError::ArchitectureMismatch {
                        checkpoint: found.describe(),
                        expected: format!(
                            "input shape {:?}, {} classes (dataset)",
                            data.source.input_shape(),
                            data.source.num_classes()
                        ),
                    });
                }
                found
            }
        };
        let model = model_from_checkpoint(&ck, expected)?;
        for d in &domains {
            let acc = model.accuracy(d.inputs(), d.labels())?;
            rows.push(vec![
                path.display().to_string(),
                ck.header.seed.to_string(),
                d.domain.clone(),
                num(acc),
            ]);
            per_domain.entry(("all".into(), d.domain.clone())).or_default().push(acc);
        }
    }
    let summary: Vec<Vec<String>> = summary_rows(&per_domain).into_iter().map(|r| r[1..].to_vec()).collect();
    let header = ["checkpoint", "seed", "domain", "accuracy"];
    let summary_header = ["domain", "mean", "std", "n"];
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| MpbmError::io(out, e))?;
        write_csv(&out.join("eval.csv"), &header, &rows)?;
        write_csv(&out.join("eval_summary.csv"), &summary_header, &summary)?;
    }
    print!("{}", csv_string(&summary_header, &summary));
    Ok(())
}

/// Long-format results plus a per-(group, domain) summary.
fn write_results(root: &Path, stem: &str, group: &str, results: &[VariantResult]) -> Result<()> {
    let mut rows = Vec::new();
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in results {
        for (d, acc) in &r.eval {
            rows.push(vec![r.label.clone(), r.seed.to_string(), d.clone(), num(*acc)]);
            grouped.entry((r.label.clone(), d.clone())).or_default().push(*acc);
        }
    }
    write_csv(&root.join(format!("{stem}.csv")), &[group, "seed", "domain", "accuracy"], &rows)?;
    let summary = summary_rows(&grouped);
    let header = [group, "domain", "mean", "std", "n"];
    write_csv(&root.join(format!("{stem}_summary.csv")), &header, &summary)?;
    print!("{}", csv_string(&header, &summary));
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(&a.run, &a.seeds)?;
    let manifest = cfg.manifest()?;
    let root = run_root(&a.run, &cfg).join("ablate");
    let mut variants: Vec<Variant> = Ablation::VARIANTS
        .iter()
        .map(|(name, abl)| {
            let mut c = cfg.clone();
            c.train.method = Method::Mpbm;
            c.train.ablation = *abl;
            Variant {
                label: name.to_string(),
                dir: name.to_string(),
                cfg: c,
            }
        })
        .collect();
    if a.with_baselines {
        for (name, method) in [("erm", Method::Erm), ("mixup", Method::Mixup)] {
            let mut c = cfg.clone();
            c.train.method = method;
            c.train.ablation = Ablation::default();
            variants.push(Variant {
                label: name.into(),
                dir: name.into(),
                cfg: c,
            });
        }
    }
    let results = run_variants(&cfg, &variants, &manifest, &root)?;
    write_results(&root, "ablate", "variant", &results)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.run, &a.seeds)?;
    let manifest = cfg.manifest()?;
    let name = a.param.name();
    let root = run_root(&a.run, &cfg).join(format!("sweep-{name}"));
    let mut variants = Vec::new();
    for &v in &a.values {
        let mut c = cfg.clone();
        let text = a.param.apply(&mut c, v)?;
        c.validate()?;
        variants.push(Variant {
            dir: format!("{name}={text}"),
            label: text,
            cfg: c,
        });
    }
    let results = run_variants(&cfg, &variants, &manifest, &root)?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![name.to_string(), r.label.clone(), r.seed.to_string(), num(headline_accuracy(&r.eval))])
        .collect();
    let header = ["param", "value", "seed", "accuracy"];
    write_csv(&root.join("sweep.csv"), &header, &rows)?;
    print!("{}", csv_string(&header, &rows));
    Ok(())
}
