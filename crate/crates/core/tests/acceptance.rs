//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting so the workspace test run stays usable when a
//! criterion cannot be met (for instance missing benchmark data). Set
//! `MPBM_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    correlation_gap, gradient_suite, instance, oracle_gap, permutation_gap, sgld_closed_form_gap, sgld_noise_variance_ratio,
    sgld_single_step_exact, simplex_violation, single_instance_gap,
};
use mpbm::data::idx::{dataset_from_idx, dataset_to_idx};
use mpbm::data::{one_hot, Dataset, IdxArray, IdxLoadOptions};
use mpbm::mixgen::{attention, synthesize, MixgenOptions};
use mpbm::{Rng, Tensor};

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let line = format!("{} {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mpbm(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mpbm"))
        .args(args)
        .env_remove("MPBM_OUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("mpbm {} exited {:?}: {}", args[0], o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn csv_rows(p: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    let header = r.headers().unwrap().clone();
    r.records()
        .map(|rec| header.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

/// Mean accuracy over target domains per group, from a `*_summary.csv`.
fn target_means(summary: &Path, group: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in csv_rows(summary) {
        if row["domain"] == "source" {
            continue;
        }
        let e = acc.entry(row[group].clone()).or_default();
        e.0 += row["mean"].parse::<f64>().unwrap();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn opts(label_softmax: bool) -> MixgenOptions {
    MixgenOptions { label_softmax }
}

fn properties() -> (f64, f64, f64, f64, f64, bool) {
    let mut rng = Rng::new(0x5eed);
    let (mut attn, mut ymix, mut perm, mut single, mut corr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..400 {
        let soft = i % 2 == 0;
        let (d, nb, k) = (1 + rng.below(6), 1 + rng.below(5), 2 + rng.below(4));
        let inst = instance(&mut rng, d, nb, k);
        attn = attn.max(simplex_violation(&attention(&inst.z_q, &inst.z_b, &inst.c, &inst.gen).unwrap().a));
        let s = synthesize(&inst.z_q, &inst.z_b, &inst.y_b, &inst.c, &inst.gen, opts(soft)).unwrap();
        ymix = ymix.max(simplex_violation(&s.y_mix));
        let one = instance(&mut rng, d, 1, k);
        single = single.max(single_instance_gap(&one, opts(soft)));
        let n = 3 + rng.below(17);
        corr = corr.max(correlation_gap(&rng.normal_tensor(&[n, d], 1.0)));
    }
    for nb in 1..=5 {
        for i in 0..8 {
            let (d, k) = (1 + rng.below(5), 2 + rng.below(3));
            let inst = instance(&mut rng, d, nb, k);
            perm = perm.max(permutation_gap(&inst, opts(i % 2 == 0)));
        }
    }
    let mut idx_ok = true;
    for _ in 0..50 {
        let (n, h, w) = (1 + rng.below(10), 1 + rng.below(6), 1 + rng.below(6));
        let pixels: Vec<f64> = (0..n * h * w).map(|_| rng.below(256) as f64 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let d = Dataset::new("p", "source", Tensor::new(vec![n, 1, h, w], pixels).unwrap(), one_hot(&labels, 10).unwrap()).unwrap();
        let (img, lab) = dataset_to_idx(&d).unwrap();
        idx_ok &= IdxArray::parse(&img.to_bytes()).unwrap() == img && IdxArray::parse(&lab.to_bytes()).unwrap() == lab;
        let back = dataset_from_idx(&img, &lab, &IdxLoadOptions::default(), "p").unwrap();
        idx_ok &= back.inputs() == d.inputs() && back.labels() == d.labels();
    }
    (attn, ymix, perm, single, corr, idx_ok)
}

fn blobs_protocol(root: &Path) -> Result<(BTreeMap<String, f64>, Duration), String> {
    let cfg = repo().join("configs/blobs/mpbm.json");
    let t0 = Instant::now();
    mpbm(&["ablate", "--config", cfg.to_str().unwrap(), "--with-baselines", "--out", root.to_str().unwrap()])?;
    Ok((target_means(&root.join("blobs/ablate/ablate_summary.csv"), "variant"), t0.elapsed()))
}

fn criterion5(r: &mut Report, means: &BTreeMap<String, f64>, elapsed: Duration) {
    let (erm, full) = (means["erm"], means["full"]);
    let margin = 100.0 * (full - erm);
    let secs = elapsed.as_secs_f64();
    r.record(
        5,
        "synthetic-shift generalization",
        margin >= 2.0 && secs <= 300.0,
        format!("MPBM {:.2}% vs ERM {:.2}% (+{margin:.2} pts, need >= 2), 5 seeds, {secs:.1}s", 100.0 * full, 100.0 * erm),
    );
}

fn criterion7(r: &mut Report, means: &BTreeMap<String, f64>) {
    let ablations = ["no_mix_tr", "no_adv", "no_mix_gen", "no_sgld"];
    let full = means["full"];
    let full_best = ablations.iter().all(|a| full >= means[*a]);
    let worst = ablations.iter().copied().min_by(|a, b| means[*a].total_cmp(&means[*b])).unwrap();
    let detail = std::iter::once(format!("full {:.2}", 100.0 * full))
        .chain(ablations.iter().map(|a| format!("{a} {:.2}", 100.0 * means[*a])))
        .collect::<Vec<_>>()
        .join(", ");
    r.record(7, "ablation ordering", full_best && worst == "no_mix_tr", format!("{detail}; worst {worst}"));
}

fn criterion6(r: &mut Report, root: &Path) {
    let name = "MNIST -> USPS";
    let missing: Vec<String> = ["MPBM_MNIST_DIR", "MPBM_USPS_DIR"]
        .iter()
        .filter(|v| std::env::var_os(v).is_none_or(|p| !Path::new(&p).is_dir()))
        .map(|v| v.to_string())
        .collect();
    if !missing.is_empty() {
        r.record(6, name, false, format!("not run: {} unset or not a directory", missing.join(", ")));
        return;
    }
    let cfg = repo().join("configs/mnist_usps/mpbm.json");
    let cfg = cfg.to_str().unwrap();
    let t0 = Instant::now();
    let mut means = BTreeMap::new();
    for (label, extra) in [("erm", Some("method=\"erm\"")), ("mpbm", None)] {
        let out = root.join(label);
        let mut args = vec!["train", "--config", cfg, "--out", out.to_str().unwrap()];
        if let Some(o) = extra {
            args.extend(["--override", o]);
        }
        if let Err(e) = mpbm(&args) {
            r.record(6, name, false, e);
            return;
        }
        let mut accs = Vec::new();
        for s in 0..5 {
            for row in csv_rows(&out.join(format!("mnist_usps/seed-{s}/eval.csv"))) {
                if row["domain"] == "usps" {
                    accs.push(row["accuracy"].parse::<f64>().unwrap());
                }
            }
        }
        means.insert(label, 100.0 * accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let secs = t0.elapsed().as_secs_f64();
    let (erm, mp) = (means["erm"], means["mpbm"]);
    r.record(
        6,
        name,
        mp - erm >= 3.0 && (70.0..=82.0).contains(&erm) && secs <= 7200.0,
        format!("MPBM {mp:.2}% vs ERM {erm:.2}% (need +3, ERM in 70-82), 5 seeds, {secs:.0}s"),
    );
}

/// Every file under `a` compared byte for byte with `b`. Recorded configs
/// name their output root, so that prefix is masked first.
fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut files = 0;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(a.join(&rel)).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            let rel = rel.join(entry.file_name());
            if entry.file_type().map_err(|e| e.to_string())?.is_dir() {
                stack.push(rel);
                continue;
            }
            let mut left = fs::read(a.join(&rel)).map_err(|e| e.to_string())?;
            let mut right = fs::read(b.join(&rel)).map_err(|e| format!("{}: {e}", rel.display()))?;
            if rel.file_name().is_some_and(|n| n == "config.json") {
                left = mask(&left, a);
                right = mask(&right, b);
            }
            if left != right {
                return Err(format!("{} differs", rel.display()));
            }
            files += 1;
        }
    }
    Ok(files)
}

fn mask(bytes: &[u8], root: &Path) -> Vec<u8> {
    String::from_utf8_lossy(bytes).replace(root.to_str().unwrap(), "<root>").into_bytes()
}

fn criterion8(r: &mut Report, blobs_first: &Path, root: &Path) {
    let check = || -> Result<String, String> {
        let cfg = repo().join("configs/blobs/mpbm.json");
        let cfg = cfg.to_str().unwrap();
        let second = root.join("ablate-again");
        mpbm(&["ablate", "--config", cfg, "--with-baselines", "--out", second.to_str().unwrap()])?;
        let mut files = same_tree(blobs_first, &second)?;
        let runs: [(&str, Vec<&str>); 2] = [
            ("train", vec!["train", "--config", cfg, "--seed", "11"]),
            ("sweep", vec!["sweep", "--config", cfg, "--param", "T", "--values", "1,3", "--seeds", "11"]),
        ];
        for (label, args) in runs {
            let dirs = [root.join(format!("{label}-a")), root.join(format!("{label}-b"))];
            for d in &dirs {
                let mut a = args.clone();
                a.extend(["--out", d.to_str().unwrap()]);
                mpbm(&a)?;
            }
            files += same_tree(&dirs[0], &dirs[1])?;
        }
        let ck = root.join("train-a/blobs/seed-11/checkpoints/final.mpbm");
        let mut outputs = Vec::new();
        for tag in ["eval-a", "eval-b"] {
            let d = root.join(tag);
            outputs.push(mpbm(&["eval", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--out", d.to_str().unwrap()])?);
        }
        if outputs[0] != outputs[1] {
            return Err("eval stdout differs".into());
        }
        files += same_tree(&root.join("eval-a"), &root.join("eval-b"))?;
        Ok(format!("ablate, train, sweep and eval repeated: {files} files byte-identical"))
    };
    match check() {
        Ok(d) => r.record(8, "determinism", true, d),
        Err(e) => r.record(8, "determinism", false, e),
    }
}

fn main() {
    let mut r = Report { lines: Vec::new() };
    let tmp = tempfile::tempdir().expect("tempdir");

    let t0 = Instant::now();
    let (attn, ymix, perm, single, corr, idx_ok) = properties();
    let secs = t0.elapsed().as_secs_f64();
    r.record(
        1,
        "property suite",
        attn <= 1e-9 && ymix <= 1e-9 && perm <= 1e-12 && single <= 1e-12 && corr <= 1e-12 && idx_ok && secs < 120.0,
        format!(
            "attention {attn:.1e}, y_mix {ymix:.1e}, permutations {perm:.1e}, N_b=1 {single:.1e}, correlation {corr:.1e}, idx {}, {secs:.1}s",
            if idx_ok { "ok" } else { "mismatch" }
        ),
    );

    let g = gradient_suite(0x9e37);
    let groups = g.by_group.iter().map(|(n, k, w)| format!("{n} x{k} {w:.1e}")).collect::<Vec<_>>().join("; ");
    r.record(
        2,
        "gradient suite",
        g.instances >= 100 && g.worst <= 1e-4,
        format!("{} instances, worst relative error {:.2e} ({groups})", g.instances, g.worst),
    );

    let mut rng = Rng::new(0x0c1e);
    let mut worst = 0.0f64;
    let mut count = 0;
    for d in 1..=4 {
        for nb in 1..=3 {
            for _ in 0..25 {
                let k = 2 + rng.below(3);
                worst = worst.max(oracle_gap(&instance(&mut rng, d, nb, k)));
                count += 1;
            }
        }
    }
    r.record(3, "oracle equivalence", worst <= 1e-12, format!("{count} instances, max gap {worst:.2e}"));

    let mut rng = Rng::new(0x567d);
    let exact = (0..20).all(|_| sgld_single_step_exact(&mut rng));
    let closed = (0..5).map(|_| sgld_closed_form_gap(&mut rng)).fold(0.0, f64::max);
    let ratios: Vec<f64> = [0.01, 0.05, 0.5].iter().enumerate().map(|(i, &eta)| sgld_noise_variance_ratio(10_000, eta, 40 + i as u64)).collect();
    let var_ok = ratios.iter().all(|v| (v - 1.0).abs() <= 0.05);
    r.record(
        4,
        "SGLD reductions",
        exact && closed <= 1e-10 && var_ok,
        format!(
            "single step {}, closed form gap {closed:.1e}, variance/2eta {}",
            if exact { "exact" } else { "inexact" },
            ratios.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
        ),
    );

    let blobs_root = tmp.path().join("blobs-a");
    match blobs_protocol(&blobs_root) {
        Ok((means, elapsed)) => {
            criterion5(&mut r, &means, elapsed);
            criterion6(&mut r, &tmp.path().join("mnist"));
            criterion7(&mut r, &means);
        }
        Err(e) => {
            r.record(5, "synthetic-shift generalization", false, e.clone());
            criterion6(&mut r, &tmp.path().join("mnist"));
            r.record(7, "ablation ordering", false, e);
        }
    }
    criterion8(&mut r, &blobs_root, tmp.path());

    let failed = r.lines.iter().filter(|(p, _)| !p).count();
    println!("{} of {} criteria pass", r.lines.len() - failed, r.lines.len());
    if failed > 0 && std::env::var_os("MPBM_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
