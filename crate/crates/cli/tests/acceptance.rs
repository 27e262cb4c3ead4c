//! Acceptance suite: one PASS/FAIL line per criterion, printed in order.
//!
//! Correctness gates fail the test. Wall-clock budgets are measured and printed with
//! the verdict but do not fail the build, since they depend on the host. Criterion 9
//! (a 40-epoch comparative CV) runs only with `NERVESEG_ACCEPTANCE_FULL=1`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nerveseg::autograd::{ConvSpec, Graph};
use nerveseg::data::{gen_phantom_subjects, AugmentConfig};
use nerveseg::metrics::{aggregate_report, binarize, dice, BinaryMask, RunScore};
use nerveseg::model::{Arch, ModelConfig};
use nerveseg::trainer::checkpoint::{Checkpoint, CheckpointError};
use nerveseg::trainer::{load_checkpoint, mean_dice, save_checkpoint, simulate_early_stopping, train_run, TrainConfig};
use nerveseg::verify::gradient_suite;
use nerveseg::{Error, Rng, Tensor};
use nerveseg_cli::run_cli;

/// Verdict of one criterion: correctness plus an optional wall-clock budget.
struct Outcome {
    ok: bool,
    detail: String,
    budget: Option<(Duration, Duration)>,
}

impl Outcome {
    fn timed(ok: bool, detail: String, took: Duration, limit: Duration) -> Self {
        Outcome { ok, detail, budget: Some((took, limit)) }
    }
}

fn emit(line: &str) {
    // bypass the harness capture so the table is always visible
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_cli(args.iter().copied(), &mut out, &mut std::io::sink());
    (code, String::from_utf8(out).unwrap())
}

fn mins(d: Duration) -> String {
    if d.as_secs_f64() < 120.0 {
        format!("{:.2}s", d.as_secs_f64())
    } else {
        format!("{:.1}min", d.as_secs_f64() / 60.0)
    }
}

fn receptive_field_anchor() -> Outcome {
    let t = Instant::now();
    let (c1, plain) = cli(&["rf", "--arch", "unet"]);
    let (c2, dilated) = cli(&["rf", "--arch", "dilated", "--dilations", "2,4", "--input", "128"]);
    let took = t.elapsed();
    let ok = c1 == 0
        && c2 == 0
        && plain.contains("innermost receptive field: 68\n")
        && plain.contains("covers input: no\n")
        && dilated.contains("innermost receptive field: 164\n")
        && dilated.contains("covers input: yes\n");
    let grab = |s: &str| s.lines().find(|l| l.starts_with("innermost")).unwrap_or("?").to_string();
    Outcome::timed(ok, format!("unet {}; dilated {}", grab(&plain), grab(&dilated)), took, Duration::from_secs(1))
}

fn gradient_suite_check() -> Outcome {
    const OPS: [&str; 12] = [
        "conv2d_d1",
        "conv2d_d2",
        "conv2d_d4",
        "conv2d_stride2",
        "transposed_conv2d",
        "maxpool2d",
        "prelu",
        "sigmoid",
        "bilinear_upsample2d",
        "concat",
        "residual_add",
        "bce_loss",
    ];
    let seeds = [1, 2, 3, 4, 5];
    let t = Instant::now();
    let cases = gradient_suite(&seeds).unwrap();
    let took = t.elapsed();
    let (mut worst_op, mut worst_net) = (0.0f64, 0.0f64);
    let mut ok = true;
    for op in OPS {
        let runs: Vec<_> = cases.iter().filter(|c| c.name == op).collect();
        ok &= runs.len() == seeds.len();
        for c in runs {
            ok &= c.report.checked > 0 && c.report.max_rel_err <= 1e-5;
            worst_op = worst_op.max(c.report.max_rel_err);
        }
    }
    let net: Vec<_> = cases.iter().filter(|c| c.name.starts_with("dilated_unet")).collect();
    ok &= net.len() == seeds.len();
    for c in net {
        ok &= c.report.checked > 0 && c.report.max_rel_err <= 1e-4;
        worst_net = worst_net.max(c.report.max_rel_err);
    }
    Outcome::timed(
        ok,
        format!("{} cases; worst op rel err {worst_op:.2e} (<= 1e-5), network {worst_net:.2e} (<= 1e-4)", cases.len()),
        took,
        Duration::from_secs(120),
    )
}

/// Direct summation, in f64, straight from the definition of cross-correlation.
#[allow(clippy::needless_range_loop)]
fn direct_conv(x: &[f64], xd: [usize; 4], w: &[f64], wd: [usize; 4], b: &[f64], spec: ConvSpec) -> Vec<f64> {
    let [n, cin, h, wi] = xd;
    let [cout, _, k, _] = wd;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let span = d * (k as isize - 1) + 1;
    let oh = ((h as isize + 2 * p - span) / s + 1) as usize;
    let ow = ((wi as isize + 2 * p - span) / s + 1) as usize;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..oh as isize {
                for j in 0..ow as isize {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for u in 0..k as isize {
                            for v in 0..k as isize {
                                let (y, xx) = (i * s - p + u * d, j * s - p + v * d);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wi as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + y as usize) * wi + xx as usize;
                                let wix = ((co * cin + ci) * k + u as usize) * k + v as usize;
                                acc += x[xi] * w[wix];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn convolution_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(2718);
    let mut worst = 0.0f64;
    let mut covered = std::collections::BTreeSet::new();
    let mut cases = 0;
    while cases < 50 {
        let spec = ConvSpec {
            dilation: [1, 2, 4][rng.below(3) as usize],
            padding: rng.below(3) as usize,
            stride: 1 + rng.below(2) as usize,
        };
        let k = [1, 2, 3][rng.below(3) as usize];
        let (n, cin, cout) = (1 + rng.below(2) as usize, 1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let (h, w) = (1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
        let span = spec.dilation * (k - 1) + 1;
        if h + 2 * spec.padding < span || w + 2 * spec.padding < span {
            continue;
        }
        cases += 1;
        covered.insert((spec.dilation, spec.padding, spec.stride));
        let xd = [n, cin, h, w];
        let wd = [cout, cin, k, k];
        let x: Vec<f64> = (0..n * cin * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wv: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let want = direct_conv(&x, xd, &wv, wd, &b, spec);

        let mut g = Graph::<f32>::new();
        let to32 = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<_>>();
        let xv = g.input(Tensor::from_vec(xd, to32(&x)).unwrap());
        let wvv = g.input(Tensor::from_vec(wd, to32(&wv)).unwrap());
        let bv = g.input(Tensor::from_vec([cout, 1, 1, 1], to32(&b)).unwrap());
        let y = g.conv2d(xv, wvv, bv, spec).unwrap();
        let got = g.value(y).data();
        assert_eq!(got.len(), want.len());
        for (a, e) in got.iter().zip(&want) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }
    let took = t.elapsed();
    Outcome::timed(
        worst <= 1e-5 && covered.len() >= 12,
        format!("50 cases, {} (dilation, padding, stride) combos; max abs err {worst:.2e} (<= 1e-5)", covered.len()),
        took,
        Duration::from_secs(10),
    )
}

fn dice_threshold_exactness() -> Outcome {
    let prob = |v: Vec<f32>| Tensor::from_vec([1, 1, 1, v.len()], v).unwrap();
    let mut ok = binarize(&prob(vec![0.5])).unwrap().bits() == [1];
    ok &= binarize(&prob(vec![0.4999])).unwrap().bits() == [0];
    ok &= binarize(&prob(vec![1.0; 6])).unwrap().bits() == [1; 6];

    let m = |bits: &[u8]| BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap();
    let a = m(&[1, 1, 0, 0, 1, 0]);
    ok &= dice(&a, &a).unwrap() == 1.0;
    ok &= dice(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap() == 0.0;
    ok &= dice(&m(&[1, 1, 1, 1, 0, 0]), &m(&[0, 0, 1, 1, 1, 1])).unwrap() == 0.5;

    let rows = |arch: &str, vals: [f64; 6]| -> Vec<RunScore> {
        vals.iter()
            .enumerate()
            .map(|(i, &d)| RunScore {
                subject: format!("{}", i + 1),
                arch: arch.to_string(),
                dice: d,
            })
            .collect()
    };
    let mut scores = rows("unet", [0.50, 0.60, 0.64, 0.53, 0.43, 0.40]);
    scores.extend(rows("dilated", [0.53, 0.62, 0.65, 0.57, 0.50, 0.51]));
    let report = aggregate_report(&scores).unwrap();
    let plain = format!("{:.2}", report.average("unet").unwrap());
    let dil = format!("{:.2}", report.average("dilated").unwrap());
    ok &= plain == "0.52" && dil == "0.56";
    ok &= report.rows.iter().all(|r| r.runs == 1);
    Outcome {
        ok,
        detail: format!("threshold and dice examples exact; table averages unet {plain}, dilated {dil}"),
        budget: None,
    }
}

fn overfit_oracle() -> Outcome {
    let samples = gen_phantom_subjects(1, 8, &mut Rng::new(7)).remove(0).samples;
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (arch, gate) in [(Arch::Dilated, 0.90), (Arch::Plain, 0.85)] {
        let cfg = TrainConfig {
            epochs: 300,
            patience: 300,
            seed: 1,
            augment: AugmentConfig::disabled(),
            model: ModelConfig { base_channels: 8, ..ModelConfig::new(arch) },
            stop_at_val_dice: Some(gate),
            ..TrainConfig::default()
        };
        let (ck, h) = train_run(&samples, &samples, &cfg).unwrap();
        let d = mean_dice(&ck.model, &samples).unwrap();
        ok &= d >= gate;
        parts.push(format!("{} {d:.4} (>= {gate}) at epoch {}", arch.label(), h.best_epoch));
    }
    Outcome::timed(ok, parts.join("; "), t.elapsed(), Duration::from_secs(600))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn jobs() -> String {
    std::thread::available_parallelism().map_or(1, |n| n.get()).to_string()
}

fn cv_run(data: &Path, out: &Path, epochs: &str) -> (i32, Duration) {
    let report = out.join("report.csv");
    let hist = out.join("histories");
    let args = [
        "cv", "--data", data.to_str().unwrap(), "--arch", "both", "--seed", "7",
        "--report", report.to_str().unwrap(), "--histories", hist.to_str().unwrap(),
        "--epochs", epochs, "--patience", "5", "--base-channels", "8", "--jobs", &jobs(),
    ];
    let t = Instant::now();
    let (code, _) = cli(&args);
    (code, t.elapsed())
}

fn phantom_dataset(dir: &Path) {
    let (code, _) = cli(&[
        "phantom", "--out", dir.to_str().unwrap(), "--subjects", "6", "--per-subject", "10", "--seed", "2024",
    ]);
    assert_eq!(code, 0);
}

fn pipeline_shape() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    phantom_dataset(&data);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let (ca, ta) = cv_run(&data, &a, "5");
    let (cb, tb) = cv_run(&data, &b, "5");
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let rows = |arch: &str| {
        lines
            .iter()
            .filter(|l| !l.starts_with("average,") && l.split(',').nth(1) == Some(arch))
            .count()
    };
    let (hist_a, hist_b) = (read_dir_sorted(&a.join("histories")), read_dir_sorted(&b.join("histories")));
    let folds = |arch: &str| hist_a.iter().filter(|(n, _)| n.starts_with(&format!("{arch}_fold"))).count();
    let max_epochs = hist_a.iter().map(|(_, t)| t.iter().filter(|&&c| c == b'\n').count()).max().unwrap_or(0);
    let identical = fs::read(a.join("report.csv")).unwrap() == fs::read(b.join("report.csv")).unwrap() && hist_a == hist_b;
    let ok = ca == 0
        && cb == 0
        && lines[0] == "subject,arch,mean_dice"
        && rows("unet") == 6
        && rows("dilated") == 6
        && lines.iter().filter(|l| l.starts_with("average,")).count() == 2
        && lines.len() == 15
        && folds("unet") == 30
        && folds("dilated") == 30
        && max_epochs <= 5
        && identical;
    let slower = ta.max(tb);
    Outcome::timed(
        ok,
        format!(
            "folds unet {} dilated {}; {} report lines; byte-identical {identical}; runs took {} and {}",
            folds("unet"),
            folds("dilated"),
            lines.len(),
            mins(ta),
            mins(tb)
        ),
        slower,
        Duration::from_secs(15 * 60),
    )
}

fn early_stopping_fixtures() -> Outcome {
    let plateau = simulate_early_stopping(&[0.5, 0.4, 0.4, 0.4, 0.4, 0.4], 5);
    let rising: Vec<f64> = (1..=40).map(|e| e as f64 / 50.0).collect();
    let rising = simulate_early_stopping(&rising, 5);
    Outcome {
        ok: plateau == (6, 1) && rising == (40, 40),
        detail: format!("plateau stops at {} (best {}); rising stops at {} (best {})", plateau.0, plateau.1, rising.0, rising.1),
        budget: None,
    }
}

fn checkpoint_format() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { base_channels: 8, ..ModelConfig::new(Arch::Dilated) };
    let ck = Checkpoint::new(nerveseg::model::build_model(&cfg, 3).unwrap());
    let (p1, p2) = (dir.path().join("1.nsck"), dir.path().join("2.nsck"));
    save_checkpoint(&ck, &p1).unwrap();
    save_checkpoint(&load_checkpoint(&p1).unwrap(), &p2).unwrap();
    let bytes = fs::read(&p1).unwrap();
    let round_trip = bytes == fs::read(&p2).unwrap();

    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        f(&mut b);
        let p = dir.path().join("bad.nsck");
        fs::write(&p, &b).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(e)) => Some(e),
            _ => None,
        }
    };
    let magic = corrupt(&|b| b[..4].copy_from_slice(b"XXXX"));
    let version = corrupt(&|b| b[4..8].copy_from_slice(&7u32.to_le_bytes()));
    let truncated = corrupt(&|b| b.truncate(b.len() - 10));
    let ok = round_trip
        && magic == Some(CheckpointError::BadMagic)
        && version == Some(CheckpointError::UnsupportedVersion { found: 7 })
        && matches!(truncated, Some(CheckpointError::Truncated { .. }));
    let name = |e: &Option<CheckpointError>| e.as_ref().map_or("none".to_string(), |e| e.to_string());
    Outcome {
        ok,
        detail: format!(
            "round trip identical {round_trip}; magic: {}; version: {}; truncation: {}",
            name(&magic),
            name(&version),
            name(&truncated)
        ),
        budget: None,
    }
}

fn comparative_report() -> Option<Outcome> {
    if std::env::var("NERVESEG_ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return None;
    }
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    phantom_dataset(&data);
    let out = root.path().join("full");
    let (code, took) = cv_run(&data, &out, "40");
    let csv = fs::read_to_string(out.join("report.csv")).unwrap_or_default();
    let avg = |arch: &str| {
        csv.lines()
            .find_map(|l| l.strip_prefix(&format!("average,{arch},")))
            .and_then(|v| v.parse::<f64>().ok())
    };
    let (p, d) = (avg("unet"), avg("dilated"));
    let detail = match (p, d) {
        (Some(p), Some(d)) => format!("average unet {p:.4}, dilated {d:.4}, gap {:+.4} (not gated); took {}", d - p, mins(took)),
        _ => "report lacks an average row".to_string(),
    };
    Some(Outcome { ok: code == 0 && p.is_some() && d.is_some(), detail, budget: None })
}

#[test]
fn acceptance_criteria() {
    type Check = fn() -> Outcome;
    let checks: [(u32, &str, Check); 8] = [
        (1, "receptive-field anchor", receptive_field_anchor),
        (2, "gradient suite", gradient_suite_check),
        (3, "convolution oracle", convolution_oracle),
        (4, "dice/threshold exactness", dice_threshold_exactness),
        (5, "overfit oracle", overfit_oracle),
        (6, "pipeline shape", pipeline_shape),
        (7, "early stopping", early_stopping_fixtures),
        (8, "checkpoint format", checkpoint_format),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Outcome {
            ok: false,
            detail: format!(
                "panicked: {}",
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
            budget: None,
        });
        let budget_ok = outcome.budget.is_none_or(|(took, limit)| took <= limit);
        let verdict = if outcome.ok && budget_ok { "PASS" } else { "FAIL" };
        let timing = match outcome.budget {
            Some((took, limit)) => format!(
                " [runtime {} vs budget {}{}]",
                mins(took),
                mins(limit),
                if budget_ok { "" } else { ", over budget" }
            ),
            None => String::new(),
        };
        emit(&format!("criterion {n} {verdict} {name}: {}{timing}", outcome.detail));
        if !outcome.ok {
            failed.push(n);
        }
    }
    match comparative_report() {
        Some(o) => emit(&format!(
            "criterion 9 {} comparative report (informational): {}",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail
        )),
        None => emit("criterion 9 SKIP comparative report (informational): set NERVESEG_ACCEPTANCE_FULL=1 to run the 40-epoch CV"),
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
