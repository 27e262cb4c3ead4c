//! `nerveseg` command line: argument parsing and subcommand dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nerveseg::data::image::{read_gray, resize_bilinear, write_pgm};
use nerveseg::data::{export_dataset, gen_phantom_subjects, load_dataset, AugmentConfig, GrayImage, Sample, SubjectSet};
use nerveseg::metrics::BinaryMask;
use nerveseg::model::{receptive_field_table, Arch, ModelConfig};
use nerveseg::trainer::{
    evaluate_subject, load_checkpoint, predict_masks, run_nested_cv, save_checkpoint, train_run, Checkpoint,
    FoldRun, TrainConfig,
};
use nerveseg::verify::{gradient_suite, DEFAULT_SEEDS};
use nerveseg::{Error, Rng, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Environment variable consulted when `--jobs` is absent.
pub const THREADS_ENV: &str = "NERVESEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nerveseg", version, about = "Ultrasound nerve segmentation with U-Net and dilated U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model, validating on one subject and holding out another.
    Train(TrainArgs),
    /// Nested subject-wise cross-validation; writes the per-subject dice report.
    Cv(CvArgs),
    /// Segment a single image with a checkpoint.
    Predict(PredictArgs),
    /// Mean dice of a checkpoint on one subject.
    Eval(EvalArgs),
    /// Receptive field of every shrinking-path layer.
    Rf(RfArgs),
    /// Write a synthetic dataset.
    Phantom(PhantomArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone)]
struct Dilations(Vec<usize>);

impl FromStr for Dilations {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dilation {p:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Dilations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CvArch {
    One(Arch),
    Both,
}

impl FromStr for CvArch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "both" {
            return Ok(CvArch::Both);
        }
        s.parse::<Arch>().map(CvArch::One).map_err(|e| e.to_string())
    }
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long = "batch", default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "base-channels", default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value = "2,4")]
    dilations: Dilations,
    #[arg(long = "aux-weight", default_value_t = 1.0)]
    aux_weight: f64,
    /// Largest random rotation, degrees.
    #[arg(long = "max-rotation", default_value_t = 15.0)]
    max_rotation: f64,
    /// Largest random shift as a fraction of the extent.
    #[arg(long = "max-shift", default_value_t = 0.1)]
    max_shift: f64,
    #[arg(long = "no-augment")]
    no_augment: bool,
}

impl HyperArgs {
    fn config(&self, arch: Arch) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
            augment: AugmentConfig {
                max_rotation_deg: self.max_rotation,
                max_shift_frac: self.max_shift,
                enabled: !self.no_augment,
            },
            model: ModelConfig {
                base_channels: self.base_channels,
                dilations: self.dilations.0.clone(),
                ..ModelConfig::new(arch)
            },
            aux_weight: self.aux_weight,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long = "test-subject")]
    test_subject: u32,
    #[arg(long = "val-subject")]
    val_subject: u32,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    /// unet, dilated or both.
    #[arg(long)]
    arch: CvArch,
    #[arg(long)]
    report: PathBuf,
    /// Directory for one JSON-lines history per run.
    #[arg(long)]
    histories: Option<PathBuf>,
    /// Folds trained in parallel (default: $NERVESEG_THREADS, else 1).
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Thresholded mask, 0/255 PGM.
    #[arg(long)]
    out: PathBuf,
    /// Probabilities scaled to 0..255.
    #[arg(long)]
    prob: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    subject: u32,
}

#[derive(Debug, Args)]
struct RfArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value = "2,4")]
    dilations: Dilations,
    /// Square input extent.
    #[arg(long, default_value_t = 128)]
    input: usize,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    #[arg(long = "per-subject", default_value_t = 10)]
    per_subject: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
}

#[derive(Debug)]
enum Failure {
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(e: std::io::Error) -> Failure {
    Failure::Runtime(format!("write failed: {e}"))
}

/// Creates the missing parent directories of an output file.
fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

/// Parses `args` (without the program name) and runs the subcommand. Normal output
/// goes to `out`, diagnostics and progress to `err`. Returns the process exit code.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once("nerveseg".into()).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Cv(a) => cmd_cv(a, out, err),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Rf(a) => cmd_rf(a, out),
        Command::Phantom(a) => cmd_phantom(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_RUNTIME
        }
        Err(Failure::Check(m)) => {
            let _ = writeln!(err, "check failed: {m}");
            EXIT_CHECK_FAILED
        }
    }
}

fn find_subject(subjects: &[SubjectSet], id: u32) -> Result<&SubjectSet, Failure> {
    subjects
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Failure::Runtime(format!("no subject_{id} in the dataset")))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    if a.test_subject == a.val_subject {
        return Err(Failure::Runtime("--test-subject and --val-subject must differ".into()));
    }
    let cfg = a.hyper.config(a.arch);
    cfg.validate()?;
    let subjects = load_dataset(&a.data)?;
    find_subject(&subjects, a.test_subject)?;
    let val = &find_subject(&subjects, a.val_subject)?.samples;
    let train: Vec<Sample> = subjects
        .iter()
        .filter(|s| s.id != a.test_subject && s.id != a.val_subject)
        .flat_map(|s| s.samples.iter().cloned())
        .collect();
    if train.is_empty() {
        return Err(Failure::Runtime("no subjects left for training".into()));
    }
    let (ck, history) = train_run(&train, val, &cfg)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&ck, &a.out)?;
    if let Some(p) = &a.history {
        fs::write(p, history.to_jsonl()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    let best = history.best().expect("at least one epoch ran");
    writeln!(
        out,
        "epochs run: {}\nbest epoch: {}\nbest val dice: {:.4}",
        history.epochs.len(),
        best.epoch,
        best.val_dice
    )
    .map_err(io_fail)
}

fn resolve_jobs(flag: Option<usize>) -> Result<usize, Failure> {
    if let Some(j) = flag {
        return Ok(j.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|j| j.max(1))
            .map_err(|_| Failure::Runtime(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(1),
    }
}

fn history_name(r: &FoldRun) -> String {
    format!("{}_fold{:02}_test{}_val{}.jsonl", r.arch, r.fold_index, r.fold.test, r.fold.val)
}

fn cmd_cv(a: CvArgs, out: &mut dyn Write, err: &mut (dyn Write + Send)) -> CmdResult {
    let archs = match a.arch {
        CvArch::One(x) => vec![x],
        CvArch::Both => vec![Arch::Plain, Arch::Dilated],
    };
    let configs: Vec<TrainConfig> = archs.iter().map(|&x| a.hyper.config(x)).collect();
    for c in &configs {
        c.validate()?;
    }
    let jobs = resolve_jobs(a.jobs)?;
    let subjects = load_dataset(&a.data)?;
    let total = configs.len() * subjects.len() * subjects.len().saturating_sub(1);
    let done = std::sync::atomic::AtomicUsize::new(0);
    let log = std::sync::Mutex::new(err);
    let progress = |r: &FoldRun| {
        let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let mut e = log.lock().expect("progress sink");
        let _ = writeln!(
            e,
            "[{k}/{total}] {} test {} val {}: {} epochs, test dice {:.4}",
            r.arch,
            r.fold.test,
            r.fold.val,
            r.history.epochs.len(),
            r.test_dice
        );
    };
    let res = run_nested_cv(&subjects, &configs, jobs, &progress)?;
    let csv = res.report.to_csv();
    ensure_parent(&a.report)?;
    fs::write(&a.report, &csv).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report.display())))?;
    if let Some(dir) = &a.histories {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        for r in &res.runs {
            let p = dir.join(history_name(r));
            fs::write(&p, r.history.to_jsonl()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        }
    }
    write!(out, "{}", res.report.to_table()).map_err(io_fail)
}

fn input_tensor(img: &GrayImage, size: (usize, usize)) -> Result<Tensor, Failure> {
    let (h, w) = size;
    let plane: Vec<f32> = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let plane = if (img.width, img.height) == (w, h) {
        plane
    } else {
        resize_bilinear(&plane, img.width, img.height, w, h)
    };
    let plane = plane.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_vec([1, 1, h, w], plane)?)
}

fn probabilities(ck: &Checkpoint, x: Tensor) -> Result<Tensor, Failure> {
    let model = &ck.model;
    let mut g = nerveseg::autograd::Graph::new();
    let vars: Vec<_> = model.params.values().map(|t| g.input(t.clone())).collect();
    let xv = g.input(x);
    let logits = model.forward_with(&mut g, &vars, xv)?.logits;
    let p = g.sigmoid(logits);
    Ok(g.value(p).clone())
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let img = read_gray(&a.input)?;
    let (h, w) = ck.config().input_size;
    let x = input_tensor(&img, (h, w))?;
    let sample = Sample::new(x.clone(), BinaryMask::zeros(h, w), a.input.display().to_string())?;
    let mask = predict_masks(&ck.model, std::slice::from_ref(&sample))?.remove(0);
    let pixels = mask.bits().iter().map(|&b| b * 255).collect();
    ensure_parent(&a.out)?;
    write_pgm(&GrayImage::new(w, h, pixels)?, &a.out)?;
    if let Some(p) = &a.prob {
        let prob = probabilities(&ck, x)?;
        // round half up
        let pixels = prob.data().iter().map(|&v| (255.0 * v as f64 + 0.5).floor().min(255.0) as u8).collect();
        ensure_parent(p)?;
        write_pgm(&GrayImage::new(w, h, pixels)?, p)?;
    }
    writeln!(out, "foreground pixels: {}", mask.count()).map_err(io_fail)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let subjects = load_dataset(&a.data)?;
    let d = evaluate_subject(&ck, find_subject(&subjects, a.subject)?)?;
    writeln!(out, "{d:.4}").map_err(io_fail)
}

fn cmd_rf(a: RfArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ModelConfig {
        depth: a.depth,
        dilations: a.dilations.0,
        input_size: (a.input, a.input),
        ..ModelConfig::new(a.arch)
    };
    let t = receptive_field_table(&cfg)?;
    let mut s = format!("{:<14} {:>6} {:>6} {:>9}\n", "layer", "rf", "jump", "output");
    for r in &t.rows {
        let size = format!("{}x{}", r.out_size.0, r.out_size.1);
        s += &format!("{:<14} {:>6} {:>6} {:>9}\n", r.layer, r.rf, r.jump, size);
    }
    s += &format!("innermost receptive field: {}\n", t.innermost);
    s += &format!("covers input: {}\n", if t.covers_input { "yes" } else { "no" });
    write!(out, "{s}").map_err(io_fail)
}

fn cmd_phantom(a: PhantomArgs, out: &mut dyn Write) -> CmdResult {
    if a.subjects == 0 || a.per_subject == 0 {
        return Err(Failure::Runtime("--subjects and --per-subject must be >= 1".into()));
    }
    let subjects = gen_phantom_subjects(a.subjects, a.per_subject, &mut Rng::new(a.seed));
    export_dataset(&subjects, &a.out)?;
    writeln!(
        out,
        "wrote {} subjects x {} frames to {}",
        a.subjects,
        a.per_subject,
        a.out.display()
    )
    .map_err(io_fail)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let seeds: Vec<u64> = if a.seeds.trim().is_empty() {
        DEFAULT_SEEDS.to_vec()
    } else {
        a.seeds
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Failure::Runtime(format!("bad seed {s:?}"))))
            .collect::<Result<_, _>>()?
    };
    let cases = gradient_suite(&seeds)?;
    let mut failed = Vec::new();
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<24} seed {:<3} max rel err {:.3e} (tol {:.0e}, {} checked, {} skipped) {status}",
            c.name, c.seed, c.report.max_rel_err, c.tolerance, c.report.checked, c.report.skipped
        )
        .map_err(io_fail)?;
        if !c.passed() {
            failed.push(format!("{}@{}", c.name, c.seed));
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} cases passed", cases.len()).map_err(io_fail)
    } else {
        Err(Failure::Check(format!("{} case(s) outside tolerance: {}", failed.len(), failed.join(", "))))
    }
}
