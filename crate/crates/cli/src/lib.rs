//! Command-line front end for `gacn`: dataset generation, training, fusion of
//! pairs and focal stacks, evaluation and a self-check.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gacn::datagen::{generate_dataset, generate_synthetic, read_manifest, GenConfig, GenSummary};
use gacn::io::{read_image, to_gray, write_image};
use gacn::losses::{OrientationMode, QgConfig};
use gacn::metrics::{difference_image, qg_eval, MetricReport, MetricRow};
use gacn::net::fuse_images;
use gacn::stack::{bench, calibrated_fuse, serial_fuse, FocalStack, PathCounts, Strategy};
use gacn::trainer::{train, Dataset, EpochLog, RunPaths, TrainConfig};
use gacn::{FusionConfig, FusionNet, Tensor};

pub mod selfcheck;

/// Exit status for a usage error (bad flags).
pub const EXIT_USAGE: i32 = 1;
/// Exit status for unreadable, missing or inconsistent data.
pub const EXIT_DATA: i32 = 2;
/// Exit status for a numerical failure (NaN/Inf).
pub const EXIT_NUMERICAL: i32 = 3;

/// Thread-count override for the worker pool.
pub const THREADS_ENV: &str = "GACN_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "gacn",
    version,
    about = "Multi-focus image fusion with a gradient-aware cascade network"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build training pairs from (image, mask) files.
    GenData(GenDataArgs),
    /// Build training pairs from procedural scenes (no corpus needed).
    Synth(SynthArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Fuse two images.
    Fuse(FuseArgs),
    /// Fuse a directory of focal-stack images.
    FuseStack(FuseStackArgs),
    /// Score fusion of source pairs with Q_g.
    Eval(EvalArgs),
    /// Run gradient checks and oracle comparisons.
    Selfcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 160 px images, 128 crops, batch 8, 20 epochs.
    Desk,
    /// 256 px images, 156 crops, batch 16, 50 epochs.
    Paper,
}

impl Preset {
    pub fn gen_config(self) -> GenConfig {
        match self {
            Preset::Desk => GenConfig::desk(),
            Preset::Paper => GenConfig::paper(),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Directory of source images.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of foreground masks, matched to images by file stem.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Number of scenes to generate (some may be filtered out).
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoint.gacn, best.gacn and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the preset's batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the Q_g term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Orientation-difference variant in the Q_g loss.
    #[arg(long, value_enum, default_value_t = Orientation::Abs)]
    pub orientation: Orientation,
    /// Continue from <out>/checkpoint.gacn.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Orientation {
    Abs,
    Smooth,
}

impl From<Orientation> for OrientationMode {
    fn from(o: Orientation) -> Self {
        match o {
            Orientation::Abs => OrientationMode::Abs,
            Orientation::Smooth => OrientationMode::Smooth,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct FuseArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the initial and final decision maps next to the output.
    #[arg(long)]
    pub emit_dm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Serial,
    Calibrated,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Serial => Strategy::Serial,
            StrategyArg::Calibrated => Strategy::Calibrated,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct FuseStackArgs {
    /// Directory holding the stack images, ordered by file name.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Calibrated)]
    pub strategy: StrategyArg,
    /// Time both strategies over this many repetitions and write a CSV.
    #[arg(long)]
    pub bench: Option<usize>,
    /// Where to write the timing CSV (default: next to --out).
    #[arg(long)]
    pub bench_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of pairs: `<id>_a.<ext>` / `<id>_b.<ext>` files, or a
    /// generated dataset with a manifest.tsv (near/far pairs).
    #[arg(long)]
    pub pairs_dir: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also score plain averaging of each pair.
    #[arg(long)]
    pub with_average: bool,
    /// Write fused images into this directory.
    #[arg(long)]
    pub save_fused: Option<PathBuf>,
}

/// Map an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gacn::Error>() {
            return match e {
                gacn::Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        // the global pool can only be set once per process; later calls keep it
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|s| print_summary(&s)),
        Command::Synth(a) => cmd_synth(&a).map(|s| print_summary(&s)),
        Command::Train(a) => cmd_train(&a).map(|log| {
            if let Some(last) = log.last() {
                println!(
                    "finished epoch {}: val dice {:.4}, val qg loss {:.4}",
                    last.epoch, last.val_dice, last.val_qg
                );
            }
        }),
        Command::Fuse(a) => cmd_fuse(&a),
        Command::FuseStack(a) => cmd_fuse_stack(&a).map(|c| {
            println!(
                "extraction passes: {}, decision passes: {}",
                c.extraction, c.decision
            )
        }),
        Command::Eval(a) => cmd_eval(&a).map(|r| {
            for method in ["gacn", "average"] {
                if let Some(m) = r.mean_qg(method) {
                    println!("{method}: mean Q_g {m:.4}");
                }
            }
        }),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn print_summary(s: &GenSummary) {
    println!("accepted {}, rejected {}", s.accepted, s.rejected);
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!(gacn::Error::InvalidArgument(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!(gacn::Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
}

/// Image files in `dir`, sorted by name.
fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

pub fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<GenSummary> {
    require_dir(&args.images, "image")?;
    require_dir(&args.masks, "mask")?;
    let images = image_files(&args.images)?;
    let masks = image_files(&args.masks)?;
    if images.is_empty() || masks.is_empty() {
        bail!(gacn::Error::InvalidArgument(format!(
            "empty corpus: {} images, {} masks",
            images.len(),
            masks.len()
        )));
    }
    let pairs: Vec<(String, PathBuf, PathBuf)> = images
        .iter()
        .filter_map(|img| {
            let id = stem(img);
            masks
                .iter()
                .find(|m| stem(m) == id)
                .map(|m| (id, img.clone(), m.clone()))
        })
        .collect();
    if pairs.is_empty() {
        bail!(gacn::Error::InvalidArgument(
            "no image has a mask with the same file stem".into()
        ));
    }
    Ok(generate_dataset(
        &pairs,
        &args.out,
        &args.preset.gen_config(),
        args.seed,
    )?)
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<GenSummary> {
    if args.count == 0 {
        bail!(gacn::Error::InvalidArgument(
            "--count must be positive".into()
        ));
    }
    Ok(generate_synthetic(
        args.count,
        &args.out,
        &args.preset.gen_config(),
        args.seed,
    )?)
}

/// Training configuration for the given flags.
pub fn train_config(args: &TrainArgs) -> TrainConfig {
    let mut cfg = args.preset.train_config();
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }
    cfg.qg.orientation = args.orientation.into();
    cfg
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<Vec<EpochLog>> {
    require_file(&args.manifest, "manifest")?;
    let cfg = train_config(args);
    cfg.validate()?;
    let data = Dataset::from_manifest(&args.manifest, args.seed)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let paths = RunPaths::in_dir(&args.out);
    eprintln!(
        "training on {} samples, validating on {}",
        data.train.len(),
        data.val.len()
    );
    let (_, log) = train(&data, &cfg, &paths, args.resume)?;
    Ok(log)
}

fn load_net(path: &Path) -> anyhow::Result<FusionNet> {
    require_file(path, "weight file")?;
    Ok(FusionNet::load(FusionConfig::default(), path)?)
}

fn check_finite(t: &Tensor, what: &str) -> anyhow::Result<()> {
    if !t.is_finite() {
        bail!(gacn::Error::Numerical(format!(
            "{what} contains NaN or Inf"
        )));
    }
    Ok(())
}

/// Sibling path `<out stem>_<suffix>.png`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_file_name(format!("{}_{suffix}.png", stem(out)))
}

pub fn cmd_fuse(args: &FuseArgs) -> anyhow::Result<()> {
    require_file(&args.a, "image")?;
    require_file(&args.b, "image")?;
    let net = load_net(&args.weights)?;
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    if a.shape() != b.shape() {
        bail!(gacn::Error::shape(
            "fuse",
            format!("{:?} vs {:?}", a.shape(), b.shape())
        ));
    }
    let (fused, maps) = net.fuse_color(&a, &b)?;
    check_finite(&fused, "fused image")?;
    write_image(&args.out, &fused)?;
    if args.emit_dm {
        write_image(&sibling(&args.out, "dm_initial"), &maps.initial)?;
        write_image(&sibling(&args.out, "dm_final"), &maps.final_dm)?;
    }
    Ok(())
}

pub fn cmd_fuse_stack(args: &FuseStackArgs) -> anyhow::Result<PathCounts> {
    require_dir(&args.dir, "stack")?;
    let net = load_net(&args.weights)?;
    let stack = FocalStack::from_dir(&args.dir)?;
    let (fused, counts) = match args.strategy.into() {
        Strategy::Serial => serial_fuse(&stack, &net)?,
        Strategy::Calibrated => {
            let c = calibrated_fuse(&stack, &net)?;
            (c.fused, c.counts)
        }
    };
    check_finite(&fused, "fused image")?;
    write_image(&args.out, &fused)?;
    if let Some(reps) = args.bench {
        let report = bench(&stack, &net, reps)?;
        let csv = args.bench_csv.clone().unwrap_or_else(|| {
            args.out
                .with_file_name(format!("{}_bench.csv", stem(&args.out)))
        });
        report.write_csv(&csv)?;
        println!(
            "serial {:.1} ms/image, calibrated {:.1} ms/image: {:.1}% faster, {:.1}% fewer extraction passes",
            report.serial.wall_ms_per_image,
            report.calibrated.wall_ms_per_image,
            report.time_saving_percent(),
            report.extraction_saving_percent()
        );
    }
    Ok(counts)
}

/// `(id, a, b)` source pairs of an evaluation directory.
pub fn eval_pairs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    let manifest = dir.join("manifest.tsv");
    if manifest.is_file() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .map(|e| (e.id, dir.join(e.near), dir.join(e.far)))
            .collect());
    }
    let files = image_files(dir)?;
    let mut pairs = Vec::new();
    for f in &files {
        let s = stem(f);
        let Some(id) = s.strip_suffix("_a").or_else(|| s.strip_suffix("_A")) else {
            continue;
        };
        let partner = files.iter().find(|g| {
            let t = stem(g);
            t == format!("{id}_b") || t == format!("{id}_B")
        });
        match partner {
            Some(b) => pairs.push((id.to_string(), f.clone(), b.clone())),
            None => bail!(gacn::Error::InvalidArgument(format!(
                "'{}' has no matching _b image",
                f.display()
            ))),
        }
    }
    Ok(pairs)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<MetricReport> {
    require_dir(&args.pairs_dir, "pairs")?;
    let net = load_net(&args.weights)?;
    let pairs = eval_pairs(&args.pairs_dir)?;
    if pairs.is_empty() {
        bail!(gacn::Error::InvalidArgument(format!(
            "no source pairs found in {}",
            args.pairs_dir.display()
        )));
    }
    if let Some(dir) = &args.save_fused {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let qg = QgConfig::default();
    let mut report = MetricReport::default();
    for (id, pa, pb) in &pairs {
        let a = read_image(pa)?;
        let b = read_image(pb)?;
        if a.shape() != b.shape() {
            bail!(gacn::Error::shape(
                "eval",
                format!("pair '{id}': {:?} vs {:?}", a.shape(), b.shape())
            ));
        }
        let t = Instant::now();
        let (fused, _) = net.fuse_color(&a, &b)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        check_finite(&fused, "fused image")?;
        let (ga, gb) = (to_gray(&a)?, to_gray(&b)?);
        report.rows.push(MetricRow {
            pair_id: id.clone(),
            method: "gacn".into(),
            qg: qg_eval(&ga, &gb, &to_gray(&fused)?, &qg)?,
            runtime_ms: ms,
        });
        if let Some(dir) = &args.save_fused {
            write_image(&dir.join(format!("{id}_fused.png")), &fused)?;
            write_image(
                &dir.join(format!("{id}_diff.png")),
                &difference_image(&to_gray(&fused)?, &ga)?,
            )?;
        }
        if args.with_average {
            let t = Instant::now();
            let avg = fuse_images(
                &Tensor::full([1, 1, a.shape()[2], a.shape()[3]], 0.5),
                &a,
                &b,
            )?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            report.rows.push(MetricRow {
                pair_id: id.clone(),
                method: "average".into(),
                qg: qg_eval(&ga, &gb, &to_gray(&avg)?, &qg)?,
                runtime_ms: ms,
            });
        }
    }
    report.write_csv(&args.out)?;
    Ok(report)
}

pub fn cmd_selfcheck() -> anyhow::Result<()> {
    let results = selfcheck::run_all();
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<32} {}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!(gacn::Error::Numerical(format!(
            "{failed} self-check(s) failed"
        )));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
