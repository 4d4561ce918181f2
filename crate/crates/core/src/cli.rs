//! Command-line surface: restoration runs, toy training, gradient audits,
//! cost benchmarks, and metric reports.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 data error,
//! 3 verification failure. Every command is deterministic given `--seed`; two
//! runs write byte-identical artifacts.

use crate::audit;
use crate::cost;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics;
use crate::network::{Model, NetworkConfig, SeedPolicy};
use crate::optim::{cosine_lr, AdamW};
use crate::runconfig;
use crate::scalar::{Precision, Scalar};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ── argument surface ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "clusterscan",
    version,
    about = "Cluster-scanning image restoration: train, restore, verify, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore a degraded image, optionally scoring against a reference.
    Restore(RestoreArgs),
    /// Train a small model on paired images in a directory.
    TrainToy(TrainToyArgs),
    /// Check every operator's gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Tabulate compute costs and the scanning-strategy comparison.
    Bench(BenchArgs),
    /// Report PSNR and SSIM between two images.
    Metrics(MetricsArgs),
}

/// Network settings: an optional key-value file, then individual flags on
/// top. Flags override the file; the file overrides built-in defaults.
#[derive(Args, Clone, Default)]
struct ConfigOverrides {
    /// Key-value configuration file ("key = value" lines, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    /// Comma-separated mixer-block counts, one per encoder level.
    #[arg(long)]
    blocks_per_level: Option<String>,
    #[arg(long)]
    bottleneck_blocks: Option<usize>,
    #[arg(long)]
    refine_blocks: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    centroids: Option<usize>,
    #[arg(long)]
    state_dim: Option<usize>,
    #[arg(long)]
    ffn_expansion: Option<usize>,
    #[arg(long)]
    fft_loss_weight: Option<f64>,
    #[arg(long)]
    crop_size: Option<usize>,
    /// Sampling seed policy: "fixed" or "fresh".
    #[arg(long)]
    seed_policy: Option<String>,
}

impl ConfigOverrides {
    fn any(&self) -> bool {
        self.config.is_some()
            || self.levels.is_some()
            || self.blocks_per_level.is_some()
            || self.bottleneck_blocks.is_some()
            || self.refine_blocks.is_some()
            || self.embed_dim.is_some()
            || self.centroids.is_some()
            || self.state_dim.is_some()
            || self.ffn_expansion.is_some()
            || self.fft_loss_weight.is_some()
            || self.crop_size.is_some()
            || self.seed_policy.is_some()
    }

    /// File first, then flags, all through the same key-value parser so every
    /// field gets identical validation and error wording.
    fn resolve(&self, base: NetworkConfig) -> Result<NetworkConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            runconfig::apply_file(&mut cfg, path)?;
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                runconfig::apply_kv(&mut cfg, key, &v)?;
            }
            Ok(())
        };
        set("levels", self.levels.map(|v| v.to_string()))?;
        set("blocks_per_level", self.blocks_per_level.clone())?;
        set("bottleneck_blocks", self.bottleneck_blocks.map(|v| v.to_string()))?;
        set("refine_blocks", self.refine_blocks.map(|v| v.to_string()))?;
        set("embed_dim", self.embed_dim.map(|v| v.to_string()))?;
        set("centroids", self.centroids.map(|v| v.to_string()))?;
        set("state_dim", self.state_dim.map(|v| v.to_string()))?;
        set("ffn_expansion", self.ffn_expansion.map(|v| v.to_string()))?;
        set("fft_loss_weight", self.fft_loss_weight.map(|v| v.to_string()))?;
        set("crop_size", self.crop_size.map(|v| v.to_string()))?;
        set("seed_policy", self.seed_policy.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RestoreArgs {
    /// Degraded input image (PPM).
    #[arg(long)]
    input: PathBuf,
    /// Where to write the restored image.
    #[arg(long)]
    output: PathBuf,
    /// Trained checkpoint; omitted, a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Clean reference; when given, PSNR and SSIM are printed.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Numeric width: f32 or f64 (default from CLUSTERSCAN_PRECISION, else f64).
    #[arg(long)]
    precision: Option<String>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Directory of image pairs named `<stem>_in.ppm` / `<stem>_gt.ppm`.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Square crop side; defaults to the configuration's crop size.
    #[arg(long)]
    crop: Option<usize>,
    /// Output directory for `model.ckpt` and `loss.log`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-3)]
    lr0: f64,
    /// Floor learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    /// Numeric width: f32 or f64 (default from CLUSTERSCAN_PRECISION, else f64).
    #[arg(long)]
    precision: Option<String>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Randomized probes per operator.
    #[arg(long, default_value_t = 50)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Numeric width: f32 or f64 (default from CLUSTERSCAN_PRECISION, else f64).
    #[arg(long)]
    precision: Option<String>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated square input sides, e.g. "64,128".
    #[arg(long, default_value = "64,128")]
    shapes: String,
    /// Directory to also write scaling.txt, scaling.csv, strategy.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct MetricsArgs {
    /// First image (PPM).
    #[arg(long)]
    a: PathBuf,
    /// Second image (PPM), same extents.
    #[arg(long)]
    b: PathBuf,
}

// ── entry point ─────────────────────────────────────────────────────────────

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::Contract(_) | Error::Config(_) => 1,
        Error::Format(_) | Error::Data(_) | Error::Io(_) => 2,
        Error::Verification(_) | Error::Diverged { .. } => 3,
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Restore(a) => match resolve_precision(a.precision.as_deref())? {
            Precision::Double => cmd_restore::<f64>(&a),
            Precision::Single => cmd_restore::<f32>(&a),
        },
        Command::TrainToy(a) => match resolve_precision(a.precision.as_deref())? {
            Precision::Double => cmd_train_toy::<f64>(&a),
            Precision::Single => cmd_train_toy::<f32>(&a),
        },
        Command::Gradcheck(a) => match resolve_precision(a.precision.as_deref())? {
            Precision::Double => cmd_gradcheck::<f64>(&a),
            Precision::Single => cmd_gradcheck::<f32>(&a),
        },
        Command::Bench(a) => cmd_bench(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    }
}

fn resolve_precision(flag: Option<&str>) -> Result<Precision> {
    match flag {
        Some(s) => Precision::parse(s),
        None => runconfig::precision_from_env(),
    }
}

// ── restore ─────────────────────────────────────────────────────────────────

/// Edge-inclusive mirror of an index into `[0, n)`: n, n+1, ... map to
/// n-1, n-2, ... and the pattern repeats, so any pad amount is valid.
fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Grow a planar `[c, h, w]` raster to `[c, th, tw]` by mirroring rows and
/// columns past the bottom/right edges.
fn pad_reflect(data: &[f64], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            let sy = mirror(y, h);
            for x in 0..tw {
                out.push(data[(ch * h + sy) * w + mirror(x, w)]);
            }
        }
    }
    out
}

/// Keep the top-left `[c, h, w]` corner of a planar `[c, th, tw]` raster.
fn crop_corner(data: &[f64], c: usize, th: usize, tw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * th + y) * tw;
            out.extend_from_slice(&data[row..row + w]);
        }
    }
    out
}

fn cmd_restore<T: Scalar>(a: &RestoreArgs) -> Result<()> {
    let img = ImageBuffer::load(&a.input)?;
    let model: Model<T> = match &a.checkpoint {
        Some(path) => {
            let model = Model::load(path)?;
            if a.overrides.any() {
                let requested = a.overrides.resolve(model.config.clone())?;
                if requested != model.config {
                    return Err(Error::config(format!(
                        "checkpoint {} disagrees with the requested configuration",
                        path.display()
                    )));
                }
            }
            model
        }
        None => Model::build(a.overrides.resolve(NetworkConfig::standard())?, a.seed)?,
    };

    let d = model.config.spatial_divisor();
    let (h, w) = (img.height, img.width);
    let (th, tw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let padded = pad_reflect(&img.data, 3, h, w, th, tw);
    let input: Vec<T> = padded.iter().map(|&v| T::from_f64(v)).collect();
    let out = model.restore(&[1, 3, th, tw], &input)?;
    let full: Vec<f64> = out.iter().map(|&v| v.to_f64()).collect();
    let restored = ImageBuffer::new(w, h, crop_corner(&full, 3, th, tw, h, w))?;
    restored.save(&a.output)?;

    if let Some(path) = &a.reference {
        let reference = ImageBuffer::load(path)?;
        if reference.width != w || reference.height != h {
            return Err(Error::data(format!(
                "reference extents {}x{} do not match input {}x{}",
                reference.width, reference.height, w, h
            )));
        }
        print_scores(&restored, &reference)?;
    }
    Ok(())
}

fn print_scores(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    let psnr = metrics::psnr(&a.data, &b.data)?;
    let ssim = metrics::ssim(&a.data, &b.data, 3, a.height, a.width)?;
    println!("PSNR: {psnr:.4} dB");
    println!("SSIM: {ssim:.6}");
    Ok(())
}

// ── train-toy ───────────────────────────────────────────────────────────────

struct TrainPair {
    stem: String,
    input: ImageBuffer,
    target: ImageBuffer,
}

/// Collect `<stem>_in.ppm` / `<stem>_gt.ppm` pairs. Any .ppm file that is
/// unpaired or fits neither suffix is an offender; all offenders are listed
/// in one error.
fn discover_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut inputs: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut targets: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut offenders: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(String::from) else {
            offenders.push(path.display().to_string());
            continue;
        };
        let Some(stem) = name.strip_suffix(".ppm") else {
            continue;
        };
        if let Some(s) = stem.strip_suffix("_in") {
            inputs.insert(s.to_string(), path);
        } else if let Some(s) = stem.strip_suffix("_gt") {
            targets.insert(s.to_string(), path);
        } else {
            offenders.push(name);
        }
    }
    let mut pairs = Vec::new();
    for (stem, input) in &inputs {
        match targets.get(stem) {
            Some(target) => pairs.push((stem.clone(), input.clone(), target.clone())),
            None => offenders.push(format!("{stem}_in.ppm (no {stem}_gt.ppm)")),
        }
    }
    for stem in targets.keys() {
        if !inputs.contains_key(stem) {
            offenders.push(format!("{stem}_gt.ppm (no {stem}_in.ppm)"));
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::data(format!(
            "unpaired or unrecognized files in {}: {}",
            dir.display(),
            offenders.join(", ")
        )));
    }
    if pairs.is_empty() {
        return Err(Error::data(format!(
            "no training pairs found in {} (expected <stem>_in.ppm / <stem>_gt.ppm)",
            dir.display()
        )));
    }
    Ok(pairs)
}

fn load_pairs(found: Vec<(String, PathBuf, PathBuf)>) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::with_capacity(found.len());
    for (stem, input_path, target_path) in found {
        let input = ImageBuffer::load(&input_path)?;
        let target = ImageBuffer::load(&target_path)?;
        if input.width != target.width || input.height != target.height {
            return Err(Error::data(format!(
                "pair {stem}: extents differ ({}x{} vs {}x{})",
                input.width, input.height, target.width, target.height
            )));
        }
        pairs.push(TrainPair { stem, input, target });
    }
    Ok(pairs)
}

/// Cut an aligned square window with optional horizontal/vertical flips.
fn crop_view<T: Scalar>(
    img: &ImageBuffer,
    oy: usize,
    ox: usize,
    side: usize,
    flip_h: bool,
    flip_v: bool,
) -> Vec<T> {
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            let sy = oy + if flip_v { side - 1 - y } else { y };
            for x in 0..side {
                let sx = ox + if flip_h { side - 1 - x } else { x };
                out.push(T::from_f64(img.data[(c * h + sy) * w + sx]));
            }
        }
    }
    out
}

fn mix_seed(seed: u64, step: usize) -> u64 {
    (seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0xD1B5_4A32_D192_ED03)
}

fn cmd_train_toy<T: Scalar>(a: &TrainToyArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve(NetworkConfig::smoke())?;
    if let Some(crop) = a.crop {
        runconfig::apply_kv(&mut cfg, "crop_size", &crop.to_string())?;
    }
    let side = cfg.crop_size;
    let divisor = cfg.spatial_divisor();
    if side % divisor != 0 {
        return Err(Error::config(format!(
            "crop side {side} must divide the network's spatial factor {divisor}"
        )));
    }
    if (side / divisor) * (side / divisor) < cfg.centroids {
        return Err(Error::config(format!(
            "crop side {side} leaves fewer than {} deep cells for centroid seeding",
            cfg.centroids
        )));
    }

    let pairs = load_pairs(discover_pairs(&a.data_dir)?)?;
    for p in &pairs {
        if p.input.width < side || p.input.height < side {
            return Err(Error::data(format!(
                "pair {}: {}x{} smaller than crop {side}",
                p.stem, p.input.width, p.input.height
            )));
        }
    }

    let mut model: Model<T> = Model::build(cfg.clone(), a.seed)?;
    let mut opt = AdamW::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shape = [1usize, 3, side, side];
    let mut log = String::new();

    for step in 0..a.steps {
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let oy = rng.random_range(0..=pair.input.height - side);
        let ox = rng.random_range(0..=pair.input.width - side);
        let flip_h = rng.random_range(0..2) == 1;
        let flip_v = rng.random_range(0..2) == 1;
        let input: Vec<T> = crop_view(&pair.input, oy, ox, side, flip_h, flip_v);
        let target: Vec<T> = crop_view(&pair.target, oy, ox, side, flip_h, flip_v);

        let lr = cosine_lr(step as u64, a.steps as u64, a.lr0, a.lr_min);
        let base = match cfg.seed_policy {
            SeedPolicy::FixedByShape => a.seed,
            SeedPolicy::FreshPerStep => mix_seed(a.seed, step),
        };
        let report = model.train_step(&mut opt, &shape, &input, &target, lr, base, step)?;
        writeln!(log, "{step} {lr:.8e} {:.8e} {:.4}", report.loss, report.psnr)
            .expect("writing to a string cannot fail");
    }

    std::fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("model.ckpt"))?;
    std::fs::write(a.out.join("loss.log"), log)?;
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────────

fn cmd_gradcheck<T: Scalar>(a: &GradcheckArgs) -> Result<()> {
    if a.probes == 0 {
        return Err(Error::config("--probes must be at least 1".to_string()));
    }
    let cfg = a.overrides.resolve(NetworkConfig::smoke())?;
    let reports = audit::run_full_audit_with::<T>(cfg, a.probes, a.seed)?;
    print!("{}", audit::format_reports(&reports));
    if audit::all_passed(&reports) {
        println!("all gradients verified ({})", T::PRECISION);
        Ok(())
    } else {
        Err(Error::verification(format!(
            "gradient audit failed for: {}",
            audit::failures(&reports).join(", ")
        )))
    }
}

// ── bench ───────────────────────────────────────────────────────────────────

fn parse_shapes(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut shapes = Vec::new();
    for part in s.split(',') {
        let side: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad shape {part:?} (expected an integer side)")))?;
        if side == 0 {
            return Err(Error::config("shape sides must be positive".to_string()));
        }
        shapes.push((side, side));
    }
    if shapes.is_empty() {
        return Err(Error::config("no shapes given".to_string()));
    }
    Ok(shapes)
}

const PARAM_BAND: (usize, usize) = (2_000_000, 3_400_000);
const FLOP_BAND: (u64, u64) = (300_000_000, 700_000_000);

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.overrides.resolve(NetworkConfig::standard())?;
    let model: Model<f64> = Model::build(cfg.clone(), a.seed)?;
    let shapes = parse_shapes(&a.shapes)?;
    for &(h, w) in &shapes {
        let d = cfg.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::config(format!(
                "shape {h}x{w} is not divisible by the network's spatial factor {d}"
            )));
        }
    }

    let rows = model.scaling_rows(&shapes)?;
    let scaling_txt = cost::scaling_table(&rows);
    let scaling_csv = cost::scaling_csv(&rows);
    let strategy_rows: Vec<_> = shapes
        .iter()
        .map(|&(h, w)| cost::strategy_compare(cfg.embed_dim, h, w, cfg.centroids, cfg.state_dim))
        .collect();
    let strategy_txt = cost::strategy_table(&strategy_rows);

    println!("costs by input extent");
    print!("{scaling_txt}");
    println!();
    println!("scanning strategies (multiply-accumulates)");
    print!("{strategy_txt}");
    println!();

    let params = model.param_count();
    let verdict = |ok: bool| if ok { "within band" } else { "OUTSIDE band" };
    println!(
        "parameters: {params} (reference figure 2.71M, accepted band [{}, {}]) — {}",
        PARAM_BAND.0,
        PARAM_BAND.1,
        verdict((PARAM_BAND.0..=PARAM_BAND.1).contains(&params))
    );
    match model.cost_ledger(1, 64, 64) {
        Ok(ledger) => {
            let flops = ledger.total().flops();
            println!(
                "flops at 64x64: {flops} (reference figure 0.407G, accepted band [{}, {}]) — {}",
                FLOP_BAND.0,
                FLOP_BAND.1,
                verdict((FLOP_BAND.0..=FLOP_BAND.1).contains(&flops))
            );
        }
        Err(_) => println!("flops at 64x64: not runnable at this configuration"),
    }

    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("scaling.txt"), &scaling_txt)?;
        std::fs::write(out.join("scaling.csv"), &scaling_csv)?;
        std::fs::write(out.join("strategy.txt"), &strategy_txt)?;
    }
    Ok(())
}

// ── metrics ─────────────────────────────────────────────────────────────────

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let left = ImageBuffer::load(&a.a)?;
    let right = ImageBuffer::load(&a.b)?;
    if left.width != right.width || left.height != right.height {
        return Err(Error::data(format!(
            "extents differ: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    print_scores(&left, &right)
}

// ── tests ───────────────────────────────────────────────────────────────────
