use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lococontrast::cropper::{self, CropSpec};
use lococontrast::dataset::{self, Dataset, ImageSource, Split, SynthConfig};
use lococontrast::evalkit::{self, ContainmentMode, EvalModels, RenderOptions};
use lococontrast::seeding;
use lococontrast::selfcheck;
use lococontrast::trainer::{self, TrainConfig, TrainState};

const SEED_ENV: &str = "LOCOCONTRAST_SEED";

/// Contrastive crop-to-grid pretraining and localization evaluation.
#[derive(Parser, Debug)]
#[command(version, about, propagate_version = true)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset (PNG files plus manifest.json).
    Synth(SynthArgs),
    /// Train both encoders from a JSON config.
    Train(TrainArgs),
    /// Per-level SGA / RIGA / GAP-R on a dataset.
    Eval(EvalArgs),
    /// Render per-level and combined similarity heatmaps for one image.
    Heatmap(HeatmapArgs),
    /// Rank dataset images by similarity to a query crop.
    Retrieve(RetrieveArgs),
    /// Run the built-in oracle suites and report pass/fail.
    Selfcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Center,
    FullCell,
}

impl From<ModeArg> for ContainmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Center => ContainmentMode::Center,
            ModeArg::FullCell => ContainmentMode::FullCell,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Side of the square images in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    min_shapes: usize,
    #[arg(long, default_value_t = 8)]
    max_shapes: usize,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Generator seed [env: LOCOCONTRAST_SEED; default 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config.
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `seed` from the config [env fallback: LOCOCONTRAST_SEED].
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Crop and baseline seed [env: LOCOCONTRAST_SEED; default 0].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "center")]
    mode: ModeArg,
    /// Directory for metrics.json and metrics.csv.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image file to query.
    #[arg(long)]
    image: PathBuf,
    /// Seed for the query crop [env: LOCOCONTRAST_SEED; default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Query crop as `x,y,side` instead of a seeded random crop.
    #[arg(long, value_parser = parse_crop)]
    crop: Option<CropSpec>,
    /// Upscale the query image so its longer side is at least this.
    #[arg(long, default_value_t = dataset::MIN_IMAGE_SIDE)]
    min_side: usize,
    #[arg(long, default_value = "heatmaps")]
    out: PathBuf,
    /// Weight of the photo under the colormap, 0..1.
    #[arg(long, default_value_t = 0.35)]
    alpha: f32,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset to search.
    #[arg(long)]
    data: PathBuf,
    /// Query image file.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Seed for the query crop [env: LOCOCONTRAST_SEED; default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Query crop as `x,y,side` instead of a seeded random crop.
    #[arg(long, value_parser = parse_crop)]
    crop: Option<CropSpec>,
    /// Upscale the query image so its longer side is at least this.
    #[arg(long, default_value_t = dataset::MIN_IMAGE_SIDE)]
    min_side: usize,
    #[arg(long, default_value = "retrieval")]
    out: PathBuf,
    /// Also write a contact-sheet PNG of the query and its hits.
    #[arg(long)]
    contact_sheet: bool,
}

fn parse_crop(s: &str) -> Result<CropSpec, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("bad crop component {p:?}"))
        })
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, side] if side > 0 => Ok(CropSpec {
            a,
            b,
            w: side,
            h: side,
        }),
        _ => Err("crop must be x,y,side with side > 0".into()),
    }
}

/// Flag, then the environment, then `default`.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(default),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    dataset::write_atomic(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn load_models(ckpt: &Path) -> Result<TrainState> {
    trainer::load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn load_query(path: &Path, min_side: usize) -> Result<dataset::ImageSample> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("query");
    let img = dataset::load_image_file(path, id, ImageSource::File)?;
    Ok(dataset::ensure_min_size(img, min_side.max(1)))
}

fn query_crop(
    image: &dataset::ImageSample,
    explicit: Option<CropSpec>,
    seed: u64,
) -> Result<CropSpec> {
    match explicit {
        Some(c) if c.fits_in(image.width, image.height) => Ok(c),
        Some(c) => bail!(
            "crop {c:?} does not fit the {}x{} image",
            image.width,
            image.height
        ),
        None => Ok(cropper::sample_crop(
            image.width,
            image.height,
            &mut seeding::image_stream(seed, &image.id),
        )?),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        image_size: args.size,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes,
        seed: resolve_seed(args.seed, 0)?,
        ..SynthConfig::default()
    };
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let manifest = dataset::generate_synthetic(&cfg, args.count, &args.out, split)?;
    println!(
        "wrote {} images to {}",
        manifest.items.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let mut cfg: TrainConfig = serde_json::from_value(raw.clone())
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    // Flag > config file > environment > built-in default.
    let file_seed = raw.get("seed").and_then(|v| v.as_u64());
    cfg.seed = match (args.seed, file_seed) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => resolve_seed(None, cfg.seed)?,
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;

    let outcome = match args.resume {
        Some(ckpt) => {
            let mut state = load_models(&ckpt)?;
            if state.config.model != cfg.model || state.config.seed != cfg.seed {
                bail!(
                    "checkpoint {} was trained with a different model or seed",
                    ckpt.display()
                );
            }
            state.config.epochs = cfg.epochs;
            state.config.output_dir = cfg.output_dir.clone();
            state.config.log_path = cfg.log_path.clone();
            state.config.checkpoint_every = cfg.checkpoint_every;
            let data = state.config.data.open()?;
            trainer::run(state, &data)?
        }
        None => {
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_json(
                &cfg.output_dir.join("config.json"),
                &serde_json::to_value(&cfg)?,
            )?;
            trainer::train(cfg)?
        }
    };
    let last = outcome.records.last();
    println!(
        "trained to epoch {} ({} steps this run, last loss {})",
        outcome.state.epoch,
        outcome.records.len(),
        last.map_or("n/a".into(), |r| format!("{:.5}", r.loss))
    );
    if let Some(p) = outcome.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, 0)?;
    let state = load_models(&args.ckpt)?;
    let data = Dataset::open(&args.data)?;
    let models = EvalModels {
        crop: &state.crop,
        pyramid: &state.pyramid,
    };
    let mut report = evalkit::eval_sga_riga(&models, &data, seed, args.mode.into())?;
    report.provenance = json!({
        "command": "eval",
        "checkpoint": args.ckpt,
        "data": args.data,
        "seed": seed,
        "mode": report.mode,
        "epoch": state.epoch,
        "train_config": state.config,
    });
    std::fs::create_dir_all(&args.out)?;
    report.write_json(&args.out.join("metrics.json"))?;
    report.write_csv(&args.out.join("metrics.csv"))?;
    println!(
        "{:>5} {:>6} {:>8} {:>8} {:>8}",
        "level", "stride", "SGA", "RIGA", "GAP-R"
    );
    for l in &report.levels {
        let gap = l.gap_r.map_or("n/a".into(), |g| format!("{g:.3}"));
        println!(
            "{:>5} {:>6} {:>8.4} {:>8.4} {:>8}",
            l.level, l.stride, l.sga, l.riga, gap
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn heatmap(args: HeatmapArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, 0)?;
    let state = load_models(&args.ckpt)?;
    let image = load_query(&args.image, args.min_side)?;
    let crop = query_crop(&image, args.crop, seed)?;
    let z = state
        .crop
        .encode_crop(&cropper::extract_crop(&image, &crop)?);
    let maps = state.pyramid.encode_pyramid(&image);
    let heat = evalkit::similarity_heatmap(&z, &maps, image.width, image.height, Some(crop));
    let files = evalkit::render_heatmap(
        &heat,
        &image,
        &args.out,
        &image.id,
        &RenderOptions {
            image_alpha: args.alpha,
        },
    )?;
    let summary = json!({
        "image": args.image,
        "crop": crop,
        "argmax": heat.levels.iter().map(|l| json!({
            "level": l.level,
            "cell": l.argmax,
            "center": l.argmax_center(),
            "value": l.get(l.argmax.row, l.argmax.col),
        })).collect::<Vec<_>>(),
        "files": files,
        "provenance": {"command": "heatmap", "checkpoint": args.ckpt, "seed": seed, "train_config": state.config},
    });
    write_json(
        &args.out.join(format!("{}_heatmap.json", image.id)),
        &summary,
    )?;
    for p in files.levels.iter().chain([&files.combined]) {
        println!("{}", p.display());
    }
    Ok(())
}

fn retrieve(args: RetrieveArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, 0)?;
    let state = load_models(&args.ckpt)?;
    let data = Dataset::open(&args.data)?;
    let image = load_query(&args.image, args.min_side)?;
    let crop = query_crop(&image, args.crop, seed)?;
    let models = EvalModels {
        crop: &state.crop,
        pyramid: &state.pyramid,
    };
    let mut result = evalkit::retrieve_topk(&models, &image, crop, &data, args.k)?;
    result.provenance = json!({
        "command": "retrieve",
        "checkpoint": args.ckpt,
        "data": args.data,
        "image": args.image,
        "seed": seed,
        "train_config": state.config,
    });
    std::fs::create_dir_all(&args.out)?;
    write_json(
        &args.out.join("retrieval.json"),
        &serde_json::to_value(&result)?,
    )?;
    if args.contact_sheet {
        let hits = result
            .hits
            .iter()
            .map(|h| data.load(h.index))
            .collect::<lococontrast::Result<Vec<_>>>()?;
        let query = cropper::extract_crop(&image, &crop)?;
        evalkit::render_contact_sheet(&query, &hits, 128, &args.out.join("contact_sheet.png"))?;
    }
    for h in &result.hits {
        println!("{:>3}  {:.4}  {}", h.rank, h.score, h.image_id);
    }
    Ok(())
}

fn run_selfcheck() -> Result<bool> {
    let checks = selfcheck::run_selfcheck();
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<28} {:>6.2}s  {}", c.name, c.seconds, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    );
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Selfcheck => match run_selfcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
