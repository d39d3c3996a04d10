mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use config::{keys_help, Settings};
use doge_core::io::{load_mask, read_graph, save_mask, write_graph, write_svg};
use doge_core::metrics::evaluate;
use doge_core::pipeline::{run, write_outputs};
use doge_core::synth::{generate, synth_mask, Layout, SynthSpec};
use doge_core::{CanvasSpec, CoverageMap};

const EXIT_EMPTY_TARGET: u8 = 2;

#[derive(Parser)]
#[command(name = "doge", version, about = "Fit Bezier road graphs to segmentation masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a road graph to a mask (or to every mask in a directory).
    Optimize(OptimizeArgs),
    /// Generate a synthetic road network and its mask.
    Synth(SynthArgs),
    /// Score a fitted graph against a mask and optional ground truth.
    Eval(EvalArgs),
    /// Draw a graph as SVG and as hard/soft raster renders.
    Render(RenderArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// 8-bit grayscale PNG/PGM mask, or a directory of them.
    #[arg(long)]
    mask: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for --set run.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent runs when --mask is a directory.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// single_curve, grid, t_junctions or random_planar.
    #[arg(long)]
    layout: String,
    /// Side length of the scene (m).
    #[arg(long, default_value_t = 256.0)]
    extent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    meters_per_pixel: f64,
    /// Grid rows.
    #[arg(long, default_value_t = 2)]
    rows: usize,
    /// Grid columns, or stub count for t_junctions.
    #[arg(long, default_value_t = 2)]
    cols: usize,
    #[arg(long, default_value_t = 6.0)]
    width_min: f64,
    #[arg(long, default_value_t = 10.0)]
    width_max: f64,
    /// Largest control offset as a fraction of the chord.
    #[arg(long, default_value_t = 0.3)]
    curvature: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Binarization threshold for both maps.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Node matching radius (m).
    #[arg(long, default_value_t = 5.0)]
    tol: f64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Hard and soft renders side by side.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Canvas width in pixels; defaults to the graph's extent.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DOGE_LOG", "error")).init();
    let help = keys_help();
    let cmd = Cli::command().mut_subcommand("optimize", |c| c.after_help(help));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let outcome = match cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Render(a) => render(a).map(|_| ExitCode::SUCCESS),
    };
    outcome.unwrap_or_else(|e| report(&e))
}

fn is_empty_target(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<doge_core::Error>(), Some(doge_core::Error::EmptyTarget)))
}

/// Joins the error chain, skipping causes whose text the previous message
/// already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn report(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {}", describe(e));
    if is_empty_target(e) {
        ExitCode::from(EXIT_EMPTY_TARGET)
    } else {
        ExitCode::FAILURE
    }
}

fn is_mask_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm")
    )
}

fn optimize_one(mask_path: &Path, out: &Path, settings: &Settings) -> Result<()> {
    let target = load_mask(mask_path, settings.meters_per_pixel)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let snapshots = (settings.run.snapshot_period > 0).then_some(out);
    let report = run(&target, &settings.run, snapshots).with_context(|| mask_path.display().to_string())?;
    write_outputs(&report, &target, out)?;
    log::info!(
        "{}: {:?} after {} iterations, {} nodes / {} edges",
        mask_path.display(),
        report.stop_reason,
        report.iterations(),
        report.graph.node_count(),
        report.graph.edge_count()
    );
    Ok(())
}

fn optimize(a: OptimizeArgs) -> Result<ExitCode> {
    let mut flags = a.config.set.clone();
    if let Some(seed) = a.seed {
        flags.push(format!("run.seed={seed}"));
    }
    let settings = Settings::layered(a.config.config.as_deref(), &flags)?;
    if !a.mask.is_dir() {
        optimize_one(&a.mask, &a.out, &settings)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut masks: Vec<PathBuf> = std::fs::read_dir(&a.mask)
        .with_context(|| a.mask.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_mask_file(p))
        .collect();
    masks.sort();
    if masks.is_empty() {
        bail!("{}: no .png or .pgm masks found", a.mask.display());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build()?;
    let results: Vec<Result<()>> = pool.install(|| {
        masks
            .par_iter()
            .map(|m| {
                let stem = m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                optimize_one(m, &a.out.join(stem), &settings)
            })
            .collect()
    });
    let mut code = ExitCode::SUCCESS;
    let mut failed = false;
    for r in results {
        if let Err(e) = r {
            let c = report(&e);
            if is_empty_target(&e) && !failed {
                code = c;
            } else {
                failed = true;
                code = ExitCode::FAILURE;
            }
        }
    }
    Ok(code)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        layout: a.layout.parse::<Layout>()?,
        extent: a.extent,
        width_min: a.width_min,
        width_max: a.width_max,
        max_curvature: a.curvature,
        rows: a.rows,
        cols: a.cols,
        seed: a.seed,
    };
    let g = generate(&spec)?;
    let side = (a.extent / a.meters_per_pixel).round() as usize;
    let canvas = CanvasSpec::new(side, side, a.meters_per_pixel)?;
    let mask = synth_mask(&g, &canvas)?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    write_graph(&g, a.meters_per_pixel, &a.out.join("truth.json"))?;
    save_mask(&mask, &a.out.join("mask.png"))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (pred, mpp) = read_graph(&a.pred)?;
    let truth = match &a.truth {
        Some(p) => {
            let (t, truth_mpp) = read_graph(p)?;
            if truth_mpp != mpp {
                return Err(doge_core::Error::DimensionMismatch(format!(
                    "prediction uses {mpp} m/px but truth uses {truth_mpp} m/px"
                ))
                .into());
            }
            Some(t)
        }
        None => None,
    };
    let mask = load_mask(&a.mask, mpp)?;
    let report = evaluate(&pred, &mask, truth.as_ref(), a.threshold, a.tol)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (g, mpp) = read_graph(&a.graph)?;
    let (mut w_m, mut h_m) = (0.0f64, 0.0f64);
    for e in g.edges() {
        if let Ok(cp) = g.control_polygon(e.id) {
            let (_, hi) = cp.bounds();
            w_m = w_m.max(hi.x + e.width);
            h_m = h_m.max(hi.y + e.width);
        }
    }
    let width = a.width.unwrap_or(((w_m / mpp).ceil() as usize).max(1));
    let height = a.height.unwrap_or(((h_m / mpp).ceil() as usize).max(1));
    let canvas = CanvasSpec::new(width, height, mpp)?;
    if let Some(p) = &a.svg {
        write_svg(&g, &canvas, p)?;
    }
    if let Some(p) = &a.png {
        let hard = doge_core::synth::hard_rasterize(&g, &canvas, 8)?;
        let soft = doge_core::raster::render_graph(&g, &canvas).composite_union;
        let wide = CanvasSpec::new(2 * width, height, mpp)?;
        let mut both = Vec::with_capacity(wide.pixel_count());
        for r in 0..height {
            both.extend_from_slice(&hard.values()[r * width..(r + 1) * width]);
            both.extend_from_slice(&soft.values()[r * width..(r + 1) * width]);
        }
        save_mask(&CoverageMap::from_values(wide, both)?, p)?;
    }
    if a.svg.is_none() && a.png.is_none() {
        bail!("nothing to do: pass --svg and/or --png");
    }
    Ok(())
}
