//! `goreloc` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use goreloc_core::association::RansacParams;
use goreloc_core::geometry::CameraIntrinsics;
use goreloc_core::graph::{build_map_graph, kernel_vectors, EdgeWeighting, DEFAULT_K};
use goreloc_core::harness::formats::load_detections;
use goreloc_core::harness::{
    evaluate_report, generate_synthetic, load_intrinsics, load_map, load_trajectory, open_detections,
    run_relocalization, Method, PipelineConfig, Relocalizer, Report, ReportInputs, SynthConfig,
};
use goreloc_core::semantics::mode_label;

/// Exit status for malformed input or configuration.
const EXIT_INPUT: u8 = 2;
/// Exit status when more than half of the frames failed to relocalize.
const EXIT_MOSTLY_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "goreloc", version, about = "Object-level camera relocalization against a quadric map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    NoneGraph,
    RandomWalk,
}

#[derive(Subcommand)]
enum Command {
    /// Relocalize every frame of a detections file.
    Reloc {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// `fx,fy,cx,cy,width,height`, or a file containing that line.
        #[arg(long)]
        intrinsics: String,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        j: usize,
        #[arg(long, default_value_t = 3)]
        num: usize,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long, default_value_t = 40.0)]
        inlier_px: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace graph-kernel retrieval with a baseline.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Random walks per node for the random-walk baseline.
        #[arg(long, default_value_t = 50)]
        walks: usize,
        /// Report the RANSAC pose without refinement.
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-stage timings as JSON.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Score a report against a ground-truth trajectory.
    Eval {
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "gt-traj")]
        gt_traj: PathBuf,
        /// Source of ground-truth associations (only projection is supported).
        #[arg(long = "gt-assoc", default_value = "from-projection", value_parser = ["from-projection"])]
        gt_assoc: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the map path recorded in the report.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Override the detections path recorded in the report.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Success-rate thresholds in meters.
        #[arg(long, value_delimiter = ',', default_value = "2,5")]
        thresholds: Vec<f64>,
        /// Fractions of best frames for the mean translation error.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2")]
        fractions: Vec<f64>,
    },
    /// Generate a synthetic scene.
    Synth {
        /// JSON synthetic-scene configuration; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump map graph node descriptors.
    Graph {
        #[arg(long)]
        map: PathBuf,
        #[arg(long = "dump-kernels")]
        dump_kernels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Weight edges by inverse distance instead of distance.
        #[arg(long)]
        inverse_distance: bool,
    },
}

fn parse_intrinsics(arg: &str) -> Result<CameraIntrinsics> {
    match arg.parse() {
        Ok(k) => Ok(k),
        Err(_) if Path::new(arg).is_file() => Ok(load_intrinsics(arg)?),
        Err(e) => Err(e).context("--intrinsics expects fx,fy,cx,cy,width,height or a file"),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn reloc(
    map: &Path,
    detections: &Path,
    intrinsics: &str,
    config: PipelineConfig,
    report_path: &Path,
    timings_path: Option<&Path>,
) -> Result<ExitCode> {
    let camera = parse_intrinsics(intrinsics)?;
    let (cats, objects) = load_map(map)?;
    info!("map: {} objects, {} categories", objects.len(), cats.len());
    let frames = open_detections(detections, &cats, &camera)?;
    let reloc = Relocalizer::new(cats, objects, camera, config)?;
    let inputs = ReportInputs {
        map: map.display().to_string(),
        detections: detections.display().to_string(),
        intrinsics: camera.to_string(),
    };
    let (report, timings) = run_relocalization(&reloc, frames, inputs)?;
    report.save(report_path)?;
    eprint!("{}", timings.render());
    if let Some(p) = timings_path {
        write(p, &timings.to_json())?;
    }
    eprintln!(
        "relocalized {}/{} frames",
        report.summary.relocalized, report.summary.frames
    );
    Ok(if report.failure_fraction() > 0.5 {
        ExitCode::from(EXIT_MOSTLY_FAILED)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval(
    report_path: &Path,
    gt_traj: &Path,
    out: &Path,
    map: Option<&Path>,
    detections: Option<&Path>,
    thresholds: &[f64],
    fractions: &[f64],
) -> Result<ExitCode> {
    let report = Report::load(report_path)?;
    let camera = parse_intrinsics(&report.inputs.intrinsics)?;
    let map = map.map_or_else(|| PathBuf::from(&report.inputs.map), Path::to_path_buf);
    let detections = detections.map_or_else(|| PathBuf::from(&report.inputs.detections), Path::to_path_buf);
    let (cats, objects) = load_map(&map)?;
    let frames = load_detections(&detections, &cats, &camera)?;
    let gt = load_trajectory(gt_traj)?;
    let metrics = evaluate_report(&report, &objects, &frames, &camera, &gt, thresholds, fractions)?;
    write(out, &metrics.to_json())?;
    print!("{}", metrics.render_table());
    Ok(ExitCode::SUCCESS)
}

fn synth(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg: SynthConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| goreloc_core::Error::Parse {
                path: p.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scene = generate_synthetic(&cfg)?;
    scene.write_to_dir(out_dir)?;
    let dets: usize = scene.frames.iter().map(|f| f.detections.len()).sum();
    eprintln!(
        "wrote {} objects, {} frames, {} detections to {}",
        scene.objects.len(),
        scene.frames.len(),
        dets,
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn graph(map: &Path, out: &Path, k: usize, inverse_distance: bool) -> Result<ExitCode> {
    let (cats, objects) = load_map(map)?;
    let weighting = if inverse_distance {
        EdgeWeighting::InverseDistance
    } else {
        EdgeWeighting::Distance
    };
    let g = build_map_graph(&objects, k, weighting);
    let kernels = kernel_vectors(&g);
    let nodes: Vec<serde_json::Value> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let label = mode_label(&n.distribution).map(|l| cats.name(l).to_string()).ok();
            let neighbors: Vec<serde_json::Value> = g
                .neighbors(i)
                .expect("index in range")
                .iter()
                .map(|e| serde_json::json!({ "id": g.nodes()[e.to].id, "weight": e.weight }))
                .collect();
            serde_json::json!({
                "id": n.id,
                "label": label,
                "kernel": kernels[i].as_slice(),
                "neighbors": neighbors,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "categories": cats.names(),
        "k": k,
        "weighting": weighting,
        "nodes": nodes,
    });
    write(out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Reloc {
            map,
            detections,
            intrinsics,
            k,
            j,
            num,
            max_iter,
            inlier_px,
            seed,
            baseline,
            walks,
            no_refine,
            report,
            timings,
        } => {
            let config = PipelineConfig {
                method: match baseline {
                    None => Method::GoReloc,
                    Some(Baseline::NoneGraph) => Method::NoneGraph,
                    Some(Baseline::RandomWalk) => Method::RandomWalk,
                },
                k,
                j,
                ransac: RansacParams {
                    num,
                    max_iter,
                    inlier_threshold: inlier_px,
                    seed,
                    ..RansacParams::default()
                },
                skip_refinement: no_refine,
                walks,
                ..PipelineConfig::default()
            };
            reloc(&map, &detections, &intrinsics, config, &report, timings.as_deref())
        }
        Command::Eval {
            report,
            gt_traj,
            gt_assoc: _,
            out,
            map,
            detections,
            thresholds,
            fractions,
        } => eval(&report, &gt_traj, &out, map.as_deref(), detections.as_deref(), &thresholds, &fractions),
        Command::Synth { config, out_dir, seed } => synth(config.as_deref(), &out_dir, seed),
        Command::Graph {
            map,
            dump_kernels,
            k,
            inverse_distance,
        } => graph(&map, &dump_kernels, k, inverse_distance),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e
                .downcast_ref::<goreloc_core::Error>()
                .is_none_or(|c| c.is_input_error() || matches!(c, goreloc_core::Error::NoGroundTruth { .. }));
            ExitCode::from(if input { EXIT_INPUT } else { 1 })
        }
    }
}
