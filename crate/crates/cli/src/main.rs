//! `rgf` — road graph extraction toolkit.
//!
//! Exit codes: 0 success, 2 invalid input (including usage errors), 1
//! runtime failure.

use clap::{Parser, Subcommand};
use rgf_core::env::{self, EnvConfig};
use rgf_core::graph::SpatialGraph;
use rgf_core::mcts::{NetModel, SearchConfig};
use rgf_core::metrics::{self, graph_statistics, MetricConfig, MetricReport};
use rgf_core::nets::{read_checkpoint, write_checkpoint, SceneTensor};
use rgf_core::pipeline::{extract_keypoints, infer_tiled, FusionConfig, NetPatchSolver, TilePlan};
use rgf_core::raster::GrayImage;
use rgf_core::rng;
use rgf_core::synthgen::{generate_scene, oracle_keypoints, SceneParams, SyntheticScene};
use rgf_core::trainer::{effective_workers, play_episode, train, TrainConfig, TrainStats};
use rgf_core::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "rgf", version, about = "Road graph extraction from aerial images")]
struct Cli {
    /// Base seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic road scenes.
    Synth {
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Vegetation occluder density override.
        #[arg(long)]
        density: Option<f64>,
        /// Use the small 64x64 profile.
        #[arg(long)]
        tiny: bool,
    },
    /// Distill a road mask into keypoints plus a seed graph.
    ExtractKeypoints {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        threshold: u8,
        #[arg(long, default_value_t = 2.0)]
        rdp: f64,
        #[arg(long, default_value_t = 40.0)]
        max_edge_len: f64,
        #[arg(long, default_value_t = 8.0)]
        prune_min_len: f64,
    },
    /// Score a predicted graph against ground truth (files or directories).
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write per-pair rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Play one greedy episode on a stored scene with a trained model.
    Rollout {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        sims: usize,
        /// Write one JSON line per step: {t, action, reward, done}.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        distractors: usize,
        #[arg(long, default_value_t = 40.0)]
        max_edge_len: f64,
        #[arg(long, default_value_t = 6.0)]
        min_spacing: f64,
        /// Edge budget override.
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tiled inference over a stored scene, writing the fused graph.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        patch: u32,
        #[arg(long, default_value_t = 32)]
        overlap: u32,
        #[arg(long, default_value_t = 3.0)]
        tolerance: f64,
        /// Raw union instead of sequential fusion (known-bad baseline).
        #[arg(long)]
        naive: bool,
        #[arg(long, default_value_t = 50)]
        sims: usize,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Summary statistics and histograms of a road graph.
    Stats {
        #[arg(long)]
        graph: PathBuf,
        /// Write histograms as CSV rows (kind, bin, count).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { n, out, density, tiny } => cmd_synth(seed, n, &out, density, tiny),
        Command::ExtractKeypoints { mask, out, threshold, rdp, max_edge_len, prune_min_len } => {
            cmd_extract(&mask, &out, threshold, rdp, max_edge_len, prune_min_len)
        }
        Command::Eval { gt, pred, csv } => cmd_eval(&gt, &pred, csv.as_deref()),
        Command::Rollout {
            scene,
            ckpt,
            sims,
            trace,
            distractors,
            max_edge_len,
            min_spacing,
            n_max,
        } => cmd_rollout(
            seed,
            &scene,
            &ckpt,
            sims,
            trace.as_deref(),
            distractors,
            max_edge_len,
            min_spacing,
            n_max,
        ),
        Command::Train { config, out } => cmd_train(cli.seed, &config, &out),
        Command::Infer { scene, ckpt, out, patch, overlap, tolerance, naive, sims, n_max } => {
            cmd_infer(&scene, &ckpt, &out, patch, overlap, tolerance, naive, sims, n_max)
        }
        Command::Stats { graph, csv } => cmd_stats(&graph, csv.as_deref()),
    }
}

/// Run `job(i)` for every index, fanning out across threads (RGF_THREADS
/// caps the count) and preserving index order in the result.
fn parallel_map<T: Send>(
    n: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = effective_workers(8).min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(&job).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .collect::<Vec<_>>()
            .chunks(chunk)
            .map(|ids| {
                let ids = ids.to_vec();
                let job = &job;
                scope.spawn(move || ids.into_iter().map(job).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Numeric("worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn cmd_synth(seed: u64, n: usize, out: &Path, density: Option<f64>, tiny: bool) -> Result<()> {
    if n == 0 {
        return Err(Error::validation("--n must be positive"));
    }
    let mut params = if tiny { SceneParams::tiny() } else { SceneParams::default() };
    if let Some(d) = density {
        params.vegetation_density = d;
    }
    params.validate()?;
    std::fs::create_dir_all(out)?;
    parallel_map(n, |i| {
        let scene = generate_scene(rng::derive(seed, i as u64), &params)?;
        scene.save(&out.join(format!("scene_{i:04}")))
    })?;
    println!("{}", serde_json::json!({ "scenes": n, "out": out }));
    Ok(())
}

fn cmd_extract(
    mask: &Path,
    out: &Path,
    threshold: u8,
    rdp: f64,
    max_edge_len: f64,
    prune_min_len: f64,
) -> Result<()> {
    let img = GrayImage::read_pnm(mask)?;
    let (kps, edges) = extract_keypoints(&img, threshold, rdp, max_edge_len, prune_min_len)?;
    let (graph, _) = SpatialGraph::build(img.width, img.height, kps, edges)?;
    graph.write_json(out)?;
    println!(
        "{}",
        serde_json::json!({ "keypoints": graph.vertices.len(), "edges": graph.edges.len() })
    );
    Ok(())
}

fn report_csv_row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.apls,
        r.tlts_correct,
        r.tlts_infeasible,
        r.tlts_2l2s,
        r.ccq_correctness,
        r.ccq_completeness,
        r.ccq_quality,
        r.path_pre,
        r.path_rec,
        r.path_f1,
        r.junc_pre,
        r.junc_rec,
        r.junc_f1,
        r.subgraph_f1,
        r.combined,
        r.degenerate,
    )
}

const REPORT_CSV_HEADER: &str = "file,apls,tlts_correct,tlts_infeasible,tlts_2l2s,\
ccq_correctness,ccq_completeness,ccq_quality,path_pre,path_rec,path_f1,\
junc_pre,junc_rec,junc_f1,subgraph_f1,combined,degenerate";

fn json_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_eval(gt: &Path, pred: &Path, csv: Option<&Path>) -> Result<()> {
    let cfg = MetricConfig::default();
    let pairs: Vec<(String, PathBuf, PathBuf)> = if gt.is_dir() && pred.is_dir() {
        let names = json_files(gt)?;
        if names.is_empty() {
            return Err(Error::validation("no .json graphs in the ground-truth directory"));
        }
        for n in &names {
            if !pred.join(n).exists() {
                return Err(Error::validation(format!("prediction missing for {n}")));
            }
        }
        names.into_iter().map(|n| (n.clone(), gt.join(&n), pred.join(&n))).collect()
    } else {
        vec![("-".into(), gt.to_path_buf(), pred.to_path_buf())]
    };
    let reports = parallel_map(pairs.len(), |i| {
        let (_, g, p) = &pairs[i];
        metrics::evaluate(&SpatialGraph::read_json(g)?, &SpatialGraph::read_json(p)?, &cfg)
    })?;
    if let Some(path) = csv {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{REPORT_CSV_HEADER}")?;
        for ((name, _, _), r) in pairs.iter().zip(&reports) {
            writeln!(f, "{}", report_csv_row(name, r))?;
        }
    }
    if reports.len() == 1 {
        println!("{}", serde_json::to_string(&reports[0]).expect("report serializes"));
    } else {
        let mean = reports.iter().map(|r| r.combined).sum::<f64>() / reports.len() as f64;
        println!(
            "{}",
            serde_json::json!({ "pairs": reports.len(), "mean_combined": mean })
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rollout(
    seed: u64,
    scene_dir: &Path,
    ckpt: &Path,
    sims: usize,
    trace: Option<&Path>,
    distractors: usize,
    max_edge_len: f64,
    min_spacing: f64,
    n_max: Option<usize>,
) -> Result<()> {
    let scene = SyntheticScene::load(scene_dir)?;
    let params = read_checkpoint(ckpt)?;
    let (kps, _) =
        oracle_keypoints(&scene.gt, scene.seed, distractors, max_edge_len, min_spacing)?;
    let tensor = SceneTensor::new(&scene.image, &kps, &params.dims);
    let env_cfg = EnvConfig { n_max, ..EnvConfig::default() };
    let state = env::reset(
        Arc::new(scene.image.clone()),
        Arc::new(kps),
        &[],
        Some(Arc::new(scene.gt.clone())),
        &env_cfg,
    )?;
    let model = NetModel::new(&params, &tensor, state.n_max());
    let search = SearchConfig {
        n_simulations: sims,
        exploration_fraction: 0.0,
        ..SearchConfig::default()
    };
    let (steps, end) = play_episode(&model, state, &search, Some(0.0), seed)?;
    if let Some(path) = trace {
        let mut f = std::fs::File::create(path)?;
        for (t, s) in steps.iter().enumerate() {
            writeln!(
                f,
                "{}",
                serde_json::json!({
                    "t": t,
                    "action": s.action,
                    "reward": s.reward,
                    "done": t + 1 == steps.len(),
                })
            )?;
        }
    }
    let ret: f64 = steps.iter().map(|s| s.reward).sum();
    println!(
        "{}",
        serde_json::json!({ "steps": steps.len(), "return": ret, "combined": end.cached_score })
    );
    Ok(())
}

fn cmd_train(seed: Option<u64>, config: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("bad training config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "{}", TrainStats::csv_header())?;
    let mut rows = 0usize;
    let params = train(&cfg, |s| {
        rows += 1;
        let _ = writeln!(csv, "{}", s.csv_row());
    })?;
    let ckpt_path = out.join("checkpoint.bin");
    write_checkpoint(&params, &ckpt_path)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;
    println!(
        "{}",
        serde_json::json!({ "updates": rows, "checkpoint": ckpt_path, "metrics": csv_path })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    scene_dir: &Path,
    ckpt: &Path,
    out: &Path,
    patch: u32,
    overlap: u32,
    tolerance: f64,
    naive: bool,
    sims: usize,
    n_max: Option<usize>,
) -> Result<()> {
    let scene = SyntheticScene::load(scene_dir)?;
    let params = read_checkpoint(ckpt)?;
    let mask = scene.road_mask.to_gray();
    let plan = TilePlan::new(scene.image.width, scene.image.height, patch, overlap)?;
    let search = SearchConfig {
        n_simulations: sims,
        exploration_fraction: 0.0,
        ..SearchConfig::default()
    };
    let env_cfg = EnvConfig { n_max, ..EnvConfig::default() };
    let solver = NetPatchSolver {
        mask: Some(&mask),
        ..NetPatchSolver::new(&params, search, env_cfg)
    };
    let fusion = FusionConfig { tolerance, naive, ..FusionConfig::default() };
    let graph = infer_tiled(&scene.image, &solver, &plan, &fusion)?;
    graph.write_json(out)?;
    let combined = metrics::combined_score(&scene.gt, &graph, &MetricConfig::default())?;
    println!(
        "{}",
        serde_json::json!({
            "vertices": graph.vertices.len(),
            "edges": graph.edges.len(),
            "patches": plan.len(),
            "combined": combined,
        })
    );
    Ok(())
}

fn cmd_stats(graph: &Path, csv: Option<&Path>) -> Result<()> {
    let g = SpatialGraph::read_json(graph)?;
    let stats = graph_statistics(&g);
    if let Some(path) = csv {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "kind,bin,count")?;
        for (b, c) in stats.junction_angle_histogram.iter().enumerate() {
            writeln!(f, "junction_angle,{b},{c}")?;
        }
        for (d, c) in stats.degree_histogram.iter().enumerate() {
            writeln!(f, "degree,{d},{c}")?;
        }
    }
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(())
}
