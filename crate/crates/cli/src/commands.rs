use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use posebench_core::eval_nvs::{
    aggregate_scene_with, aggregate_summaries, default_test_split, psnr, ssim, ImageBuffer,
    MetricSummary, SceneMetricSet, ViewMetrics, DEFAULT_PSNR_CAP,
};
use posebench_core::eval_poses::{accuracy_at, accuracy_curve, evaluate};
use posebench_core::mapping::{build_tracks, triangulate_tracks, TriangulationThresholds};
use posebench_core::matching::{
    match_pairs, read_match_dump, verify_graph, write_match_dump, MatchOptions, View,
};
use posebench_core::model_io::{
    read_features_for_images, read_metric_table, write_features, write_metric_table, write_model,
    FeatureSet, MetricTable, ModelFormat, SparseModel,
};
use posebench_core::pairing::{select_pairs, NeighborRelation, PairingOptions};
use posebench_core::refine::{attach_features, run_refinement, RefineConfig};
use posebench_core::synth::{generate, scene_diameter, SynthConfig};
use posebench_core::ImageId;
use serde::{de::DeserializeOwned, Serialize};

use crate::bench::{load_model, BenchConfig, BenchRun};
use crate::report::{self, AccuracyRow};
use crate::{CliError, Staged};

#[derive(Debug, Parser)]
#[command(
    name = "posebench",
    version,
    about = "Pose refinement and evaluation benchmark"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: perturbed model, ground truth and features.
    Synth(SynthArgs),
    /// Pick image pairs from camera poses.
    SelectPairs(SelectPairsArgs),
    /// Match features of listed pairs and verify them against the poses.
    Match(MatchArgs),
    /// Build tracks from matches and triangulate them.
    Triangulate(TriangulateArgs),
    /// Full refinement pipeline.
    Refine(RefineArgs),
    /// Compare estimated poses with ground truth.
    EvalPoses(EvalPosesArgs),
    /// PSNR / SSIM of rendered test views.
    EvalNvs(EvalNvsArgs),
    /// Dataset means from metric tables, or a time/quality table over runs.
    Aggregate(AggregateArgs),
    /// Refine and evaluate every scene of a config.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Binary,
    Text,
}

impl From<FormatArg> for ModelFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Binary => ModelFormat::Binary,
            FormatArg::Text => ModelFormat::Text,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic scene config; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct SelectPairsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub k_nearest: usize,
    #[arg(long, default_value_t = 60.0)]
    pub max_angle_deg: f64,
    /// Require both images to list each other.
    #[arg(long)]
    pub mutual: bool,
    /// Pair list, one `name_a name_b` per line; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub max_distance: Option<f64>,
    #[arg(long, default_value_t = 8.0)]
    pub verify_px: f64,
    #[arg(long)]
    pub no_verify: bool,
}

#[derive(Debug, Args)]
pub struct TriangulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub max_reproj_px: f64,
    #[arg(long, default_value_t = 1.5)]
    pub min_angle_deg: f64,
    #[arg(long, default_value_t = 2)]
    pub min_track_len: usize,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON document with `RefineConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct EvalPosesArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub rot_deg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub pos: f64,
    /// Divide position errors by the ground-truth scene diameter.
    #[arg(long)]
    pub relative: bool,
    /// Rigid alignment instead of a similarity.
    #[arg(long)]
    pub no_scale: bool,
    /// Position thresholds for an accuracy curve at `--rot-deg`.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
    /// Where to write the curve; stdout when omitted.
    #[arg(long, requires = "sweep")]
    pub curve: Option<PathBuf>,
    /// Per-view CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalNvsArgs {
    #[arg(long)]
    pub renders: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub scene: String,
    /// Test view names, one per line; every 8th ground-truth image otherwise.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// CSV with `view,lpips` columns.
    #[arg(long)]
    pub lpips: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PSNR_CAP)]
    pub psnr_cap: f64,
    /// Per-view metric table; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["metrics", "runs"])))]
pub struct AggregateArgs {
    /// `scene,metric,value` or `scene,view,metric,value` table.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// JSON map from scene to its expected test views (per-view tables only).
    #[arg(long, requires = "metrics")]
    pub expected: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PSNR_CAP)]
    pub psnr_cap: f64,
    /// Bench output directories to tabulate against time.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "psnr")]
    pub metric: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenes processed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Validate the config and inputs without running or writing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Also write each refined model under `<out>/models/<scene>`.
    #[arg(long)]
    pub save_models: bool,
    /// Overrides the config's label.
    #[arg(long)]
    pub label: Option<String>,
}

pub(crate) fn execute(cmd: Command, thread_cap: Option<usize>) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::SelectPairs(a) => select_pairs_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Triangulate(a) => triangulate(a),
        Command::Refine(a) => refine(a),
        Command::EvalPoses(a) => eval_poses(a),
        Command::EvalNvs(a) => eval_nvs(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Bench(a) => bench(a, thread_cap),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(stage, format!("{}: {e}", path.display())))
}

/// Writes to `path`, or to stdout when it is `None`.
fn emit(path: Option<&Path>, text: &str, stage: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::new(stage, format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).at(stage),
    }
}

fn load_features(
    model: &SparseModel,
    dir: &Path,
) -> Result<BTreeMap<String, FeatureSet>, CliError> {
    read_features_for_images(dir, model.images.values().map(|im| im.name.as_str())).at("load")
}

fn name_ids(model: &SparseModel) -> BTreeMap<String, ImageId> {
    model
        .images
        .values()
        .map(|im| (im.name.clone(), im.image_id))
        .collect()
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p, "synth")?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scene = generate(&cfg).at("synth")?;
    let format = a.format.into();
    write_model(&scene.initial_model, &a.out.join("model"), format).at("write")?;
    write_model(&scene.gt_model, &a.out.join("gt"), format).at("write")?;
    let fdir = a.out.join("features");
    std::fs::create_dir_all(&fdir).at("write")?;
    for f in scene.features.values() {
        write_features(
            &posebench_core::model_io::features_path(&fdir, &f.image_name),
            f,
        )
        .at("write")?;
    }
    let json = serde_json::to_string_pretty(&cfg).at("write")?;
    std::fs::write(a.out.join("synth.json"), json + "\n").at("write")?;
    Ok(())
}

fn select_pairs_cmd(a: SelectPairsArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let poses = model.images.iter().map(|(&id, im)| (id, im.pose)).collect();
    let opts = PairingOptions {
        k_nearest: a.k_nearest,
        max_ray_angle_deg: a.max_angle_deg,
        relation: if a.mutual {
            NeighborRelation::Mutual
        } else {
            NeighborRelation::Union
        },
    };
    let pairs = select_pairs(&poses, &opts).at("pair_selection")?;
    let mut text = String::new();
    for (x, y) in &pairs.pairs {
        text.push_str(&format!(
            "{} {}\n",
            model.images[x].name, model.images[y].name
        ));
    }
    emit(a.out.as_deref(), &text, "write")
}

fn read_pair_list(path: &Path, model: &SparseModel) -> Result<Vec<(ImageId, ImageId)>, CliError> {
    let ids = name_ids(model);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("load", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let names: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| CliError::new("load", format!("{}:{}: {m}", path.display(), i + 1));
        let [x, y] = names[..] else {
            return Err(bad("expected two image names"));
        };
        let (Some(&a), Some(&b)) = (ids.get(x), ids.get(y)) else {
            return Err(bad("unknown image name"));
        };
        if a == b {
            return Err(bad("image paired with itself"));
        }
        out.push((a.min(b), a.max(b)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn views<'a>(
    model: &'a SparseModel,
    features: &'a BTreeMap<String, FeatureSet>,
) -> BTreeMap<ImageId, View<'a>> {
    model
        .images
        .iter()
        .map(|(&id, im)| {
            (
                id,
                View {
                    pose: &im.pose,
                    camera: &model.cameras[&im.camera_id].model,
                    keypoints: &features[&im.name].keypoints,
                },
            )
        })
        .collect()
}

fn match_cmd(a: MatchArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let features = load_features(&model, &a.features)?;
    let pairs = read_pair_list(&a.pairs, &model)?;
    let by_id: BTreeMap<ImageId, &FeatureSet> = model
        .images
        .iter()
        .map(|(&id, im)| (id, &features[&im.name]))
        .collect();
    let opts = MatchOptions {
        ratio: a.ratio,
        max_distance: a.max_distance,
    };
    let mut graph = match_pairs(&pairs, &by_id, &opts).at("matching")?;
    log::info!("{} matches over {} pairs", graph.num_matches(), pairs.len());
    if !a.no_verify {
        let (g, stats) =
            verify_graph(&graph, &views(&model, &features), a.verify_px).at("verification")?;
        log::info!(
            "{} of {} matches verified",
            stats.inlier_matches,
            stats.input_matches
        );
        graph = g;
    }
    let names = model
        .images
        .iter()
        .map(|(&id, im)| (id, im.name.clone()))
        .collect();
    write_match_dump(&a.out, &graph, &names).at("write")
}

fn triangulate(a: TriangulateArgs) -> Result<(), CliError> {
    let initial = load_model(&a.model)?;
    let features = load_features(&initial, &a.features)?;
    let mut model = attach_features(&initial, &features, usize::MAX).at("triangulation")?;
    let graph = read_match_dump(&a.matches, &name_ids(&model)).at("load")?;
    let th = TriangulationThresholds {
        max_reproj_px: a.max_reproj_px,
        min_tri_angle_deg: a.min_angle_deg,
        min_track_len: a.min_track_len,
    };
    let mut tracks = build_tracks(&graph);
    let stats = triangulate_tracks(&mut model, &mut tracks, &th).at("triangulation")?;
    eprintln!(
        "{} tracks: {} points accepted, {} rejected",
        tracks.len(),
        stats.accepted,
        stats.rejected.values().sum::<usize>()
    );
    write_model(&model, &a.out, a.format.into()).at("write")
}

fn refine(a: RefineArgs) -> Result<(), CliError> {
    let cfg: RefineConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => RefineConfig::default(),
    };
    cfg.validate().at("config")?;
    let initial = load_model(&a.model)?;
    let features = load_features(&initial, &a.features)?;
    std::fs::create_dir_all(&a.out).at("write")?;
    let write_timings = |t: &posebench_core::refine::StageTimings| -> Result<(), CliError> {
        let rows: Vec<(String, f64)> = t
            .zero_filled()
            .stages
            .iter()
            .map(|(s, secs)| (s.to_string(), *secs))
            .collect();
        let mut w = csv::Writer::from_path(a.out.join("timings.csv")).at("write")?;
        w.write_record(["stage", "seconds"]).at("write")?;
        for r in rows {
            w.serialize(r).at("write")?;
        }
        w.flush().at("write")
    };
    match run_refinement(&initial, &features, &cfg) {
        Ok(out) => {
            write_timings(&out.timings)?;
            let mut w = csv::Writer::from_path(a.out.join("trace.csv")).at("write")?;
            for t in &out.trace {
                w.serialize(t).at("write")?;
            }
            w.flush().at("write")?;
            write_model(&out.model, &a.out, a.format.into()).at("write")
        }
        Err(fail) => {
            write_timings(&fail.timings)?;
            Err(match fail.stage() {
                Some(stage) => CliError::new(
                    stage.as_str(),
                    match fail.error {
                        posebench_core::refine::RefineError::Stage { message, .. } => message,
                        other => other.to_string(),
                    },
                ),
                None => CliError::new("setup", fail.error),
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct ViewRow<'a> {
    view: &'a str,
    rot_err_deg: Option<f64>,
    pos_err: Option<f64>,
    registered: u8,
}

fn eval_poses(a: EvalPosesArgs) -> Result<(), CliError> {
    let est = load_model(&a.est)?;
    let gt = load_model(&a.gt)?;
    let (_, mut report) = evaluate(&est, &gt, !a.no_scale).at("eval-poses")?;
    if a.relative {
        let d = scene_diameter(&gt);
        if d > 0.0 {
            for v in &mut report.registered {
                v.position_error /= d;
            }
        }
    }
    let mut rows: Vec<ViewRow> = report
        .registered
        .iter()
        .map(|v| ViewRow {
            view: &v.name,
            rot_err_deg: Some(v.rotation_error_deg),
            pos_err: Some(v.position_error),
            registered: 1,
        })
        .collect();
    rows.extend(report.unregistered.iter().map(|n| ViewRow {
        view: n,
        rot_err_deg: None,
        pos_err: None,
        registered: 0,
    }));
    rows.sort_by(|x, y| x.view.cmp(y.view));
    emit(a.out.as_deref(), &report::to_csv_string(&rows), "write")?;
    let reports = [report];
    let acc = accuracy_at(&reports, a.rot_deg, a.pos).at("eval-poses")?;
    println!(
        "# accuracy {acc:.1}% with rotation < {} deg and position < {} ({} views)",
        a.rot_deg,
        a.pos,
        reports[0].total_views()
    );
    if !a.sweep.is_empty() {
        let curve = accuracy_curve(&reports, a.rot_deg, &a.sweep).at("eval-poses")?;
        let rows: Vec<AccuracyRow> = curve
            .into_iter()
            .map(|(pos_thresh, percentage)| AccuracyRow {
                rot_thresh_deg: a.rot_deg,
                pos_thresh,
                percentage,
            })
            .collect();
        emit(a.curve.as_deref(), &report::to_csv_string(&rows), "write")?;
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

fn stem(name: &str) -> &str {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

fn list_images(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::new("load", format!("{}: {e}", dir.display())))?
    {
        let p = entry.at("load")?.path();
        if p.is_file() && is_image(&p) {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    scene: &'a str,
    psnr: f64,
    ssim: f64,
    lpips: Option<f64>,
}

fn summary_csv(rows: &[(String, MetricSummary)]) -> String {
    let rows: Vec<SummaryRow> = rows
        .iter()
        .map(|(s, m)| SummaryRow {
            scene: s,
            psnr: m.psnr,
            ssim: m.ssim,
            lpips: m.lpips,
        })
        .collect();
    report::to_csv_string(&rows)
}

fn eval_nvs(a: EvalNvsArgs) -> Result<(), CliError> {
    let gt_names = list_images(&a.gt)?;
    if gt_names.is_empty() {
        return Err(CliError::new(
            "load",
            format!("{}: no PNG or PPM images", a.gt.display()),
        ));
    }
    let test_views: Vec<String> = match &a.split {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::new("load", format!("{}: {e}", p.display())))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    gt_names
                        .iter()
                        .find(|g| *g == l || stem(g) == l)
                        .cloned()
                        .ok_or_else(|| {
                            CliError::new(
                                "load",
                                format!("split view '{l}' has no ground-truth image"),
                            )
                        })
                })
                .collect::<Result<_, _>>()?
        }
        None => default_test_split(&gt_names),
    };
    let lpips: BTreeMap<String, f64> = match &a.lpips {
        Some(p) => {
            #[derive(serde::Deserialize)]
            struct Row {
                view: String,
                lpips: f64,
            }
            report::read_rows::<Row>(p, &["view", "lpips"])
                .at("load")?
                .into_iter()
                .map(|r| (stem(&r.view).to_string(), r.lpips))
                .collect()
        }
        None => BTreeMap::new(),
    };
    let renders: BTreeMap<String, PathBuf> = list_images(&a.renders)?
        .into_iter()
        .map(|n| (stem(&n).to_string(), a.renders.join(&n)))
        .collect();

    let mut set = SceneMetricSet {
        scene: a.scene.clone(),
        expected_test_views: test_views.clone(),
        ..Default::default()
    };
    for view in &test_views {
        let Some(render_path) = renders.get(stem(view)) else {
            log::warn!("{view}: no render, counted with the penalty values");
            continue;
        };
        let gt = ImageBuffer::load(&a.gt.join(view)).at("eval-nvs")?;
        let render = match ImageBuffer::load(render_path) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{view}: unreadable render ({e}), counted with the penalty values");
                continue;
            }
        };
        set.views.insert(
            view.clone(),
            ViewMetrics {
                psnr: Some(psnr(&render, &gt).at("eval-nvs")?),
                ssim: Some(ssim(&render, &gt).at("eval-nvs")?),
                lpips: lpips.get(stem(view)).copied(),
            },
        );
    }
    let summary = aggregate_scene_with(&set, a.psnr_cap).at("eval-nvs")?;
    let mut table = MetricTable::default();
    table.scenes.insert(a.scene.clone(), set.to_records());
    match &a.out {
        Some(p) => write_metric_table(p, &table).at("write")?,
        None => {
            let rows: Vec<_> = set
                .to_records()
                .into_iter()
                .map(|r| (r.scene, r.view, r.metric.to_string(), r.value))
                .collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["scene", "view", "metric", "value"])
                .at("write")?;
            for r in rows {
                w.serialize(r).at("write")?;
            }
            println!(
                "{}",
                String::from_utf8_lossy(&w.into_inner().at("write")?)
            );
        }
    }
    print!("{}", summary_csv(&[(a.scene, summary)]));
    Ok(())
}

fn aggregate(a: AggregateArgs) -> Result<(), CliError> {
    if !a.runs.is_empty() {
        let runs = a
            .runs
            .iter()
            .map(|d| BenchRun::read(d))
            .collect::<Result<Vec<_>, _>>()?;
        let table = report::emit_tradeoff_table(&runs, &a.metric).at("aggregate")?;
        return emit(a.out.as_deref(), &table, "write");
    }
    let path = a.metrics.as_deref().expect("clap requires metrics or runs");
    let header: Vec<String> = csv::Reader::from_path(path)
        .and_then(|mut r| r.headers().map(|h| h.iter().map(str::to_string).collect()))
        .map_err(|e| CliError::new("load", format!("{}: {e}", path.display())))?;
    let per_scene: Vec<(String, MetricSummary)> = if header == report::METRICS_HEADER {
        report::read_metrics(path)
            .at("load")?
            .into_iter()
            .map(|(scene, m)| {
                let get = |k: &str| {
                    m.get(k).copied().ok_or_else(|| {
                        CliError::new("aggregate", format!("scene '{scene}' has no {k}"))
                    })
                };
                let summary = MetricSummary {
                    psnr: get("psnr")?,
                    ssim: get("ssim")?,
                    lpips: m.get("lpips").copied(),
                };
                Ok((scene, summary))
            })
            .collect::<Result<_, CliError>>()?
    } else {
        let table = read_metric_table(path).at("load")?;
        let expected: BTreeMap<String, Vec<String>> = match &a.expected {
            Some(p) => read_json(p, "load")?,
            None => BTreeMap::new(),
        };
        SceneMetricSet::from_table(&table, &expected)
            .iter()
            .map(|s| {
                Ok((
                    s.scene.clone(),
                    aggregate_scene_with(s, a.psnr_cap).at("aggregate")?,
                ))
            })
            .collect::<Result<_, CliError>>()?
    };
    let summaries: Vec<MetricSummary> = per_scene.iter().map(|(_, m)| *m).collect();
    let mean = aggregate_summaries(&summaries).at("aggregate")?;
    let mut rows = per_scene;
    rows.push(("mean".to_string(), mean));
    emit(a.out.as_deref(), &summary_csv(&rows), "write")
}

fn bench(a: BenchArgs, thread_cap: Option<usize>) -> Result<(), CliError> {
    let mut cfg = BenchConfig::load(&a.scenes)?;
    if let Some(l) = a.label {
        cfg.label = l;
    }
    cfg.validate()?;
    if a.jobs == 0 {
        return Err(CliError::new("config", "--jobs must be positive"));
    }
    if a.dry_run {
        cfg.check_inputs()?;
        eprintln!("{} scenes ok", cfg.scenes.len());
        return Ok(());
    }
    let jobs = thread_cap.map_or(a.jobs, |c| a.jobs.min(c));
    let models = a.save_models.then(|| a.out.join("models"));
    let run = crate::bench::run_bench(&cfg, jobs, models.as_deref())?;
    run.write(&a.out)?;
    let failed: Vec<String> = run
        .scenes
        .iter()
        .filter_map(|s| {
            s.failed_stage
                .as_ref()
                .map(|st| format!("{} ({st})", s.name))
        })
        .collect();
    if !failed.is_empty() {
        eprintln!("failed scenes: {}", failed.join(", "));
    }
    Ok(())
}
