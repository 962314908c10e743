//! Command-line front end for the BEV detector.

pub mod config;
pub mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use bev_erpn_core::bev::{encode_with, DensityNorm, GridSpec, RgbMap};
use bev_erpn_core::class::ObjectClass;
use bev_erpn_core::erpn::{
    anchors_from_stats, to_3d, Detection, Detection3d, ErpnHead, RawPrediction, BOX_FEATURES, T_CLASS, T_O,
};
use bev_erpn_core::eval::{evaluate, Difficulty, EvalConfig, FrameData, Interpolation};
use bev_erpn_core::geometry::{angle_diff, nms, rotated_iou, OrientedBox};
use bev_erpn_core::kitti::{self, Dataset, ImageSize, KittiLabel};
use bev_erpn_core::loss::{assign, fit_toy, GroundTruthBox, HyperParams, LossBreakdown};
use bev_erpn_core::network::{build_complex_yolo, LayerSpec, Network, Shape, Tensor3, Weights};
use bev_erpn_core::synth;
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use config::{ConfigFile, Overrides, RunConfig, DATA_ENV};
use render::Canvas;

#[derive(Debug, Parser)]
#[command(
    name = "bev-erpn",
    version,
    about = "Oriented 3D box detection on BEV-encoded Lidar scans"
)]
pub struct Cli {
    /// Flat `key = value` file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// KITTI object root (velodyne/, label_2/, calib/). Falls back to BEV_ERPN_DATA.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Frames processed in parallel.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Detection score threshold.
    #[arg(long, global = true)]
    pub conf: Option<f64>,
    #[arg(long = "nms-iou", global = true)]
    pub nms_iou: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize Velodyne scans into BEV maps.
    Encode(EncodeArgs),
    /// Draw a BEV map with boxes as a PPM image.
    Render(RenderArgs),
    /// Run the detector and write KITTI result files.
    Detect(DetectArgs),
    /// Fit a raw prediction tensor to a synthetic scene; prints the loss curve as CSV.
    TrainToy(TrainToyArgs),
    /// Average precision of result files against the dataset labels.
    Eval(EvalArgs),
    /// Time the forward pass.
    Bench(BenchArgs),
    /// Per-class mean box statistics of the dataset labels.
    Stats,
    /// Write synthetic frames in the KITTI layout.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Norm {
    #[default]
    Printed,
    Log64,
}

impl From<Norm> for DensityNorm {
    fn from(n: Norm) -> Self {
        match n {
            Norm::Printed => DensityNorm::Printed,
            Norm::Log64 => DensityNorm::Log64,
        }
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Frame ids; every frame of the dataset when omitted.
    pub frames: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub norm: Norm,
    /// Also write `<id>.ppm` next to each map.
    #[arg(long)]
    pub images: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Map written by `encode`.
    #[arg(long, required_unless_present = "frame", conflicts_with = "frame")]
    pub map: Option<PathBuf>,
    /// Dataset frame: its scan and ground-truth boxes.
    #[arg(long)]
    pub frame: Option<String>,
    /// KITTI label or result files drawn on top.
    #[arg(long)]
    pub boxes: Vec<PathBuf>,
    /// Calibration for `--boxes`; defaults to the frame's.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub norm: Norm,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Frame ids; every frame of the dataset when omitted.
    pub frames: Vec<String>,
    #[arg(long, required_unless_present = "random_weights")]
    pub weights: Option<PathBuf>,
    /// Use random weights drawn from --seed.
    #[arg(long, conflicts_with = "weights")]
    pub random_weights: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub norm: Norm,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 20.3, allow_hyphen_values = true)]
    pub x: f64,
    #[arg(long, default_value_t = 1.1, allow_hyphen_values = true)]
    pub y: f64,
    /// Heading of the car, radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub phi: f64,
    /// Fit a scene without objects.
    #[arg(long)]
    pub empty: bool,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_class(s: &str) -> Result<ObjectClass, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Frame ids; every labelled frame when omitted.
    pub frames: Vec<String>,
    /// Directory of `<id>.txt` result files.
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_class, default_value = "Car,Pedestrian,Cyclist")]
    pub classes: Vec<ObjectClass>,
    /// Recall points of the interpolated AP.
    #[arg(long, default_value_t = 11, value_parser = PossibleValuesParser::new(["11", "40"]).map(|s| s.parse::<u32>().unwrap()))]
    pub points: u32,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Weight file; random weights from --seed when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Print the per-layer table.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    /// Also write weights that fire on tall point clusters.
    #[arg(long)]
    pub beacon_weights: Option<PathBuf>,
}

/// Frames that failed, with the reason; empty on full success.
#[derive(Debug, Default)]
pub struct Outcome {
    pub failed: Vec<(String, String)>,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let flags = Overrides {
        data: cli.data.clone(),
        conf: cli.conf,
        nms_iou: cli.nms_iou,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let env_data = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = RunConfig::resolve(&flags, &file, env_data)?;
    match &cli.command {
        Command::Encode(a) => cmd_encode(&cfg, a),
        Command::Render(a) => cmd_render(&cfg, a).map(|_| Outcome::default()),
        Command::Detect(a) => cmd_detect(&cfg, a),
        Command::TrainToy(a) => cmd_train_toy(&cfg, a).map(|_| Outcome::default()),
        Command::Eval(a) => cmd_eval(&cfg, a).map(|_| Outcome::default()),
        Command::Bench(a) => cmd_bench(&cfg, a).map(|_| Outcome::default()),
        Command::Stats => cmd_stats(&cfg).map(|_| Outcome::default()),
        Command::Synth(a) => cmd_synth(&cfg, a).map(|_| Outcome::default()),
    }
}

fn frame_ids(ds: &Dataset, given: &[String]) -> Result<Vec<String>> {
    if given.is_empty() {
        let ids = ds.frame_ids()?;
        if ids.is_empty() {
            bail!("no frames under {}", ds.root.join("velodyne").display());
        }
        Ok(ids)
    } else {
        Ok(given.to_vec())
    }
}

/// Runs `f` on every frame with `jobs` threads, keeping the input order, and
/// logs each failure.
fn for_frames<T, F>(jobs: usize, ids: &[String], f: F) -> Result<(Vec<(String, T)>, Outcome)>
where
    T: Send,
    F: Fn(&str) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let results: Vec<(String, Result<T>)> = pool.install(|| ids.par_iter().map(|id| (id.clone(), f(id))).collect());
    let mut ok = Vec::new();
    let mut outcome = Outcome::default();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => {
                log::error!("frame {id}: {e:#}");
                outcome.failed.push((id, format!("{e:#}")));
            }
        }
    }
    Ok((ok, outcome))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn encode_frame(ds: &Dataset, id: &str, grid: &GridSpec, norm: Norm) -> Result<RgbMap> {
    let cloud = kitti::read_velodyne(&ds.velodyne_path(id))?;
    Ok(encode_with(&cloud, grid, norm.into()))
}

pub fn cmd_encode(cfg: &RunConfig, a: &EncodeArgs) -> Result<Outcome> {
    let ds = Dataset::new(cfg.data_root()?);
    let ids = frame_ids(&ds, &a.frames)?;
    create_dir(&a.out)?;
    let (done, outcome) = for_frames(cfg.jobs, &ids, |id| {
        let map = encode_frame(&ds, id, &cfg.grid, a.norm)?;
        let path = a.out.join(format!("{id}.bev"));
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        map.write_to(&mut w)?;
        w.flush()?;
        if a.images {
            write_file(&a.out.join(format!("{id}.ppm")), &Canvas::from_map(&map).to_ppm())?;
        }
        Ok(())
    })?;
    log::info!("encoded {} of {} frames", done.len(), ids.len());
    Ok(outcome)
}

fn labelled_boxes(labels: &[KittiLabel], calib: &kitti::Calibration) -> Result<Vec<GroundTruthBox>> {
    labels
        .iter()
        .filter(|l| !l.is_dont_care())
        .map(|l| kitti::label_to_bev(l, calib).map_err(Into::into))
        .collect()
}

pub fn cmd_render(cfg: &RunConfig, a: &RenderArgs) -> Result<()> {
    let mut boxes = Vec::new();
    let (map, frame_calib) = match (&a.map, &a.frame) {
        (Some(p), _) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            (
                RgbMap::read_from(BufReader::new(f), cfg.grid).with_context(|| format!("reading {}", p.display()))?,
                None,
            )
        }
        (None, Some(id)) => {
            let ds = Dataset::new(cfg.data_root()?);
            let calib = kitti::read_calibration(&ds.calib_path(id))?;
            let label_path = ds.label_path(id);
            if label_path.exists() {
                boxes.extend(labelled_boxes(&kitti::parse_labels(&label_path)?, &calib)?);
            }
            (encode_frame(&ds, id, &cfg.grid, a.norm)?, Some(calib))
        }
        (None, None) => bail!("pass --map or --frame"),
    };
    if !a.boxes.is_empty() {
        let calib = match (&a.calib, frame_calib) {
            (Some(p), _) => kitti::read_calibration(p)?,
            (None, Some(c)) => c,
            (None, None) => bail!("--boxes needs --calib or --frame"),
        };
        for p in &a.boxes {
            boxes.extend(
                labelled_boxes(&kitti::parse_labels(p)?, &calib).with_context(|| format!("in {}", p.display()))?,
            );
        }
    }
    let mut canvas = Canvas::from_map(&map);
    for b in &boxes {
        render::draw_box(&mut canvas, &b.bbox, b.class, &cfg.grid);
    }
    write_file(&a.out, &canvas.to_ppm())
}

fn input_shape(grid: &GridSpec) -> Shape {
    Shape::new(grid.n_rows, grid.n_cols, 3)
}

/// Loads weights from `path`, or draws random ones from `seed`.
pub fn load_network(specs: &[LayerSpec], input: Shape, path: Option<&Path>, seed: u64) -> Result<Network> {
    let weights = match path {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Weights::read(BufReader::new(f), specs, input).with_context(|| format!("loading {}", p.display()))?
        }
        None => Weights::random(specs, input, seed)?,
    };
    Ok(Network::new(specs, &weights, input)?)
}

/// The per-frame inference path: forward, decode, NMS, lift to 3D and keep
/// what projects into the image.
pub fn detect_map(
    net: &Network,
    head: &ErpnHead,
    map: &RgbMap,
    cfg: &RunConfig,
    calib: &kitti::Calibration,
) -> Result<Vec<Detection3d>> {
    let out = net.forward(&Tensor3::from_rgb_map(map))?;
    let dets = head.decode_all(&RawPrediction::from_tensor(&out)?, cfg.conf)?;
    let kept = nms(&dets, cfg.nms_iou);
    let mut lifted = Vec::with_capacity(kept.len());
    for d in &kept {
        let d3 = to_3d(d, &cfg.stats)?;
        if kitti::in_image_plane(&kitti::detection_to_box(&d3), calib, ImageSize::default()) {
            lifted.push(d3);
        }
    }
    Ok(lifted)
}

pub fn cmd_detect(cfg: &RunConfig, a: &DetectArgs) -> Result<Outcome> {
    let ds = Dataset::new(cfg.data_root()?);
    let ids = frame_ids(&ds, &a.frames)?;
    let specs = build_complex_yolo();
    let input = input_shape(&cfg.grid);
    let net = load_network(&specs, input, a.weights.as_deref(), cfg.seed)?;
    let head = ErpnHead::new(cfg.grid, anchors_from_stats(&cfg.stats, &cfg.grid)?)?;
    if net.output_shape() != head.output_shape() {
        bail!(
            "network output {} does not match the head {}",
            net.output_shape(),
            head.output_shape()
        );
    }
    create_dir(&a.out)?;
    let (done, outcome) = for_frames(cfg.jobs, &ids, |id| {
        let calib = kitti::read_calibration(&ds.calib_path(id))?;
        let map = encode_frame(&ds, id, &cfg.grid, a.norm)?;
        let dets = detect_map(&net, &head, &map, cfg, &calib)?;
        kitti::write_detections(&a.out.join(format!("{id}.txt")), &dets, &calib, ImageSize::default())?;
        Ok(dets.len())
    })?;
    let total: usize = done.iter().map(|(_, n)| n).sum();
    log::info!("{total} detections in {} frames", done.len());
    Ok(outcome)
}

/// Single car of mean Car size, or nothing.
pub fn toy_scene(a: &TrainToyArgs, cfg: &RunConfig) -> Result<Vec<GroundTruthBox>> {
    if a.empty {
        return Ok(Vec::new());
    }
    let s = cfg.stats.get(ObjectClass::Car)?;
    Ok(vec![GroundTruthBox::new(
        OrientedBox::new(a.x, a.y, s.width, s.length, a.phi),
        ObjectClass::Car,
    )])
}

pub fn loss_csv(curve: &[LossBreakdown]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&l.csv_row(i));
        s.push('\n');
    }
    s
}

pub fn cmd_train_toy(cfg: &RunConfig, a: &TrainToyArgs) -> Result<()> {
    let head = ErpnHead::new(cfg.grid, anchors_from_stats(&cfg.stats, &cfg.grid)?)?;
    let scene = toy_scene(a, cfg)?;
    let fit = fit_toy(&head, &scene, &HyperParams::default(), a.steps, cfg.seed)?;
    let csv = loss_csv(&fit.curve);
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    for t in assign(&head, &fit.pred, &scene)? {
        let gt = scene[t.gt].bbox;
        let raw = fit.pred.get_box(t.row, t.col, t.anchor);
        let b = head.decode_box(&raw, t.col, t.row, &head.anchors[t.anchor]);
        eprintln!(
            "final: iou {:.4}, heading error {:.2e} rad, loss {:.6}",
            rotated_iou(&b, &gt),
            angle_diff(b.phi, gt.phi).abs(),
            fit.curve.last().map_or(f64::NAN, |l| l.total)
        );
    }
    Ok(())
}

/// Result lines of one file as BEV detections.
pub fn read_result_file(path: &Path, calib: &kitti::Calibration) -> Result<Vec<Detection3d>> {
    let mut out = Vec::new();
    for l in kitti::parse_labels(path)?.iter().filter(|l| !l.is_dont_care()) {
        let b = kitti::label_to_velo(l, calib)?;
        let score = l.score.unwrap_or(1.0);
        let mut class_probs = [0.0; bev_erpn_core::NUM_CLASSES];
        class_probs[b.bev.class.index()] = 1.0;
        out.push(Detection3d {
            det: Detection {
                bbox: b.bev.bbox,
                p0: score,
                class_probs,
                class: b.bev.class,
                score,
            },
            z_center: b.z_center,
            height: b.height,
        });
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let ds = Dataset::new(cfg.data_root()?);
    let ids = if a.frames.is_empty() {
        ds.ids_in("label_2", "txt")?
    } else {
        a.frames.clone()
    };
    if ids.is_empty() {
        bail!("no labelled frames under {}", ds.root.display());
    }
    let mut frames = Vec::with_capacity(ids.len());
    let mut dets = BTreeMap::new();
    for id in &ids {
        let calib = kitti::read_calibration(&ds.calib_path(id)).with_context(|| format!("frame {id}"))?;
        let labels = kitti::parse_labels(&ds.label_path(id)).with_context(|| format!("frame {id}"))?;
        let path = a.dets.join(format!("{id}.txt"));
        if path.exists() {
            dets.insert(
                id.clone(),
                read_result_file(&path, &calib).with_context(|| format!("frame {id}"))?,
            );
        }
        frames.push(FrameData {
            id: id.clone(),
            labels,
            calib,
        });
    }
    let eval_cfg = EvalConfig {
        roi: cfg.grid,
        interpolation: if a.points == 40 {
            Interpolation::FortyPoint
        } else {
            Interpolation::ElevenPoint
        },
        ..EvalConfig::default()
    };
    let table = evaluate(&frames, &dets, &a.classes, &Difficulty::ALL, &eval_cfg)?;
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        write_file(p, table.to_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub totals: Vec<Duration>,
    /// Mean duration per layer, with its label.
    pub layers: Vec<(String, Duration)>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

impl BenchReport {
    pub fn mean(&self) -> f64 {
        self.totals.iter().map(|d| secs(*d)).sum::<f64>() / self.totals.len() as f64
    }

    /// Nearest-rank percentile of the run totals.
    pub fn percentile(&self, p: f64) -> f64 {
        let mut v: Vec<f64> = self.totals.iter().map(|d| secs(*d)).collect();
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    pub fn fps(&self) -> f64 {
        1.0 / self.mean()
    }

    /// Coefficient of variation of the run totals.
    pub fn cv(&self) -> f64 {
        let m = self.mean();
        let var = self.totals.iter().map(|d| (secs(*d) - m).powi(2)).sum::<f64>() / self.totals.len() as f64;
        var.sqrt() / m
    }

    /// Sum of the mean layer times over the mean total.
    pub fn layer_ratio(&self) -> f64 {
        self.layers.iter().map(|(_, d)| secs(*d)).sum::<f64>() / self.mean()
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs        {}", self.totals.len())?;
        writeln!(f, "mean        {:.2} ms", self.mean() * 1e3)?;
        writeln!(f, "p50         {:.2} ms", self.percentile(50.0) * 1e3)?;
        writeln!(f, "p99         {:.2} ms", self.percentile(99.0) * 1e3)?;
        writeln!(f, "fps         {:.3}", self.fps())?;
        writeln!(f, "cv          {:.2}%", self.cv() * 100.0)?;
        writeln!(f, "layer sum   {:.2}% of total", self.layer_ratio() * 100.0)
    }
}

/// `warmup` untimed passes, then `runs` timed ones.
pub fn bench_network(net: &Network, input: &Tensor3, warmup: usize, runs: usize) -> Result<BenchReport> {
    if runs == 0 {
        bail!("need at least one timed run");
    }
    for _ in 0..warmup {
        net.forward(input)?;
    }
    let mut totals = Vec::with_capacity(runs);
    let mut sums = vec![Duration::ZERO; net.specs().len()];
    for _ in 0..runs {
        let start = Instant::now();
        let (_, per_layer) = net.forward_timed(input)?;
        totals.push(start.elapsed());
        for (s, d) in sums.iter_mut().zip(per_layer) {
            *s += d;
        }
    }
    let layers = net
        .specs()
        .iter()
        .zip(sums)
        .map(|(spec, d)| (spec.label(), d / runs as u32))
        .collect();
    Ok(BenchReport { totals, layers })
}

/// Encoded synthetic frame used as the benchmark input.
pub fn bench_input(grid: &GridSpec, seed: u64) -> Tensor3 {
    let frame = synth::synth_frame(&mut ChaCha8Rng::seed_from_u64(seed), 6);
    Tensor3::from_rgb_map(&encode_with(&frame.cloud, grid, DensityNorm::default()))
}

pub fn cmd_bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let specs = build_complex_yolo();
    let input = input_shape(&cfg.grid);
    let net = load_network(&specs, input, a.weights.as_deref(), cfg.seed)?;
    let report = bench_network(&net, &bench_input(&cfg.grid, cfg.seed), a.warmup, a.runs)?;
    if a.layers {
        for (i, ((label, d), shape)) in report.layers.iter().zip(net.shapes()).enumerate() {
            println!("{i:>3} {label:<18} {shape:<14} {:>9.3} ms", secs(*d) * 1e3);
        }
    }
    print!("{report}");
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::new(cfg.data_root()?);
    let ids = ds.ids_in("label_2", "txt")?;
    let mut samples = Vec::new();
    for id in &ids {
        let calib = kitti::read_calibration(&ds.calib_path(id)).with_context(|| format!("frame {id}"))?;
        for l in kitti::parse_labels(&ds.label_path(id))?
            .iter()
            .filter(|l| !l.is_dont_care())
        {
            let b = kitti::label_to_velo(l, &calib).with_context(|| format!("frame {id}"))?;
            let [height, width, length] = l.dims;
            samples.push((
                b.bev.class,
                bev_erpn_core::erpn::ClassStat {
                    height,
                    width,
                    length,
                    z_center: b.z_center,
                },
            ));
        }
    }
    println!(
        "# Per-class mean box dimensions (meters) over {} labels in {} frames.",
        samples.len(),
        ids.len()
    );
    print!("{}", bev_erpn_core::erpn::ClassStats::from_samples(samples));
    Ok(())
}

/// Raw regressors of the beacon head: a car on anchor 0 at its prior, with
/// objectness logit `-4` before the signal term.
pub fn beacon_raw(head: &ErpnHead) -> [f64; BOX_FEATURES] {
    let neutral = RawPrediction::neutral(1, 1, &head.anchors);
    let mut raw = [0.0; BOX_FEATURES];
    raw.copy_from_slice(neutral.box_slice(0, 0, 0));
    raw[T_O] = -4.0;
    raw[T_CLASS + ObjectClass::Car.index()] = 6.0;
    raw
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let ds = Dataset::new(&a.out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..a.frames {
        let frame = synth::synth_frame(&mut rng, a.objects);
        synth::write_frame(&ds, &format!("{i:06}"), &frame)?;
    }
    if let Some(p) = &a.beacon_weights {
        let specs = build_complex_yolo();
        let head = ErpnHead::new(cfg.grid, anchors_from_stats(&cfg.stats, &cfg.grid)?)?;
        let w = synth::beacon_weights(&specs, input_shape(&cfg.grid), 0, &beacon_raw(&head), 0.3, 40.0)?;
        let mut out = BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
        w.write(&mut out)?;
        out.flush()?;
    }
    log::info!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}
