use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use voxelox::config::{Backend, Verbosity};
use voxelox::evaluate::{evaluate_map, GroundTruthMap};
use voxelox::frame_store::{read_embeddings, FrameBundle, SequenceReader};
use voxelox::query::{export_map, live_codebook, render_mask, retrieve, ExportFormat};
use voxelox::simulate::{generate_scene, write_simulation, SyntheticScene};
use voxelox::{integrate_frame, load_snapshot, save_snapshot, Codebook, Error, RunConfig, VoxelMap};

#[derive(Parser, Debug)]
#[command(name = "voxelox", version, about = "Probabilistic instance-level voxel mapping")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    resolution: Option<f64>,
    #[arg(long, global = true, value_enum)]
    verbosity: Option<VerbosityArg>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and write a noisy frame sequence with ground truth.
    Sim(SimArgs),
    /// Integrate a sequence into a map and codebook snapshot.
    Build(BuildArgs),
    /// Score a snapshot against the ground truth of its sequence.
    Eval(EvalArgs),
    /// Rank instances by embedding similarity.
    Query(QueryArgs),
    /// Render the instance mask seen from one frame of a sequence.
    Render(RenderArgs),
    /// Write the map as a point list or labeled voxel file.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Output sequence directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    p_drop: Option<f64>,
    #[arg(long)]
    p_split: Option<f64>,
    #[arg(long)]
    p_merge: Option<f64>,
    #[arg(long)]
    boundary_jitter: Option<u32>,
    #[arg(long)]
    embedding_noise: Option<f64>,
    #[arg(long)]
    depth_noise: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AssociationArgs {
    /// Association backend.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    geo_weight: Option<f64>,
    #[arg(long)]
    fea_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// Output snapshot directory.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[command(flatten)]
    association: AssociationArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Sequence holding the scene description.
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Query with the stored embedding of this instance.
    #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
    instance: Option<u32>,
    /// Embedding file; row `--row` is the query.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Include instances that no longer own any voxel.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// Frame index within the sequence.
    #[arg(long)]
    frame: usize,
    /// Output raster file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Pointlist)]
    format: FormatArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerbosityArg {
    Quiet,
    Normal,
    Verbose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineArg {
    Iou,
    Probabilistic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Pointlist,
    LabeledVoxels,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::Io { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.resolution {
        cfg.resolution = r;
    }
    if let Some(v) = cli.verbosity {
        cfg.verbosity = match v {
            VerbosityArg::Quiet => Verbosity::Quiet,
            VerbosityArg::Normal => Verbosity::Normal,
            VerbosityArg::Verbose => Verbosity::Verbose,
        };
    }
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
    }
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match cli.command {
        None => Err(CliError::Usage("no subcommand given (see --help)".into())),
        Some(Command::Sim(a)) => cmd_sim(&cfg, a),
        Some(Command::Build(a)) => cmd_build(&cfg, a),
        Some(Command::Eval(a)) => cmd_eval(&cfg, a),
        Some(Command::Query(a)) => cmd_query(&cfg, a),
        Some(Command::Render(a)) => cmd_render(&cfg, a),
        Some(Command::Export(a)) => cmd_export(&cfg, a),
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("VOXELOX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("VOXELOX_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Sim(a) => {
            let (s, n) = (&mut cfg.scene, &mut cfg.noise);
            set(&mut s.objects, a.objects);
            set(&mut s.frames, a.frames);
            set(&mut n.p_drop, a.p_drop);
            set(&mut n.p_split, a.p_split);
            set(&mut n.p_merge, a.p_merge);
            set(&mut n.boundary_jitter, a.boundary_jitter);
            set(&mut n.embedding_noise_sigma, a.embedding_noise);
            set(&mut n.depth_noise_sigma, a.depth_noise);
            set(&mut n.seed, a.noise_seed);
            set(&mut cfg.paths.sequence, a.out.clone().map(Some));
        }
        Command::Build(a) => {
            let s = &mut cfg.association;
            let b = &a.association;
            if let Some(bl) = b.baseline {
                s.backend = match bl {
                    BaselineArg::Iou => Backend::Iou,
                    BaselineArg::Probabilistic => Backend::Probabilistic,
                };
            }
            set(&mut s.similarity_threshold, b.threshold);
            set(&mut s.geo_weight, b.geo_weight);
            set(&mut s.fea_weight, b.fea_weight);
            set(&mut cfg.paths.sequence, a.sequence.clone().map(Some));
            set(&mut cfg.paths.snapshot, a.snapshot.clone().map(Some));
        }
        Command::Eval(a) => {
            set(&mut cfg.paths.snapshot, a.snapshot.clone().map(Some));
            set(&mut cfg.paths.sequence, a.sequence.clone().map(Some));
            set(&mut cfg.paths.report, a.report.clone().map(Some));
        }
        Command::Query(a) => set(&mut cfg.paths.snapshot, a.snapshot.clone().map(Some)),
        Command::Render(a) => {
            set(&mut cfg.paths.snapshot, a.snapshot.clone().map(Some));
            set(&mut cfg.paths.sequence, a.sequence.clone().map(Some));
        }
        Command::Export(a) => set(&mut cfg.paths.snapshot, a.snapshot.clone().map(Some)),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn cmd_sim(cfg: &RunConfig, _: SimArgs) -> CliResult<()> {
    let out = required(&cfg.paths.sequence, "sequence")?;
    let scene = generate_scene(cfg.seed, &cfg.scene)?;
    let manifest = write_simulation(out, &scene, &cfg.noise, cfg.resolution)?;
    let reader = SequenceReader::open(out)?;
    let masks: usize = reader
        .frames()
        .map(|f| f.map(|f| f.masks.len()))
        .sum::<voxelox::Result<_>>()?;
    if cfg.verbosity != Verbosity::Quiet {
        eprintln!("{} frames, {masks} masks", manifest.frame_count);
    }
    println!("{}", out.join(voxelox::frame_store::MANIFEST_FILE).display());
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn cmd_build(cfg: &RunConfig, _: BuildArgs) -> CliResult<()> {
    let seq = required(&cfg.paths.sequence, "sequence")?;
    let out = required(&cfg.paths.snapshot, "snapshot")?;
    let reader = SequenceReader::open(seq)?;
    let associator = cfg.associator();
    let mut map = VoxelMap::new(cfg.resolution)?;
    let mut codebook = Codebook::new(reader.manifest().embedding_dim);
    let progress = cfg.verbosity != Verbosity::Quiet;
    let mut latencies = Vec::with_capacity(reader.len());

    // Decode ahead on a second thread, integrate in order on this one.
    std::thread::scope(|s| -> CliResult<()> {
        let (tx, rx) = sync_channel::<voxelox::Result<FrameBundle>>(4);
        let reader = &reader;
        s.spawn(move || {
            for f in reader.frames() {
                if tx.send(f).is_err() {
                    break;
                }
            }
        });
        for frame in rx {
            let frame = frame?;
            let start = Instant::now();
            let (report, result) = integrate_frame(&mut map, &mut codebook, &frame, &associator)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            latencies.push(ms);
            if progress {
                let mut line = serde_json::to_value(&report).expect("report serializes");
                line["latency_ms"] = json!(ms);
                println!("{line}");
            }
            if cfg.verbosity == Verbosity::Verbose {
                for r in result.log_records() {
                    eprintln!("{}", serde_json::to_string(&r).expect("record serializes"));
                }
            }
        }
        Ok(())
    })?;

    save_snapshot(out, &map, &codebook)?;
    latencies.sort_by(f64::total_cmp);
    if progress {
        println!(
            "{}",
            json!({
                "summary": {
                    "frames": latencies.len(),
                    "instances": codebook.len(),
                    "live_instances": map.instance_ids().filter(|&i| map.extent(i) > 0).count(),
                    "occupied_voxels": map.len(),
                    "latency_p50_ms": percentile(&latencies, 0.5),
                    "latency_p95_ms": percentile(&latencies, 0.95),
                    "snapshot": out,
                }
            })
        );
    }
    Ok(())
}

fn load_scene(seq: &Path) -> CliResult<SyntheticScene> {
    let reader = SequenceReader::open(seq)?;
    let refs = reader.manifest().ground_truth.as_ref().ok_or_else(|| {
        Error::Inconsistent(format!("sequence {} has no ground truth", seq.display()))
    })?;
    Ok(SyntheticScene::load(seq.join(&refs.scene))?)
}

fn cmd_eval(cfg: &RunConfig, _: EvalArgs) -> CliResult<()> {
    let snap = required(&cfg.paths.snapshot, "snapshot")?;
    let seq = required(&cfg.paths.sequence, "sequence")?;
    let scene = load_scene(seq)?;
    let (map, codebook) = load_snapshot(snap)?;
    let gt = GroundTruthMap::from_rendered_surfaces(&scene, cfg.resolution)?;
    let report = evaluate_map(&map, &codebook, &scene, &gt, &cfg.eval)?;
    if cfg.verbosity != Verbosity::Quiet {
        print!("{}", report.table());
    }
    if let Some(p) = &cfg.paths.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_query(cfg: &RunConfig, a: QueryArgs) -> CliResult<()> {
    let snap = required(&cfg.paths.snapshot, "snapshot")?;
    let (map, codebook) = load_snapshot(snap)?;
    let query: Vec<f64> = match (a.instance, &a.embedding) {
        (Some(id), _) => codebook
            .get(id)
            .ok_or(Error::UnknownInstance(id))?
            .embedding
            .clone(),
        (None, Some(p)) => {
            let (_, rows) = read_embeddings(p)?;
            let row = rows.get(a.row).ok_or_else(|| {
                CliError::Usage(format!("{} has {} rows, asked for row {}", p.display(), rows.len(), a.row))
            })?;
            row.iter().map(|&x| x as f64).collect()
        }
        (None, None) => return Err(CliError::Usage("need --instance or --embedding".into())),
    };
    let pool = if a.all { codebook } else { live_codebook(&map, &codebook) };
    for hit in retrieve(&pool, &query, a.k as usize)? {
        let caption = pool.get(hit.instance).and_then(|r| r.caption.clone());
        println!(
            "{}",
            json!({
                "rank": hit.rank,
                "instance": hit.instance,
                "score": hit.score,
                "extent": map.extent(hit.instance),
                "caption": caption,
            })
        );
    }
    Ok(())
}

fn cmd_render(cfg: &RunConfig, a: RenderArgs) -> CliResult<()> {
    let snap = required(&cfg.paths.snapshot, "snapshot")?;
    let seq = required(&cfg.paths.sequence, "sequence")?;
    let (map, _) = load_snapshot(snap)?;
    let reader = SequenceReader::open(seq)?;
    if a.frame >= reader.len() {
        return Err(CliError::Usage(format!(
            "frame {} out of range ({} frames)",
            a.frame,
            reader.len()
        )));
    }
    let frame = reader.read_frame(a.frame)?;
    let rendered = render_mask(&map, &frame.intrinsics, &frame.pose, &frame.depth);
    std::fs::write(&a.out, rendered.to_bytes()).map_err(|e| Error::io(&a.out, e))?;
    if cfg.verbosity != Verbosity::Quiet {
        let labeled = rendered
            .labels
            .iter()
            .filter(|&&l| l != voxelox::query::BACKGROUND)
            .count();
        eprintln!("{}x{} raster, {labeled} labeled pixels", rendered.width, rendered.height);
    }
    Ok(())
}

fn cmd_export(cfg: &RunConfig, a: ExportArgs) -> CliResult<()> {
    let snap = required(&cfg.paths.snapshot, "snapshot")?;
    let (map, codebook) = load_snapshot(snap)?;
    let format = match a.format {
        FormatArg::Pointlist => ExportFormat::Pointlist,
        FormatArg::LabeledVoxels => ExportFormat::LabeledVoxels,
    };
    export_map(&map, &codebook, &a.out, format)?;
    Ok(())
}
