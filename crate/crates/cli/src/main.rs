use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xmreg_core::geometry::{GeometricTransform, GeometryKind};
use xmreg_core::imaging::NormalizationKind;
use xmreg_core::matching::MatcherSpec;
use xmreg_core::retrieval::RETRIEVAL_THRESHOLD;
use xmreg_core::sweep::{
    self, expand_grid, format_pair_manifest, format_retrieval_manifest, load_pair_manifest,
    load_retrieval_manifest, report, retrieval_pairs, Overrides, ProtocolConfig, RankingRow,
    RunAggregate, ScenePairManifest, Settings, SweepGrid, SweepOptions,
};
use xmreg_core::synthgen::{self, PoolSpec, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "xmreg", version, about = "Optical-SAR registration protocol runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one protocol configuration over a pair manifest.
    Run(ProtocolArgs),
    /// Run every cell of a grid over a pair manifest.
    Sweep(ProtocolArgs),
    /// Score retrieval pools by inlier count.
    Retrieve(ProtocolArgs),
    /// Generate synthetic scene pairs or retrieval pools.
    Synth(SynthArgs),
    /// Recompute aggregates and ranking from a finished output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// Pair manifest (retrieval manifest for `retrieve`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid file with comma-separated axis values (`sweep` only).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// `builtin` or `external:<command>` [default: builtin]
    #[arg(long)]
    matcher: Option<MatcherSpec>,
    /// identity, percentile, zscore or clahe [default: identity]
    #[arg(long)]
    normalization: Option<NormalizationKind>,
    /// Long-side cap after resizing, pixels [default: 2048]
    #[arg(long)]
    max_dimension: Option<usize>,
    /// Tile edge, pixels [default: 768]
    #[arg(long)]
    tile_size: Option<usize>,
    /// Overlap between adjacent tiles, pixels [default: 256]
    #[arg(long)]
    tile_overlap: Option<usize>,
    /// affine or homography [default: affine]
    #[arg(long)]
    geometry: Option<GeometryKind>,
    /// RANSAC reprojection threshold, pixels [default: 10; 3 for retrieve]
    #[arg(long)]
    ransac_threshold: Option<f64>,
    /// Inlier gate below which a pair fails [default: 6]
    #[arg(long)]
    min_inliers: Option<usize>,
    /// Maximum correspondences per tile [default: 4096]
    #[arg(long)]
    keypoint_budget: Option<usize>,
    /// Global RANSAC seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: available parallelism]
    #[arg(long)]
    jobs: Option<usize>,
    /// Report directory [default: xmreg-out]
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write every tile pair as PNG under <output-dir>/tiles [default: off]
    #[arg(long)]
    dump_tiles: bool,
    /// Print the expanded run list and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Planted {
    Affine,
    Homography,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory for images, tie points and manifest.
    #[arg(long)]
    output_dir: PathBuf,
    /// Scene pairs to generate.
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    /// Scene edge, pixels.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    /// Multiplicative speckle spread (0 disables).
    #[arg(long, default_value_t = 0.0)]
    speckle: f64,
    /// Invert contrast of the SAR-like side.
    #[arg(long)]
    invert: bool,
    /// Planted warp family.
    #[arg(long, value_enum, default_value_t = Planted::Affine)]
    planted: Planted,
    /// Tie points per axis.
    #[arg(long, default_value_t = 10)]
    tiepoint_grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate a retrieval pool instead of scene pairs.
    #[arg(long)]
    retrieval: bool,
    /// Retrieval queries.
    #[arg(long, default_value_t = 40)]
    queries: usize,
    /// Candidates per retrieval query.
    #[arg(long, default_value_t = 13)]
    pool_size: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of a previous `run`, `sweep` or `retrieve`.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn usage(flag: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{flag}: {e}"))
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

const DEFAULT_OUTPUT_DIR: &str = "xmreg-out";

impl ProtocolArgs {
    fn flags(&self) -> Overrides {
        Overrides {
            normalization: self.normalization,
            max_dimension: self.max_dimension,
            tile_size: self.tile_size,
            tile_overlap: self.tile_overlap,
            geometry: self.geometry,
            ransac_threshold: self.ransac_threshold,
            min_inliers: self.min_inliers,
            keypoint_budget: self.keypoint_budget,
            seed: self.seed,
            matcher: self.matcher.clone(),
            manifest: self.manifest.clone(),
            grid: self.grid.clone(),
            output_dir: self.output_dir.clone(),
            jobs: self.jobs,
            dump_tiles: self.dump_tiles.then_some(true),
        }
    }

    /// Flags over config file over `defaults`.
    fn settings(&self, defaults: &ProtocolConfig) -> Result<Settings, Failure> {
        let file = match &self.config {
            Some(p) => Overrides::load(p).map_err(|e| usage("--config", e))?,
            None => Overrides::default(),
        };
        let s = self.flags().over(&file).resolve(defaults);
        s.matcher.validate().map_err(|e| usage("--matcher", e))?;
        if s.jobs == Some(0) {
            return Err(usage("--jobs", "must be at least 1"));
        }
        Ok(s)
    }
}

fn options(s: &Settings) -> SweepOptions {
    SweepOptions {
        jobs: s.jobs,
        dump_tiles: s.dump_tiles,
        ..SweepOptions::default()
    }
}

fn output_dir(s: &Settings) -> PathBuf {
    s.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn pair_manifest(s: &Settings) -> Result<Vec<ScenePairManifest>, Failure> {
    let path = s.manifest.as_ref().ok_or_else(|| usage("--manifest", "required"))?;
    load_pair_manifest(path).map_err(|e| usage("--manifest", e))
}

fn print_runs(grid: &SweepGrid) -> Result<(), Failure> {
    let runs = expand_grid(grid).map_err(|e| usage("--grid", e))?;
    let mut out = std::io::stdout().lock();
    for r in &runs {
        if writeln!(out, "run_{:03} {}", r.index, r.key()).is_err() {
            break;
        }
    }
    eprintln!("{} runs", runs.len());
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

fn print_ranking(rows: &[RankingRow]) {
    println!("rank  mean_err_px  S@5     S@10    fail    matcher  config");
    for r in rows {
        println!(
            "{:<5} {:<12} {:<7} {:<7} {:<7} {}  {}",
            r.rank,
            fmt_opt(r.mean_error, 3),
            fmt_opt(r.success_at_5, 3),
            fmt_opt(r.success_at_10, 3),
            format!("{:.3}", r.failure_rate),
            r.matcher,
            r.config_key
        );
    }
}

fn print_retrieval(aggregates: &[RunAggregate]) {
    for a in aggregates {
        if let Some(r) = &a.retrieval {
            let recalls: Vec<String> = r.recall_at.iter().map(|x| format!("R@{}={:.3}", x.k, x.recall)).collect();
            println!(
                "run_{:03} AUROC={} AUPRC={} {} ({} queries, {} candidates)",
                a.run_index,
                fmt_opt(r.auroc, 3),
                fmt_opt(r.auprc, 3),
                recalls.join(" "),
                r.query_count,
                r.candidate_count
            );
        }
    }
}

fn run(args: &ProtocolArgs) -> Result<(), Failure> {
    if args.grid.is_some() {
        return Err(usage("--grid", "only valid for `sweep`"));
    }
    let s = args.settings(&ProtocolConfig::default())?;
    s.protocol.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let grid = SweepGrid::single(&s.protocol, &s.matcher);
    if args.dry_run {
        return print_runs(&grid);
    }
    let manifest = pair_manifest(&s)?;
    execute(&grid, &manifest, &s)
}

fn execute(grid: &SweepGrid, manifest: &[ScenePairManifest], s: &Settings) -> Result<(), Failure> {
    let dir = output_dir(s);
    info!("{} runs over {} pairs -> {}", grid.size(), manifest.len(), dir.display());
    let outcome = sweep::run_sweep(grid, manifest, &dir, &options(s)).map_err(runtime)?;
    print_ranking(&outcome.ranking);
    let aggregates: Vec<RunAggregate> = outcome.runs.iter().map(|r| r.aggregate.clone()).collect();
    print_retrieval(&aggregates);
    println!("reports written to {}", dir.display());
    Ok(())
}

fn sweep_cmd(args: &ProtocolArgs) -> Result<(), Failure> {
    let s = args.settings(&ProtocolConfig::default())?;
    let grid_path = s.grid.as_ref().ok_or_else(|| usage("--grid", "required"))?;
    let grid = SweepGrid::load(grid_path, &s.protocol, &s.matcher).map_err(|e| usage("--grid", e))?;
    if args.dry_run {
        return print_runs(&grid);
    }
    expand_grid(&grid).map_err(|e| usage("--grid", e))?;
    let manifest = pair_manifest(&s)?;
    execute(&grid, &manifest, &s)
}

fn retrieve(args: &ProtocolArgs) -> Result<(), Failure> {
    if args.grid.is_some() {
        return Err(usage("--grid", "only valid for `sweep`"));
    }
    let defaults = ProtocolConfig {
        ransac_threshold: RETRIEVAL_THRESHOLD,
        ..ProtocolConfig::default()
    };
    let s = args.settings(&defaults)?;
    s.protocol.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let grid = SweepGrid::single(&s.protocol, &s.matcher);
    if args.dry_run {
        return print_runs(&grid);
    }
    let path = s.manifest.as_ref().ok_or_else(|| usage("--manifest", "required"))?;
    let entries = load_retrieval_manifest(path).map_err(|e| usage("--manifest", e))?;
    execute(&grid, &retrieval_pairs(&entries), &s)
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let dir = &args.output_dir;
    if args.retrieval {
        let spec = PoolSpec {
            speckle_strength: args.speckle,
            invert_contrast: args.invert,
            size: args.size,
            ..PoolSpec::new(args.queries, args.pool_size, args.seed)
        };
        let pool = synthgen::generate_retrieval_pool(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
        let entries = synthgen::write_retrieval_pool(dir, &pool).map_err(runtime)?;
        let manifest = dir.join("retrieval.txt");
        write_text(&manifest, &format_retrieval_manifest(&entries, dir))?;
        println!("{} queries x {} candidates -> {}", args.queries, args.pool_size, manifest.display());
        return Ok(());
    }
    let mut entries = Vec::with_capacity(args.scenes);
    for i in 0..args.scenes {
        let seed = args.seed.wrapping_add(i as u64);
        let planted: GeometricTransform = match args.planted {
            Planted::Affine => synthgen::near_identity_affine(seed, args.size, args.size).into(),
            Planted::Homography => synthgen::near_identity_homography(seed, args.size, args.size).into(),
        };
        let spec = SynthSpec {
            planted_transform: planted,
            tiepoint_grid: args.tiepoint_grid,
            ..SynthSpec::identity(args.size, args.size, seed)
        }
        .with_speckle(args.speckle)
        .with_inversion(args.invert);
        let pair = synthgen::generate_pair(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
        entries.push(synthgen::write_pair(dir, &format!("scene_{i:02}"), &pair).map_err(runtime)?);
    }
    let manifest = dir.join("manifest.txt");
    write_text(&manifest, &format_pair_manifest(&entries, dir))?;
    println!("{} scene pairs -> {}", entries.len(), manifest.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn report_cmd(args: &ReportArgs) -> Result<(), Failure> {
    let ranking = report::reaggregate(&args.output_dir, &SweepOptions::default()).map_err(runtime)?;
    print_ranking(&ranking);
    let aggregates = report::read_aggregates(&args.output_dir).map_err(runtime)?;
    print_retrieval(&aggregates);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
