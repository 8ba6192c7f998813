//! Command-line interface: `index`, `localize`, `eval` and `synth`.
//!
//! Exit codes: 0 success, 2 invalid input or parameters, 3 I/O failure,
//! 4 internal error. The `HLOC_THREADS` environment variable sets the size
//! of the worker pool.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::eval::{
    localization_metrics, retrieval_recall, write_csvs, EvalParams, DEFAULT_GT_MATCH_ANGLE_DEG,
    DEFAULT_GT_MATCH_DISTANCE_M, DEFAULT_POSITION_THRESHOLD_M,
};
use crate::format::{
    load_map, load_queries, read_results, save_map_with, save_queries_with, write_results, DescriptorStorage,
};
use crate::geometry::PinholeCamera;
use crate::global_index::{GlobalIndex, PcaProjector, DEFAULT_NUM_PRIORS, DEFAULT_PCA_DIM};
use crate::matching::{MatchParams, DEFAULT_MATCH_EPSILON, DEFAULT_RATIO_THRESHOLD};
use crate::pipeline::{Localizer, Mode, PipelineParams};
use crate::pnp::ransac::{
    DEFAULT_CONFIDENCE, DEFAULT_MAX_ITERATIONS, DEFAULT_MIN_INLIERS, DEFAULT_RANSAC_SEED,
    DEFAULT_REPROJECTION_THRESHOLD_PX,
};
use crate::pnp::RansacParams;
use crate::synth::{generate_world, SynthConfig, DEFAULT_SYNTH_SEED};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "HLOC_THREADS";

/// File names written by `synth` into its output directory.
pub const SYNTH_MAP_FILE: &str = "map.json";
pub const SYNTH_QUERY_FILE: &str = "queries.json";

#[derive(Debug, Parser)]
#[command(name = "hloc", version, about = "Hierarchical visual localization against a prebuilt map")]
pub struct Cli {
    /// Print progress details to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the PCA projection of keyframe global descriptors and save it.
    Index(IndexArgs),
    /// Localize query frames against a map.
    Localize(LocalizeArgs),
    /// Score a results file against query ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic map and query set.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Output dimension of the PCA projection.
    #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
    pub dim: usize,
    /// Output index file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hierarchical,
    Direct,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hierarchical => Mode::Hierarchical,
            ModeArg::Direct => Mode::Direct,
        }
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Hierarchical)]
    pub mode: ModeArg,
    /// Number of prior keyframes retrieved per query (N).
    #[arg(long, default_value_t = DEFAULT_NUM_PRIORS)]
    pub num_priors: usize,
    /// Approximation factor of the local matching k-d tree.
    #[arg(long, default_value_t = DEFAULT_MATCH_EPSILON)]
    pub epsilon: f64,
    /// Nearest/second-nearest distance ratio; 1 disables the test.
    #[arg(long, default_value_t = DEFAULT_RATIO_THRESHOLD)]
    pub ratio_threshold: f64,
    /// Maximum squared descriptor distance of a match.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub max_descriptor_distance: f64,
    /// RANSAC inlier threshold, pixels.
    #[arg(long, default_value_t = DEFAULT_REPROJECTION_THRESHOLD_PX)]
    pub reprojection_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
    /// Minimum inliers for a pose to be accepted.
    #[arg(long, default_value_t = DEFAULT_MIN_INLIERS)]
    pub min_inliers: usize,
    /// Base RANSAC seed, mixed with each query id.
    #[arg(long, default_value_t = DEFAULT_RANSAC_SEED)]
    pub seed: u64,
    /// Least-squares refinement of the final pose.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub refine: bool,
}

impl PipelineArgs {
    pub fn params(&self) -> PipelineParams {
        PipelineParams {
            num_priors: self.num_priors,
            matching: MatchParams {
                epsilon: self.epsilon,
                ratio_threshold: self.ratio_threshold,
                max_descriptor_distance: self.max_descriptor_distance,
            },
            ransac: RansacParams {
                reprojection_threshold_px: self.reprojection_threshold,
                confidence: self.confidence,
                max_iterations: self.max_iterations,
                min_inliers: self.min_inliers,
                rng_seed: self.seed,
                refine: self.refine,
            },
            mode: self.mode.into(),
        }
    }
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Index file written by `hloc index`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Output results file, one JSON record per line.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Query file carrying ground-truth poses.
    #[arg(long)]
    pub queries: PathBuf,
    /// Directory receiving the CSV files.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Map for retrieval recall@n; needs `--index` too.
    #[arg(long, requires = "index")]
    pub map: Option<PathBuf>,
    #[arg(long, requires = "map")]
    pub index: Option<PathBuf>,
    /// Position error under which a query counts as recalled, meters.
    #[arg(long, default_value_t = DEFAULT_POSITION_THRESHOLD_M)]
    pub position_threshold: f64,
    /// Ground-truth global match distance bound, meters.
    #[arg(long, default_value_t = DEFAULT_GT_MATCH_DISTANCE_M)]
    pub gt_distance: f64,
    /// Ground-truth global match angle bound, degrees.
    #[arg(long, default_value_t = DEFAULT_GT_MATCH_ANGLE_DEG)]
    pub gt_angle: f64,
    /// Values of n for retrieval recall@n.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
    pub retrieval_n: Vec<usize>,
}

impl EvalArgs {
    pub fn params(&self) -> EvalParams {
        EvalParams {
            position_threshold_m: self.position_threshold,
            gt_match_distance_m: self.gt_distance,
            gt_match_angle_deg: self.gt_angle,
            retrieval_n_values: self.retrieval_n.clone(),
        }
    }
}

/// Aliased place pairs written `a:b,c:d`, or `none`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasingPairs(pub Vec<(usize, usize)>);

impl FromStr for AliasingPairs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" || s.is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| format!("expected a:b, got {pair:?}"))?;
                let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<_, _>>()
            .map(Self)
    }
}

impl fmt::Display for AliasingPairs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.0.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StorageArg {
    Inline,
    Sidecar,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the map and query files.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Where descriptor matrices are written.
    #[arg(long, value_enum, default_value_t = StorageArg::Sidecar)]
    pub storage: StorageArg,
    #[arg(long, default_value_t = DEFAULT_SYNTH_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub num_places: usize,
    #[arg(long, default_value_t = 20)]
    pub keyframes_per_place: usize,
    #[arg(long, default_value_t = 2000)]
    pub landmarks_per_place: usize,
    /// Distance between consecutive keyframes, meters.
    #[arg(long, default_value_t = 1.0)]
    pub keyframe_spacing: f64,
    #[arg(long, default_value_t = 300)]
    pub max_keypoints_per_keyframe: usize,
    /// Keypoint noise standard deviation, pixels.
    #[arg(long, default_value_t = 1.0)]
    pub keypoint_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub local_descriptor_noise: f64,
    /// Decay constant of the local descriptor spectrum; `inf` is isotropic.
    #[arg(long, default_value_t = 8.0)]
    pub local_descriptor_decay: f64,
    #[arg(long, default_value_t = 0.02)]
    pub global_descriptor_noise: f64,
    #[arg(long, default_value_t = AliasingPairs(vec![(0, 1), (2, 3)]))]
    pub aliasing_pairs: AliasingPairs,
    #[arg(long, default_value_t = 500)]
    pub num_queries: usize,
    #[arg(long, default_value_t = 50)]
    pub distractors_per_query: usize,
    /// Maximum query offset from its keyframe per axis, meters.
    #[arg(long, default_value_t = 0.5)]
    pub query_offset_m: f64,
    /// Maximum query rotation from its keyframe, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub query_offset_deg: f64,
    #[arg(long, default_value_t = 128)]
    pub local_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub global_dim: usize,
    #[arg(long, default_value_t = 500.0)]
    pub fx: f64,
    #[arg(long, default_value_t = 500.0)]
    pub fy: f64,
    #[arg(long, default_value_t = 320.0)]
    pub cx: f64,
    #[arg(long, default_value_t = 240.0)]
    pub cy: f64,
    #[arg(long, default_value_t = 640.0)]
    pub width: f64,
    #[arg(long, default_value_t = 480.0)]
    pub height: f64,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            rng_seed: self.seed,
            num_places: self.num_places,
            keyframes_per_place: self.keyframes_per_place,
            landmarks_per_place: self.landmarks_per_place,
            keyframe_spacing_m: self.keyframe_spacing,
            max_keypoints_per_keyframe: self.max_keypoints_per_keyframe,
            keypoint_noise_px: self.keypoint_noise,
            local_descriptor_noise_sigma: self.local_descriptor_noise,
            local_descriptor_spectrum_decay: self.local_descriptor_decay,
            global_descriptor_noise_sigma: self.global_descriptor_noise,
            aliasing_pairs: self.aliasing_pairs.0.clone(),
            num_queries: self.num_queries,
            distractor_keypoints_per_query: self.distractors_per_query,
            query_offset_m: self.query_offset_m,
            query_offset_deg: self.query_offset_deg,
            local_dim: self.local_dim,
            global_dim: self.global_dim,
            camera: PinholeCamera {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
        }
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_io() { EXIT_IO } else { EXIT_VALIDATION },
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = Result<T, Failure>;

/// Parses the process arguments, runs the command and maps failures to an
/// exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Index(a) => cmd_index(a, cli.verbose),
        Command::Localize(a) => cmd_localize(a, cli.verbose),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a, cli.verbose),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::validation(format!("{THREADS_ENV}={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::internal(format!("cannot start {n} worker threads: {e}")))
}

fn cmd_index(args: &IndexArgs, verbose: bool) -> CliResult<()> {
    let start = Instant::now();
    let map = load_map(&args.map)?;
    if verbose {
        eprintln!("loaded {} keyframes from {}", map.num_keyframes(), args.map.display());
    }
    let index = GlobalIndex::build(&map, args.dim)?;
    index.projector().save(&args.out)?;
    println!(
        "indexed {} keyframes, d_p = {}, {:.1} ms",
        index.len(),
        index.projector().output_dim(),
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn load_index(map: &crate::map::VisualMap, path: &Path) -> CliResult<GlobalIndex> {
    let projector = PcaProjector::load(path)?;
    Ok(GlobalIndex::with_projector(map, projector)?)
}

fn cmd_localize(args: &LocalizeArgs, verbose: bool) -> CliResult<()> {
    let params = args.pipeline.params();
    params.validate()?;
    let start = Instant::now();
    let map = load_map(&args.map)?;
    let index = load_index(&map, &args.index)?;
    let queries = load_queries(&args.queries)?;
    if verbose {
        eprintln!(
            "map: {} keyframes, {} landmarks; {} queries; loaded in {:.1} ms",
            map.num_keyframes(),
            map.num_landmarks(),
            queries.queries.len(),
            start.elapsed().as_secs_f64() * 1e3
        );
    }
    if queries.global_dim != map.global_dim() || queries.local_dim != map.local_dim() {
        return Err(Failure::validation(format!(
            "query descriptor dims ({}, {}) differ from the map's ({}, {})",
            queries.global_dim,
            queries.local_dim,
            map.global_dim(),
            map.local_dim()
        )));
    }
    let localizer = Localizer::new(&map, &index)?;
    let t = Instant::now();
    let results = localizer.localize_batch(&queries.queries, &params)?;
    let elapsed = t.elapsed().as_secs_f64();
    write_results(&args.out, &results)?;

    let n = results.len();
    let localized = results.iter().filter(|r| r.is_localized()).count();
    let mean = |f: fn(&crate::pipeline::LocalizationResult) -> usize| {
        if n == 0 {
            0.0
        } else {
            results.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64
        }
    };
    println!("mode {}: localized {localized}/{n} queries in {elapsed:.2} s", params.mode);
    println!(
        "mean places retrieved {:.2}, evaluated {:.2}",
        mean(|r| r.places_retrieved),
        mean(|r| r.places_evaluated)
    );
    for r in results.iter().filter(|r| r.error.is_some()) {
        eprintln!("query {}: {}", r.query_id, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let params = args.params();
    params.validate()?;
    let results = read_results(&args.results)?;
    let queries = load_queries(&args.queries)?;
    let truth: HashMap<u64, _> = queries.queries.iter().map(|q| (q.id, q.ground_truth)).collect();
    let gts = results
        .iter()
        .map(|r| match truth.get(&r.query_id) {
            Some(Some(gt)) => Ok(*gt),
            Some(None) => Err(Failure::validation(format!("query {} has no ground-truth pose", r.query_id))),
            None => Err(Failure::validation(format!("query {} is not in {}", r.query_id, args.queries.display()))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut report = localization_metrics(&results, &gts, &params)?;
    if let (Some(map_path), Some(index_path)) = (&args.map, &args.index) {
        let map = load_map(map_path)?;
        let index = load_index(&map, index_path)?;
        report.retrieval_recall_at_n = retrieval_recall(&index, &map, &queries.queries, &params)?;
    }
    write_csvs(&args.out_dir, &report, &results)?;
    print!("{}", report.table());
    println!(
        "localized {}/{}; mean places retrieved {:.2}, evaluated {:.2}",
        report.num_localized, report.num_queries, report.mean_places_retrieved, report.mean_places_evaluated
    );
    for (n, r) in &report.retrieval_recall_at_n {
        println!("retrieval recall@{n}: {:.1}%", 100.0 * r);
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, verbose: bool) -> CliResult<()> {
    let config = args.config();
    let start = Instant::now();
    let (map, queries) = generate_world(&config)?;
    if verbose {
        eprintln!("generated in {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::from(Error::Io {
        path: args.out_dir.clone(),
        source: e,
    }))?;
    let storage = match args.storage {
        StorageArg::Inline => DescriptorStorage::Inline,
        StorageArg::Sidecar => DescriptorStorage::Sidecar,
    };
    let map_path = args.out_dir.join(SYNTH_MAP_FILE);
    let query_path = args.out_dir.join(SYNTH_QUERY_FILE);
    save_map_with(&map, &map_path, storage)?;
    save_queries_with(&queries, &query_path, storage)?;
    println!(
        "wrote {} ({} keyframes, {} landmarks) and {} ({} queries)",
        map_path.display(),
        map.num_keyframes(),
        map.num_landmarks(),
        query_path.display(),
        queries.queries.len()
    );
    Ok(())
}
