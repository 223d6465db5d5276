//! Command-line front end.
//!
//! Four subcommands share one configuration file: `precompute` solves and
//! caches the offline tables, `simulate` runs a scenario against them,
//! `verify` runs the acceptance battery, and `export-slice` renders a stored
//! value function as an SVG contour plot. Table artifacts are cached under
//! content-hashed names derived from every input that affects the solve
//! (vehicle parameters, grid, horizons, solver settings), which makes
//! `precompute` idempotent: rerunning with unchanged inputs is a cache hit,
//! changing any input yields a new file instead of clobbering the old one.
//! The conflict threshold K is applied at query time and deliberately left
//! out of the hash.
//!
//! Exit codes are a stable contract: 0 success, 1 failed verification or
//! internal error, 2 a safety violation during simulation, 64 usage errors
//! (bad flags, missing or malformed inputs).

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::cache;
use crate::config::{load_config, load_scenario, Config};
use crate::dynamics::DubinsParams;
use crate::error::{Error, Result};
use crate::grid::{Grid, TimeIndexedValueFunction};
use crate::hj_solver::SolveConfig;
use crate::hybrid::{OutsiderContext, StagePhase};
use crate::reach_sets::{
    compute_frs_origin, compute_pairwise_tables, PairwiseTables, DEFAULT_FRAME_STRIDE,
    FRS_SEED_CELLS,
};
use crate::sim::{run_scenario, RunRecord, Scenario};
use crate::slice::slice_time_indexed;
use crate::verify::{render_table, run_all, VerifyContext, REF_K, REF_PARAMS, REF_RC, REF_TE};

/// Environment variable naming the cache directory; weaker than the `--cache`
/// flag, stronger than the configuration file.
pub const CACHE_ENV: &str = "REACHGUARD_CACHE";

#[derive(Parser)]
#[command(
    name = "reachguard",
    version,
    about = "Reachability-based collision avoidance for N+1 planar vehicles"
)]
struct Cli {
    /// Tool configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario file (TOML); overrides the one named in the configuration.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Cache directory; beats REACHGUARD_CACHE and the configuration file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Output directory for traces, logs, and renders.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap for the solvers.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve and cache the offline tables; a no-op when they are cached.
    Precompute,
    /// Run a closed-loop scenario and write its trace and event log.
    Simulate {
        /// Override the scenario's stored seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance battery and report measured-versus-bound per check.
    Verify,
    /// Render the zero contour of a cached value function to SVG.
    ExportSlice {
        /// Cache artifact to slice.
        #[arg(long)]
        file: PathBuf,
        /// Heading at which to cut the 3-D table.
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Frame time; the nearest stored frame is used on a miss.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Output SVG path; defaults to the artifact stem in the out dir.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad invocation or malformed input: exit 64.
    Usage(String),
    /// Legitimate run that failed: exit 1.
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Process entry point; returns the exit code instead of calling exit so the
/// binary stays a one-liner.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 64;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            64
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> std::result::Result<i32, Failure> {
    let cfg = match &cli.config {
        Some(path) => load_config(path).map_err(usage)?,
        None => Config::default(),
    };
    configure_threads(cli.jobs.or(cfg.jobs));
    let cache_dir = resolve_cache_dir(
        cli.cache.clone(),
        std::env::var_os(CACHE_ENV).map(PathBuf::from),
        cfg.cache_dir.clone(),
    );
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));

    match cli.cmd {
        Cmd::Precompute => {
            let sc = load_optional_scenario(&cli, &cfg)?;
            let (rc, te, k) = table_params(sc.as_ref());
            let arts = ensure_artifacts(&cfg, &cache_dir, rc, te, k)?;
            for line in &arts.log {
                println!("{line}");
            }
            Ok(0)
        }
        Cmd::Simulate { seed } => cmd_simulate(&cli, &cfg, &cache_dir, &out_dir, seed),
        Cmd::Verify => cmd_verify(&cfg, &cache_dir),
        Cmd::ExportSlice {
            file,
            theta,
            time,
            svg,
        } => cmd_export_slice(&out_dir, &file, theta, time, svg),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(jobs: Option<usize>) {
    if let Some(n) = jobs.filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_jobs: Option<usize>) {}

/// Cache directory precedence: flag, then environment, then configuration,
/// then a local default.
fn resolve_cache_dir(flag: Option<PathBuf>, env: Option<PathBuf>, cfg: Option<PathBuf>) -> PathBuf {
    flag.or(env)
        .or(cfg)
        .unwrap_or_else(|| PathBuf::from("reachguard-cache"))
}

fn load_optional_scenario(
    cli: &Cli,
    cfg: &Config,
) -> std::result::Result<Option<Scenario>, Failure> {
    let path = cli.scenario.clone().or_else(|| cfg.scenario.clone());
    match path {
        Some(p) => {
            let sc = load_scenario(&p).map_err(usage)?;
            cfg.validate_for(&sc).map_err(usage)?;
            Ok(Some(sc))
        }
        None => Ok(None),
    }
}

/// Table parameters: the scenario's when one is in play, else the reference
/// set, so `precompute` warms exactly the cache a later run will read.
fn table_params(sc: Option<&Scenario>) -> (f64, f64, f64) {
    match sc {
        Some(s) => (s.rc, s.te, s.k),
        None => (REF_RC, REF_TE, REF_K),
    }
}

// --- cache naming -----------------------------------------------------------

fn f64_bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn grid_fragment(g: &Grid) -> String {
    g.dims()
        .iter()
        .map(|d| {
            format!(
                "{}:{}:{}:{}",
                f64_bits(d.min),
                f64_bits(d.max),
                d.nodes,
                d.periodic as u8
            )
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn solver_fragment(s: &SolveConfig) -> String {
    let db = match &s.dissipation_bounds {
        None => "none".to_string(),
        Some(v) => v.iter().map(|x| f64_bits(*x)).collect::<Vec<_>>().join("+"),
    };
    format!(
        "cfl={};tol={};steps={};db={}",
        f64_bits(s.cfl),
        f64_bits(s.convergence_tol),
        s.max_steps,
        db
    )
}

/// Content-hashed artifact name: `<kind>-<16 hex digits>.hjrs` over every
/// solve input, so any change re-solves under a fresh name.
fn artifact_name(kind: &str, fields: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    h.update(b"hjrs-artifact-v1\n");
    h.update(kind.as_bytes());
    h.update(b"\n");
    for (k, v) in fields {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{kind}-{hex}.hjrs")
}

fn pair_fields(
    p: &DubinsParams,
    rc: f64,
    te: f64,
    grid: &Grid,
    solver: &SolveConfig,
) -> Vec<(&'static str, String)> {
    vec![
        ("speed", f64_bits(p.speed)),
        ("turn_rate", f64_bits(p.max_turn_rate)),
        ("rc", f64_bits(rc)),
        ("te", f64_bits(te)),
        ("grid", grid_fragment(grid)),
        ("solver", solver_fragment(solver)),
    ]
}

fn forward_fields(
    p: &DubinsParams,
    horizon: f64,
    grid: &Grid,
    solver: &SolveConfig,
) -> Vec<(&'static str, String)> {
    vec![
        ("speed", f64_bits(p.speed)),
        ("turn_rate", f64_bits(p.max_turn_rate)),
        ("horizon", f64_bits(horizon)),
        ("seed_cells", f64_bits(FRS_SEED_CELLS)),
        ("grid", grid_fragment(grid)),
        ("solver", solver_fragment(solver)),
    ]
}

// --- artifact assembly -------------------------------------------------------

/// The offline tables plus bookkeeping from obtaining them.
struct Artifacts {
    tables: PairwiseTables,
    forward: TimeIndexedValueFunction,
    /// Wall seconds the pairwise solve cost, recovered from the sidecar on a
    /// cache hit so the figure survives across runs.
    table_seconds: f64,
    log: Vec<String>,
}

fn sidecar_wall_seconds(path: &Path) -> Option<f64> {
    cache::read_sidecar(path).ok().and_then(|entries| {
        entries
            .iter()
            .find(|(k, _)| k == "wall_seconds")
            .and_then(|(_, v)| v.parse().ok())
    })
}

fn common_sidecar(p: &DubinsParams, solver: &SolveConfig, seconds: f64) -> Vec<(String, String)> {
    vec![
        ("speed".into(), p.speed.to_string()),
        ("turn_rate".into(), p.max_turn_rate.to_string()),
        ("cfl".into(), solver.cfl.to_string()),
        ("convergence_tol".into(), solver.convergence_tol.to_string()),
        ("max_steps".into(), solver.max_steps.to_string()),
        ("wall_seconds".into(), seconds.to_string()),
    ]
}

/// Load-or-solve the pairwise tables and the origin forward-reach table. The
/// two jobs are independent and run concurrently. Structurally unreadable
/// cache entries are reported as errors rather than silently re-solved.
fn ensure_artifacts(cfg: &Config, cache_dir: &Path, rc: f64, te: f64, k: f64) -> Result<Artifacts> {
    let p = REF_PARAMS;
    let rel_grid = cfg.relative_grid_handle()?;
    let fwd_grid = cfg.forward_reach_grid_handle()?;
    let horizon = cfg.forward_reach.horizon;
    fs::create_dir_all(cache_dir)?;

    let pf = pair_fields(&p, rc, te, &rel_grid, &cfg.solver);
    let conflict_path = cache_dir.join(artifact_name("conflict", &pf));
    let buffer_path = cache_dir.join(artifact_name("buffer", &pf));
    let forward_path = cache_dir.join(artifact_name(
        "forward",
        &forward_fields(&p, horizon, &fwd_grid, &cfg.solver),
    ));

    let pair_job = || -> Result<(PairwiseTables, f64, Vec<String>)> {
        if conflict_path.exists() && buffer_path.exists() {
            let v_pc = cache::read_value_function(&conflict_path)?;
            let v_exit = cache::read_value_function(&buffer_path)?;
            let tables = PairwiseTables::from_parts(v_pc, v_exit, k, te)?;
            let seconds = sidecar_wall_seconds(&conflict_path).unwrap_or(0.0);
            let log = vec![
                format!("conflict table: cache hit ({})", conflict_path.display()),
                format!("buffer table: cache hit ({})", buffer_path.display()),
            ];
            Ok((tables, seconds, log))
        } else {
            let t0 = Instant::now();
            let tables = compute_pairwise_tables(&rel_grid, &p, rc, te, k, &cfg.solver)?;
            let seconds = t0.elapsed().as_secs_f64();
            cache::write_value_function(&conflict_path, &tables.v_pc)?;
            cache::write_value_function(&buffer_path, &tables.v_exit)?;
            let mut meta = common_sidecar(&p, &cfg.solver, seconds);
            meta.push(("rc".into(), rc.to_string()));
            meta.push(("te".into(), te.to_string()));
            cache::write_sidecar(&conflict_path, &meta)?;
            cache::write_sidecar(&buffer_path, &meta)?;
            let log = vec![
                format!(
                    "conflict table: solved in {seconds:.1} s ({})",
                    conflict_path.display()
                ),
                format!("buffer table: solved with it ({})", buffer_path.display()),
            ];
            Ok((tables, seconds, log))
        }
    };

    let forward_job = || -> Result<(TimeIndexedValueFunction, Vec<String>)> {
        if forward_path.exists() {
            let fwd = cache::read_time_indexed(&forward_path)?;
            Ok((
                fwd,
                vec![format!(
                    "forward table: cache hit ({})",
                    forward_path.display()
                )],
            ))
        } else {
            let t0 = Instant::now();
            let fwd = compute_frs_origin(&fwd_grid, &p, horizon, &cfg.solver)?;
            let seconds = t0.elapsed().as_secs_f64();
            cache::write_time_indexed(&forward_path, &fwd)?;
            let mut meta = common_sidecar(&p, &cfg.solver, seconds);
            meta.push(("horizon".into(), horizon.to_string()));
            cache::write_sidecar(&forward_path, &meta)?;
            Ok((
                fwd,
                vec![format!(
                    "forward table: solved in {seconds:.1} s ({})",
                    forward_path.display()
                )],
            ))
        }
    };

    #[cfg(feature = "parallel")]
    let (pair, forward) = rayon::join(pair_job, forward_job);
    #[cfg(not(feature = "parallel"))]
    let (pair, forward) = (pair_job(), forward_job());

    let (tables, table_seconds, mut log) = pair?;
    let (forward, fwd_log) = forward?;
    log.extend(fwd_log);
    Ok(Artifacts {
        tables,
        forward,
        table_seconds,
        log,
    })
}

// --- simulate ----------------------------------------------------------------

fn stages_entered(rec: &RunRecord) -> Vec<StagePhase> {
    let mut seen = Vec::new();
    for s in &rec.stages {
        if !seen.contains(s) {
            seen.push(*s);
        }
    }
    seen
}

fn stage_name(s: StagePhase) -> &'static str {
    match s {
        StagePhase::Stage0 => "stage0",
        StagePhase::Stage1 => "stage1",
        StagePhase::Stage2 => "stage2",
        StagePhase::Stage3 => "stage3",
    }
}

fn cmd_simulate(
    cli: &Cli,
    cfg: &Config,
    cache_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> std::result::Result<i32, Failure> {
    let mut sc = load_optional_scenario(cli, cfg)?
        .ok_or_else(|| Failure::Usage("simulate needs a scenario (--scenario or config)".into()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let arts = ensure_artifacts(cfg, cache_dir, sc.rc, sc.te, sc.k)?;
    for line in &arts.log {
        println!("{line}");
    }

    let octx = OutsiderContext {
        outsider_grid: cfg.outsider_grid_for(&sc)?,
        origin_frs: &arts.forward,
        frame_stride: DEFAULT_FRAME_STRIDE,
        dt: sc.dt,
        solve_cfg: cfg.solver.clone(),
    };
    let rec = run_scenario(&sc, &arts.tables, &octx)?;

    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let trace_path = out_dir.join("trace.csv");
    let events_path = out_dir.join("events.jsonl");
    fs::write(&trace_path, rec.to_csv()).map_err(Error::from)?;
    fs::write(&events_path, rec.events_jsonl()).map_err(Error::from)?;

    let n = rec.paths.len();
    let stages: Vec<&str> = stages_entered(&rec).into_iter().map(stage_name).collect();
    println!("vehicles: {n}, horizon {} s, dt {}", sc.horizon, sc.dt);
    println!("stages entered: {}", stages.join(" "));
    for (t, v, g) in &rec.outsider_claims {
        println!("outsider: vehicle {v} ({g:?}) at t = {t:.2}");
    }
    for (v, r) in rec.removed_at.iter().enumerate() {
        if let Some(t) = r {
            println!("removed: vehicle {v} at t = {t:.2}");
        }
    }
    let reached = rec.reached_goal_at.iter().filter(|g| g.is_some()).count();
    println!(
        "min separation: {:.2} (danger radius {})",
        rec.min_separation, sc.rc
    );
    println!("goals reached: {reached}/{n}");
    println!(
        "wrote {} and {} ({} events)",
        trace_path.display(),
        events_path.display(),
        rec.events.len()
    );
    match rec.violation_at {
        Some(t) => {
            println!("danger-radius violation at t = {t:.2}");
            Ok(2)
        }
        None => {
            println!("no danger-radius violation");
            Ok(0)
        }
    }
}

// --- verify --------------------------------------------------------------------

fn cmd_verify(cfg: &Config, cache_dir: &Path) -> std::result::Result<i32, Failure> {
    cfg.validate().map_err(usage)?;
    let arts = ensure_artifacts(cfg, cache_dir, REF_RC, REF_TE, REF_K)?;
    for line in &arts.log {
        println!("{line}");
    }
    let ctx = VerifyContext {
        tables: Arc::new(arts.tables),
        origin_frs: Arc::new(arts.forward),
        frs_grid: cfg.forward_reach_grid_handle()?,
        params: REF_PARAMS,
        rc: REF_RC,
        solve_cfg: cfg.solver.clone(),
        table_seconds: arts.table_seconds,
    };
    let results = run_all(&ctx);
    print!("{}", render_table(&results));
    Ok(if results.iter().all(|r| r.pass) { 0 } else { 1 })
}

// --- export-slice ----------------------------------------------------------------

fn cmd_export_slice(
    out_dir: &Path,
    file: &Path,
    theta: f64,
    time: f64,
    svg: Option<PathBuf>,
) -> std::result::Result<i32, Failure> {
    let tivf = cache::read_time_indexed(file).map_err(usage)?;
    let stem = file
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("slice")
        .to_string();
    let caption = format!("{stem} at heading {theta:.3}");
    let render = slice_time_indexed(&tivf, time, theta, &caption)?;
    if render.nearest_warning {
        eprintln!(
            "warning: no frame stored at t = {time}; rendered nearest frame t = {}",
            render.frame_time.unwrap_or(f64::NAN)
        );
    }
    let svg_path = svg.unwrap_or_else(|| out_dir.join(format!("{stem}.svg")));
    if let Some(dir) = svg_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
    }
    fs::write(&svg_path, &render.svg).map_err(Error::from)?;
    println!(
        "wrote {} ({} contour paths)",
        svg_path.display(),
        render.contours.len()
    );
    Ok(0)
}
