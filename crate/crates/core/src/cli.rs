//! Batch front end: `synth`, `smooth`, `peri` and `report`.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage or
//! input parse errors. Every command that gets as far as knowing its output
//! directory writes `manifest.json` there, failures included. Wall-clock
//! timings go to a separate `timings.json` so manifests stay reproducible.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data_io::{
    export_fields, generate_synthetic, read_snapshot, save_snapshot, ExportFormat, FieldSet, Snapshot, SyntheticSpec,
    TruthField,
};
use crate::error::Error;
use crate::field_recon::{lattice_gradients, reconstruct_displacement, strain_field, StrainField};
use crate::peridynamic::{
    apply_operator, average_pk1, l2_norm, residual_loss, solve_displacement, Influence, ModelSpec, PeriGrid,
    SolverParams, Vec2,
};
use crate::pgs_opt::{run_pgs_with, ConstraintMask, LeastSquares, PgsConfig, PgsReport};
use crate::rk_basis::{assemble_basis, Window};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Threshold below which a masked normal strain counts as negative.
pub const NEGATIVE_STRAIN: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "pgs", version, about = "Physics-guided smoothing of DIC displacement fields")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// TOML file with optional [synth], [pgs], [model] and [solver] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Parent of the default output directories.
    #[arg(long, global = true, env = "PGS_OUT_ROOT", default_value = "pgs-out")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic DIC snapshots with ground truth.
    Synth(SynthArgs),
    /// Smooth snapshots with PGS and write a run manifest.
    Smooth(SmoothArgs),
    /// Evaluate or solve with a peridynamic model.
    Peri(PeriArgs),
    /// Aggregate manifests into one comparison table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Both,
    E11,
    E22,
    None,
}

impl MaskArg {
    fn mask(self) -> ConstraintMask {
        match self {
            MaskArg::Both => ConstraintMask::BOTH,
            MaskArg::E11 => ConstraintMask::new(true, false),
            MaskArg::E22 => ConstraintMask::new(false, true),
            MaskArg::None => ConstraintMask::NONE,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of snapshots; sample k uses seed + k.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measurement lattice, e.g. 21x21.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 2]>,
    /// Kernel-center lattice, e.g. 10x10.
    #[arg(long, value_parser = parse_dims)]
    pub centers: Option<[usize; 2]>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Equi-biaxial stretch of the affine ground truth.
    #[arg(long)]
    pub stretch: Option<f64>,
    #[arg(long)]
    pub artifact_amp: Option<f64>,
    #[arg(long)]
    pub artifact_radius: Option<f64>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    /// Directory of snapshot files (`*.csv`); ground truth is read from `truth/` when present.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Support size in units of the kernel-center spacing.
    #[arg(long, default_value_t = 3.1)]
    pub support_mult: f64,
    /// Un-normalized penalty; 0 gives plain RK smoothing.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Override the per-snapshot constraint mask.
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Eval,
    Solve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    #[value(name = "linear_bond", alias = "linear-bond")]
    LinearBond,
    #[value(name = "linear_state", alias = "linear-state")]
    LinearState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Loading {
    /// `b = [cos x1 cos x2, 0]`.
    Cosine,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InfluenceArg {
    Constant,
    Conical,
}

#[derive(Debug, Args)]
pub struct PeriArgs {
    #[arg(long, value_enum, default_value_t = Mode::Eval)]
    pub mode: Mode,
    /// Snapshot file or directory (eval mode).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Micromodulus; defaults to the value matching `--modulus`.
    #[arg(long)]
    pub c: Option<f64>,
    /// Dilatation coefficient of the state-based model.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub modulus: f64,
    #[arg(long, value_enum)]
    pub influence: Option<InfluenceArg>,
    /// Horizon in units of the lattice spacing.
    #[arg(long, default_value_t = 3.0)]
    pub horizon_mult: f64,
    /// Loading field; in eval mode it enables the residual loss.
    #[arg(long, value_enum)]
    pub loading: Option<Loading>,
    #[arg(long, default_value_t = 1.0)]
    pub load_scale: f64,
    /// Interior lattice for solve mode.
    #[arg(long, value_parser = parse_dims, default_value = "21x21")]
    pub dims: [usize; 2],
    #[arg(long, default_value_t = 0.05)]
    pub spacing: f64,
    /// Equi-biaxial stretch prescribed on the boundary collar in solve mode.
    #[arg(long, default_value_t = 0.0)]
    pub bc_stretch: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("bad dimension '{p}': {e}"));
    let dims = match parts.as_slice() {
        [n] => {
            let n = parse(n)?;
            [n, n]
        }
        [a, b] => [parse(a)?, parse(b)?],
        _ => return Err(format!("expected NxM, got '{s}'")),
    };
    if dims[0] < 2 || dims[1] < 2 {
        return Err(format!("need at least 2 nodes per axis, got {s}"));
    }
    Ok(dims)
}

/// Tables of the `--config` file; each one seeds the matching command.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SyntheticSpec>,
    pub pgs: Option<PgsConfig>,
    pub model: Option<ModelSpec>,
    pub solver: Option<SolverParams>,
}

/// Manifest written by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: Value,
    pub inputs: Vec<String>,
    pub status: String,
    pub errors: Vec<String>,
    pub samples: Vec<Value>,
    pub aggregate: Value,
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of `config`.
pub fn config_hash(config: &Value) -> String {
    let text = canonical(config).to_string();
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: std::collections::BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Command failure carrying its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Compute(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Compute(_) => EXIT_FAILURE,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Compute(m) => m,
        }
    }
}

fn from_input_error(e: Error) -> Failure {
    match e {
        Error::Parse { .. } | Error::Io { .. } | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
        other => Failure::Compute(other.to_string()),
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    execute(cli)
}

pub fn execute(cli: Cli) -> i32 {
    let file = match &cli.config {
        Some(path) => match read_config(path) {
            Ok(c) => c,
            Err(f) => {
                eprintln!("error: {}", f.message());
                return f.code();
            }
        },
        None => FileConfig::default(),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a, &file, &cli.out_root),
        Command::Smooth(a) => cmd_smooth(a, &file, &cli.out_root),
        Command::Peri(a) => cmd_peri(a, &file, &cli.out_root),
        Command::Report(a) => cmd_report(a, &cli.out_root),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn read_config(path: &Path) -> Result<FileConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, command: &str) -> Result<PathBuf, Failure> {
    let dir = explicit.clone().unwrap_or_else(|| root.join(command));
    fs::create_dir_all(&dir).map_err(|e| Failure::Compute(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Compute(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Compute(format!("{}: {e}", path.display())))
}

/// Write the manifest, then hand back `outcome` (or the write failure).
fn finish(dir: &Path, mut manifest: RunManifest, outcome: Result<(), Failure>) -> Result<(), Failure> {
    if let Err(f) = &outcome {
        manifest.status = "failed".into();
        manifest.errors.push(f.message().to_string());
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    outcome
}

fn manifest(command: &str, config: Value, inputs: Vec<String>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_hash: config_hash(&config),
        config,
        inputs,
        status: "ok".into(),
        errors: Vec::new(),
        samples: Vec::new(),
        aggregate: Value::Null,
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn cmd_synth(args: &SynthArgs, file: &FileConfig, root: &Path) -> Result<(), Failure> {
    let mut spec = file.synth.clone().unwrap_or_default();
    if let Some(d) = args.dims {
        spec.dims = d;
    }
    if let Some(c) = args.centers {
        spec.center_dims = c;
    }
    if let Some(s) = args.sigma {
        spec.noise_sigma = s;
    }
    if let Some(s) = args.stretch {
        spec.field = TruthField::Affine { grad: [[s, 0.0], [0.0, s]], offset: [0.0, 0.0] };
    }
    if args.artifact_amp.is_some() || args.artifact_radius.is_some() {
        let mut art = spec.artifact.unwrap_or(SyntheticSpec::default().artifact.unwrap());
        if let Some(a) = args.artifact_amp {
            art.amplitude = a;
        }
        if let Some(r) = args.artifact_radius {
            art.radius = r;
        }
        spec.artifact = Some(art);
    }
    if let Some(m) = args.mask {
        spec.constraint_mask = m.mask();
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }

    let dir = out_dir(&args.out, root, "synth")?;
    let config = json!({ "synth": to_value(&spec), "n": args.n, "seed": args.seed });
    let mut m = manifest("synth", config, Vec::new());
    let outcome = (|| {
        let truth_dir = dir.join("truth");
        fs::create_dir_all(&truth_dir).map_err(|e| Failure::Compute(format!("{}: {e}", truth_dir.display())))?;
        let names: Vec<String> = (0..args.n).map(|k| format!("sample_{k:03}.csv")).collect();
        let results: Vec<Result<(), Failure>> = names
            .par_iter()
            .enumerate()
            .map(|(k, name)| {
                let mut s = spec.clone();
                s.seed = args.seed + k as u64;
                let data = generate_synthetic(&s).map_err(|e| Failure::Compute(e.to_string()))?;
                save_snapshot(&dir.join(name), &data.snapshot()).map_err(|e| Failure::Compute(e.to_string()))?;
                save_snapshot(&truth_dir.join(name), &data.truth_snapshot()).map_err(|e| Failure::Compute(e.to_string()))
            })
            .collect();
        m.samples = names.iter().enumerate().map(|(k, n)| json!({ "output": n, "seed": args.seed + k as u64 })).collect();
        results.into_iter().collect::<Result<Vec<()>, Failure>>().map(|_| ())
    })();
    finish(&dir, m, outcome)
}

#[derive(Clone, Debug, Serialize)]
struct SmoothEntry {
    input: String,
    output: Option<String>,
    error: Option<String>,
    nodes: usize,
    report: Option<PgsReport>,
    negative_raw: usize,
    negative_smooth: usize,
    negative_pgs: usize,
    loss_u_ratio: Option<f64>,
    rmse_u_exp: Option<f64>,
    rmse_u_pgs: Option<f64>,
}

fn count_negative(strain: &StrainField, mask: ConstraintMask) -> usize {
    (0..strain.len())
        .filter(|&j| (mask.e11 && strain.e11[j] < -NEGATIVE_STRAIN) || (mask.e22 && strain.e22[j] < -NEGATIVE_STRAIN))
        .count()
}

fn rmse(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

fn list_snapshots(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn smooth_one(
    snap: &Snapshot,
    name: &str,
    truth: Option<&Snapshot>,
    cfg: &PgsConfig,
    support_mult: f64,
    order: usize,
    dir: &Path,
) -> Result<SmoothEntry, Error> {
    let grid = snap.node_grid()?;
    let basis = assemble_basis(&grid, support_mult * grid.spacing, order, Window::CubicBspline)?;
    let lsq = LeastSquares::new(&basis)?;
    let mask = cfg.constraint_mask.unwrap_or(snap.sample.constraint_mask);
    let warm = lsq.solve(&snap.sample.u_exp)?;
    let (coeffs, report) = run_pgs_with(&snap.sample, &basis, &lsq, cfg)?;

    let raw = StrainField::from_gradients(&lattice_gradients(&snap.layout, &snap.sample.u_exp)?);
    let smooth = strain_field(&warm, &basis)?;
    let pgs = strain_field(&coeffs, &basis)?;
    let disp = reconstruct_displacement(&coeffs, &basis)?;

    let mut out = snap.clone();
    out.sample.u_exp.clone_from(&disp.u);
    save_snapshot(&dir.join(name), &out)?;
    let fields_dir = dir.join("fields");
    fs::create_dir_all(&fields_dir).map_err(|e| Error::io(&fields_dir, e))?;
    let fields = FieldSet::displacement_and_strain(snap.layout.points(), &disp.u, &pgs);
    export_fields(&fields, &fields_dir.join(name), ExportFormat::Both)?;

    let (rmse_u_exp, rmse_u_pgs) = match truth {
        Some(t) if t.sample.u_exp.len() == disp.u.len() => {
            (Some(rmse(&snap.sample.u_exp, &t.sample.u_exp)), Some(rmse(&disp.u, &t.sample.u_exp)))
        }
        _ => (None, None),
    };
    let ratio = (report.loss_u_initial > 0.0).then(|| report.loss_u_final / report.loss_u_initial);
    Ok(SmoothEntry {
        input: name.into(),
        output: Some(name.into()),
        error: None,
        nodes: raw.len(),
        report: Some(report),
        negative_raw: count_negative(&raw, mask),
        negative_smooth: count_negative(&smooth, mask),
        negative_pgs: count_negative(&pgs, mask),
        loss_u_ratio: ratio,
        rmse_u_exp,
        rmse_u_pgs,
    })
}

fn cmd_smooth(args: &SmoothArgs, file: &FileConfig, root: &Path) -> Result<(), Failure> {
    if !args.input.is_dir() {
        return Err(Failure::Usage(format!("input directory {} does not exist", args.input.display())));
    }
    if !(args.support_mult > 0.0 && args.support_mult.is_finite()) {
        return Err(Failure::Usage(format!("--support-mult must be positive, got {}", args.support_mult)));
    }
    let mut cfg = file.pgs.clone().unwrap_or_default();
    if let Some(b) = args.beta {
        cfg.beta_tilde = b;
    }
    if let Some(m) = args.mask {
        cfg.constraint_mask = Some(m.mask());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let files = list_snapshots(&args.input)?;
    let dir = out_dir(&args.out, root, "smooth")?;
    let config = json!({ "pgs": to_value(&cfg), "support_mult": args.support_mult, "order": args.order });
    let mut m = manifest("smooth", config, files.iter().map(|p| p.display().to_string()).collect());
    if files.is_empty() {
        let f = Failure::Usage(format!("no snapshot files in {}", args.input.display()));
        return finish(&dir, m, Err(f));
    }

    let start = Instant::now();
    let parsed: Vec<Result<Snapshot, Error>> = files.iter().map(|p| read_snapshot(p)).collect();
    if let Some(e) = parsed.iter().find_map(|r| r.as_ref().err()) {
        let f = Failure::Usage(e.to_string());
        return finish(&dir, m, Err(f));
    }
    let snaps: Vec<Snapshot> = parsed.into_iter().map(|r| r.unwrap()).collect();
    let truth: Vec<Option<Snapshot>> = files
        .iter()
        .map(|p| {
            let t = args.input.join("truth").join(p.file_name().unwrap_or_default());
            t.is_file().then(|| read_snapshot(&t).ok()).flatten()
        })
        .collect();

    let results: Vec<(SmoothEntry, f64)> = snaps
        .par_iter()
        .zip(files.par_iter())
        .zip(truth.par_iter())
        .map(|((snap, path), truth)| {
            let t0 = Instant::now();
            let name = file_name(path);
            let entry = smooth_one(snap, &name, truth.as_ref(), &cfg, args.support_mult, args.order, &dir)
                .unwrap_or_else(|e| SmoothEntry {
                    input: name.clone(),
                    output: None,
                    error: Some(e.to_string()),
                    nodes: snap.sample.u_exp.len(),
                    report: None,
                    negative_raw: 0,
                    negative_smooth: 0,
                    negative_pgs: 0,
                    loss_u_ratio: None,
                    rmse_u_exp: None,
                    rmse_u_pgs: None,
                });
            (entry, t0.elapsed().as_secs_f64())
        })
        .collect();

    let ok: Vec<&SmoothEntry> = results.iter().map(|r| &r.0).filter(|e| e.error.is_none()).collect();
    let nodes: usize = ok.iter().map(|e| e.nodes).sum();
    let frac = |f: fn(&SmoothEntry) -> usize| {
        if nodes == 0 {
            Value::Null
        } else {
            json!(ok.iter().map(|e| f(e)).sum::<usize>() as f64 / nodes as f64)
        }
    };
    let ratios: Vec<f64> = ok.iter().filter_map(|e| e.loss_u_ratio).collect();
    let failed = results.len() - ok.len();
    m.aggregate = json!({
        "samples": results.len(),
        "failed": failed,
        "converged": ok.iter().filter(|e| e.report.as_ref().is_some_and(|r| r.converged)).count(),
        "skipped": ok.iter().filter(|e| e.report.as_ref().is_some_and(|r| r.skipped)).count(),
        "negative_fraction_raw": frac(|e| e.negative_raw),
        "negative_fraction_before": frac(|e| e.negative_smooth),
        "negative_fraction_after": frac(|e| e.negative_pgs),
        "loss_u_ratio_mean": if ratios.is_empty() { Value::Null } else { json!(ratios.iter().sum::<f64>() / ratios.len() as f64) },
        "loss_u_ratio_max": ratios.iter().copied().reduce(f64::max),
    });
    m.samples = results.iter().map(|(e, _)| to_value(e)).collect();
    let timings = json!({
        "total_seconds": start.elapsed().as_secs_f64(),
        "samples": results.iter().map(|(e, t)| json!({ "input": e.input, "seconds": t })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("timings.json"), &timings)?;

    let outcome = if failed > 0 {
        Err(Failure::Compute(format!("{failed} of {} samples failed", results.len())))
    } else {
        Ok(())
    };
    finish(&dir, m, outcome)
}

fn model_spec(args: &PeriArgs, file: &FileConfig, delta: f64) -> ModelSpec {
    // Micromoduli matching the strain energy of isotropic expansion for a
    // constant influence function; the state model lacks the 1/|ξ| factor.
    let bond_c = 9.0 * args.modulus / (std::f64::consts::PI * delta.powi(3));
    let state_c = 12.0 * args.modulus / (std::f64::consts::PI * delta.powi(4));
    let (file_kind, file_c, file_a, file_inf, aniso, alpha) = match &file.model {
        Some(ModelSpec::LinearBond { c, influence, anisotropy, alpha }) => {
            (Some(ModelKind::LinearBond), Some(*c), None, Some(*influence), *anisotropy, *alpha)
        }
        Some(ModelSpec::LinearState { a, c, influence, anisotropy, alpha }) => {
            (Some(ModelKind::LinearState), Some(*c), Some(*a), Some(*influence), *anisotropy, *alpha)
        }
        None => (None, None, None, None, 0.0, 0.0),
    };
    let influence = match args.influence {
        Some(InfluenceArg::Constant) => Influence::Constant,
        Some(InfluenceArg::Conical) => Influence::Conical,
        None => file_inf.unwrap_or_default(),
    };
    let kind = args.model.or(file_kind).unwrap_or(ModelKind::LinearBond);
    let c = args.c.or(file_c);
    match kind {
        ModelKind::LinearBond => ModelSpec::LinearBond { c: c.unwrap_or(bond_c), influence, anisotropy: aniso, alpha },
        ModelKind::LinearState => ModelSpec::LinearState {
            a: args.a.or(file_a).unwrap_or(0.0),
            c: c.unwrap_or(state_c),
            influence,
            anisotropy: aniso,
            alpha,
        },
    }
}

fn loading_field(kind: Loading, scale: f64, points: &[[f64; 2]]) -> Vec<Vec2> {
    points
        .iter()
        .map(|x| match kind {
            Loading::Cosine => [scale * x[0].cos() * x[1].cos(), 0.0],
            Loading::Zero => [0.0, 0.0],
        })
        .collect()
}

fn cmd_peri(args: &PeriArgs, file: &FileConfig, root: &Path) -> Result<(), Failure> {
    if !(args.horizon_mult > 0.0 && args.horizon_mult.is_finite()) {
        return Err(Failure::Usage(format!("--horizon-mult must be positive, got {}", args.horizon_mult)));
    }
    match args.mode {
        Mode::Eval => peri_eval(args, file, root),
        Mode::Solve => peri_solve(args, file, root),
    }
}

fn peri_eval(args: &PeriArgs, file: &FileConfig, root: &Path) -> Result<(), Failure> {
    let input = args.input.as_ref().ok_or_else(|| Failure::Usage("eval mode needs --input".into()))?;
    let files = if input.is_dir() {
        list_snapshots(input)?
    } else if input.is_file() {
        vec![input.clone()]
    } else {
        return Err(Failure::Usage(format!("input {} does not exist", input.display())));
    };
    if files.is_empty() {
        return Err(Failure::Usage(format!("no snapshot files in {}", input.display())));
    }
    let dir = out_dir(&args.out, root, "peri")?;
    let snaps: Vec<Snapshot> = match files.iter().map(|p| read_snapshot(p)).collect::<Result<_, _>>() {
        Ok(s) => s,
        Err(e) => {
            let m = manifest("peri", json!({ "mode": "eval" }), files.iter().map(|p| p.display().to_string()).collect());
            return finish(&dir, m, Err(from_input_error(e)));
        }
    };
    let h0 = snaps[0].layout.spacing[0];
    let spec0 = model_spec(args, file, args.horizon_mult * h0);
    let config = json!({
        "mode": "eval",
        "model": to_value(&spec0),
        "horizon_mult": args.horizon_mult,
        "loading": args.loading.map(|l| format!("{l:?}").to_lowercase()),
        "load_scale": args.load_scale,
    });
    let mut m = manifest("peri", config, files.iter().map(|p| p.display().to_string()).collect());

    let entries: Vec<Value> = snaps
        .par_iter()
        .zip(files.par_iter())
        .map(|(snap, path)| {
            let name = file_name(path);
            let eval = || -> Result<Value, Error> {
                let h = snap.layout.spacing[0];
                let delta = args.horizon_mult * h;
                let model = model_spec(args, file, delta).build(delta)?;
                let grid = PeriGrid::inset(snap.layout, delta)?;
                let u = &snap.sample.u_exp;
                let g = apply_operator(&grid, model.as_ref(), u)?;
                let p = average_pk1(&grid, model.as_ref(), u)?;
                let residual = match args.loading {
                    Some(kind) => {
                        let b = loading_field(kind, args.load_scale, &grid.interior.points());
                        Some(residual_loss(&grid, model.as_ref(), &[(u.clone(), b)])?)
                    }
                    None => None,
                };
                let mut fields = FieldSet::new(grid.interior.points());
                fields.push("G1", g.iter().map(|v| v[0]).collect()).push("G2", g.iter().map(|v| v[1]).collect());
                export_fields(&fields, &dir.join(&name), ExportFormat::Csv)?;
                Ok(json!({
                    "input": name,
                    "output": name,
                    "interior_dims": grid.interior.dims,
                    "g_norm": l2_norm(&grid, &g),
                    "pk1_average": p,
                    "residual_loss": residual,
                    "error": Value::Null,
                }))
            };
            eval().unwrap_or_else(|e| json!({ "input": name, "error": e.to_string() }))
        })
        .collect();
    let failed = entries.iter().filter(|e| !e["error"].is_null()).count();
    m.aggregate = json!({ "samples": entries.len(), "failed": failed });
    m.samples = entries;
    let outcome = if failed > 0 {
        Err(Failure::Compute(format!("{failed} of {} samples failed", m.samples.len())))
    } else {
        Ok(())
    };
    finish(&dir, m, outcome)
}

fn peri_solve(args: &PeriArgs, file: &FileConfig, root: &Path) -> Result<(), Failure> {
    if !(args.spacing > 0.0 && args.spacing.is_finite()) {
        return Err(Failure::Usage(format!("--spacing must be positive, got {}", args.spacing)));
    }
    let delta = args.horizon_mult * args.spacing;
    let spec = model_spec(args, file, delta);
    let params = file.solver.unwrap_or_default();
    let loading = args.loading.unwrap_or(Loading::Cosine);
    let dir = out_dir(&args.out, root, "peri")?;
    let config = json!({
        "mode": "solve",
        "model": to_value(&spec),
        "horizon_mult": args.horizon_mult,
        "loading": format!("{loading:?}").to_lowercase(),
        "load_scale": args.load_scale,
        "dims": args.dims,
        "spacing": args.spacing,
        "bc_stretch": args.bc_stretch,
        "solver": to_value(&params),
    });
    let mut m = manifest("peri", config, Vec::new());
    let mut history = Vec::new();
    let outcome = (|| -> Result<(), Failure> {
        let model = spec.build(delta).map_err(|e| Failure::Usage(e.to_string()))?;
        let interior = crate::grid::UniformGrid::new(args.dims, [0.0, 0.0], [args.spacing; 2])
            .map_err(|e| Failure::Usage(e.to_string()))?;
        let grid = PeriGrid::new(interior, delta).map_err(|e| Failure::Usage(e.to_string()))?;
        let s = args.bc_stretch;
        let bc = grid.sample(|x| [s * x[0], s * x[1]]);
        let b = loading_field(loading, args.load_scale, &grid.interior.points());
        let sol = match solve_displacement(&grid, model.as_ref(), &b, &bc, &params) {
            Ok(sol) => sol,
            Err(Error::NotConverged { iterations, history: h }) => {
                history = h;
                return Err(Failure::Compute(format!("solver did not converge after {iterations} iterations")));
            }
            Err(e) => return Err(Failure::Compute(e.to_string())),
        };
        history.clone_from(&sol.history);
        let residual = if l2_norm(&grid, &b) > 0.0 {
            Some(residual_loss(&grid, model.as_ref(), &[(sol.u.clone(), b.clone())]).map_err(|e| Failure::Compute(e.to_string()))?)
        } else {
            None
        };
        let u = grid.restrict(&sol.u);
        let mut fields = FieldSet::new(grid.interior.points());
        fields
            .push("u1", u.iter().map(|v| v[0]).collect())
            .push("u2", u.iter().map(|v| v[1]).collect())
            .push("b1", b.iter().map(|v| v[0]).collect())
            .push("b2", b.iter().map(|v| v[1]).collect());
        export_fields(&fields, &dir.join("solution.csv"), ExportFormat::Csv).map_err(|e| Failure::Compute(e.to_string()))?;
        m.samples = vec![json!({
            "output": "solution.csv",
            "converged": true,
            "iterations": sol.iterations,
            "newton": sol.newton,
            "residual_loss": residual,
        })];
        Ok(())
    })();
    m.aggregate = json!({ "residual_history": history });
    finish(&dir, m, outcome)
}

fn cmd_report(args: &ReportArgs, root: &Path) -> Result<(), Failure> {
    if args.manifests.is_empty() {
        return Err(Failure::Usage("no manifests given".into()));
    }
    let mut loaded = Vec::new();
    for p in &args.manifests {
        let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        let man: RunManifest =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: not a run manifest: {e}", p.display())))?;
        loaded.push((p.display().to_string(), man));
    }
    let dir = out_dir(&args.out, root, "report")?;
    let hashes: std::collections::BTreeSet<&str> = loaded.iter().map(|(_, m)| m.config_hash.as_str()).collect();
    let mut warnings = Vec::new();
    if hashes.len() > 1 {
        let w = format!("manifests have {} different config hashes", hashes.len());
        eprintln!("warning: {w}");
        warnings.push(w);
    }

    let cols = [
        "manifest",
        "command",
        "config_hash",
        "support_mult",
        "beta",
        "samples",
        "failed",
        "negative_raw",
        "negative_smooth",
        "negative_pgs",
        "loss_u_ratio_mean",
    ];
    let cell = |v: &Value| match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let rows: Vec<Vec<String>> = loaded
        .iter()
        .map(|(path, m)| {
            let a = &m.aggregate;
            vec![
                path.clone(),
                m.command.clone(),
                m.config_hash.chars().take(12).collect(),
                cell(&m.config["support_mult"]),
                cell(&m.config["pgs"]["beta_tilde"]),
                cell(&a["samples"]),
                cell(&a["failed"]),
                cell(&a["negative_fraction_raw"]),
                cell(&a["negative_fraction_before"]),
                cell(&a["negative_fraction_after"]),
                cell(&a["loss_u_ratio_mean"]),
            ]
        })
        .collect();

    let mut csv = cols.join(",") + "\n";
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let widths: Vec<usize> = (0..cols.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([cols[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut text = line(cols.to_vec()) + "\n";
    for r in &rows {
        text.push_str(&line(r.iter().map(String::as_str).collect()));
        text.push('\n');
    }
    for w in &warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    print!("{text}");

    let mut m = manifest("report", json!({}), loaded.iter().map(|(p, _)| p.clone()).collect());
    m.errors = warnings;
    m.aggregate = json!({ "rows": rows.len() });
    let outcome = (|| {
        fs::write(dir.join("report.csv"), csv).map_err(|e| Failure::Compute(e.to_string()))?;
        fs::write(dir.join("report.txt"), text).map_err(|e| Failure::Compute(e.to_string()))
    })();
    finish(&dir, m, outcome)
}
