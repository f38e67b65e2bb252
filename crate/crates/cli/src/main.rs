//! `cmfplan`: phantom data, training, planning, simulation and evaluation
//! from the command line.
//!
//! Exit codes: 0 ok, 1 usage, 2 missing or invalid input, 3 training
//! diverged, 4 checkpoint mismatch, 5 internal invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cmf_core::acmt::{toy_gradient_check, Direction, GRADCHECK_SEED};
use cmf_core::bony_planner::{BonePredictor, OraclePlanner, PlanningCase};
use cmf_core::config::Config;
use cmf_core::eval::{self, BaselineModel, EvalReport};
use cmf_core::facial_simulator::{simulate, FaceSimulator, TissueOracleSimulator};
use cmf_core::geom::BonyPlan;
use cmf_core::io::{
    load_acmt, load_baseline, load_checkpoint, load_json, read_obj, read_ply, save_json, save_ply, Checkpoint,
    PlanFile, PlyData,
};
use cmf_core::phantom::{build_dataset, PhantomCase};
use cmf_core::pipeline::{self, Role};
use cmf_core::plan_search::{self, SearchConfig, Selection};
use cmf_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_INVARIANT: u8 = 5;

/// Threshold on the maximum relative gradient error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cmfplan", version, about = "Soft-tissue driven jaw surgery planning on point clouds (units: mm)")]
struct Cli {
    /// Worker threads for training, planning and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Bp,
    Fs,
    Baseline,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Bp => Role::Bp,
            RoleArg::Fs => Role::Fs,
            RoleArg::Baseline => Role::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset: one JSON file per case under OUT/train and OUT/test.
    GenData {
        /// Config file whose [phantom] section describes the phantoms.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write flipped/translated copies of every training case.
        #[arg(long)]
        augment: bool,
    },
    /// Train one network; writes the checkpoint and a loss CSV next to it.
    Train {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Dataset directory (its train/ subdirectory if present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-verified planning of one case.
    Plan {
        #[arg(long)]
        case: PathBuf,
        /// Face → bone checkpoint, or `oracle` to use the case's known post-operative bone.
        #[arg(long)]
        bp: String,
        /// Bone → face checkpoint, or `oracle` for the synthetic tissue model.
        #[arg(long)]
        fs: String,
        /// Number of candidate plans.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Every candidate with its score; the winner is flagged.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Tissue kernel width for `--fs oracle` on cases that do not carry one.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Simulate the face a plan produces; writes the mesh (PLY) and per-point errors (CSV).
    Simulate {
        #[arg(long)]
        case: PathBuf,
        /// Plan JSON, or `identity`.
        #[arg(long)]
        plan: String,
        /// Bone → face checkpoint, or `oracle`.
        #[arg(long)]
        fs: String,
        #[arg(long)]
        out: PathBuf,
        /// Distance of each simulated face point to the desired face.
        #[arg(long)]
        errors: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Evaluate every available method on a test set.
    Evaluate {
        /// Dataset directory (its test/ subdirectory if present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bp: Option<String>,
        #[arg(long)]
        fs: Option<String>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-point distances as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of the transfer network's gradient on a small model.
    Gradcheck {
        #[arg(long, default_value_t = GRADCHECK_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long)]
        standardize: bool,
    },
    /// Check a case, plan, checkpoint, report, config or mesh file.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print the configuration.
    Config {
        /// Print every setting with its default value.
        #[arg(long)]
        dump: bool,
        /// Start from the small desk-scale preset.
        #[arg(long)]
        desk: bool,
    },
}

/// Bad or missing user input: exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::TrainingDiverged { .. } => EXIT_DIVERGED,
                Error::CheckpointMismatch(_) => EXIT_MISMATCH,
                Error::Invariant(_) | Error::State(_) => EXIT_INVARIANT,
                _ => EXIT_INPUT,
            };
        }
        if cause.is::<InputError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<toml::de::Error>()
        {
            return EXIT_INPUT;
        }
    }
    EXIT_INVARIANT
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVARIANT);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData {
            spec,
            train,
            test,
            out,
            seed,
            augment,
        } => gen_data(spec.as_deref(), train, test, &out, seed, augment),
        Command::Train { role, data, config, out } => train(role.into(), &data, config.as_deref(), &out),
        Command::Plan {
            case,
            bp,
            fs,
            n,
            seed,
            out,
            audit,
            sigma,
        } => plan(&case, &bp, &fs, n, seed, &out, audit.as_deref(), sigma),
        Command::Simulate {
            case,
            plan,
            fs,
            out,
            errors,
            sigma,
        } => simulate_cmd(&case, &plan, &fs, &out, errors.as_deref(), sigma),
        Command::Evaluate {
            data,
            bp,
            fs,
            baseline,
            config,
            out,
            csv,
        } => evaluate(&data, bp.as_deref(), fs.as_deref(), baseline.as_deref(), config.as_deref(), &out, csv.as_deref()),
        Command::Gradcheck { seed, step, standardize } => gradcheck(seed, step, standardize),
        Command::Validate { files } => validate(&files),
        Command::Config { dump, desk } => {
            if !dump {
                return Err(input_error("nothing to do; pass --dump to print the configuration"));
            }
            let cfg = if desk { Config::desk() } else { Config::default() };
            print!("{}", toml::to_string_pretty(&cfg)?);
            Ok(0)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Config>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Config::desk(),
    };
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn case_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("case_{i:05}.json"))
}

fn gen_data(spec: Option<&Path>, n_train: usize, n_test: usize, out: &Path, seed: u64, augment: bool) -> Result<u8> {
    let cfg = load_config(spec)?;
    let ds = build_dataset(&cfg.phantom, n_train, n_test, augment, seed)?;
    for (sub, cases) in [("train", &ds.train), ("test", &ds.test)] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, case) in cases.iter().enumerate() {
            let path = case_path(&dir, i);
            save_json(&path, case).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    eprintln!("wrote {} train and {} test cases to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(0)
}

/// Every case file in `dir/sub`, or in `dir` itself if there is no such
/// subdirectory, in file-name order.
fn load_cases(dir: &Path, sub: &str) -> Result<Vec<PhantomCase>> {
    let nested = dir.join(sub);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| input_error(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input_error(format!("no case files (*.json) in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let case: PhantomCase = load_json(p).with_context(|| format!("reading case {}", p.display()))?;
            case.validate().with_context(|| format!("invalid case {}", p.display()))?;
            Ok(case)
        })
        .collect()
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn train(role: Role, data: &Path, config: Option<&Path>, out: &Path) -> Result<u8> {
    let cfg = load_config(config)?;
    let cases = load_cases(data, "train")?;
    let (model, history) = pipeline::train_role(role, &cfg, &cases, |e, l| eprintln!("{} epoch {e} loss {l:.6}", role.name()))?;
    save_json(out, &Checkpoint::new(model)).with_context(|| format!("writing {}", out.display()))?;
    let csv = loss_csv_path(out);
    fs::write(&csv, pipeline::loss_csv(&history)).with_context(|| format!("writing {}", csv.display()))?;
    eprintln!("wrote {} and {}", out.display(), csv.display());
    Ok(0)
}

/// A case file holding either a phantom case or a bare planning case; the
/// tissue kernel width comes with phantom cases.
fn load_case(path: &Path) -> Result<(PlanningCase, Option<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading case {}", path.display()))?;
    let (case, sigma) = match serde_json::from_str::<PhantomCase>(&text) {
        Ok(pc) => (pc.case, Some(pc.sigma_mm)),
        Err(phantom_err) => match serde_json::from_str::<PlanningCase>(&text) {
            Ok(case) => (case, None),
            Err(_) => return Err(anyhow!(phantom_err).context(format!("parsing case {}", path.display()))),
        },
    };
    case.validate().with_context(|| format!("invalid case {}", path.display()))?;
    Ok((case, sigma))
}

fn planner(spec: &str) -> Result<Box<dyn BonePredictor>> {
    Ok(if spec == "oracle" {
        Box::new(OraclePlanner)
    } else {
        Box::new(load_acmt(Path::new(spec), Direction::FaceToBone)?)
    })
}

fn simulator(spec: &str, sigma: Option<f64>) -> Result<Box<dyn FaceSimulator>> {
    if spec == "oracle" {
        let sigma = sigma.ok_or_else(|| input_error("--fs oracle needs a phantom case or --sigma"))?;
        Ok(Box::new(TissueOracleSimulator { sigma }))
    } else {
        Ok(Box::new(load_acmt(Path::new(spec), Direction::BoneToFace)?))
    }
}

#[allow(clippy::too_many_arguments)]
fn plan(
    case_file: &Path,
    bp: &str,
    fs_spec: &str,
    n: usize,
    seed: u64,
    out: &Path,
    audit: Option<&Path>,
    sigma: Option<f64>,
) -> Result<u8> {
    if n == 0 {
        return Err(input_error("--n must be at least 1"));
    }
    let (case, case_sigma) = load_case(case_file)?;
    let planner = planner(bp)?;
    let sim = simulator(fs_spec, sigma.or(case_sigma))?;
    let cfg = SearchConfig {
        candidates: n,
        seed,
        ..SearchConfig::default()
    };
    let selection = plan_search::run(planner.as_ref(), sim.as_ref(), &case, &cfg)?;
    save_json(out, &PlanFile::new(selection.plan().clone())).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = audit {
        save_json(path, &selection).with_context(|| format!("writing {}", path.display()))?;
    }
    for (i, r) in selection.results.iter().enumerate() {
        eprintln!("candidate {i}: score {:.6} mm{}", r.score, if r.winner { " (selected)" } else { "" });
    }
    Ok(0)
}

fn simulate_cmd(
    case_file: &Path,
    plan_spec: &str,
    fs_spec: &str,
    out: &Path,
    errors: Option<&Path>,
    sigma: Option<f64>,
) -> Result<u8> {
    let (case, case_sigma) = load_case(case_file)?;
    let plan = if plan_spec == "identity" {
        BonyPlan::identity_for(&case.pre_bone)
    } else {
        load_json::<PlanFile>(Path::new(plan_spec))
            .with_context(|| format!("reading plan {plan_spec}"))?
            .segments
    };
    let sim = simulator(fs_spec, sigma.or(case_sigma))?;
    let result = simulate(sim.as_ref(), &case, &plan)?;
    save_ply(
        out,
        &PlyData {
            vertices: result.mesh.vertices.clone(),
            faces: result.mesh.triangles.clone(),
            ..PlyData::default()
        },
    )
    .with_context(|| format!("writing {}", out.display()))?;
    let face = result.sampled_face();
    let mut csv = String::from("point,distance_mm\n");
    let mut total = 0.0;
    for (i, (a, b)) in face.coords.iter().zip(&case.desired_face.coords).enumerate() {
        let d = (a - b).norm();
        total += d;
        csv.push_str(&format!("{i},{d}\n"));
    }
    if let Some(path) = errors {
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("mean distance to the desired face: {:.6} mm", total / face.len() as f64);
    Ok(0)
}

fn evaluate(
    data: &Path,
    bp: Option<&str>,
    fs_spec: Option<&str>,
    baseline: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    csv: Option<&Path>,
) -> Result<u8> {
    let cfg = load_config(config)?;
    let cases = load_cases(data, "test")?;
    let planner = bp.map(planner).transpose()?;
    let sim = fs_spec.map(|s| simulator(s, Some(cfg.phantom.sigma_mm))).transpose()?;
    let baseline: Option<BaselineModel> = baseline.map(load_baseline).transpose()?;
    let methods = eval::Methods {
        baseline: baseline.as_ref(),
        bp: planner.as_deref(),
        fs: sim.as_deref(),
        search: cfg.search,
        include_identity: cfg.eval.include_identity,
        exact_max_n: cfg.eval.exact_max_n,
        distance: cfg.eval.distance,
    };
    let report = eval::evaluate(&methods, &cases, serde_json::to_value(&cfg)?)?;
    save_json(out, &report).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = csv {
        let labels: Vec<_> = cases.iter().map(|c| c.case.pre_bone.labels.clone()).collect();
        fs::write(path, report.distances_csv(&labels)).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", report.table());
    Ok(0)
}

fn gradcheck(seed: u64, step: f64, standardize: bool) -> Result<u8> {
    if !(step > 0.0) {
        return Err(input_error("--step must be positive"));
    }
    let err = toy_gradient_check(seed, standardize, step)?;
    println!("max relative gradient error: {err:.3e} (threshold {GRADCHECK_TOL:.0e})");
    if err < GRADCHECK_TOL {
        Ok(0)
    } else {
        eprintln!("error: gradient check failed");
        Ok(EXIT_INVARIANT)
    }
}

/// Validates one file and names what it holds.
fn validate_file(path: &Path) -> Result<&'static str> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ply" => {
            let data = read_ply(fs::File::open(path)?)?;
            if data.faces.is_empty() {
                data.point_set()?;
                Ok("point cloud")
            } else {
                data.mesh()?;
                Ok("mesh")
            }
        }
        "obj" => {
            read_obj(fs::File::open(path)?)?.validate()?;
            Ok("mesh")
        }
        "toml" => {
            load_config(Some(path))?;
            Ok("config")
        }
        "json" => validate_json(path),
        _ => Err(input_error(format!("unknown file type {}", path.display()))),
    }
}

fn validate_json(path: &Path) -> Result<&'static str> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let has = |key: &str| value.get(key).is_some();
    if has("format") {
        load_checkpoint(path)?;
        Ok("checkpoint")
    } else if has("gt_plan") {
        let case: PhantomCase = serde_json::from_value(value)?;
        case.validate()?;
        case.check_consistency()?;
        Ok("phantom case")
    } else if has("pre_bone") {
        let case: PlanningCase = serde_json::from_value(value)?;
        case.validate()?;
        Ok("planning case")
    } else if has("segments") {
        let plan: PlanFile = serde_json::from_value(value)?;
        plan.segments.validate()?;
        Ok("plan")
    } else if has("winner") {
        let sel: Selection = serde_json::from_value(value)?;
        check_selection(&sel)?;
        Ok("audit log")
    } else if has("methods") {
        let report: EvalReport = serde_json::from_value(value)?;
        check_report(&report)?;
        Ok("evaluation report")
    } else if has("train") && has("test") {
        let ds: cmf_core::phantom::PhantomDataset = serde_json::from_value(value)?;
        for case in ds.train.iter().chain(&ds.test) {
            case.validate()?;
            case.check_consistency()?;
        }
        Ok("phantom dataset")
    } else {
        Err(input_error("unrecognized JSON document"))
    }
}

fn check_selection(sel: &Selection) -> Result<()> {
    if sel.winner >= sel.results.len() {
        bail!(Error::Invariant("winner index out of range".into()));
    }
    let flagged: Vec<usize> = (0..sel.results.len()).filter(|&i| sel.results[i].winner).collect();
    if flagged != [sel.winner] || plan_search::argmin_score(&sel.results) != Some(sel.winner) {
        bail!(Error::Invariant("flagged winner is not the lowest score".into()));
    }
    for r in &sel.results {
        r.plan.validate()?;
    }
    Ok(())
}

fn check_report(report: &EvalReport) -> Result<()> {
    for m in &report.methods {
        if m.per_case.len() != report.n_cases {
            bail!(Error::Invariant(format!("{} has {} cases, report says {}", m.name, m.per_case.len(), report.n_cases)));
        }
        if m.entire != eval::mean_std(&m.entire_values()) {
            bail!(Error::Invariant(format!("{} summary does not match its per-case values", m.name)));
        }
    }
    Ok(())
}

fn validate(files: &[PathBuf]) -> Result<u8> {
    let mut worst = 0u8;
    for path in files {
        match validate_file(path) {
            Ok(kind) => println!("{}: ok ({kind})", path.display()),
            Err(e) => {
                println!("{}: {e:#}", path.display());
                worst = worst.max(exit_code(&e));
            }
        }
    }
    Ok(worst)
}
