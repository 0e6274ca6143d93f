//! `kneealign` command line: synthesize phantoms, train the two stages,
//! localize, measure and evaluate.

mod run_config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use kneealign::alignment::{measure, write_measurements, MeasurementRow};
use kneealign::hourglass::{gradcheck_model, HourglassConfig, HourglassModel, TrainReport};
use kneealign::image::read_image;
use kneealign::landmarks::{read_pts, write_pts, LandmarkSet, Side};
use kneealign::metrics::{
    agreement, agreement_csv, bland_altman_svg, localization_csv, rp2c, rp2p, table1_text, table2_text,
    LocalizationErrorSummary, MethodAgreement,
};
use kneealign::pipeline::{as_left, localize, train_global, train_local};
use kneealign::synth::{make_dataset, Dataset};
use kneealign::tensor::gradcheck::operator_suite;
use kneealign::{Error, ErrorKind, Result};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "kneealign", version, about = "Knee alignment from landmark localization")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; KA_THREADS overrides.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Global,
    Local,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage; writes `<stage>.kaw`, its config sidecar and a loss trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Place every landmark on every dataset image.
    Localize {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `global.kaw` and `local.kaw`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// aTFA for every image, from the dataset's points or `--auto`'s.
    Measure {
        #[arg(long)]
        data: PathBuf,
        /// A `localize` output directory.
        #[arg(long)]
        auto: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization and agreement reports of `--auto` against the dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        auto: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write Bland-Altman plots.
        #[arg(long)]
        svg: bool,
    },
    /// Finite-difference checks of every operator and the full model loss.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = match e.kind() {
                ErrorKind::Validation => "validation",
                ErrorKind::Numerical => "numerical",
                ErrorKind::Io => "io",
            };
            eprintln!("error kind={kind} type={} message={:?}", e.name(), e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Numerical => 3,
        ErrorKind::Validation | ErrorKind::Io => 2,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("KA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("KA_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out, n, seed } => synth(&cfg, &out, n, seed),
        Command::Train { data, stage, out, seed } => train(&cfg, &data, stage, &out, seed),
        Command::Localize { data, models, out } => localize_all(&cfg, &data, &models, &out),
        Command::Measure { data, auto, out } => measure_all(&data, auto.as_deref(), &out),
        Command::Evaluate { data, auto, out, svg } => evaluate(&data, &auto, &out, svg),
        Command::Gradcheck { out, seed } => gradcheck(out.as_deref(), seed),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` is not a directory", path.display())))
    }
}

fn synth(cfg: &RunConfig, out: &Path, n: Option<usize>, seed: Option<u64>) -> Result<ExitCode> {
    let n = n.or(cfg.n).unwrap_or(200);
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let entries = make_dataset(out, n, &cfg.ranges, seed)?;
    println!("wrote {} phantoms to {}", entries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Every sample of the dataset, right knees flipped to left.
fn left_samples(ds: &Dataset) -> Result<Vec<(kneealign::image::GrayImage, LandmarkSet)>> {
    ds.load_all()?
        .into_iter()
        .map(|s| as_left(&s.image, &s.landmarks, &ds.schema))
        .collect()
}

fn loss_csv(r: &TrainReport) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in r.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.6}", i + 1);
    }
    s
}

fn train(cfg: &RunConfig, data: &Path, stage: Stage, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    require_dir(data, "--data")?;
    let ds = Dataset::open(data)?;
    let mut model_cfg = match stage {
        Stage::Global => cfg.global.clone(),
        Stage::Local => HourglassConfig {
            landmarks: ds.schema.landmark_count(),
            ..cfg.local.clone()
        },
    };
    if let Some(s) = seed.or(cfg.seed) {
        model_cfg.seed = s;
    }
    if stage == Stage::Local && (model_cfg.height, model_cfg.input_width) != (cfg.frame.height, cfg.frame.width) {
        return Err(Error::Config(format!(
            "local model input {}x{} differs from the frame {}x{}",
            model_cfg.height, model_cfg.input_width, cfg.frame.height, cfg.frame.width
        )));
    }
    let samples = left_samples(&ds)?;
    std::fs::create_dir_all(out)?;
    let mut model = HourglassModel::new(model_cfg)?;
    let roles = ds.schema.roles();
    let report = match stage {
        Stage::Global => train_global(&mut model, &samples, roles)?,
        Stage::Local => train_local(&mut model, &samples, roles, &cfg.frame, cfg.jitter_sd)?,
    };
    let path = out.join(format!("{}.kaw", stage.name()));
    model.save(&path)?;
    std::fs::write(out.join(format!("{}_loss.csv", stage.name())), loss_csv(&report))?;
    println!(
        "trained {} stage: {} epochs, final loss {:.4}, {:.1}s -> {}",
        stage.name(),
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.seconds,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

const LOCALIZE_HEADER: &str = "id,side,min_confidence,flags";

fn localize_all(cfg: &RunConfig, data: &Path, models: &Path, out: &Path) -> Result<ExitCode> {
    require_dir(data, "--data")?;
    require_dir(models, "--models")?;
    let ds = Dataset::open(data)?;
    let global = HourglassModel::load(&models.join("global.kaw"))?;
    let local = HourglassModel::load(&models.join("local.kaw"))?;
    if local.config.landmarks != ds.schema.landmark_count() {
        return Err(Error::SchemaMismatch(format!(
            "local model places {} landmarks, schema has {}",
            local.config.landmarks,
            ds.schema.landmark_count()
        )));
    }
    std::fs::create_dir_all(out.join("points"))?;
    let rows: Vec<String> = ds
        .entries
        .par_iter()
        .map(|e| -> Result<String> {
            let image = read_image(&ds.image_path(&e.id))?;
            let mirror = ds.schema.mirror().ok_or(Error::MissingMirrorTable)?;
            let view = match e.side {
                Side::Left => image.clone(),
                Side::Right => image.flipped_horizontally(),
            };
            let loc = localize(&view, &global, &local, &cfg.frame)?;
            let points = match e.side {
                Side::Left => loc.landmarks,
                Side::Right => loc.landmarks.mirrored(image.width(), mirror)?,
            };
            write_pts(&out.join("points").join(format!("{}.pts", e.id)), &points.points)?;
            let flag = if loc.low_confidence { "low_confidence" } else { "" };
            Ok(format!("{},{},{:.6},{flag}", e.id, e.side, loc.min_confidence))
        })
        .collect::<Result<_>>()?;
    let flagged = rows.iter().filter(|r| r.ends_with("low_confidence")).count();
    let mut text = String::from(LOCALIZE_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(out.join("localize.csv"), text)?;
    println!("localized {} images ({flagged} low confidence) -> {}", rows.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Flags per id from a `localize.csv`, if the directory has one.
fn read_flags(dir: &Path) -> Result<std::collections::HashMap<String, Vec<String>>> {
    let path = dir.join("localize.csv");
    let mut flags = std::collections::HashMap::new();
    if !path.exists() {
        return Ok(flags);
    }
    let text = std::fs::read_to_string(&path)?;
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format {
                path: path.clone(),
                message: format!("row {}: expected 4 fields", n + 1),
            });
        }
        let list = f[3].split(';').filter(|s| !s.is_empty()).map(str::to_string).collect();
        flags.insert(f[0].to_string(), list);
    }
    Ok(flags)
}

/// Ground-truth and candidate landmark sets, both flipped to left.
struct Paired {
    id: String,
    side: Side,
    gt: LandmarkSet,
    auto: LandmarkSet,
}

fn load_pairs(ds: &Dataset, auto_dir: &Path) -> Result<Vec<Paired>> {
    let mirror = ds.schema.mirror().ok_or(Error::MissingMirrorTable)?;
    (0..ds.entries.len())
        .into_par_iter()
        .map(|i| {
            let s = ds.load(i)?;
            let auto = LandmarkSet::new(
                read_pts(&auto_dir.join("points").join(format!("{}.pts", s.id)))?,
                s.landmarks.side,
            );
            ds.schema.check(&auto)?;
            let w = s.image.width();
            let left = |set: LandmarkSet| match set.side {
                Side::Left => Ok(set),
                Side::Right => set.mirrored(w, mirror),
            };
            Ok(Paired {
                id: s.id,
                side: s.landmarks.side,
                gt: left(s.landmarks)?,
                auto: left(auto)?,
            })
        })
        .collect()
}

fn measure_all(data: &Path, auto: Option<&Path>, out: &Path) -> Result<ExitCode> {
    require_dir(data, "--data")?;
    let source = auto.unwrap_or(data);
    require_dir(source, "--auto")?;
    let ds = Dataset::open(data)?;
    let flags = read_flags(source)?;
    let pairs = load_pairs(&ds, source)?;
    let roles = ds.schema.roles();
    let rows = pairs
        .iter()
        .map(|p| {
            let m = measure(&p.auto, roles)?;
            Ok(MeasurementRow {
                id: p.id.clone(),
                side: p.side,
                atfa_fts: m.atfa_fts,
                atfa_fnts: m.atfa_fnts,
                flags: flags.get(&p.id).cloned().unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write_measurements(&out.join("measurements.csv"), &rows)?;
    println!("measured {} images -> {}", rows.len(), out.join("measurements.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(data: &Path, auto: &Path, out: &Path, svg: bool) -> Result<ExitCode> {
    require_dir(data, "--data")?;
    require_dir(auto, "--auto")?;
    let ds = Dataset::open(data)?;
    let pairs = load_pairs(&ds, auto)?;
    let schema = &ds.schema;
    let mut per_image = String::from("id,rp2p,rp2c\n");
    let (mut p_err, mut c_err) = (Vec::new(), Vec::new());
    let (mut fts, mut fnts) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for p in &pairs {
        let e_p = rp2p(&p.auto, &p.gt, schema)?;
        let e_c = rp2c(&p.auto, &p.gt, schema)?;
        let _ = writeln!(per_image, "{},{e_p:.6},{e_c:.6}", p.id);
        p_err.push(e_p);
        c_err.push(e_c);
        let a = measure(&p.auto, schema.roles())?;
        let g = measure(&p.gt, schema.roles())?;
        fts.0.push(a.atfa_fts);
        fts.1.push(g.atfa_fts);
        fnts.0.push(a.atfa_fnts);
        fnts.1.push(g.atfa_fnts);
    }
    let summary = LocalizationErrorSummary::new(p_err, c_err)?;
    let method = |name: &str, (a, r): (Vec<f64>, Vec<f64>)| -> Result<MethodAgreement> {
        Ok(MethodAgreement {
            method: name.to_string(),
            report: agreement(&a, &r)?,
            pairs: a.into_iter().zip(r).collect(),
        })
    };
    let rows = vec![method("FTS", fts)?, method("FNTS", fnts)?];
    std::fs::create_dir_all(out)?;
    let t1 = table1_text("automated", &summary);
    let t2 = table2_text(&rows);
    std::fs::write(out.join("table1.txt"), &t1)?;
    std::fs::write(out.join("table2.txt"), &t2)?;
    std::fs::write(out.join("localization.csv"), localization_csv("automated", &summary))?;
    std::fs::write(out.join("agreement.csv"), agreement_csv(&rows))?;
    std::fs::write(out.join("per_image.csv"), per_image)?;
    if svg {
        for r in &rows {
            let name = format!("bland_altman_{}.svg", r.method.to_lowercase());
            std::fs::write(out.join(name), bland_altman_svg(r))?;
        }
    }
    print!("{t1}\n{t2}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(out: Option<&Path>, seed: u64) -> Result<ExitCode> {
    let mut reports = operator_suite(seed, 64, 1e-3)?;
    let tiny = HourglassConfig {
        depth: 2,
        width: 4,
        landmarks: 2,
        height: 8,
        input_width: 8,
        ..HourglassConfig::global_default()
    };
    reports.push(gradcheck_model(&tiny, 64, 1e-3, seed)?);
    let mut csv = String::from("operator,checked,max_rel_error,tolerance,passed\n");
    println!("{:<28} {:>7} {:>12} {:>9}  result", "operator", "checked", "max rel err", "tol");
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<28} {:>7} {:>12.3e} {:>9.1e}  {verdict}",
            r.name, r.checked, r.max_rel_error, r.tolerance
        );
        let _ = writeln!(csv, "{},{},{:e},{:e},{}", r.name, r.checked, r.max_rel_error, r.tolerance, r.passed());
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.csv"), csv)?;
    }
    if reports.iter().all(|r| r.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error kind=numerical type=GradientCheck message=\"finite-difference check failed\"");
        Ok(ExitCode::from(3))
    }
}
