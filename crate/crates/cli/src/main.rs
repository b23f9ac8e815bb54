mod config;
mod pgm;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lowdose::dosesim::{drf_class, generate_dataset, read_dataset, write_dataset, Dataset, Split, DRF_LEVELS};
use lowdose::gradsuite::{run_suite, TOLERANCE};
use lowdose::metrics::{evaluate, evaluate_low_dose, MetricsReport};
use lowdose::trainer::{fit_with, load_checkpoint, run_ablation, save_checkpoint, TrainState, Variant};
use lowdose::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lowdose", version, about = "Synthetic low-dose PET recovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize phantoms and their low-dose scans.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model, writing a checkpoint and a log line every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or only the low-dose input with `--ckpt none`.
    Eval {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        drf: Option<u32>,
        /// Directory for mid-axial slice images.
        #[arg(long)]
        slices: Option<PathBuf>,
        /// Directory for the report as text and JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train and score every model variant on the same data and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

/// Failure that is not a library error but still has a fixed exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                Error::Io { .. } => 3,
                Error::NumericalAbort { .. } | Error::NonFinite { .. } => 4,
                Error::Incompatible(_) | Error::Version { .. } | Error::Format { .. } => 5,
                Error::Shape(_) | Error::Graph(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out_dir, seed } => gen_data(config, out_dir, seed),
        Command::Train {
            config,
            data,
            out,
            variant,
            resume,
        } => train(config, data, out, variant, resume),
        Command::Eval {
            ckpt,
            data,
            split,
            drf,
            slices,
            out,
        } => eval(&ckpt, &data, split.into(), drf, slices, out),
        Command::Gradcheck { op, inject_fault } => gradcheck(op, inject_fault),
        Command::Ablate { config, data, out } => ablate(config, data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Exit(2, format!("--{name} is required (or set paths.{name} in the config)")).into())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(read_dataset(dir)?)
}

fn gen_data(config: Option<PathBuf>, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(seed) = seed {
        cfg.data.seed = seed;
    }
    let out = required(out_dir, &cfg.paths.out, "out-dir")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Exit(3, format!("parent directory {} does not exist", parent.display())).into());
        }
    }
    let data = generate_dataset(&cfg.data)?;
    write_dataset(&data, &out)?;
    let m = &data.manifest;
    let pairs: usize = m.volumes.iter().map(|v| v.low_dose.len()).sum();
    println!(
        "{} standard-dose volumes ({} train / {} val / {} test), {pairs} low-dose scans at DRF {:?}, extent {}, written to {}",
        m.volumes.len(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        m.split(Split::Test).len(),
        cfg.data.drfs,
        m.extent,
        out.display()
    );
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "last.ckpt";
pub const LOG_FILE: &str = "train.jsonl";

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    variant: Option<Variant>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(v) = variant {
        cfg.train.variant = v;
        cfg.validate()?;
    }
    let data_dir = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.out, "out")?;
    let state = match &resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if config.is_some() && (state.train != cfg.train || state.net != cfg.net) {
                return Err(Error::Incompatible(format!(
                    "{} was trained with a different configuration",
                    path.display()
                ))
                .into());
            }
            if state.progress.finished {
                eprintln!(
                    "notice: {} is a finished run ({} epochs); nothing to do",
                    path.display(),
                    state.progress.epoch
                );
                return Ok(());
            }
            state
        }
        None => TrainState::new(cfg.net.clone(), cfg.train.clone())?,
    };
    let dataset = load_data(&data_dir)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (state, _) = fit_with(state, &dataset, |s, entry| {
        let line = entry.to_json_line();
        println!("{line}");
        writeln!(log, "{line}").map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        save_checkpoint(s, &ckpt)
    })?;
    eprintln!(
        "finished after {} epochs; checkpoint {}",
        state.progress.epoch,
        ckpt.display()
    );
    Ok(())
}

fn eval(
    ckpt: &str,
    data: &Path,
    split: Split,
    drf: Option<u32>,
    slices: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let drfs = match drf {
        Some(d) => {
            drf_class(d).map_err(|e| Exit(2, e.to_string()))?;
            vec![d]
        }
        None => DRF_LEVELS.to_vec(),
    };
    let mut state = match ckpt {
        "none" => None,
        path => Some(load_checkpoint(Path::new(path))?),
    };
    let dataset = load_data(data)?;
    if let Some(s) = &state {
        if s.net.volume_extent != dataset.manifest.extent {
            return Err(Error::Incompatible(format!(
                "checkpoint expects extent {}, dataset has {}",
                s.net.volume_extent, dataset.manifest.extent
            ))
            .into());
        }
    }
    let report = match &mut state {
        None => evaluate_low_dose(&dataset, split, &drfs)?,
        Some(s) => {
            let label = s.train.variant.label();
            evaluate(&dataset, split, &drfs, label, |x, _| Ok(s.predict(x)?.refined))?
        }
    };
    print!("{}", report.to_table());
    if let Some(dir) = out {
        write_report(&report, &dir)?;
    }
    if let Some(dir) = slices {
        write_slices(&dataset, state.as_mut(), split, &drfs, &dir)?;
    }
    Ok(())
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.txt"), report.to_table()).context("writing report.txt")?;
    fs::write(dir.join("report.json"), report.to_json()).context("writing report.json")?;
    Ok(())
}

/// Mid-axial slices named `v<id>_drf<drf>_<kind>.pgm`, all on the
/// normalized intensity scale.
fn write_slices(
    dataset: &Dataset,
    mut state: Option<&mut TrainState>,
    split: Split,
    drfs: &[u32],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for &v in &dataset.manifest.split(split) {
        let id = dataset.manifest.volumes[v].id;
        for &drf in drfs {
            let pair = dataset.normalized_pair(v, drf)?;
            let mut images = vec![("lpet", pair.x.clone()), ("gt", pair.y_s)];
            if let Some(s) = state.as_deref_mut() {
                let p = s.predict(&pair.x)?;
                images.push(("coarse", p.coarse));
                images.push(("refined", p.refined));
            }
            for (kind, t) in images {
                pgm::write_mid_slice(&t, 1.0, &dir.join(format!("v{id:03}_drf{drf:03}_{kind}.pgm")))?;
            }
        }
    }
    Ok(())
}

fn gradcheck(op: Option<String>, inject_fault: bool) -> Result<()> {
    let rows = run_suite(op.as_deref(), inject_fault)?;
    println!("{:<32} {:>5} {:>7} {:>14}  result", "op", "seeds", "coords", "max rel err");
    for r in &rows {
        println!(
            "{:<32} {:>5} {:>7} {:>14.3e}  {}",
            r.op,
            r.seeds,
            r.coords,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(Exit(1, format!("{failed} of {} ops exceed {TOLERANCE:e}", rows.len())));
    }
    Ok(())
}

fn ablate(config: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let data_dir = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.out, "out")?;
    let dataset = load_data(&data_dir)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    println!("ablation: train seed {}, dataset {}", cfg.train.seed, data_dir.display());
    let mut logs: Vec<(Variant, File)> = Vec::new();
    let report = run_ablation(&dataset, &cfg.net, &cfg.train, |variant, _, entry| {
        if logs.last().is_none_or(|(v, _)| *v != variant) {
            let path = out.join(format!("{}.jsonl", variant.name()));
            let file = File::create(&path).map_err(|e| Error::Io { path, source: e })?;
            logs.push((variant, file));
        }
        let line = entry.to_json_line();
        println!("{} {line}", variant.name());
        let file = &mut logs.last_mut().expect("pushed above").1;
        writeln!(file, "{line}").map_err(|e| Error::Io {
            path: out.join(format!("{}.jsonl", variant.name())),
            source: e,
        })
    })?;
    let table = report.to_table();
    print!("{table}");
    fs::write(out.join("ablation.txt"), &table).context("writing ablation.txt")?;
    let reports: Vec<MetricsReport> = report.entries.iter().filter_map(|e| e.report.clone()).collect();
    fs::write(out.join("ablation.json"), MetricsReport::merge(&reports).to_json()).context("writing ablation.json")?;
    if report.failed() {
        bail!(Exit(4, "at least one variant failed; see the table".into()));
    }
    Ok(())
}
