//! `bupm`: synthesize data, train, verify, localize, evaluate and gradient-check from
//! the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bupm::checkpoint::Checkpoint;
use bupm::dataset::{load_pairs, write_dataset};
use bupm::eval::{evaluate_manifest, prepare_image};
use bupm::gradcheck::{check_names, run_seed, TOLERANCE};
use bupm::image::Image;
use bupm::localize::{draw_box, localize, BoundingBox, DEFAULT_MASK_THRESHOLD};
use bupm::manifest::{Manifest, Split};
use bupm::synth::{DatasetConfig, SynthConfig, SynthDataset};
use bupm::train::{
    train_phase1, train_phase2a, train_phase2b, LogEntry, PairSet, Phase, TrainConfig,
};
use bupm::verify::{verify, VerificationRecord, DEFAULT_THRESHOLD};
use bupm::{Error, Model, ModelConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "bupm",
    version,
    about = "Image-to-GPS verification by bottom-up pattern matching"
)]
struct Cli {
    /// JSON file whose values override the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, env = "BUPM_THREADS", default_value_t = 1)]
    threads: usize,
    /// More log output; repeat for debug and trace.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural panoramas, synthetic queries and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        panoramas: usize,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        pano_height: usize,
        #[arg(long, default_value_t = 256)]
        pano_width: usize,
        #[arg(long, default_value_t = 64)]
        query_size: usize,
    },
    /// Train from a manifest. An existing checkpoint at --ckpt is resumed.
    Train {
        #[arg(long, value_enum, default_value_t = PhaseArg::All)]
        phase: PhaseArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Append per-epoch JSON lines here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score one query against one reference.
    Verify {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Write both soft masks as 8-bit graymaps into this directory.
        #[arg(long)]
        emit_masks: Option<PathBuf>,
    },
    /// Locate the query's content in the reference panorama.
    Localize {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
        mask_threshold: f64,
        /// Write the panorama with the box drawn on it.
        #[arg(long)]
        annotated: Option<PathBuf>,
    },
    /// AUC, average precision and curves over a manifest.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Resize queries to this square size; otherwise they are only made divisible.
        #[arg(long)]
        query_size: Option<usize>,
    },
    /// Finite-difference checks of every differentiable op and the full score.
    Gradcheck {
        #[arg(long, default_value = "toy", value_parser = ["toy"])]
        size: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(clap::Args, Debug)]
struct PairArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Resize the query to this square size; otherwise it is only made divisible.
    #[arg(long)]
    query_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
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

/// Values read from `--config`; anything present wins over the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    synth: Option<SynthOverrides>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthOverrides {
    panoramas: Option<usize>,
    samples: Option<usize>,
    pano_height: Option<usize>,
    pano_width: Option<usize>,
    query_size: Option<usize>,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::InvalidArgument(_)) => EXIT_USAGE,
            Failure::Lib(Error::Io { .. } | Error::Decode { .. } | Error::Format { .. }) => EXIT_IO,
            Failure::Lib(Error::Divergence { .. }) => EXIT_DIVERGENCE,
            Failure::Check(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Settings {
    seed: u64,
    file: FileConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => read_config(path)?,
        None => FileConfig::default(),
    };
    let seed = file.seed.unwrap_or(cli.seed);
    let threads = file.threads.unwrap_or(cli.threads);
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    log::info!("seed {seed}, threads {threads}");
    let settings = Settings { seed, file };
    match cli.command {
        Command::Synth {
            out,
            panoramas,
            samples,
            pano_height,
            pano_width,
            query_size,
        } => {
            let o = settings.file.synth.as_ref();
            let pick = |v: Option<usize>, flag: usize| v.unwrap_or(flag);
            cmd_synth(
                &settings,
                &out,
                DatasetConfig {
                    panoramas: pick(o.and_then(|s| s.panoramas), panoramas),
                    samples: pick(o.and_then(|s| s.samples), samples),
                    pano_height: pick(o.and_then(|s| s.pano_height), pano_height),
                    pano_width: pick(o.and_then(|s| s.pano_width), pano_width),
                    synth: SynthConfig {
                        query_size: pick(o.and_then(|s| s.query_size), query_size),
                        ..SynthConfig::default()
                    },
                    seed,
                },
            )
        }
        Command::Train {
            phase,
            data,
            ckpt,
            log,
        } => cmd_train(&settings, phase, &data, &ckpt, log.as_deref()),
        Command::Verify {
            pair,
            threshold,
            emit_masks,
        } => cmd_verify(&pair, threshold, emit_masks.as_deref()),
        Command::Localize {
            pair,
            mask_threshold,
            annotated,
        } => cmd_localize(&pair, mask_threshold, annotated.as_deref()),
        Command::Evaluate {
            data,
            ckpt,
            out,
            split,
            query_size,
        } => cmd_evaluate(&data, &ckpt, &out, split.map(Split::from), query_size),
        Command::Gradcheck { size: _, seeds } => cmd_gradcheck(seed, seeds),
    }
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string(value).expect("records serialize")
    );
}

fn cmd_synth(settings: &Settings, out: &Path, cfg: DatasetConfig) -> CliResult<()> {
    let data = SynthDataset::generate(&cfg)?;
    let manifest = write_dataset(&data, out, settings.seed)?;
    log::info!(
        "wrote {} panoramas, {} positives and {} manifest records to {}",
        data.panoramas.len(),
        data.records.len(),
        manifest.records.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    seed: u64,
    #[serde(flatten)]
    entry: &'a LogEntry,
}

fn cmd_train(
    settings: &Settings,
    phase: PhaseArg,
    data: &Path,
    ckpt_path: &Path,
    log_path: Option<&Path>,
) -> CliResult<()> {
    let manifest = Manifest::load(data)?;
    let train = load_pairs(&manifest, Split::Train)?;
    let val = load_pairs(&manifest, Split::Val)?;
    if train.samples.is_empty() {
        return Err(Failure::Usage(format!(
            "{} has no training positives",
            data.display()
        )));
    }
    let mut cfg = settings
        .file
        .train
        .clone()
        .unwrap_or_else(TrainConfig::desk);
    cfg.seed = settings.seed;
    let mut ckpt = if ckpt_path.exists() {
        log::info!("resuming from {}", ckpt_path.display());
        Checkpoint::load(ckpt_path)?
    } else {
        let model_cfg = settings.file.model.clone().unwrap_or_default();
        Checkpoint::new(Model::init(model_cfg, settings.seed)?)
    };
    let phases: &[Phase] = match phase {
        PhaseArg::One => &[Phase::One],
        PhaseArg::Two => &[Phase::TwoA, Phase::TwoB],
        PhaseArg::All => &[Phase::One, Phase::TwoA, Phase::TwoB],
    };
    let start = ckpt
        .phase
        .and_then(|p| phases.iter().position(|&q| q == p))
        .unwrap_or(0);
    let mut log_file = match log_path {
        Some(p) => Some(BufWriter::new(
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?,
        )),
        None => None,
    };
    let seed = settings.seed;
    for &p in &phases[start..] {
        let mut progress = ckpt.resume(p);
        let mut sink = |entry: &LogEntry| -> bupm::Result<()> {
            if let (Some(f), Some(path)) = (log_file.as_mut(), log_path) {
                let line = serde_json::to_string(&LogLine { seed, entry }).expect("log serializes");
                writeln!(f, "{line}")
                    .and_then(|_| f.flush())
                    .map_err(|e| Error::Io {
                        path: path.to_path_buf(),
                        source: e,
                    })?;
            }
            Ok(())
        };
        let model = &mut ckpt.model;
        run_phase(p, model, &train, &val, &cfg, &mut progress, &mut sink)?;
        ckpt.phase = Some(p);
        ckpt.metrics
            .insert(format!("best_val_{}", p.as_str()), progress.best_val);
        ckpt.progress = progress;
        ckpt.save(ckpt_path)?;
        log::info!(
            "phase {} done, checkpoint {}",
            p.as_str(),
            ckpt_path.display()
        );
    }
    Ok(())
}

fn run_phase(
    phase: Phase,
    model: &mut Model,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    progress: &mut bupm::train::PhaseProgress,
    sink: &mut dyn FnMut(&LogEntry) -> bupm::Result<()>,
) -> bupm::Result<()> {
    match phase {
        Phase::One => train_phase1(model, train, val, cfg, progress, sink),
        Phase::TwoA => train_phase2a(model, train, val, cfg, progress, sink),
        Phase::TwoB => train_phase2b(model, train, val, cfg, progress, sink),
    }
}

struct LoadedPair {
    model: Model,
    query: Image,
    reference: Image,
    /// Extents of the reference as stored on disk.
    original: (usize, usize),
}

fn load_pair(pair: &PairArgs) -> CliResult<LoadedPair> {
    let model = Checkpoint::load(&pair.ckpt)?.model;
    let d = model.downsample_factor();
    let query = prepare_image(&pair.query, d, pair.query_size)?;
    let raw = Image::load(&pair.reference)?;
    let original = (raw.height(), raw.width());
    let reference = prepare_image(&pair.reference, d, None)?;
    Ok(LoadedPair {
        model,
        query,
        reference,
        original,
    })
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn cmd_verify(pair: &PairArgs, threshold: f64, masks: Option<&Path>) -> CliResult<()> {
    let loaded = load_pair(pair)?;
    let v = verify(&loaded.query, &loaded.reference, &loaded.model, threshold)?;
    if let Some(dir) = masks {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Image::from_tensor(&v.mask_reference.0)?.save(dir.join("mask_reference.pgm"))?;
        Image::from_tensor(&v.mask_query.0)?.save(dir.join("mask_query.pgm"))?;
    }
    print_json(&VerificationRecord {
        query_path: display(&pair.query),
        ref_path: display(&pair.reference),
        score: v.score,
        label: u8::from(v.label),
    });
    Ok(())
}

#[derive(Serialize)]
struct LocalizationRecord {
    query_path: String,
    ref_path: String,
    score: f64,
    result: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<BoundingBox>,
}

/// Maps a box on the resized reference back to the stored reference's pixels.
fn rescale_box(b: &BoundingBox, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
    if from == to {
        return *b;
    }
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    let y0 = ((b.y0 as f64 * sy).round() as usize).min(to.0 - 1);
    let height = ((b.height as f64 * sy).round() as usize).clamp(1, to.0 - y0);
    let x0 = ((b.x0 as f64 * sx).round() as usize) % to.1;
    let width = ((b.width as f64 * sx).round() as usize).clamp(1, to.1);
    BoundingBox {
        x0,
        y0,
        width,
        height,
        wrap: x0 + width > to.1,
    }
}

fn cmd_localize(pair: &PairArgs, mask_threshold: f64, annotated: Option<&Path>) -> CliResult<()> {
    let loaded = load_pair(pair)?;
    let v = verify(
        &loaded.query,
        &loaded.reference,
        &loaded.model,
        DEFAULT_THRESHOLD,
    )?;
    let (h, w) = (loaded.reference.height(), loaded.reference.width());
    let bbox = localize(&v.mask_reference, h, w, mask_threshold, true)?
        .map(|b| rescale_box(&b, (h, w), loaded.original));
    if let Some(path) = annotated {
        let pano = Image::load(&pair.reference)?;
        let out = match &bbox {
            Some(b) => draw_box(&pano, b),
            None => pano,
        };
        out.save(path)?;
    }
    print_json(&LocalizationRecord {
        query_path: display(&pair.query),
        ref_path: display(&pair.reference),
        score: v.score,
        result: if bbox.is_some() {
            "box"
        } else {
            "no-localization"
        },
        bbox,
    });
    Ok(())
}

fn cmd_evaluate(
    data: &Path,
    ckpt: &Path,
    out: &Path,
    split: Option<Split>,
    query_size: Option<usize>,
) -> CliResult<()> {
    let model = Checkpoint::load(ckpt)?.model;
    let manifest = Manifest::load(data)?;
    let evaluation = evaluate_manifest(&model, &manifest, split, query_size)?;
    evaluation.write(out)?;
    print_json(&evaluation.report);
    Ok(())
}

fn cmd_gradcheck(base_seed: u64, seeds: u64) -> CliResult<()> {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let names = check_names();
    let mut worst = vec![0.0f64; names.len()];
    for s in 0..seeds {
        for (k, r) in run_seed(base_seed.wrapping_add(s))?.into_iter().enumerate() {
            worst[k] = worst[k].max(r.rel_error);
        }
    }
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0);
    let mut failed = 0;
    for (name, err) in names.iter().zip(&worst) {
        let ok = *err < TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{name:width$}  {err:.3e}  {}",
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} gradient checks exceed relative error {TOLERANCE:e}"
        )));
    }
    Ok(())
}
