use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use pathscan::inference::MagMode;
use pathscan::MagLevel;
use pathscan_cli::cmd::eval::{self, Grades, NextPredictor};
use pathscan_cli::cmd::predict::{self, Baseline, Generator, Length, Pat, PredictOpts};
use pathscan_cli::cmd::simplify::{read_scanpath_file, read_scanpaths};
use pathscan_cli::cmd::{stats, train};
use pathscan_cli::config::Config;
use pathscan_cli::corpus::{self, Corpus};
use pathscan_cli::output::{provenance, write_atomic};
use pathscan_cli::render::render_svg;
use pathscan_cli::{exit, CliError};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pathscan", version, about = "Pathologist viewing-behaviour modelling pipeline")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and PATHSCAN_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> pathscan_cli::Result<Config> {
        let mut cfg = Config::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.resolve();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct JobsArg {
    /// Worker threads for per-slide fan-out.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simplify raw viewport trajectories into scanpaths.
    Simplify {
        #[arg(long = "in")]
        input: PathBuf,
        /// Config file holding the `[simplify]` parameters.
        #[arg(long, alias = "config")]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        wsis: Option<usize>,
        #[arg(long)]
        readers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Replace the corpus files of a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the stage-1 heatmap model for one magnification.
    TrainHeatmap {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        /// Magnification factor (1, 2, 4, 10, 20 or 40).
        #[arg(long)]
        mag: u32,
        /// Training scanpaths; the corpus trajectories simplified when omitted.
        #[arg(long)]
        scanpaths: Option<PathBuf>,
        /// Restrict training to these slides (repeatable).
        #[arg(long = "wsi")]
        wsis: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; `<out>.log.csv` when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the stage-2 scanpath model.
    TrainScanpath {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        scanpaths: Option<PathBuf>,
        #[arg(long = "wsi")]
        wsis: Vec<String>,
        /// Stage-1 checkpoints (2X and/or 10X) that encode the input grids.
        #[arg(long)]
        stage1: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate scanpaths with a trained model or a random baseline.
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Training scanpaths (Random2 donors; length for `--n auto`).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Slides to predict (repeatable); all corpus slides when omitted.
        #[arg(long = "wsi")]
        wsis: Vec<String>,
        /// probmag, probmagargmax or priormag.
        #[arg(long)]
        mode: Option<MagMode>,
        /// `auto` or a fixation count.
        #[arg(long)]
        n: Option<Length>,
        /// Rollouts per slide.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        jobs: JobsArg,
    },
    /// Next-fixation evaluation over every ground-truth prefix.
    EvalNext {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<Baseline>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        jobs: JobsArg,
    },
    /// Whole-scanpath evaluation (NSS, AUC, SSS, TokSimScan).
    EvalScanpath {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory of `<wsi>.txt` grade maps; the corpus maps when omitted.
        #[arg(long)]
        grades: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        jobs: JobsArg,
    },
    /// Per-level magnification transition counts.
    StatsMag {
        #[arg(long)]
        scanpaths: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a scanpath over its grade map as SVG.
    Render {
        #[arg(long)]
        scanpath: PathBuf,
        /// Zero-based record index in the scanpath file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        grades: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn optional_scanpaths(p: Option<&Path>) -> pathscan_cli::Result<Vec<pathscan::Scanpath>> {
    p.map(read_scanpaths).transpose().map(Option::unwrap_or_default)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simplify { input, params, out } => {
            let cfg = Config::load(params.as_deref())?;
            let n = pathscan_cli::cmd::simplify::run(&cfg, &input, &out)?;
            log::info!("wrote {n} scanpaths to {}", out.display());
        }
        Command::Gen {
            cfg,
            wsis,
            readers,
            out,
            force,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(k) = wsis {
                cfg.gen.wsis = k;
            }
            if let Some(r) = readers {
                cfg.gen.readers = r;
            }
            let hash = corpus::generate(&cfg, &out, force)?;
            println!("{hash}");
        }
        Command::TrainHeatmap {
            corpus,
            cfg,
            mag,
            scanpaths,
            wsis,
            out,
            log,
        } => {
            let cfg = cfg.load()?;
            let mag = MagLevel::from_factor(mag)
                .ok_or_else(|| CliError::Usage(format!("--mag {mag} is not one of 1, 2, 4, 10, 20, 40")))?;
            let corpus = Corpus::open(&corpus)?;
            let log = log.unwrap_or_else(|| train::default_log(&out));
            let losses = train::train_heatmap(&cfg, &corpus, mag, scanpaths.as_deref(), &wsis, &out, &log)?;
            if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                log::info!("loss {a:.6} -> {b:.6} over {} epochs", losses.len());
            }
        }
        Command::TrainScanpath {
            corpus,
            cfg,
            scanpaths,
            wsis,
            stage1,
            out,
            log,
        } => {
            let cfg = cfg.load()?;
            let corpus = Corpus::open(&corpus)?;
            let log = log.unwrap_or_else(|| train::default_log(&out));
            train::train_scanpath(&cfg, &corpus, scanpaths.as_deref(), &wsis, &stage1, &out, &log)?;
        }
        Command::Predict {
            corpus,
            cfg,
            ckpt,
            baseline,
            train,
            wsis,
            mode,
            n,
            samples,
            out,
            jobs,
        } => {
            let cfg = cfg.load()?;
            let corpus = Corpus::open(&corpus)?;
            let gen = match (ckpt, baseline) {
                (Some(p), _) => Generator::Pat(Box::new(Pat::load(&p)?)),
                (None, Some(kind)) => Generator::Baseline {
                    kind,
                    train: optional_scanpaths(train.as_deref())?,
                },
                (None, None) => unreachable!("clap requires --ckpt or --baseline"),
            };
            let opts = PredictOpts {
                wsis,
                mode: mode.unwrap_or(cfg.inference.mode),
                n: n.unwrap_or(cfg.inference.n.map_or(Length::Auto, Length::Fixed)),
                samples: samples.unwrap_or(cfg.inference.samples),
                jobs: jobs.jobs,
            };
            let recs = predict::generate(&cfg, &corpus, &gen, &opts)?;
            for r in &recs {
                if let Some(e) = r.generator.as_ref().and_then(|g| g.get("error")).and_then(|e| e.as_str()) {
                    log::warn!("{}: rollout stopped early: {e}", r.wsi);
                }
            }
            predict::write_records(&out, &recs)?;
        }
        Command::EvalNext {
            corpus,
            cfg,
            gt,
            ckpt,
            baseline,
            train,
            report,
            json: json_out,
            jobs,
        } => {
            let cfg = cfg.load()?;
            let corpus = Corpus::open(&corpus)?;
            let gts = read_scanpaths(&gt)?;
            let pred = match (&ckpt, baseline) {
                (Some(p), _) => NextPredictor::Pat(Box::new(Pat::load(p)?)),
                (None, Some(kind)) => NextPredictor::Baseline {
                    kind,
                    train: optional_scanpaths(train.as_deref())?,
                },
                (None, None) => unreachable!("clap requires --ckpt or --baseline"),
            };
            let r = eval::eval_next(&cfg, &corpus, &gts, &pred, jobs.jobs)?;
            let prov = eval::report_provenance(
                "eval-next",
                &cfg,
                json!({"gt": gt, "ckpt": ckpt, "baseline": baseline, "train": train}),
            );
            r.save(&prov, &report, json_out.as_deref())?;
        }
        Command::EvalScanpath {
            pred,
            gt,
            corpus,
            grades,
            cfg,
            report,
            json: json_out,
            jobs,
        } => {
            let cfg = cfg.load()?;
            let corpus = Corpus::open(&corpus)?;
            let preds = read_scanpaths(&pred)?;
            let gts = read_scanpaths(&gt)?;
            let g = match &grades {
                Some(d) => Grades::Dir(d),
                None => Grades::Corpus(&corpus),
            };
            let r = eval::eval_scanpath(&cfg, &corpus, &preds, &gts, &g, jobs.jobs)?;
            let prov = eval::report_provenance("eval-scanpath", &cfg, json!({"pred": pred, "gt": gt, "grades": grades}));
            r.save(&prov, &report, json_out.as_deref())?;
        }
        Command::StatsMag { scanpaths, cfg, out } => {
            let cfg = cfg.load()?;
            stats::run(&cfg, &read_scanpaths(&scanpaths)?, &out)?;
        }
        Command::Render {
            scanpath,
            index,
            grades,
            cfg,
            out,
        } => {
            let cfg = cfg.load()?;
            let recs = read_scanpath_file(&scanpath)?;
            let rec = recs.get(index).ok_or_else(|| {
                CliError::Usage(format!("{} has {} records; --index {index} is out of range", scanpath.display(), recs.len()))
            })?;
            let gm = pathscan::synth::GradeMap::load(&grades)
                .map_err(|e| CliError::Data(format!("{}: {e}", grades.display())))?;
            let meta = json!({
                "provenance": provenance("render", &cfg),
                "generator": rec.generator,
            });
            let svg = render_svg(&rec.to_scanpath(), &gm, &meta);
            write_atomic(&out, svg.as_bytes()).context("writing SVG")?;
        }
    }
    Ok(())
}

/// The error chain joined with ": ", skipping causes already spelled out by
/// the message above them.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            let code = e.downcast_ref::<CliError>().map_or(exit::DATA, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
