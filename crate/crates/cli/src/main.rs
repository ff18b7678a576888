//! `gradepipe` command-line front end.
//!
//! Exit codes: 0 success, 2 bad input, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gradepipe::aggregate::{self, SlideResult};
use gradepipe::pipeline::{self, PipelineConfig, PipelineError};
use gradepipe::roi;
use gradepipe::slide::{self, SlideLabel};
use gradepipe::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "gradepipe", version, about = "Sparse whole-slide classification and pN staging")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file; absent keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `pipeline.global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `pipeline.worker_threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Forces ordered, bit-reproducible processing.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: labelled slides and/or 5-slide patients.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of 5-slide patients, listed in `patients.tsv`.
        #[arg(long)]
        patients: Option<usize>,
        /// Labelled slides per class for training.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train on the labelled slides in DATA and write checkpoints to --out.
    Train {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify slides (files or directories of `.wsip`) into a slide TSV.
    Infer {
        #[arg(required = true)]
        slides: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `slides.tsv`; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage every patient listed in DATA/patients.tsv.
    Grade {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `slides.tsv` and `stages.tsv`; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time slide and patient inference over the slides in DIR.
    Bench {
        dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a slide's filtered ROI mask (PBM) and centroids (TSV next to it).
    Roimap {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.global_seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.worker_threads = t;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
            write_text(&dir.join(name), text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn expand_slides(args: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for a in args {
        if a.is_dir() {
            out.extend(pipeline::slide_files(a)?);
        } else {
            out.push(a.clone());
        }
    }
    if out.is_empty() {
        return Err(input(anyhow!("no slide containers found")));
    }
    Ok(out)
}

fn synth_cmd(out: &Path, patients: Option<usize>, per_class: Option<usize>, seed: u64) -> Result<(), Failure> {
    let template = SynthConfig::for_label(SlideLabel::Negative, seed);
    let patients = match (patients, per_class) {
        (None, None) => Some(10),
        (p, _) => p,
    };
    if let Some(k) = per_class {
        let specs = synth::plan_corpus([k; 4], seed);
        synth::write_corpus(out, &specs, &template).map_err(runtime)?;
        eprintln!("wrote {} labelled slides to {}", specs.len(), out.display());
    }
    if let Some(n) = patients {
        let plan = synth::plan_patients(n, seed);
        synth::write_patients(out, &plan, &template).map_err(runtime)?;
        eprintln!("wrote {n} patients ({} slides) to {}", 5 * n, out.display());
    }
    Ok(())
}

fn train_cmd(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let report = pipeline::train(cfg, data, out)?;
    write_text(&out.join("config.cfg"), &cfg.to_text())?;
    println!("epoch\ttrain_loss\tval_accuracy\tseconds");
    for e in &report.epochs {
        println!("{}\t{:.6}\t{:.4}\t{:.1}", e.epoch, e.train_loss, e.val_accuracy, e.seconds);
    }
    eprintln!(
        "{} training and {} validation slides, checkpoint {}",
        report.train_slides.len(),
        report.val_slides.len(),
        report.checkpoint.display()
    );
    Ok(())
}

fn infer_cmd(cfg: &PipelineConfig, slides: &[PathBuf], checkpoint: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let net = pipeline::load_network(checkpoint, cfg)?;
    let mut results = Vec::new();
    for path in expand_slides(slides)? {
        let (r, _) = pipeline::infer_slide(&net, &path, cfg)?;
        if r.fallback {
            eprintln!("{}: no foreground found, centre fallback used", r.slide_id);
        }
        results.push(r);
    }
    emit(out, "slides.tsv", &aggregate::slide_tsv(&results))
}

fn grade_cmd(cfg: &PipelineConfig, data: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let net = pipeline::load_network(checkpoint, cfg)?;
    let mut slides: Vec<SlideResult> = Vec::new();
    let mut stages = Vec::new();
    for (id, ids) in pipeline::read_manifest(data)? {
        let paths: Vec<PathBuf> = ids.iter().map(|s| synth::slide_path(data, s)).collect();
        let r = pipeline::infer_patient(&net, &paths, cfg)?;
        slides.extend(r.slides);
        stages.push((id, r.stage));
    }
    if out.is_some() {
        emit(out, "slides.tsv", &aggregate::slide_tsv(&slides))?;
    }
    emit(out, "stages.tsv", &aggregate::patient_tsv(&stages))
}

fn bench_cmd(cfg: &PipelineConfig, dir: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let net = pipeline::load_network(checkpoint, cfg)?;
    let report = pipeline::bench(&net, dir, cfg)?;
    print!("{}", report.to_text());
    Ok(())
}

fn roimap_cmd(cfg: &PipelineConfig, slide_path: &Path, out: &Path) -> Result<(), Failure> {
    let pyramid = slide::read_slide(slide_path)
        .with_context(|| format!("reading {}", slide_path.display()))
        .map_err(input)?;
    let level = slide::level_at_factor(&pyramid, cfg.roi.work_factor).map_err(input)?;
    let map = roi::roi_map(&level, &cfg.roi, roi::slide_seed(cfg.roi.sampling_seed, pyramid.slide_id()));
    let tsv = out.with_extension("tsv");
    roi::write_roimap(&map, out, &tsv)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(runtime)?;
    if map.centroids.fallback {
        eprintln!("no foreground found, centre fallback used");
    }
    eprintln!("{} foreground pixels, centroids in {}", map.mask.count(), tsv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { out, patients, per_class } => synth_cmd(&out, patients, per_class, cfg.global_seed),
        Command::Train { data, out } => train_cmd(&cfg, &data, &out),
        Command::Infer { slides, checkpoint, out } => infer_cmd(&cfg, &slides, &checkpoint, out.as_deref()),
        Command::Grade { data, checkpoint, out } => grade_cmd(&cfg, &data, &checkpoint, out.as_deref()),
        Command::Bench { dir, checkpoint } => bench_cmd(&cfg, &dir, &checkpoint),
        Command::Roimap { slide, out } => roimap_cmd(&cfg, &slide, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
