use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqshift::config::{RunConfig, Variant};
use freqshift::datagen::{build_corpus, Corpus};
use freqshift::fam::rescale_attention;
use freqshift::fmm::{mix, spectral_energy_report, MixConfig};
use freqshift::netcore::Model;
use freqshift::protocol::{self, TrainJob};
use freqshift::tensorcore::Checkpoint;
use freqshift::{pgm, Error};

/// Frequency attention and spectral mixing for cross-domain presentation
/// attack detection.
#[derive(Parser)]
#[command(name = "freqshift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain corpus.
    Gen(GenArgs),
    /// Replace the low band of a source image with that of a target image.
    Mix(MixArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a domain's test split.
    Eval(EvalArgs),
    /// Run the cross-domain experiment grid.
    Grid(GridArgs),
    /// Export a stage's frequency attention map as an image.
    Attmap(AttmapArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; must be empty or absent unless --force.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MixArgs {
    /// Image supplying the high band (PGM).
    #[arg(long)]
    source: PathBuf,
    /// Image supplying the low band (PGM).
    #[arg(long)]
    target: PathBuf,
    /// Low band side as a fraction of each dimension.
    #[arg(long, default_value_t = 0.025)]
    low_frac: f64,
    /// Output image (PGM).
    #[arg(long)]
    out: PathBuf,
    /// Print low/high band energies of source, target and output as JSON.
    #[arg(long)]
    energy: bool,
    /// Keep out-of-range values instead of clipping to [0, 1] before writing.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// baseline, fam, fmm or fmm_fam.
    #[arg(long)]
    variant: String,
    /// Domain whose training split is used.
    #[arg(long)]
    train_domain: String,
    /// Domain supplying the few-shot bonafide pool (mixing variants).
    #[arg(long)]
    target_domain: Option<String>,
    /// Size of the target pool (overrides grid.n_target).
    #[arg(long)]
    n_target: Option<usize>,
    /// Seed for initialization and the data pipeline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, log and lineage.
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory (default: <output_root>/corpus from the config).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Domain whose test split is scored.
    #[arg(long)]
    test_domain: String,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory.
    #[arg(long, default_value = "runs/corpus")]
    corpus: PathBuf,
    /// Attack-probability threshold; scores at or above it count as attack.
    #[arg(long, default_value_t = protocol::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct GridArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Results directory (default: output_root from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel training workers (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Corpus directory, generated when absent (default: <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct AttmapArgs {
    /// Checkpoint of a model with attention enabled.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PGM, model input size).
    #[arg(long)]
    image: PathBuf,
    /// Stage index, from 0.
    #[arg(long)]
    stage: usize,
    /// Output image (PGM), min-max rescaled.
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> freqshift::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen(a: GenArgs) -> freqshift::Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let rows = build_corpus(&cfg.domains, &cfg.corpus, &cfg.content, &a.out, a.force)?;
    println!("{}", serde_json::json!({ "images": rows.len(), "out": a.out }));
    Ok(())
}

fn mix_cmd(a: MixArgs) -> freqshift::Result<()> {
    let cfg = MixConfig {
        low_fraction: a.low_frac,
        replace_prob: 1.0,
        clip_output: !a.no_clip,
    };
    cfg.validate()?;
    let s = pgm::read(&a.source)?;
    let t = pgm::read(&a.target)?;
    let m = mix(&s, &t, &cfg)?;
    pgm::write(&a.out, &m)?;
    if a.energy {
        let report = serde_json::json!({
            "low_fraction": a.low_frac,
            "source": spectral_energy_report(&s, a.low_frac)?,
            "target": spectral_energy_report(&t, a.low_frac)?,
            "mixed": spectral_energy_report(&m.clamp01(), a.low_frac)?,
        });
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> freqshift::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(n) = a.n_target {
        cfg.grid.n_target = n;
        cfg.validate()?;
    }
    let variant = Variant::parse(&a.variant)?;
    if variant.uses_fmm() && a.target_domain.is_none() {
        return Err(Error::InvalidArgument(format!(
            "--variant {} needs --target-domain",
            a.variant
        )));
    }
    let corpus = Corpus::open(a.corpus.unwrap_or_else(|| cfg.output_root.join("corpus")))?;
    let job = TrainJob::new(variant, &a.train_domain, a.target_domain.as_deref(), a.seed);
    let lineage = protocol::train_job(&cfg, &corpus, &job, &a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": a.out,
            "training_images": lineage.training_images.len(),
            "targets_used": lineage.targets_used.len(),
        })
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> freqshift::Result<()> {
    let corpus = Corpus::open(&a.corpus)?;
    let report = protocol::evaluate_checkpoint(&a.checkpoint, &corpus, &a.test_domain, a.threshold)?;
    write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

fn grid_cmd(a: GridArgs) -> freqshift::Result<bool> {
    let cfg = RunConfig::load(&a.config)?;
    let out = a.out.unwrap_or_else(|| cfg.output_root.clone());
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be positive".into()));
    }
    let corpus = protocol::ensure_corpus(&cfg, &a.corpus.unwrap_or_else(|| out.join("corpus")))?;
    let outcome = protocol::run_grid(&cfg, &corpus, &out, jobs)?;
    let results = out.join("results.csv");
    let text = std::fs::read_to_string(&results).map_err(|e| Error::io(&results, e))?;
    print!("{text}");
    for f in &outcome.failures {
        eprintln!(
            "{}",
            serde_json::json!({ "error": "cell_failed", "cell": f.cell, "message": f.error })
        );
    }
    Ok(outcome.failures.is_empty())
}

fn attmap(a: AttmapArgs) -> freqshift::Result<()> {
    let model = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let img = pgm::read(&a.image)?;
    let att = model.attention_map(&img, a.stage)?;
    pgm::write(&a.out, &rescale_attention(&att))
}

fn report(e: &Error) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
    if e.is_validation() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg.trim_end() }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Mix(a) => mix_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Grid(a) => match grid_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Command::Attmap(a) => attmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
