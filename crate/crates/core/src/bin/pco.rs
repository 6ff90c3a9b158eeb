use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use pco_core::encoders::{embed_rows, FeatureEncoder};
use pco_core::engine::{build_dataset, Checkpoint, DataSpec, RunConfig, Trainer, LOG_HEADER};
use pco_core::eval::{
    all_pairs, angular_projection, pairs_to_csv, parse_pairs, Embeddings, RefPolicy, VerificationReport,
};
use pco_core::gradsuite::{run_grad_checks, MODULES};
use pco_core::{Error, Result};

const EMBED_CHUNK: usize = 64;

#[derive(Parser)]
#[command(
    name = "pco",
    version,
    about = "Train and evaluate hyperspherical face-style embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint; the config supplies the iteration
        /// budget and output paths.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write embeddings of a dataset under a trained encoder.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        /// Data spec file (`data = ...` keys, optional `data.split`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// TAR@FAR and cluster statistics of an embedding file.
    Eval {
        #[arg(long)]
        emb: PathBuf,
        /// Pair protocol CSV; all sample pairs when omitted.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6])]
        far: Vec<f64>,
        /// Also write the full report (with ROC) as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-dimensional angular projection as CSV.
    Project {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Policy::Pca)]
        refs: Policy,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        /// Samples as an embedding-format file (inputs as rows).
        #[arg(long)]
        out: PathBuf,
        /// Also write the all-pairs protocol of the generated split.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Pca,
    Axes,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn default_checkpoint(config: &Path) -> PathBuf {
    config.with_extension("ckpt")
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::parse(&read_text(config_path)?)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(Checkpoint::load(p)?, &run)?,
        None => Trainer::from_run_config(run)?,
    };
    let ckpt_path = trainer
        .config()
        .checkpoint
        .clone()
        .unwrap_or_else(|| default_checkpoint(config_path));

    let mut log = match trainer.config().log.clone() {
        Some(p) => {
            let fresh = resume.is_none() || !p.exists();
            let mut f = if fresh {
                fs::File::create(&p)
            } else {
                OpenOptions::new().append(true).open(&p)
            }
            .map_err(|e| Error::io(&p, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
            }
            Some((p, f))
        }
        None => None,
    };

    let every = trainer.config().checkpoint_every;
    let start = Instant::now();
    let result = trainer.run(|t, row| {
        if let Some((p, f)) = log.as_mut() {
            writeln!(f, "{row}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        if every > 0 && row.iteration % every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    // on failure the trainer still holds the last consistent state
    trainer.checkpoint().save(&ckpt_path)?;
    result?;
    let st = trainer.stage();
    eprintln!(
        "trained {} iterations in {:.1}s; phase {}; css {:.4}; checkpoint {}",
        st.iteration,
        start.elapsed().as_secs_f64(),
        st.phase,
        st.css_smoothed,
        ckpt_path.display()
    );
    Ok(())
}

fn export(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let (spec, split) = DataSpec::parse(&read_text(data)?)?;
    let ds = build_dataset(&spec, split)?;
    if ds.input_dim() != ckpt.encoder.input_dim() {
        return Err(Error::Config(format!(
            "data rows have {} values, encoder expects {}",
            ds.input_dim(),
            ckpt.encoder.input_dim()
        )));
    }
    let feats = embed_rows(&ckpt.encoder, &ds.inputs, EMBED_CHUNK)?;
    Embeddings::from_tensor(&feats, &ds.labels)?.save(out)?;
    eprintln!(
        "wrote {} embeddings of dim {} to {}",
        ds.len(),
        feats.cols(),
        out.display()
    );
    Ok(())
}

fn eval(emb: &Path, pairs: Option<&Path>, far: &[f64], out: Option<&Path>) -> Result<()> {
    let e = Embeddings::load(emb)?;
    let feats = e.to_tensor()?;
    let labels = e.labels_usize();
    let pairs = match pairs {
        Some(p) => parse_pairs(&read_text(p)?)?,
        None => all_pairs(&labels),
    };
    let report = VerificationReport::build(&feats, &labels, &pairs, far)?;
    if let Some(p) = out {
        write_text(p, &report.to_csv())?;
    }
    println!("samples: {}  pairs: {}", report.samples, report.pairs);
    for (f, t) in &report.tar_at {
        println!("TAR@FAR={f:e}: {t:.6}");
    }
    println!("intra_mean_cos: {:.6}", report.intra_mean_cos);
    println!("inter_mean_cos: {:.6}", report.inter_mean_cos);
    Ok(())
}

fn project(emb: &Path, out: &Path, refs: Policy) -> Result<()> {
    let e = Embeddings::load(emb)?;
    let policy = match refs {
        Policy::Pca => RefPolicy::Pca,
        Policy::Axes => RefPolicy::Axes,
    };
    let p = angular_projection(&e.to_tensor()?, &e.labels_usize(), policy)?;
    write_text(out, &p.to_csv())
}

fn grad_check(module: Option<&str>, seeds: u64) -> Result<()> {
    let start = Instant::now();
    let outcomes = run_grad_checks(module, seeds)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<9} {:<20} seeds={:<4} worst={:.3e} tol={:.0e} {verdict}",
            o.module, o.name, o.seeds, o.worst, o.tolerance
        );
        if !o.passed() {
            failed.push(o.name);
        }
    }
    println!("{} checks in {:.1}s", outcomes.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        return Err(Error::NonFinite {
            context: format!("gradient checks beyond tolerance: {}", failed.join(", ")),
        });
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path, pairs: Option<&Path>) -> Result<()> {
    let (spec, split) = DataSpec::parse(&read_text(spec)?)?;
    let ds = build_dataset(&spec, split)?;
    Embeddings::from_tensor(&ds.inputs, &ds.labels)?.save(out)?;
    if let Some(p) = pairs {
        write_text(p, &pairs_to_csv(&all_pairs(&ds.labels)))?;
    }
    eprintln!(
        "wrote {} samples ({} classes) to {}",
        ds.len(),
        ds.classes,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Train { config, resume } => train(config, resume.as_deref()),
        Command::Export { ckpt, data, out } => export(ckpt, data, out),
        Command::Eval { emb, pairs, far, out } => eval(emb, pairs.as_deref(), far, out.as_deref()),
        Command::Project { emb, out, refs } => project(emb, out, *refs),
        Command::GradCheck { module, seeds } => {
            if let Some(m) = module.as_deref().filter(|m| !MODULES.contains(m)) {
                Err(Error::Config(format!(
                    "unknown module `{m}` (expected one of {})",
                    MODULES.join(", ")
                )))
            } else {
                grad_check(module.as_deref(), *seeds)
            }
        }
        Command::GenData { spec, out, pairs } => gen_data(spec, out, pairs.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
