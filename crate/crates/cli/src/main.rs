use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mflangevin::control::{write_cloud_bin, write_cloud_csv, InitLaw};
use mflangevin::dataset::{DatasetKind, Target};
use mflangevin::experiments::{default_config, run_study, ModelSection, RunConfig, StudyReport};
use mflangevin::langevin::{train, TrainerConfig};
use mflangevin::model::ModelKind;
use mflangevin::objective::objective_jsigma;
use mflangevin::TimeGrid;

#[derive(Parser)]
#[command(
    name = "mfl",
    version,
    about = "Mean-field Langevin training of relaxed-control neural ODEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (sections model, grid, trainer, study).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides trainer.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a particle cloud and write its history and final state.
    Train(Common),
    /// Exact discrete gradient against finite differences.
    GradCheck(Common),
    /// Propagation of chaos in N1 and N2.
    ChaosStudy(Common),
    /// Strong error of the time stepping in gamma.
    EulerStudy(Common),
    /// Contraction of synchronously coupled runs.
    ContractionStudy(Common),
    /// Particle histograms against the Gibbs density.
    GibbsCheck(Common),
    /// Generalisation gap in N1.
    GeneralizationStudy(Common),
}

fn train_default() -> RunConfig {
    let mut trainer = TrainerConfig::uniform(0.1, 1.0, 0.01, 500, 0);
    trainer.record_every = 10;
    RunConfig {
        model: ModelSection {
            kind: ModelKind::NeuralOdeTanh,
            dim_state: 2,
            hidden: 4,
            dataset: DatasetKind::Regression { target: Target::Sine },
            n_samples: 64,
            data_seed: 0,
            n_particles: 32,
            init: InitLaw::Gaussian { mean: 0.0, std: 1.0 },
        },
        grid: TimeGrid::new(1.0, 8).expect("valid grid"),
        trainer,
        study: None,
    }
}

fn load(common: &Common, study: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => match study {
            Some(name) => default_config(name).expect("known study"),
            None => train_default(),
        },
    };
    if let Some(name) = study {
        match &cfg.study {
            None => cfg.study = default_config(name).and_then(|c| c.study),
            Some(s) if s.name() != name => bail!("config has a '{}' study section, expected '{name}'", s.name()),
            Some(_) => {}
        }
    }
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
    }
    Ok(cfg)
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let (model, data, init) = cfg.setup()?;
    let started = std::time::Instant::now();
    let (cloud, history) = train(model.as_ref(), &data, &cfg.grid, &cfg.trainer, &init)?;
    std::fs::create_dir_all(out)?;
    history.write_csv(BufWriter::new(File::create(out.join("history.csv"))?))?;
    write_cloud_csv(&cloud, BufWriter::new(File::create(out.join("cloud.csv"))?))?;
    write_cloud_bin(&cloud, BufWriter::new(File::create(out.join("cloud.bin"))?))?;
    let mut dat = String::from("# s J\n");
    for r in &history.records {
        dat.push_str(&format!("{:.16e} {:.16e}\n", r.s, r.j));
    }
    std::fs::write(out.join("J.dat"), dat)?;

    let last = history.last().expect("history has a final record");
    let value = objective_jsigma(model.as_ref(), &cloud, &data, &cfg.grid, 0.0, &cfg.trainer.prior)?;
    let summary = serde_json::json!({
        "kind": "train",
        "config": cfg,
        "final": {
            "iter": last.iter,
            "s": last.s,
            "J": value.j,
            "Jsigma": last.j_sigma,
            "grad_norm": last.grad_norm,
            "second_moment": last.second_moment,
        },
        "dataset_sha256": data.content_hash(),
        "wall_clock_s": started.elapsed().as_secs_f64(),
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} iterations: J = {:.6e}, grad_norm = {:.3e}; outputs in {}",
        last.iter,
        value.j,
        last.grad_norm,
        out.display()
    );
    Ok(true)
}

fn run_named(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let report: StudyReport = run_study(cfg)?;
    report.write(out)?;
    print!("{}", report.summary_text());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, study) = match &cli.command {
        Command::Train(c) => (c, None),
        Command::GradCheck(c) => (c, Some("grad_check")),
        Command::ChaosStudy(c) => (c, Some("chaos")),
        Command::EulerStudy(c) => (c, Some("euler")),
        Command::ContractionStudy(c) => (c, Some("contraction")),
        Command::GibbsCheck(c) => (c, Some("gibbs")),
        Command::GeneralizationStudy(c) => (c, Some("generalization")),
    };
    let result = (|| -> Result<bool> {
        set_threads(common.threads)?;
        let cfg = load(common, study)?;
        if common.print_config {
            println!("{}", cfg.to_json());
            return Ok(true);
        }
        match study {
            None => run_train(&cfg, &common.out),
            Some(_) => run_named(&cfg, &common.out),
        }
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
