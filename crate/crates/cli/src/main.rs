use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unlearn_core::checkpoint::Checkpoint;
use unlearn_core::config::{Config, SEED_ENV};
use unlearn_core::datagen::{AuxMode, ConditionId};
use unlearn_core::exec::Exec;
use unlearn_core::pipeline::{self, RunStatus};
use unlearn_core::sampler::generate;
use unlearn_core::unlearner::Method;
use unlearn_core::{Error, Phase};

/// Class unlearning and relearning attacks on a desk-scale conditional diffusion model.
#[derive(Parser)]
#[command(name = "unlearn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default config document.
    Defaults,
    /// Write train.csv and heldout.csv.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Train the diffusion model; resumes from the newest periodic checkpoint in --out.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frozen oracle classifier.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn one class from a pretrained checkpoint.
    Unlearn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// ga_retain, replace or dimum
        #[arg(long)]
        method: String,
        #[arg(long)]
        unlearn_class: Option<u32>,
        /// Training set CSV; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune an unlearned checkpoint on auxiliary data.
    Attack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// retain, heldout or synthetic
        #[arg(long)]
        aux_mode: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained checkpoint to sample the synthetic auxiliary set from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Accept a pretrained checkpoint as the starting point.
        #[arg(long)]
        allow_any: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints into a curve CSV plus one JSON report each.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoints_glob: String,
        /// unlearn or attack
        #[arg(long)]
        phase: String,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump samples for one condition as CSV.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: u32,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every phase and write manifest.json.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

/// The config document and its parsed form, `UF_SEED` applied.
fn load_config(path: Option<&Path>) -> Result<(Config, String), Error> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => Config::default().to_json(),
    };
    let mut cfg = Config::from_json(&text)?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok((cfg, text))
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = Exec::default();
    match cli.cmd {
        Cmd::Defaults => print!("{}", Config::default().to_json()),
        Cmd::GenData { config, out, force } => {
            let (cfg, _) = load_config(config.as_deref())?;
            for p in pipeline::gen_data(&cfg, &out, force)? {
                println!("{}", p.display());
            }
        }
        Cmd::Pretrain { config, data, out } => {
            let (cfg, _) = load_config(config.as_deref())?;
            println!("{}", pipeline::pretrain(&cfg, &data, &out)?.display());
        }
        Cmd::Oracle { config, data, heldout, out } => {
            let (cfg, _) = load_config(config.as_deref())?;
            let file = pipeline::oracle(&cfg, &data, &heldout, &out)?;
            println!("{} heldout_accuracy={}", out.display(), file.heldout_accuracy);
        }
        Cmd::Unlearn { config, checkpoint, method, unlearn_class, data, out } => {
            let (mut cfg, _) = load_config(config.as_deref())?;
            let method: Method = method.parse()?;
            if let Some(c) = unlearn_class {
                cfg.unlearn.unlearn_class = ConditionId(c);
                cfg.validate()?;
            }
            let data = pipeline::dataset_or_generate(&cfg, data.as_deref())?;
            let run = pipeline::unlearn(&cfg, &checkpoint, method, cfg.unlearn.unlearn_class, &data, &out, None)?;
            for (_, p) in &run.snapshots {
                println!("{}", p.display());
            }
            if let Some(msg) = run.aborted {
                eprintln!("stopped early: {msg}");
            }
        }
        Cmd::Attack { config, checkpoint, aux_mode, data, pretrained, allow_any, out } => {
            let (mut cfg, _) = load_config(config.as_deref())?;
            let mode: AuxMode = aux_mode.parse()?;
            if let Some(c) = Checkpoint::load(&checkpoint)?.meta.unlearn_class {
                cfg.unlearn.unlearn_class = c;
            }
            let data = pipeline::dataset_or_generate(&cfg, data.as_deref())?;
            let base = match &pretrained {
                Some(p) => Some(Checkpoint::load(p)?.net()?),
                None => None,
            };
            let aux = pipeline::aux_set(&cfg, mode, cfg.unlearn.unlearn_class, &data, base.as_ref(), exec)?;
            let run = pipeline::attack(&cfg, &checkpoint, mode, &aux, &out, allow_any, None)?;
            for (_, p) in &run.snapshots {
                println!("{}", p.display());
            }
        }
        Cmd::Eval { config, checkpoints_glob, phase, oracle, data, out } => {
            let (cfg, _) = load_config(config.as_deref())?;
            let phase: Phase = phase.parse()?;
            let data = pipeline::dataset_or_generate(&cfg, data.as_deref())?;
            let reports = pipeline::eval_glob(&cfg, &checkpoints_glob, phase, &oracle, &data, &out, exec)?;
            println!("{} ({} snapshots)", out.display(), reports.len());
        }
        Cmd::Sample { config, checkpoint, class, count, out } => {
            let (cfg, _) = load_config(config.as_deref())?;
            let net = Checkpoint::load(&checkpoint)?.net()?;
            let sched = cfg.schedule.build()?;
            let arch = *net.arch();
            let s = generate(&net, arch.dim, arch.class_count, count, ConditionId(class), &sched, &cfg.sampler_config(), exec)?;
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            std::fs::write(&out, buf).map_err(|e| Error::io(&out, e))?;
        }
        Cmd::Pipeline { config, out } => {
            let (cfg, text) = load_config(config.as_deref())?;
            let manifest = pipeline::run_pipeline(&cfg, &text, &out, exec)?;
            debug_assert_eq!(manifest.status, RunStatus::Complete);
            for (method, msg) in &manifest.aborted {
                eprintln!("{method} stopped early: {msg}");
            }
            println!("{}", out.join("manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
