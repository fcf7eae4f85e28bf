//! Command line front end.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcd_core::adaptor::InputKind;
use pcd_core::distill::LossLevel;
use pcd_core::erf::{backbone_erf, erf_radius, student_erf};
use pcd_core::model::{head_into_store, norm_rescale_export, Checkpoint, ModelKind, Teacher, TeacherHeadMode};
use pcd_core::rng::{tag, Rng};
use pcd_core::trainer::{distill, pretrain_teacher, synth_dataset, Config, Dataset, DistillOptions, StepMetrics};

use crate::codec::{load_checkpoint, save_checkpoint};
use crate::config::{canonical_json, load_config, preset};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{io, Error, Result};
use crate::heatmap::{write_heatmap, HeatmapFormat};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "pcd", version, about = "Pixel-wise contrastive distillation at desk scale")]
pub struct Cli {
    /// JSON config; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Level {
    Pixel,
    Image,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen-data`; synthesized from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective config, or a preset, in canonical form.
    Config {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Write the synthetic dataset to `<out>/data`.
    GenData,
    /// Train the teacher and its vector projection head.
    PretrainTeacher {
        #[command(flatten)]
        data: DataArg,
        /// Skip training and save the seeded initialization.
        #[arg(long)]
        frozen_random: bool,
    },
    /// Rewrite a vector head to consume maps and check the rewrite.
    AdaptHead {
        #[arg(long)]
        teacher: PathBuf,
        /// Drop a final BN without affine parameters first.
        #[arg(long)]
        drop_last_bn: bool,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Distill a frozen teacher into the student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        level: Option<Level>,
        #[arg(long, conflicts_with = "asymmetric")]
        symmetric: bool,
        #[arg(long)]
        asymmetric: bool,
        /// Raw checkpoint of an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the schedule length.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Stop after this many total steps, keeping a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Strip heads and rescale backbone kernels.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchor: Option<f64>,
    },
    /// Effective receptive field of a student or backbone.
    Erf {
        /// Student, teacher or backbone checkpoint; a freshly initialized student when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pgm")]
        format: HeatmapFormat,
    },
    /// Run the self-check suites.
    Verify,
}

/// Parse `args` and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => Config::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dataset(cfg: &Config, arg: &DataArg) -> Result<Dataset> {
    match &arg.data {
        Some(dir) => load_dataset(dir),
        None => Ok(synth_dataset(cfg.data.num_images, cfg.data.image_size, cfg.seed)?),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).map_err(io(&cli.out))?;
    Ok(&cli.out)
}

fn write_metrics(path: &Path, metrics: &[StepMetrics], append: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io(path))?;
    let mut text = String::new();
    for m in metrics {
        text.push_str(&m.log_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(io(path))
}

fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Config { preset: p } => {
            let cfg = match p {
                Some(Preset::Desk) => preset("desk")?,
                Some(Preset::Full) => preset("full")?,
                None => effective_config(cli)?,
            };
            print!("{}", canonical_json(&cfg));
        }
        Command::GenData => {
            let cfg = effective_config(cli)?;
            let data = synth_dataset(cfg.data.num_images, cfg.data.image_size, cfg.seed)?;
            let dir = out_dir(cli)?.join("data");
            save_dataset(&data, &dir)?;
            println!("wrote {} images to {}", data.len(), dir.display());
        }
        Command::PretrainTeacher { data, frozen_random } => {
            let mut cfg = effective_config(cli)?;
            cfg.pretrain.frozen_random |= frozen_random;
            let data = dataset(&cfg, data)?;
            let out = out_dir(cli)?;
            let res = pretrain_teacher(&cfg, &data, &mut |m| eprintln!("{}", m.log_line()))?;
            write_metrics(&out.join("pretrain_metrics.tsv"), &res.metrics, false)?;
            save_checkpoint(&res.checkpoint, out.join("teacher.pcd"))?;
            println!("wrote {}", out.join("teacher.pcd").display());
        }
        Command::AdaptHead {
            teacher,
            drop_last_bn,
            tol,
            trials,
        } => {
            let cfg = effective_config(cli)?;
            let ckpt = load_checkpoint(teacher)?;
            if ckpt.meta.head_kind == Some(InputKind::Map) {
                return Err(pcd_core::Error::AlreadyAdapted.into());
            }
            let tol = tol.unwrap_or(cfg.adapt.tol);
            let trials = trials.unwrap_or(cfg.adapt.trials);
            let drop = *drop_last_bn || cfg.adapt.drop_last_bn;
            let mut rng = Rng::stream(cfg.seed, tag::VERIFY, &[0]);
            let t = match Teacher::assemble(&ckpt, TeacherHeadMode::Adapted, drop, trials, tol, &mut rng) {
                Err(e @ pcd_core::Error::InvarianceFailed { .. }) => {
                    println!("result: FAIL");
                    return Err(e.into());
                }
                other => other?,
            };
            let head = t.head.as_ref().expect("adapted mode keeps the head");
            let report = t.invariance.as_ref().expect("vector heads are verified");
            println!("structure: {}", head.structure());
            println!("{report}");
            let (head_store, kinds) = head_into_store(head, "head")?;
            let mut store = t.store.clone();
            store.extend(head_store)?;
            let mut meta = ckpt.meta.clone();
            meta.head_kind = Some(InputKind::Map);
            meta.head_layers = kinds;
            meta.invariance_max_abs_dev = Some(report.max_abs_dev);
            let path = out_dir(cli)?.join("teacher_adapted.pcd");
            save_checkpoint(&Checkpoint::from_store(meta, &store), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Distill {
            teacher,
            data,
            level,
            symmetric,
            asymmetric,
            resume,
            max_steps,
            stop_after,
        } => {
            let mut cfg = effective_config(cli)?;
            if let Some(l) = level {
                cfg.loss.level = match l {
                    Level::Pixel => LossLevel::Pixel,
                    Level::Image => LossLevel::Image,
                };
            }
            if *symmetric {
                cfg.loss.symmetric = true;
            }
            if *asymmetric {
                cfg.loss.symmetric = false;
            }
            if max_steps.is_some() {
                cfg.optim.max_steps = *max_steps;
            }
            cfg.validate()?;
            let data = dataset(&cfg, data)?;
            let ckpt = load_checkpoint(teacher)?;
            let mut rng = Rng::stream(cfg.seed, tag::VERIFY, &[0]);
            let t = Teacher::assemble(&ckpt, cfg.adapt.teacher_head, cfg.adapt.drop_last_bn, cfg.adapt.trials, cfg.adapt.tol, &mut rng)?;
            let resume_ckpt = resume.as_ref().map(load_checkpoint).transpose()?;
            let opts = DistillOptions {
                resume: resume_ckpt.as_ref(),
                stop_after: *stop_after,
            };
            let res = distill(&cfg, &data, &t, opts, &mut |m| eprintln!("{}", m.log_line()))?;
            let name = match cfg.loss.level {
                LossLevel::Pixel => "pixel",
                LossLevel::Image => "image",
            };
            let out = out_dir(cli)?;
            write_metrics(&out.join(format!("metrics_{name}.tsv")), &res.metrics, resume.is_some())?;
            let raw = out.join(format!("student_{name}.raw.pcd"));
            save_checkpoint(&res.raw, &raw)?;
            println!("wrote {}", raw.display());
            if let Some(export) = &res.export {
                let p = out.join(format!("student_{name}.pcd"));
                save_checkpoint(export, &p)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Export { checkpoint, anchor } => {
            let cfg = effective_config(cli)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let anchor = anchor.unwrap_or(if cfg.export.norm_rescale { cfg.export.anchor } else { 1.0 });
            let export = norm_rescale_export(&ckpt.to_store()?, &ckpt.meta, anchor)?;
            let path = out_dir(cli)?.join("export.pcd");
            save_checkpoint(&export, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Erf { checkpoint, format } => {
            let cfg = effective_config(cli)?;
            let e = cfg.erf;
            let m = match checkpoint {
                None => {
                    let store = cfg.student.init(&mut Rng::stream(cfg.seed, tag::INIT, &[1]))?;
                    student_erf(&cfg.student, &store, e.input_size, e.samples, cfg.seed)?
                }
                Some(p) => {
                    let ckpt = load_checkpoint(p)?;
                    let store = ckpt.to_store()?;
                    match (&ckpt.meta.model_kind, &ckpt.meta.student) {
                        (ModelKind::Student, Some(spec)) => student_erf(spec, &store, e.input_size, e.samples, cfg.seed)?,
                        _ => backbone_erf(&ckpt.meta.backbone, &store, "backbone", e.input_size, e.samples, cfg.seed)?,
                    }
                }
            };
            let path = out_dir(cli)?.join(format!("erf.{}", format.extension()));
            write_heatmap(&m, &path, *format)?;
            match erf_radius(&m, e.mass) {
                Ok(r) => println!("radius@{}: {r}", e.mass),
                Err(_) => println!("radius@{}: degenerate", e.mass),
            }
            let c = m.corners();
            println!("corners: {:.3e} {:.3e} {:.3e} {:.3e}", c[0], c[1], c[2], c[3]);
            println!("wrote {}", path.display());
        }
        Command::Verify => {
            let seed = cli.seed.unwrap_or(0);
            let checks = verify::run_all(seed);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(Error::VerifyFailed(failed));
            }
        }
    }
    Ok(0)
}
