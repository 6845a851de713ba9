use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use siclip::analysis::{
    adjacent_js_profile, bundle_param_report, throughput_bench, write_bench_csv, write_js_csv, write_params_csv,
    BenchConfig,
};
use siclip::blocks::BlockKind;
use siclip::data::{gen_eval_split, gen_toy_dataset, make_batch, AugmentPolicy, CaptionChoice, Dataset};
use siclip::encoders::ModelBundle;
use siclip::train::{
    ablation_suite, evaluate_retrieval, resume_run, train_run, train_teacher, AblationSpec, Checkpoint, TrainConfig,
};
use siclip::{Error, Result};

#[derive(Parser)]
#[command(name = "siclip", version, about = "Desk-scale lightweight CLIP training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file with any subset of the training-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite batch, lr, weight decay, warmup, epochs and loss weights
    /// with the full-scale values.
    #[arg(long)]
    full_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => base,
        };
        if self.full_scale {
            let p = TrainConfig::full_scale();
            cfg.epochs = p.epochs;
            cfg.batch_size = p.batch_size;
            cfg.lr_peak = p.lr_peak;
            cfg.weight_decay = p.weight_decay;
            cfg.warmup_steps = p.warmup_steps;
            cfg.lambdas = p.lambdas;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy train split (or the eval split with --eval).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Synthetic captions per image (0 keeps only the original caption).
        #[arg(long, default_value_t = 3)]
        captions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One canonical caption per image, for retrieval evaluation.
        #[arg(long)]
        eval: bool,
    },
    /// Train the contrastive-only Pre-LN teacher.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a student (or resume one with --resume).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// R@1 of a checkpoint on an eval manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// JS divergence between adjacent image-tower attention maps.
    AnalyzeJs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 64)]
        probe: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward throughput of SAS-P and Pre-LN block stacks.
    Bench {
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline / WI / WIKD / WIKD+PM and the single- vs multi-caption pair.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        single_caption: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Epoch (1-based) whose mean training loss is compared.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        loss_epoch: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-module parameter counts of a checkpoint.
    Params {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved training config as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from the teacher preset.
        #[arg(long)]
        teacher: bool,
    },
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            captions,
            seed,
            eval,
        } => {
            let m = if eval {
                gen_eval_split(n, seed, &out)?
            } else {
                gen_toy_dataset(n, captions, seed, &out)?
            };
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::TrainTeacher { cfg, out_dir } => {
            let cfg = cfg.resolve(TrainConfig::teacher_default())?;
            mkdir(&out_dir)?;
            let run = train_teacher::<f32>(&cfg, Some(&out_dir.join("metrics.csv")), Some(&out_dir.join("teacher.ckpt")))?;
            println!("teacher trained for {} steps", run.checkpoint.step);
        }
        Command::Train { cfg, out_dir, resume } => {
            mkdir(&out_dir)?;
            let metrics = out_dir.join("metrics.csv");
            let ckpt = out_dir.join("final.ckpt");
            let run = match resume {
                Some(p) => resume_run::<f32>(Checkpoint::load(&p)?, Some(&metrics), Some(&ckpt))?,
                None => {
                    let cfg = cfg.resolve(TrainConfig::default())?;
                    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::Io {
                        path: out_dir.join("config.toml"),
                        source: e,
                    })?;
                    train_run::<f32>(&cfg, Some(&metrics), Some(&ckpt))?
                }
            };
            if let Some(r) = run.final_r1 {
                println!("R@1 image→text {:.4}, text→image {:.4}", r.i2t, r.t2i);
            }
        }
        Command::Eval { checkpoint, manifest } => {
            let bundle = Checkpoint::<f32>::load(&checkpoint)?.bundle;
            let r = evaluate_retrieval(&bundle, &Dataset::load(&manifest)?)?;
            println!("n={} R@1 image→text {:.4}, text→image {:.4}", r.n, r.i2t, r.t2i);
        }
        Command::AnalyzeJs {
            checkpoint,
            manifest,
            probe,
            out,
        } => {
            let bundle: ModelBundle<f32> = Checkpoint::load(&checkpoint)?.bundle;
            let ds = Dataset::load(&manifest)?;
            let k = probe.min(ds.manifest.samples.len());
            let idx: Vec<usize> = (0..k).collect();
            let batch = make_batch::<f32>(
                &ds,
                &idx,
                &AugmentPolicy::disabled(),
                CaptionChoice::Index(0),
                bundle.config.text.max_len,
                0,
                0,
            )?;
            let pairs = adjacent_js_profile(&bundle, &batch.images)?;
            write_js_csv(&out, &pairs)?;
            for p in &pairs {
                println!("blocks {}-{}: JS {:.6} nats", p.pair_index, p.pair_index + 1, p.js_nats);
            }
        }
        Command::Bench {
            d,
            heads,
            n,
            batch,
            blocks,
            reps,
            warmup,
            out,
        } => {
            let mut reports = Vec::new();
            for kind in [BlockKind::Sasp, BlockKind::Preln] {
                let mut c = BenchConfig::new(kind, d, heads, n, batch);
                c.n_blocks = blocks;
                c.iters = reps;
                c.warmup = warmup;
                let r = throughput_bench::<f32>(&c)?;
                println!("{:<6} {:.1} items/s (median {:.2} ms)", kind.name(), r.items_per_sec, r.median_seconds * 1e3);
                reports.push(r);
            }
            write_bench_csv(&out, &reports)?;
        }
        Command::Ablate {
            cfg,
            teacher,
            single_caption,
            seeds,
            loss_epoch,
            out_dir,
        } => {
            let spec = AblationSpec {
                base: cfg.resolve(TrainConfig::default())?,
                teacher,
                single_caption_manifest: single_caption,
                seeds,
                loss_epoch: loss_epoch as usize - 1,
            };
            let report = ablation_suite(&spec, &mut |r| {
                println!("{:<15} seed {} R@1 {:.4} ({:.0} s)", r.arm.name(), r.seed, r.r1.mean(), r.seconds)
            })?;
            report.write(&out_dir)?;
            for (what, ok) in report.ordering_checks() {
                println!("{} {what}", if ok { "ok  " } else { "FAIL" });
            }
        }
        Command::Params { checkpoint, out } => {
            let bundle: ModelBundle<f32> = Checkpoint::load(&checkpoint)?.bundle;
            let rows = bundle_param_report(&bundle);
            write_params_csv(&out, &rows)?;
            for r in rows {
                println!("{:<16} trainable {:>9} frozen {:>9} total {:>9}", r.module, r.trainable, r.frozen, r.total);
            }
        }
        Command::Config { cfg, teacher } => {
            let base = if teacher { TrainConfig::teacher_default() } else { TrainConfig::default() };
            print!("{}", cfg.resolve(base)?.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
