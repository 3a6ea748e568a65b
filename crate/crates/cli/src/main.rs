use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hsvlt_core::aggregation::count_params_flops;
use hsvlt_core::config::RunConfig;
use hsvlt_core::harness::{
    ablation_sweep, evaluate, load_checkpoint, run_grad_checks, save_checkpoint, AblationAxis, GradTarget, RunReport,
    SyntheticDataset, Trainer,
};
use hsvlt_core::metrics::write_label_csv;
use hsvlt_core::nn::Mode;
use hsvlt_core::tensor::{no_grad, read_container, write_container, Precision};
use hsvlt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hsvlt", version, about = "Multi-label image classification with joint vision-language encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, report and scores to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write scores.csv, truths.csv and report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic multi-label dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        images: usize,
        #[arg(long)]
        labels: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Central finite-difference gradient checks.
    Gradcheck {
        /// all, primitives, ivla, encoder, csa, loss or model.
        #[arg(long, default_value = "all")]
        module: String,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Parameter and FLOP counts for a configuration.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and evaluate every row of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; by default 64 images are generated from the model seed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for table.md, table.csv and generated side files.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Dump the cross-modal activation of every interaction block for one image.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor container holding a (3,H,W) or (1,3,H,W) image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn image_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:05}")).collect()
}

fn write_predictions(dir: &Path, data: &SyntheticDataset, scores: &[f64]) -> Result<()> {
    let ids = image_ids(data.len());
    write_label_csv(&dir.join("scores.csv"), &ids, scores, data.num_labels())?;
    write_label_csv(&dir.join("truths.csv"), &ids, data.truths.data(), data.num_labels())
}

fn report(trainer: &Trainer, data: &SyntheticDataset, started: Instant) -> Result<(RunReport, Vec<f64>)> {
    let (metrics, scores) = evaluate(&trainer.model, data, trainer.cfg.train.batch_size)?;
    let report = RunReport {
        config: trainer.cfg.clone(),
        dataset: data.meta.clone(),
        dataset_sha256: data.digest(),
        metrics,
        counts: count_params_flops(&trainer.cfg.model)?,
        epochs_run: trainer.state.epoch,
        steps: trainer.state.step,
        final_loss: trainer.state.loss_history.last().copied(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, scores))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, data, out } => {
            let started = Instant::now();
            let cfg = RunConfig::load(&config)?;
            let data = SyntheticDataset::load(&data)?;
            create_dir(&out)?;
            let mut trainer = Trainer::new(&cfg)?;
            trainer.fit(&data, |r| {
                println!("epoch {} loss {:.6} train_map {:.6} lr {:e}", r.epoch + 1, r.mean_loss, r.train_map, r.lr)
            })?;
            save_checkpoint(&trainer, &out.join("checkpoint.hsva"))?;
            let steps: String = trainer.state.loss_history.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
            write_file(&out.join("losses.csv"), format!("step,loss\n{steps}"))?;
            let (report, scores) = report(&trainer, &data, started)?;
            write_predictions(&out, &data, &scores)?;
            write_file(&out.join("report.json"), report.to_json())?;
            println!("{report}");
        }
        Command::Eval { checkpoint, data, out } => {
            let started = Instant::now();
            let trainer = load_checkpoint(&checkpoint)?;
            let data = SyntheticDataset::load(&data)?;
            let (report, scores) = report(&trainer, &data, started)?;
            if let Some(out) = out {
                create_dir(&out)?;
                write_predictions(&out, &data, &scores)?;
                write_file(&out.join("report.json"), report.to_json())?;
            }
            println!("{report}");
        }
        Command::GenData { seed, images, labels, size, out } => {
            let data = SyntheticDataset::generate(seed, images, labels, size)?;
            data.save(&out)?;
            println!("sha256: {}", data.digest());
        }
        Command::Gradcheck { module, seeds } => {
            let target: GradTarget = module.parse()?;
            let started = Instant::now();
            let lines = run_grad_checks(target, &(0..seeds).collect::<Vec<_>>())?;
            let failed = lines.iter().filter(|l| !l.report.pass).count();
            for line in &lines {
                println!("{line}");
            }
            println!(
                "{} checks, {failed} failed, {:.1}s",
                lines.len(),
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                eprintln!("error: gradcheck: {failed} of {} checks failed", lines.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Count { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", count_params_flops(&cfg.model)?);
        }
        Command::Ablate { axis, config, data, out } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = RunConfig::load(&config)?;
            let data = match data {
                Some(dir) => SyntheticDataset::load(&dir)?,
                None => SyntheticDataset::generate(cfg.model.seed, 64, cfg.model.num_labels, cfg.model.image_size[0])?,
            };
            create_dir(&out)?;
            let table = ablation_sweep(&cfg, axis, &data, &out, |r| {
                println!("{}: mAP {:.4} after {} epochs", r.label, r.metrics.map, r.epochs_run)
            })?;
            write_file(&out.join("table.md"), table.to_markdown())?;
            write_file(&out.join("table.csv"), table.to_csv())?;
            print!("{}", table.to_markdown());
        }
        Command::Inspect { checkpoint, image, out } => {
            let trainer = load_checkpoint(&checkpoint)?;
            let img = read_container(&image)?;
            let img = match img.rank() {
                3 => img.reshape(&[1, img.dim(0), img.dim(1), img.dim(2)])?,
                _ => img,
            };
            create_dir(&out)?;
            let (_, enc) = no_grad(|| trainer.model.forward_features(&img, Mode::Eval))?;
            for ((stage, block), att) in &enc.attention {
                let path = out.join(format!("att_stage{stage}_block{}.hsvt", block + 1));
                write_container(&path, &att.0, Precision::F64)?;
                println!("{} {:?}", path.display(), att.0.shape());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
