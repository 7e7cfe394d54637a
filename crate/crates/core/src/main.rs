use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rectseg::config::{ExperimentConfig, PseudoSource};
use rectseg::error::{Error, Result};
use rectseg::eval::evaluate_checkpoint;
use rectseg::experiment::{
    compare_uncertainty, manifest_text, metrics_rows, parse_methods, run_pipeline, run_sweep,
    sha256_hex, source_model, table_header, Datasets, OutputLog, METRICS_HEADER, SWEEP_TAUS,
};
use rectseg::image::Image;
use rectseg::model::TwoHeadSegNet;
use rectseg::pseudo::{generate_pseudo_labels, load_pseudo, save_pseudo};
use rectseg::synthdata::{load_dataset, ShiftPreset};
use rectseg::train::adapt;

#[derive(Parser)]
#[command(
    name = "rectseg",
    version,
    about = "Pseudo-label self-training with rectified loss on synthetic segmentation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write source, source_test, target and target_test datasets.
    GenData {
        #[arg(long)]
        shift_preset: Option<ShiftPreset>,
    },
    /// Train a source model on a labeled dataset directory.
    Pretrain {
        /// Source dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Half the pretraining iterations.
        #[arg(long)]
        weak: bool,
    },
    /// Freeze primary-head pseudo labels for a dataset.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a source checkpoint on target images and pseudo labels.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
    },
    /// mIoU of a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Data, pretraining, pseudo labels, adaptation and evaluation in one run.
    Pipeline,
    /// Rectified run and one thresholded run per tau from shared pseudo labels.
    SweepThreshold {
        /// Comma-separated thresholds.
        #[arg(long)]
        taus: Option<String>,
    },
    /// Right/wrong certainty of several uncertainty estimators.
    CompareUncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "kl,mse,mc:0.5:10")]
        methods: String,
        #[arg(long)]
        heatmaps: Option<usize>,
    },
    /// Collect metrics.csv files from run directories into one table.
    Report { runs: Vec<PathBuf> },
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, Vec<(String, String)>)> {
    let (mut cfg, inputs) = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let cfg = ExperimentConfig::from_text(&text)?;
            (
                cfg,
                vec![(p.display().to_string(), sha256_hex(text.as_bytes()))],
            )
        }
        None => (ExperimentConfig::default(), Vec::new()),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok((cfg, inputs))
}

fn checksum_file(p: &Path) -> Result<(String, String)> {
    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    Ok((p.display().to_string(), sha256_hex(&bytes)))
}

fn write_manifest(
    out: &Path,
    cfg: &ExperimentConfig,
    run: &str,
    inputs: &[(String, String)],
    log: &OutputLog,
    t0: std::time::Instant,
) -> Result<()> {
    let text = manifest_text(
        cfg,
        run,
        None,
        inputs,
        log.files(),
        t0.elapsed().as_secs_f64(),
    );
    let p = out.join("manifest.txt");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn run(cli: Cli) -> Result<()> {
    let t0 = std::time::Instant::now();
    let (mut cfg, mut inputs) = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.cmd {
        Cmd::GenData { shift_preset } => {
            if let Some(p) = shift_preset {
                cfg.shift_preset = p;
            }
            let data = Datasets::generate(&cfg)?;
            data.save(out, &cfg)?;
            println!(
                "wrote {} / {} / {} / {} images to {}",
                data.source.len(),
                data.source_test.len(),
                data.target.len(),
                data.target_test.len(),
                out.display()
            );
        }
        Cmd::Pretrain { data, weak } => {
            let src = match &data {
                Some(d) => {
                    inputs.push(checksum_file(&d.join("manifest.txt"))?);
                    load_dataset(d)?
                }
                None => Datasets::generate(&cfg)?.source,
            };
            let which = if weak {
                PseudoSource::Weak
            } else {
                PseudoSource::Strong
            };
            let (net, hist) =
                source_model(&src, &cfg, which).map_err(|e| Error::in_stage("pretrain", e))?;
            let mut log = OutputLog::new(out)?;
            log.write("source.ckpt", &net.to_bytes())?;
            log.write("history_source.csv", hist.to_csv().as_bytes())?;
            write_manifest(out, &cfg, "pretrain", &inputs, &log, t0)?;
            println!(
                "final loss {:.6}",
                hist.rows.last().map_or(f64::NAN, |r| r.loss)
            );
        }
        Cmd::PseudoLabel { checkpoint, data } => {
            let net = TwoHeadSegNet::load(&checkpoint)?;
            let images: Vec<Image> = load_dataset(&data)?.into_iter().map(|d| d.image).collect();
            let pl = generate_pseudo_labels(&net, &images, &checkpoint.display().to_string())?;
            save_pseudo(out, &pl)?;
            println!(
                "wrote {} pseudo-label maps to {}",
                pl.items.len(),
                out.display()
            );
        }
        Cmd::Adapt {
            checkpoint,
            data,
            pseudo,
        } => {
            inputs.push(checksum_file(&checkpoint)?);
            let net = TwoHeadSegNet::load(&checkpoint)?;
            // Only the images are used; any labels in the directory are dropped here.
            let images: Vec<Image> = load_dataset(&data)?.into_iter().map(|d| d.image).collect();
            let pl = load_pseudo(&pseudo)?;
            let (adapted, hist) =
                adapt(&net, &images, &pl, &cfg).map_err(|e| Error::in_stage("adapt", e))?;
            let mut log = OutputLog::new(out)?;
            log.write("adapted.ckpt", &adapted.to_bytes())?;
            log.write("history_adapt.csv", hist.to_csv().as_bytes())?;
            write_manifest(out, &cfg, "adapt", &inputs, &log, t0)?;
            println!(
                "{} iterations, {} skipped batches",
                hist.rows.len(),
                hist.skipped
            );
        }
        Cmd::Eval {
            checkpoint,
            data,
            alpha,
            beta,
        } => {
            let net = TwoHeadSegNet::load(&checkpoint)?;
            let set = load_dataset(&data)?;
            let (a, b) = (alpha.unwrap_or(cfg.alpha), beta.unwrap_or(cfg.beta));
            let r = evaluate_checkpoint(&net, &set, a, b)?;
            let mut log = OutputLog::new(out)?;
            let mut csv = String::from(METRICS_HEADER);
            csv.push_str(&metrics_rows(
                &checkpoint.display().to_string(),
                &data.display().to_string(),
                &r,
            ));
            log.write("metrics.csv", csv.as_bytes())?;
            println!(
                "{}\n{}",
                table_header(net.classes()),
                r.table_row(&format!("alpha {a} beta {b}"))
            );
        }
        Cmd::Pipeline => {
            let o = run_pipeline(&cfg, out, &inputs)?;
            println!(
                "source {:.4} -> adapted {:.4} mIoU on target_test",
                o.source_on_target.miou, o.adapted_on_target.miou
            );
        }
        Cmd::SweepThreshold { taus } => {
            let taus: Vec<f64> = match taus {
                Some(s) => s
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad tau {t:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => SWEEP_TAUS.to_vec(),
            };
            print!("{}", run_sweep(&cfg, out, &taus, &inputs)?);
        }
        Cmd::CompareUncertainty {
            checkpoint,
            dataset,
            methods,
            heatmaps,
        } => {
            let methods = parse_methods(&methods)?;
            let net = TwoHeadSegNet::load(&checkpoint)?;
            let set = load_dataset(&dataset)?;
            let mut log = OutputLog::new(out)?;
            let heat = log.path("heatmaps");
            std::fs::create_dir_all(&heat).map_err(|e| Error::io(&heat, e))?;
            let n = heatmaps.unwrap_or(cfg.heatmaps);
            let (_, csv) = compare_uncertainty(&net, &set, &methods, cfg.seed, Some((&heat, n)))?;
            log.write("uncertainty.csv", csv.as_bytes())?;
            log.adopt_dir("heatmaps")?;
            inputs.push(checksum_file(&checkpoint)?);
            write_manifest(out, &cfg, "compare-uncertainty", &inputs, &log, t0)?;
            print!("{csv}");
        }
        Cmd::Report { runs } => {
            if runs.is_empty() {
                return Err(Error::invalid("report needs at least one run directory"));
            }
            let mut table = String::from(METRICS_HEADER);
            for r in &runs {
                let p = r.join("metrics.csv");
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let mut lines = text.lines();
                if lines.next() != Some(METRICS_HEADER.trim_end()) {
                    return Err(Error::format(&p, "unexpected header"));
                }
                for l in lines {
                    let _ = writeln!(table, "{l}");
                }
            }
            let mut log = OutputLog::new(out)?;
            log.write("combined_metrics.csv", table.as_bytes())?;
            let mut summary = String::new();
            for l in table.lines().skip(1).filter(|l| l.contains(",mIoU,")) {
                let f: Vec<&str> = l.split(',').collect();
                let _ = writeln!(summary, "{:<48} {:<14} {}", f[0], f[1], f[3]);
            }
            log.write("report.txt", summary.as_bytes())?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
