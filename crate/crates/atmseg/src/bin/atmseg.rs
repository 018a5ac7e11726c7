//! Thin CLI over the atmseg library: phantom synthesis, prompt generation,
//! training, evaluation, and the ablation matrix.

use atmseg::atpg::{generate_bundle, PromptOption, PromptRecord, TemplateSet};
use atmseg::dataio::{
    load_dataset, load_label_maps, save_volume_archive, save_volume_png, synth_phantom,
    DatasetConfig, PhantomSpec,
};
use atmseg::error::{AtmError, Result};
use atmseg::harness::{ablate, evaluate_run, resolve_taxonomy, train, RunConfig};
use atmseg::metrics::{evaluate, evaluate_per_volume, EvalOptions, Hd95Mode};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "atmseg", about = "Anatomy-aware text-guided lumbar spine segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Record deterministic mode in the run config (computation is always
    /// deterministic given the seed).
    #[arg(long)]
    deterministic: bool,
    /// Output directory for checkpoints, losses.csv, and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split, or a prediction directory
    /// against a ground-truth directory.
    Evaluate {
        /// Checkpoint to evaluate (mutually exclusive with --pred/--gt).
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        /// Split to score a checkpoint on.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory of predicted label maps (lab_<k>.png per volume).
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth label maps.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Taxonomy name (MRSpineSeg, SPIDER) or taxonomy JSON path.
        #[arg(long, default_value = "MRSpineSeg")]
        taxonomy: String,
        /// Average per volume instead of per slice.
        #[arg(long)]
        per_volume: bool,
        /// Pixel spacing factor applied to surface distances.
        #[arg(long, default_value_t = 1.0)]
        pixel_spacing: f64,
        /// HD95 pooling mode: pooled or max-directed.
        #[arg(long, default_value = "pooled")]
        hd95_mode: String,
        /// Report path; format from the extension (.json or .csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HASF x CCAE and prompt-option ablation matrices.
    Ablate(TrainArgs),
    /// Emit holistic and channel prompts for every slice of a dataset.
    GeneratePrompts {
        /// Dataset root.
        #[arg(long)]
        dataset: PathBuf,
        /// Holistic granularity option (1, 2, or 3).
        #[arg(long, default_value_t = 3)]
        option: u8,
        /// Taxonomy name or JSON path; overrides the dataset config.
        #[arg(long)]
        taxonomy: Option<String>,
        /// Use the original ATM-Net example wording.
        #[arg(long)]
        paper_verbatim: bool,
        /// Custom template TOML.
        #[arg(long, conflicts_with = "paper_verbatim")]
        templates: Option<PathBuf>,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic phantom dataset.
    Synth {
        /// Synthesis spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },
}

/// JSON job description for `atmseg synth`.
#[derive(Deserialize)]
struct SynthJobSpec {
    taxonomy: String,
    volumes: usize,
    image_size: usize,
    n_vertebrae: usize,
    noise_sigma: f64,
    seed: u64,
    /// "png" (default) or "vol".
    #[serde(default = "default_format")]
    format: String,
}

fn default_format() -> String {
    "png".into()
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if args.deterministic {
                cfg.deterministic = true;
            }
            let record = train(&cfg, Some(&args.out))?;
            println!(
                "run {} finished: {} steps in {:.1}s, final loss {:.6}",
                record.config_hash,
                record.losses.len(),
                record.wall_clock_secs,
                record.losses.last().map(|l| l.total).unwrap_or(f64::NAN)
            );
            if let Some(m) = &record.final_metrics {
                println!(
                    "aggregate: dsc {:?} jaccard {:?} hd95 {:?} asd {:?}",
                    m.aggregate.dsc, m.aggregate.jaccard, m.aggregate.hd95, m.aggregate.asd
                );
            }
            Ok(())
        }
        Command::Ablate(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let records = ablate(&cfg, Some(&args.out))?;
            println!("{}", atmseg::harness::ablation_csv(&records));
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            split,
            pred,
            gt,
            taxonomy,
            per_volume,
            pixel_spacing,
            hd95_mode,
            out,
        } => {
            let opts = EvalOptions {
                pixel_spacing,
                hd95_mode: match hd95_mode.as_str() {
                    "pooled" => Hd95Mode::Pooled,
                    "max-directed" => Hd95Mode::MaxDirected,
                    other => {
                        return Err(AtmError::InvalidArgument(format!(
                            "unknown hd95 mode '{other}'"
                        )))
                    }
                },
            };
            let report = match (checkpoint, pred, gt) {
                (Some(ckpt), None, None) => evaluate_run(ckpt, &split)?,
                (None, Some(pred), Some(gt)) => {
                    let tax = resolve_taxonomy(&taxonomy)?;
                    let pred_maps = load_label_maps(&pred, &tax)?;
                    let gt_maps = load_label_maps(&gt, &tax)?;
                    if pred_maps.len() != gt_maps.len() {
                        return Err(AtmError::InvalidArgument(format!(
                            "{} predictions vs {} ground truths",
                            pred_maps.len(),
                            gt_maps.len()
                        )));
                    }
                    for (p, g) in pred_maps.iter().zip(gt_maps.iter()) {
                        if (&p.0, p.1) != (&g.0, g.1) {
                            return Err(AtmError::InvalidArgument(format!(
                                "misaligned slices: prediction {}/{} vs ground truth {}/{}",
                                p.0, p.1, g.0, g.1
                            )));
                        }
                    }
                    let preds: Vec<_> = pred_maps.iter().map(|x| x.2.clone()).collect();
                    let gts: Vec<_> = gt_maps.iter().map(|x| x.2.clone()).collect();
                    if per_volume {
                        let vols: Vec<String> = gt_maps.iter().map(|x| x.0.clone()).collect();
                        evaluate_per_volume(&preds, &gts, &vols, &tax, &opts)?
                    } else {
                        evaluate(&preds, &gts, &tax, &opts)?
                    }
                }
                _ => {
                    return Err(AtmError::InvalidArgument(
                        "pass either --checkpoint or both --pred and --gt".into(),
                    ))
                }
            };
            let text = match out.extension().and_then(|e| e.to_str()) {
                Some("csv") => report.to_csv("eval"),
                _ => report.to_json()?,
            };
            std::fs::write(&out, text)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::GeneratePrompts { dataset, option, taxonomy, paper_verbatim, templates, out } => {
            let option = PromptOption::from_index(option)?;
            let ds_cfg_path = dataset.join("dataset.toml");
            let (tax_name, remap) = if ds_cfg_path.exists() {
                let ds = DatasetConfig::load(&ds_cfg_path)?;
                (taxonomy.unwrap_or(ds.taxonomy), ds.remap_table()?)
            } else {
                (taxonomy.unwrap_or_else(|| "MRSpineSeg".into()), None)
            };
            let tax = resolve_taxonomy(&tax_name)?;
            let tset = match templates {
                Some(path) => TemplateSet::load(path)?,
                None if paper_verbatim => TemplateSet::paper_verbatim(),
                None => TemplateSet::default_set(),
            };
            let volumes = load_dataset(&dataset, &tax, remap.as_ref())?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            let mut n = 0usize;
            for v in &volumes {
                for s in &v.slices {
                    let bundle = generate_bundle(s, &tax, option, &tset)?;
                    let record = PromptRecord {
                        volume_id: s.volume_id.clone(),
                        slice_index: s.slice_index,
                        holistic: bundle.holistic,
                        channel: bundle.channel,
                    };
                    serde_json::to_writer(&mut file, &record)?;
                    file.write_all(b"\n")?;
                    n += 1;
                }
            }
            println!("wrote {n} prompt records to {}", out.display());
            Ok(())
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let job: SynthJobSpec = serde_json::from_str(&text)?;
            let tax = resolve_taxonomy(&job.taxonomy)?;
            std::fs::create_dir_all(&out)?;
            for j in 0..job.volumes {
                let pspec = PhantomSpec {
                    image_size: job.image_size,
                    n_vertebrae: job.n_vertebrae,
                    noise_sigma: job.noise_sigma,
                    seed: job.seed + j as u64,
                };
                let slices = synth_phantom(&pspec, &tax)?;
                let volume_id = slices[0].volume_id.clone();
                match job.format.as_str() {
                    "png" => save_volume_png(out.join(&volume_id), &slices)?,
                    "vol" => save_volume_archive(out.join(format!("{volume_id}.vol")), &slices)?,
                    other => {
                        return Err(AtmError::InvalidArgument(format!(
                            "unknown synth format '{other}' (png|vol)"
                        )))
                    }
                }
            }
            let ds_cfg = DatasetConfig {
                taxonomy: tax.name.clone(),
                crop: atmseg::dataio::CropMode::None,
                remap: BTreeMap::new(),
            };
            ds_cfg.save(out.join("dataset.toml"))?;
            println!("wrote {} phantom volumes to {}", job.volumes, out.display());
            Ok(())
        }
    }
}
