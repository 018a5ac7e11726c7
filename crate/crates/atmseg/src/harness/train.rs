//! Training loop, run records, and the ablation matrix.

use super::{prepare_data, AtmNet, PromptChoice, RunConfig};
use crate::ccae::total_loss;
use crate::dataio::{random_distort, SliceSample};
use crate::error::{AtmError, Result};
use crate::metrics::MetricsReport;
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Graph};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub dice_focal: f64,
    /// Absent when the contrastive branch is off.
    pub ftc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub losses: Vec<StepLoss>,
    pub final_metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// `losses.csv` body: one row per step.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,lr,total,dice_focal,ftc\n");
        for l in &self.losses {
            let ftc = l.ftc.map(|v| format!("{v:.8}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.10e},{:.8},{:.8},{}\n",
                l.step, l.lr, l.total, l.dice_focal, ftc
            ));
        }
        out
    }
}

fn mix_seed(seed: u64, step: usize, slot: usize) -> u64 {
    // splitmix-style mixing keeps per-sample distortion seeds independent
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((slot as u64) << 32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train per the run config: sample a batch, generate prompts, encode, fuse,
/// take the Dice+Focal (and contrastive, when enabled) losses, and step AdamW
/// under the cosine schedule. Deterministic given the seed. When `out_dir` is
/// given, checkpoints, `losses.csv`, and `report.json`/`report.csv` land
/// there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    train_labeled(cfg, out_dir, "run")
}

fn train_labeled(cfg: &RunConfig, out_dir: Option<&Path>, label: &str) -> Result<RunRecord> {
    let started = Instant::now();
    let mut model = AtmNet::new(cfg)?;
    let data = prepare_data(cfg, &model.taxonomy)?;
    if data.train.is_empty() {
        return Err(AtmError::InvalidArgument("training split is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { weight_decay: cfg.optimizer.weight_decay, ..AdamWConfig::default() },
    );
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a_5a5a);
    let steps = cfg.optimizer.steps;
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let lr = cosine_lr(step, steps, cfg.optimizer.lr, cfg.optimizer.lr_min);
        let mut g = Graph::new(true);
        let mut totals = Vec::with_capacity(cfg.optimizer.batch);
        let mut df_sum = 0.0;
        let mut ftc_sum: Option<f64> = None;
        for slot in 0..cfg.optimizer.batch {
            let idx = sampler.gen_range(0..data.train.len());
            let sample: SliceSample = if cfg.augment_strength > 0.0 {
                random_distort(
                    &data.train[idx],
                    cfg.augment_strength,
                    mix_seed(cfg.seed, step, slot),
                )?
            } else {
                data.train[idx].clone()
            };
            let out = model.forward_train(&mut g, &sample)?;
            df_sum += g.scalar(out.dice_focal);
            if let Some(f) = out.ftc {
                *ftc_sum.get_or_insert(0.0) += g.scalar(f);
            }
            let total = total_loss(&mut g, out.dice_focal, out.ftc, &cfg.contrastive);
            totals.push(total);
        }
        let mut batch_loss = totals[0];
        for &t in &totals[1..] {
            batch_loss = g.add(batch_loss, t);
        }
        let batch_loss = g.affine(batch_loss, 1.0 / cfg.optimizer.batch as f64, 0.0);

        let loss_value = g.scalar(batch_loss);
        if !loss_value.is_finite() {
            let snapshot = serde_json::json!({
                "step": step,
                "lr": lr,
                "loss": format!("{loss_value}"),
                "recent": &losses[losses.len().saturating_sub(5)..],
            });
            if let Some(dir) = out_dir {
                std::fs::write(dir.join("diagnostic.json"), snapshot.to_string())?;
            }
            return Err(AtmError::Numeric(format!(
                "non-finite loss {loss_value} at step {step}; diagnostic snapshot {}",
                snapshot
            )));
        }

        let mut grads = g.backward(batch_loss);
        let param_grads = g.param_grads(&mut grads);
        drop(grads);
        drop(g);
        opt.step(&mut model.store, &param_grads, lr);

        losses.push(StepLoss {
            step,
            lr,
            total: loss_value,
            dice_focal: df_sum / cfg.optimizer.batch as f64,
            ftc: ftc_sum.map(|s| s / cfg.optimizer.batch as f64),
        });

        if let Some(dir) = out_dir {
            if (step + 1) % cfg.checkpoint_every == 0 && step + 1 < steps {
                model.save_checkpoint(dir.join(format!("checkpoint_{:06}.atm", step + 1)), step + 1)?;
            }
        }
    }

    let eval_pool = if data.test.is_empty() { &data.train } else { &data.test };
    let final_metrics = Some(model.evaluate_samples(eval_pool)?);

    let record = RunRecord {
        label: label.to_string(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        losses,
        final_metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        model.save_checkpoint(dir.join("checkpoint_final.atm"), steps)?;
        std::fs::write(dir.join("losses.csv"), record.losses_csv())?;
        if let Some(report) = &record.final_metrics {
            std::fs::write(dir.join("report.json"), report.to_json()?)?;
            std::fs::write(dir.join("report.csv"), report.to_csv(label))?;
        }
    }
    Ok(record)
}

/// The two ablation matrices with a shared seed: the 4-row HASF x CCAE grid
/// (at the base prompt option), then the 4-row prompt-option grid
/// (none/1/2/3, contrastive branch off). Returns all eight run records.
pub fn ablate(base: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<RunRecord>> {
    let mut records = Vec::with_capacity(8);
    let base_prompt = match base.prompt_option {
        PromptChoice::None => PromptChoice::Opt3,
        p => p,
    };

    for (hasf_on, ccae_on) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut cfg = base.clone();
        cfg.modules.hasf_on = hasf_on;
        cfg.modules.ccae_on = ccae_on;
        cfg.prompt_option = if hasf_on { base_prompt } else { PromptChoice::None };
        cfg.normalize();
        let label = format!("hasf{}_ccae{}", hasf_on as u8, ccae_on as u8);
        let sub = out_dir.map(|d| d.join(&label));
        records.push(train_labeled(&cfg, sub.as_deref(), &label)?);
    }

    for prompt in [PromptChoice::None, PromptChoice::Opt1, PromptChoice::Opt2, PromptChoice::Opt3] {
        let mut cfg = base.clone();
        cfg.prompt_option = prompt;
        cfg.modules.hasf_on = prompt != PromptChoice::None;
        cfg.modules.ccae_on = false;
        cfg.normalize();
        let label = match prompt {
            PromptChoice::None => "prompt_none".to_string(),
            PromptChoice::Opt1 => "prompt_opt1".to_string(),
            PromptChoice::Opt2 => "prompt_opt2".to_string(),
            PromptChoice::Opt3 => "prompt_opt3".to_string(),
        };
        let sub = out_dir.map(|d| d.join(&label));
        records.push(train_labeled(&cfg, sub.as_deref(), &label)?);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), ablation_csv(&records))?;
    }
    Ok(records)
}

/// Combined table over ablation runs: one row per run with the aggregate
/// metrics.
pub fn ablation_csv(records: &[RunRecord]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NaN".into());
    let mut out = String::from("run,config_hash,dsc,jaccard,hd95,asd\n");
    for r in records {
        let agg = r.final_metrics.as_ref().map(|m| m.aggregate.clone()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.config_hash,
            fmt(agg.dsc),
            fmt(agg.jaccard),
            fmt(agg.hd95),
            fmt(agg.asd)
        ));
    }
    out
}
