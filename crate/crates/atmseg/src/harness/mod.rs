//! Run configuration, model assembly, and evaluation orchestration.
//!
//! A [`RunConfig`] (TOML, flat dotted keys) fully determines a run: dataset
//! or phantom corpus, taxonomy, encoder/fusion/contrastive settings, module
//! toggles, optimizer schedule, and seed. Configs are canonicalized (sorted
//! dotted keys) before hashing so records are stable across formatting.

mod train;

pub use train::{ablate, train, StepLoss};

use crate::atpg::{generate_bundle, PromptOption, TemplateSet};
use crate::ccae::{build_text_channels, build_visual_channels, ftc_loss, CcaeBridge, ContrastiveConfig};
use crate::dataio::{
    load_dataset, preprocess, stratified_split, synth_phantom, CropMode, DatasetConfig,
    PhantomSpec, SliceSample, Volume,
};
use crate::encoders::{
    Backend, EncoderConfig, TextEncoder, TinyTextEncoder, TinyVisualEncoder, VisualEncoder,
};
use crate::error::{AtmError, Result};
use crate::hasf::{dice_focal_loss, FusionOutput, Hasf, HasfConfig, LossConfig};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::nn::{Graph, ParamStore, Var};
use crate::taxonomy::{builtin_taxonomy, ClassTaxonomy, Dataset};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Where training data comes from: an on-disk dataset root or a generated
/// phantom corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Root { root: PathBuf },
    Phantom { phantom: PhantomCorpusSpec },
}

/// A corpus of phantom volumes; volume `j` uses `seed + j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomCorpusSpec {
    pub volumes: usize,
    pub n_vertebrae: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Holistic prompt choice; `none` disables the text branch entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptChoice {
    None,
    Opt1,
    Opt2,
    Opt3,
}

impl PromptChoice {
    pub fn option(self) -> Option<PromptOption> {
        match self {
            PromptChoice::None => None,
            PromptChoice::Opt1 => Some(PromptOption::Opt1),
            PromptChoice::Opt2 => Some(PromptOption::Opt2),
            PromptChoice::Opt3 => Some(PromptOption::Opt3),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Modules {
    pub hasf_on: bool,
    pub ccae_on: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Only "adamw" is supported.
    #[serde(default = "default_kind")]
    pub kind: String,
    pub lr: f64,
    pub lr_min: f64,
    /// Only "cosine" is supported.
    #[serde(default = "default_schedule")]
    pub schedule: String,
    pub batch: usize,
    pub steps: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_kind() -> String {
    "adamw".into()
}

fn default_schedule() -> String {
    "cosine".into()
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            lr: 1e-4,
            lr_min: 1e-6,
            schedule: default_schedule(),
            batch: 8,
            steps: 500,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub taxonomy: String,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub hasf: HasfConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub prompt_option: PromptChoice,
    pub modules: Modules,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Elastic augmentation strength in [0,1]; 0 disables.
    #[serde(default)]
    pub augment_strength: f64,
    /// Use the verbatim prompt template set.
    #[serde(default)]
    pub paper_verbatim: bool,
    /// Optional custom template file.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    500
}

impl RunConfig {
    /// Parse from TOML and normalize: `prompt_option = "none"` forces
    /// `hasf_on = false`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| AtmError::Config(format!("run config: {e}")))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtmError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn normalize(&mut self) {
        if self.prompt_option == PromptChoice::None {
            self.modules.hasf_on = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr >= self.optimizer.lr_min && self.optimizer.lr_min > 0.0) {
            return Err(AtmError::Config(format!(
                "need lr >= lr_min > 0, got {} and {}",
                self.optimizer.lr, self.optimizer.lr_min
            )));
        }
        if self.optimizer.batch == 0 || self.optimizer.steps == 0 {
            return Err(AtmError::Config("batch and steps must be >= 1".into()));
        }
        if self.optimizer.kind != "adamw" {
            return Err(AtmError::Config(format!("unsupported optimizer '{}'", self.optimizer.kind)));
        }
        if self.optimizer.schedule != "cosine" {
            return Err(AtmError::Config(format!(
                "unsupported schedule '{}'",
                self.optimizer.schedule
            )));
        }
        if !(0.0..=1.0).contains(&self.augment_strength) {
            return Err(AtmError::Config("augment_strength must be in [0,1]".into()));
        }
        if self.modules.hasf_on && self.prompt_option == PromptChoice::None {
            return Err(AtmError::Config("hasf_on requires a prompt option".into()));
        }
        self.encoder.validate()?;
        self.hasf.validate(&self.encoder.visual_widths)?;
        self.contrastive.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| AtmError::Config(format!("serialize config: {e}")))
    }

    /// Canonical form: sorted `dotted.key = json-value` lines.
    pub fn canonical(&self) -> Result<String> {
        let value =
            toml::Value::try_from(self).map_err(|e| AtmError::Config(format!("canonicalize: {e}")))?;
        let mut lines = Vec::new();
        flatten_value("", &value, &mut lines);
        lines.sort();
        Ok(lines.join("\n"))
    }

    /// Hex digest of the canonical config.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical()?.as_bytes());
        let digest = hasher.finalize();
        Ok(hex_prefix(&digest, 16))
    }

    pub fn resolve_taxonomy(&self) -> Result<ClassTaxonomy> {
        resolve_taxonomy(&self.taxonomy)
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()[..n].to_string()
}

fn flatten_value(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_value(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Accept a builtin name (MRSpineSeg, SPIDER) or a path to a taxonomy JSON.
pub fn resolve_taxonomy(name_or_path: &str) -> Result<ClassTaxonomy> {
    if let Ok(ds) = name_or_path.parse::<Dataset>() {
        return Ok(builtin_taxonomy(ds));
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return ClassTaxonomy::from_json(&text);
    }
    Err(AtmError::InvalidArgument(format!(
        "taxonomy '{name_or_path}' is neither a builtin dataset nor a readable JSON file"
    )))
}

// ---- data preparation ----

/// Flattened, preprocessed train/val/test slice pools.
pub struct PreparedData {
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

/// Override for the dataset root via environment, used by the CLI.
pub const DATA_ROOT_ENV: &str = "ATMSEG_DATA_ROOT";

pub fn prepare_data(cfg: &RunConfig, taxonomy: &ClassTaxonomy) -> Result<PreparedData> {
    let size = cfg.encoder.image_size;
    let volumes: Vec<Volume> = match &cfg.dataset {
        DatasetSource::Root { root } => {
            let root = match std::env::var(DATA_ROOT_ENV) {
                Ok(v) if !v.is_empty() => PathBuf::from(v),
                _ => root.clone(),
            };
            let ds_cfg_path = root.join("dataset.toml");
            let (crop, remap) = if ds_cfg_path.exists() {
                let ds_cfg = DatasetConfig::load(&ds_cfg_path)?;
                if !ds_cfg.taxonomy.eq_ignore_ascii_case(&taxonomy.name) {
                    return Err(AtmError::Config(format!(
                        "dataset declares taxonomy '{}', run uses '{}'",
                        ds_cfg.taxonomy, taxonomy.name
                    )));
                }
                (ds_cfg.crop, ds_cfg.remap_table()?)
            } else {
                (CropMode::RegionMean, None)
            };
            let mut volumes = load_dataset(&root, taxonomy, remap.as_ref())?;
            for v in &mut volumes {
                for s in &mut v.slices {
                    *s = preprocess(s, size, crop)?;
                }
            }
            volumes
        }
        DatasetSource::Phantom { phantom } => {
            let mut volumes = Vec::with_capacity(phantom.volumes);
            for j in 0..phantom.volumes {
                let spec = PhantomSpec {
                    image_size: size,
                    n_vertebrae: phantom.n_vertebrae,
                    noise_sigma: phantom.noise_sigma,
                    seed: phantom.seed + j as u64,
                };
                let slices = synth_phantom(&spec, taxonomy)?;
                volumes.push(Volume { volume_id: slices[0].volume_id.clone(), slices });
            }
            volumes
        }
    };

    if volumes.len() < 3 {
        // too few volumes to split; train on everything, validate/test on it too
        let all: Vec<SliceSample> = volumes.into_iter().flat_map(|v| v.slices).collect();
        return Ok(PreparedData { train: all.clone(), val: all.clone(), test: all });
    }

    let summaries: Vec<(String, std::collections::BTreeSet<u32>)> =
        volumes.iter().map(|v| (v.volume_id.clone(), v.present_ids())).collect();
    let split = stratified_split(&summaries, (8, 1, 1), cfg.seed)?;
    let pick = |ids: &[String]| -> Vec<SliceSample> {
        volumes
            .iter()
            .filter(|v| ids.contains(&v.volume_id))
            .flat_map(|v| v.slices.clone())
            .collect()
    };
    Ok(PreparedData { train: pick(&split.train), val: pick(&split.val), test: pick(&split.test) })
}

// ---- model assembly ----

/// The assembled network: encoders, fusion decoder, and the optional
/// contrastive bridge, sharing one parameter store.
pub struct AtmNet {
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub hasf: Hasf,
    pub bridge: Option<CcaeBridge>,
    pub taxonomy: ClassTaxonomy,
    pub templates: TemplateSet,
    pub cfg: RunConfig,
}

/// Loss nodes produced by one training forward pass.
pub struct SampleLosses {
    pub fusion: FusionOutput,
    pub dice_focal: Var,
    pub ftc: Option<Var>,
}

impl AtmNet {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.encoder.backend == Backend::External {
            return Err(AtmError::Config(
                "backend=external requires adapters; construct via AtmNet::with_adapters".into(),
            ));
        }
        let taxonomy = cfg.resolve_taxonomy()?;
        let templates = match (&cfg.templates, cfg.paper_verbatim) {
            (Some(path), _) => TemplateSet::load(path)?,
            (None, true) => TemplateSet::paper_verbatim(),
            (None, false) => TemplateSet::default_set(),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let visual = VisualEncoder::Tiny(TinyVisualEncoder::new(&mut store, &cfg.encoder, &mut rng));
        let text = TextEncoder::Tiny(TinyTextEncoder::new(&cfg.encoder));
        let hasf = Hasf::new(
            &mut store,
            cfg.hasf.clone(),
            cfg.encoder.visual_widths,
            cfg.encoder.text_width,
            taxonomy.num_classes(),
            &mut rng,
        )?;
        let bridge = if cfg.modules.ccae_on {
            Some(CcaeBridge::new(
                &mut store,
                cfg.contrastive.bridge,
                cfg.encoder.stage0_width(),
                cfg.encoder.text_width,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(AtmNet { store, visual, text, hasf, bridge, taxonomy, templates, cfg: cfg.clone() })
    }

    /// One training forward pass for a sample: fusion output plus loss nodes
    /// per the module toggles.
    pub fn forward_train(&self, g: &mut Graph, sample: &SliceSample) -> Result<SampleLosses> {
        let pyramid = self.visual.encode(g, &self.store, &sample.image)?;
        let text_embedding = match (self.cfg.modules.hasf_on, self.cfg.prompt_option.option()) {
            (true, Some(option)) => {
                let bundle = generate_bundle(sample, &self.taxonomy, option, &self.templates)?;
                Some(self.text.encode(&bundle.holistic)?)
            }
            _ => None,
        };
        let fusion = self.hasf.forward(g, &self.store, &pyramid, text_embedding.as_ref())?;
        let dice_focal = dice_focal_loss(
            g,
            fusion.f_o_flat,
            &sample.label,
            self.taxonomy.num_classes(),
            &self.cfg.loss,
        );
        let ftc = match (&self.bridge, self.cfg.modules.ccae_on) {
            (Some(bridge), true) => {
                let prompts = crate::atpg::generate_channel_prompts(
                    &sample.label,
                    &self.taxonomy,
                    &self.templates,
                );
                let embeddings: Vec<_> =
                    prompts.iter().map(|p| self.text.encode(p)).collect::<Result<_>>()?;
                let mut text_mat = build_text_channels(&embeddings)?;
                if !self.cfg.contrastive.include_background {
                    text_mat = text_mat.slice(ndarray::s![1.., ..]).to_owned();
                }
                let text_var = g.constant(text_mat.into_dyn());
                let vis = build_visual_channels(
                    g,
                    &self.store,
                    fusion.f_o_flat,
                    fusion.dec0_flat,
                    bridge,
                    self.cfg.contrastive.include_background,
                );
                Some(ftc_loss(g, vis, text_var, self.cfg.contrastive.temperature)?)
            }
            _ => None,
        };
        Ok(SampleLosses { fusion, dice_focal, ftc })
    }

    /// Argmax prediction for one slice (no gradients).
    pub fn predict(&self, sample: &SliceSample) -> Result<Array2<u8>> {
        let mut g = Graph::new(false);
        let pyramid = self.visual.encode(&mut g, &self.store, &sample.image)?;
        let text_embedding = match (self.cfg.modules.hasf_on, self.cfg.prompt_option.option()) {
            (true, Some(option)) => {
                let bundle = generate_bundle(sample, &self.taxonomy, option, &self.templates)?;
                Some(self.text.encode(&bundle.holistic)?)
            }
            _ => None,
        };
        let fusion = self.hasf.forward(&mut g, &self.store, &pyramid, text_embedding.as_ref())?;
        let flat = g.value(fusion.f_o_flat);
        let (h, w) = sample.image.dim();
        let s = self.taxonomy.num_classes();
        let mut out = Array2::<u8>::zeros((h, w));
        let flat2 = flat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (i, row) in flat2.rows().into_iter().enumerate() {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for (c, &p) in row.iter().enumerate().take(s) {
                if p > bv {
                    bv = p;
                    best = c;
                }
            }
            out[[i / w, i % w]] = best as u8;
        }
        Ok(out)
    }

    /// Predict a set of slices and score them against their labels.
    pub fn evaluate_samples(&self, samples: &[SliceSample]) -> Result<MetricsReport> {
        let mut preds = Vec::with_capacity(samples.len());
        let mut gts = Vec::with_capacity(samples.len());
        for s in samples {
            preds.push(self.predict(s)?);
            gts.push(s.label.clone());
        }
        evaluate(&preds, &gts, &self.taxonomy, &EvalOptions::default())
    }

    // ---- checkpointing ----

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, step: usize) -> Result<()> {
        let mut archive = crate::archive::Archive::new();
        for (name, value) in self.store.iter() {
            archive.insert_f64(format!("param.{name}"), value.clone());
        }
        archive.meta.insert("config".into(), self.cfg.to_toml()?);
        archive.meta.insert("config_hash".into(), self.cfg.hash()?);
        archive.meta.insert("taxonomy".into(), self.taxonomy.name.clone());
        archive.meta.insert("taxonomy_json".into(), self.taxonomy.to_json()?);
        archive.meta.insert("step".into(), step.to_string());
        archive.write_file(path)
    }

    /// Rebuild a model from a checkpoint (config travels inside).
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let archive = crate::archive::Archive::read_file(&path)?;
        let config_text = archive
            .meta
            .get("config")
            .ok_or_else(|| AtmError::Checkpoint("checkpoint missing embedded config".into()))?;
        let cfg = RunConfig::from_toml(config_text)?;
        let mut model = AtmNet::new(&cfg)?;
        for id in model.store.ids() {
            let name = format!("param.{}", model.store.name(id));
            let stored = archive.get_f64(&name)?;
            if stored.shape() != model.store.value(id).shape() {
                return Err(AtmError::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    stored.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = stored.clone();
        }
        Ok(model)
    }

    /// Score a checkpoint against a named split of its configured dataset.
    pub fn evaluate_split(&self, split: &str) -> Result<MetricsReport> {
        let data = prepare_data(&self.cfg, &self.taxonomy)?;
        let samples = match split {
            "train" => &data.train,
            "val" => &data.val,
            "test" => &data.test,
            other => {
                return Err(AtmError::InvalidArgument(format!(
                    "unknown split '{other}' (train|val|test)"
                )))
            }
        };
        if samples.is_empty() {
            return Err(AtmError::InvalidArgument(format!("split '{split}' is empty")));
        }
        self.evaluate_samples(samples)
    }
}

/// Evaluate a checkpoint file against a dataset split, checking that the
/// checkpoint's taxonomy matches the dataset's.
pub fn evaluate_run(checkpoint: impl AsRef<Path>, split: &str) -> Result<MetricsReport> {
    let model = AtmNet::load_checkpoint(checkpoint)?;
    model.evaluate_split(split)
}
