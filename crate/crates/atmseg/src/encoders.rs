//! Visual pyramid encoder and text token encoder.
//!
//! Both sit behind a backend switch: `tiny` is a deterministic desk-scale
//! implementation (5 conv blocks for vision; hashed token embeddings plus
//! sinusoidal positions for text), `external` is an adapter interface for
//! pretrained backbones honoring the same shape contract. Adapters are
//! invoked read-only; their weights stay frozen unless the adapter itself
//! implements training (`text_trainable` is reserved for such adapters).

use crate::error::{AtmError, Result};
use crate::nn::{he_normal, sinusoidal_1d, ArrD, Graph, ParamId, ParamStore, Var};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Encoder backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Tiny,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channel widths C_1..C_5 of the five pyramid stages.
    pub visual_widths: [usize; 5],
    /// Token embedding width C of the text encoder.
    pub text_width: usize,
    /// Input side length; must be divisible by 32 so five halvings are exact.
    pub image_size: usize,
    #[serde(default)]
    pub backend: Backend,
    /// Reserved for external adapters that expose trainable parameters.
    #[serde(default)]
    pub text_trainable: bool,
    /// Seed for the tiny text encoder's hashed embedding table.
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
}

fn default_text_seed() -> u64 {
    0x5eed_7e47
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            visual_widths: [16, 32, 64, 128, 256],
            text_width: 64,
            image_size: 384,
            backend: Backend::Tiny,
            text_trainable: false,
            text_seed: default_text_seed(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.visual_widths.iter().any(|&w| w == 0) || self.text_width == 0 {
            return Err(AtmError::Config("encoder widths must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(AtmError::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Width of the stage-0 skip source (full-resolution stem features).
    pub fn stage0_width(&self) -> usize {
        self.visual_widths[0]
    }
}

/// Stage-indexed visual features on the tape: `stages[i-1]` holds f_v^i with
/// shape (H/2^i, W/2^i, C_i); `stage0` is the full-resolution skip source.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub stage0: Var,
    pub stages: [Var; 5],
}

/// Token embeddings for one prompt, `L x C`.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: Array2<f64>,
    pub source_text: String,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.shape()[0] == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

// ---- visual ----

struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Five blocks of (3x3 conv, layer norm, ReLU, 2x average pool). The block-1
/// pre-pool activation doubles as the stage-0 skip source.
pub struct TinyVisualEncoder {
    widths: [usize; 5],
    image_size: usize,
    blocks: Vec<ConvBlock>,
}

impl TinyVisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(5);
        let mut c_in = 1usize;
        for (i, &c_out) in cfg.visual_widths.iter().enumerate() {
            let fan_in = 9 * c_in;
            let w = store.add(format!("enc.block{}.w", i + 1), he_normal(&[fan_in, c_out], fan_in, rng));
            let b = store.add(format!("enc.block{}.b", i + 1), ArrD::zeros(ndarray::IxDyn(&[c_out])));
            let gamma =
                store.add(format!("enc.block{}.gamma", i + 1), ArrD::ones(ndarray::IxDyn(&[c_out])));
            let beta =
                store.add(format!("enc.block{}.beta", i + 1), ArrD::zeros(ndarray::IxDyn(&[c_out])));
            blocks.push(ConvBlock { w, b, gamma, beta });
            c_in = c_out;
        }
        TinyVisualEncoder { widths: cfg.visual_widths, image_size: cfg.image_size, blocks }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Array2<f64>,
    ) -> Result<FeaturePyramid> {
        let (h, w) = image.dim();
        if h != self.image_size || w != self.image_size {
            return Err(AtmError::ShapeMismatch(format!(
                "encoder expects {0}x{0}, got {h}x{w}",
                self.image_size
            )));
        }
        if h % 32 != 0 {
            return Err(AtmError::ShapeMismatch(format!("image size {h} not divisible by 32")));
        }
        let mut x = g.constant(image.clone().insert_axis(ndarray::Axis(2)).into_dyn());
        let mut stage0 = None;
        let mut stages = Vec::with_capacity(5);
        for block in &self.blocks {
            let w = g.param(store, block.w);
            let b = g.param(store, block.b);
            let gamma = g.param(store, block.gamma);
            let beta = g.param(store, block.beta);
            let conv = g.conv3x3(x, w);
            let biased = g.add_bias_last(conv, b);
            let normed = g.layer_norm(biased, gamma, beta, 1e-5);
            let act = g.relu(normed);
            if stage0.is_none() {
                stage0 = Some(act);
            }
            let pooled = g.avg_pool2(act);
            stages.push(pooled);
            x = pooled;
        }
        Ok(FeaturePyramid {
            stage0: stage0.unwrap(),
            stages: stages.try_into().unwrap(),
        })
    }

    pub fn widths(&self) -> [usize; 5] {
        self.widths
    }
}

/// Adapter interface for external pretrained pyramid encoders. Returns the
/// stage-0 skip source followed by the five stage maps, all channel-last.
pub trait VisualAdapter {
    fn widths(&self) -> [usize; 5];
    fn encode(&self, image: &Array2<f64>) -> Result<Vec<Array3<f64>>>;
}

pub enum VisualEncoder {
    Tiny(TinyVisualEncoder),
    External(Box<dyn VisualAdapter>),
}

impl VisualEncoder {
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Array2<f64>,
    ) -> Result<FeaturePyramid> {
        match self {
            VisualEncoder::Tiny(t) => t.forward(g, store, image),
            VisualEncoder::External(a) => {
                let maps = a.encode(image)?;
                if maps.len() != 6 {
                    return Err(AtmError::ShapeMismatch(format!(
                        "adapter returned {} maps, expected stage0 + 5 stages",
                        maps.len()
                    )));
                }
                let (h, w) = image.dim();
                let widths = a.widths();
                for (i, m) in maps.iter().enumerate() {
                    let (eh, ew, ec) = if i == 0 {
                        (h, w, widths[0])
                    } else {
                        (h >> i, w >> i, widths[i - 1])
                    };
                    if m.dim() != (eh, ew, ec) {
                        return Err(AtmError::ShapeMismatch(format!(
                            "adapter stage {i}: got {:?}, expected ({eh}, {ew}, {ec})",
                            m.dim()
                        )));
                    }
                }
                let mut it = maps.into_iter().map(|m| g.constant(m.into_dyn()));
                let stage0 = it.next().unwrap();
                let stages: Vec<Var> = it.collect();
                Ok(FeaturePyramid { stage0, stages: stages.try_into().unwrap() })
            }
        }
    }
}

// ---- text ----

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

/// Whitespace tokenizer + seeded-hash embedding table + sinusoidal position
/// addition. Fully deterministic, no weights, no network access.
pub struct TinyTextEncoder {
    width: usize,
    seed: u64,
}

impl TinyTextEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        TinyTextEncoder { width: cfg.text_width, seed: cfg.text_seed }
    }

    fn token_row(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(token));
        let scale = 1.0 / (self.width as f64).sqrt();
        (0..self.width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(AtmError::InvalidArgument("cannot encode an empty prompt".into()));
        }
        let l = tokens.len();
        let pe = sinusoidal_1d(l, self.width);
        let mut out = Array2::<f64>::zeros((l, self.width));
        for (i, tok) in tokens.iter().enumerate() {
            let row = self.token_row(tok);
            for j in 0..self.width {
                out[[i, j]] = row[j] + pe[[i, j]];
            }
        }
        Ok(TextEmbedding { tokens: out, source_text: prompt.to_string() })
    }
}

/// Adapter interface for external pretrained language models.
pub trait TextAdapter {
    fn width(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<Array2<f64>>;
}

pub enum TextEncoder {
    Tiny(TinyTextEncoder),
    External(Box<dyn TextAdapter>),
}

impl TextEncoder {
    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        match self {
            TextEncoder::Tiny(t) => t.encode(prompt),
            TextEncoder::External(a) => {
                if prompt.split_whitespace().next().is_none() {
                    return Err(AtmError::InvalidArgument("cannot encode an empty prompt".into()));
                }
                let tokens = a.encode(prompt)?;
                if tokens.shape()[0] == 0 || tokens.shape()[1] != a.width() {
                    return Err(AtmError::ShapeMismatch(format!(
                        "adapter embedding {:?} violates L>=1 x width={} contract",
                        tokens.dim(),
                        a.width()
                    )));
                }
                Ok(TextEmbedding { tokens, source_text: prompt.to_string() })
            }
        }
    }

    pub fn width(&self) -> usize {
        match self {
            TextEncoder::Tiny(t) => t.width,
            TextEncoder::External(a) => a.width(),
        }
    }
}
