//! Holistic anatomy-aware semantic fusion.
//!
//! Injects holistic text features into the visual decoder at every stage:
//! self-attention enhances the stage's visual tokens, cross-attention mixes
//! in projected text tokens weighted by a learnable alpha, and a decode step
//! upsamples, concatenates the encoder skip, and convolves. The final 1x1
//! head maps decoder features to class channels followed by a per-pixel
//! softmax. Also home to the Dice+Focal segmentation loss.

use crate::dataio::one_hot;
use crate::encoders::{FeaturePyramid, TextEmbedding};
use crate::error::{AtmError, Result};
use crate::nn::{
    he_normal, sinusoidal_1d, sinusoidal_2d, xavier_normal, ArrD, Graph, ParamId, ParamStore, Var,
};
use ndarray::{Array2, Array3, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HasfConfig {
    /// Attention heads; must divide every stage width.
    pub num_heads: usize,
    /// Token count M of the projected text features.
    pub m_tokens: usize,
    /// Initial value of the cross-attention weighting factor alpha.
    pub alpha_init: f64,
    /// One alpha per stage (default) or a single shared alpha.
    pub alpha_per_stage: bool,
    /// Apply 1-d sinusoidal positions to projected text keys in cross-attn.
    pub text_pe: bool,
    /// Maximum prompt length the token-axis projection supports; longer
    /// prompts truncate, shorter ones use a slice of the weight.
    pub max_text_tokens: usize,
}

impl Default for HasfConfig {
    fn default() -> Self {
        HasfConfig {
            num_heads: 4,
            m_tokens: 8,
            alpha_init: 0.0,
            alpha_per_stage: true,
            text_pe: true,
            max_text_tokens: 128,
        }
    }
}

impl HasfConfig {
    pub fn validate(&self, widths: &[usize; 5]) -> Result<()> {
        if self.m_tokens == 0 {
            return Err(AtmError::Config("m_tokens must be >= 1".into()));
        }
        if self.num_heads == 0 {
            return Err(AtmError::Config("num_heads must be >= 1".into()));
        }
        for &c in widths {
            if c % self.num_heads != 0 {
                return Err(AtmError::Config(format!(
                    "num_heads {} does not divide stage width {c}",
                    self.num_heads
                )));
            }
        }
        if self.max_text_tokens == 0 {
            return Err(AtmError::Config("max_text_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

struct AttnParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

struct StageParams {
    chan_w: ParamId,
    chan_b: ParamId,
    tok_w: ParamId,
    tok_b: ParamId,
    self_attn: AttnParams,
    cross_attn: AttnParams,
    alpha: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Per-stage trace of a fusion forward pass (shapes follow the stage
/// schedule; `alpha` is the learnable weighting factor actually applied).
pub struct FusionState {
    pub f_text: Vec<Option<Array2<f64>>>,
    pub f_v_prime: Vec<Array2<f64>>,
    pub f_m: Vec<Array2<f64>>,
    pub alpha: Vec<f64>,
    pub f_o: Array3<f64>,
}

/// Result of a fusion forward pass, still on the tape.
pub struct FusionOutput {
    /// Softmax map, (H, W, s_total).
    pub f_o: Var,
    /// Same values flattened to (H*W, s_total); input to losses and pooling.
    pub f_o_flat: Var,
    /// Pre-head decoder features, (H*W, C_0).
    pub dec0_flat: Var,
    pub height: usize,
    pub width: usize,
}

pub struct Hasf {
    cfg: HasfConfig,
    widths: [usize; 5],
    c_text: usize,
    num_classes: usize,
    stages: Vec<StageParams>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Hasf {
    /// Register all fusion parameters. `widths` are the pyramid stage widths
    /// C_1..C_5 (the stage-0 skip uses C_1), `c_text` the text encoder width.
    pub fn new(
        store: &mut ParamStore,
        cfg: HasfConfig,
        widths: [usize; 5],
        c_text: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(&widths)?;
        let mut stages = Vec::with_capacity(5);
        let shared_alpha = if cfg.alpha_per_stage {
            None
        } else {
            Some(store.add("hasf.alpha", ArrD::from_elem(IxDyn(&[]), cfg.alpha_init)))
        };
        for i in 1..=5usize {
            let c = widths[i - 1];
            let c_below = if i == 1 { widths[0] } else { widths[i - 2] };
            let p = format!("hasf.s{i}");
            let attn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| AttnParams {
                wq: store.add(format!("{p}.{tag}.wq"), xavier_normal(&[c, c], c, c, rng)),
                bq: store.add(format!("{p}.{tag}.bq"), ArrD::zeros(IxDyn(&[c]))),
                wk: store.add(format!("{p}.{tag}.wk"), xavier_normal(&[c, c], c, c, rng)),
                bk: store.add(format!("{p}.{tag}.bk"), ArrD::zeros(IxDyn(&[c]))),
                wv: store.add(format!("{p}.{tag}.wv"), xavier_normal(&[c, c], c, c, rng)),
                bv: store.add(format!("{p}.{tag}.bv"), ArrD::zeros(IxDyn(&[c]))),
                wo: store.add(format!("{p}.{tag}.wo"), xavier_normal(&[c, c], c, c, rng)),
                bo: store.add(format!("{p}.{tag}.bo"), ArrD::zeros(IxDyn(&[c]))),
                ln_gamma: store.add(format!("{p}.{tag}.ln_gamma"), ArrD::ones(IxDyn(&[c]))),
                ln_beta: store.add(format!("{p}.{tag}.ln_beta"), ArrD::zeros(IxDyn(&[c]))),
            };
            let self_attn = attn(store, rng, "sa");
            let cross_attn = attn(store, rng, "ca");
            let alpha = match shared_alpha {
                Some(id) => id,
                None => store.add(format!("{p}.alpha"), ArrD::from_elem(IxDyn(&[]), cfg.alpha_init)),
            };
            stages.push(StageParams {
                chan_w: store.add(format!("{p}.text.chan_w"), xavier_normal(&[c_text, c], c_text, c, rng)),
                chan_b: store.add(format!("{p}.text.chan_b"), ArrD::zeros(IxDyn(&[c]))),
                tok_w: store.add(
                    format!("{p}.text.tok_w"),
                    xavier_normal(&[cfg.m_tokens, cfg.max_text_tokens], cfg.max_text_tokens, cfg.m_tokens, rng),
                ),
                tok_b: store.add(format!("{p}.text.tok_b"), ArrD::zeros(IxDyn(&[cfg.m_tokens]))),
                self_attn,
                cross_attn,
                alpha,
                up_w: store.add(format!("{p}.up_w"), xavier_normal(&[c, c_below], c, c_below, rng)),
                up_b: store.add(format!("{p}.up_b"), ArrD::zeros(IxDyn(&[c_below]))),
                dec_w: store.add(
                    format!("{p}.dec_w"),
                    he_normal(&[9 * 2 * c_below, c_below], 9 * 2 * c_below, rng),
                ),
                dec_b: store.add(format!("{p}.dec_b"), ArrD::zeros(IxDyn(&[c_below]))),
            });
        }
        let c0 = widths[0];
        let head_w = store.add("hasf.head_w", xavier_normal(&[c0, num_classes], c0, num_classes, rng));
        let head_b = store.add("hasf.head_b", ArrD::zeros(IxDyn(&[num_classes])));
        Ok(Hasf { cfg, widths, c_text, num_classes, stages, head_w, head_b })
    }

    pub fn config(&self) -> &HasfConfig {
        &self.cfg
    }

    /// Parameter names that belong to the text branch (projection,
    /// cross-attention, alpha); the complement is the visual-only path.
    pub fn is_text_branch_param(name: &str) -> bool {
        name.contains(".ca.") || name.contains(".text.") || name.ends_with(".alpha")
    }

    /// Project holistic text features to stage `i`'s width: pointwise channel
    /// mixing, a linear map over the token axis reducing L to M, then ReLU.
    pub fn project_text(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        text: &TextEmbedding,
    ) -> Result<Var> {
        if text.width() != self.c_text {
            return Err(AtmError::ShapeMismatch(format!(
                "text width {} != configured {}",
                text.width(),
                self.c_text
            )));
        }
        let s = &self.stages[stage - 1];
        let l = text.len().min(self.cfg.max_text_tokens);
        let tokens = text.tokens.slice(ndarray::s![..l, ..]).to_owned();
        let x = g.constant(tokens.into_dyn());
        let chan_w = g.param(store, s.chan_w);
        let chan_b = g.param(store, s.chan_b);
        let mixed = g.matmul(x, chan_w);
        let mixed = g.add_bias_last(mixed, chan_b);
        let tok_w = g.param(store, s.tok_w);
        let tok_w_l = g.slice_cols(tok_w, 0, l);
        let reduced = g.matmul(tok_w_l, mixed);
        let tok_b = g.param(store, s.tok_b);
        let biased = g.add_bias_rows(reduced, tok_b);
        Ok(g.relu(biased))
    }

    fn attn_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &AttnParams,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        c: usize,
    ) -> Var {
        let wq = g.param(store, p.wq);
        let bq = g.param(store, p.bq);
        let wk = g.param(store, p.wk);
        let bk = g.param(store, p.bk);
        let wv = g.param(store, p.wv);
        let bv = g.param(store, p.bv);
        let q = g.matmul(q_in, wq);
        let q = g.add_bias_last(q, bq);
        let k = g.matmul(k_in, wk);
        let k = g.add_bias_last(k, bk);
        let v = g.matmul(v_in, wv);
        let v = g.add_bias_last(v, bv);
        let d = c / self.cfg.num_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let attn = g.multihead_attention(q, k, v, self.cfg.num_heads, scale);
        let wo = g.param(store, p.wo);
        let bo = g.param(store, p.bo);
        let out = g.matmul(attn, wo);
        let out = g.add_bias_last(out, bo);
        let gamma = g.param(store, p.ln_gamma);
        let beta = g.param(store, p.ln_beta);
        g.layer_norm(out, gamma, beta, 1e-5)
    }

    /// f_v' = f_v + Norm(SA(PE(f_v), PE(f_v), f_v)) on (H_i*W_i, C_i) tokens.
    pub fn self_enhance(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        f_v: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let c = self.widths[stage - 1];
        let pe = g.constant(sinusoidal_2d(h, w, c).into_dyn());
        let with_pe = g.add(f_v, pe);
        let normed = self.attn_block(g, store, &self.stages[stage - 1].self_attn, with_pe, with_pe, f_v, c);
        g.add(f_v, normed)
    }

    /// f_m = f_v' + alpha * Norm(CA(PE(f_v'), PE(f_text), f_text)); queries
    /// come from vision, keys/values from the projected text tokens.
    pub fn cross_fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        f_v_prime: Var,
        f_text: Var,
        alpha: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let c = self.widths[stage - 1];
        let pe = g.constant(sinusoidal_2d(h, w, c).into_dyn());
        let q_in = g.add(f_v_prime, pe);
        let k_in = if self.cfg.text_pe {
            let m = g.shape(f_text)[0];
            let pe_t = g.constant(sinusoidal_1d(m, c).into_dyn());
            g.add(f_text, pe_t)
        } else {
            f_text
        };
        let normed =
            self.attn_block(g, store, &self.stages[stage - 1].cross_attn, q_in, k_in, f_text, c);
        let scaled = g.mul_scalar_var(normed, alpha);
        g.add(f_v_prime, scaled)
    }

    /// Upsample the stage-`i` fused map 2x, project channels to C_{i-1},
    /// concatenate the skip, then conv + ReLU.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        f_m: Var,
        skip: Var,
    ) -> Result<Var> {
        let s = &self.stages[stage - 1];
        let c = self.widths[stage - 1];
        let c_below = if stage == 1 { self.widths[0] } else { self.widths[stage - 2] };
        let fm_shape = g.shape(f_m).to_vec();
        if fm_shape.len() != 3 || fm_shape[2] != c {
            return Err(AtmError::ShapeMismatch(format!(
                "stage {stage}: fused map has shape {fm_shape:?}, expected (H, W, {c})"
            )));
        }
        let skip_shape = g.shape(skip).to_vec();
        let expect = [fm_shape[0] * 2, fm_shape[1] * 2, c_below];
        if skip_shape != expect {
            return Err(AtmError::ShapeMismatch(format!(
                "stage {stage}: skip has shape {skip_shape:?}, expected {expect:?}"
            )));
        }
        let up = g.upsample2_bilinear(f_m);
        let (h2, w2) = (fm_shape[0] * 2, fm_shape[1] * 2);
        let up2 = g.reshape(up, &[h2 * w2, c]);
        let up_w = g.param(store, s.up_w);
        let up_b = g.param(store, s.up_b);
        let proj = g.matmul(up2, up_w);
        let proj = g.add_bias_last(proj, up_b);
        let proj3 = g.reshape(proj, &[h2, w2, c_below]);
        let cat = g.concat_last(proj3, skip);
        let dec_w = g.param(store, s.dec_w);
        let conv = g.conv3x3(cat, dec_w);
        let dec_b = g.param(store, s.dec_b);
        let conv = g.add_bias_last(conv, dec_b);
        Ok(g.relu(conv))
    }

    fn alpha_var(&self, g: &mut Graph, store: &ParamStore, stage: usize) -> Var {
        g.param(store, self.stages[stage - 1].alpha)
    }

    /// Run the i = 5..1 fusion/decode loop and the softmax head. `text` is
    /// the holistic prompt embedding; `None` runs the text-free baseline path
    /// (no projection, no cross-attention).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        text: Option<&TextEmbedding>,
    ) -> Result<FusionOutput> {
        self.forward_inner(g, store, pyramid, text, None)
    }

    /// Like [`Self::forward`] but also collects a [`FusionState`] trace.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        text: Option<&TextEmbedding>,
    ) -> Result<(FusionOutput, FusionState)> {
        let mut state = FusionState {
            f_text: Vec::new(),
            f_v_prime: Vec::new(),
            f_m: Vec::new(),
            alpha: Vec::new(),
            f_o: Array3::zeros((0, 0, 0)),
        };
        let out = self.forward_inner(g, store, pyramid, text, Some(&mut state))?;
        state.f_o = g
            .value(out.f_o)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("f_o is 3-d");
        Ok((out, state))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        text: Option<&TextEmbedding>,
        mut trace: Option<&mut FusionState>,
    ) -> Result<FusionOutput> {
        let s5 = g.shape(pyramid.stages[4]).to_vec();
        let (mut h, mut w) = (s5[0], s5[1]);
        let mut x = g.reshape(pyramid.stages[4], &[h * w, self.widths[4]]);
        for stage in (1..=5usize).rev() {
            let f_v_prime = self.self_enhance(g, store, stage, x, h, w);
            let f_m = match text {
                Some(t) => {
                    let f_text = self.project_text(g, store, stage, t)?;
                    let alpha = self.alpha_var(g, store, stage);
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.f_text.push(Some(as_2d(g.value(f_text))));
                        tr.alpha.push(g.scalar(alpha));
                    }
                    self.cross_fuse(g, store, stage, f_v_prime, f_text, alpha, h, w)
                }
                None => {
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.f_text.push(None);
                        tr.alpha.push(0.0);
                    }
                    f_v_prime
                }
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.f_v_prime.push(as_2d(g.value(f_v_prime)));
                tr.f_m.push(as_2d(g.value(f_m)));
            }
            let c = self.widths[stage - 1];
            let f_m3 = g.reshape(f_m, &[h, w, c]);
            let skip = if stage == 1 { pyramid.stage0 } else { pyramid.stages[stage - 2] };
            let decoded = self.decode_step(g, store, stage, f_m3, skip)?;
            h *= 2;
            w *= 2;
            let c_below = if stage == 1 { self.widths[0] } else { self.widths[stage - 2] };
            x = g.reshape(decoded, &[h * w, c_below]);
        }
        let dec0_flat = x;
        let head_w = g.param(store, self.head_w);
        let head_b = g.param(store, self.head_b);
        let logits = g.matmul(dec0_flat, head_w);
        let logits = g.add_bias_last(logits, head_b);
        let f_o_flat = g.softmax_last(logits);
        let f_o = g.reshape(f_o_flat, &[h, w, self.num_classes]);
        Ok(FusionOutput { f_o, f_o_flat, dec0_flat, height: h, width: w })
    }
}

fn as_2d(v: &ArrD) -> Array2<f64> {
    v.clone().into_dimensionality::<ndarray::Ix2>().expect("2-d trace tensor")
}

// ---- Dice + Focal loss ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Focal weighting factor.
    pub alpha_f: f64,
    /// Dice smoothing constant.
    pub dice_eps: f64,
    /// Probabilities are clamped to [clamp, 1-clamp] inside the focal term.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, alpha_f: 0.25, dice_eps: 1e-5, prob_clamp: 1e-7 }
    }
}

/// L = L_Dice + L_Focal on a normalized class map `f_o_flat` of shape
/// (H*W, s_total) against integer labels.
///
/// Dice = 1 - mean over classes of (2 sum(p*g) + eps) / (sum p + sum g + eps);
/// Focal = mean over pixels of -alpha_f (1 - p_t)^gamma log p_t.
pub fn dice_focal_loss(
    g: &mut Graph,
    f_o_flat: Var,
    label: &Array2<u8>,
    num_classes: usize,
    cfg: &LossConfig,
) -> Var {
    let hw = label.len();
    assert_eq!(g.shape(f_o_flat), [hw, num_classes], "prediction/label size mismatch");
    let onehot = g.constant(one_hot(label, num_classes));

    // Dice over class channels.
    let pg = g.mul(f_o_flat, onehot);
    let inter = g.sum_axis2(pg, 0);
    let psum = g.sum_axis2(f_o_flat, 0);
    let gsum = g.sum_axis2(onehot, 0);
    let num = g.affine(inter, 2.0, cfg.dice_eps);
    let den_raw = g.add(psum, gsum);
    let den = g.affine(den_raw, 1.0, cfg.dice_eps);
    let dice_per_class = g.div_elem(num, den);
    let dice_mean = g.mean_all(dice_per_class);
    let l_dice = g.affine(dice_mean, -1.0, 1.0);

    // Focal over pixels.
    let pt_raw = g.sum_axis2(pg, 1);
    let pt = g.clamp(pt_raw, cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let log_pt = g.log(pt);
    let one_minus = g.affine(pt, -1.0, 1.0);
    let weight = g.powf_const(one_minus, cfg.gamma);
    let focal_vec = g.mul(weight, log_pt);
    let focal_mean = g.mean_all(focal_vec);
    let l_focal = g.affine(focal_mean, -cfg.alpha_f, 0.0);

    g.add(l_dice, l_focal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, TinyTextEncoder, TinyVisualEncoder};
    use crate::nn::{finite_diff, rel_err};
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_setup(
        size: usize,
        widths: [usize; 5],
        heads: usize,
    ) -> (ParamStore, TinyVisualEncoder, Hasf, TinyTextEncoder) {
        let enc_cfg = EncoderConfig {
            visual_widths: widths,
            image_size: size,
            text_width: 16,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = TinyVisualEncoder::new(&mut store, &enc_cfg, &mut rng);
        let hasf_cfg = HasfConfig { num_heads: heads, m_tokens: 4, ..HasfConfig::default() };
        let hasf = Hasf::new(&mut store, hasf_cfg, widths, 16, 20, &mut rng).unwrap();
        let text = TinyTextEncoder::new(&enc_cfg);
        (store, enc, hasf, text)
    }

    #[test]
    fn project_text_shape_and_nonnegative() {
        let (store, _enc, hasf, text) = tiny_setup(64, [4, 8, 16, 32, 64], 2);
        let emb = text
            .encode("one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen")
            .unwrap();
        assert_eq!(emb.len(), 17);
        let mut g = Graph::new(false);
        let out = hasf.project_text(&mut g, &store, 3, &emb).unwrap();
        assert_eq!(g.shape(out), [4, 16]);
        assert!(g.value(out).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn project_text_zero_input_zero_biases_gives_zeros() {
        let (store, _enc, hasf, _text) = tiny_setup(64, [4, 8, 16, 32, 64], 2);
        let emb = TextEmbedding { tokens: Array2::zeros((9, 16)), source_text: String::new() };
        let mut g = Graph::new(false);
        let out = hasf.project_text(&mut g, &store, 2, &emb).unwrap();
        assert!(g.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn self_enhance_shape_and_degenerate_identity() {
        let widths = [4, 8, 32, 32, 64];
        let (mut store, _enc, hasf, _text) = tiny_setup(64, widths, 2);
        // 12x12 map at stage 3 (C=32)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ArrD::from_shape_fn(IxDyn(&[144, 32]), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(false);
        let fv = g.constant(f.clone());
        let out = hasf.self_enhance(&mut g, &store, 3, fv, 12, 12);
        assert_eq!(g.shape(out), [144, 32]);

        // zero value projection + zero LN gain => output == input bitwise
        let zero = |store: &mut ParamStore, name: &str| {
            let id = store.find(name).unwrap();
            store.value_mut(id).fill(0.0);
        };
        zero(&mut store, "hasf.s3.sa.wv");
        zero(&mut store, "hasf.s3.sa.bv");
        zero(&mut store, "hasf.s3.sa.ln_gamma");
        let mut g = Graph::new(false);
        let fv = g.constant(f.clone());
        let out = hasf.self_enhance(&mut g, &store, 3, fv, 12, 12);
        assert_eq!(g.value(out), &f);
    }

    #[test]
    fn cross_fuse_alpha_zero_is_exact_identity() {
        let widths = [4, 8, 16, 32, 64];
        let (store, _enc, hasf, _text) = tiny_setup(64, widths, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = ArrD::from_shape_fn(IxDyn(&[16, 16]), |_| rng.gen_range(-1.0..1.0));
        let t = ArrD::from_shape_fn(IxDyn(&[4, 16]), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(false);
        let fv = g.constant(f.clone());
        let ft = g.constant(t);
        let alpha = g.scalar_const(0.0);
        let out = hasf.cross_fuse(&mut g, &store, 3, fv, ft, alpha, 4, 4);
        assert_eq!(g.value(out), &f, "alpha=0 must leave features bit-identical");
    }

    #[test]
    fn cross_fuse_zero_text_zero_value_proj_keeps_features() {
        let widths = [4, 8, 16, 32, 64];
        let (mut store, _enc, hasf, _text) = tiny_setup(64, widths, 2);
        for name in ["hasf.s3.ca.wv", "hasf.s3.ca.bv"] {
            let id = store.find(name).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = ArrD::from_shape_fn(IxDyn(&[16, 16]), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(false);
        let fv = g.constant(f.clone());
        let ft = g.constant(ArrD::zeros(IxDyn(&[4, 16])));
        let alpha = g.scalar_const(1.0);
        let out = hasf.cross_fuse(&mut g, &store, 3, fv, ft, alpha, 4, 4);
        // attention output is zero, LayerNorm(0) = beta = 0, so f_m == f_v'
        assert_eq!(g.value(out), &f);
    }

    #[test]
    fn cross_fuse_alpha_gradient_matches_finite_differences() {
        let widths = [4, 8, 16, 32, 64];
        let (store, _enc, hasf, _text) = tiny_setup(64, widths, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = ArrD::from_shape_fn(IxDyn(&[16, 16]), |_| rng.gen_range(-1.0..1.0));
        let t = ArrD::from_shape_fn(IxDyn(&[4, 16]), |_| rng.gen_range(-1.0..1.0));
        let alpha0 = ArrD::from_elem(IxDyn(&[]), 0.37);

        let run = |alpha_val: &ArrD, grad: bool| -> (f64, Option<f64>) {
            let mut g = Graph::new(grad);
            let fv = g.constant(f.clone());
            let ft = g.constant(t.clone());
            let alpha = g.constant(alpha_val.clone());
            let out = hasf.cross_fuse(&mut g, &store, 3, fv, ft, alpha, 4, 4);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            let lv = g.scalar(loss);
            if grad {
                let mut grads = g.backward(loss);
                let da = grads.take(alpha).unwrap();
                (lv, Some(*da.first().unwrap()))
            } else {
                (lv, None)
            }
        };
        let (_, analytic) = run(&alpha0, true);
        let numeric = finite_diff(&alpha0, |a| run(a, false).0, 1e-6);
        let e = rel_err(analytic.unwrap(), *numeric.first().unwrap(), 1e-9);
        assert!(e < 1e-4, "alpha gradient rel err {e}");
    }

    #[test]
    fn cross_fuse_text_token_permutation_invariance() {
        let widths = [4, 8, 16, 32, 64];
        let enc_cfg = EncoderConfig {
            visual_widths: widths,
            image_size: 64,
            text_width: 16,
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let run = |text_pe: bool, permute: bool| -> ArrD {
            let mut store = ParamStore::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(9);
            let _enc = TinyVisualEncoder::new(&mut store, &enc_cfg, &mut rng2);
            let cfg = HasfConfig { num_heads: 2, m_tokens: 4, text_pe, ..HasfConfig::default() };
            let hasf = Hasf::new(&mut store, cfg, widths, 16, 20, &mut rng2).unwrap();
            let f = ArrD::from_shape_fn(IxDyn(&[16, 16]), |ix| {
                ((ix[0] * 17 + ix[1] * 3) % 7) as f64 * 0.1 - 0.3
            });
            let mut t = Array2::from_shape_fn((4, 16), |(i, j)| {
                ((i * 31 + j * 5) % 11) as f64 * 0.07 - 0.2
            });
            if permute {
                // rotate rows by one
                let first = t.row(0).to_owned();
                for i in 0..3 {
                    let next = t.row(i + 1).to_owned();
                    t.row_mut(i).assign(&next);
                }
                t.row_mut(3).assign(&first);
            }
            let mut g = Graph::new(false);
            let fv = g.constant(f);
            let ft = g.constant(t.into_dyn());
            let alpha = g.scalar_const(0.8);
            let out = hasf.cross_fuse(&mut g, &store, 3, fv, ft, alpha, 4, 4);
            g.value(out).clone()
        };
        let _ = &mut rng;
        let base = run(false, false);
        let perm = run(false, true);
        let max_diff =
            base.iter().zip(perm.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "no-PE cross attention must ignore key/value order: {max_diff}");

        let base_pe = run(true, false);
        let perm_pe = run(true, true);
        let max_diff_pe =
            base_pe.iter().zip(perm_pe.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_diff_pe > 1e-9, "text PE should break permutation invariance");
    }

    #[test]
    fn decode_step_shapes_and_zero_case() {
        let widths = [4, 8, 16, 64, 128];
        let (mut store, _enc, hasf, _text) = tiny_setup(64, widths, 2);
        // stage 5: fused 6x6x128 + skip 12x12x64 -> 12x12x64
        let mut g = Graph::new(false);
        let fm = g.constant(ArrD::zeros(IxDyn(&[6, 6, 128])));
        let skip = g.constant(ArrD::zeros(IxDyn(&[12, 12, 64])));
        let out = hasf.decode_step(&mut g, &store, 5, fm, skip).unwrap();
        assert_eq!(g.shape(out), [12, 12, 64]);
        // zero inputs + zero biases -> zero output
        assert!(g.value(out).iter().all(|&x| x == 0.0));

        // mismatched skip is an error naming the stage
        let mut g = Graph::new(false);
        let fm = g.constant(ArrD::zeros(IxDyn(&[6, 6, 128])));
        let skip = g.constant(ArrD::zeros(IxDyn(&[10, 12, 64])));
        let err = hasf.decode_step(&mut g, &store, 5, fm, skip).unwrap_err();
        assert!(err.to_string().contains("stage 5"), "{err}");

        // finite outputs for random inputs in [-10, 10]
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let _ = &mut store;
        let mut g = Graph::new(false);
        let fm_arr = ArrD::from_shape_fn(IxDyn(&[6, 6, 128]), |_| rng.gen_range(-10.0..10.0));
        let skip_arr = ArrD::from_shape_fn(IxDyn(&[12, 12, 64]), |_| rng.gen_range(-10.0..10.0));
        let fm = g.constant(fm_arr);
        let skip = g.constant(skip_arr);
        let out = hasf.decode_step(&mut g, &store, 5, fm, skip).unwrap();
        assert!(g.value(out).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn forward_softmax_rows_sum_to_one() {
        let (store, enc, hasf, text) = tiny_setup(64, [4, 8, 16, 32, 64], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..1.0));
        let emb = text.encode("The sagittal MRI of the lumbar spine.").unwrap();
        let mut g = Graph::new(false);
        let pyr = enc.forward(&mut g, &store, &img).unwrap();
        let out = hasf.forward(&mut g, &store, &pyr, Some(&emb)).unwrap();
        assert_eq!(g.shape(out.f_o), [64, 64, 20]);
        let flat = g.value(out.f_o_flat);
        for row in flat.view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        }
    }

    #[test]
    fn dice_focal_perfect_prediction_is_near_zero() {
        let mut g = Graph::new(false);
        let mut label = Array2::<u8>::zeros((4, 4));
        label[[0, 0]] = 1;
        label[[1, 1]] = 2;
        let onehot = one_hot(&label, 4);
        let pred = g.constant(onehot);
        let loss = dice_focal_loss(&mut g, pred, &label, 4, &LossConfig::default());
        let v = g.scalar(loss);
        assert!(v.abs() < 1e-6, "loss at perfect prediction: {v}");
    }

    #[test]
    fn focal_reduces_to_cross_entropy_at_gamma_zero() {
        // uniform prediction over 2 classes, balanced target, gamma=0,
        // alpha_f=1 => focal term = ln 2; dice term is 1 - mean(2/3, 2/3).
        let mut g = Graph::new(false);
        let mut label = Array2::<u8>::zeros((2, 1));
        label[[1, 0]] = 1;
        let pred = g.constant(ArrD::from_elem(IxDyn(&[2, 2]), 0.5));
        let cfg = LossConfig { gamma: 0.0, alpha_f: 1.0, dice_eps: 0.0, prob_clamp: 1e-12 };
        let loss = dice_focal_loss(&mut g, pred, &label, 2, &cfg);
        // dice per class: (2*0.5)/(1+1) = 0.5 each -> l_dice = 0.5
        let expect = 0.5 + std::f64::consts::LN_2;
        assert!((g.scalar(loss) - expect).abs() < 1e-6, "{}", g.scalar(loss));
    }

    #[test]
    fn dice_focal_gradient_matches_finite_differences_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits0 = ArrD::from_shape_fn(IxDyn(&[64, 5]), |_| rng.gen_range(-1.0..1.0));
        let label = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) % 5) as u8);
        let cfg = LossConfig::default();

        let eval = |l: &ArrD, grad: bool| -> (f64, Option<ArrD>) {
            let mut g = Graph::new(grad);
            let lv = g.constant(l.clone());
            let probs = g.softmax_last(lv);
            let loss = dice_focal_loss(&mut g, probs, &label, 5, &cfg);
            let v = g.scalar(loss);
            if grad {
                let mut grads = g.backward(loss);
                (v, Some(grads.take(lv).unwrap()))
            } else {
                (v, None)
            }
        };
        let (_, analytic) = eval(&logits0, true);
        let analytic = analytic.unwrap();
        let numeric = finite_diff(&logits0, |l| eval(l, false).0, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            if a.abs() < 1e-8 && n.abs() < 1e-8 {
                continue;
            }
            let e = rel_err(*a, *n, 1e-8);
            assert!(e < 1e-4, "analytic {a} vs numeric {n}: rel {e}");
        }
    }

    #[test]
    fn dice_focal_loss_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let mut g = Graph::new(false);
            let logits = ArrD::from_shape_fn(IxDyn(&[36, 6]), |_| rng.gen_range(-3.0..3.0));
            let lv = g.constant(logits);
            let probs = g.softmax_last(lv);
            let label = Array2::from_shape_fn((6, 6), |(y, x)| ((x + y) % 6) as u8);
            let loss = dice_focal_loss(&mut g, probs, &label, 6, &LossConfig::default());
            assert!(g.scalar(loss) >= 0.0);
        }
    }
}
