//! Channel-wise contrastive anatomy-aware enhancement.
//!
//! Pools per-class text embeddings and per-class visual channels to one row
//! each, L2-normalizes both sides, and aligns them with a symmetric InfoNCE
//! loss over class indices (positives on the diagonal). Also assembles the
//! total training objective.
//!
//! The visual side pools the pre-softmax decoder features under the softmax
//! map's per-class spatial weights; the per-class mass of that weighting is
//! exactly the global average pool of the class map (see [`gap_per_class`]).
//! A learned linear bridge maps pooled features to the text width; `direct`
//! mode skips the bridge and requires matching widths.

use crate::encoders::TextEmbedding;
use crate::error::{AtmError, Result};
use crate::nn::{xavier_normal, ArrD, Graph, ParamId, ParamStore, Var};
use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How pooled per-class decoder features reach the text width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualBridgeMode {
    /// Learned linear map C_0 -> C (default).
    #[default]
    Bridge,
    /// Use pooled features as-is; requires C_0 == C.
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Whether the background channel participates in the loss (s_eff).
    pub include_background: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub bridge: VisualBridgeMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            include_background: true,
            lambda1: 1.0,
            lambda2: 0.2,
            bridge: VisualBridgeMode::Bridge,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(AtmError::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-class text matrix f_text_C: mean-pool each class prompt over its
/// token axis, stack, then row-wise L2 normalization. One embedding per
/// class channel, all with the same width.
pub fn build_text_channels(embeddings: &[TextEmbedding]) -> Result<Array2<f64>> {
    let Some(first) = embeddings.first() else {
        return Err(AtmError::InvalidArgument("no channel embeddings given".into()));
    };
    let c = first.width();
    let mut out = Array2::<f64>::zeros((embeddings.len(), c));
    for (i, e) in embeddings.iter().enumerate() {
        if e.width() != c {
            return Err(AtmError::ShapeMismatch(format!(
                "channel {i} has width {}, expected {c}",
                e.width()
            )));
        }
        let l = e.len() as f64;
        for j in 0..c {
            out[[i, j]] = e.tokens.column(j).sum() / l;
        }
    }
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// Global average pool of the class map: one scalar per class channel.
pub fn gap_per_class(g: &mut Graph, f_o_flat: Var) -> Var {
    let hw = g.shape(f_o_flat)[0] as f64;
    let sums = g.sum_axis2(f_o_flat, 0);
    g.affine(sums, 1.0 / hw, 0.0)
}

/// Learned width bridge from pooled decoder features to the text width.
pub struct CcaeBridge {
    mode: VisualBridgeMode,
    w: Option<ParamId>,
    b: Option<ParamId>,
}

impl CcaeBridge {
    pub fn new(
        store: &mut ParamStore,
        mode: VisualBridgeMode,
        c0: usize,
        c_text: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        match mode {
            VisualBridgeMode::Bridge => {
                let w = store.add("ccae.bridge_w", xavier_normal(&[c0, c_text], c0, c_text, rng));
                let b = store.add("ccae.bridge_b", ArrD::zeros(IxDyn(&[c_text])));
                Ok(CcaeBridge { mode, w: Some(w), b: Some(b) })
            }
            VisualBridgeMode::Direct => {
                if c0 != c_text {
                    return Err(AtmError::Config(format!(
                        "direct visual bridge needs matching widths, got C_0={c0}, C={c_text}"
                    )));
                }
                Ok(CcaeBridge { mode, w: None, b: None })
            }
        }
    }
}

/// Visual side f_o': pool decoder features under per-class softmax weights,
/// bridge to the text width, and L2-normalize rows. Drops the background row
/// when `include_background` is false.
pub fn build_visual_channels(
    g: &mut Graph,
    store: &ParamStore,
    f_o_flat: Var,
    dec0_flat: Var,
    bridge: &CcaeBridge,
    include_background: bool,
) -> Var {
    let s_total = g.shape(f_o_flat)[1];
    let probs_t = g.transpose2(f_o_flat);
    let num = g.matmul(probs_t, dec0_flat);
    let mass_raw = g.sum_axis2(f_o_flat, 0);
    let mass = g.affine(mass_raw, 1.0, 1e-12);
    let pooled = g.div_rows(num, mass);
    let bridged = match bridge.mode {
        VisualBridgeMode::Bridge => {
            let w = g.param(store, bridge.w.unwrap());
            let b = g.param(store, bridge.b.unwrap());
            let m = g.matmul(pooled, w);
            g.add_bias_last(m, b)
        }
        VisualBridgeMode::Direct => pooled,
    };
    let normed = g.l2_normalize_rows(bridged);
    if include_background {
        normed
    } else {
        g.slice_rows(normed, 1, s_total)
    }
}

/// Symmetric InfoNCE over cosine logits (rows = visual classes, columns =
/// text classes; positives on the diagonal):
/// L = 1/(2 s) * sum_i [ -log softmax_row_i(i) - log softmax_col_i(i) ].
pub fn ftc_loss_from_cosine_logits(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(AtmError::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(AtmError::ShapeMismatch(format!(
            "contrastive logits must be square, got {shape:?}"
        )));
    }
    let s = shape[0];
    let scaled = g.affine(logits, 1.0 / tau, 0.0);
    let eye = g.constant(ArrD::from_shape_fn(IxDyn(&[s, s]), |ix| {
        if ix[0] == ix[1] {
            1.0
        } else {
            0.0
        }
    }));
    let lsm_rows = g.log_softmax_last(scaled);
    let diag_rows = g.mul(lsm_rows, eye);
    let d1 = g.sum_all(diag_rows);
    let scaled_t = g.transpose2(scaled);
    let lsm_cols = g.log_softmax_last(scaled_t);
    let diag_cols = g.mul(lsm_cols, eye);
    let d2 = g.sum_all(diag_cols);
    let total = g.add(d1, d2);
    Ok(g.affine(total, -1.0 / (2.0 * s as f64), 0.0))
}

/// Class-wise channel-level contrastive loss between unit-row matrices
/// `f_o_prime` and `f_text_c`, both (s_eff, C).
pub fn ftc_loss(g: &mut Graph, f_o_prime: Var, f_text_c: Var, tau: f64) -> Result<Var> {
    let (sv, st) = (g.shape(f_o_prime).to_vec(), g.shape(f_text_c).to_vec());
    if sv != st {
        return Err(AtmError::ShapeMismatch(format!(
            "contrastive sides differ: {sv:?} vs {st:?}"
        )));
    }
    let tt = g.transpose2(f_text_c);
    let logits = g.matmul(f_o_prime, tt);
    ftc_loss_from_cosine_logits(g, logits, tau)
}

/// Total objective lambda1 * L_DiceFocal + lambda2 * L_ftc on the tape. With
/// no contrastive term (or lambda2 = 0) and lambda1 = 1 the Dice+Focal node
/// is returned unchanged, so the CCAE-off wiring is exact.
pub fn total_loss(g: &mut Graph, dice_focal: Var, ftc: Option<Var>, cfg: &ContrastiveConfig) -> Var {
    let contrastive = match ftc {
        Some(f) if cfg.lambda2 != 0.0 => Some(f),
        _ => None,
    };
    match contrastive {
        None if cfg.lambda1 == 1.0 => dice_focal,
        None => g.affine(dice_focal, cfg.lambda1, 0.0),
        Some(f) => {
            let a = g.affine(dice_focal, cfg.lambda1, 0.0);
            let b = g.affine(f, cfg.lambda2, 0.0);
            g.add(a, b)
        }
    }
}

/// Scalar form of the total objective.
pub fn total_loss_value(dice_focal: f64, ftc: f64, cfg: &ContrastiveConfig) -> f64 {
    cfg.lambda1 * dice_focal + cfg.lambda2 * ftc
}
