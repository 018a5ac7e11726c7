//! Segmentation metrics: DSC, Jaccard, HD95, ASD with the NaN-exclusion
//! aggregation policy.
//!
//! Overlap metrics are undefined (NaN) when both masks are empty; surface
//! metrics when either mask is empty. Per-class values average over the
//! samples where the metric is defined; a class undefined everywhere lands in
//! `nan_classes` and is excluded from the aggregate. Surface distances ship
//! in two implementations: a fast exact distance-transform path and an
//! all-pairs brute-force oracle. Distances are in pixel units times an
//! optional spacing factor.

pub mod edt;

use crate::error::{AtmError, Result};
use crate::taxonomy::ClassTaxonomy;
use edt::{boundary_pixels, squared_edt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// How the two directed boundary-distance sets combine into HD95.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95Mode {
    /// 95th percentile of the pooled multiset of both directions (default).
    #[default]
    Pooled,
    /// Maximum of the per-direction 95th percentiles.
    MaxDirected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(default)]
    pub hd95_mode: Hd95Mode,
    /// Multiplies all surface distances (pixel spacing).
    #[serde(default = "default_spacing")]
    pub pixel_spacing: f64,
}

fn default_spacing() -> f64 {
    1.0
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { hd95_mode: Hd95Mode::Pooled, pixel_spacing: 1.0 }
    }
}

fn check_shapes(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(AtmError::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn class_mask(map: &Array2<u8>, class_id: u32) -> Array2<bool> {
    map.mapv(|v| v as u32 == class_id)
}

fn counts(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u32) -> (usize, usize, usize) {
    let mut p = 0usize;
    let mut g = 0usize;
    let mut i = 0usize;
    for (&pv, &gv) in pred.iter().zip(gt.iter()) {
        let pin = pv as u32 == class_id;
        let gin = gv as u32 == class_id;
        p += pin as usize;
        g += gin as usize;
        i += (pin && gin) as usize;
    }
    (p, g, i)
}

/// Dice similarity 2|P n G| / (|P| + |G|); NaN when both masks are empty.
pub fn dsc(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u32) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, i) = counts(pred, gt, class_id);
    if p + g == 0 {
        return Ok(f64::NAN);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// Jaccard index |P n G| / |P u G|; NaN when the union is empty.
pub fn jaccard(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u32) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, i) = counts(pred, gt, class_id);
    let union = p + g - i;
    if union == 0 {
        return Ok(f64::NAN);
    }
    Ok(i as f64 / union as f64)
}

/// Pooled directed boundary-to-boundary distances (both directions), via the
/// exact distance transform. `None` when either mask is empty. The returned
/// pair is (P->G distances, G->P distances).
pub fn surface_distances(
    pred_mask: &Array2<bool>,
    gt_mask: &Array2<bool>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    if pred_mask.iter().all(|&v| !v) || gt_mask.iter().all(|&v| !v) {
        return None;
    }
    let bp = boundary_pixels(pred_mask);
    let bg = boundary_pixels(gt_mask);
    let dt_to_gt = squared_edt(&edt::boundary_mask(gt_mask));
    let dt_to_pred = squared_edt(&edt::boundary_mask(pred_mask));
    let d_pg: Vec<f64> = bp.iter().map(|&(y, x)| dt_to_gt[[y, x]].sqrt()).collect();
    let d_gp: Vec<f64> = bg.iter().map(|&(y, x)| dt_to_pred[[y, x]].sqrt()).collect();
    Some((d_pg, d_gp))
}

/// All-pairs oracle for [`surface_distances`].
pub fn surface_distances_bruteforce(
    pred_mask: &Array2<bool>,
    gt_mask: &Array2<bool>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    if pred_mask.iter().all(|&v| !v) || gt_mask.iter().all(|&v| !v) {
        return None;
    }
    let bp = boundary_pixels(pred_mask);
    let bg = boundary_pixels(gt_mask);
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(ty, tx)| {
                        let dy = y as f64 - ty as f64;
                        let dx = x as f64 - tx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    Some((nearest(&bp, &bg), nearest(&bg, &bp)))
}

/// Percentile with linear interpolation over a sorted copy of `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[lo]
    }
}

fn hd95_from_sets(d_pg: &[f64], d_gp: &[f64], mode: Hd95Mode) -> f64 {
    match mode {
        Hd95Mode::Pooled => {
            let pooled: Vec<f64> = d_pg.iter().chain(d_gp.iter()).copied().collect();
            percentile(&pooled, 95.0)
        }
        Hd95Mode::MaxDirected => percentile(d_pg, 95.0).max(percentile(d_gp, 95.0)),
    }
}

/// 95% Hausdorff distance over boundary pixels; NaN when either mask is
/// empty.
pub fn hd95(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u32, opts: &EvalOptions) -> Result<f64> {
    check_shapes(pred, gt)?;
    let pm = class_mask(pred, class_id);
    let gm = class_mask(gt, class_id);
    Ok(match surface_distances(&pm, &gm) {
        Some((d_pg, d_gp)) => hd95_from_sets(&d_pg, &d_gp, opts.hd95_mode) * opts.pixel_spacing,
        None => f64::NAN,
    })
}

/// Average surface distance over all boundary pixels of both masks; NaN when
/// either mask is empty.
pub fn asd(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u32, opts: &EvalOptions) -> Result<f64> {
    check_shapes(pred, gt)?;
    let pm = class_mask(pred, class_id);
    let gm = class_mask(gt, class_id);
    Ok(match surface_distances(&pm, &gm) {
        Some((d_pg, d_gp)) => {
            let n = (d_pg.len() + d_gp.len()) as f64;
            let sum: f64 = d_pg.iter().chain(d_gp.iter()).sum();
            sum / n * opts.pixel_spacing
        }
        None => f64::NAN,
    })
}

/// One class's metric values; `None` encodes NaN (undefined).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Per-class and aggregate metrics with NaN bookkeeping. Only foreground
/// classes are evaluated and reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub taxonomy: String,
    /// Foreground class names in taxonomy id order, parallel to nothing —
    /// lookup key for `per_class`.
    pub class_order: Vec<(u32, String)>,
    pub per_class: BTreeMap<u32, ClassMetrics>,
    /// Mean over classes with a defined value, per metric.
    pub aggregate: ClassMetrics,
    /// Classes undefined for every metric in every sample (absent from both
    /// prediction and ground truth everywhere).
    pub nan_classes: BTreeSet<u32>,
}

fn mean_defined(values: &[f64]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluate aligned prediction/ground-truth label maps; per-slice values are
/// averaged per class over the samples where each metric is defined, and the
/// aggregate averages the per-class values over non-NaN classes.
pub fn evaluate(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    taxonomy: &ClassTaxonomy,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(AtmError::InvalidArgument(format!(
            "got {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(AtmError::InvalidArgument("nothing to evaluate".into()));
    }
    let mut per_class = BTreeMap::new();
    let mut nan_classes = BTreeSet::new();
    let mut agg: [Vec<f64>; 4] = Default::default();
    let mut class_order = Vec::new();
    for entry in taxonomy.entries.iter().skip(1) {
        class_order.push((entry.id, entry.name.clone()));
        let mut vals: [Vec<f64>; 4] = Default::default();
        for (p, g) in preds.iter().zip(gts.iter()) {
            vals[0].push(dsc(p, g, entry.id)?);
            vals[1].push(jaccard(p, g, entry.id)?);
            vals[2].push(hd95(p, g, entry.id, opts)?);
            vals[3].push(asd(p, g, entry.id, opts)?);
        }
        let cm = ClassMetrics {
            dsc: mean_defined(&vals[0]),
            jaccard: mean_defined(&vals[1]),
            hd95: mean_defined(&vals[2]),
            asd: mean_defined(&vals[3]),
        };
        if cm.dsc.is_none() && cm.jaccard.is_none() && cm.hd95.is_none() && cm.asd.is_none() {
            nan_classes.insert(entry.id);
        }
        for (slot, v) in agg.iter_mut().zip([cm.dsc, cm.jaccard, cm.hd95, cm.asd]) {
            if let Some(v) = v {
                slot.push(v);
            }
        }
        per_class.insert(entry.id, cm);
    }
    let aggregate = ClassMetrics {
        dsc: mean_defined(&agg[0]),
        jaccard: mean_defined(&agg[1]),
        hd95: mean_defined(&agg[2]),
        asd: mean_defined(&agg[3]),
    };
    Ok(MetricsReport {
        taxonomy: taxonomy.name.clone(),
        class_order,
        per_class,
        aggregate,
        nan_classes,
    })
}

/// Evaluate per volume: sample-level values are first averaged within each
/// volume, then across volumes.
pub fn evaluate_per_volume(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    volume_of: &[String],
    taxonomy: &ClassTaxonomy,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if preds.len() != volume_of.len() {
        return Err(AtmError::InvalidArgument("volume ids misaligned with predictions".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in volume_of.iter().enumerate() {
        groups.entry(v).or_default().push(i);
    }
    // per-volume reports, then average defined per-class values across volumes
    let mut reports = Vec::new();
    for idxs in groups.values() {
        let p: Vec<Array2<u8>> = idxs.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<Array2<u8>> = idxs.iter().map(|&i| gts[i].clone()).collect();
        reports.push(evaluate(&p, &g, taxonomy, opts)?);
    }
    let mut per_class = BTreeMap::new();
    let mut nan_classes = BTreeSet::new();
    let mut agg: [Vec<f64>; 4] = Default::default();
    for entry in taxonomy.entries.iter().skip(1) {
        let collect = |f: fn(&ClassMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> =
                reports.iter().filter_map(|r| r.per_class.get(&entry.id).and_then(f)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let cm = ClassMetrics {
            dsc: collect(|c| c.dsc),
            jaccard: collect(|c| c.jaccard),
            hd95: collect(|c| c.hd95),
            asd: collect(|c| c.asd),
        };
        if cm.dsc.is_none() && cm.jaccard.is_none() && cm.hd95.is_none() && cm.asd.is_none() {
            nan_classes.insert(entry.id);
        }
        for (slot, v) in agg.iter_mut().zip([cm.dsc, cm.jaccard, cm.hd95, cm.asd]) {
            if let Some(v) = v {
                slot.push(v);
            }
        }
        per_class.insert(entry.id, cm);
    }
    Ok(MetricsReport {
        taxonomy: taxonomy.name.clone(),
        class_order: taxonomy.entries.iter().skip(1).map(|e| (e.id, e.name.clone())).collect(),
        per_class,
        aggregate: ClassMetrics {
            dsc: mean_defined(&agg[0]),
            jaccard: mean_defined(&agg[1]),
            hd95: mean_defined(&agg[2]),
            asd: mean_defined(&agg[3]),
        },
        nan_classes,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with one row per metric: `run,metric,<class...>,Avg.` — one column
    /// per foreground class plus the aggregate, NaN spelled out.
    pub fn to_csv(&self, run_label: &str) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "NaN".to_string(),
        };
        let mut out = String::from("run,metric");
        for (_, name) in &self.class_order {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",Avg.\n");
        let rows: [(&str, fn(&ClassMetrics) -> Option<f64>); 4] = [
            ("dsc", |c| c.dsc),
            ("jaccard", |c| c.jaccard),
            ("hd95", |c| c.hd95),
            ("asd", |c| c.asd),
        ];
        for (metric, get) in rows {
            out.push_str(run_label);
            out.push(',');
            out.push_str(metric);
            for (id, _) in &self.class_order {
                out.push(',');
                out.push_str(&fmt(self.per_class.get(id).and_then(get)));
            }
            out.push(',');
            out.push_str(&fmt(get(&self.aggregate)));
            out.push('\n');
        }
        out
    }
}
