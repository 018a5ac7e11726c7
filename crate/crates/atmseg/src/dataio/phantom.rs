//! Synthetic spine phantom: a vertical stack of rounded-rectangle vertebral
//! bodies alternating with thin disc bands, plus a posterior canal stripe for
//! taxonomies that segment the spinal canal. Desk-scale stand-in for real
//! volumes.

use super::SliceSample;
use crate::error::{AtmError, Result};
use crate::taxonomy::{ClassKind, ClassTaxonomy};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Slices rendered per phantom volume.
pub const PHANTOM_SLICES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_vertebrae: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(AtmError::InvalidArgument(format!(
                "phantom image_size {} < 32",
                self.image_size
            )));
        }
        if !(2..=10).contains(&self.n_vertebrae) {
            return Err(AtmError::InvalidArgument(format!(
                "phantom n_vertebrae {} outside 2..=10",
                self.n_vertebrae
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(AtmError::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rendering intensity for a class id; the image is exactly this map when
/// `noise_sigma` is zero.
pub fn class_intensity(id: u32) -> f64 {
    if id == 0 {
        return 0.05;
    }
    // spread ids over [0.3, 0.95] with a fixed stride so adjacent classes differ
    0.3 + 0.65 * ((id as u64 * 7) % 19) as f64 / 19.0
}

fn paint_superellipse(label: &mut Array2<u8>, cy: f64, cx: f64, ry: f64, rx: f64, id: u8) {
    let (h, w) = label.dim();
    let y0 = (cy - ry).floor().max(0.0) as usize;
    let y1 = ((cy + ry).ceil() as usize).min(h - 1);
    let x0 = (cx - rx).floor().max(0.0) as usize;
    let x1 = ((cx + rx).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy.powi(4) + dx.powi(4) <= 1.0 {
                label[[y, x]] = id;
            }
        }
    }
}

fn paint_rect(label: &mut Array2<u8>, y0: f64, y1: f64, x0: f64, x1: f64, id: u8) {
    let (h, w) = label.dim();
    let ys = y0.round().max(0.0) as usize;
    let ye = (y1.round() as usize).min(h - 1);
    let xs = x0.round().max(0.0) as usize;
    let xe = (x1.round() as usize).min(w - 1);
    for y in ys..=ye {
        for x in xs..=xe {
            label[[y, x]] = id;
        }
    }
}

/// Generate one phantom volume ([`PHANTOM_SLICES`] slices), labeled with a
/// window of `n_vertebrae` consecutive VB ids from the taxonomy, the discs
/// between them, and the spinal canal when the taxonomy has one. Deterministic
/// per seed.
pub fn synth_phantom(spec: &PhantomSpec, taxonomy: &ClassTaxonomy) -> Result<Vec<SliceSample>> {
    spec.validate()?;
    let vbs = taxonomy.vbs_top_down();
    if spec.n_vertebrae > vbs.len() {
        return Err(AtmError::InvalidArgument(format!(
            "n_vertebrae {} exceeds taxonomy VB count {}",
            spec.n_vertebrae, vbs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let n = spec.n_vertebrae;

    // Window of consecutive vertebrae, chosen per volume for class variety.
    let start = rng.gen_range(0..=(vbs.len() - n));
    let window: Vec<u8> = vbs[start..start + n].iter().map(|e| e.id as u8).collect();
    let discs: Vec<u8> = vbs[start..start + n - 1]
        .iter()
        .map(|e| {
            let d = taxonomy.entry_by_rank(e.rank + 1).expect("disc below every non-last VB");
            debug_assert_eq!(d.kind, ClassKind::ID);
            d.id as u8
        })
        .collect();
    let sc_id = taxonomy.entries.iter().find(|e| e.kind == ClassKind::SC).map(|e| e.id as u8);

    let h = size as f64;
    let w = size as f64;
    let h_vb = 0.9 * h / (n as f64 + 0.35 * (n as f64 - 1.0));
    let h_id = (0.35 * h_vb).max(1.0);
    let top = 0.05 * h;
    let base_cx = 0.42 * w;
    let rx_vb = 0.15 * w;
    let rx_id = 0.17 * w;

    let volume_id = format!("phantom{:08x}", spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).unwrap())
    } else {
        None
    };

    let mut slices = Vec::with_capacity(PHANTOM_SLICES);
    for slice_index in 0..PHANTOM_SLICES {
        let jitter = rng.gen_range(-0.02..0.02) * w;
        let cx = base_cx + jitter;
        let mut label = Array2::<u8>::zeros((size, size));

        let mut y = top;
        for (i, &vb) in window.iter().enumerate() {
            let cy = y + 0.5 * h_vb;
            paint_superellipse(&mut label, cy, cx, 0.5 * h_vb, rx_vb, vb);
            y += h_vb;
            if i + 1 < window.len() {
                paint_rect(&mut label, y, y + h_id - 1.0, cx - rx_id, cx + rx_id, discs[i]);
                y += h_id;
            }
        }
        if let Some(sc) = sc_id {
            let x0 = cx + rx_id + 0.02 * w;
            paint_rect(&mut label, top, y - 1.0, x0, x0 + 0.05 * w, sc);
        }

        let mut image = label.mapv(|id| class_intensity(id as u32));
        if let Some(dist) = &noise {
            image.mapv_inplace(|v| (v + dist.sample(&mut rng)).clamp(0.0, 1.0));
        }

        slices.push(SliceSample {
            image,
            label,
            volume_id: volume_id.clone(),
            slice_index,
            slice_count: PHANTOM_SLICES,
        });
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{builtin_taxonomy, Dataset};

    #[test]
    fn five_vertebrae_give_five_vbs_and_four_discs() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let spec = PhantomSpec { image_size: 96, n_vertebrae: 5, noise_sigma: 0.0, seed: 1 };
        let slices = synth_phantom(&spec, &tax).unwrap();
        assert_eq!(slices.len(), PHANTOM_SLICES);
        for s in &slices {
            let present = s.present_ids();
            let vbs = present
                .iter()
                .filter(|&&id| tax.entry(id).unwrap().kind == ClassKind::VB)
                .count();
            let ids = present
                .iter()
                .filter(|&&id| tax.entry(id).unwrap().kind == ClassKind::ID)
                .count();
            assert_eq!(vbs, 5, "slice {}", s.slice_index);
            assert_eq!(ids, 4, "slice {}", s.slice_index);
        }
    }

    #[test]
    fn zero_noise_renders_pure_intensity_map() {
        let tax = builtin_taxonomy(Dataset::Spider);
        let spec = PhantomSpec { image_size: 64, n_vertebrae: 4, noise_sigma: 0.0, seed: 2 };
        let slices = synth_phantom(&spec, &tax).unwrap();
        for s in &slices {
            for (&img, &lab) in s.image.iter().zip(s.label.iter()) {
                assert_eq!(img, class_intensity(lab as u32));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let spec = PhantomSpec { image_size: 64, n_vertebrae: 4, noise_sigma: 0.05, seed: 3 };
        let a = synth_phantom(&spec, &tax).unwrap();
        let b = synth_phantom(&spec, &tax).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn spider_phantom_contains_canal() {
        let tax = builtin_taxonomy(Dataset::Spider);
        let sc = tax.entries.iter().find(|e| e.kind == ClassKind::SC).unwrap().id;
        let spec = PhantomSpec { image_size: 64, n_vertebrae: 3, noise_sigma: 0.0, seed: 4 };
        let slices = synth_phantom(&spec, &tax).unwrap();
        assert!(slices[0].present_ids().contains(&sc));
    }

    #[test]
    fn rejects_too_many_vertebrae() {
        let tax = builtin_taxonomy(Dataset::Spider); // 9 VBs
        let spec = PhantomSpec { image_size: 64, n_vertebrae: 10, noise_sigma: 0.0, seed: 5 };
        assert!(synth_phantom(&spec, &tax).is_err());
    }

    #[test]
    fn rejects_bad_spec() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let spec = PhantomSpec { image_size: 16, n_vertebrae: 4, noise_sigma: 0.0, seed: 0 };
        assert!(synth_phantom(&spec, &tax).is_err());
        let spec = PhantomSpec { image_size: 64, n_vertebrae: 1, noise_sigma: 0.0, seed: 0 };
        assert!(synth_phantom(&spec, &tax).is_err());
    }
}
