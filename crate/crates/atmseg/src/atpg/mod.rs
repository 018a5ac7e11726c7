//! Anatomy-aware text prompt generation.
//!
//! Converts a slice annotation into one holistic prompt (three granularity
//! options) plus one presence sentence per class channel. The wording lives
//! in template files, not code: the default set uses anatomically correct
//! descriptors, the `paper_verbatim` set reproduces the original ATM-Net
//! example wording, and custom sets can be loaded from disk.

use crate::dataio::SliceSample;
use crate::error::{AtmError, Result};
use crate::taxonomy::{ClassEntry, ClassKind, ClassTaxonomy};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const DEFAULT_TOML: &str = include_str!("../../assets/templates/default.toml");
const PAPER_VERBATIM_TOML: &str = include_str!("../../assets/templates/paper_verbatim.toml");

/// Granularity of the holistic prompt: Opt1 names only the image type, Opt2
/// adds the enumeration of present substructures, Opt3 adds slice position
/// and disc relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptOption {
    Opt1,
    Opt2,
    Opt3,
}

impl PromptOption {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(PromptOption::Opt1),
            2 => Ok(PromptOption::Opt2),
            3 => Ok(PromptOption::Opt3),
            other => Err(AtmError::InvalidArgument(format!("prompt option {other} not in 1..=3"))),
        }
    }
}

/// Rough vertical position of a slice within its volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceThird {
    Upper,
    Middle,
    Lower,
}

/// Classify a slice into upper/middle/lower third by its index. Boundaries
/// are half-open: [0,1/3) upper, [1/3,2/3) middle, [2/3,1] lower, evaluated
/// in exact integer arithmetic.
pub fn classify_slice_third(slice_index: usize, slice_count: usize) -> Result<SliceThird> {
    if slice_count == 0 {
        return Err(AtmError::InvalidArgument("slice_count must be positive".into()));
    }
    if slice_index >= slice_count {
        return Err(AtmError::InvalidArgument(format!(
            "slice_index {slice_index} >= slice_count {slice_count}"
        )));
    }
    if 3 * slice_index < slice_count {
        Ok(SliceThird::Upper)
    } else if 3 * slice_index < 2 * slice_count {
        Ok(SliceThird::Middle)
    } else {
        Ok(SliceThird::Lower)
    }
}

#[derive(Debug, Clone, Deserialize)]
struct HolisticTemplates {
    opt1: String,
    opt2: String,
    opt3: String,
    empty_structures: String,
    third_upper: String,
    third_middle: String,
    third_lower: String,
    relation: String,
}

#[derive(Debug, Clone, Deserialize)]
struct ChannelTemplates {
    present: String,
    absent: String,
    background: String,
}

/// Kind-level descriptor overrides for one view; entries fall back to the
/// taxonomy descriptor when unset.
#[derive(Debug, Clone, Default, Deserialize)]
struct KindOverrides {
    vb: Option<String>,
    id: Option<String>,
    sc: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct DescriptorOverrides {
    #[serde(default)]
    holistic: KindOverrides,
    #[serde(default)]
    channel: KindOverrides,
}

/// A full set of prompt templates.
#[derive(Debug, Clone, Deserialize)]
pub struct TemplateSet {
    holistic: HolisticTemplates,
    channel: ChannelTemplates,
    #[serde(default)]
    descriptors: DescriptorOverrides,
}

#[derive(Debug, Clone, Copy)]
enum View {
    Holistic,
    Channel,
}

impl TemplateSet {
    pub fn default_set() -> Self {
        toml::from_str(DEFAULT_TOML).expect("embedded default templates parse")
    }

    pub fn paper_verbatim() -> Self {
        toml::from_str(PAPER_VERBATIM_TOML).expect("embedded verbatim templates parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AtmError::Config(format!("template file: {e}")))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtmError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    fn descriptor<'a>(&'a self, view: View, entry: &'a ClassEntry) -> &'a str {
        let overrides = match view {
            View::Holistic => &self.descriptors.holistic,
            View::Channel => &self.descriptors.channel,
        };
        let over = match entry.kind {
            ClassKind::VB => overrides.vb.as_deref(),
            ClassKind::ID => overrides.id.as_deref(),
            ClassKind::SC => overrides.sc.as_deref(),
            ClassKind::BG => None,
        };
        over.unwrap_or(&entry.descriptor)
    }
}

/// One holistic prompt plus one prompt per class channel for a slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub holistic: String,
    pub channel: Vec<String>,
    pub option: PromptOption,
    pub slice_third: SliceThird,
}

/// JSONL record emitted by `atmseg generate-prompts`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PromptRecord {
    pub volume_id: String,
    pub slice_index: usize,
    pub holistic: String,
    pub channel: Vec<String>,
}

fn present_set(label: &Array2<u8>) -> BTreeSet<u32> {
    label.iter().filter(|&&v| v != 0).map(|&v| v as u32).collect()
}

/// Render the holistic prompt for a label map at a given granularity.
pub fn generate_holistic(
    label: &Array2<u8>,
    third: SliceThird,
    taxonomy: &ClassTaxonomy,
    option: PromptOption,
    templates: &TemplateSet,
) -> Result<String> {
    if option == PromptOption::Opt1 {
        return Ok(templates.holistic.opt1.clone());
    }
    let present = present_set(label);
    let ordered = taxonomy.ordered_present(&present)?;
    let structures = if ordered.is_empty() {
        templates.holistic.empty_structures.clone()
    } else {
        ordered
            .iter()
            .map(|e| format!("{} {}", templates.descriptor(View::Holistic, e), e.name))
            .collect::<Vec<_>>()
            .join(", ")
    };
    match option {
        PromptOption::Opt1 => unreachable!(),
        PromptOption::Opt2 => Ok(templates.holistic.opt2.replace("{structures}", &structures)),
        PromptOption::Opt3 => {
            let third_phrase = match third {
                SliceThird::Upper => &templates.holistic.third_upper,
                SliceThird::Middle => &templates.holistic.third_middle,
                SliceThird::Lower => &templates.holistic.third_lower,
            };
            // Relation sentences only for discs whose two adjacent vertebrae
            // are also present, so no absent class is ever named.
            let mut relations = String::new();
            for e in &ordered {
                if e.kind != ClassKind::ID {
                    continue;
                }
                let Some((upper, lower)) = e.name.split_once('/') else { continue };
                let both_present = [upper, lower].iter().all(|n| {
                    taxonomy.by_name(n).is_some_and(|v| present.contains(&v.id))
                });
                if both_present {
                    relations.push_str(
                        &templates
                            .holistic
                            .relation
                            .replace("{disc}", &e.name)
                            .replace("{upper}", upper)
                            .replace("{lower}", lower),
                    );
                }
            }
            Ok(templates
                .holistic
                .opt3
                .replace("{third}", third_phrase)
                .replace("{structures}", &structures)
                .replace("{relations}", &relations))
        }
    }
}

/// Render the per-channel presence prompts, indexed by class id. The
/// background channel gets a fixed sentence; every other channel states
/// whether its class is present.
pub fn generate_channel_prompts(
    label: &Array2<u8>,
    taxonomy: &ClassTaxonomy,
    templates: &TemplateSet,
) -> Vec<String> {
    let present = present_set(label);
    taxonomy
        .entries
        .iter()
        .map(|e| {
            if e.kind == ClassKind::BG {
                return templates.channel.background.clone();
            }
            let tpl = if present.contains(&e.id) {
                &templates.channel.present
            } else {
                &templates.channel.absent
            };
            tpl.replace("{descriptor}", templates.descriptor(View::Channel, e))
                .replace("{name}", &e.name)
        })
        .collect()
}

/// Full ATPG pass for one slice: slice-third classification, the holistic
/// prompt at the requested option, and all channel prompts.
pub fn generate_bundle(
    sample: &SliceSample,
    taxonomy: &ClassTaxonomy,
    option: PromptOption,
    templates: &TemplateSet,
) -> Result<PromptBundle> {
    let third = classify_slice_third(sample.slice_index, sample.slice_count)?;
    let holistic = generate_holistic(&sample.label, third, taxonomy, option, templates)?;
    let channel = generate_channel_prompts(&sample.label, taxonomy, templates);
    Ok(PromptBundle { holistic, channel, option, slice_third: third })
}

/// Whitespace token count; the measure used by the tiny text encoder and the
/// granularity monotonicity checks.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{builtin_taxonomy, Dataset};

    fn label_with(tax: &ClassTaxonomy, names: &[&str]) -> Array2<u8> {
        let mut lab = Array2::<u8>::zeros((8, 8));
        for (i, n) in names.iter().enumerate() {
            let id = tax.by_name(n).unwrap().id as u8;
            lab[[i, 0]] = id;
        }
        lab
    }

    /// Occurrences of `name` as a punctuation-stripped whitespace token.
    fn token_occurrences(text: &str, name: &str) -> usize {
        text.split_whitespace()
            .map(|t| t.trim_matches(|c: char| c == ',' || c == '.' || c == ';'))
            .filter(|t| *t == name)
            .count()
    }

    #[test]
    fn slice_third_boundaries() {
        assert_eq!(classify_slice_third(0, 12).unwrap(), SliceThird::Upper);
        assert_eq!(classify_slice_third(11, 12).unwrap(), SliceThird::Lower);
        assert_eq!(classify_slice_third(4, 12).unwrap(), SliceThird::Middle);
        assert_eq!(classify_slice_third(3, 12).unwrap(), SliceThird::Upper);
        assert_eq!(classify_slice_third(8, 12).unwrap(), SliceThird::Lower);
        assert!(classify_slice_third(0, 0).is_err());
        assert!(classify_slice_third(5, 5).is_err());
    }

    #[test]
    fn opt3_verbatim_matches_quoted_opening() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = label_with(&tax, &["T10", "T10/T11", "T11"]);
        let tpl = TemplateSet::paper_verbatim();
        let s =
            generate_holistic(&lab, SliceThird::Middle, &tax, PromptOption::Opt3, &tpl).unwrap();
        assert!(
            s.starts_with(
                "The sagittal MRI of the lumbar spine demonstrates the anatomy in the true \
                 mid-sagittal plane, which, from superior to inferior, encompasses lumbar \
                 vertebra T10, intervertebral disc T10/T11"
            ),
            "got: {s}"
        );
    }

    #[test]
    fn opt3_default_uses_correct_descriptors() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = label_with(&tax, &["T10", "T10/T11", "T11"]);
        let tpl = TemplateSet::default_set();
        let s =
            generate_holistic(&lab, SliceThird::Middle, &tax, PromptOption::Opt3, &tpl).unwrap();
        assert!(s.contains("thoracic vertebra T10"), "got: {s}");
        assert!(s.contains("T10/T11 is between T10 and T11"), "got: {s}");
    }

    #[test]
    fn opt1_contains_no_class_names() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = label_with(&tax, &["L1", "L2", "L1/L2"]);
        let tpl = TemplateSet::default_set();
        let s = generate_holistic(&lab, SliceThird::Middle, &tax, PromptOption::Opt1, &tpl).unwrap();
        for e in tax.entries.iter().skip(1) {
            assert_eq!(token_occurrences(&s, &e.name), 0, "{} leaked into Opt1", e.name);
        }
    }

    #[test]
    fn opt2_all_background_uses_empty_phrase() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = Array2::<u8>::zeros((8, 8));
        let tpl = TemplateSet::default_set();
        let s = generate_holistic(&lab, SliceThird::Upper, &tax, PromptOption::Opt2, &tpl).unwrap();
        assert!(s.contains("no identifiable substructures"), "got: {s}");
    }

    #[test]
    fn opt2_each_present_class_exactly_once_and_no_absent() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let names = ["T12", "T12/L1", "L1", "L1/L2", "L2"];
        let lab = label_with(&tax, &names);
        let tpl = TemplateSet::default_set();
        let s = generate_holistic(&lab, SliceThird::Middle, &tax, PromptOption::Opt2, &tpl).unwrap();
        for e in tax.entries.iter().skip(1) {
            let expected = usize::from(names.contains(&e.name.as_str()));
            assert_eq!(token_occurrences(&s, &e.name), expected, "class {}", e.name);
        }
    }

    #[test]
    fn opt3_relation_skipped_when_vertebra_absent() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        // Disc present without its lower vertebra.
        let lab = label_with(&tax, &["T12", "T12/L1"]);
        let tpl = TemplateSet::default_set();
        let s = generate_holistic(&lab, SliceThird::Middle, &tax, PromptOption::Opt3, &tpl).unwrap();
        assert_eq!(token_occurrences(&s, "L1"), 0, "absent L1 leaked: {s}");
        assert!(!s.contains("is between"), "got: {s}");
    }

    #[test]
    fn channel_prompts_positive_negative_and_background() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = label_with(&tax, &["L1"]);
        let tpl = TemplateSet::default_set();
        let prompts = generate_channel_prompts(&lab, &tax, &tpl);
        assert_eq!(prompts.len(), 20);
        let l1 = tax.by_name("L1").unwrap().id as usize;
        let l2 = tax.by_name("L2").unwrap().id as usize;
        assert_eq!(prompts[l1], "It contains lumbar vertebra L1.");
        assert_eq!(prompts[l2], "It does not contain lumbar vertebra L2.");
        assert_eq!(prompts[0], "It contains the image background.");
    }

    #[test]
    fn channel_prompts_verbatim_descriptor() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let lab = label_with(&tax, &["L1"]);
        let tpl = TemplateSet::paper_verbatim();
        let prompts = generate_channel_prompts(&lab, &tax, &tpl);
        let l1 = tax.by_name("L1").unwrap().id as usize;
        assert_eq!(prompts[l1], "It contains thoracic vertebra L1.");
    }

    #[test]
    fn all_background_channels_all_negative() {
        let tax = builtin_taxonomy(Dataset::Spider);
        let lab = Array2::<u8>::zeros((4, 4));
        let tpl = TemplateSet::default_set();
        let prompts = generate_channel_prompts(&lab, &tax, &tpl);
        for (i, p) in prompts.iter().enumerate().skip(1) {
            assert!(p.starts_with("It does not contain"), "channel {i}: {p}");
        }
    }

    #[test]
    fn bundle_deterministic_and_option_affects_holistic_only() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let spec = crate::dataio::PhantomSpec {
            image_size: 64,
            n_vertebrae: 4,
            noise_sigma: 0.0,
            seed: 17,
        };
        let slices = crate::dataio::synth_phantom(&spec, &tax).unwrap();
        let tpl = TemplateSet::default_set();
        let a = generate_bundle(&slices[2], &tax, PromptOption::Opt3, &tpl).unwrap();
        let b = generate_bundle(&slices[2], &tax, PromptOption::Opt3, &tpl).unwrap();
        assert_eq!(a, b);
        let c = generate_bundle(&slices[2], &tax, PromptOption::Opt1, &tpl).unwrap();
        assert_eq!(a.channel, c.channel);
        assert_ne!(a.holistic, c.holistic);
    }

    #[test]
    fn token_counts_monotone_over_options() {
        let tax = builtin_taxonomy(Dataset::Spider);
        let tpl = TemplateSet::default_set();
        for seed in 0..4 {
            let spec = crate::dataio::PhantomSpec {
                image_size: 64,
                n_vertebrae: 3 + (seed as usize % 4),
                noise_sigma: 0.0,
                seed,
            };
            let slices = crate::dataio::synth_phantom(&spec, &tax).unwrap();
            for s in &slices {
                let third = classify_slice_third(s.slice_index, s.slice_count).unwrap();
                let t1 = token_count(
                    &generate_holistic(&s.label, third, &tax, PromptOption::Opt1, &tpl).unwrap(),
                );
                let t2 = token_count(
                    &generate_holistic(&s.label, third, &tax, PromptOption::Opt2, &tpl).unwrap(),
                );
                let t3 = token_count(
                    &generate_holistic(&s.label, third, &tax, PromptOption::Opt3, &tpl).unwrap(),
                );
                assert!(t1 <= t2 && t2 <= t3, "{t1} {t2} {t3}");
            }
        }
    }
}
