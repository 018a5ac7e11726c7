//! Fine-grained class space for lumbar spine segmentation.
//!
//! A [`ClassTaxonomy`] fixes the set of segmentable substructures — vertebral
//! bodies (VB), intervertebral discs (ID), spinal canal (SC) — plus background,
//! their integer ids, and their superior-to-inferior anatomical ordering.
//! Every other module keys on these ids.

use crate::error::{AtmError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Anatomical kind of a class entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassKind {
    /// Background (always id 0).
    BG,
    /// Vertebral body.
    VB,
    /// Intervertebral disc.
    ID,
    /// Spinal canal.
    SC,
}

/// Rank given to SC entries so they always sort after every VB/ID.
pub const SC_RANK: u32 = 1000;

/// One class of the segmentation taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
    /// Superior-to-inferior position; consecutive integers for VB/ID,
    /// [`SC_RANK`] for the spinal canal, 0 for background.
    pub rank: u32,
    /// Anatomical descriptor used in prompt text, e.g. "lumbar vertebra".
    pub descriptor: String,
}

/// Ordered class table: background + all segmentable substructures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub name: String,
    pub entries: Vec<ClassEntry>,
}

/// Built-in dataset taxonomies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    MRSpineSeg,
    Spider,
}

impl std::str::FromStr for Dataset {
    type Err = AtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mrspineseg" => Ok(Dataset::MRSpineSeg),
            "spider" => Ok(Dataset::Spider),
            other => Err(AtmError::InvalidArgument(format!(
                "unknown dataset '{other}' (expected MRSpineSeg or SPIDER)"
            ))),
        }
    }
}

fn vb_descriptor(name: &str) -> &'static str {
    match name {
        "T9" | "T10" | "T11" | "T12" => "thoracic vertebra",
        "S" => "sacrum",
        _ => "lumbar vertebra",
    }
}

/// Return the 20-entry taxonomy (background + 19 substructures) for a
/// supported dataset.
///
/// Ids follow superior-to-inferior order after background. MRSpineSeg has
/// 10 VBs (T9..S) and 9 IDs; SPIDER swaps the sacrum for the spinal canal,
/// which carries the maximal rank so it always sorts last.
pub fn builtin_taxonomy(dataset: Dataset) -> ClassTaxonomy {
    let vbs_top_down = ["T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5"];
    let mut entries = vec![ClassEntry {
        id: 0,
        name: "background".to_string(),
        kind: ClassKind::BG,
        rank: 0,
        descriptor: String::new(),
    }];

    let mut rank = 0u32;
    let push = |entries: &mut Vec<ClassEntry>, name: String, kind: ClassKind, rank: u32| {
        let descriptor = match kind {
            ClassKind::VB => vb_descriptor(&name).to_string(),
            ClassKind::ID => "intervertebral disc".to_string(),
            ClassKind::SC => "spinal canal".to_string(),
            ClassKind::BG => String::new(),
        };
        let id = entries.len() as u32;
        entries.push(ClassEntry { id, name, kind, rank, descriptor });
    };

    for (i, vb) in vbs_top_down.iter().enumerate() {
        rank += 1;
        push(&mut entries, vb.to_string(), ClassKind::VB, rank);
        // Disc below this VB: between it and the next one down (S after L5).
        let below = if i + 1 < vbs_top_down.len() { vbs_top_down[i + 1] } else { "S" };
        rank += 1;
        push(&mut entries, format!("{vb}/{below}"), ClassKind::ID, rank);
    }
    match dataset {
        Dataset::MRSpineSeg => {
            rank += 1;
            push(&mut entries, "S".to_string(), ClassKind::VB, rank);
        }
        Dataset::Spider => {
            push(&mut entries, "Spinal Canal".to_string(), ClassKind::SC, SC_RANK);
        }
    }

    ClassTaxonomy {
        name: match dataset {
            Dataset::MRSpineSeg => "MRSpineSeg".to_string(),
            Dataset::Spider => "SPIDER".to_string(),
        },
        entries,
    }
}

impl ClassTaxonomy {
    /// Total channel count including background.
    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    /// Foreground class count (excluding background).
    pub fn num_foreground(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn entry(&self, id: u32) -> Result<&ClassEntry> {
        self.entries
            .get(id as usize)
            .filter(|e| e.id == id)
            .ok_or(AtmError::InvalidClass(id))
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn vb_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ClassKind::VB).count()
    }

    /// VB entries sorted superior-to-inferior.
    pub fn vbs_top_down(&self) -> Vec<&ClassEntry> {
        let mut vbs: Vec<_> = self.entries.iter().filter(|e| e.kind == ClassKind::VB).collect();
        vbs.sort_by_key(|e| e.rank);
        vbs
    }

    pub fn entry_by_rank(&self, rank: u32) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.rank == rank && e.kind != ClassKind::BG)
    }

    /// Check structural invariants: ids 0..n contiguous, id 0 background,
    /// unique names, non-empty descriptors, strict rank order over VB/ID.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() || self.entries[0].kind != ClassKind::BG {
            return Err(AtmError::Config("taxonomy must start with background at id 0".into()));
        }
        let mut names = BTreeSet::new();
        let mut ranks = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(AtmError::Config(format!("non-contiguous id {} at index {i}", e.id)));
            }
            if !names.insert(e.name.clone()) {
                return Err(AtmError::Config(format!("duplicate class name '{}'", e.name)));
            }
            if e.kind != ClassKind::BG {
                if e.descriptor.is_empty() {
                    return Err(AtmError::Config(format!("empty descriptor for '{}'", e.name)));
                }
                if !ranks.insert(e.rank) {
                    return Err(AtmError::Config(format!("duplicate rank {} ('{}')", e.rank, e.name)));
                }
            }
        }
        Ok(())
    }

    /// Entries for `present_ids`, sorted superior-to-inferior with any SC
    /// entry last; background is excluded. Unknown ids are an error.
    pub fn ordered_present(&self, present_ids: &BTreeSet<u32>) -> Result<Vec<&ClassEntry>> {
        let mut out = Vec::with_capacity(present_ids.len());
        for &id in present_ids {
            let e = self.entry(id)?;
            if e.kind != ClassKind::BG {
                out.push(e);
            }
        }
        out.sort_by_key(|e| e.rank);
        Ok(out)
    }

    /// Load from a JSON document previously produced by [`Self::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let tax: ClassTaxonomy = serde_json::from_str(text)?;
        tax.validate()?;
        Ok(tax)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(tax: &ClassTaxonomy, names: &[&str]) -> BTreeSet<u32> {
        names.iter().map(|n| tax.by_name(n).unwrap().id).collect()
    }

    #[test]
    fn mrspineseg_has_20_entries_with_t9_t10_disc() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        tax.validate().unwrap();
        assert_eq!(tax.num_classes(), 20);
        assert_eq!(tax.num_foreground(), 19);
        assert!(tax.by_name("T9/T10").is_some());
        assert_eq!(tax.vb_count(), 10);
        assert_eq!(tax.entries.iter().filter(|e| e.kind == ClassKind::ID).count(), 9);
        assert!(tax.by_name("S").is_some());
        assert!(tax.entries.iter().all(|e| e.kind != ClassKind::SC));
    }

    #[test]
    fn spider_has_exactly_one_spinal_canal() {
        let tax = builtin_taxonomy(Dataset::Spider);
        tax.validate().unwrap();
        assert_eq!(tax.num_classes(), 20);
        let scs: Vec<_> = tax.entries.iter().filter(|e| e.kind == ClassKind::SC).collect();
        assert_eq!(scs.len(), 1);
        assert_eq!(scs[0].name, "Spinal Canal");
        assert_eq!(tax.vb_count(), 9);
        assert!(tax.by_name("S").is_none());
        assert!(tax.by_name("L5/S").is_some());
    }

    #[test]
    fn background_is_id_zero_for_both_datasets() {
        for ds in [Dataset::MRSpineSeg, Dataset::Spider] {
            let tax = builtin_taxonomy(ds);
            assert_eq!(tax.entries[0].kind, ClassKind::BG);
            assert_eq!(tax.entries[0].id, 0);
        }
    }

    #[test]
    fn ordered_present_sorts_superior_to_inferior() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let present = ids(&tax, &["L1", "T12", "T12/L1"]);
        let ordered = tax.ordered_present(&present).unwrap();
        let names: Vec<_> = ordered.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["T12", "T12/L1", "L1"]);
    }

    #[test]
    fn ordered_present_empty_and_sc_last() {
        let tax = builtin_taxonomy(Dataset::Spider);
        assert!(tax.ordered_present(&BTreeSet::new()).unwrap().is_empty());
        let present = ids(&tax, &["Spinal Canal", "L5"]);
        let names: Vec<_> =
            tax.ordered_present(&present).unwrap().iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, ["L5", "Spinal Canal"]);
    }

    #[test]
    fn ordered_present_rejects_unknown_id() {
        let tax = builtin_taxonomy(Dataset::MRSpineSeg);
        let mut present = BTreeSet::new();
        present.insert(99u32);
        assert!(matches!(tax.ordered_present(&present), Err(AtmError::InvalidClass(99))));
    }

    #[test]
    fn disc_rank_lies_between_its_vertebrae() {
        for ds in [Dataset::MRSpineSeg, Dataset::Spider] {
            let tax = builtin_taxonomy(ds);
            for e in &tax.entries {
                if e.kind != ClassKind::ID {
                    continue;
                }
                let (upper, lower) = e.name.split_once('/').unwrap();
                let ru = tax.by_name(upper).map(|v| v.rank);
                let rl = tax.by_name(lower).map(|v| v.rank);
                if let Some(ru) = ru {
                    assert!(ru < e.rank, "{}: upper rank", e.name);
                }
                if let Some(rl) = rl {
                    assert!(e.rank < rl, "{}: lower rank", e.name);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let tax = builtin_taxonomy(Dataset::Spider);
        let json = tax.to_json().unwrap();
        let back = ClassTaxonomy::from_json(&json).unwrap();
        assert_eq!(tax, back);
    }
}
