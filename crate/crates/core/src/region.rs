//! The closed set of ten chest regions that all reasoning is routed through.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Anatomical region. Variant order is the fixed reporting order, so `Ord`
/// sorts regions the way reports list them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionId {
    TracheaBronchi,
    Thyroid,
    Lung,
    Heart,
    Mediastinum,
    Pleura,
    Esophagus,
    Abdomen,
    Bone,
    Breast,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown anatomical region {0:?}")]
pub struct UnknownRegion(pub String);

impl RegionId {
    /// All regions in reporting order.
    pub const ALL: [RegionId; 10] = [
        RegionId::TracheaBronchi,
        RegionId::Thyroid,
        RegionId::Lung,
        RegionId::Heart,
        RegionId::Mediastinum,
        RegionId::Pleura,
        RegionId::Esophagus,
        RegionId::Abdomen,
        RegionId::Bone,
        RegionId::Breast,
    ];

    pub fn canonical_name(self) -> &'static str {
        match self {
            RegionId::TracheaBronchi => "trachea_bronchi",
            RegionId::Thyroid => "thyroid",
            RegionId::Lung => "lung",
            RegionId::Heart => "heart",
            RegionId::Mediastinum => "mediastinum",
            RegionId::Pleura => "pleura",
            RegionId::Esophagus => "esophagus",
            RegionId::Abdomen => "abdomen",
            RegionId::Bone => "bone",
            RegionId::Breast => "breast",
        }
    }

    /// Name as written in prompt templates ("Trachea and Bronchi").
    pub fn display_name(self) -> &'static str {
        match self {
            RegionId::TracheaBronchi => "Trachea and Bronchi",
            RegionId::Thyroid => "Thyroid",
            RegionId::Lung => "Lung",
            RegionId::Heart => "Heart",
            RegionId::Mediastinum => "Mediastinum",
            RegionId::Pleura => "Pleura",
            RegionId::Esophagus => "Esophagus",
            RegionId::Abdomen => "Abdomen",
            RegionId::Bone => "Bone",
            RegionId::Breast => "Breast",
        }
    }

    /// Name used inside question text ("the trachea and bronchi").
    pub fn phrase(self) -> &'static str {
        match self {
            RegionId::TracheaBronchi => "trachea and bronchi",
            other => other.canonical_name(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sentence describing a normal finding for this region. Regions with a
    /// normal description template use it verbatim.
    pub fn normal_sentence(self) -> &'static str {
        match self {
            RegionId::TracheaBronchi => "Trachea and both main bronchi are open.",
            RegionId::Thyroid => "Thyroid gland size and density are normal.",
            RegionId::Lung => "No mass lesion with distinguishable borders was detected in both lungs.",
            RegionId::Heart => "Heart contour and size are normal.",
            RegionId::Mediastinum => "No enlarged lymph nodes in pathological dimensions were detected.",
            RegionId::Pleura => "Pleural effusion-thickening was not detected.",
            RegionId::Esophagus => {
                "Thoracic esophagus calibration was normal and no significant wall thickening was detected."
            }
            RegionId::Abdomen => {
                "No space-occupying lesion was detected in the liver that entered the cross-sectional area."
            }
            RegionId::Bone => "Bone structures in the study area are natural.",
            RegionId::Breast => "Both breasts are unremarkable.",
        }
    }
}

/// Normal description sentences as given in the report generation template,
/// each paired with the region it describes.
pub const NORMAL_TEMPLATE_SENTENCES: &[(&str, RegionId)] = &[
    ("Trachea and both main bronchi are open.", RegionId::TracheaBronchi),
    ("No occlusive pathology was detected in the trachea and both main bronchi.", RegionId::TracheaBronchi),
    ("Heart contour and size are normal.", RegionId::Heart),
    ("Pericardial effusion-thickening was not observed.", RegionId::Heart),
    (
        "Thoracic esophagus calibration was normal and no significant wall thickening was detected.",
        RegionId::Esophagus,
    ),
    ("Mediastinal main vascular structures, heart contour, size are normal.", RegionId::Mediastinum),
    ("No enlarged lymph nodes in pathological dimensions were detected.", RegionId::Mediastinum),
    ("Pleural effusion-thickening was not detected.", RegionId::Pleura),
    (
        "No space-occupying lesion was detected in the liver that entered the cross-sectional area.",
        RegionId::Abdomen,
    ),
    ("Bone structures in the study area are natural.", RegionId::Bone),
    ("Vertebral corpus heights are preserved.", RegionId::Bone),
];

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for RegionId {
    type Err = UnknownRegion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        canonicalize_region(s)
    }
}

// Keys are normalized: lowercase words separated by single spaces.
const ALIASES: &[(&str, RegionId)] = &[
    ("trachea and bronchi", RegionId::TracheaBronchi),
    ("trachea bronchi", RegionId::TracheaBronchi),
    ("trachea and bronchus", RegionId::TracheaBronchi),
    ("trachea", RegionId::TracheaBronchi),
    ("bronchi", RegionId::TracheaBronchi),
    ("bronchus", RegionId::TracheaBronchi),
    ("airway", RegionId::TracheaBronchi),
    ("airways", RegionId::TracheaBronchi),
    ("thyroid", RegionId::Thyroid),
    ("thyroid gland", RegionId::Thyroid),
    ("lung", RegionId::Lung),
    ("lungs", RegionId::Lung),
    ("pulmonary", RegionId::Lung),
    ("heart", RegionId::Heart),
    ("cardiac", RegionId::Heart),
    ("mediastinum", RegionId::Mediastinum),
    ("mediastinal", RegionId::Mediastinum),
    ("pleura", RegionId::Pleura),
    ("pleural", RegionId::Pleura),
    ("esophagus", RegionId::Esophagus),
    ("oesophagus", RegionId::Esophagus),
    ("esophageal", RegionId::Esophagus),
    ("abdomen", RegionId::Abdomen),
    ("abdominal", RegionId::Abdomen),
    ("upper abdomen", RegionId::Abdomen),
    ("bone", RegionId::Bone),
    ("bones", RegionId::Bone),
    ("skeleton", RegionId::Bone),
    ("breast", RegionId::Breast),
    ("breasts", RegionId::Breast),
];

/// Word prefixes that indicate a region is being talked about.
pub const MENTION_CUES: &[(&str, RegionId)] = &[
    ("trachea", RegionId::TracheaBronchi),
    ("bronch", RegionId::TracheaBronchi),
    ("airway", RegionId::TracheaBronchi),
    ("thyroid", RegionId::Thyroid),
    ("goiter", RegionId::Thyroid),
    ("lung", RegionId::Lung),
    ("pulmonary", RegionId::Lung),
    ("nodule", RegionId::Lung),
    ("emphysema", RegionId::Lung),
    ("ground glass", RegionId::Lung),
    ("atelecta", RegionId::Lung),
    ("consolidation", RegionId::Lung),
    ("pneumonia", RegionId::Lung),
    ("heart", RegionId::Heart),
    ("cardi", RegionId::Heart),
    ("pericardi", RegionId::Heart),
    ("coronary", RegionId::Heart),
    ("mediastin", RegionId::Mediastinum),
    ("lymph", RegionId::Mediastinum),
    ("pleura", RegionId::Pleura),
    ("pneumothorax", RegionId::Pleura),
    ("esophag", RegionId::Esophagus),
    ("oesophag", RegionId::Esophagus),
    ("hiatal", RegionId::Esophagus),
    ("abdom", RegionId::Abdomen),
    ("liver", RegionId::Abdomen),
    ("gallbladder", RegionId::Abdomen),
    ("kidney", RegionId::Abdomen),
    ("spleen", RegionId::Abdomen),
    ("pancrea", RegionId::Abdomen),
    ("skelet", RegionId::Bone),
    ("adrenal", RegionId::Abdomen),
    ("bone", RegionId::Bone),
    ("vertebra", RegionId::Bone),
    ("rib", RegionId::Bone),
    ("spine", RegionId::Bone),
    ("fracture", RegionId::Bone),
    ("osteo", RegionId::Bone),
    ("breast", RegionId::Breast),
];

/// Byte offsets (in the normalized text) and regions of every cue in `text`.
fn mentions(text: &str) -> Vec<(usize, RegionId)> {
    let padded = format!(" {}", normalize_words(text));
    let mut out = Vec::new();
    for (cue, region) in MENTION_CUES {
        let needle = format!(" {cue}");
        out.extend(padded.match_indices(&needle).map(|(pos, _)| (pos, *region)));
    }
    out
}

/// Regions mentioned anywhere in `text`, in reporting order.
pub fn mentioned_regions(text: &str) -> Vec<RegionId> {
    let mut found: Vec<RegionId> = mentions(text).into_iter().map(|(_, r)| r).collect();
    found.sort();
    found.dedup();
    found
}

/// Region of the earliest cue in `text`.
pub fn first_mentioned_region(text: &str) -> Option<RegionId> {
    mentions(text).into_iter().min_by_key(|(pos, r)| (*pos, *r)).map(|(_, r)| r)
}

/// Lowercases, maps punctuation and `_` to spaces and collapses whitespace.
pub fn normalize_words(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps free-form region text ("Trachea and Bronchi", "HEART.") onto the
/// enumeration. Case, punctuation and underscores are ignored.
pub fn canonicalize_region(raw: &str) -> Result<RegionId, UnknownRegion> {
    let key = normalize_words(raw);
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map(|(_, r)| *r)
        .ok_or_else(|| UnknownRegion(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_names_map() {
        for r in RegionId::ALL {
            assert_eq!(canonicalize_region(r.display_name()).unwrap(), r);
        }
        assert_eq!(canonicalize_region("Trachea and Bronchi").unwrap(), RegionId::TracheaBronchi);
    }

    #[test]
    fn normalization() {
        assert_eq!(canonicalize_region("HEART.").unwrap(), RegionId::Heart);
        assert_eq!(canonicalize_region("  lungs ").unwrap(), RegionId::Lung);
    }

    #[test]
    fn closed_enumeration() {
        assert_eq!(canonicalize_region("spleen"), Err(UnknownRegion("spleen".into())));
        assert!(canonicalize_region("").is_err());
    }

    #[test]
    fn idempotent_on_canonical_names() {
        for r in RegionId::ALL {
            let once = canonicalize_region(r.canonical_name()).unwrap();
            assert_eq!(once, r);
            assert_eq!(canonicalize_region(once.canonical_name()).unwrap(), once);
        }
    }

    #[test]
    fn order_is_reporting_order() {
        let mut v = RegionId::ALL.to_vec();
        v.reverse();
        v.sort();
        assert_eq!(v, RegionId::ALL);
        assert_eq!(RegionId::TracheaBronchi.index(), 0);
        assert_eq!(RegionId::Breast.index(), 9);
    }
}
