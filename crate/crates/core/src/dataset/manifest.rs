use serde::{Deserialize, Serialize};

use super::{Label, Window};

/// Identifies a sequence within a subject's data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqRef {
    pub run_id: u32,
    pub clip_index: u32,
    pub window: Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seq1_ref: SeqRef,
    pub seq2_ref: SeqRef,
    pub ntp_label: Label,
    pub sg_label: Label,
    pub subject: String,
    pub fold: u32,
    pub split: Split,
}
