//! Shared domain types: tracer identifiers, 3D volumes, one-hot domain
//! labels, normalization records, and study bundles.
//!
//! All multi-channel tensors in this crate use the axis order
//! `(channel, depth, height, width)`; bare volumes are `(depth, height, width)`.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three tracer domains handled by the translation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TracerId {
    A,
    B,
    C,
}

impl TracerId {
    pub const ALL: [TracerId; 3] = [TracerId::A, TracerId::B, TracerId::C];

    /// Fixed total mapping A -> 0, B -> 1, C -> 2.
    pub fn ordinal(self) -> usize {
        match self {
            TracerId::A => 0,
            TracerId::B => 1,
            TracerId::C => 2,
        }
    }

    pub fn from_ordinal(ord: usize) -> Option<TracerId> {
        match ord {
            0 => Some(TracerId::A),
            1 => Some(TracerId::B),
            2 => Some(TracerId::C),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<TracerId> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Some(TracerId::A),
            "B" => Some(TracerId::B),
            "C" => Some(TracerId::C),
            _ => None,
        }
    }
}

impl fmt::Display for TracerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TracerId::A => write!(f, "A"),
            TracerId::B => write!(f, "B"),
            TracerId::C => write!(f, "C"),
        }
    }
}

/// An ordered (source, target) domain pair with `source != target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TranslationTask {
    pub source: TracerId,
    pub target: TracerId,
}

impl TranslationTask {
    pub fn new(source: TracerId, target: TracerId) -> Result<Self> {
        if source == target {
            return Err(Error::IdentityTask(source.to_string()));
        }
        Ok(TranslationTask { source, target })
    }

    /// The six tasks in the fixed reporting order:
    /// A->B, A->C, B->A, B->C, C->A, C->B.
    pub fn all() -> Vec<TranslationTask> {
        let mut tasks = Vec::with_capacity(6);
        for &source in &TracerId::ALL {
            for &target in &TracerId::ALL {
                if source != target {
                    tasks.push(TranslationTask { source, target });
                }
            }
        }
        tasks
    }

    pub fn parse(s: &str) -> Option<TranslationTask> {
        let (src, tgt) = s.split_once("->")?;
        TranslationTask::new(TracerId::parse(src)?, TracerId::parse(tgt)?).ok()
    }
}

impl fmt::Display for TranslationTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

/// A dense 3D scalar grid with voxel-size metadata. The universal carrier
/// for PET, MR, masks, and model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub voxel_size_mm: [f64; 3],
}

impl Volume {
    /// Builds a volume, rejecting non-finite entries and non-positive voxel sizes.
    pub fn new(data: Array3<f64>, voxel_size_mm: [f64; 3]) -> Result<Volume> {
        if voxel_size_mm.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "voxel sizes must be positive and finite, got {voxel_size_mm:?}"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "volume data".into(),
                value: *bad,
            });
        }
        Ok(Volume {
            data,
            voxel_size_mm,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.shape() == other.shape() && self.voxel_size_mm == other.voxel_size_mm
    }

    /// Maximum voxel value.
    pub fn max_value(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// True when every voxel is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// A new volume with the same geometry, filled with `value`.
    pub fn filled_like(&self, value: f64) -> Volume {
        Volume {
            data: Array3::from_elem(self.data.raw_dim(), value),
            voxel_size_mm: self.voxel_size_mm,
        }
    }
}

/// Spatially constant 3-channel one-hot binary volume declaring a tracer
/// domain; channel `ordinal(tracer)` is all ones, the other two all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLabel {
    pub channels: Array4<f64>,
    pub tracer: TracerId,
}

impl DomainLabel {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.channels.shape();
        [s[1], s[2], s[3]]
    }

    /// Checks the one-hot partition invariant at every voxel.
    pub fn validate(&self) -> Result<()> {
        let hot = self.tracer.ordinal();
        for c in 0..3 {
            let want = if c == hot { 1.0 } else { 0.0 };
            if self
                .channels
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .any(|&v| v != want)
            {
                return Err(Error::DegenerateInput(format!(
                    "domain label for tracer {} is not one-hot on channel {c}",
                    self.tracer
                )));
            }
        }
        Ok(())
    }
}

/// The pre-normalization maximum recorded when a volume is scaled to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub max_value: f64,
}

impl NormRecord {
    pub fn new(max_value: f64) -> Result<NormRecord> {
        if !(max_value > 0.0) || !max_value.is_finite() {
            return Err(Error::InvalidNormRecord(max_value));
        }
        Ok(NormRecord { max_value })
    }
}

/// One subject's co-registered bundle: all three tracer volumes, the MR
/// volume, named binary ROI masks, and per-tracer normalization records.
#[derive(Debug, Clone)]
pub struct Study {
    pub id: String,
    pub pet: BTreeMap<TracerId, Volume>,
    pub mr: Volume,
    pub roi_masks: BTreeMap<String, Volume>,
    pub norm_records: BTreeMap<TracerId, NormRecord>,
}

impl Study {
    /// Assembles a study, enforcing completeness, co-registration, and
    /// binary masks.
    pub fn new(
        id: impl Into<String>,
        pet: BTreeMap<TracerId, Volume>,
        mr: Volume,
        roi_masks: BTreeMap<String, Volume>,
        norm_records: BTreeMap<TracerId, NormRecord>,
    ) -> Result<Study> {
        let study = Study {
            id: id.into(),
            pet,
            mr,
            roi_masks,
            norm_records,
        };
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        for tracer in TracerId::ALL {
            if !self.pet.contains_key(&tracer) {
                return Err(Error::MissingModality(format!(
                    "study '{}' has no PET volume for tracer {tracer}",
                    self.id
                )));
            }
            if !self.norm_records.contains_key(&tracer) {
                return Err(Error::MissingModality(format!(
                    "study '{}' has no normalization record for tracer {tracer}",
                    self.id
                )));
            }
        }
        for (tracer, vol) in &self.pet {
            if !vol.same_geometry(&self.mr) {
                return Err(Error::shape(
                    &self.mr.shape(),
                    &vol.shape(),
                    format!("study '{}': tracer {tracer} vs MR", self.id),
                ));
            }
        }
        for (name, mask) in &self.roi_masks {
            if !mask.same_geometry(&self.mr) {
                return Err(Error::shape(
                    &self.mr.shape(),
                    &mask.shape(),
                    format!("study '{}': mask '{name}' vs MR", self.id),
                ));
            }
            if let Some(bad) = mask.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryMask {
                    name: name.clone(),
                    value: *bad,
                });
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.mr.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn ordinal_is_fixed_and_total() {
        assert_eq!(TracerId::A.ordinal(), 0);
        assert_eq!(TracerId::B.ordinal(), 1);
        assert_eq!(TracerId::C.ordinal(), 2);
    }

    #[test]
    fn ordinal_round_trips() {
        for t in TracerId::ALL {
            assert_eq!(TracerId::from_ordinal(t.ordinal()), Some(t));
        }
        assert_eq!(TracerId::from_ordinal(3), None);
    }

    #[test]
    fn task_order_matches_reporting_convention() {
        let names: Vec<String> = TranslationTask::all()
            .iter()
            .map(|t| t.to_string())
            .collect();
        assert_eq!(names, ["A->B", "A->C", "B->A", "B->C", "C->A", "C->B"]);
    }

    #[test]
    fn identity_task_rejected() {
        assert!(TranslationTask::new(TracerId::A, TracerId::A).is_err());
    }

    #[test]
    fn volume_rejects_nan() {
        let mut d = Array3::zeros((2, 2, 2));
        d[[0, 0, 0]] = f64::NAN;
        assert!(Volume::new(d, [1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn norm_record_requires_positive_max() {
        assert!(NormRecord::new(0.0).is_err());
        assert!(NormRecord::new(-1.0).is_err());
        assert!(NormRecord::new(10.0).is_ok());
    }
}
