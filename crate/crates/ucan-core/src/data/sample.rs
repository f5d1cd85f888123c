//! Random training-pair sampling and patch cropping.

use rand::Rng;

use crate::data::{make_domain_label, normalize};
use crate::error::{Error, Result};
use crate::volume::{DomainLabel, Study, TracerId, Volume};

/// One training example: normalized source PET, normalized MR, normalized
/// ground-truth target PET, plus the target label `M` and the source
/// label `M†`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub x_pet: Volume,
    pub x_mr: Volume,
    pub y_gt: Volume,
    pub m_target: DomainLabel,
    pub m_source: DomainLabel,
}

impl TrainingSample {
    pub fn source(&self) -> TracerId {
        self.m_source.tracer
    }

    pub fn target(&self) -> TracerId {
        self.m_target.tracer
    }
}

/// Draws a training pair from `study`: the source tracer is uniform over
/// {A, B, C}, the target uniform over the remaining two. All volumes are
/// normalized to [-1, 1].
pub fn sample_training_pair<R: Rng>(study: &Study, rng: &mut R) -> Result<TrainingSample> {
    study.validate()?;
    let source = TracerId::ALL[rng.gen_range(0..3)];
    let others: Vec<TracerId> = TracerId::ALL.iter().copied().filter(|&t| t != source).collect();
    let target = others[rng.gen_range(0..2)];

    let (x_pet, _) = normalize(&study.pet[&source])?;
    let (y_gt, _) = normalize(&study.pet[&target])?;
    let (x_mr, _) = normalize(&study.mr)?;
    let shape = study.shape();
    Ok(TrainingSample {
        x_pet,
        x_mr,
        y_gt,
        m_target: make_domain_label(target, shape),
        m_source: make_domain_label(source, shape),
    })
}

/// Crops a random patch of `patch_shape` from a sample, biased to lie inside
/// the brain bounding box derived from the MR volume. Labels are rebuilt at
/// patch shape (they are spatially constant).
pub fn crop_patch<R: Rng>(
    sample: &TrainingSample,
    patch_shape: [usize; 3],
    rng: &mut R,
) -> Result<TrainingSample> {
    let full = sample.x_mr.shape();
    for axis in 0..3 {
        if patch_shape[axis] > full[axis] {
            return Err(Error::shape(
                &full,
                &patch_shape,
                "patch larger than volume".to_string(),
            ));
        }
    }
    // Background voxels sit at exactly -1 after normalization; anything
    // above marks tissue.
    let bbox = bounding_box(&sample.x_mr, -1.0 + 1e-9).unwrap_or([[0; 2]; 3].map(|_| [0, 0]));
    let mut corner = [0usize; 3];
    for axis in 0..3 {
        let max_corner = full[axis] - patch_shape[axis];
        let [lo_v, hi_v] = bbox[axis];
        // Prefer corners that keep the patch overlapping the brain span;
        // fall back to the whole valid range when the box is degenerate.
        let lo = lo_v.saturating_sub(patch_shape[axis] / 4).min(max_corner);
        let hi = hi_v
            .saturating_sub(patch_shape[axis].saturating_sub(1) / 2)
            .clamp(lo, max_corner);
        corner[axis] = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    }
    let slice = |v: &Volume| -> Volume {
        Volume {
            data: v
                .data
                .slice(ndarray::s![
                    corner[0]..corner[0] + patch_shape[0],
                    corner[1]..corner[1] + patch_shape[1],
                    corner[2]..corner[2] + patch_shape[2]
                ])
                .to_owned(),
            voxel_size_mm: v.voxel_size_mm,
        }
    };
    Ok(TrainingSample {
        x_pet: slice(&sample.x_pet),
        x_mr: slice(&sample.x_mr),
        y_gt: slice(&sample.y_gt),
        m_target: make_domain_label(sample.target(), patch_shape),
        m_source: make_domain_label(sample.source(), patch_shape),
    })
}

/// Axis-aligned bounding box (inclusive) of voxels above `threshold`.
pub fn bounding_box(v: &Volume, threshold: f64) -> Option<[[usize; 2]; 3]> {
    let shape = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &val) in v.data.indexed_iter() {
        if val > threshold {
            any = true;
            let idx = [z, y, x];
            for axis in 0..3 {
                lo[axis] = lo[axis].min(idx[axis]);
                hi[axis] = hi[axis].max(idx[axis]);
            }
        }
    }
    if any {
        Some([[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]])
    } else {
        let _ = shape;
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_study, PhantomParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn phantom() -> Study {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        generate_phantom_study("s0", [20, 20, 20], &mut rng, &PhantomParams::default()).unwrap()
    }

    #[test]
    fn source_and_target_always_differ() {
        let study = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = sample_training_pair(&study, &mut rng).unwrap();
            assert_ne!(s.source(), s.target());
            assert!(s.x_pet.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert!(s.y_gt.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert!(s.x_mr.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fixed_seed_replays_the_same_task_sequence() {
        let study = phantom();
        let draw = |seed: u64| -> Vec<(TracerId, TracerId)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32)
                .map(|_| {
                    let s = sample_training_pair(&study, &mut rng).unwrap();
                    (s.source(), s.target())
                })
                .collect()
        };
        assert_eq!(draw(77), draw(77));
        assert_ne!(draw(77), draw(78));
    }

    #[test]
    fn task_frequencies_are_uniform_over_the_six_pairs() {
        let study = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: BTreeMap<(TracerId, TracerId), usize> = BTreeMap::new();
        let n = 30_000;
        for _ in 0..n {
            let source = TracerId::ALL[rng.gen_range(0..3)];
            let others: Vec<TracerId> =
                TracerId::ALL.iter().copied().filter(|&t| t != source).collect();
            let target = others[rng.gen_range(0..2)];
            *counts.entry((source, target)).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &c) in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 1.0 / 6.0).abs() < 0.02,
                "pair {pair:?} frequency {freq}"
            );
        }
    }

    #[test]
    fn incomplete_study_rejected() {
        let mut study = phantom();
        study.pet.remove(&TracerId::C);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_training_pair(&study, &mut rng).unwrap_err();
        assert!(matches!(err, Error::MissingModality(_)), "{err}");
    }

    #[test]
    fn cropped_patch_has_requested_shape_and_constant_labels() {
        let study = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_training_pair(&study, &mut rng).unwrap();
        let p = crop_patch(&s, [16, 16, 16], &mut rng).unwrap();
        assert_eq!(p.x_pet.shape(), [16, 16, 16]);
        assert_eq!(p.m_target.shape(), [16, 16, 16]);
        p.m_target.validate().unwrap();
        p.m_source.validate().unwrap();
    }

    #[test]
    fn patch_larger_than_volume_rejected() {
        let study = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_training_pair(&study, &mut rng).unwrap();
        assert!(crop_patch(&s, [64, 16, 16], &mut rng).is_err());
    }
}
