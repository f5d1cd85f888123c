//! Per-volume intensity normalization to [-1, 1] and its inverse.
//!
//! A volume is scaled by its own maximum, doubled, and shifted down by one,
//! so the maximum voxel maps to exactly 1. The recorded maximum makes the
//! mapping invertible at evaluation time.

use crate::error::{Error, Result};
use crate::volume::{NormRecord, Volume};

/// Allowed overshoot outside [-1, 1] for model outputs fed to `denormalize`.
const RANGE_TOLERANCE: f64 = 1e-4;

/// Scales `v` to [-1, 1]: `(v / max(v)) * 2 - 1`.
///
/// Rejects volumes with no strictly positive entry, since the scheme is
/// undefined there.
pub fn normalize(v: &Volume) -> Result<(Volume, NormRecord)> {
    let max = v.max_value();
    if !(max > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize a volume whose maximum is {max}; need at least one strictly positive voxel"
        )));
    }
    let record = NormRecord::new(max)?;
    let data = v.data.mapv(|x| (x / max) * 2.0 - 1.0);
    Ok((
        Volume {
            data,
            voxel_size_mm: v.voxel_size_mm,
        },
        record,
    ))
}

/// Inverse of [`normalize`]: `((v + 1) / 2) * rec.max_value`.
///
/// Negative results are deliberately not clamped; evaluation consumes the
/// values as produced.
pub fn denormalize(v: &Volume, rec: &NormRecord) -> Result<Volume> {
    if !(rec.max_value > 0.0) || !rec.max_value.is_finite() {
        return Err(Error::InvalidNormRecord(rec.max_value));
    }
    if let Some(bad) = v
        .data
        .iter()
        .find(|&&x| x < -1.0 - RANGE_TOLERANCE || x > 1.0 + RANGE_TOLERANCE)
    {
        return Err(Error::DegenerateInput(format!(
            "denormalize input voxel {bad} outside [-1, 1] beyond tolerance {RANGE_TOLERANCE}"
        )));
    }
    let m = rec.max_value;
    Ok(Volume {
        data: v.data.mapv(|x| ((x + 1.0) / 2.0) * m),
        voxel_size_mm: v.voxel_size_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Array3<f64>) -> Volume {
        Volume::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn constant_volume_maps_to_one() {
        let v = vol(Array3::from_elem((3, 3, 3), 10.0));
        let (n, rec) = normalize(&v).unwrap();
        assert!(n.data.iter().all(|&x| x == 1.0));
        assert_eq!(rec.max_value, 10.0);
    }

    #[test]
    fn half_max_maps_to_zero() {
        let mut d = Array3::from_elem((2, 2, 2), 5.0);
        d[[0, 0, 0]] = 10.0;
        let (n, _) = normalize(&vol(d)).unwrap();
        assert_eq!(n.data[[0, 0, 0]], 1.0);
        assert_eq!(n.data[[1, 1, 1]], 0.0);
    }

    #[test]
    fn all_zero_volume_rejected() {
        let v = vol(Array3::zeros((2, 2, 2)));
        assert!(normalize(&v).is_err());
    }

    #[test]
    fn negative_max_rejected() {
        let v = vol(Array3::from_elem((2, 2, 2), -3.0));
        assert!(normalize(&v).is_err());
    }

    #[test]
    fn denormalize_bounds() {
        let rec = NormRecord::new(7.0).unwrap();
        let hi = denormalize(&vol(Array3::from_elem((2, 2, 2), 1.0)), &rec).unwrap();
        assert!(hi.data.iter().all(|&x| x == 7.0));
        let lo = denormalize(&vol(Array3::from_elem((2, 2, 2), -1.0)), &rec).unwrap();
        assert!(lo.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn denormalize_rejects_bad_record() {
        let rec = NormRecord { max_value: 0.0 };
        assert!(denormalize(&vol(Array3::zeros((2, 2, 2))), &rec).is_err());
    }

    #[test]
    fn denormalize_rejects_out_of_range_input() {
        let rec = NormRecord::new(1.0).unwrap();
        let v = vol(Array3::from_elem((2, 2, 2), 1.5));
        assert!(denormalize(&v, &rec).is_err());
    }

    #[test]
    fn round_trip_identity_within_1e6_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let d = Array3::from_shape_fn((6, 5, 7), |_| rng.gen_range(0.0..100.0) + 1e-3);
            let v = vol(d);
            let (n, rec) = normalize(&v).unwrap();
            let back = denormalize(&n, &rec).unwrap();
            for (a, b) in v.data.iter().zip(back.data.iter()) {
                let rel = (a - b).abs() / a.abs().max(1e-12);
                assert!(rel < 1e-6, "round trip rel err {rel}");
            }
        }
    }
}
