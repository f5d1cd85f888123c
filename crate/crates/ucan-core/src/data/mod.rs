//! Data pipeline: intensity normalization, domain-label construction,
//! training-pair sampling, fold splitting, synthetic phantom studies, and
//! on-disk study IO.

mod folds;
mod nifti;
mod normalize;
mod phantom;
mod sample;
mod studyio;

pub use folds::split_folds;
pub use nifti::{read_nifti, write_nifti};
pub use normalize::{denormalize, normalize};
pub use phantom::{generate_phantom_study, masked_pearson, PhantomParams};
pub use sample::{crop_patch, sample_training_pair, TrainingSample};
pub use studyio::{load_study, save_study, study_ids_in};

use ndarray::Array4;

use crate::volume::{DomainLabel, TracerId};

/// Builds the spatially constant one-hot domain label volume for `tracer`:
/// channel `ordinal(tracer)` is all ones, the other two channels all zeros.
pub fn make_domain_label(tracer: TracerId, shape: [usize; 3]) -> DomainLabel {
    let mut channels = Array4::zeros((3, shape[0], shape[1], shape[2]));
    channels
        .index_axis_mut(ndarray::Axis(0), tracer.ordinal())
        .fill(1.0);
    DomainLabel { channels, tracer }
}
