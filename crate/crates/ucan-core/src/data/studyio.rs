//! On-disk study layout.
//!
//! One directory per study:
//!
//! ```text
//! <study_dir>/
//!   pet_a.nii          tracer A volume
//!   pet_b.nii          tracer B volume
//!   pet_c.nii          tracer C volume
//!   mr.nii             anatomical MR volume
//!   mask_<roi>.nii     one binary volume per ROI
//!   records.json       id, voxel sizes, per-tracer normalization records
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::nifti::{read_nifti, write_nifti};
use crate::error::{Error, Result};
use crate::volume::{NormRecord, Study, TracerId, Volume};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: String,
    voxel_size_mm: [f64; 3],
    norm_records: BTreeMap<TracerId, NormRecord>,
}

fn pet_file(tracer: TracerId) -> &'static str {
    match tracer {
        TracerId::A => "pet_a.nii",
        TracerId::B => "pet_b.nii",
        TracerId::C => "pet_c.nii",
    }
}

pub fn save_study(study: &Study, dir: &Path) -> Result<()> {
    study.validate()?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating study dir {}", dir.display()), e))?;
    for (&tracer, vol) in &study.pet {
        write_nifti(&dir.join(pet_file(tracer)), vol)?;
    }
    write_nifti(&dir.join("mr.nii"), &study.mr)?;
    for (name, mask) in &study.roi_masks {
        write_nifti(&dir.join(format!("mask_{name}.nii")), mask)?;
    }
    let sidecar = Sidecar {
        id: study.id.clone(),
        voxel_size_mm: study.mr.voxel_size_mm,
        norm_records: study.norm_records.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(dir.join("records.json"), json + "\n")
        .map_err(|e| Error::io(format!("writing {}/records.json", dir.display()), e))
}

pub fn load_study(dir: &Path) -> Result<Study> {
    let sidecar_path = dir.join("records.json");
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingModality(format!("{} has no records.json", dir.display()))
        } else {
            Error::io(format!("reading {}", sidecar_path.display()), e)
        }
    })?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::VolumeFormat {
        path: sidecar_path.display().to_string(),
        reason: e.to_string(),
    })?;

    // Voxel sizes in NIfTI headers are f32; the sidecar keeps full precision.
    let with_sidecar_voxels = |mut v: Volume| -> Volume {
        v.voxel_size_mm = sidecar.voxel_size_mm;
        v
    };

    let mut pet = BTreeMap::new();
    for tracer in TracerId::ALL {
        let path = dir.join(pet_file(tracer));
        if !path.exists() {
            return Err(Error::MissingModality(format!(
                "study {}: missing {}",
                dir.display(),
                pet_file(tracer)
            )));
        }
        pet.insert(tracer, with_sidecar_voxels(read_nifti(&path)?));
    }
    let mr_path = dir.join("mr.nii");
    if !mr_path.exists() {
        return Err(Error::MissingModality(format!(
            "study {}: missing mr.nii",
            dir.display()
        )));
    }
    let mr = with_sidecar_voxels(read_nifti(&mr_path)?);

    let mut roi_masks = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("mask_") && n.ends_with(".nii"))
        .collect();
    entries.sort();
    for file in entries {
        let name = file["mask_".len()..file.len() - ".nii".len()].to_string();
        roi_masks.insert(name, with_sidecar_voxels(read_nifti(&dir.join(&file))?));
    }

    Study::new(sidecar.id, pet, mr, roi_masks, sidecar.norm_records)
}

/// Study subdirectories of a dataset root, sorted by name.
pub fn study_ids_in(root: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(format!("listing dataset {}", root.display()), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.path().join("records.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(ids)
}
