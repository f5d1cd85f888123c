//! Minimal NIfTI-1 single-volume reader/writer.
//!
//! Covers exactly the subset this crate emits: uncompressed `.nii`,
//! little-endian, FLOAT64 (reading also accepts FLOAT32), 3D, identity
//! orientation with voxel sizes on the diagonal. Header bytes are fully
//! determined by the volume, so regenerating a study reproduces identical
//! files byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

/// Writes `volume` as an uncompressed FLOAT64 NIfTI-1 file.
///
/// Our `(depth, height, width)` arrays are stored width-fastest, which is
/// exactly NIfTI's x-fastest layout with `(x, y, z) = (width, height, depth)`.
pub fn write_nifti(path: &Path, volume: &Volume) -> Result<()> {
    let [d, h, w] = volume.shape();
    let mut hdr = vec![0u8; VOX_OFFSET];
    put_i32(&mut hdr, 0, HEADER_SIZE as i32);
    // dim[8]: rank then (x, y, z) extents
    put_i16(&mut hdr, 40, 3);
    put_i16(&mut hdr, 42, w as i16);
    put_i16(&mut hdr, 44, h as i16);
    put_i16(&mut hdr, 46, d as i16);
    for k in 4..8 {
        put_i16(&mut hdr, 40 + 2 * k, 1);
    }
    put_i16(&mut hdr, 70, DT_FLOAT64);
    put_i16(&mut hdr, 72, 64); // bitpix
    put_f32(&mut hdr, 76, 1.0); // pixdim[0] = qfac
    put_f32(&mut hdr, 80, volume.voxel_size_mm[2] as f32);
    put_f32(&mut hdr, 84, volume.voxel_size_mm[1] as f32);
    put_f32(&mut hdr, 88, volume.voxel_size_mm[0] as f32);
    put_f32(&mut hdr, 108, VOX_OFFSET as f32);
    put_f32(&mut hdr, 112, 1.0); // scl_slope
    hdr[123] = 2; // xyzt_units: millimetres
    put_i16(&mut hdr, 254, 1); // sform_code: scanner anat
    put_f32(&mut hdr, 280, volume.voxel_size_mm[2] as f32); // srow_x
    put_f32(&mut hdr, 300, volume.voxel_size_mm[1] as f32); // srow_y
    put_f32(&mut hdr, 320, volume.voxel_size_mm[0] as f32); // srow_z
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&hdr)
        .map_err(|e| Error::io(format!("writing header of {}", path.display()), e))?;
    let data = volume.data.as_slice().expect("volume is standard layout");
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing data of {}", path.display()), e))
}

/// Reads a volume written by [`write_nifti`] (or any little-endian 3D
/// FLOAT32/FLOAT64 `.nii` with plain scaling).
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let fail = |reason: &str| Error::VolumeFormat {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < VOX_OFFSET {
        return Err(fail("file shorter than a NIfTI-1 header"));
    }
    if get_i32(&bytes, 0) != HEADER_SIZE as i32 {
        return Err(fail(
            "sizeof_hdr != 348; big-endian or NIfTI-2 files are not supported",
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(fail("missing NIfTI magic"));
    }
    let rank = get_i16(&bytes, 40);
    let (w, h, d) = (
        get_i16(&bytes, 42).max(1) as usize,
        get_i16(&bytes, 44).max(1) as usize,
        get_i16(&bytes, 46).max(1) as usize,
    );
    if rank < 3 {
        return Err(fail("expected a 3D volume"));
    }
    if rank > 3 {
        for k in 4..=rank.min(7) {
            if get_i16(&bytes, 40 + 2 * k as usize) > 1 {
                return Err(fail("higher-dimensional volumes are not supported"));
            }
        }
    }
    let datatype = get_i16(&bytes, 70);
    let vox_offset = get_f32(&bytes, 108) as usize;
    if vox_offset < HEADER_SIZE || vox_offset > bytes.len() {
        return Err(fail("bad vox_offset"));
    }
    let n = w * h * d;
    let payload = &bytes[vox_offset..];
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_FLOAT64 => {
            if payload.len() < n * 8 {
                return Err(fail("truncated FLOAT64 data section"));
            }
            for chunk in payload[..n * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        DT_FLOAT32 => {
            if payload.len() < n * 4 {
                return Err(fail("truncated FLOAT32 data section"));
            }
            for chunk in payload[..n * 4].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        other => {
            return Err(fail(&format!(
                "unsupported datatype {other}; expected FLOAT32 (16) or FLOAT64 (64)"
            )))
        }
    }
    let slope = get_f32(&bytes, 112) as f64;
    let inter = get_f32(&bytes, 116) as f64;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let pix = [
        get_f32(&bytes, 88) as f64,
        get_f32(&bytes, 84) as f64,
        get_f32(&bytes, 80) as f64,
    ];
    let voxel = [
        if pix[0] > 0.0 { pix[0] } else { 1.0 },
        if pix[1] > 0.0 { pix[1] } else { 1.0 },
        if pix[2] > 0.0 { pix[2] } else { 1.0 },
    ];
    let arr = Array3::from_shape_vec((d, h, w), data)
        .map_err(|_| fail("data length inconsistent with dimensions"))?;
    Volume::new(arr, voxel)
}
