//! V3D volume format and the dataset manifest.
//!
//! Layout (little endian): bytes 0-3 magic `V3D1`, bytes 4-7 reserved zero,
//! bytes 8-19 three u32 dims D,H,W, bytes 20-31 three f32 spacings in mm,
//! then D*H*W f32 voxels with W fastest. File size is exactly
//! `32 + 4*D*H*W` bytes.

use crate::error::FormatError;
use crate::phantom::{Sample, Split, Volume};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"V3D1";
/// Guard against absurd headers before allocating.
const MAX_VOXELS: u64 = 1 << 31;

pub fn write_v3d(vol: &Volume, path: &Path) -> Result<(), FormatError> {
    let p = path.display().to_string();
    let mut buf = Vec::with_capacity(32 + 4 * vol.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[0u8; 4]);
    for &d in &vol.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &vol.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for &v in &vol.voxels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| FormatError::io(&p, e))
}

pub fn read_v3d(path: &Path) -> Result<Volume, FormatError> {
    let p = path.display().to_string();
    let mut file = std::fs::File::open(path).map_err(|e| FormatError::io(&p, e))?;
    let mut header = [0u8; 32];
    file.read_exact(&mut header).map_err(|_| FormatError::Truncated {
        path: p.clone(),
        need: 32,
        have: std::fs::metadata(path).map(|m| m.len()).unwrap_or(0),
    })?;
    if &header[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: p,
            expected: "V3D1",
        });
    }
    let dim = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let dims_u32 = [dim(0), dim(1), dim(2)];
    let voxels = dims_u32.iter().map(|&d| d as u64).product::<u64>();
    if voxels == 0 || voxels > MAX_VOXELS {
        return Err(FormatError::DimOverflow {
            path: p,
            dims: format!("{dims_u32:?}"),
        });
    }
    let spacing: [f32; 3] = std::array::from_fn(|i| {
        f32::from_le_bytes(header[20 + 4 * i..24 + 4 * i].try_into().unwrap())
    });
    let mut payload = vec![0u8; voxels as usize * 4];
    file.read_exact(&mut payload).map_err(|_| FormatError::Truncated {
        path: p.clone(),
        need: 32 + voxels * 4,
        have: std::fs::metadata(path).map(|m| m.len()).unwrap_or(0),
    })?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Volume {
        dims: dims_u32.map(|d| d as usize),
        spacing,
        voxels: data,
    })
}

/// Writes a dataset directory: `images/<id>.v3d`, `masks/<id>.v3d` and a
/// `manifest.csv` with one row per sample.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<(), FormatError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| FormatError::io(d.display().to_string(), e))?;
    }
    let mut manifest = String::from("id,image,mask,pathology,outcome,split\n");
    for s in samples {
        let image_rel = format!("images/{}.v3d", s.id);
        let mask_rel = format!("masks/{}.v3d", s.id);
        write_v3d(&s.image, &dir.join(&image_rel))?;
        write_v3d(&s.mask, &dir.join(&mask_rel))?;
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id, image_rel, mask_rel, s.pathology, s.outcome, s.split
        ));
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| FormatError::io(mpath.display().to_string(), e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, FormatError> {
    let mpath = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| FormatError::io(mpath.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(FormatError::Malformed {
                path: mpath.display().to_string(),
                what: "manifest row",
                detail: format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len()),
            });
        }
        let bad = |what: &'static str, detail: String| FormatError::Malformed {
            path: mpath.display().to_string(),
            what,
            detail,
        };
        let image = read_v3d(&dir.join(fields[1]))?;
        let mask = read_v3d(&dir.join(fields[2]))?;
        let pathology: u8 = fields[3]
            .parse()
            .map_err(|_| bad("pathology", fields[3].into()))?;
        let outcome: u8 = fields[4]
            .parse()
            .map_err(|_| bad("outcome", fields[4].into()))?;
        let split =
            Split::parse(fields[5]).ok_or_else(|| bad("split", fields[5].into()))?;
        samples.push(Sample {
            id: fields[0].to_string(),
            image,
            mask,
            pathology,
            outcome,
            split,
        });
    }
    Ok(samples)
}

/// Per-slice 8-bit binary PGM dumps (one file per z slice), values scaled to
/// the volume max.
pub fn write_pgm_slices(vol: &Volume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, FormatError> {
    std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir.display().to_string(), e))?;
    let [d, h, w] = vol.dims;
    let max = vol.voxels.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let mut written = Vec::with_capacity(d);
    for z in 0..d {
        let path = dir.join(format!("{stem}_z{z:03}.pgm"));
        let mut buf = Vec::with_capacity(64 + h * w);
        buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        for y in 0..h {
            for x in 0..w {
                let v = vol.voxels[(z * h + y) * w + x] / max;
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let mut f = std::fs::File::create(&path)
            .map_err(|e| FormatError::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| FormatError::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, GenConfig};

    #[test]
    fn round_trip_is_bit_exact_and_size_matches_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = Volume::new([4, 6, 8], [2.0, 2.0, 2.0]);
        for (i, v) in vol.voxels.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        let path = dir.path().join("t.v3d");
        write_v3d(&vol, &path).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            32 + 4 * 4 * 6 * 8
        );
        let back = read_v3d(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.spacing, vol.spacing);
        let same = back
            .voxels
            .iter()
            .zip(vol.voxels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.v3d");
        let vol = Volume::new([2, 2, 2], [1.0; 3]);
        write_v3d(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_v3d(&path),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_and_dim_overflow_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.v3d");
        let vol = Volume::new([2, 2, 2], [1.0; 3]);
        write_v3d(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(
            read_v3d(&path),
            Err(FormatError::Truncated { .. })
        ));

        let mut header = bytes[..32].to_vec();
        header[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        std::fs::write(&path, &header).unwrap();
        assert!(matches!(
            read_v3d(&path),
            Err(FormatError::DimOverflow { .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            dims: [16, 16, 16],
            n_per_class: 3,
            ..GenConfig::small16()
        };
        let samples = generate(&cfg).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.pathology, b.pathology);
            assert_eq!(a.outcome, b.outcome);
            assert_eq!(a.split, b.split);
            assert_eq!(a.image.voxels, b.image.voxels);
            assert_eq!(a.mask.voxels, b.mask.voxels);
        }
    }

    #[test]
    fn pgm_slices_have_correct_header_and_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = Volume::new([3, 4, 5], [1.0; 3]);
        vol.voxels[7] = 2.0;
        let files = write_pgm_slices(&vol, dir.path(), "heat").unwrap();
        assert_eq!(files.len(), 3);
        let bytes = std::fs::read(&files[0]).unwrap();
        assert!(bytes.starts_with(b"P5\n5 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 4\n255\n".len() + 20);
    }
}
