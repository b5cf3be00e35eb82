//! Portable on-disk case format: a JSON header plus raw little-endian
//! binary payloads (`image.raw` as float32, `label.raw` as uint8), both in
//! row-major (depth, height, width) order.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const HEADER_FILE: &str = "header.json";
pub const IMAGE_FILE: &str = "image.raw";
pub const LABEL_FILE: &str = "label.raw";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub image_dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_dtype: Option<String>,
    pub byte_order: String,
    pub layout: String,
}

impl CaseHeader {
    fn for_volume(volume: &Volume, with_label: bool) -> Self {
        CaseHeader {
            shape: volume.shape(),
            spacing_mm: volume.spacing_mm,
            image_dtype: "float32".into(),
            label_dtype: with_label.then(|| "uint8".into()),
            byte_order: "little-endian".into(),
            layout: "row-major DHW".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&e| e == 0) {
            return Err(Error::MalformedHeader(format!(
                "shape extents must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::MalformedHeader(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.image_dtype != "float32" {
            return Err(Error::UnsupportedDtype(format!(
                "image_dtype {:?} (expected \"float32\")",
                self.image_dtype
            )));
        }
        if let Some(ld) = &self.label_dtype {
            if ld != "uint8" {
                return Err(Error::UnsupportedDtype(format!(
                    "label_dtype {:?} (expected \"uint8\")",
                    ld
                )));
            }
        }
        if self.byte_order != "little-endian" {
            return Err(Error::UnsupportedDtype(format!(
                "byte_order {:?} (expected \"little-endian\")",
                self.byte_order
            )));
        }
        if self.layout != "row-major DHW" {
            return Err(Error::UnsupportedDtype(format!(
                "layout {:?} (expected \"row-major DHW\")",
                self.layout
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
}

fn read_header(dir: &Path) -> Result<CaseHeader> {
    let raw = fs::read_to_string(dir.join(HEADER_FILE))?;
    let header: CaseHeader =
        serde_json::from_str(&raw).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    header.validate()?;
    Ok(header)
}

fn write_f32_payload(path: &Path, data: &Array3<f32>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let slice = data.as_slice().expect("standard layout");
    let mut bytes = Vec::with_capacity(slice.len() * 4);
    for &v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch(format!(
            "{}: got {} bytes, header shape implies {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes a (volume, label) pair into `dir` (created if missing).
pub fn write_case(dir: &Path, volume: &Volume, label: &LabelVolume) -> Result<()> {
    label.matches(volume)?;
    fs::create_dir_all(dir)?;
    let header = CaseHeader::for_volume(volume, true);
    fs::write(
        dir.join(HEADER_FILE),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_f32_payload(&dir.join(IMAGE_FILE), &volume.data)?;
    fs::write(
        dir.join(LABEL_FILE),
        label.data.as_slice().expect("standard layout"),
    )?;
    Ok(())
}

/// Reads a (volume, label) pair; the round trip through [`write_case`] is
/// bit-exact. The case id is the directory name.
pub fn read_case(dir: &Path) -> Result<(Volume, LabelVolume)> {
    let header = read_header(dir)?;
    if header.label_dtype.is_none() {
        return Err(Error::MalformedHeader(format!(
            "{}: header has no label_dtype; not a segmentation case",
            dir.display()
        )));
    }
    let n = header.voxel_count();
    let [d, h, w] = header.shape;

    let image = read_f32_payload(&dir.join(IMAGE_FILE), n)?;
    let label_bytes = fs::read(dir.join(LABEL_FILE))?;
    if label_bytes.len() != n {
        return Err(Error::PayloadSizeMismatch(format!(
            "{}: got {} bytes, header shape implies {}",
            dir.join(LABEL_FILE).display(),
            label_bytes.len(),
            n
        )));
    }

    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let volume = Volume::new(
        Array3::from_shape_vec((d, h, w), image).expect("len checked"),
        header.spacing_mm,
        id,
    )?;
    let label = LabelVolume::new(
        Array3::from_shape_vec((d, h, w), label_bytes).expect("len checked"),
        header.spacing_mm,
    )?;
    Ok((volume, label))
}

/// Writes an image-only volume artifact (no label payload); used for
/// attention-map exports.
pub fn write_volume(dir: &Path, volume: &Volume) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = CaseHeader::for_volume(volume, false);
    fs::write(
        dir.join(HEADER_FILE),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_f32_payload(&dir.join(IMAGE_FILE), &volume.data)
}

/// Reads the image payload of a case or volume artifact.
pub fn read_volume(dir: &Path) -> Result<Volume> {
    let header = read_header(dir)?;
    let [d, h, w] = header.shape;
    let image = read_f32_payload(&dir.join(IMAGE_FILE), header.voxel_count())?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    Volume::new(
        Array3::from_shape_vec((d, h, w), image).expect("len checked"),
        header.spacing_mm,
        id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_case, SyntheticSpec};

    #[test]
    fn round_trip_bit_exact() {
        let spec = SyntheticSpec {
            seed: 5,
            shape: [8, 32, 32],
            ellipsoid_radii_mm: [[2.0, 3.0], [2.0, 4.0], [2.0, 4.0]],
            ..Default::default()
        };
        let (v, l) = generate_case(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("case_x");
        write_case(&case_dir, &v, &l).unwrap();
        let (v2, l2) = read_case(&case_dir).unwrap();
        assert_eq!(v.data, v2.data);
        assert_eq!(l.data, l2.data);
        assert_eq!(v.spacing_mm, v2.spacing_mm);
        assert_eq!(v2.id, "case_x");
    }

    #[test]
    fn payload_size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("bad");
        std::fs::create_dir_all(&case).unwrap();
        let header = r#"{"shape":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"image_dtype":"float32","label_dtype":"uint8","byte_order":"little-endian","layout":"row-major DHW"}"#;
        std::fs::write(case.join(HEADER_FILE), header).unwrap();
        std::fs::write(case.join(IMAGE_FILE), vec![0u8; 7]).unwrap();
        std::fs::write(case.join(LABEL_FILE), vec![0u8; 8]).unwrap();
        assert!(matches!(
            read_case(&case),
            Err(Error::PayloadSizeMismatch(_))
        ));
    }

    #[test]
    fn hand_written_minimal_case() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("tiny");
        std::fs::create_dir_all(&case).unwrap();
        let header = r#"{"shape":[1,1,1],"spacing_mm":[1.5,0.4,0.4],"image_dtype":"float32","label_dtype":"uint8","byte_order":"little-endian","layout":"row-major DHW"}"#;
        std::fs::write(case.join(HEADER_FILE), header).unwrap();
        std::fs::write(case.join(IMAGE_FILE), 3.5f32.to_le_bytes()).unwrap();
        std::fs::write(case.join(LABEL_FILE), [1u8]).unwrap();
        let (v, l) = read_case(&case).unwrap();
        assert_eq!(v.data[[0, 0, 0]], 3.5);
        assert_eq!(l.data[[0, 0, 0]], 1);
        assert_eq!(v.spacing_mm, [1.5, 0.4, 0.4]);
    }

    #[test]
    fn malformed_header_and_bad_dtype_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("m");
        std::fs::create_dir_all(&case).unwrap();
        std::fs::write(case.join(HEADER_FILE), "{not json").unwrap();
        assert!(matches!(read_case(&case), Err(Error::MalformedHeader(_))));

        let header = r#"{"shape":[1,1,1],"spacing_mm":[1.0,1.0,1.0],"image_dtype":"float64","label_dtype":"uint8","byte_order":"little-endian","layout":"row-major DHW"}"#;
        std::fs::write(case.join(HEADER_FILE), header).unwrap();
        assert!(matches!(read_case(&case), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn unknown_header_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("u");
        std::fs::create_dir_all(&case).unwrap();
        let header = r#"{"shape":[1,1,1],"spacing_mm":[1.0,1.0,1.0],"image_dtype":"float32","label_dtype":"uint8","byte_order":"little-endian","layout":"row-major DHW","extra":1}"#;
        std::fs::write(case.join(HEADER_FILE), header).unwrap();
        assert!(matches!(read_case(&case), Err(Error::MalformedHeader(_))));
    }
}
