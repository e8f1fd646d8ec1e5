//! On-disk dataset format: a directory holding `header.json` (shape,
//! dtype, class count, example count) plus raw little-endian arrays
//! `images.bin` (f32) and `labels.bin` (u32).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    /// [channels, height, width]
    pub shape: [usize; 3],
    pub dtype: String,
    pub num_classes: usize,
    pub count: usize,
}

/// Write a dataset directory (creates it if needed).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        shape: dataset.image_shape(),
        dtype: "f32".into(),
        num_classes: dataset.num_classes(),
        count: dataset.len(),
    };
    std::fs::write(
        dir.join(HEADER_FILE),
        serde_json::to_string_pretty(&header)?,
    )?;

    let mut img = std::io::BufWriter::new(std::fs::File::create(dir.join(IMAGES_FILE))?);
    for i in 0..dataset.len() {
        for &v in dataset.image(i).iter() {
            img.write_all(&v.to_le_bytes())?;
        }
    }
    img.flush()?;

    let mut lab = std::io::BufWriter::new(std::fs::File::create(dir.join(LABELS_FILE))?);
    for &y in dataset.labels() {
        lab.write_all(&(y as u32).to_le_bytes())?;
    }
    lab.flush()?;
    Ok(())
}

/// Load a dataset directory, validating shapes, pixel range, and class ids.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join(HEADER_FILE);
    if !header_path.exists() {
        return Err(Error::MissingDependency(format!(
            "dataset header {}",
            header_path.display()
        )));
    }
    let header: DatasetHeader = serde_json::from_slice(&std::fs::read(&header_path)?)?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            path: header_path,
            detail: format!("unsupported dtype {}", header.dtype),
        });
    }
    let [c, h, w] = header.shape;
    let pixels = header.count * c * h * w;

    let img_path = dir.join(IMAGES_FILE);
    let mut bytes = Vec::new();
    std::fs::File::open(&img_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != pixels * 4 {
        return Err(Error::Format {
            path: img_path,
            detail: format!("expected {} bytes, found {}", pixels * 4, bytes.len()),
        });
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let images = Array4::from_shape_vec((header.count, c, h, w), flat)
        .map_err(|e| Error::invalid(format!("image reshape: {e}")))?;

    let lab_path = dir.join(LABELS_FILE);
    let mut lbytes = Vec::new();
    std::fs::File::open(&lab_path)?.read_to_end(&mut lbytes)?;
    if lbytes.len() != header.count * 4 {
        return Err(Error::Format {
            path: lab_path,
            detail: format!(
                "expected {} bytes, found {}",
                header.count * 4,
                lbytes.len()
            ),
        });
    }
    let labels: Vec<usize> = lbytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();

    Dataset::new(images, labels, header.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    #[test]
    fn roundtrip_preserves_everything() {
        let ds = SyntheticSpec::tiny(5).generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.num_classes(), ds.num_classes());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.image(7), ds.image(7));
    }

    #[test]
    fn missing_header_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::MissingDependency(_))
        ));
    }

    #[test]
    fn truncated_images_detected() {
        let ds = SyntheticSpec::tiny(5).generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let img = dir.path().join(IMAGES_FILE);
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_class_detected() {
        let ds = SyntheticSpec::tiny(5).generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // corrupt one label beyond num_classes
        let lab = dir.path().join(LABELS_FILE);
        let mut bytes = std::fs::read(&lab).unwrap();
        bytes[..4].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&lab, &bytes).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
