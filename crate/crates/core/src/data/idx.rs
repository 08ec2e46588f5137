//! IDX binary format (the MNIST family container): big-endian magic and dims,
//! u8 pixels. Magic 0x00000803 for image files, 0x00000801 for label files.

use super::{DataError, Dataset, Result};
use crate::numkit::Tensor;
use std::fs;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.clone(),
                needed: self.pos + n,
                had: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load an image/label file pair. Pixels are scaled to [0, 1]; the label file
/// defines the class count as `max label + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|source| DataError::Io {
        path: images_path.display().to_string(),
        source,
    })?;
    let lbl_bytes = fs::read(labels_path).map_err(|source| DataError::Io {
        path: labels_path.display().to_string(),
        source,
    })?;

    let mut ir = Reader {
        bytes: &img_bytes,
        pos: 0,
        path: images_path.display().to_string(),
    };
    let magic = ir.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: ir.path,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = ir.u32_be()? as usize;
    let rows = ir.u32_be()? as usize;
    let cols = ir.u32_be()? as usize;
    let pixels = ir.take(n * rows * cols)?;

    let mut lr = Reader {
        bytes: &lbl_bytes,
        pos: 0,
        path: labels_path.display().to_string(),
    };
    let magic = lr.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: lr.path,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n_labels = lr.u32_be()? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    let raw_labels = lr.take(n)?;

    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * rows * cols;
        let data: Vec<f64> = pixels[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(
            Tensor::new(vec![rows, cols, 1], data)
                .map_err(|e| DataError::Invalid(e.to_string()))?,
        );
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(images, labels, classes)
}

/// Write a dataset as an IDX pair. Pixels are quantized to the u8 grid, so
/// reading the pair back is the identity for datasets whose pixels already
/// sit on multiples of 1/255 (which `synth_shapes` guarantees).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols, channels) = ds
        .image_dims()
        .ok_or_else(|| DataError::Invalid("cannot write an empty dataset".into()))?;
    if channels != 1 {
        return Err(DataError::Invalid(format!(
            "idx format stores single-channel images, got {channels} channels"
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in &ds.images {
        if image.shape() != [rows, cols, 1] {
            return Err(DataError::Invalid("ragged image shapes".into()));
        }
        for &v in image.data() {
            img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }

    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        lbl.push(l as u8);
    }

    fs::write(images_path, img).map_err(|source| DataError::Io {
        path: images_path.display().to_string(),
        source,
    })?;
    fs::write(labels_path, lbl).map_err(|source| DataError::Io {
        path: labels_path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, img: &[u8], lbl: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lbl.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_hand_built_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        // two 2x2 images
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 255, 10, 20, 30, 40]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 0]);
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);

        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 0]);
        let want: Vec<f64> = [0u8, 51, 102, 255].iter().map(|&b| b as f64 / 255.0).collect();
        assert_eq!(ds.images[0].data(), want.as_slice());
    }

    #[test]
    fn count_mismatch_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.push(7);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[0, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[0, 0, 8, 4, 0, 0, 0, 0], &[]);
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::BadMagic { .. })));

        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&5u32.to_be_bytes());
        let (ip, lp) = write_pair(dir.path(), &img, &[]);
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn write_then_read_is_identity_for_synthetic_data() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth_shapes(12, 3, 8, 8, 99).unwrap();
        let ip = dir.path().join("s.img.idx");
        let lp = dir.path().join("s.lbl.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.data(), b.data());
        }
    }
}
