use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::ImageDataset;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads the whole file, transparently inflating gzip input (detected by
/// the `1f 8b` prefix rather than the extension).
fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| load_err(path, 0, format!("cannot open: {e}")))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| load_err(path, 0, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn load_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| load_err(path, offset as u64, "truncated header"))
}

/// Loads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let img = read_all(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(load_err(
            images_path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(load_err(
            images_path,
            img.len() as u64,
            format!("truncated pixel data: {n} images of {rows}x{cols} need {need} bytes"),
        ));
    }

    let lab = read_all(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(load_err(
            labels_path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        ));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(load_err(
            labels_path,
            4,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    if lab.len() < 8 + n {
        return Err(load_err(labels_path, lab.len() as u64, "truncated label data"));
    }
    let images = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = lab[8..8 + n].to_vec();
    ImageDataset::new(rows, cols, images, labels)
}

fn create(path: &Path, gzip: bool) -> Result<Box<dyn Write>> {
    let f = File::create(path)?;
    Ok(if gzip {
        Box::new(GzEncoder::new(f, Compression::default()))
    } else {
        Box::new(std::io::BufWriter::new(f))
    })
}

/// Writes the images back as IDX bytes (`round(255 * v)`).
pub fn write_idx_images(path: &Path, ds: &ImageDataset, gzip: bool) -> Result<()> {
    let mut w = create(path, gzip)?;
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    for d in [ds.len(), ds.rows, ds.cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.images.iter().map(|v| (v * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, ds: &ImageDataset, gzip: bool) -> Result<()> {
    let mut w = create(path, gzip)?;
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(ds.len() as u32).to_be_bytes())?;
    w.write_all(&ds.labels)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageDataset {
        let images = (0..3 * 4).map(|i| (i * 20 % 256) as f64 / 255.0).collect();
        ImageDataset::new(2, 2, images, vec![1, 7, 0]).unwrap()
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        for gz in [false, true] {
            let ip = dir.path().join(format!("img{gz}"));
            let lp = dir.path().join(format!("lab{gz}"));
            write_idx_images(&ip, &ds, gz).unwrap();
            write_idx_labels(&lp, &ds, gz).unwrap();
            let back = load_idx(&ip, &lp).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn wrong_label_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &ds, false).unwrap();
        // an image file where labels are expected
        let err = load_idx(&ip, &ip).unwrap_err();
        assert!(err.to_string().contains("0x00000803"), "{err}");
        write_idx_labels(&lp, &ds, false).unwrap();
        let mut bytes = std::fs::read(&lp).unwrap();
        bytes[3] = 0x02;
        std::fs::write(&lp, &bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Load { offset: 0, .. }));
        assert!(err.to_string().contains("0x00000802"));
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, &ds, false).unwrap();
        write_idx_labels(&lp, &ds.truncated(2), false).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("2 labels for 3 images"));

        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        write_idx_labels(&lp, &ds, false).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
