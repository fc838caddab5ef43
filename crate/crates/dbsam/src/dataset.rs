//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.csv     id,image_path,mask_path,x0,y0,x1,y1
//! <dir>/images/<id>.dbsm tensor "image" [3,H,W]
//! <dir>/masks/<id>.dbsm  tensor "mask"  [H,W], values 0 or 1
//! ```
//!
//! Paths in the manifest are relative to the directory. Volumes for axial
//! slicing are single DBSM files holding `volume` and `mask`, both `[Dz,H,W]`.

use std::fs;
use std::path::Path;

use dbsam_core::data::SegmentationSample;
use dbsam_core::metrics::Mask;
use dbsam_core::prompt::BoxPrompt;
use dbsam_core::{ParamRole, Tensor};
use serde::{Deserialize, Serialize};

use crate::dbsm::{self, Record};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("sample id {id:?} is not a safe file name")))
    }
}

/// Writes `samples` as a dataset directory, creating it if needed.
pub fn write(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::at(&p, e))?;
    }
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::at(&manifest, e))?;
    if samples.is_empty() {
        // serde writes the header only alongside the first row
        w.write_record(["id", "image_path", "mask_path", "x0", "y0", "x1", "y1"])?;
    }
    for s in samples {
        s.validate()?;
        check_id(&s.id)?;
        let row = ManifestRow {
            id: s.id.clone(),
            image_path: format!("images/{}.dbsm", s.id),
            mask_path: format!("masks/{}.dbsm", s.id),
            x0: s.bbox.x0,
            y0: s.bbox.y0,
            x1: s.bbox.x1,
            y1: s.bbox.y1,
        };
        dbsm::save(&dir.join(&row.image_path), &[Record::new("image", ParamRole::Frozen, s.image.clone())])?;
        dbsm::save(&dir.join(&row.mask_path), &[Record::new("mask", ParamRole::Frozen, mask_tensor(&s.mask))])?;
        w.serialize(&row).map_err(|e| Error::at(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::at(&manifest, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| Error::at(&manifest, e))?;
    let header = r.headers().map_err(|e| Error::at(&manifest, e))?;
    if header != vec!["id", "image_path", "mask_path", "x0", "y0", "x1", "y1"] {
        return Err(Error::at(&manifest, Error::Format(format!("unexpected header {header:?}"))));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::at(&manifest, e))).collect()
}

fn single(path: &Path, name: &str) -> Result<Tensor> {
    let recs = dbsm::load(path)?;
    Ok(dbsm::find(&recs, name).map_err(|e| e.in_file(path))?.tensor.clone())
}

fn mask_tensor(m: &Mask) -> Tensor {
    Tensor::new(&[m.height, m.width], m.data.iter().map(|&v| v as u8 as f64).collect()).expect("extents match the data")
}

fn mask_from(t: &Tensor) -> Result<Mask> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Format(format!("mask must be [H,W], got {s:?}")));
    }
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format("mask values must be 0 or 1".into()));
    }
    Ok(Mask::new(s[0], s[1], t.data().iter().map(|&v| v == 1.0).collect())?)
}

/// Loads and validates every sample listed in the manifest, in manifest order.
pub fn read(dir: &Path) -> Result<Vec<SegmentationSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let mask_path = dir.join(&row.mask_path);
            let sample = SegmentationSample {
                image: single(&dir.join(&row.image_path), "image")?,
                mask: mask_from(&single(&mask_path, "mask")?).map_err(|e| e.in_file(&mask_path))?,
                bbox: BoxPrompt::new(row.x0, row.y0, row.x1, row.y1),
                id: row.id,
            };
            sample.validate().map_err(|e| Error::at(&dir.join(MANIFEST), e))?;
            Ok(sample)
        })
        .collect()
}

/// Reads a volume file, returning `(volume, mask)`.
pub fn read_volume(path: &Path) -> Result<(Tensor, Tensor)> {
    let recs = dbsm::load(path)?;
    let get = |n| dbsm::find(&recs, n).map(|r| r.tensor.clone()).map_err(|e| e.in_file(path));
    Ok((get("volume")?, get("mask")?))
}

pub fn write_volume(path: &Path, volume: &Tensor, mask: &Tensor) -> Result<()> {
    dbsm::save(
        path,
        &[
            Record::new("volume", ParamRole::Frozen, volume.clone()),
            Record::new("mask", ParamRole::Frozen, mask.clone()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use dbsam_core::data::synth_dataset;

    fn rounded(mut s: SegmentationSample) -> SegmentationSample {
        s.image.round_to_f32();
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(5, 24, 3);
        write(dir.path(), &samples).unwrap();
        let back = read(dir.path()).unwrap();
        assert_eq!(back, samples.into_iter().map(rounded).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_is_a_valid_directory() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &[]).unwrap();
        assert!(read(dir.path()).unwrap().is_empty());
        assert!(dir.path().join("images").is_dir());
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text, "id,image_path,mask_path,x0,y0,x1,y1\n");
    }

    #[test]
    fn invalid_box_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &synth_dataset(1, 16, 4)).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cols: Vec<&str> = lines[1].split(',').collect();
        cols[5] = "99";
        lines[1] = cols.join(",");
        fs::write(&p, lines.join("\n")).unwrap();
        assert!(matches!(read(dir.path()).unwrap_err().root(), Error::Core(_)));
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        assert!(mask_from(&Tensor::new(&[1, 2], vec![0.0, 0.5]).unwrap()).is_err());
        assert!(mask_from(&Tensor::zeros(&[2, 2, 1])).is_err());
    }

    #[test]
    fn unsafe_ids_are_rejected() {
        for id in ["", "../x", "a/b", ".hidden"] {
            assert!(check_id(id).is_err(), "{id}");
        }
        check_id("s00001_z0003").unwrap();
    }
}
