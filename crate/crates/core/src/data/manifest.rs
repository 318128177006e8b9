//! Manifest loading for on-disk image datasets: delimited text with a
//! header naming the image-id and diagnosis columns, image files resolved
//! against a directory by probing standard raster extensions.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::CLASS_NAMES;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    /// Records in file order.
    pub records: Vec<ManifestRecord>,
    /// Samples per vocabulary class.
    pub class_counts: Vec<u64>,
}

const ID_COLUMNS: [&str; 3] = ["image_id", "image-id", "image"];
const LABEL_COLUMNS: [&str; 2] = ["dx", "diagnosis"];
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn find_column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Reads the metadata file and resolves each image against `images_dir`.
/// Labels are matched case-insensitively against the fixed vocabulary.
/// Unknown labels and duplicate ids report their row; missing files are
/// collected and reported together.
pub fn load_manifest(metadata: &Path, images_dir: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(metadata)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", metadata.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read manifest header: {e}")))?
        .clone();
    let id_col = find_column(&headers, &ID_COLUMNS).ok_or_else(|| {
        Error::Data(format!("manifest header has no image-id column (expected one of {:?})", ID_COLUMNS))
    })?;
    let label_col = find_column(&headers, &LABEL_COLUMNS).ok_or_else(|| {
        Error::Data(format!("manifest header has no diagnosis column (expected one of {:?})", LABEL_COLUMNS))
    })?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut class_counts = vec![0u64; CLASS_NAMES.len()];
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::Data(format!("manifest row {line}: {e}")))?;
        let id = row
            .get(id_col)
            .ok_or_else(|| Error::Data(format!("manifest row {line}: missing image id")))?
            .to_string();
        let label_str = row
            .get(label_col)
            .ok_or_else(|| Error::Data(format!("manifest row {line}: missing diagnosis")))?;
        let label = CLASS_NAMES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(label_str))
            .ok_or_else(|| {
                Error::Data(format!(
                    "manifest row {line}: unknown label '{label_str}' for image '{id}' (vocabulary: {})",
                    CLASS_NAMES.join(", ")
                ))
            })?;
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("manifest row {line}: duplicate image id '{id}'")));
        }
        class_counts[label] += 1;
        records.push(ManifestRecord { id, path: PathBuf::new(), label });
    }

    let mut missing = Vec::new();
    for rec in &mut records {
        let found = EXTENSIONS.iter().map(|ext| images_dir.join(format!("{}.{ext}", rec.id))).find(|p| p.is_file());
        match found {
            Some(p) => rec.path = p,
            None => missing.push(rec.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} image file(s) missing under {}: {}",
            missing.len(),
            images_dir.display(),
            missing.join(", ")
        )));
    }
    Ok(Manifest { records, class_counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_files(dir: &Path, metadata: &str, images: &[&str]) -> PathBuf {
        let meta = dir.join("metadata.csv");
        fs::write(&meta, metadata).unwrap();
        for name in images {
            fs::write(dir.join(name), b"stub").unwrap();
        }
        meta
    }

    #[test]
    fn well_formed_manifest_loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(
            dir.path(),
            "lesion_id,image_id,dx\nx1,img_b,NV\nx2,img_a,MEL\nx3,img_c,nv\n",
            &["img_a.png", "img_b.jpg", "img_c.jpeg"],
        );
        let m = load_manifest(&meta, dir.path()).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[0].id, "img_b");
        assert_eq!(m.records[1].id, "img_a");
        let nv = CLASS_NAMES.iter().position(|c| *c == "NV").unwrap();
        let mel = CLASS_NAMES.iter().position(|c| *c == "MEL").unwrap();
        assert_eq!(m.records[0].label, nv);
        assert_eq!(m.records[1].label, mel);
        assert_eq!(m.records[2].label, nv);
        assert_eq!(m.class_counts[nv], 2);
        assert!(m.records[0].path.ends_with("img_b.jpg"));
    }

    #[test]
    fn alternative_column_names_work() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(dir.path(), "image,diagnosis\npic,BKL\n", &["pic.png"]);
        let m = load_manifest(&meta, dir.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(CLASS_NAMES[m.records[0].label], "BKL");
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(dir.path(), "image_id,dx\nimg_a,NV\nimg_b,xyz\n", &["img_a.png", "img_b.png"]);
        let err = load_manifest(&meta, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("xyz"), "{msg}");
    }

    #[test]
    fn missing_files_are_listed_together() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(dir.path(), "image_id,dx\nimg_a,NV\nimg_b,MEL\nimg_c,DF\n", &["img_b.png"]);
        let err = load_manifest(&meta, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img_a") && msg.contains("img_c"), "{msg}");
        assert!(!msg.contains("img_b,"), "{msg}");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(dir.path(), "image_id,dx\nimg_a,NV\nimg_a,NV\n", &["img_a.png"]);
        let err = load_manifest(&meta, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_required_columns_fail() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_files(dir.path(), "id,class\nimg_a,NV\n", &["img_a.png"]);
        assert!(load_manifest(&meta, dir.path()).is_err());
    }
}
