//! Dataset export as PPM/PGM pairs plus a CSV manifest.

use crate::error::Result;
use crate::image::{Image, LabelMap};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub image: String,
    pub label: String,
    pub step: usize,
    pub tag: String,
}

/// Writes every `(image, labels, step, tag)` into `dir` and returns the
/// manifest records written alongside.
pub fn export_samples<'a, I>(dir: &Path, samples: I) -> Result<Vec<ManifestRecord>>
where
    I: IntoIterator<Item = (&'a Image, &'a LabelMap, usize, &'a str)>,
{
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (index, (image, labels, step, tag)) in samples.into_iter().enumerate() {
        let rec = ManifestRecord {
            index,
            image: format!("{index:05}.ppm"),
            label: format!("{index:05}.pgm"),
            step,
            tag: tag.to_string(),
        };
        image.write_ppm(BufWriter::new(File::create(dir.join(&rec.image))?))?;
        labels.write_pgm(BufWriter::new(File::create(dir.join(&rec.label))?))?;
        records.push(rec);
    }
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(records)
}

pub fn import_samples(dir: &Path) -> Result<Vec<(ManifestRecord, Image, LabelMap)>> {
    let mut rdr = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: ManifestRecord = rec?;
        let image = Image::read_ppm(BufReader::new(File::open(dir.join(&rec.image))?))?;
        let labels = LabelMap::read_pgm(BufReader::new(File::open(dir.join(&rec.label))?))?;
        out.push((rec, image, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapeworld::{generate_task_dataset, Mode, ProtocolSpec, World, WorldConfig};

    #[test]
    fn export_then_import_recovers_labels_and_metadata() {
        let world = World::new(WorldConfig::default()).unwrap();
        let p = ProtocolSpec::from_sizes("4-2-2", Mode::Disjoint, vec![3, 3, 3]).unwrap();
        let ds = generate_task_dataset(&world, &p, 1, 3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = export_samples(
            dir.path(),
            ds.samples.iter().map(|s| (&s.image, &s.label, ds.step, "train")),
        )
        .unwrap();
        let back = import_samples(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((rec, image, labels), (orig, sample)) in back.iter().zip(written.iter().zip(&ds.samples)) {
            assert_eq!(rec, orig);
            assert_eq!(labels, &sample.label);
            assert_eq!(image.height(), 64);
            assert_eq!(rec.step, 1);
        }
    }
}
