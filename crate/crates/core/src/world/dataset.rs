//! Dataset export/import: one tensor container per image plus a JSONL
//! manifest carrying labels and provenance.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::render::{LabeledImage, PartPlacement};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: usize,
    file: String,
    label: usize,
    pose: usize,
    #[serde(default)]
    flawed_part: Option<usize>,
    provenance: Vec<PartPlacement>,
}

pub fn save_dataset(images: &[LabeledImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    for img in images {
        let file = format!("images/{:06}.bin", img.id);
        img.pixels.to_tensor().save(&dir.join(&file))?;
        let line = ManifestLine {
            id: img.id,
            file,
            label: img.label,
            pose: img.pose,
            flawed_part: img.flawed_part,
            provenance: img.provenance.clone(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let f = fs::File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::schema(format!("{MANIFEST}:{}", n + 1), e.to_string()))?;
        let pixels = load_image(&dir.join(&m.file))?;
        out.push(LabeledImage {
            id: m.id,
            pixels,
            label: m.label,
            pose: m.pose,
            provenance: m.provenance,
            flawed_part: m.flawed_part,
        });
    }
    Ok(out)
}

/// Reads a single `C×H×W` image tensor file.
pub fn load_image(path: &Path) -> Result<Image> {
    Image::from_tensor(&Tensor::load(path)?)
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    image.to_tensor().save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, WorldSpec};

    #[test]
    fn round_trip() {
        let d = generate_dataset(&WorldSpec::three_class().with_flaw_prob(0.5), 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }
}
