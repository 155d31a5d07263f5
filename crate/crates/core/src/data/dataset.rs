use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::pnm::{read_pnm, write_pnm};
use super::scene::{gen_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,seed,object_count";

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// `1×H×W` in `{0, 1}`.
    pub mask: Tensor,
}

pub fn image_name(id: &str) -> String {
    format!("img_{id}.ppm")
}

pub fn mask_name(id: &str) -> String {
    format!("msk_{id}.pgm")
}

/// Per-scene seed of scene `i` in a set generated from `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Generate `n` scenes; a pure function of `(n, seed, spec)`.
pub fn synth_samples(n: usize, seed: u64, spec: &SceneSpec) -> Result<Vec<(Sample, u64, usize)>> {
    (0..n)
        .map(|i| {
            let s = scene_seed(seed, i);
            let scene = gen_scene(s, spec)?;
            let count = scene.descriptor.objects.len();
            Ok((
                Sample {
                    id: format!("{i:04}"),
                    image: scene.image,
                    mask: scene.mask,
                },
                s,
                count,
            ))
        })
        .collect()
}

/// Write `n` scenes plus `manifest.csv` into `dir`.
pub fn write_synth_dir(dir: &Path, n: usize, seed: u64, spec: &SceneSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (sample, s, count) in synth_samples(n, seed, spec)? {
        write_pnm(&dir.join(image_name(&sample.id)), &sample.image)?;
        write_pnm(&dir.join(mask_name(&sample.id)), &sample.mask)?;
        let _ = writeln!(manifest, "{},{s},{count}", sample.id);
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Load every `img_<id>.ppm` / `msk_<id>.pgm` pair in `dir`, ordered by id.
/// Masks are binarized at one half.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("img_").and_then(|r| r.strip_suffix(".ppm")) {
            images.insert(id.to_string(), entry.path());
        } else if let Some(id) = name.strip_prefix("msk_").and_then(|r| r.strip_suffix(".pgm")) {
            masks.insert(id.to_string(), entry.path());
        }
    }
    let unmatched: Vec<String> = images
        .keys()
        .filter(|id| !masks.contains_key(*id))
        .map(|id| image_name(id))
        .chain(masks.keys().filter(|id| !images.contains_key(*id)).map(|id| mask_name(id)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!(
            "{}: unmatched files: {}",
            dir.display(),
            unmatched.join(", ")
        )));
    }
    images
        .into_iter()
        .map(|(id, img_path)| {
            let image = read_pnm(&img_path)?;
            let raw = read_pnm(&masks[&id])?;
            if image.shape()[0] != 3 || raw.shape()[0] != 1 || image.shape()[1..] != raw.shape()[1..] {
                return Err(Error::Data(format!(
                    "sample {id}: image {:?} and mask {:?} do not pair up",
                    image.shape(),
                    raw.shape()
                )));
            }
            let bits = raw.data().iter().map(|&v| f64::from(u8::from(v >= 0.5))).collect();
            let mask = Tensor::new(raw.shape(), bits)?;
            Ok(Sample { id, image, mask })
        })
        .collect()
}
