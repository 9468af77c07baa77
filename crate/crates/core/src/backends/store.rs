//! Content-addressed image storage.
//!
//! Every image lives at `<root>/<prompt_hash>.img` with a JSON sidecar
//! (`<prompt_hash>.img.meta.json`) recording what was depicted and how it
//! was produced. Stub images are PNG bytes: each depicted concept is a
//! coloured disc on a dark background, so the picture agrees with the patch
//! features the stub visual encoder derives from the same layout.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backends::ImageRef;
use crate::error::{Error, Result};
use crate::text::{digest_hex, digest_parts, unit_from_hash};

const SIDECAR_SUFFIX: &str = ".meta.json";
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub prompt_hash: String,
    pub prompt: String,
    pub concepts: Vec<String>,
    pub resolution: u32,
    pub steps: u32,
    pub seed: u64,
    pub generator: String,
}

impl SceneMeta {
    pub fn new(
        prompt: &str,
        concepts: Vec<String>,
        generator: &str,
        resolution: u32,
        steps: u32,
        seed: u64,
    ) -> Self {
        Self {
            id: image_id(generator, prompt, resolution, steps, seed),
            prompt_hash: prompt_hash(prompt),
            prompt: prompt.to_string(),
            concepts,
            resolution,
            steps,
            seed,
            generator: generator.to_string(),
        }
    }

    pub fn sidecar_path(image_path: &Path) -> PathBuf {
        let mut s = image_path.as_os_str().to_owned();
        s.push(SIDECAR_SUFFIX);
        PathBuf::from(s)
    }

    pub fn read_sidecar(image_path: &Path) -> Result<Option<SceneMeta>> {
        let p = Self::sidecar_path(image_path);
        if !p.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::storage(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Disc layout in unit image coordinates, one disc per concept.
    pub fn blobs(&self) -> Vec<Blob> {
        (0..self.concepts.len())
            .map(|k| {
                let h = digest_parts(&[b"blob", self.id.as_bytes(), &(k as u64).to_le_bytes()]);
                let cx = 0.15 + 0.7 * unit_from_hash(&h);
                let h2 = digest_parts(&[b"blob-y", &h]);
                let cy = 0.15 + 0.7 * unit_from_hash(&h2);
                Blob { cx, cy, radius: 0.24 }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Index of the concept covering the unit-square point `(x, y)`, if any.
/// Overlaps go to the disc whose centre is relatively closest.
pub fn concept_at(blobs: &[Blob], x: f64, y: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, b) in blobs.iter().enumerate() {
        let d = ((x - b.cx).powi(2) + (y - b.cy).powi(2)).sqrt() / b.radius;
        if d < 1.0 && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

pub fn prompt_hash(prompt: &str) -> String {
    digest_hex(prompt.as_bytes())
}

pub fn image_id(generator: &str, prompt: &str, resolution: u32, steps: u32, seed: u64) -> String {
    let h = digest_parts(&[
        generator.as_bytes(),
        prompt.as_bytes(),
        &resolution.to_le_bytes(),
        &steps.to_le_bytes(),
        &seed.to_le_bytes(),
    ]);
    hex::encode(&h[..8])
}

fn concept_color(token: &str) -> [u8; 3] {
    let h = digest_parts(&[b"color", token.as_bytes()]);
    [64 + h[0] % 192, 64 + h[1] % 192, 64 + h[2] % 192]
}

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::storage(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, prompt_hash: &str) -> PathBuf {
        self.root.join(format!("{prompt_hash}.img"))
    }

    /// Cached image for this prompt, if one was produced with the same
    /// generator settings.
    pub fn lookup(
        &self,
        prompt: &str,
        generator: &str,
        resolution: u32,
        steps: u32,
        seed: u64,
    ) -> Result<Option<ImageRef>> {
        let path = self.image_path(&prompt_hash(prompt));
        if !path.is_file() {
            return Ok(None);
        }
        match SceneMeta::read_sidecar(&path)? {
            Some(meta)
                if meta.id == image_id(generator, prompt, resolution, steps, seed)
                    && meta.prompt == prompt =>
            {
                Ok(Some(self.image_ref(&meta, path)))
            }
            _ => Ok(None),
        }
    }

    fn image_ref(&self, meta: &SceneMeta, path: PathBuf) -> ImageRef {
        ImageRef {
            id: meta.id.clone(),
            path,
            resolution: meta.resolution,
            generator: meta.generator.clone(),
            prompt_hash: meta.prompt_hash.clone(),
        }
    }

    /// Renders and stores a scene. Writes go through a temporary file and a
    /// rename, so concurrent writers of the same prompt never expose a
    /// partial file.
    pub fn write_scene(&self, meta: &SceneMeta) -> Result<ImageRef> {
        if meta.resolution == 0 {
            return Err(Error::invalid("resolution must be > 0"));
        }
        let path = self.image_path(&meta.prompt_hash);
        let png = render_scene(meta);
        let mut bytes = Vec::new();
        png.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::storage(&path, e))?;
        write_atomic(&path, &bytes)?;
        let sidecar = SceneMeta::sidecar_path(&path);
        let json = serde_json::to_vec_pretty(meta)?;
        write_atomic(&sidecar, &json)?;
        Ok(self.image_ref(meta, path))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(
        ".{}.{}.{n}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::storage(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))?;
    Ok(())
}

fn render_scene(meta: &SceneMeta) -> RgbImage {
    let res = meta.resolution;
    let blobs = meta.blobs();
    let colors: Vec<[u8; 3]> = meta.concepts.iter().map(|c| concept_color(c)).collect();
    let bg = {
        let h = digest_parts(&[b"bg", meta.id.as_bytes()]);
        [16 + h[0] % 32, 16 + h[1] % 32, 24 + h[2] % 32]
    };
    let inv = 1.0 / res as f64;
    RgbImage::from_fn(res, res, |x, y| {
        let (u, v) = ((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
        match concept_at(&blobs, u, v) {
            Some(k) => Rgb(colors[k]),
            None => Rgb(bg),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_lookup_hits_only_matching_settings() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let meta = SceneMeta::new("a dog on a beach", vec!["dog".into(), "beach".into()], "stub", 32, 50, 1);
        let r = store.write_scene(&meta).unwrap();
        assert!(r.path.is_file());
        assert_eq!(r.prompt_hash, prompt_hash("a dog on a beach"));
        assert_eq!(
            store.lookup("a dog on a beach", "stub", 32, 50, 1).unwrap(),
            Some(r.clone())
        );
        assert_eq!(store.lookup("a dog on a beach", "stub", 64, 50, 1).unwrap(), None);
        assert_eq!(store.lookup("a cat", "stub", 32, 50, 1).unwrap(), None);
        let restored = ImageRef::from_path(&r.path).unwrap();
        assert_eq!(restored, r);
    }

    #[test]
    fn rendered_scene_is_a_png_of_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let meta = SceneMeta::new("p", vec!["apple".into()], "stub", 48, 50, 0);
        let r = store.write_scene(&meta).unwrap();
        let img = image::ImageReader::open(&r.path)
            .unwrap()
            .with_guessed_format()
            .unwrap()
            .decode()
            .unwrap();
        assert_eq!((img.width(), img.height()), (48, 48));
    }

    #[test]
    fn concept_at_prefers_closest_disc() {
        let blobs = [
            Blob { cx: 0.4, cy: 0.5, radius: 0.3 },
            Blob { cx: 0.6, cy: 0.5, radius: 0.3 },
        ];
        assert_eq!(concept_at(&blobs, 0.45, 0.5), Some(0));
        assert_eq!(concept_at(&blobs, 0.55, 0.5), Some(1));
        assert_eq!(concept_at(&blobs, 0.0, 0.0), None);
    }
}
