//! Patch-attention erasure: keep the patches the gold answer attends to
//! most and black out the rest, in a copy of the image.

use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backends::store::write_atomic;
use crate::backends::{ScoringMode, TextInput, TextScorer, VisualEncoder};
use crate::dataset::VQAPair;
use crate::error::{Error, Result};
use crate::scoring::{contextualize, render_question, require_image, AttentionMap};

use super::REPORT_SCHEMA_VERSION;

/// Attention of the gold choice's text vector over the pair's image patches.
pub fn gold_attention(
    pair: &VQAPair,
    text: &dyn TextScorer,
    visual: &dyn VisualEncoder,
    mode: ScoringMode,
) -> Result<AttentionMap> {
    pair.qa.validate()?;
    let image = require_image(pair)?;
    let context = render_question(&pair.qa.question, pair.caption_prefix.as_deref());
    let input = TextInput::question_choice(&context, pair.qa.gold());
    let feats = text.encode(&input, mode)?;
    let v = visual.encode(image)?;
    Ok(contextualize(&feats.context_vector, &v, text.itm_projection())?.attention)
}

/// Indices of the `p - erase_count` highest-weight patches, ties going to
/// the lower index, returned in ascending index order.
pub fn surviving_patches(weights: &[f64], erase_count: usize) -> Result<Vec<usize>> {
    if erase_count >= weights.len() {
        return Err(Error::invalid(format!(
            "cannot erase {erase_count} of {} patches",
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut keep = order[..weights.len() - erase_count].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by patch `k` of a
/// row-major grid laid over a `width x height` image.
fn patch_rect(k: usize, grid: (usize, usize), width: u32, height: u32) -> (u32, u32, u32, u32) {
    let (rows, cols) = grid;
    let (r, c) = (k / cols, k % cols);
    let x0 = (c as u64 * width as u64 / cols as u64) as u32;
    let x1 = ((c as u64 + 1) * width as u64 / cols as u64) as u32;
    let y0 = (r as u64 * height as u64 / rows as u64) as u32;
    let y1 = ((r as u64 + 1) * height as u64 / rows as u64) as u32;
    (x0, x1, y0, y1)
}

/// Copy of `img` with the listed patches set to black.
pub fn erase_patches(img: &RgbImage, grid: (usize, usize), erased: &[usize]) -> RgbImage {
    let mut out = img.clone();
    for &k in erased {
        let (x0, x1, y0, y1) = patch_rect(k, grid, img.width(), img.height());
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    out
}

/// Sidecar weight map written next to the erased image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureArtifact {
    pub schema_version: u32,
    pub pair_id: String,
    pub gold_index: usize,
    pub source_image: PathBuf,
    pub erased_image: PathBuf,
    pub grid_shape: (usize, usize),
    /// Row-major attention weights, one per patch.
    pub weights: Vec<f64>,
    pub erase_count: usize,
    pub erased: Vec<usize>,
    pub surviving: Vec<usize>,
}

/// Writes `<out_dir>/<pair id>.erased.png` and `<pair id>.attention.json`.
/// The source image is only read. With `erase_count == 0` the copy is
/// byte-identical to the source.
pub fn attention_erasure(
    pair: &VQAPair,
    text: &dyn TextScorer,
    visual: &dyn VisualEncoder,
    mode: ScoringMode,
    erase_count: usize,
    out_dir: &Path,
) -> Result<ErasureArtifact> {
    let attention = gold_attention(pair, text, visual, mode)?;
    let surviving = surviving_patches(&attention.weights, erase_count)?;
    let erased: Vec<usize> = (0..attention.weights.len())
        .filter(|k| surviving.binary_search(k).is_err())
        .collect();

    let source = require_image(pair)?.path.clone();
    let bytes = std::fs::read(&source).map_err(|e| Error::storage(&source, e))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let stem = sanitize(&pair.qa.id);
    let erased_image = out_dir.join(format!("{stem}.erased.png"));
    let out_bytes = if erased.is_empty() {
        bytes
    } else {
        let img = image::ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| Error::storage(&source, e))?
            .decode()
            .map_err(|e| Error::MissingImage(format!("{}: {e}", source.display())))?
            .to_rgb8();
        let masked = erase_patches(&img, attention.grid_shape, &erased);
        let mut buf = Vec::new();
        masked
            .write_to(&mut std::io::Cursor::new(&mut buf), ImageFormat::Png)
            .map_err(|e| Error::storage(&erased_image, e))?;
        buf
    };
    write_atomic(&erased_image, &out_bytes)?;

    let artifact = ErasureArtifact {
        schema_version: REPORT_SCHEMA_VERSION,
        pair_id: pair.qa.id.clone(),
        gold_index: pair.qa.answer_index,
        source_image: source,
        erased_image,
        grid_shape: attention.grid_shape,
        weights: attention.weights,
        erase_count,
        erased,
        surviving,
    };
    let sidecar = out_dir.join(format!("{stem}.attention.json"));
    write_atomic(&sidecar, &serde_json::to_vec_pretty(&artifact)?)?;
    Ok(artifact)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
