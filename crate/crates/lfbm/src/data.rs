//! Dataset construction: synthetic 2-D families, IDX-format image
//! ingestion, mask synthesis, and PGM grid export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mask;
use crate::nn::derive_seed;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// N examples of dimension D, values in [-1, 1], with optional labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub examples: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    /// Affine shrink factor applied to synthetic samples, recorded so
    /// downstream consumers can undo it.
    pub rescale: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.examples[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat batch for the given indices.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.example(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            examples: self.gather(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            rescale: self.rescale,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticFamily {
    GaussianMixture {
        means: Vec<Vec<f64>>,
        /// Isotropic component variance.
        cov: f64,
    },
    TwoRings {
        radii: [f64; 2],
        noise: f64,
    },
}

/// Deterministic synthetic dataset. Samples are shrunk into (-1, 1) by a
/// fixed affine factor derived from the family parameters (never
/// inflated) and clamped as a last resort.
pub fn gen_synthetic(family: &SyntheticFamily, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("synthetic dataset needs n >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match family {
        SyntheticFamily::GaussianMixture { means, cov } => {
            if means.is_empty() {
                return Err(Error::config("gaussian_mixture needs at least one component"));
            }
            let dim = means[0].len();
            if dim == 0 || means.iter().any(|m| m.len() != dim) {
                return Err(Error::config("gaussian_mixture means must share a nonzero dimension"));
            }
            if *cov <= 0.0 {
                return Err(Error::config(format!("gaussian_mixture cov must be positive, got {cov}")));
            }
            let sd = cov.sqrt();
            let extent = means
                .iter()
                .flat_map(|m| m.iter())
                .fold(0.0f64, |acc, &v| acc.max(v.abs()))
                + 5.0 * sd;
            let scale = if extent > 1.0 { 1.0 / extent } else { 1.0 };
            let mut examples = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..means.len());
                labels.push(k as u8);
                for j in 0..dim {
                    let v = means[k][j] + sd * rng.sample::<f64, _>(StandardNormal);
                    examples.push((v * scale).clamp(-1.0, 1.0));
                }
            }
            Ok(Dataset {
                name: "gaussian_mixture".into(),
                dim,
                examples,
                labels: Some(labels),
                rescale: Some(scale),
            })
        }
        SyntheticFamily::TwoRings { radii, noise } => {
            if radii.iter().any(|&r| r <= 0.0) || *noise < 0.0 {
                return Err(Error::config("two_rings needs positive radii and nonnegative noise"));
            }
            let extent = radii[0].max(radii[1]) + 5.0 * noise;
            let scale = if extent > 1.0 { 1.0 / extent } else { 1.0 };
            let mut examples = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..2usize);
                labels.push(k as u8);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let r = radii[k] + noise * rng.sample::<f64, _>(StandardNormal);
                examples.push((r * theta.cos() * scale).clamp(-1.0, 1.0));
                examples.push((r * theta.sin() * scale).clamp(-1.0, 1.0));
            }
            Ok(Dataset {
                name: "two_rings".into(),
                dim: 2,
                examples,
                labels: Some(labels),
                rescale: Some(scale),
            })
        }
    }
}

// ── IDX format ─────────────────────────────────────────────────────────

fn read_u32(r: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let v = r
        .read_u32::<BigEndian>()
        .map_err(|e| Error::data(format!("reading {what} at byte {offset}: {e}")))?;
    *offset += 4;
    Ok(v)
}

/// Parse IDX image (and optionally label) files: big-endian, u8 pixels
/// mapped onto (-1, 1) by x = 2 v / 255 - 1, images flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let file = File::open(images_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", images_path.display())))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let magic = read_u32(&mut r, &mut offset, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::data(format!(
            "{}: wrong image magic 0x{magic:08x} at byte 0 (expected 0x{IDX_IMAGE_MAGIC:08x})",
            images_path.display()
        )));
    }
    let count = read_u32(&mut r, &mut offset, "image count")? as usize;
    let rows = read_u32(&mut r, &mut offset, "row count")? as usize;
    let cols = read_u32(&mut r, &mut offset, "column count")? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    r.read_exact(&mut pixels).map_err(|e| {
        Error::data(format!(
            "{}: truncated pixel payload at byte {offset}: {e}",
            images_path.display()
        ))
    })?;
    let examples: Vec<f64> = pixels.iter().map(|&v| 2.0 * (v as f64 / 255.0) - 1.0).collect();

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
            let mut r = BufReader::new(file);
            let mut offset = 0u64;
            let magic = read_u32(&mut r, &mut offset, "label magic")?;
            if magic != IDX_LABEL_MAGIC {
                return Err(Error::data(format!(
                    "{}: wrong label magic 0x{magic:08x} at byte 0 (expected 0x{IDX_LABEL_MAGIC:08x})",
                    path.display()
                )));
            }
            let label_count = read_u32(&mut r, &mut offset, "label count")? as usize;
            if label_count != count {
                return Err(Error::data(format!(
                    "{}: {label_count} labels for {count} images",
                    path.display()
                )));
            }
            let mut labels = vec![0u8; label_count];
            r.read_exact(&mut labels)
                .map_err(|e| Error::data(format!("{}: truncated labels at byte {offset}: {e}", path.display())))?;
            Some(labels)
        }
    };

    Ok(Dataset {
        name: format!("idx:{}", images_path.display()),
        dim,
        examples,
        labels,
        rescale: None,
    })
}

/// Image shape recorded in an IDX file header.
pub fn idx_image_shape(images_path: &Path) -> Result<(usize, usize)> {
    let file = File::open(images_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", images_path.display())))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let magic = read_u32(&mut r, &mut offset, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::data(format!("{}: wrong image magic 0x{magic:08x}", images_path.display())));
    }
    let _count = read_u32(&mut r, &mut offset, "image count")?;
    let rows = read_u32(&mut r, &mut offset, "row count")? as usize;
    let cols = read_u32(&mut r, &mut offset, "column count")? as usize;
    Ok((rows, cols))
}

pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::contract("write_idx_images: payload size mismatch"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_IMAGE_MAGIC)?;
    w.write_u32::<BigEndian>(count as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IDX_LABEL_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

// ── mask synthesis ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Center,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskKind {
    Region { side: usize, placement: Placement },
    SaltPepper { fraction: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskSpec {
    #[serde(flatten)]
    pub kind: MaskKind,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match &self.kind {
            MaskKind::Region { side, .. } => {
                if *side == 0 || *side > h || *side > w {
                    return Err(Error::config(format!(
                        "region mask side {side} does not fit a {h}x{w} image"
                    )));
                }
            }
            MaskKind::SaltPepper { fraction } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(Error::config(format!(
                        "salt-and-pepper occlusion fraction must lie in (0, 1), got {fraction}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Occlude a dataset viewed as H x W images. Occluded pixels are set to 0
/// (the data-range midpoint); per-example visibility masks are returned.
pub fn apply_mask(ds: &Dataset, h: usize, w: usize, spec: &MaskSpec) -> Result<(Dataset, Vec<Mask>)> {
    if h * w != ds.dim {
        return Err(Error::config(format!("dataset dim {} is not {h}x{w}", ds.dim)));
    }
    spec.validate(h, w)?;
    let n = ds.len();
    let mut occluded = ds.examples.clone();
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let mut bits = vec![1.0; ds.dim];
        match &spec.kind {
            MaskKind::Region { side, placement } => {
                let (r0, c0) = match placement {
                    Placement::Center => ((h - side) / 2, (w - side) / 2),
                    Placement::Random => (rng.random_range(0..=h - side), rng.random_range(0..=w - side)),
                };
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        bits[r * w + c] = 0.0;
                    }
                }
            }
            MaskKind::SaltPepper { fraction } => {
                for b in bits.iter_mut() {
                    if rng.random::<f64>() < *fraction {
                        *b = 0.0;
                    }
                }
            }
        }
        for (j, &b) in bits.iter().enumerate() {
            if b == 0.0 {
                occluded[i * ds.dim + j] = 0.0;
            }
        }
        masks.push(Mask::new(bits)?);
    }
    let occluded_ds = Dataset {
        name: format!("{}+occluded", ds.name),
        dim: ds.dim,
        examples: occluded,
        labels: ds.labels.clone(),
        rescale: ds.rescale,
    };
    Ok((occluded_ds, masks))
}

// ── PGM grid export ────────────────────────────────────────────────────

const GRID_SEPARATOR: u8 = 255;
const GRID_GAP: usize = 2;

/// Tile images (values in [-1, 1], row-major H x W each) into a binary
/// PGM (P5) grid with 2-pixel separators, `cols` images per row.
pub fn export_grid(images: &[f64], h: usize, w: usize, count: usize, cols: usize, path: &Path) -> Result<()> {
    if count == 0 || cols == 0 {
        return Err(Error::contract("export_grid: empty grid"));
    }
    if images.len() != count * h * w {
        return Err(Error::contract(format!(
            "export_grid: {} values for {count} images of {h}x{w}",
            images.len()
        )));
    }
    let rows = count.div_ceil(cols);
    let canvas_w = cols * w + (cols - 1) * GRID_GAP;
    let canvas_h = rows * h + (rows - 1) * GRID_GAP;
    let mut canvas = vec![GRID_SEPARATOR; canvas_w * canvas_h];
    for img in 0..count {
        let gr = img / cols;
        let gc = img % cols;
        let top = gr * (h + GRID_GAP);
        let left = gc * (w + GRID_GAP);
        for r in 0..h {
            for c in 0..w {
                let v = images[img * h * w + r * w + c];
                let pixel = (255.0 * (v + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8;
                canvas[(top + r) * canvas_w + (left + c)] = pixel;
            }
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?);
    write!(f, "P5\n{canvas_w} {canvas_h}\n255\n").map_err(|e| Error::data(e.to_string()))?;
    f.write_all(&canvas).map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

/// Write 2-D points as a CSV with an x,y header.
pub fn export_points_csv(points: &[f64], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "x,y")?;
    for p in points.chunks(2) {
        writeln!(f, "{},{}", p[0], p[1])?;
    }
    Ok(())
}

/// Derived per-dataset seed so masks and data never share streams.
pub fn mask_seed(base: u64) -> u64 {
    derive_seed(base, 0x3A5C, 0)
}
