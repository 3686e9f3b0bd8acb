//! Attribute-labeled image folders, the synthetic two-domain blob generator,
//! and paired batch streams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{LomitError, Result};
use crate::imageio::{self, MaskRaster, Raster};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

/// Multi-hot attribute labels; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AttributeVector(Vec<u8>);

impl AttributeVector {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|v| **v > 1) {
            return Err(LomitError::Domain(format!(
                "attribute labels must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|v| *v as f32).collect()
    }
}

impl TryFrom<Vec<u8>> for AttributeVector {
    type Error = LomitError;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AttributeVector> for Vec<u8> {
    fn from(a: AttributeVector) -> Self {
        a.0
    }
}

impl std::fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub labels: AttributeVector,
}

/// A parsed `manifest.tsv`: a header `path<TAB>attr1,attr2,...` followed by
/// rows `relative/path.png<TAB>0,1,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub attribute_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| LomitError::io(format!("reading manifest {}", path.display()), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: usize, message: String| LomitError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| LomitError::Config(format!("manifest {} is empty", path.display())))?;
    let attribute_names: Vec<String> = match header.split_once('\t') {
        Some((_, names)) => names
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        None => Vec::new(),
    };
    if attribute_names.is_empty() {
        return Err(LomitError::Config(format!(
            "manifest {} (line {header_line}) declares no attributes",
            path.display()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for name in &attribute_names {
        if !seen.insert(name) {
            return Err(parse_err(header_line, format!("duplicate attribute name {name:?}")));
        }
    }

    let mut entries = Vec::new();
    for (line, row) in lines {
        let (rel, labels) = row
            .split_once('\t')
            .ok_or_else(|| parse_err(line, "expected `path<TAB>labels`".into()))?;
        let labels: Vec<u8> = labels
            .split(',')
            .map(|v| match v.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(parse_err(line, format!("label {other:?} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        if labels.len() != attribute_names.len() {
            return Err(parse_err(
                line,
                format!(
                    "row for {rel} has {} labels, expected {}",
                    labels.len(),
                    attribute_names.len()
                ),
            ));
        }
        let rel = PathBuf::from(rel.trim());
        if !root.join(&rel).is_file() {
            return Err(parse_err(line, format!("image {} does not exist", rel.display())));
        }
        entries.push(ManifestEntry {
            path: rel,
            labels: AttributeVector::new(labels)?,
        });
    }
    Ok(DatasetManifest {
        root,
        attribute_names,
        entries,
    })
}

impl DatasetManifest {
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                LomitError::Config(format!(
                    "unknown attribute {name:?}; manifest declares {:?}",
                    self.attribute_names
                ))
            })
    }

    /// Entry indices split by a binary attribute: `(label 0, label 1)`.
    /// Both sides must be non-empty.
    pub fn partition(&self, attribute: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let k = self.attribute_index(attribute)?;
        let (a, b): (Vec<usize>, Vec<usize>) =
            (0..self.entries.len()).partition(|i| self.entries[*i].labels.as_slice()[k] == 0);
        if a.is_empty() || b.is_empty() {
            return Err(LomitError::Config(format!(
                "attribute {attribute:?} leaves a domain empty ({} vs {} images)",
                a.len(),
                b.len()
            )));
        }
        Ok((a, b))
    }

    pub fn render(&self) -> String {
        let mut out = format!("path\t{}\n", self.attribute_names.join(","));
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\n", e.path.display(), e.labels));
        }
        out
    }
}

/// Hue interval in degrees, `0 ≤ lo < hi ≤ 360`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HueBand {
    pub lo: f64,
    pub hi: f64,
}

impl HueBand {
    pub fn contains(&self, hue: f64) -> bool {
        hue >= self.lo - 1e-6 && hue <= self.hi + 1e-6
    }

    fn overlaps(&self, other: &HueBand) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 360.0) {
            return Err(LomitError::Config(format!(
                "{name} hue band [{}, {}] is not a valid interval within [0, 360]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Total samples; even indices belong to domain A, odd to domain B.
    pub count: usize,
    pub resolution: i64,
    pub palette_a: HueBand,
    pub palette_b: HueBand,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            resolution: 64,
            palette_a: HueBand { lo: 0.0, hi: 50.0 },
            palette_b: HueBand { lo: 190.0, hi: 250.0 },
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(LomitError::Config("synthetic count must be at least 1".into()));
        }
        if self.resolution < 16 {
            return Err(LomitError::Config(format!(
                "synthetic resolution must be at least 16, got {}",
                self.resolution
            )));
        }
        self.palette_a.validate("palette_a")?;
        self.palette_b.validate("palette_b")?;
        if self.palette_a.overlaps(&self.palette_b) {
            return Err(LomitError::Config(format!(
                "palettes overlap in hue: {:?} and {:?}",
                self.palette_a, self.palette_b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

/// Attribute names of synthetic datasets: one flag, set for domain B.
pub fn synthetic_attribute_names() -> Vec<String> {
    vec!["palette_b".to_string()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Raster,
    /// Binary blob support, row-major `H × W`.
    pub true_mask: Vec<f32>,
    pub attributes: AttributeVector,
    pub domain: Domain,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a tuple of stream identifiers.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

const SPECKLE: f64 = 0.04;
const BLOB_FRACTION: (f64, f64) = (0.05, 0.4);

/// HSV (degrees, [0,1], [0,1]) to RGB in [0,1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB color; `None` for achromatic colors.
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-12 {
        return None;
    }
    let h = if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h)
}

/// Renders one sample from its own seed. The blob color is the only
/// chromatic content; the background is a gray gradient with speckle.
pub fn render_sample(seed: u64, domain: Domain, config: &SyntheticConfig) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = config.resolution as usize;
    let rf = r as f64;

    let base = rng.gen_range(0.3..0.7);
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let (fx, fy) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let (bump, phase) = (rng.gen_range(0.0..0.1), rng.gen_range(0.0..std::f64::consts::TAU));

    let palette = match domain {
        Domain::A => config.palette_a,
        Domain::B => config.palette_b,
    };
    let hue = rng.gen_range(palette.lo..palette.hi);
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.85), rng.gen_range(0.7..0.9));

    // Rejection loop keeps the blob's pixel fraction inside BLOB_FRACTION.
    let (cx, cy, a, b, theta, mask) = loop {
        let fraction = rng.gen_range(0.08..0.3);
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let area = fraction * rf * rf;
        let a = (area * aspect / std::f64::consts::PI).sqrt();
        let b = (area / (aspect * std::f64::consts::PI)).sqrt();
        let margin = a.max(b) + 1.0;
        let cx = rng.gen_range(margin..(rf - margin).max(margin + 1e-9));
        let cy = rng.gen_range(margin..(rf - margin).max(margin + 1e-9));
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let mask: Vec<f32> = (0..r * r)
            .map(|i| {
                let rad = ellipse_radius(i % r, i / r, cx, cy, a, b, theta);
                if rad <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let frac = mask.iter().sum::<f32>() as f64 / (r * r) as f64;
        if (BLOB_FRACTION.0..=BLOB_FRACTION.1).contains(&frac) {
            break (cx, cy, a, b, theta, mask);
        }
    };

    let plane = r * r;
    let mut pixels = vec![0f32; 3 * plane];
    let edge = (a * b).sqrt();
    for i in 0..plane {
        let (px, py) = (i % r, i / r);
        let (u, v) = ((px as f64 + 0.5) / rf - 0.5, (py as f64 + 0.5) / rf - 0.5);
        let gray = (base
            + gx * u
            + gy * v
            + bump * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin())
        .clamp(0.1, 0.9);
        let rad = ellipse_radius(px, py, cx, cy, a, b, theta);
        let alpha = (0.5 - (rad - 1.0) * edge).clamp(0.0, 1.0);
        let noise = rng.gen_range(-SPECKLE..SPECKLE);
        for c in 0..3 {
            let p = alpha * color[c] + (1.0 - alpha) * gray + noise;
            pixels[c * plane + i] = (2.0 * p.clamp(0.0, 1.0) - 1.0) as f32;
        }
    }

    let label = match domain {
        Domain::A => 0,
        Domain::B => 1,
    };
    SyntheticSample {
        image: Raster {
            height: r as u32,
            width: r as u32,
            pixels,
        },
        true_mask: mask,
        attributes: AttributeVector(vec![label]),
        domain,
        seed,
    }
}

fn ellipse_radius(px: usize, py: usize, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> f64 {
    let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
    let (s, c) = theta.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    ((u / a).powi(2) + (v / b).powi(2)).sqrt()
}

/// Generates `config.count` samples, alternating domains A and B.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    Ok((0..config.count)
        .map(|i| {
            let domain = if i % 2 == 0 { Domain::A } else { Domain::B };
            render_sample(derive_seed(&[config.seed, i as u64]), domain, config)
        })
        .collect())
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and `manifest.tsv` under `dir`.
pub fn export_synthetic(samples: &[SyntheticSample], dir: &Path) -> Result<DatasetManifest> {
    let images = dir.join(IMAGES_DIR);
    let masks = dir.join(MASKS_DIR);
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| LomitError::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        imageio::save_image(&s.image, &images.join(&name))?;
        imageio::save_mask(
            &MaskRaster {
                height: s.image.height,
                width: s.image.width,
                values: s.true_mask.clone(),
            },
            &masks.join(&name),
        )?;
        entries.push(ManifestEntry {
            path: Path::new(IMAGES_DIR).join(&name),
            labels: s.attributes.clone(),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        attribute_names: synthetic_attribute_names(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render())
        .map_err(|e| LomitError::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// One image held in memory, with an optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub name: String,
    pub image: Raster,
    pub mask: Option<Vec<f32>>,
    pub labels: AttributeVector,
}

/// Images split into the two translation domains.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: i64,
    pub attribute_names: Vec<String>,
    pub domain_a: Vec<ImageRecord>,
    pub domain_b: Vec<ImageRecord>,
}

impl Dataset {
    pub fn from_synthetic(samples: &[SyntheticSample]) -> Result<Self> {
        let resolution = samples
            .first()
            .map(|s| s.image.height as i64)
            .ok_or_else(|| LomitError::Config("no synthetic samples".into()))?;
        let mut domain_a = Vec::new();
        let mut domain_b = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let rec = ImageRecord {
                name: format!("{i:05}"),
                image: s.image.clone(),
                mask: Some(s.true_mask.clone()),
                labels: s.attributes.clone(),
            };
            match s.domain {
                Domain::A => domain_a.push(rec),
                Domain::B => domain_b.push(rec),
            }
        }
        let ds = Self {
            resolution,
            attribute_names: synthetic_attribute_names(),
            domain_a,
            domain_b,
        };
        ds.check_domains()?;
        Ok(ds)
    }

    /// Loads every manifest entry, resized to `resolution`, split on
    /// `domain_attribute`. Masks are picked up from `masks/<file name>` when
    /// present.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        domain_attribute: &str,
        resolution: i64,
    ) -> Result<Self> {
        let (a_idx, b_idx) = manifest.partition(domain_attribute)?;
        let load = |i: usize| -> Result<ImageRecord> {
            let e = &manifest.entries[i];
            let path = manifest.root.join(&e.path);
            let (image, _) = imageio::load_image(&path, Some(resolution as u32))?;
            let mask_path = e
                .path
                .file_name()
                .map(|n| manifest.root.join(MASKS_DIR).join(n));
            let mask = match mask_path {
                Some(p) if p.is_file() => {
                    let r = resolution as u32;
                    Some(imageio::load_mask(&p, Some((r, r)))?.values)
                }
                _ => None,
            };
            Ok(ImageRecord {
                name: e.path.display().to_string(),
                image,
                mask,
                labels: e.labels.clone(),
            })
        };
        let ds = Self {
            resolution,
            attribute_names: manifest.attribute_names.clone(),
            domain_a: a_idx.into_iter().map(load).collect::<Result<_>>()?,
            domain_b: b_idx.into_iter().map(load).collect::<Result<_>>()?,
        };
        ds.check_domains()?;
        Ok(ds)
    }

    fn check_domains(&self) -> Result<()> {
        if self.domain_a.is_empty() || self.domain_b.is_empty() {
            return Err(LomitError::Config(format!(
                "both domains need images ({} vs {})",
                self.domain_a.len(),
                self.domain_b.len()
            )));
        }
        Ok(())
    }

    pub fn domain(&self, d: Domain) -> &[ImageRecord] {
        match d {
            Domain::A => &self.domain_a,
            Domain::B => &self.domain_b,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    pub horizontal_flip: bool,
}

/// `x1` from domain A paired with `x2` from domain B.
#[derive(Debug)]
pub struct PairedBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels1: Tensor,
    pub labels2: Tensor,
    pub masks1: Option<Tensor>,
    pub masks2: Option<Tensor>,
    pub indices1: Vec<usize>,
    pub indices2: Vec<usize>,
}

/// Deterministic, resumable stream of paired batches.
///
/// Each domain is shuffled once per epoch and cut into `batch_size` chunks
/// with the remainder dropped; an epoch of the stream is one pass over
/// domain A. Domain B cycles through its own epochs independently. Batch `k`
/// depends only on `(seed, k)`, so a stream can start at any index.
#[derive(Debug)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    augmentations: Augmentations,
    next: u64,
}

pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    augmentations: Augmentations,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(LomitError::Config("batch size must be at least 1".into()));
    }
    for (name, len) in [("A", dataset.domain_a.len()), ("B", dataset.domain_b.len())] {
        if batch_size > len {
            return Err(LomitError::Config(format!(
                "batch size {batch_size} exceeds the {len} images of domain {name}"
            )));
        }
    }
    Ok(BatchStream {
        dataset,
        batch_size,
        seed,
        augmentations,
        next: 0,
    })
}

impl<'a> BatchStream<'a> {
    pub fn batches_per_epoch(&self) -> u64 {
        (self.dataset.domain_a.len() / self.batch_size) as u64
    }

    /// Positions the stream so the next batch is `index`.
    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    fn domain_indices(&self, domain: Domain, batch: u64) -> Vec<usize> {
        let len = self.dataset.domain(domain).len();
        let per_epoch = (len / self.batch_size) as u64;
        let (epoch, slot) = (batch / per_epoch, (batch % per_epoch) as usize);
        let tag = match domain {
            Domain::A => 0xA,
            Domain::B => 0xB,
        };
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, tag, epoch])));
        perm[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec()
    }

    pub fn batch_at(&self, index: u64) -> PairedBatch {
        let indices1 = self.domain_indices(Domain::A, index);
        let indices2 = self.domain_indices(Domain::B, index);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xF1, index]));
        let mut flips = || -> Vec<bool> {
            (0..self.batch_size)
                .map(|_| self.augmentations.horizontal_flip && flip_rng.gen_bool(0.5))
                .collect()
        };
        let (f1, f2) = (flips(), flips());
        let (x1, labels1, masks1) = self.assemble(&self.dataset.domain_a, &indices1, &f1);
        let (x2, labels2, masks2) = self.assemble(&self.dataset.domain_b, &indices2, &f2);
        PairedBatch {
            x1,
            x2,
            labels1,
            labels2,
            masks1,
            masks2,
            indices1,
            indices2,
        }
    }

    fn assemble(
        &self,
        records: &[ImageRecord],
        indices: &[usize],
        flips: &[bool],
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let r = self.dataset.resolution;
        let n = indices.len() as i64;
        let mut images = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (&i, &flip) in indices.iter().zip(flips) {
            let rec = &records[i];
            let mut img = rec.image.to_tensor();
            let mut mask = rec.mask.as_ref().map(|m| Tensor::from_slice(m).reshape([1, 1, r, r]));
            if flip {
                img = img.flip([3]);
                mask = mask.map(|m| m.flip([3]));
            }
            images.push(img);
            masks.push(mask);
            labels.push(Tensor::from_slice(&rec.labels.to_f32()).unsqueeze(0));
        }
        let masks = if masks.iter().all(Option::is_some) {
            let ms: Vec<Tensor> = masks.into_iter().flatten().collect();
            Some(Tensor::cat(&ms, 0))
        } else {
            None
        };
        let images = Tensor::cat(&images, 0);
        debug_assert_eq!(images.size()[0], n);
        (images, Tensor::cat(&labels, 0), masks)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
