//! Synthetic multi-temporal dataset generation, dataset I/O, normalization.
//!
//! The generator composes smooth multi-octave value-noise ground truth with
//! per-view smooth cloud alpha masks and a brightened cloud color, giving a
//! non-trivial inpainting-plus-color task in `[-1, 1]`. Datasets and
//! checkpoints share the container format in [`container`].

pub mod container;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use container::{
    blob_file_name, container_paths, read_json, read_record, sha256_hex, sibling, write_json,
    write_record, CONTAINER_VERSION,
};

/// One training example: a stack of `N` cloudy views and the cloud-free
/// target, all in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SamplePair<T: Scalar> {
    pub id: String,
    pub split: String,
    /// Condition stack `[N, C, H, W]`.
    pub x: Tensor<T>,
    /// Target `[1, C, H, W]`.
    pub y0: Tensor<T>,
}

/// In-memory dataset with the dimensions shared by all samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_temporal: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub samples: Vec<SamplePair<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: String,
    pub blob: String,
    pub sha256: String,
    pub count: usize,
    pub n_temporal: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: String,
    pub offset: u64,
}

/// Default cloud coverage range drawn per view.
pub const COVERAGE_RANGE: (f64, f64) = (0.10, 0.30);

/// Deterministic synthetic dataset: ground truth is smooth value-noise
/// texture; each temporal view composites an independent smooth cloud mask
/// with coverage drawn from [`COVERAGE_RANGE`].
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    height: usize,
    width: usize,
    n_temporal: usize,
    channels: usize,
) -> Result<Dataset> {
    gen_synthetic_with_coverage(seed, n, height, width, n_temporal, channels, COVERAGE_RANGE)
}

/// [`gen_synthetic`] with an explicit coverage range; `(0, 0)` produces
/// cloud-free views identical to the target.
pub fn gen_synthetic_with_coverage(
    seed: u64,
    n: usize,
    height: usize,
    width: usize,
    n_temporal: usize,
    channels: usize,
    coverage: (f64, f64),
) -> Result<Dataset> {
    gen_with_mask_stats(seed, n, height, width, n_temporal, channels, coverage).map(|(d, _)| d)
}

/// Like [`gen_synthetic_with_coverage`] but also reports, per generated
/// mask, the fraction of pixels with alpha above one half.
pub fn gen_with_mask_stats(
    seed: u64,
    n: usize,
    height: usize,
    width: usize,
    n_temporal: usize,
    channels: usize,
    coverage: (f64, f64),
) -> Result<(Dataset, Vec<f64>)> {
    if n == 0 || height == 0 || width == 0 || n_temporal == 0 || channels == 0 {
        return Err(Error::InvalidConfig(
            "dataset dimensions must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&coverage.0)
        || !(0.0..=1.0).contains(&coverage.1)
        || coverage.1 < coverage.0
    {
        return Err(Error::InvalidConfig(format!(
            "coverage range {:?} must be ordered within [0, 1]",
            coverage
        )));
    }
    let hw = height * width;
    let mut samples = Vec::with_capacity(n);
    let mut mask_stats = Vec::with_capacity(n * n_temporal);
    for i in 0..n {
        // one independent stream per sample: sample i is identical
        // regardless of how many others are generated
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);

        let base = value_noise(&mut rng, height, width, 4, 4);
        let mut truth = vec![0f32; channels * hw];
        for c in 0..channels {
            let detail = value_noise(&mut rng, height, width, 3, 8);
            for p in 0..hw {
                let v = 0.65 * base[p] + 0.35 * detail[p];
                truth[c * hw + p] = v.clamp(-1.0, 1.0) as f32;
            }
        }

        let mut x = vec![0f32; n_temporal * channels * hw];
        for view in 0..n_temporal {
            let alpha = cloud_alpha(&mut rng, height, width, coverage);
            mask_stats.push(alpha.iter().filter(|&&a| a > 0.5).count() as f64 / hw as f64);
            let brightness = rng.gen_range(0.55..0.90);
            let mut cloud = Vec::with_capacity(channels);
            for _ in 0..channels {
                let jitter: f64 = rng.gen_range(-0.05..0.05);
                cloud.push((brightness + jitter).clamp(-1.0, 0.97));
            }
            for c in 0..channels {
                let dst = &mut x[(view * channels + c) * hw..(view * channels + c + 1) * hw];
                for p in 0..hw {
                    let a = alpha[p];
                    dst[p] = ((1.0 - a) * truth[c * hw + p] as f64 + a * cloud[c]) as f32;
                }
            }
        }

        samples.push(SamplePair {
            id: format!("s{i:05}"),
            split: "train".to_string(),
            x: Tensor::new(vec![n_temporal, channels, height, width], x)?,
            y0: Tensor::new(vec![1, channels, height, width], truth)?,
        });
    }
    Ok((
        Dataset {
            n_temporal,
            channels,
            height,
            width,
            seed,
            samples,
        },
        mask_stats,
    ))
}

/// Smooth field in `[-1, 1]`: a sum of bilinearly upsampled random grids
/// with halving amplitudes.
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, octaves: u32, base_cells: usize) -> Vec<f64> {
    let mut out = vec![0f64; h * w];
    let mut norm = 0.0;
    for o in 0..octaves {
        let amp = 0.5f64.powi(o as i32);
        norm += amp;
        let cells = base_cells << o;
        let gw = cells + 1;
        let grid: Vec<f64> = (0..gw * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let gy = (fy as usize).min(cells - 1);
            let ty = fy - gy as f64;
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let gx = (fx as usize).min(cells - 1);
                let tx = fx - gx as f64;
                let v00 = grid[gy * gw + gx];
                let v01 = grid[gy * gw + gx + 1];
                let v10 = grid[(gy + 1) * gw + gx];
                let v11 = grid[(gy + 1) * gw + gx + 1];
                let v = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
                out[y * w + x] += amp * v;
            }
        }
    }
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Smooth alpha mask in `[0, 1]` whose >0.5 fraction approximates a coverage
/// drawn from `range`. Coverage 0 forces an all-zero mask.
fn cloud_alpha(rng: &mut impl Rng, h: usize, w: usize, range: (f64, f64)) -> Vec<f64> {
    let field = value_noise(rng, h, w, 3, 2);
    let coverage = if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    };
    if coverage == 0.0 {
        return vec![0.0; h * w];
    }
    // threshold at the (1 - coverage) quantile so the hard mask fraction
    // equals the drawn coverage, then soften the edge
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = ((1.0 - coverage) * (sorted.len() - 1) as f64).round() as usize;
    let tau = sorted[q.min(sorted.len() - 1)];
    const EDGE: f64 = 0.12;
    field
        .into_iter()
        .map(|v| {
            let a = ((v - tau) / EDGE + 0.5).clamp(0.0, 1.0);
            a * a * (3.0 - 2.0 * a)
        })
        .collect()
}

impl Dataset {
    /// Retags every sample's split label.
    pub fn with_split(mut self, split: &str) -> Self {
        for s in &mut self.samples {
            s.split = split.to_string();
        }
        self
    }

    pub fn by_id(&self) -> std::collections::HashMap<&str, &SamplePair<f32>> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    fn validate_sample(&self, s: &SamplePair<f32>) -> Result<()> {
        let want_x = [self.n_temporal, self.channels, self.height, self.width];
        let want_y = [1, self.channels, self.height, self.width];
        if s.x.shape() != want_x || s.y0.shape() != want_y {
            return Err(Error::shape(
                "dataset",
                format!(
                    "sample {}: x {:?} / y0 {:?}, expected {:?} / {:?}",
                    s.id,
                    s.x.shape(),
                    s.y0.shape(),
                    want_x,
                    want_y
                ),
            ));
        }
        let in_range = |t: &Tensor<f32>| t.data().iter().all(|&v| (-1.0..=1.0).contains(&v));
        if !in_range(&s.x) || !in_range(&s.y0) {
            return Err(Error::Format(format!(
                "sample {}: values outside [-1, 1]",
                s.id
            )));
        }
        Ok(())
    }
}

/// Writes `<base>.json` + `<base>.bin`; each sample is two records
/// (condition stack, then target) at the manifest offset.
pub fn save_dataset(ds: &Dataset, base: &Path) -> Result<()> {
    let (manifest_path, blob_path) = container_paths(base);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        ds.validate_sample(s)?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            split: s.split.clone(),
            offset: blob.len() as u64,
        });
        write_record(&mut blob, &s.x);
        write_record(&mut blob, &s.y0);
    }
    let manifest = DatasetManifest {
        version: CONTAINER_VERSION,
        kind: "dataset".into(),
        blob: blob_file_name(&blob_path)?,
        sha256: sha256_hex(&blob),
        count: ds.samples.len(),
        n_temporal: ds.n_temporal,
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        seed: ds.seed,
        samples: entries,
    };
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&manifest_path, &manifest)
}

/// Loads a dataset, verifying version, checksum, record layout, count, and
/// the per-sample shape/range invariants.
pub fn load_dataset(base: &Path) -> Result<Dataset> {
    let (manifest_path, _) = container_paths(base);
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {})",
            manifest.version, CONTAINER_VERSION
        )));
    }
    if manifest.kind != "dataset" {
        return Err(Error::Format(format!(
            "expected a dataset, found kind `{}`",
            manifest.kind
        )));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::Format(format!(
            "manifest count {} does not match {} sample records",
            manifest.count,
            manifest.samples.len()
        )));
    }
    let blob_path = sibling(&manifest_path, &manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::Format(format!(
            "checksum mismatch for {}",
            blob_path.display()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    let mut prev_end = 0u64;
    for entry in &manifest.samples {
        if entry.offset != prev_end {
            return Err(Error::Format(format!(
                "sample `{}` at offset {} does not follow the previous record (expected {})",
                entry.id, entry.offset, prev_end
            )));
        }
        let (x, mid) = read_record(&blob, entry.offset)?;
        let (y0, end) = read_record(&blob, mid)?;
        prev_end = end;
        samples.push(SamplePair {
            id: entry.id.clone(),
            split: entry.split.clone(),
            x,
            y0,
        });
    }
    if prev_end != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob has {} trailing bytes after the last sample",
            blob.len() as u64 - prev_end
        )));
    }
    let ds = Dataset {
        n_temporal: manifest.n_temporal,
        channels: manifest.channels,
        height: manifest.height,
        width: manifest.width,
        seed: manifest.seed,
        samples,
    };
    for s in &ds.samples {
        ds.validate_sample(s)?;
    }
    Ok(ds)
}

/// Affine map taking `[lo, hi]` onto `[-1, 1]`, clamped.
pub fn normalize<T: Scalar>(img: &Tensor<T>, lo: f64, hi: f64) -> Result<Tensor<T>> {
    if hi <= lo {
        return Err(Error::InvalidConfig(format!(
            "normalize requires hi > lo, got [{lo}, {hi}]"
        )));
    }
    let scale = T::from_f64(2.0 / (hi - lo));
    let lo_t = T::from_f64(lo);
    let one = T::one();
    Ok(img.map(|v| {
        let u = (v - lo_t) * scale - one;
        if u < -one {
            -one
        } else if u > one {
            one
        } else {
            u
        }
    }))
}

/// Inverse of [`normalize`] on in-range values: `[-1, 1]` onto `[lo, hi]`.
pub fn denormalize<T: Scalar>(img: &Tensor<T>, lo: f64, hi: f64) -> Result<Tensor<T>> {
    if hi <= lo {
        return Err(Error::InvalidConfig(format!(
            "denormalize requires hi > lo, got [{lo}, {hi}]"
        )));
    }
    let half = T::from_f64((hi - lo) / 2.0);
    let lo_t = T::from_f64(lo);
    let one = T::one();
    Ok(img.map(|v| {
        let c = if v < -one {
            -one
        } else if v > one {
            one
        } else {
            v
        };
        (c + one) * half + lo_t
    }))
}
