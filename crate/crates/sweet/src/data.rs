//! Dataset ingestion and synthesis: a raw-image binary format, a
//! deterministic synthetic-texture generator, and patchification.
//!
//! Raw dataset file layout: magic `SWTD`, then little-endian u32 fields
//! {count, height, width, channels}, then `count*h*w*c` bytes of u8 pixels,
//! row-major, channel-last; pixels map to [0,1] by /255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Result, SweetError};

pub const RAW_MAGIC: &[u8; 4] = b"SWTD";

/// A batch of images with pixel values as floats in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// count * height * width * channels, row-major, channel-last.
    pub pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn new(count: usize, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != count * height * width * channels {
            return Err(SweetError::Shape {
                op: "ImageBatch::new",
                expected: format!("{} pixels", count * height * width * channels),
                got: format!("{}", pixels.len()),
            });
        }
        Ok(ImageBatch { count, height, width, channels, pixels })
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height * self.width * self.channels;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images `[lo, hi)` as a new batch.
    pub fn slice(&self, lo: usize, hi: usize) -> ImageBatch {
        let n = self.height * self.width * self.channels;
        ImageBatch {
            count: hi - lo,
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels[lo * n..hi * n].to_vec(),
        }
    }
}

/// Per-image sequences of flattened patch vectors.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub count: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// count * n_patches * patch_dim.
    pub data: Vec<f64>,
}

impl PatchBatch {
    pub fn patches(&self, img: usize) -> &[f64] {
        let n = self.n_patches * self.patch_dim;
        &self.data[img * n..(img + 1) * n]
    }

    /// Per-patch normalization: each patch vector mapped to zero mean and
    /// unit variance (eps-guarded). Returns the normalized batch.
    pub fn normalize_per_patch(&self) -> PatchBatch {
        let mut out = self.clone();
        let d = self.patch_dim;
        for p in out.data.chunks_mut(d) {
            let mean = p.iter().sum::<f64>() / d as f64;
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + 1e-6).sqrt();
            for v in p.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
        out
    }
}

/// Splits images into non-overlapping patches in row-major grid order;
/// each patch vector is row-major within the patch, channel-last.
pub fn patchify(batch: &ImageBatch, patch: usize) -> Result<PatchBatch> {
    if patch == 0 || batch.height % patch != 0 || batch.width % patch != 0 {
        return Err(SweetError::Argument(format!(
            "patch size {patch} must divide image {}x{}",
            batch.height, batch.width
        )));
    }
    let (h, w, c) = (batch.height, batch.width, batch.channels);
    let (gh, gw) = (h / patch, w / patch);
    let n_patches = gh * gw;
    let patch_dim = patch * patch * c;
    let mut data = Vec::with_capacity(batch.count * n_patches * patch_dim);
    for img in 0..batch.count {
        let px = batch.image(img);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    for pxx in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + pxx;
                        for ch in 0..c {
                            data.push(px[(y * w + x) * c + ch]);
                        }
                    }
                }
            }
        }
    }
    Ok(PatchBatch {
        count: batch.count,
        n_patches,
        patch_dim,
        patch,
        height: h,
        width: w,
        channels: c,
        data,
    })
}

/// Exact inverse of `patchify`.
pub fn unpatchify(patches: &PatchBatch) -> Result<ImageBatch> {
    let (h, w, c, patch) = (patches.height, patches.width, patches.channels, patches.patch);
    let (gh, gw) = (h / patch, w / patch);
    let mut pixels = vec![0.0; patches.count * h * w * c];
    let img_len = h * w * c;
    for img in 0..patches.count {
        let src = patches.patches(img);
        let dst = &mut pixels[img * img_len..(img + 1) * img_len];
        for gy in 0..gh {
            for gx in 0..gw {
                let pbase = (gy * gw + gx) * patches.patch_dim;
                let mut k = 0;
                for py in 0..patch {
                    for pxx in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + pxx;
                        for ch in 0..c {
                            dst[(y * w + x) * c + ch] = src[pbase + k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    ImageBatch::new(patches.count, h, w, c, pixels)
}

/// Streaming reader over a raw dataset file; delivery order is fixed and
/// restartable from any batch index.
pub struct RawDatasetReader {
    file: BufReader<File>,
    path: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    cursor: usize,
}

const RAW_HEADER_LEN: u64 = 4 + 4 * 4;

impl RawDatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut file = BufReader::new(f);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(|_| SweetError::Format {
            offset: 0,
            message: "file too short for magic".into(),
        })?;
        if &magic != RAW_MAGIC {
            return Err(SweetError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected SWTD"),
            });
        }
        let mut fields = [0usize; 4];
        for (i, f2) in fields.iter_mut().enumerate() {
            let mut b = [0u8; 4];
            file.read_exact(&mut b).map_err(|_| SweetError::Format {
                offset: 4 + 4 * i as u64,
                message: "truncated header".into(),
            })?;
            *f2 = u32::from_le_bytes(b) as usize;
        }
        let [count, height, width, channels] = fields;
        let expected = RAW_HEADER_LEN + (count * height * width * channels) as u64;
        let actual = file.get_ref().metadata().map_err(|e| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if actual.len() != expected {
            return Err(SweetError::Format {
                offset: actual.len().min(expected),
                message: format!("expected {expected} bytes, file has {}", actual.len()),
            });
        }
        Ok(RawDatasetReader {
            file,
            path: path.display().to_string(),
            count,
            height,
            width,
            channels,
            cursor: 0,
        })
    }

    pub fn seek_to_image(&mut self, index: usize) -> Result<()> {
        if index > self.count {
            return Err(SweetError::Argument(format!(
                "image index {index} beyond count {}",
                self.count
            )));
        }
        let stride = (self.height * self.width * self.channels) as u64;
        self.file
            .seek(SeekFrom::Start(RAW_HEADER_LEN + index as u64 * stride))
            .map_err(|e| SweetError::Io {
                path: self.path.clone(),
                source: e,
            })?;
        self.cursor = index;
        Ok(())
    }

    /// Next batch of up to `batch_size` images; None at end of file.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<ImageBatch>> {
        if self.cursor >= self.count {
            return Ok(None);
        }
        let take = batch_size.min(self.count - self.cursor);
        let n = take * self.height * self.width * self.channels;
        let mut raw = vec![0u8; n];
        self.file.read_exact(&mut raw).map_err(|_| SweetError::Format {
            offset: RAW_HEADER_LEN
                + (self.cursor * self.height * self.width * self.channels) as u64,
            message: "truncated pixel payload".into(),
        })?;
        self.cursor += take;
        let pixels = raw.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Some(ImageBatch {
            count: take,
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }))
    }
}

/// Writes a batch as a raw dataset file, quantizing pixels to u8.
pub fn write_raw_dataset(path: &Path, batch: &ImageBatch) -> Result<()> {
    let f = File::create(path).map_err(|e| SweetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    let io_err = |e: std::io::Error| SweetError::Io {
        path: path.display().to_string(),
        source: e,
    };
    w.write_all(RAW_MAGIC).map_err(io_err)?;
    for v in [batch.count, batch.height, batch.width, batch.channels] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
    }
    let raw: Vec<u8> = batch
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&raw).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Number of orientation buckets exposed as synthetic class labels.
pub const SYNTH_CLASSES: usize = 4;

/// Deterministic procedural images: mixtures of oriented sinusoids plus
/// Gaussian blobs, squashed into (0,1) with tanh. The orientation bucket
/// of the dominant sinusoid doubles as a class label for probing.
pub fn synth_dataset_labeled(seed: u64, count: usize, size: usize) -> Result<(ImageBatch, Vec<usize>)> {
    if count == 0 {
        return Err(SweetError::Argument("synth count must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * size * size);
    let mut labels = Vec::with_capacity(count);
    let s = size as f64;
    for _ in 0..count {
        // Dominant sinusoid first (largest amplitude by construction).
        let theta0: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        labels.push(((theta0 / std::f64::consts::PI) * SYNTH_CLASSES as f64) as usize % SYNTH_CLASSES);
        // Low spatial frequencies keep neighboring patches correlated, so
        // masked patches stay predictable from visible context.
        let mut waves = vec![(1.0, theta0, rng.gen_range(0.75..1.75), rng.gen_range(0.0..std::f64::consts::TAU))];
        waves.push((
            rng.gen_range(0.15..0.35),
            rng.gen_range(0.0..std::f64::consts::PI),
            rng.gen_range(0.75..1.75),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ));
        let blobs: Vec<(f64, f64, f64, f64)> = (0..1)
            .map(|_| {
                (
                    rng.gen_range(0.0..s),
                    rng.gen_range(0.0..s),
                    rng.gen_range(s / 5.0..s / 2.5),
                    rng.gen_range(0.3..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.0;
                for &(a, th, f, ph) in &waves {
                    let proj = (xf * th.cos() + yf * th.sin()) / s;
                    v += a * (std::f64::consts::TAU * f * proj + ph).sin();
                }
                for &(cx, cy, w, g) in &blobs {
                    let d2 = (xf - cx) * (xf - cx) + (yf - cy) * (yf - cy);
                    v += g * (-d2 / (2.0 * w * w)).exp();
                }
                pixels.push(0.5 + 0.5 * (0.8 * v).tanh());
            }
        }
    }
    Ok((ImageBatch::new(count, size, size, 1, pixels)?, labels))
}

/// Unlabeled convenience wrapper over `synth_dataset_labeled`.
pub fn synth_dataset(seed: u64, count: usize, size: usize) -> Result<ImageBatch> {
    Ok(synth_dataset_labeled(seed, count, size)?.0)
}
