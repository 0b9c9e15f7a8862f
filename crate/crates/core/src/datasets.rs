//! Labeled image datasets: the RSQ1 binary format, a PPM folder loader, a
//! seeded synthetic generator and per-channel means.
//!
//! RSQ1 layout, all little-endian:
//!
//! ```text
//! "RSQ1" | version u32 | sample_count u32 | channels u32 | height u32 | width u32 | class_count u32
//! then per sample: label u16 | channels*height*width f32 values
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files;

pub const MAGIC: [u8; 4] = *b"RSQ1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub sample_count: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub class_count: u32,
}

impl DatasetHeader {
    pub fn sample_len(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    /// Bytes one sample occupies on disk.
    pub fn record_len(&self) -> u64 {
        2 + 4 * self.sample_len() as u64
    }
}

/// An in-memory dataset. Sample `i` occupies
/// `values[i * sample_len()..(i + 1) * sample_len()]` in CHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub values: Vec<f32>,
}

impl Dataset {
    pub fn new(
        classes: usize,
        [channels, height, width]: [usize; 3],
        labels: Vec<u16>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("class count must be at least 2, got {classes}")));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!("sample shape {channels}x{height}x{width}")));
        }
        if values.len() != labels.len() * channels * height * width {
            return Err(Error::dim(format!(
                "{} values for {} samples of {channels}x{height}x{width}",
                values.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Index {
                label: l as usize,
                classes,
            });
        }
        Ok(Dataset {
            classes,
            channels,
            height,
            width,
            labels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: VERSION,
            sample_count: self.len() as u32,
            channels: self.channels as u32,
            height: self.height as u32,
            width: self.width as u32,
            class_count: self.classes as u32,
        }
    }

    /// Serializes to the RSQ1 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.is_empty() {
            return Err(Error::Domain("cannot encode an empty dataset".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        let h = self.header();
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * h.record_len() as usize);
        out.extend_from_slice(&MAGIC);
        for v in [
            h.version,
            h.sample_count,
            h.channels,
            h.height,
            h.width,
            h.class_count,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in self.sample(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses RSQ1 bytes. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: u64| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN as u64));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN as u64));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let h = DatasetHeader {
            version: word(0),
            sample_count: word(1),
            channels: word(2),
            height: word(3),
            width: word(4),
            class_count: word(5),
        };
        if h.version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version: h.version,
            });
        }
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if h.sample_count == 0 || h.channels == 0 || h.height == 0 || h.width == 0 {
            return Err(format("header counts must all be at least 1".into()));
        }
        if h.class_count < 2 {
            return Err(format(format!("class count {} is below 2", h.class_count)));
        }
        let expected = HEADER_LEN as u64 + h.sample_count as u64 * h.record_len();
        if (bytes.len() as u64) < expected {
            return Err(truncated(expected));
        }
        if bytes.len() as u64 > expected {
            return Err(format(format!(
                "{} trailing bytes after the last sample",
                bytes.len() as u64 - expected
            )));
        }
        let n = h.sample_len();
        let mut labels = Vec::with_capacity(h.sample_count as usize);
        let mut values = Vec::with_capacity(h.sample_count as usize * n);
        let mut rest = &bytes[HEADER_LEN..];
        for index in 0..h.sample_count as usize {
            let label = u16::from_le_bytes([rest[0], rest[1]]);
            if label as u32 >= h.class_count {
                return Err(Error::LabelOutOfRange {
                    path: path.to_path_buf(),
                    index,
                    label: label as usize,
                    classes: h.class_count as usize,
                });
            }
            labels.push(label);
            let payload = &rest[2..2 + 4 * n];
            for chunk in payload.chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(format(format!("sample {index} has a non-finite value")));
                }
                values.push(v);
            }
            rest = &rest[2 + 4 * n..];
        }
        Ok(Dataset {
            classes: h.class_count as usize,
            channels: h.channels as usize,
            height: h.height as usize,
            width: h.width as usize,
            labels,
            values,
        })
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    files::write_atomic(path, &data.to_bytes()?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&files::read(path)?, path)
}

/// Parses a binary PPM (P6, maxval 255) into CHW values scaled to [0, 1].
/// Returns `(height, width, values)`.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let format = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format("unexpected end of PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(format("not a binary PPM (expected P6)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| format(&format!("invalid {what} in PPM header")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format(&format!("maxval {maxval} unsupported (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format("zero-sized image"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let plane = width * height;
    if raster.len() < 3 * plane {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: (pos + 1 + 3 * plane) as u64,
            found: bytes.len() as u64,
        });
    }
    let mut values = vec![0f32; 3 * plane];
    for (p, rgb) in raster[..3 * plane].chunks_exact(3).enumerate() {
        for (c, &b) in rgb.iter().enumerate() {
            values[c * plane + p] = b as f32 / 255.0;
        }
    }
    Ok((height, width, values))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/*.ppm`; classes are numbered by sorted directory
/// name and every image must share one size.
pub fn load_ppm_dir(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() < 2 {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: format!("need at least 2 class directories, found {}", class_dirs.len()),
        });
    }
    let mut size = None;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for file in sorted_entries(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("ppm") {
                continue;
            }
            let (h, w, v) = parse_ppm(&files::read(&file)?, &file)?;
            if *size.get_or_insert((h, w)) != (h, w) {
                let (eh, ew) = size.unwrap();
                return Err(Error::Format {
                    path: file,
                    msg: format!("image is {w}x{h} but earlier images are {ew}x{eh}"),
                });
            }
            labels.push(label as u16);
            values.extend(v);
        }
    }
    let (h, w) = size.ok_or_else(|| Error::Format {
        path: root.to_path_buf(),
        msg: "no .ppm files found".into(),
    })?;
    Dataset::new(class_dirs.len(), [3, h, w], labels, values)
}

/// Noise-free pattern of class `k`: a sinusoidal grating whose frequency
/// and orientation depend on the class, with a seeded phase per channel.
pub fn synth_template(classes: usize, k: usize, [c, h, w]: [usize; 3], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let phases: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
        .collect();
    let angle = PI * k as f64 / classes as f64;
    let freq = 1.0 + (k % 3) as f64;
    let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
    let mut out = Vec::with_capacity(c * h * w);
    for phase in &phases[k] {
        for y in 0..h {
            for x in 0..w {
                let t = 2.0 * PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                out.push((0.5 + 0.4 * t.sin()) as f32);
            }
        }
    }
    out
}

/// `classes * per_class` samples interleaved by class (sample `i` has label
/// `i % classes`), each its class template plus Gaussian noise.
pub fn synth_generate(
    classes: usize,
    per_class: usize,
    dims: [usize; 3],
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("class count must be at least 2, got {classes}")));
    }
    if classes > u16::MAX as usize + 1 {
        return Err(Error::Config(format!("{classes} classes do not fit a u16 label")));
    }
    if per_class == 0 {
        return Err(Error::Config("per-class sample count must be at least 1".into()));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Domain(format!("noise std {noise_std}: {e}")))?;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|k| synth_template(classes, k, dims, seed))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let total = classes * per_class;
    let mut labels = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total * templates[0].len());
    for i in 0..total {
        let k = i % classes;
        labels.push(k as u16);
        values.extend(
            templates[k]
                .iter()
                .map(|&t| t + noise.sample(&mut rng) as f32),
        );
    }
    Dataset::new(classes, dims, labels, values)
}

/// Mean of every channel over all samples and positions.
pub fn compute_channel_means(data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Domain("channel means of an empty dataset".into()));
    }
    let plane = data.height * data.width;
    let mut sums = vec![0f64; data.channels];
    for i in 0..data.len() {
        for (c, chunk) in data.sample(i).chunks(plane).enumerate() {
            sums[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let count = (data.len() * plane) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}
