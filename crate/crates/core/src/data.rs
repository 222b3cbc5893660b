//! Image ingestion, the synthetic dataset generator, and dataset splitting.
//!
//! Binary PPM (P6, 8-bit, maxval 255) is the bit-exact interchange format;
//! pixels normalize as `x/255` into `[0, 1]`, channel order RGB, planar CHW
//! in memory. A dataset directory is a flat directory of `.ppm` files whose
//! lexicographic order defines the sample order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ppm parse error at byte {offset}: {detail}")]
    PpmParse { offset: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("{0}")]
    InvalidInput(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Deterministic recipe for a synthetic dataset: overlapping anti-aliased
/// rectangles, ellipses and gradient patches in random colors (3 to 8 shapes
/// per image over a random background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 512,
            height: 32,
            width: 32,
            seed: 7,
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone)]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
    Derived(&'static str),
}

/// Immutable collection of same-sized `[0,1]` RGB images (planar CHW).
#[derive(Clone)]
pub struct ImageDataset {
    height: usize,
    width: usize,
    samples: Vec<Vec<f32>>,
    pub provenance: Provenance,
}

impl ImageDataset {
    pub fn new(
        height: usize,
        width: usize,
        samples: Vec<Vec<f32>>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        for (i, s) in samples.iter().enumerate() {
            if s.len() != 3 * height * width {
                return Err(DataError::InvalidInput(format!(
                    "sample {i} has {} values, expected {}",
                    s.len(),
                    3 * height * width
                )));
            }
        }
        Ok(ImageDataset {
            height,
            width,
            samples,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Raw planar CHW values of one sample.
    pub fn sample(&self, i: usize) -> &[f32] {
        &self.samples[i]
    }

    /// One sample as a `[1, 3, H, W]` tensor.
    pub fn sample_tensor(&self, i: usize) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.samples[i].clone())
            .expect("sample length is validated")
    }

    /// A batch of samples as one `[N, 3, H, W]` tensor.
    pub fn batch_tensor(&self, idxs: &[usize]) -> Tensor<f32> {
        let stride = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(idxs.len() * stride);
        for &i in idxs {
            data.extend_from_slice(&self.samples[i]);
        }
        Tensor::from_vec(&[idxs.len(), 3, self.height, self.width], data)
            .expect("batch assembly preserves lengths")
    }

    /// Per-pixel mean image over the dataset, as raw planar CHW values.
    pub fn mean_image(&self) -> Vec<f32> {
        let stride = 3 * self.height * self.width;
        let mut acc = vec![0.0f64; stride];
        for s in &self.samples {
            for (a, &v) in acc.iter_mut().zip(s) {
                *a += v as f64;
            }
        }
        let n = self.samples.len().max(1) as f64;
        acc.into_iter().map(|v| (v / n) as f32).collect()
    }
}

/// Loads a binary P6 PPM (8-bit, maxval 255) as a `[3, H, W]` tensor in `[0,1]`.
pub fn load_ppm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (h, w, data) = parse_ppm(&bytes)?;
    Ok(Tensor::from_vec(&[3, h, w], data).expect("parser sizes the buffer"))
}

fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), DataError> {
    let fail = |offset: usize, detail: &str| DataError::PpmParse {
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(fail(0, "not a binary PPM (expected magic 'P6')"));
    }
    let mut pos = 2usize;

    let next_token = |pos: &mut usize| -> Result<(usize, usize), DataError> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(DataError::PpmParse {
                offset: start,
                detail: "expected a decimal value in the header".into(),
            });
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .map(|v| (start, v))
            .ok_or(DataError::PpmParse {
                offset: start,
                detail: "header value does not fit in usize".into(),
            })
    };

    let (_, w) = next_token(&mut pos)?;
    let (_, h) = next_token(&mut pos)?;
    let (maxval_at, maxval) = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(fail(maxval_at, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(fail(2, "image dimensions must be positive"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected single whitespace before pixel payload"));
    }
    pos += 1;
    let want = 3 * w * h;
    if bytes.len() - pos < want {
        return Err(fail(
            bytes.len(),
            &format!("truncated payload: {} of {want} bytes present", bytes.len() - pos),
        ));
    }
    // interleaved RGB rows -> planar CHW
    let mut data = vec![0.0f32; want];
    let plane = w * h;
    for (i, px) in bytes[pos..pos + want].chunks_exact(3).enumerate() {
        data[i] = px[0] as f32 / 255.0;
        data[plane + i] = px[1] as f32 / 255.0;
        data[2 * plane + i] = px[2] as f32 / 255.0;
    }
    Ok((h, w, data))
}

/// Writes a `[3, H, W]` tensor in `[0,1]` as a binary P6 PPM.
pub fn save_ppm(tensor: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let shape = tensor.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::InvalidInput(format!(
            "save_ppm expects a [3, H, W] tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = tensor.to_vec();
    let plane = w * h;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Generates the deterministic synthetic dataset described by `spec`.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<ImageDataset, DataError> {
    if spec.height == 0 || spec.width == 0 || spec.height % 8 != 0 || spec.width % 8 != 0 {
        return Err(DataError::InvalidSpec(format!(
            "extent {}x{} must be positive and divisible by 8",
            spec.height, spec.width
        )));
    }
    let base = Rng::from_seed(spec.seed);
    let samples: Vec<Vec<f32>> = (0..spec.count)
        .map(|i| synth_image(spec.height, spec.width, &mut base.derive(&[i as u64])))
        .collect();
    ImageDataset::new(
        spec.height,
        spec.width,
        samples,
        Provenance::Synthetic(spec.clone()),
    )
}

fn rand_color(rng: &mut Rng) -> [f32; 3] {
    [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
}

fn synth_image(h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let plane = h * w;
    let mut img = vec![0.0f32; 3 * plane];

    // background: flat color or a two-color linear gradient
    let bg_a = rand_color(rng);
    if rng.uniform() < 0.5 {
        for c in 0..3 {
            img[c * plane..(c + 1) * plane].fill(bg_a[c]);
        }
    } else {
        let bg_b = rand_color(rng);
        let horizontal = rng.uniform() < 0.5;
        for y in 0..h {
            for x in 0..w {
                let t = if horizontal {
                    x as f32 / (w - 1).max(1) as f32
                } else {
                    y as f32 / (h - 1).max(1) as f32
                };
                for c in 0..3 {
                    img[c * plane + y * w + x] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
                }
            }
        }
    }

    let shapes = 3 + rng.uniform_usize(0, 6); // 3..=8
    for _ in 0..shapes {
        let color_a = rand_color(rng);
        let kind = rng.uniform_usize(0, 3);
        let cx = rng.uniform() as f32 * w as f32;
        let cy = rng.uniform() as f32 * h as f32;
        let rx = (0.08 + 0.32 * rng.uniform()) as f32 * w as f32;
        let ry = (0.08 + 0.32 * rng.uniform()) as f32 * h as f32;
        let color_b = rand_color(rng); // gradient end color (kind 2 only)
        let gradient_horizontal = rng.uniform() < 0.5;

        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                // signed distance in pixels, negative inside
                let d = match kind {
                    0 => {
                        let dx = (fx - cx).abs() - rx;
                        let dy = (fy - cy).abs() - ry;
                        dx.max(dy)
                    }
                    _ => {
                        let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                        (e.sqrt() - 1.0) * rx.min(ry)
                    }
                };
                // one-pixel anti-aliasing feather
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let color = if kind == 2 {
                    let t = if gradient_horizontal {
                        ((fx - (cx - rx)) / (2.0 * rx)).clamp(0.0, 1.0)
                    } else {
                        ((fy - (cy - ry)) / (2.0 * ry)).clamp(0.0, 1.0)
                    };
                    [
                        color_a[0] * (1.0 - t) + color_b[0] * t,
                        color_a[1] * (1.0 - t) + color_b[1] * t,
                        color_a[2] * (1.0 - t) + color_b[2] * t,
                    ]
                } else {
                    color_a
                };
                for c in 0..3 {
                    let px = &mut img[c * plane + y * w + x];
                    *px = (alpha * color[c] + (1.0 - alpha) * *px).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Splits a dataset into disjoint, exhaustive parts by seeded shuffling.
/// All but the last part get `floor(fraction * n)` samples; the last takes
/// the remainder.
pub fn split(
    dataset: &ImageDataset,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<ImageDataset>, DataError> {
    if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) {
        return Err(DataError::BadFractions(
            "fractions must be positive and non-empty".into(),
        ));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(format!("fractions sum to {sum}, not 1")));
    }
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    Rng::from_seed(seed).shuffle(&mut indices);

    let mut sizes: Vec<usize> = fractions
        .iter()
        .take(fractions.len() - 1)
        .map(|&f| (f * n as f64).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n - used);

    let mut parts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for size in sizes {
        let samples: Vec<Vec<f32>> = indices[offset..offset + size]
            .iter()
            .map(|&i| dataset.samples[i].clone())
            .collect();
        offset += size;
        parts.push(ImageDataset {
            height: dataset.height,
            width: dataset.width,
            samples,
            provenance: Provenance::Derived("split"),
        });
    }
    Ok(parts)
}

/// Loads every `.ppm` in a directory, in lexicographic filename order.
pub fn load_dir(dir: &Path) -> Result<ImageDataset, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::InvalidInput(format!(
            "no .ppm files found in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(paths.len());
    let mut dims: Option<(usize, usize)> = None;
    for p in &paths {
        let bytes = fs::read(p).map_err(io_err(p))?;
        let (h, w, data) = parse_ppm(&bytes)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(DataError::InvalidInput(format!(
                    "{} is {h}x{w} but the dataset is {}x{}",
                    p.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        samples.push(data);
    }
    let (h, w) = dims.expect("at least one file");
    ImageDataset::new(h, w, samples, Provenance::Directory(dir.to_path_buf()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_all_black_ppm() {
        let bytes = b"P6\n2 2\n255\n\0\0\0\0\0\0\0\0\0\0\0\0";
        let (h, w, data) = parse_ppm(bytes).unwrap();
        assert_eq!((h, w), (2, 2));
        assert!(data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parse_handles_comments_and_normalization() {
        let mut bytes = b"P6 # a comment\n# another\n 2 1 255 ".to_vec();
        bytes.extend_from_slice(&[128, 0, 255, 64, 64, 64]);
        let (h, w, data) = parse_ppm(&bytes).unwrap();
        assert_eq!((h, w), (1, 2));
        // pixels (128,0,255) and (64,64,64); planes are R=[128,64] G=[0,64] B=[255,64]
        assert!((data[0] - 128.0 / 255.0).abs() < 1e-7);
        assert!((data[0] - 0.50196).abs() < 1e-4);
        assert_eq!(data[2], 0.0);
        assert_eq!(data[4], 1.0);
    }

    #[test]
    fn parse_rejects_bad_maxval_with_offset() {
        let bytes = b"P6\n2 2\n65535\n";
        let err = parse_ppm(bytes).unwrap_err();
        match err {
            DataError::PpmParse { offset, .. } => assert_eq!(offset, 7),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_truncated_payload() {
        let bytes = b"P6\n2 2\n255\nabc";
        let err = parse_ppm(bytes).unwrap_err();
        assert!(matches!(err, DataError::PpmParse { .. }), "{err:?}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 1,
            height: 8,
            width: 8,
            seed: 3,
        };
        let ds = synth_dataset(&spec).unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        save_ppm(&to_chw(&ds, 0), &p1).unwrap();
        let loaded = load_ppm(&p1).unwrap();
        save_ppm(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        // quantization-aware value round trip
        let orig = to_chw(&ds, 0).to_vec();
        let got = loaded.to_vec();
        for (a, b) in orig.iter().zip(&got) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    fn to_chw(ds: &ImageDataset, i: usize) -> Tensor<f32> {
        Tensor::from_vec(&[3, ds.height(), ds.width()], ds.sample(i).to_vec()).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let spec = SyntheticSpec {
            count: 16,
            height: 32,
            width: 32,
            seed: 11,
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.sample(i), b.sample(i));
            assert!(a.sample(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synth_count_zero_is_empty() {
        let ds = synth_dataset(&SyntheticSpec {
            count: 0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn synth_images_have_positive_variance_and_multiple_colors() {
        let ds = synth_dataset(&SyntheticSpec {
            count: 100,
            height: 32,
            width: 32,
            seed: 5,
        })
        .unwrap();
        for i in 0..ds.len() {
            let s = ds.sample(i);
            let mean: f64 = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
            let var: f64 =
                s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s.len() as f64;
            assert!(var > 0.0, "image {i} is constant");

            let plane = 32 * 32;
            let mut colors = std::collections::HashSet::new();
            for p in 0..plane {
                colors.insert((
                    s[p].to_bits(),
                    s[plane + p].to_bits(),
                    s[2 * plane + p].to_bits(),
                ));
                if colors.len() >= 2 {
                    break;
                }
            }
            assert!(colors.len() >= 2, "image {i} has a single color");
        }
    }

    #[test]
    fn synth_rejects_bad_dims() {
        assert!(synth_dataset(&SyntheticSpec {
            height: 30,
            ..SyntheticSpec::default()
        })
        .is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synth_dataset(&SyntheticSpec {
            count: 100,
            height: 8,
            width: 8,
            seed: 1,
        })
        .unwrap();
        let parts = split(&ds, &[0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 10);
        assert_eq!(parts[2].len(), 10);

        // union reproduces the original multiset of samples
        let mut all: Vec<Vec<u32>> = Vec::new();
        for p in &parts {
            for i in 0..p.len() {
                all.push(p.sample(i).iter().map(|v| v.to_bits()).collect());
            }
        }
        let mut orig: Vec<Vec<u32>> = (0..ds.len())
            .map(|i| ds.sample(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_desk_default_sizes() {
        let ds = synth_dataset(&SyntheticSpec::default()).unwrap();
        let parts = split(&ds, &[0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(
            (parts[0].len(), parts[1].len(), parts[2].len()),
            (409, 51, 52)
        );
    }

    #[test]
    fn split_is_seed_deterministic_and_validates() {
        let ds = synth_dataset(&SyntheticSpec {
            count: 20,
            height: 8,
            width: 8,
            seed: 2,
        })
        .unwrap();
        let a = split(&ds, &[0.5, 0.5], 9).unwrap();
        let b = split(&ds, &[0.5, 0.5], 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for i in 0..x.len() {
                assert_eq!(x.sample(i), y.sample(i));
            }
        }
        assert!(split(&ds, &[0.5, 0.6], 9).is_err());
        assert!(split(&ds, &[1.0, -0.1, 0.1], 9).is_err());
        assert!(split(&ds, &[], 9).is_err());
    }
}
