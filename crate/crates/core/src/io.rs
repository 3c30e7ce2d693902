//! Weight container, seeded random weights and PPM images.
//!
//! Weights file layout:
//!
//! ```text
//! "VPW1" | manifest length: u32 LE | manifest (JSON) | payload
//! ```
//!
//! The payload is raw little-endian f32. Manifest entry offsets are
//! relative to the start of the payload. Files written by
//! [`encode_weights`] list entries in canonical order with contiguous
//! offsets, so decoding and re-encoding such a file reproduces it byte for
//! byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Normalization};

pub const MAGIC: &[u8; 4] = b"VPW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub entries: Vec<ManifestEntry>,
}

fn element_count(shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
}

/// Serialises weights into the container format.
pub fn encode_weights(cfg: &ModelConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    cfg.validate()?;
    weights.validate(cfg)?;
    let tensors = weights.named_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        let length = 4 * data.len() as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = WeightsManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        normalization: weights.normalization,
        entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(json.len())
        .map_err(|_| Error::Format(format!("manifest of {} bytes too large", json.len())))?;

    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its manifest and payload after checking the
/// header and every entry's bounds.
pub fn read_manifest(bytes: &[u8]) -> Result<(WeightsManifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file of {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let manifest_end = 8usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "manifest length {manifest_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let manifest: WeightsManifest = serde_json::from_slice(&bytes[8..manifest_end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[manifest_end..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let expected = element_count(&e.shape)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Bounds {
                name: e.name.clone(),
                detail: format!("shape {:?} overflows", e.shape),
            })?;
        if e.length != expected {
            return Err(Error::Bounds {
                name: e.name.clone(),
                detail: format!("length {} bytes, shape {:?} needs {expected}", e.length, e.shape),
            });
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
        let Some(end) = end else {
            return Err(Error::Bounds {
                name: e.name.clone(),
                detail: format!(
                    "bytes {}..{} past payload end {}",
                    e.offset,
                    e.offset.saturating_add(e.length),
                    payload.len()
                ),
            });
        };
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Bounds {
                name: w[1].2.to_string(),
                detail: format!("overlaps `{}`", w[0].2),
            });
        }
    }
    Ok((manifest, payload))
}

/// Parses a container, checking every tensor against the shapes its
/// config demands. Nothing is returned unless the whole file is valid.
pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let cfg = manifest.config.clone();
    cfg.validate()?;

    let mut by_name: HashMap<&str, &ManifestEntry> = HashMap::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let expected = ModelWeights::expected_shapes(&cfg);
    for (name, _) in &expected {
        if !by_name.contains_key(name.as_str()) {
            return Err(Error::MissingTensor(name.clone()));
        }
    }
    if let Some(extra) = manifest
        .entries
        .iter()
        .find(|e| !expected.iter().any(|(n, _)| n == &e.name))
    {
        return Err(Error::UnexpectedTensor(extra.name.clone()));
    }

    let weights = ModelWeights::from_named(&cfg, manifest.normalization, |name, shape| {
        let e = by_name[name];
        if e.shape != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    })?;
    Ok((cfg, weights))
}

pub fn save_weights(path: impl AsRef<Path>, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(cfg, weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Deterministic weights for `(cfg, seed)`.
///
/// Projection matrices are drawn from `N(0, 1/fan_in)`, layer norms start
/// at identity, and biases, class token and position table from
/// `N(0, 0.02^2)`.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0f32, 0.02).unwrap();
    ModelWeights::from_named(cfg, Normalization::default(), |name, shape| {
        let n: usize = shape.iter().product();
        let values = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") {
            vec![0.0; n]
        } else if shape.len() == 2 && name != "pos_embed" {
            let std = 1.0 / (shape[0] as f32).sqrt();
            let dist = Normal::new(0.0f32, std).unwrap();
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else {
            (0..n).map(|_| small.sample(&mut rng)).collect()
        };
        Ok(values)
    })
    .expect("generated tensors match their shapes")
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(ImageRGB {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        ImageRGB {
            width,
            height,
            pixels,
        }
    }

    /// Uniformly random pixels.
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..size * size * 3).map(|_| rng.gen()).collect();
        ImageRGB {
            width: size,
            height: size,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resize; returns a copy when the size already matches.
    pub fn resize_nearest(&self, width: usize, height: usize) -> ImageRGB {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = ImageRGB::filled(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.set_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Image(format!("missing {what} in PPM header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Image(format!("{what} out of range in PPM header")))
    }
}

/// Parses a binary (P6) PPM.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Image(format!("expected P6 magic, found {got:?}")));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Image(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("header not terminated by whitespace".into()));
    }
    let data = &bytes[r.pos + 1..];
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Image(format!("{width}x{height} image too large")))?;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    if data.len() < samples * bytes_per_sample {
        return Err(Error::Image(format!(
            "pixel data truncated: {} of {} bytes",
            data.len(),
            samples * bytes_per_sample
        )));
    }
    let scale = |v: usize| -> u8 {
        if maxval == 255 {
            v as u8
        } else {
            ((v * 255 + maxval / 2) / maxval) as u8
        }
    };
    let pixels = if bytes_per_sample == 1 {
        data[..samples].iter().map(|&v| scale(v as usize)).collect()
    } else {
        data[..samples * 2]
            .chunks_exact(2)
            .map(|c| scale(u16::from_be_bytes([c[0], c[1]]) as usize))
            .collect()
    };
    ImageRGB::new(width, height, pixels)
}

pub fn encode_ppm(image: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn save_ppm(path: impl AsRef<Path>, image: &ImageRGB) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

/// Reads a PPM and resizes it (nearest neighbour) to `target_size` square.
pub fn load_image(path: impl AsRef<Path>, target_size: usize) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = parse_ppm(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(img.resize_nearest(target_size, target_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::IndicatorKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            stride: 8,
            embed_dim: 16,
            qkv_dim: 16,
            heads: 2,
            depth: 3,
            mlp_ratio: 4.0,
            num_classes: 10,
            prune_block_indices: vec![2],
            keep_rate: 0.5,
            indicator: IndicatorKind::Medad,
            fusion_enabled: true,
            temperature: 0.25,
            layer_norm_eps: 1e-6,
        }
    }

    #[test]
    fn minimal_ppm() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(0u8..12);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixel(1, 1), [9, 10, 11]);
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn ppm_with_comments_and_low_maxval() {
        let mut bytes = b"P6 # a comment\n1 # w\n 1\n15\n".to_vec();
        bytes.extend([15u8, 0, 5]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 0, 85]);
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(parse_ppm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Image(_))));
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(parse_ppm(b"P6\n2\n").is_err());
        assert!(parse_ppm(b"").is_err());
    }

    #[test]
    fn resize_identity_and_nearest() {
        let img = ImageRGB::random(8, 3);
        assert_eq!(img.resize_nearest(8, 8), img);
        let up = img.resize_nearest(16, 16);
        assert_eq!(up.pixel(3, 5), img.pixel(1, 2));
        let down = img.resize_nearest(4, 4);
        assert_eq!(down.pixel(1, 3), img.pixel(2, 6));
    }

    #[test]
    fn random_weights_deterministic() {
        let cfg = tiny();
        assert_eq!(random_weights(&cfg, 11), random_weights(&cfg, 11));
        assert_ne!(random_weights(&cfg, 11), random_weights(&cfg, 12));
    }

    #[test]
    fn weights_round_trip() {
        let cfg = tiny();
        let w = random_weights(&cfg, 9);
        let bytes = encode_weights(&cfg, &w).unwrap();
        let (cfg2, w2) = decode_weights(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(w2, w);
        assert_eq!(encode_weights(&cfg2, &w2).unwrap(), bytes);
    }

    fn rewrite_manifest(bytes: &[u8], f: impl FnOnce(&mut WeightsManifest)) -> Vec<u8> {
        let (mut m, payload) = read_manifest(bytes).unwrap();
        f(&mut m);
        let json = serde_json::to_vec(&m).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn missing_tensor_named() {
        let cfg = tiny();
        let bytes = encode_weights(&cfg, &random_weights(&cfg, 1)).unwrap();
        let broken = rewrite_manifest(&bytes, |m| m.entries.retain(|e| e.name != "block3.W_Q"));
        match decode_weights(&broken) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "block3.W_Q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = tiny();
        let bytes = encode_weights(&cfg, &random_weights(&cfg, 1)).unwrap();
        let err = decode_weights(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Bounds { name, .. } => assert_eq!(name, "head.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_shape() {
        let cfg = tiny();
        let bytes = encode_weights(&cfg, &random_weights(&cfg, 1)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::Format(_))));

        let reshaped = rewrite_manifest(&bytes, |m| {
            let e = m.entries.iter_mut().find(|e| e.name == "block1.W_K").unwrap();
            e.shape = vec![256, 1];
        });
        match decode_weights(&reshaped) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "block1.W_K"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_entries_rejected() {
        let cfg = tiny();
        let bytes = encode_weights(&cfg, &random_weights(&cfg, 1)).unwrap();
        let overlapped = rewrite_manifest(&bytes, |m| m.entries[1].offset = 0);
        assert!(matches!(decode_weights(&overlapped), Err(Error::Bounds { .. })));
    }

    #[test]
    fn permuted_manifest_loads_and_canonicalises() {
        let cfg = tiny();
        let w = random_weights(&cfg, 2);
        let bytes = encode_weights(&cfg, &w).unwrap();
        let permuted = rewrite_manifest(&bytes, |m| m.entries.reverse());
        let (c, w2) = decode_weights(&permuted).unwrap();
        assert_eq!(w2, w);
        assert_eq!(encode_weights(&c, &w2).unwrap(), bytes);
    }
}
