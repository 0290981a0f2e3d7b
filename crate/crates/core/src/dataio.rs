//! Image decoding, resizing, augmentation, dataset manifests and stratified
//! splitting.
//!
//! Images are `[H, W, 3]` tensors, row-major RGB, values in `[0, 1]`.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- decoding

fn bmp_err(reason: impl Into<String>) -> Error {
    Error::Decode {
        format: "bmp",
        reason: reason.into(),
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Uncompressed 24-bit BMP. Rows are stored bottom-up (unless the height is
/// negative), BGR, each padded to 4 bytes.
pub fn decode_bmp(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 54 || &bytes[..2] != b"BM" {
        return Err(bmp_err("missing BMP header"));
    }
    let offset = le_u32(bytes, 10) as usize;
    let header_size = le_u32(bytes, 14);
    if header_size < 40 {
        return Err(bmp_err(format!(
            "unsupported info header size {header_size}"
        )));
    }
    let width = le_u32(bytes, 18) as i32;
    let height = le_u32(bytes, 22) as i32;
    let bpp = le_u16(bytes, 28);
    let compression = le_u32(bytes, 30);
    if bpp != 24 || compression != 0 {
        return Err(bmp_err(format!(
            "only uncompressed 24-bit images are supported (bpp {bpp}, compression {compression})"
        )));
    }
    if width <= 0 || height == 0 {
        return Err(bmp_err(format!("bad dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height.unsigned_abs() as usize);
    let stride = (w * 3).div_ceil(4) * 4;
    let needed = offset
        .checked_add(
            stride
                .checked_mul(h)
                .ok_or_else(|| bmp_err("size overflow"))?,
        )
        .ok_or_else(|| bmp_err("size overflow"))?;
    if bytes.len() < needed {
        return Err(bmp_err(format!(
            "truncated: need {needed} bytes, have {}",
            bytes.len()
        )));
    }
    let mut data = vec![0f32; h * w * 3];
    for row in 0..h {
        let src_row = if height > 0 { h - 1 - row } else { row };
        let line = &bytes[offset + src_row * stride..];
        for x in 0..w {
            for c in 0..3 {
                // BGR on disk
                data[(row * w + x) * 3 + c] = line[x * 3 + 2 - c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// 24-bit bottom-up BMP encoding of an `[H, W, 3]` image (values clamped to `[0, 1]`).
pub fn encode_bmp(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image_dims("encode_bmp", image)?;
    let stride = (w * 3).div_ceil(4) * 4;
    let size = 54 + stride * h;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&54u32.to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&[0; 24]);
    let d = image.data();
    for row in (0..h).rev() {
        for x in 0..w {
            for c in (0..3).rev() {
                out.push(to_byte(d[(row * w + x) * 3 + c]));
            }
        }
        out.resize(out.len() + stride - w * 3, 0);
    }
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG (grey, grey+alpha, RGB, RGBA or palette). Alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let err = |e: png::DecodingError| Error::Decode {
        format: "png",
        reason: e.to_string(),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        format: "png",
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        let line = &buf[row * info.line_size..];
        for x in 0..w {
            let px = &line[x * channels..(x + 1) * channels];
            match channels {
                1 | 2 => data.extend([px[0]; 3].map(|v| v as f32 / 255.0)),
                _ => data.extend(px[..3].iter().map(|&v| v as f32 / 255.0)),
            }
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image_dims("encode_png", image)?;
    let err = |e: png::EncodingError| Error::Decode {
        format: "png",
        reason: e.to_string(),
    };
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(err)?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    writer.write_image_data(&bytes).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(out)
}

/// Dispatches on the file signature.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"BM") {
        decode_bmp(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(Error::Decode {
            format: "image",
            reason: "unrecognised signature (expected BMP or PNG)".into(),
        })
    }
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { format, reason } => Error::Decode {
            format,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

fn image_dims(op: &'static str, image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::dim(op, format!("expected [H, W, 3], got {s:?}"))),
    }
}

// ---------------------------------------------------------------- geometry

/// Bilinear sample at fractional pixel-centre coordinates, which must already
/// lie inside `[0, h-1] x [0, w-1]`.
fn bilinear(d: &[f32], w: usize, h: usize, y: f64, x: f64, c: usize) -> f32 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let at = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + c];
    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
    let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
    top + (bottom - top) * fy
}

/// Bilinear resize with half-pixel centres (`src = (dst + 0.5) * in / out - 0.5`,
/// clamped to the border).
pub fn resize_to(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_dims("resize", image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be at least 1x1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let d = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            for c in 0..3 {
                out.push(bilinear(d, w, h, y, x, c));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

/// Square resize to `target x target`.
pub fn resize(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    resize_to(image, target, target)
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = image_dims("flip", image)?;
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&d[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Mirror a pixel-centre coordinate into `[0, n-1]` (edge pixels repeated,
/// as in `d c b a | a b c d | d c b a`).
fn reflect(t: f64, n: usize) -> f64 {
    let period = 2.0 * n as f64;
    let mut u = (t + 0.5).rem_euclid(period);
    if u > n as f64 {
        u = period - u;
    }
    (u - 0.5).clamp(0.0, (n - 1) as f64)
}

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const ZOOM_RANGE: f64 = 0.2;

/// One draw of the training augmentation.
///
/// A zoom factor `z` scales the sampled source window by `1 + z` about the
/// image centre: negative values crop and enlarge, positive values shrink and
/// fill the border by reflection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub zoom_h: f64,
    pub zoom_w: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        zoom_h: 0.0,
        zoom_w: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(FLIP_PROBABILITY);
        let zoom_h = rng.random_range(-ZOOM_RANGE..=ZOOM_RANGE);
        let zoom_w = rng.random_range(-ZOOM_RANGE..=ZOOM_RANGE);
        AugmentParams {
            flip,
            zoom_h,
            zoom_w,
        }
    }

    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = image_dims("augment", image)?;
        let zoomed = if self.zoom_h == 0.0 && self.zoom_w == 0.0 {
            image.clone()
        } else {
            let (sh, sw) = (1.0 + self.zoom_h, 1.0 + self.zoom_w);
            let d = image.data();
            let mut out = Vec::with_capacity(d.len());
            for y in 0..h {
                let sy = reflect(
                    (y as f64 + 0.5 - h as f64 / 2.0) * sh + h as f64 / 2.0 - 0.5,
                    h,
                );
                for x in 0..w {
                    let sx = reflect(
                        (x as f64 + 0.5 - w as f64 / 2.0) * sw + w as f64 / 2.0 - 0.5,
                        w,
                    );
                    for c in 0..3 {
                        out.push(bilinear(d, w, h, sy, sx, c));
                    }
                }
            }
            Tensor::new(vec![h, w, 3], out)?
        };
        if self.flip {
            flip_horizontal(&zoomed)
        } else {
            Ok(zoomed)
        }
    }
}

/// Random horizontal flip and per-axis zoom.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    AugmentParams::sample(rng).apply(image)
}

// ---------------------------------------------------------------- taxonomy

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sipakmed,
    Herlev,
    Custom,
}

impl DatasetKind {
    /// Default held-out fraction per dataset.
    pub fn default_test_fraction(self) -> f64 {
        match self {
            DatasetKind::Herlev => 0.1,
            _ => 0.2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Sipakmed => "sipakmed",
            DatasetKind::Herlev => "herlev",
            DatasetKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sipakmed" => Ok(DatasetKind::Sipakmed),
            "herlev" => Ok(DatasetKind::Herlev),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(Error::arg(format!(
                "unknown dataset kind {other:?} (sipakmed, herlev, custom)"
            ))),
        }
    }
}

/// Fine class → coarse category map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub fine: Vec<String>,
    pub coarse: Vec<String>,
    /// `coarse_of[fine index]`
    pub coarse_of: Vec<usize>,
    /// Extra accepted directory names per fine class (normalised).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<Vec<String>>,
}

/// Lower-cases, strips an `im_` prefix and folds `_`, `-` and spaces to single spaces.
pub fn normalize_class_name(name: &str) -> String {
    let lower = name.trim().to_lowercase();
    let lower = lower.strip_prefix("im_").unwrap_or(&lower);
    lower
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Taxonomy {
    fn build(coarse: &[&str], rows: &[(&str, usize, &[&str])]) -> Self {
        Taxonomy {
            fine: rows.iter().map(|r| r.0.to_string()).collect(),
            coarse: coarse.iter().map(|s| s.to_string()).collect(),
            coarse_of: rows.iter().map(|r| r.1).collect(),
            aliases: rows
                .iter()
                .map(|r| r.2.iter().map(|a| normalize_class_name(a)).collect())
                .collect(),
        }
    }

    pub fn sipakmed() -> Self {
        Self::build(
            &["Normal", "Abnormal", "Benign"],
            &[
                ("Parabasal", 0, &[]),
                ("Superficial-Intermediate", 0, &["superficial intermediate"]),
                ("Dyskeratotic", 1, &[]),
                ("Koilocytotic", 1, &[]),
                ("Metaplastic", 2, &[]),
            ],
        )
    }

    pub fn herlev() -> Self {
        Self::build(
            &["Normal", "Abnormal"],
            &[
                (
                    "superficial squamous",
                    0,
                    &["normal superficiel", "normal superficial", "superficial"],
                ),
                (
                    "intermediate squamous",
                    0,
                    &["normal intermediate", "intermediate"],
                ),
                ("columnar", 0, &["normal columnar", "columnar epithelial"]),
                (
                    "mild dysplasia",
                    1,
                    &[
                        "light dysplastic",
                        "mild dysplastic",
                        "light dysplasia",
                        "mild",
                    ],
                ),
                (
                    "moderate dysplasia",
                    1,
                    &["moderate dysplastic", "moderate"],
                ),
                ("severe dysplasia", 1, &["severe dysplastic", "severe"]),
                ("carcinoma in situ", 1, &["carcinoma", "cis"]),
            ],
        )
    }

    /// Parses `fine,coarse` lines; blank lines and `#` comments are skipped.
    /// Coarse categories are numbered in order of first appearance.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fine = Vec::new();
        let mut coarse: Vec<String> = Vec::new();
        let mut coarse_of = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (f, c) = line.split_once(',').ok_or_else(|| {
                Error::Taxonomy(format!(
                    "line {}: expected `fine,coarse`, got {line:?}",
                    n + 1
                ))
            })?;
            let (f, c) = (f.trim(), c.trim());
            if f.is_empty() || c.is_empty() {
                return Err(Error::Taxonomy(format!("line {}: empty class name", n + 1)));
            }
            if fine
                .iter()
                .any(|x: &String| normalize_class_name(x) == normalize_class_name(f))
            {
                return Err(Error::Taxonomy(format!(
                    "line {}: duplicate fine class {f:?}",
                    n + 1
                )));
            }
            let ci = match coarse.iter().position(|x| x == c) {
                Some(i) => i,
                None => {
                    coarse.push(c.to_string());
                    coarse.len() - 1
                }
            };
            fine.push(f.to_string());
            coarse_of.push(ci);
        }
        if fine.is_empty() {
            return Err(Error::Taxonomy("taxonomy file lists no classes".into()));
        }
        Ok(Taxonomy {
            fine,
            coarse,
            coarse_of,
            aliases: Vec::new(),
        })
    }

    pub fn of(kind: DatasetKind) -> Option<Self> {
        match kind {
            DatasetKind::Sipakmed => Some(Self::sipakmed()),
            DatasetKind::Herlev => Some(Self::herlev()),
            DatasetKind::Custom => None,
        }
    }

    /// Index of the fine class named (or aliased) by a directory name.
    pub fn lookup(&self, dir_name: &str) -> Option<usize> {
        let key = normalize_class_name(dir_name);
        (0..self.fine.len()).find(|&i| {
            normalize_class_name(&self.fine[i]) == key
                || self.aliases.get(i).is_some_and(|a| a.contains(&key))
        })
    }
}

// ---------------------------------------------------------------- manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub fine: usize,
    pub coarse: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub taxonomy: Taxonomy,
    pub samples: Vec<SampleRecord>,
    pub split_seed: Option<u64>,
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("bmp") || e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Scans `<root>/<fine class>/*.bmp|*.png`. `taxonomy` is required for
/// [`DatasetKind::Custom`] and overrides the built-in one otherwise.
pub fn load_manifest(
    root: &Path,
    kind: DatasetKind,
    taxonomy: Option<Taxonomy>,
) -> Result<DatasetManifest> {
    let taxonomy = match taxonomy.or_else(|| Taxonomy::of(kind)) {
        Some(t) => t,
        None => {
            return Err(Error::Taxonomy(
                "custom datasets need a taxonomy file".into(),
            ))
        }
    };
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut samples = Vec::new();
    let mut seen = vec![0usize; taxonomy.fine.len()];
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let fine = taxonomy.lookup(&name).ok_or_else(|| {
            Error::Taxonomy(format!("directory {name:?} is not a {} class", kind.name()))
        })?;
        for file in sorted_entries(&dir)? {
            if file.is_file() && is_image_file(&file) {
                seen[fine] += 1;
                samples.push(SampleRecord {
                    path: file,
                    fine,
                    coarse: taxonomy.coarse_of[fine],
                    split: None,
                });
            }
        }
    }
    let warnings = seen
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == 0)
        .map(|(i, _)| format!("class {:?} has no images", taxonomy.fine[i]))
        .collect();
    Ok(DatasetManifest {
        kind,
        taxonomy,
        samples,
        split_seed: None,
        test_fraction: None,
        warnings,
    })
}

impl DatasetManifest {
    /// Manifest for in-memory data with no backing files.
    pub fn synthetic(kind: DatasetKind, taxonomy: Taxonomy, fine_counts: &[usize]) -> Result<Self> {
        if fine_counts.len() != taxonomy.fine.len() {
            return Err(Error::arg(format!(
                "{} class counts for {} fine classes",
                fine_counts.len(),
                taxonomy.fine.len()
            )));
        }
        let mut samples = Vec::new();
        for (fine, &n) in fine_counts.iter().enumerate() {
            for i in 0..n {
                samples.push(SampleRecord {
                    path: PathBuf::from(format!("{}/{i:05}.bmp", taxonomy.fine[fine])),
                    fine,
                    coarse: taxonomy.coarse_of[fine],
                    split: None,
                });
            }
        }
        Ok(DatasetManifest {
            kind,
            taxonomy,
            samples,
            split_seed: None,
            test_fraction: None,
            warnings: Vec::new(),
        })
    }

    pub fn fine_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.taxonomy.fine.len()];
        for s in &self.samples {
            c[s.fine] += 1;
        }
        c
    }

    pub fn coarse_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.taxonomy.coarse.len()];
        for s in &self.samples {
            c[s.coarse] += 1;
        }
        c
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Some(split))
            .collect()
    }

    /// JSON export: kind, taxonomy, and per-sample path / class names / split / seed.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            path: &'a Path,
            fine_class: &'a str,
            coarse_category: &'a str,
            split: Option<Split>,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            kind: DatasetKind,
            taxonomy: BTreeMap<&'a str, &'a str>,
            split_seed: Option<u64>,
            test_fraction: Option<f64>,
            warnings: &'a [String],
            samples: Vec<Row<'a>>,
        }
        let t = &self.taxonomy;
        let doc = Doc {
            kind: self.kind,
            taxonomy: (0..t.fine.len())
                .map(|i| (t.fine[i].as_str(), t.coarse[t.coarse_of[i]].as_str()))
                .collect(),
            split_seed: self.split_seed,
            test_fraction: self.test_fraction,
            warnings: &self.warnings,
            samples: self
                .samples
                .iter()
                .map(|s| Row {
                    path: &s.path,
                    fine_class: &t.fine[s.fine],
                    coarse_category: &t.coarse[s.coarse],
                    split: s.split,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Number of training samples per class.
///
/// The training total is `floor((1 - test_fraction) * total)`; it is shared
/// out in proportion to class size by largest remainder (ties to the lower
/// class index), then every class is kept to at least one sample on each side.
pub fn stratified_train_counts(class_counts: &[usize], test_fraction: f64) -> Result<Vec<usize>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::Split("cannot split an empty dataset".into()));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 1) {
        return Err(Error::Split(format!(
            "class {c} has a single sample and cannot appear in both splits"
        )));
    }
    // small epsilon so that e.g. 0.9 * 917 = 825.3 is not hurt by representation error
    let train_total = ((1.0 - test_fraction) * total as f64 + 1e-9).floor() as usize;
    let quotas: Vec<f64> = class_counts
        .iter()
        .map(|&n| n as f64 * train_total as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let short = train_total - alloc.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        alloc[c] += 1;
    }
    let present: Vec<usize> = (0..alloc.len()).filter(|&c| class_counts[c] > 0).collect();
    for &c in &present {
        alloc[c] = alloc[c].clamp(1, class_counts[c] - 1);
    }
    // restore the total after clamping, moving the classes furthest from quota
    loop {
        let sum: usize = alloc.iter().sum();
        if sum == train_total {
            break;
        }
        let pick = if sum > train_total {
            present
                .iter()
                .copied()
                .filter(|&c| alloc[c] > 1)
                .max_by(|&a, &b| {
                    (alloc[a] as f64 - quotas[a])
                        .total_cmp(&(alloc[b] as f64 - quotas[b]))
                        .then(b.cmp(&a))
                })
        } else {
            present
                .iter()
                .copied()
                .filter(|&c| alloc[c] + 1 < class_counts[c])
                .max_by(|&a, &b| {
                    (quotas[a] - alloc[a] as f64)
                        .total_cmp(&(quotas[b] - alloc[b] as f64))
                        .then(b.cmp(&a))
                })
        };
        match pick {
            Some(c) if sum > train_total => alloc[c] -= 1,
            Some(c) => alloc[c] += 1,
            None => {
                return Err(Error::Split(format!(
                    "cannot keep every class in both splits with {train_total} of {total} samples for training"
                )))
            }
        }
    }
    Ok(alloc)
}

/// Stratified (by fine class) train/test assignment, deterministic per seed.
pub fn split(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let counts = manifest.fine_counts();
    let train = stratified_train_counts(&counts, test_fraction)?;
    let mut out = manifest.clone();
    for (class, &n_train) in train.iter().enumerate() {
        let mut members: Vec<usize> = (0..out.samples.len())
            .filter(|&i| out.samples[i].fine == class)
            .collect();
        members.shuffle(&mut rng::stream(seed, Purpose::Split, &[class as u64]));
        for (rank, &i) in members.iter().enumerate() {
            out.samples[i].split = Some(if rank < n_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    out.split_seed = Some(seed);
    out.test_fraction = Some(test_fraction);
    Ok(out)
}

/// Stratified split of plain labels (used to carve validation data from a
/// training set). Returns `(train, held_out)` positions into `labels`.
pub fn stratified_indices(
    labels: &[usize],
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; k];
    for &l in labels {
        counts[l] += 1;
    }
    let train = stratified_train_counts(&counts, held_out_fraction)?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (class, &n_train) in train.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng::stream(
            seed,
            Purpose::Split,
            &[u64::MAX, class as u64],
        ));
        a.extend_from_slice(&members[..n_train]);
        b.extend_from_slice(&members[n_train..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

// ---------------------------------------------------------------- sources

/// Random access to labelled images already at model resolution.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    fn image(&self, index: usize) -> Result<Tensor<f32>>;
}

#[derive(Clone, Debug, Default)]
pub struct InMemorySource {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.images[index].clone())
    }
}

/// Decodes and resizes files on demand. Labels are coarse categories.
#[derive(Clone, Debug)]
pub struct FileSource {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<usize>,
    pub size: usize,
}

impl FileSource {
    pub fn from_manifest(manifest: &DatasetManifest, split: Option<Split>, size: usize) -> Self {
        let picked: Vec<&SampleRecord> = manifest
            .samples
            .iter()
            .filter(|s| split.is_none() || s.split == split)
            .collect();
        FileSource {
            paths: picked.iter().map(|s| s.path.clone()).collect(),
            labels: picked.iter().map(|s| s.coarse).collect(),
            size,
        }
    }
}

impl SampleSource for FileSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        resize(&load_image(&self.paths[index])?, self.size)
    }
}

/// A view of selected positions of another source.
pub struct Subset<'a> {
    pub inner: &'a dyn SampleSource,
    pub indices: Vec<usize>,
}

impl SampleSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> usize {
        self.inner.label(self.indices[index])
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        self.inner.image(self.indices[index])
    }
}

/// Loads `indices` of `source` (augmenting each with its own
/// `(seed, epoch, index)` stream when `augment_epoch` is set) and stacks
/// them into `[B, S, S, 3]`. Runs in parallel; the result does not depend on
/// the thread count.
pub fn assemble_batch(
    source: &dyn SampleSource,
    indices: &[usize],
    augment_epoch: Option<(u64, u64)>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    use rayon::prelude::*;
    let images = indices
        .par_iter()
        .map(|&i| {
            let img = source.image(i)?;
            match augment_epoch {
                Some((seed, epoch)) => augment(
                    &img,
                    &mut rng::stream(seed, Purpose::Augment, &[epoch, i as u64]),
                ),
                None => Ok(img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| source.label(i)).collect();
    Ok((Tensor::stack(&images)?, labels))
}

// ---------------------------------------------------------------- synthetic data

/// Blob colours per class; class `k` uses entry `k % len`.
const BLOB_COLOURS: [[f32; 3]; 6] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.25, 0.9],
    [0.15, 0.8, 0.2],
    [0.9, 0.85, 0.1],
    [0.7, 0.2, 0.8],
    [0.1, 0.8, 0.8],
];

/// One `size x size` image: grey noisy background with a soft disc in the
/// class colour at a random position and radius.
pub fn synthetic_blob<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Tensor<f32> {
    let colour = BLOB_COLOURS[class % BLOB_COLOURS.len()];
    let s = size as f32;
    let radius = rng.random_range(0.2 * s..0.35 * s);
    let cy = rng.random_range(radius..s - radius);
    let cx = rng.random_range(radius..s - radius);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2)).sqrt();
            let inside = (radius + 0.5 - d).clamp(0.0, 1.0);
            for &col in &colour {
                let bg = 0.45 + rng.random_range(-0.08f32..0.08);
                data.push((bg + (col - bg) * inside).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("shape matches data")
}

/// `per_class` blobs for each of `classes` classes, interleaved by class.
pub fn synthetic_blobs(per_class: usize, classes: usize, size: usize, seed: u64) -> InMemorySource {
    let mut out = InMemorySource::default();
    for i in 0..per_class {
        for c in 0..classes {
            let mut r = rng::stream(seed, Purpose::Synthetic, &[c as u64, i as u64]);
            out.images.push(synthetic_blob(c, size, &mut r));
            out.labels.push(c);
        }
    }
    out
}

/// Writes a blob dataset as `<root>/class_<k>/<i>.bmp` plus `<root>/taxonomy.txt`
/// (each class its own category), ready for `load_manifest(.., Custom, ..)`.
pub fn write_synthetic_dataset(
    root: &Path,
    per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    let data = synthetic_blobs(per_class, classes, size, seed);
    let mut taxonomy = String::new();
    for c in 0..classes {
        let dir = root.join(format!("class_{c}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        taxonomy.push_str(&format!("class_{c},class_{c}\n"));
    }
    for (n, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let path = root
            .join(format!("class_{label}"))
            .join(format!("{:05}.bmp", n / classes));
        std::fs::write(&path, encode_bmp(img)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("taxonomy.txt");
    std::fs::write(&path, taxonomy).map_err(|e| Error::io(&path, e))
}
