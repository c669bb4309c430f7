//! Labeled frames, the JSONL manifest, augmentation and k-fold splitting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::LightClass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Midline endpoints in normalized image coordinates. `(x1, y1)` is the
/// start point, the one nearer the bottom of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Endpoints {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("endpoint coordinates {a:?} outside [0, 1]")));
        }
        if self.y1 < self.y2 {
            return Err(Error::invalid(format!(
                "start point must be the lower one (y1 {} < y2 {})",
                self.y1, self.y2
            )));
        }
        Ok(())
    }
}

/// One training or evaluation image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    /// `(3, H, W)` RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class: LightClass,
    /// `None` when the frame shows no crossing; its regression loss is masked.
    pub endpoints: Option<Endpoints>,
    pub obstructed: bool,
}

impl LabeledFrame {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub class: LightClass,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// `false` marks a frame without a visible crossing.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub crossing: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub obstructed: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl ManifestRecord {
    pub fn endpoints(&self) -> Endpoints {
        Endpoints::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Parses manifest text, one JSON object per non-blank line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len();
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Record {
            index,
            message: format!("line {}: {e}", line_no + 1),
        })?;
        rec.endpoints().validate().map_err(|e| Error::Record {
            index,
            message: format!("line {}: {e}", line_no + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
        s.push('\n');
    }
    s
}

/// Loads an image file as a `(3, H, W)` tensor, bilinearly resized when
/// `size = Some((height, width))` differs from the file.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Bilinear resize of a `(3, H, W)` tensor.
pub fn resize_image(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let d = image.data();
    let src = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| d[(c * h + y as usize) * w + x as usize];
        image::Rgb([px(0), px(1), px(2)])
    });
    let out = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    let mut data = vec![0f32; 3 * height * width];
    for (x, y, px) in out.enumerate_pixels() {
        for c in 0..3 {
            data[(c * height + y as usize) * width + x as usize] = px[c];
        }
    }
    Tensor::new([3, height, width], data)
}

/// Writes a `(3, H, W)` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every record of a manifest, resolving image paths against the
/// manifest's directory.
pub fn load_frames(manifest: &Path, size: Option<(usize, usize)>) -> Result<Vec<LabeledFrame>> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    records
        .iter()
        .map(|r| {
            let path = resolve(&base, &r.path);
            let image = load_image(&path, size)?;
            Ok(LabeledFrame {
                image,
                class: r.class,
                endpoints: r.crossing.then(|| r.endpoints()),
                obstructed: r.obstructed,
            })
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes frames as PNGs under `dir/images` plus `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, frames: &[LabeledFrame]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        save_image(&f.image, &dir.join(&rel))?;
        let e = f.endpoints.unwrap_or(Endpoints::new(0.5, 1.0, 0.5, 0.0));
        records.push(ManifestRecord {
            path: rel,
            class: f.class,
            x1: e.x1,
            y1: e.y1,
            x2: e.x2,
            y2: e.y2,
            crossing: f.endpoints.is_some(),
            obstructed: f.obstructed,
        });
    }
    let path = dir.join("manifest.jsonl");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(manifest_to_string(&records).as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Crop window and flip used to augment one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
}

impl AugmentConfig {
    /// Draws a uniform crop offset and a fair coin for the flip.
    pub fn sample<R: Rng + ?Sized>(&self, frame: &LabeledFrame, rng: &mut R) -> Result<AugmentParams> {
        let (h, w) = (frame.height(), frame.width());
        if self.crop_height > h || self.crop_width > w {
            return Err(Error::invalid(format!(
                "crop {}x{} larger than image {h}x{w}",
                self.crop_height, self.crop_width
            )));
        }
        Ok(AugmentParams {
            offset_y: rng.gen_range(0..=h - self.crop_height),
            offset_x: rng.gen_range(0..=w - self.crop_width),
            flip: self.flip && rng.gen_bool(0.5),
        })
    }
}

/// Random crop plus optional horizontal flip.
pub fn augment<R: Rng + ?Sized>(frame: &LabeledFrame, cfg: &AugmentConfig, rng: &mut R) -> Result<LabeledFrame> {
    let p = cfg.sample(frame, rng)?;
    apply_augment(frame, cfg.crop_height, cfg.crop_width, p)
}

/// Crops `(crop_h, crop_w)` at the given offset, then mirrors when `flip`.
/// Endpoints move with the crop, are renormalized by the crop size and
/// clamped to `[0, 1]`; a flip maps `x → 1 − x` and keeps start and end.
pub fn apply_augment(frame: &LabeledFrame, crop_h: usize, crop_w: usize, p: AugmentParams) -> Result<LabeledFrame> {
    let (h, w) = (frame.height(), frame.width());
    if crop_h == 0 || crop_w == 0 || p.offset_y + crop_h > h || p.offset_x + crop_w > w {
        return Err(Error::invalid(format!(
            "crop {crop_h}x{crop_w} at ({}, {}) does not fit image {h}x{w}",
            p.offset_y, p.offset_x
        )));
    }
    let src = frame.image.data();
    let mut data = Vec::with_capacity(3 * crop_h * crop_w);
    for c in 0..3 {
        for y in 0..crop_h {
            let row = &src[(c * h + p.offset_y + y) * w + p.offset_x..][..crop_w];
            if p.flip {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    let map = |x: f64, y: f64| {
        let nx = ((x * w as f64 - p.offset_x as f64) / crop_w as f64).clamp(0.0, 1.0);
        let ny = ((y * h as f64 - p.offset_y as f64) / crop_h as f64).clamp(0.0, 1.0);
        (if p.flip { 1.0 - nx } else { nx }, ny)
    };
    let endpoints = frame.endpoints.map(|e| {
        let (x1, y1) = map(e.x1, e.y1);
        let (x2, y2) = map(e.x2, e.y2);
        Endpoints::new(x1, y1, x2, y2)
    });
    Ok(LabeledFrame {
        image: Tensor::new([3, crop_h, crop_w], data)?,
        class: frame.class,
        endpoints,
        obstructed: frame.obstructed,
    })
}

/// One cross-validation partition, as indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffles `0..len` with `seed` and deals it into `k` folds whose sizes
/// differ by at most one.
pub fn kfold_split(len: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold split needs k >= 2, got {k}")));
    }
    if len < k {
        return Err(Error::invalid(format!("{len} items cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (len / k, len % k);
    let mut chunks = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        chunks.push(&order[start..start + size]);
        start += size;
    }
    Ok((0..k)
        .map(|i| Fold {
            validation: chunks[i].to_vec(),
            train: chunks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, c)| c.iter().copied())
                .collect(),
        })
        .collect())
}
