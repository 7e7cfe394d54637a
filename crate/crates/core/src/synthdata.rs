//! Synthetic source/target segmentation domains.
//!
//! Scenes are a gray background (class 0) with rectangles and disks of
//! foreground classes painted in order, later shapes occluding earlier ones.
//! Appearance is a per-class base color, a per-class stripe texture, and
//! additive Gaussian noise. The target domain keeps the scene geometry
//! distribution but rotates every hue, raises the noise, and changes the
//! class frequencies.
//!
//! Pixel values are quantized to multiples of 1/255 so that datasets
//! written as PPM load back bit-identically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::pnm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    /// Center (row, col).
    pub center: (f64, f64),
    /// Half extents for rectangles; `size.0` is the radius for disks.
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    /// Paints the label map; class 0 is background.
    pub fn rasterize(&self) -> LabelMap {
        let mut lm = LabelMap::filled(self.height, self.width, 0);
        for s in &self.shapes {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (dy, dx) = (y as f64 + 0.5 - s.center.0, x as f64 + 0.5 - s.center.1);
                    let inside = match s.kind {
                        ShapeKind::Rectangle => dy.abs() <= s.size.0 && dx.abs() <= s.size.1,
                        ShapeKind::Disk => dy * dy + dx * dx <= s.size.0 * s.size.0,
                    };
                    if inside {
                        lm.labels[y * self.width + x] = s.class;
                    }
                }
            }
        }
        lm
    }
}

/// Appearance and sampling parameters of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Per-class (hue, saturation, value), hue in turns.
    pub class_hsv: Vec<[f64; 3]>,
    /// Added to every hue, in turns.
    pub hue_shift: f64,
    pub noise_sigma: f64,
    pub texture_amp: f64,
    /// Sampling weights of foreground classes 1..C.
    pub class_weights: Vec<f64>,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

/// Named domain shift settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftPreset {
    Default,
    None,
}

impl std::str::FromStr for ShiftPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "none" => Ok(Self::None),
            other => Err(Error::invalid(format!("unknown shift preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for ShiftPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::None => "none",
        })
    }
}

impl DomainParams {
    pub fn source() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 5,
            // Two hue families half a turn apart, split by brightness.
            class_hsv: vec![
                [0.0, 0.0, 0.2],
                [0.0, 0.3, 0.95],
                [0.0, 0.3, 0.55],
                [0.5, 0.3, 0.95],
                [0.5, 0.3, 0.55],
            ],
            hue_shift: 0.0,
            noise_sigma: 0.05,
            texture_amp: 0.12,
            class_weights: vec![1.0, 1.0, 1.0, 0.15],
            min_shapes: 2,
            max_shapes: 4,
        }
    }

    /// Source geometry with rotated hues, stronger noise, uniform classes.
    pub fn target() -> Self {
        Self {
            hue_shift: 0.15,
            noise_sigma: 0.15,
            class_weights: vec![1.0; 4],
            ..Self::source()
        }
    }

    pub fn pair(preset: ShiftPreset) -> (Self, Self) {
        match preset {
            ShiftPreset::Default => (Self::source(), Self::target()),
            ShiftPreset::None => (Self::source(), Self::source()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!("class count {}", self.classes)));
        }
        if self.class_hsv.len() != self.classes {
            return Err(Error::invalid("class_hsv needs one entry per class"));
        }
        if self.class_weights.len() != self.classes - 1 {
            return Err(Error::invalid(
                "class_weights needs one entry per foreground class",
            ));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::invalid("class weights must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {}", self.noise_sigma)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("canvas smaller than 8x8"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes > max_shapes"));
        }
        Ok(())
    }

    /// RGB of each class after the hue shift.
    pub fn class_rgb(&self) -> Vec<[f64; 3]> {
        self.class_hsv
            .iter()
            .map(|&[h, s, v]| hsv_to_rgb((h + self.hue_shift).rem_euclid(1.0), s, v))
            .collect()
    }

    /// Flat `key=value` lines, used by dataset manifests.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = vec![
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("classes".into(), self.classes.to_string()),
            ("hue_shift".into(), format!("{}", self.hue_shift)),
            ("noise_sigma".into(), format!("{}", self.noise_sigma)),
            ("texture_amp".into(), format!("{}", self.texture_amp)),
            ("class_weights".into(), join(&self.class_weights)),
            ("min_shapes".into(), self.min_shapes.to_string()),
            ("max_shapes".into(), self.max_shapes.to_string()),
        ];
        for (c, hsv) in self.class_hsv.iter().enumerate() {
            out.push((format!("class_hsv.{c}"), join(hsv)));
        }
        out
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// An image with dense labels and a mask of pixels excluded from scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub labels: LabelMap,
    /// `true` where the pixel is ignored by losses and metrics.
    pub ignore: Vec<bool>,
}

impl LabeledImage {
    pub fn new(image: Image, labels: LabelMap, ignore: Vec<bool>) -> Result<Self> {
        if image.height != labels.height || image.width != labels.width {
            return Err(Error::shape(
                "labeled_image",
                "image and labels differ in size",
            ));
        }
        if ignore.len() != labels.labels.len() {
            return Err(Error::shape(
                "labeled_image",
                "mask and labels differ in size",
            ));
        }
        Ok(Self {
            image,
            labels,
            ignore,
        })
    }
}

fn sample_class<R: Rng>(weights: &[f64], rng: &mut R) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return (i + 1) as u8;
        }
        u -= w;
    }
    weights.len() as u8
}

pub fn sample_scene<R: Rng>(params: &DomainParams, rng: &mut R) -> SceneSpec {
    let (h, w) = (params.height as f64, params.width as f64);
    let n = rng.random_range(params.min_shapes..=params.max_shapes);
    let shapes = (0..n)
        .map(|_| {
            let class = sample_class(&params.class_weights, rng);
            let kind = if rng.random::<bool>() {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Disk
            };
            let center = (
                rng.random_range(0.15 * h..0.85 * h),
                rng.random_range(0.15 * w..0.85 * w),
            );
            let size = match kind {
                ShapeKind::Rectangle => (
                    rng.random_range(0.09 * h..0.22 * h),
                    rng.random_range(0.09 * w..0.22 * w),
                ),
                ShapeKind::Disk => {
                    let r = rng.random_range(0.10 * h.min(w)..0.22 * h.min(w));
                    (r, r)
                }
            };
            Shape {
                kind,
                class,
                center,
                size,
            }
        })
        .collect();
    SceneSpec {
        height: params.height,
        width: params.width,
        classes: params.classes,
        shapes,
    }
}

/// Stripe pattern of class `c`: orientation and period vary with the class.
fn texture(c: u8, y: usize, x: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let angle = std::f64::consts::PI * (c as f64) / 4.0;
    let period = 3.0 + c as f64;
    let t = (y as f64) * angle.sin() + (x as f64) * angle.cos();
    (2.0 * std::f64::consts::PI * t / period).sin()
}

/// Renders a scene under the given appearance.
pub fn render<R: Rng>(
    scene: &SceneSpec,
    params: &DomainParams,
    rng: &mut R,
) -> Result<LabeledImage> {
    let labels = scene.rasterize();
    let colors = params.class_rgb();
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let (h, w) = (scene.height, scene.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = labels.get(y, x);
            let tex = params.texture_amp * texture(c, y, x);
            for ch in 0..3 {
                let n = if params.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                let v = (colors[c as usize][ch] + tex + n).clamp(0.0, 1.0);
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    LabeledImage::new(Image::new(h, w, data)?, labels, vec![false; h * w])
}

/// `n` labeled images, deterministic in `(seed, n, params)`.
pub fn gen_domain(seed: u64, n: usize, params: &DomainParams) -> Result<Vec<LabeledImage>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scene = sample_scene(params, &mut rng);
            render(&scene, params, &mut rng)
        })
        .collect()
}

// ---- augmentation -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub flip_p: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            crop_h: 24,
            crop_w: 24,
        }
    }
}

impl AugmentPolicy {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            flip_p: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            crop_h: h,
            crop_w: w,
        }
    }
}

pub fn hflip(img: &LabeledImage) -> LabeledImage {
    let (h, w) = (img.labels.height, img.labels.width);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (d, s) = (y * w + x, y * w + (w - 1 - x));
            out.labels.labels[d] = img.labels.labels[s];
            out.ignore[d] = img.ignore[s];
            out.image.data[3 * d..3 * d + 3].copy_from_slice(&img.image.data[3 * s..3 * s + 3]);
        }
    }
    out
}

/// Rescales to `nh x nw`: bilinear for the image, nearest neighbour for
/// labels and mask.
pub fn rescale(img: &LabeledImage, nh: usize, nw: usize) -> LabeledImage {
    let (h, w) = (img.labels.height, img.labels.width);
    if (nh, nw) == (h, w) {
        return img.clone();
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut labels = Vec::with_capacity(nh * nw);
    let mut ignore = Vec::with_capacity(nh * nw);
    let mut data = Vec::with_capacity(nh * nw * 3);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let ny = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let nx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            labels.push(img.labels.get(ny, nx));
            ignore.push(img.ignore[ny * w + nx]);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img.image.data[(yy * w + xx) * 3 + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                data.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    LabeledImage {
        image: Image {
            height: nh,
            width: nw,
            data,
        },
        labels: LabelMap {
            height: nh,
            width: nw,
            labels,
        },
        ignore,
    }
}

pub fn crop(
    img: &LabeledImage,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<LabeledImage> {
    let (h, w) = (img.labels.height, img.labels.width);
    if top + ch > h || left + cw > w {
        return Err(Error::invalid(format!(
            "crop {ch}x{cw} at ({top},{left}) exceeds {h}x{w} canvas"
        )));
    }
    let mut labels = Vec::with_capacity(ch * cw);
    let mut ignore = Vec::with_capacity(ch * cw);
    let mut data = Vec::with_capacity(ch * cw * 3);
    for y in top..top + ch {
        let row = y * w;
        labels.extend_from_slice(&img.labels.labels[row + left..row + left + cw]);
        ignore.extend_from_slice(&img.ignore[row + left..row + left + cw]);
        data.extend_from_slice(&img.image.data[(row + left) * 3..(row + left + cw) * 3]);
    }
    Ok(LabeledImage {
        image: Image {
            height: ch,
            width: cw,
            data,
        },
        labels: LabelMap {
            height: ch,
            width: cw,
            labels,
        },
        ignore,
    })
}

/// Random flip, scale jitter and crop, applied identically to image,
/// labels and mask. Draws exactly four values from `rng`.
pub fn augment<R: Rng + ?Sized>(
    img: &LabeledImage,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> Result<LabeledImage> {
    let flip = rng.random::<f64>() < policy.flip_p;
    let u_scale: f64 = rng.random();
    let (u_top, u_left): (f64, f64) = (rng.random(), rng.random());
    let scale = policy.scale_min + (policy.scale_max - policy.scale_min) * u_scale;
    let (h, w) = (img.labels.height, img.labels.width);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    if policy.crop_h > nh || policy.crop_w > nw {
        return Err(Error::invalid(format!(
            "crop {}x{} larger than rescaled canvas {nh}x{nw}",
            policy.crop_h, policy.crop_w
        )));
    }
    let base = if flip { hflip(img) } else { img.clone() };
    let scaled = rescale(&base, nh, nw);
    let top = ((u_top * (nh - policy.crop_h + 1) as f64) as usize).min(nh - policy.crop_h);
    let left = ((u_left * (nw - policy.crop_w + 1) as f64) as usize).min(nw - policy.crop_w);
    crop(&scaled, top, left, policy.crop_h, policy.crop_w)
}

// ---- dataset directories ------------------------------------------------------

pub const MANIFEST: &str = "manifest.txt";

/// Writes `img_#####.ppm`, `lbl_#####.pgm`, `msk_#####.pgm` and a manifest.
pub fn save_dataset(
    dir: &Path,
    data: &[LabeledImage],
    seed: u64,
    params: &DomainParams,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# rectseg dataset\n");
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "count={}", data.len());
    for (k, v) in params.to_kv() {
        let _ = writeln!(manifest, "param.{k}={v}");
    }
    for (i, li) in data.iter().enumerate() {
        let (img, lbl, msk) = (
            format!("img_{i:05}.ppm"),
            format!("lbl_{i:05}.pgm"),
            format!("msk_{i:05}.pgm"),
        );
        pnm::write_ppm(&dir.join(&img), &li.image)?;
        let (h, w) = (li.labels.height, li.labels.width);
        let labels: Vec<u16> = li.labels.labels.iter().map(|&l| l as u16).collect();
        pnm::write_pgm(&dir.join(&lbl), w, h, 255, &labels)?;
        let mask: Vec<u16> = li.ignore.iter().map(|&m| m as u16).collect();
        pnm::write_pgm(&dir.join(&msk), w, h, 255, &mask)?;
        let _ = writeln!(manifest, "file={img} {lbl} {msk}");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(files) = line.strip_prefix("file=") else {
            continue;
        };
        let parts: Vec<&str> = files.split_whitespace().collect();
        let [img, lbl, msk] = parts[..] else {
            return Err(Error::format(&path, format!("bad file line {line:?}")));
        };
        let image = pnm::read_ppm(&dir.join(img))?;
        let lg = pnm::read_pgm(&dir.join(lbl))?;
        let mg = pnm::read_pgm(&dir.join(msk))?;
        let labels = LabelMap::new(
            lg.height,
            lg.width,
            lg.values.iter().map(|&v| v as u8).collect(),
        )?;
        let ignore = mg.values.iter().map(|&v| v != 0).collect();
        out.push(LabeledImage::new(image, labels, ignore)?);
    }
    if out.is_empty() {
        return Err(Error::format(&path, "manifest lists no files"));
    }
    Ok(out)
}

/// Value of `key=` in a dataset manifest, if present.
pub fn manifest_value(dir: &Path, key: &str) -> Result<Option<String>> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string()))
}
