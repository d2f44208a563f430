//! Deterministic synthesis of disturbance test sets.
//!
//! Four effects, all geometry-preserving so ground-truth boxes carry over
//! unchanged: box blur (foggy lens / out-of-focus), salt-pepper specks
//! (wind-blown debris and chaff, not the image-processing noise of the same
//! name), dust overlay, and a lens flare gradient.
//!
//! Every effect is a pure function of the input image and its
//! [`DisturbanceSpec`]: same spec (including seed) means byte-identical
//! output, across runs and platforms. Random draws come from the pinned
//! generator in [`crate::rng`]; blended channel values round half away from
//! zero.

use std::path::{Path, PathBuf};

use crate::dataset::{AnnotatedImage, Dataset, DatasetError, Provenance};
use crate::rng::{self, SplitMix64};

#[derive(Debug, thiserror::Error)]
pub enum DisturbanceError {
    #[error("kernel size must be at least 1")]
    ZeroKernel,
    #[error("kernel {kernel} exceeds both image dimensions {width}x{height}")]
    KernelTooLarge { kernel: u32, width: u32, height: u32 },
    #[error("speck radius range [{lo}, {hi}] is empty or zero")]
    EmptyRadiusRange { lo: u32, hi: u32 },
    #[error("speck radius {radius} does not fit a {width}x{height} image")]
    SpeckTooLarge { radius: u32, width: u32, height: u32 },
    #[error("{name} {value} outside [0, 1]")]
    UnitRange { name: &'static str, value: f64 },
    #[error("spec is for effect `{spec}`, not `{expected}`")]
    EffectMismatch { spec: Effect, expected: Effect },
    #[error("pixel buffer length {got} does not match {width}x{height} RGB image")]
    BadBufferLength { got: usize, width: u32, height: u32 },
    #[error("cannot synthesize from a dataset with provenance `{0}`")]
    NotOriginal(Provenance),
    #[error("image `{image_id}` is {got_w}x{got_h} on disk but {want_w}x{want_h} in the manifest")]
    DimensionMismatch {
        image_id: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("cannot read image {path}: {reason}")]
    ImageRead { path: PathBuf, reason: String },
    #[error("cannot write image {path}: {reason}")]
    ImageWrite { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Width x height grid of 8-bit RGB pixels, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    /// Constant-color image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, DisturbanceError> {
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(DisturbanceError::BadBufferLength {
                got: pixels.len(),
                width,
                height,
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn load_png(path: &Path) -> Result<Self, DisturbanceError> {
        let img = image::open(path)
            .map_err(|e| DisturbanceError::ImageRead {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            pixels: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DisturbanceError> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width, self.height, self.pixels.clone())
                .expect("buffer length is validated at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| DisturbanceError::ImageWrite {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// The four disturbance effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    Blur,
    SaltPepper,
    Dust,
    Flare,
}

impl Effect {
    pub fn provenance(self) -> Provenance {
        match self {
            Effect::Blur => Provenance::Blurry,
            Effect::SaltPepper => Provenance::SaltPepper,
            Effect::Dust => Provenance::Dust,
            Effect::Flare => Provenance::Flare,
        }
    }

    pub const ALL: [Effect; 4] = [Effect::Blur, Effect::SaltPepper, Effect::Dust, Effect::Flare];
}

impl std::fmt::Display for Effect {
    // Effect names match the provenance they produce.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.provenance())
    }
}

/// Per-effect parameters plus the seed for the effect's random stream.
///
/// The defaults approximate the visual character of the reference disturbance
/// images: blur kernel 30, 40 specks of radius 2..6 px, 5% dust coverage at
/// alpha 0.5, and a flare of intensity 0.6 and radius 0.5 centered at
/// (0.3, 0.3) relative coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub params: EffectParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EffectParams {
    Blur {
        kernel_size: u32,
    },
    SaltPepper {
        speck_count: u32,
        /// Inclusive radius range in pixels.
        speck_radius_range: (u32, u32),
    },
    Dust {
        /// Approximate fraction of the image area to cover, in `[0, 1]`.
        particle_density: f64,
        particle_alpha: f64,
    },
    Flare {
        /// Center in relative coordinates over `[0, 1]^2`.
        center: (f64, f64),
        intensity: f64,
        /// Radius as a fraction of the image diagonal.
        radius: f64,
    },
}

impl DisturbanceSpec {
    pub fn default_for(effect: Effect, seed: u64) -> Self {
        let params = match effect {
            Effect::Blur => EffectParams::Blur { kernel_size: 30 },
            Effect::SaltPepper => EffectParams::SaltPepper {
                speck_count: 40,
                speck_radius_range: (2, 6),
            },
            Effect::Dust => EffectParams::Dust {
                particle_density: 0.05,
                particle_alpha: 0.5,
            },
            Effect::Flare => EffectParams::Flare {
                center: (0.3, 0.3),
                intensity: 0.6,
                radius: 0.5,
            },
        };
        Self { params, seed }
    }

    pub fn effect(&self) -> Effect {
        match self.params {
            EffectParams::Blur { .. } => Effect::Blur,
            EffectParams::SaltPepper { .. } => Effect::SaltPepper,
            EffectParams::Dust { .. } => Effect::Dust,
            EffectParams::Flare { .. } => Effect::Flare,
        }
    }

    /// Same parameters, stream reseeded for one image.
    fn for_image(&self, image_id: &str) -> Self {
        Self {
            params: self.params.clone(),
            seed: rng::derive_seed(self.seed, image_id),
        }
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), DisturbanceError> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(DisturbanceError::UnitRange { name, value });
    }
    Ok(())
}

/// Round half away from zero; inputs here are always non-negative.
fn round_half_up(sum: u64, denom: u64) -> u8 {
    ((2 * sum + denom) / (2 * denom)).min(255) as u8
}

fn blend(src: u8, overlay: u8, alpha: f64) -> u8 {
    let v = (1.0 - alpha) * f64::from(src) + alpha * f64::from(overlay);
    // f64::round is round-half-away-from-zero.
    v.round().clamp(0.0, 255.0) as u8
}

/// Box blur with edge replication.
///
/// Every output channel is the rounded mean of the `kernel_size^2` window
/// anchored at offset `kernel_size / 2` from the window's top-left (the
/// center pixel for odd sizes). Output dimensions are unchanged.
pub fn box_blur(img: &RasterImage, kernel_size: u32) -> Result<RasterImage, DisturbanceError> {
    if kernel_size == 0 {
        return Err(DisturbanceError::ZeroKernel);
    }
    if kernel_size > img.width && kernel_size > img.height {
        return Err(DisturbanceError::KernelTooLarge {
            kernel: kernel_size,
            width: img.width,
            height: img.height,
        });
    }

    let w = img.width as usize;
    let h = img.height as usize;
    let k = kernel_size as usize;
    let lo = k / 2; // window spans [i - lo, i - lo + k - 1]
    let hi = k - 1 - lo;
    let clamp = |i: isize, max: usize| i.clamp(0, max as isize - 1) as usize;

    // Horizontal pass: windowed sums per channel, full precision.
    let mut hsum = vec![0u32; w * h * 3];
    for y in 0..h {
        let mut acc = [0u32; 3];
        for j in -(lo as isize)..=(hi as isize) {
            let px = img.pixel(clamp(j, w) as u32, y as u32);
            for c in 0..3 {
                acc[c] += u32::from(px[c]);
            }
        }
        for x in 0..w {
            let out = (y * w + x) * 3;
            hsum[out..out + 3].copy_from_slice(&acc);
            let incoming = img.pixel(clamp(x as isize + 1 + hi as isize, w) as u32, y as u32);
            let outgoing = img.pixel(clamp(x as isize - lo as isize, w) as u32, y as u32);
            for c in 0..3 {
                acc[c] += u32::from(incoming[c]);
                acc[c] -= u32::from(outgoing[c]);
            }
        }
    }

    // Vertical pass over the horizontal sums, then a single rounding.
    let denom = u64::from(kernel_size) * u64::from(kernel_size);
    let mut out = vec![0u8; w * h * 3];
    for x in 0..w {
        let mut acc = [0u64; 3];
        for j in -(lo as isize)..=(hi as isize) {
            let row = clamp(j, h);
            for c in 0..3 {
                acc[c] += u64::from(hsum[(row * w + x) * 3 + c]);
            }
        }
        for y in 0..h {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                out[base + c] = round_half_up(acc[c], denom);
            }
            let incoming = clamp(y as isize + 1 + hi as isize, h);
            let outgoing = clamp(y as isize - lo as isize, h);
            for c in 0..3 {
                acc[c] += u64::from(hsum[(incoming * w + x) * 3 + c]);
                acc[c] -= u64::from(hsum[(outgoing * w + x) * 3 + c]);
            }
        }
    }
    RasterImage::from_pixels(img.width, img.height, out)
}

// Speck palettes: a dark set for debris and a light set for chaff.
const DARK_SPECKS: [[u8; 3]; 4] = [
    [54, 38, 27],
    [33, 26, 20],
    [70, 52, 34],
    [24, 24, 22],
];
const LIGHT_SPECKS: [[u8; 3]; 4] = [
    [214, 203, 176],
    [228, 222, 204],
    [197, 181, 142],
    [236, 230, 214],
];

fn require_params<'a, T>(
    spec: &'a DisturbanceSpec,
    expected: Effect,
    extract: impl FnOnce(&'a EffectParams) -> Option<T>,
) -> Result<T, DisturbanceError> {
    extract(&spec.params).ok_or(DisturbanceError::EffectMismatch {
        spec: spec.effect(),
        expected,
    })
}

fn fill_ellipse(img: &mut RasterImage, cx: i64, cy: i64, rx: i64, ry: i64, color: [u8; 3]) {
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            // Integer ellipse test: (dx/rx)^2 + (dy/ry)^2 <= 1.
            if dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry {
                let x = cx + dx;
                let y = cy + dy;
                if x >= 0 && y >= 0 && (x as u32) < img.width && (y as u32) < img.height {
                    img.set_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

/// Scatter `speck_count` filled ellipses simulating wind-blown debris.
///
/// Draw order per speck is fixed (palette, color, radii, center), so output
/// bytes depend only on the `DisturbanceSpec`.
pub fn salt_pepper(img: &RasterImage, spec: &DisturbanceSpec) -> Result<RasterImage, DisturbanceError> {
    let (speck_count, (r_lo, r_hi)) = require_params(spec, Effect::SaltPepper, |p| match p {
        EffectParams::SaltPepper { speck_count, speck_radius_range } => {
            Some((*speck_count, *speck_radius_range))
        }
        _ => None,
    })?;
    if r_lo == 0 || r_lo > r_hi {
        return Err(DisturbanceError::EmptyRadiusRange { lo: r_lo, hi: r_hi });
    }
    if 2 * r_hi >= img.width.min(img.height) {
        return Err(DisturbanceError::SpeckTooLarge {
            radius: r_hi,
            width: img.width,
            height: img.height,
        });
    }

    let mut out = img.clone();
    let mut stream = SplitMix64::new(spec.seed);
    for _ in 0..speck_count {
        let palette: &[[u8; 3]; 4] = if stream.next_bool() { &DARK_SPECKS } else { &LIGHT_SPECKS };
        let color = palette[stream.next_below(4) as usize];
        let rx = stream.next_range(u64::from(r_lo), u64::from(r_hi)) as i64;
        let ry = stream.next_range(u64::from(r_lo), u64::from(r_hi)) as i64;
        // Keep the whole ellipse inside the frame.
        let cx = stream.next_range(rx as u64, u64::from(img.width) - 1 - rx as u64) as i64;
        let cy = stream.next_range(ry as u64, u64::from(img.height) - 1 - ry as u64) as i64;
        fill_ellipse(&mut out, cx, cy, rx, ry, color);
    }
    Ok(out)
}

// Dust particle radii in pixels; mean particle area follows from these.
const DUST_RADII: (u64, u64) = (1, 3);

/// Overlay small semi-transparent gray-brown particles until the nominal
/// covered area reaches `particle_density` of the image.
pub fn dust(img: &RasterImage, spec: &DisturbanceSpec) -> Result<RasterImage, DisturbanceError> {
    let (density, alpha) = require_params(spec, Effect::Dust, |p| match p {
        EffectParams::Dust { particle_density, particle_alpha } => {
            Some((*particle_density, *particle_alpha))
        }
        _ => None,
    })?;
    check_unit("particle_density", density)?;
    check_unit("particle_alpha", alpha)?;

    let mut out = img.clone();
    if density == 0.0 {
        return Ok(out);
    }

    // E[r^2] over uniform integer radii 1..=3 is 14/3.
    let mean_area = std::f64::consts::PI * 14.0 / 3.0;
    let count = (density * f64::from(img.width) * f64::from(img.height) / mean_area).round() as u64;

    let mut stream = SplitMix64::new(spec.seed);
    for _ in 0..count {
        let r = stream.next_range(DUST_RADII.0, DUST_RADII.1) as i64;
        let cx = stream.next_below(u64::from(img.width)) as i64;
        let cy = stream.next_below(u64::from(img.height)) as i64;
        let shade = stream.next_range(0, 50) as i64 - 25;
        let color = [
            (120 + shade).clamp(0, 255) as u8,
            (108 + shade).clamp(0, 255) as u8,
            (92 + shade).clamp(0, 255) as u8,
        ];
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    let x = cx + dx;
                    let y = cy + dy;
                    if x >= 0 && y >= 0 && (x as u32) < img.width && (y as u32) < img.height {
                        let src = out.pixel(x as u32, y as u32);
                        out.set_pixel(
                            x as u32,
                            y as u32,
                            [
                                blend(src[0], color[0], alpha),
                                blend(src[1], color[1], alpha),
                                blend(src[2], color[2], alpha),
                            ],
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Additive radial brightness gradient: peak `intensity * 255` at the center,
/// decaying linearly to zero at `radius` (a fraction of the image diagonal).
/// Channels clamp at 255; no randomness is involved.
pub fn flare(img: &RasterImage, spec: &DisturbanceSpec) -> Result<RasterImage, DisturbanceError> {
    let (center, intensity, radius) = require_params(spec, Effect::Flare, |p| match p {
        EffectParams::Flare { center, intensity, radius } => Some((*center, *intensity, *radius)),
        _ => None,
    })?;
    check_unit("intensity", intensity)?;
    check_unit("radius", radius)?;
    check_unit("center.x", center.0)?;
    check_unit("center.y", center.1)?;

    let mut out = img.clone();
    if intensity == 0.0 || radius == 0.0 {
        return Ok(out);
    }

    let w = f64::from(img.width);
    let h = f64::from(img.height);
    let diag = (w * w + h * h).sqrt();
    let radius_px = radius * diag;
    let cx = center.0 * (w - 1.0);
    let cy = center.1 * (h - 1.0);

    for y in 0..img.height {
        for x in 0..img.width {
            let dx = f64::from(x) - cx;
            let dy = f64::from(y) - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let falloff = (1.0 - dist / radius_px).max(0.0);
            if falloff == 0.0 {
                continue;
            }
            let add = (intensity * 255.0 * falloff).round() as u16;
            let src = out.pixel(x, y);
            out.set_pixel(
                x,
                y,
                [
                    (u16::from(src[0]) + add).min(255) as u8,
                    (u16::from(src[1]) + add).min(255) as u8,
                    (u16::from(src[2]) + add).min(255) as u8,
                ],
            );
        }
    }
    Ok(out)
}

/// Apply the effect described by a `DisturbanceSpec` to one image.
pub fn apply_effect(img: &RasterImage, spec: &DisturbanceSpec) -> Result<RasterImage, DisturbanceError> {
    match spec.params {
        EffectParams::Blur { kernel_size } => box_blur(img, kernel_size),
        EffectParams::SaltPepper { .. } => salt_pepper(img, spec),
        EffectParams::Dust { .. } => dust(img, spec),
        EffectParams::Flare { .. } => flare(img, spec),
    }
}

/// Synthesize one disturbance test set from an original dataset.
///
/// Reads each source PNG under `images_root`, applies the effect with a
/// per-image stream derived from `(spec.seed, image_id)`, and writes
/// `<image_id>_<effect>.png` plus a `manifest.json` into `out_dir`. Boxes are
/// copied verbatim; only provenance and file names change.
pub fn synthesize_testset(
    dataset: &Dataset,
    images_root: &Path,
    spec: &DisturbanceSpec,
    out_dir: &Path,
) -> Result<Dataset, DisturbanceError> {
    if dataset.provenance != Provenance::Original {
        return Err(DisturbanceError::NotOriginal(dataset.provenance));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DisturbanceError::ImageWrite {
        path: out_dir.to_path_buf(),
        reason: e.to_string(),
    })?;

    let effect = spec.effect();
    let mut images = Vec::with_capacity(dataset.images.len());
    for entry in &dataset.images {
        let src_path = images_root.join(&entry.file_path);
        let img = RasterImage::load_png(&src_path)?;
        if img.width != entry.width || img.height != entry.height {
            return Err(DisturbanceError::DimensionMismatch {
                image_id: entry.image_id.clone(),
                got_w: img.width,
                got_h: img.height,
                want_w: entry.width,
                want_h: entry.height,
            });
        }
        let per_image = spec.for_image(&entry.image_id);
        let transformed = apply_effect(&img, &per_image)?;
        let file_name = format!("{}_{}.png", entry.image_id, effect);
        transformed.save_png(&out_dir.join(&file_name))?;
        images.push(AnnotatedImage {
            image_id: entry.image_id.clone(),
            file_path: file_name,
            width: entry.width,
            height: entry.height,
            boxes: entry.boxes.clone(),
        });
    }

    let synthesized = Dataset {
        name: format!("{}_{}", dataset.name, effect),
        provenance: effect.provenance(),
        images,
    };
    crate::dataset::write_manifest(&synthesized, &out_dir.join("manifest.json"))?;
    Ok(synthesized)
}
