//! Proxy image construction: random spectral masking and spatial perturbations
//! of natural images.
//!
//! Frequency bins are addressed in centered layout: after an fftshift the DC
//! term sits at `(width/2, height/2)` and a bin's band is decided by its
//! Chebyshev distance from there.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

pub const MIN_SIDE: usize = 8;
/// Default Gaussian-noise standard deviation, in 0..255 pixel units.
pub const DEFAULT_NOISE_SIGMA: f64 = 5.0;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("image must be at least {MIN_SIDE}x{MIN_SIDE} (got {width}x{height})")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    Buffer { expected: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("image I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

/// RGB image with `f64` samples in `[0, 255]`, stored as three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    planes: [Vec<f64>; 3],
}

impl RasterImage {
    pub fn new(width: usize, height: usize, planes: [Vec<f64>; 3]) -> Result<Self, ProxyError> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(ProxyError::TooSmall { width, height });
        }
        for p in &planes {
            if p.len() != width * height {
                return Err(ProxyError::Buffer {
                    expected: width * height,
                    got: p.len(),
                });
            }
        }
        Ok(Self { width, height, planes })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self, ProxyError> {
        let n = width * height;
        Self::new(width, height, rgb.map(|v| vec![v; n]))
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, ProxyError> {
        let planes = [0, 1, 2].map(|c| {
            (0..width * height)
                .map(|i| f(i % width, i / width, c))
                .collect::<Vec<_>>()
        });
        Self::new(width, height, planes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.planes[c][y * self.width + x]
    }

    fn map_planes(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Self {
        Self {
            width: self.width,
            height: self.height,
            planes: [0, 1, 2].map(|c| f(c, &self.planes[c])),
        }
    }

    fn clamped(mut self) -> Self {
        for p in &mut self.planes {
            for v in p.iter_mut() {
                *v = v.clamp(0.0, 255.0);
            }
        }
        self
    }

    pub fn max_abs_diff(&self, other: &RasterImage) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self, ProxyError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |x, y, c| img.get_pixel(x as u32, y as u32)[c] as f64)
    }

    /// Rounds to the nearest 8-bit value.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([0, 1, 2].map(|c| self.planes[c][i].round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProxyError> {
        let img = image::open(path).map_err(|e| ProxyError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ProxyError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ProxyError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// Spectral region selected for masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    Low,
    Mid,
    High,
    /// Bins with `inner <= r < outer` (Chebyshev radius in bins).
    Ring { inner: f64, outer: f64 },
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "low" => Ok(Band::Low),
            "mid" => Ok(Band::Mid),
            "high" => Ok(Band::High),
            other => {
                let ring = other
                    .strip_prefix("ring:")
                    .and_then(|r| r.split_once(','))
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
                match ring {
                    Some((inner, outer)) => Ok(Band::Ring { inner, outer }),
                    None => Err(format!("unknown band {other:?} (low|mid|high|ring:<inner>,<outer>)")),
                }
            }
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::Low => f.write_str("low"),
            Band::Mid => f.write_str("mid"),
            Band::High => f.write_str("high"),
            Band::Ring { inner, outer } => write!(f, "ring:{inner},{outer}"),
        }
    }
}

/// Band boundaries as fractions of `min(width, height)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandGeometry {
    pub low_mid: f64,
    pub mid_high: f64,
}

impl Default for BandGeometry {
    fn default() -> Self {
        Self {
            low_mid: 1.0 / 8.0,
            mid_high: 1.0 / 4.0,
        }
    }
}

/// Chebyshev distance of centered bin `(x, y)` from the DC bin.
pub fn chebyshev_radius(x: usize, y: usize, width: usize, height: usize) -> usize {
    let dx = (x as isize - (width / 2) as isize).unsigned_abs();
    let dy = (y as isize - (height / 2) as isize).unsigned_abs();
    dx.max(dy)
}

fn in_band(r: usize, band: Band, min_side: usize, geometry: BandGeometry) -> bool {
    let r = r as f64;
    let lo = min_side as f64 * geometry.low_mid;
    let hi = min_side as f64 * geometry.mid_high;
    match band {
        Band::Low => r < lo,
        Band::Mid => lo <= r && r < hi,
        Band::High => r >= hi,
        Band::Ring { inner, outer } => inner <= r && r < outer,
    }
}

/// Membership of each centered bin (row-major) in `band`.
pub fn band_region(width: usize, height: usize, band: Band) -> Result<Vec<bool>, ProxyError> {
    band_region_with(width, height, band, BandGeometry::default())
}

pub fn band_region_with(
    width: usize,
    height: usize,
    band: Band,
    geometry: BandGeometry,
) -> Result<Vec<bool>, ProxyError> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(ProxyError::TooSmall { width, height });
    }
    let m = width.min(height);
    Ok((0..width * height)
        .map(|i| in_band(chebyshev_radius(i % width, i / width, width, height), band, m, geometry))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralMaskSpec {
    pub band: Band,
    /// Probability that an in-band bin is masked.
    pub ratio: f64,
    pub phase_only: bool,
    pub seed: u64,
    pub geometry: BandGeometry,
}

impl SpectralMaskSpec {
    pub fn new(band: Band, ratio: f64, seed: u64) -> Self {
        Self {
            band,
            ratio,
            phase_only: false,
            seed,
            geometry: BandGeometry::default(),
        }
    }

    /// Fully zeroes the `[30, 100)` ring, used to build threshold-selection negatives.
    pub fn validation_ring(seed: u64) -> Self {
        Self::new(
            Band::Ring {
                inner: 30.0,
                outer: 100.0,
            },
            1.0,
            seed,
        )
    }

    fn validate(&self) -> Result<(), ProxyError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(ProxyError::Config(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Binary pass mask over centered bins: `true` keeps the coefficient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyMask {
    pub width: usize,
    pub height: usize,
    pub pass: Vec<bool>,
}

impl FrequencyMask {
    pub fn masked_count(&self) -> usize {
        self.pass.iter().filter(|p| !**p).count()
    }
}

/// Centered index of the bin holding the conjugate frequency of `(x, y)`.
fn conjugate(x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
    // centered index x ↔ frequency x − w/2; negation modulo w
    let cx = (2 * (width / 2) + width - x) % width;
    let cy = (2 * (height / 2) + height - y) % height;
    (cx, cy)
}

/// Samples a conjugate-symmetric Bernoulli mask. In-band bins are visited in
/// row-major order; each bin whose conjugate comes later (or is itself) draws
/// once, and its conjugate copies the decision.
pub fn sample_mask(spec: &SpectralMaskSpec, width: usize, height: usize) -> Result<FrequencyMask, ProxyError> {
    spec.validate()?;
    let region = band_region_with(width, height, spec.band, spec.geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pass = vec![true; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !region[i] {
                continue;
            }
            let (cx, cy) = conjugate(x, y, width, height);
            let j = cy * width + cx;
            if j < i {
                pass[i] = pass[j];
                continue;
            }
            let masked = rng.gen::<f64>() < spec.ratio;
            pass[i] = !masked;
            pass[j] = !masked;
        }
    }
    Ok(FrequencyMask { width, height, pass })
}

fn fft_2d(planner: &mut FftPlanner<f64>, buf: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let row = if inverse { planner.plan_fft_inverse(width) } else { planner.plan_fft_forward(width) };
    for r in buf.chunks_exact_mut(width) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(height) } else { planner.plan_fft_forward(height) };
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = buf[y * width + x];
        }
        col.process(&mut column);
        for y in 0..height {
            buf[y * width + x] = column[y];
        }
    }
}

/// Raw FFT index → centered index.
fn centered(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

/// Result of filtering one channel before clamping.
struct Filtered {
    real: Vec<f64>,
    max_imag: f64,
    energy_in: f64,
    energy_out: f64,
}

fn filter_channel(
    planner: &mut FftPlanner<f64>,
    plane: &[f64],
    mask: &FrequencyMask,
    phase_only: bool,
) -> Filtered {
    let (w, h) = (mask.width, mask.height);
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_2d(planner, &mut buf, w, h, false);
    let mut energy_in = 0.0;
    let mut energy_out = 0.0;
    for v in 0..h {
        for u in 0..w {
            let k = v * w + u;
            energy_in += buf[k].norm_sqr();
            if !mask.pass[centered(v, h) * w + centered(u, w)] {
                buf[k] = if phase_only {
                    Complex::new(buf[k].norm(), 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            energy_out += buf[k].norm_sqr();
        }
    }
    fft_2d(planner, &mut buf, w, h, true);
    let scale = 1.0 / (w * h) as f64;
    let mut max_imag = 0.0f64;
    let real = buf
        .iter()
        .map(|c| {
            max_imag = max_imag.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    Filtered {
        real,
        max_imag,
        energy_in,
        energy_out,
    }
}

/// Diagnostics of a frequency-masking pass, computed before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskDiagnostics {
    /// Largest imaginary magnitude after the inverse transform.
    pub max_imag: f64,
    pub energy_in: f64,
    pub energy_out: f64,
}

/// Masks the spectrum of every channel with one shared mask and returns the
/// clamped image together with pre-clamp diagnostics.
pub fn apply_frequency_mask_with_diagnostics(
    image: &RasterImage,
    spec: &SpectralMaskSpec,
) -> Result<(RasterImage, MaskDiagnostics), ProxyError> {
    let mask = sample_mask(spec, image.width, image.height)?;
    let mut planner = FftPlanner::new();
    let mut diag = MaskDiagnostics {
        max_imag: 0.0,
        energy_in: 0.0,
        energy_out: 0.0,
    };
    let out = image.map_planes(|_, plane| {
        let f = filter_channel(&mut planner, plane, &mask, spec.phase_only);
        diag.max_imag = diag.max_imag.max(f.max_imag);
        diag.energy_in += f.energy_in;
        diag.energy_out += f.energy_out;
        f.real
    });
    Ok((out.clamped(), diag))
}

pub fn apply_frequency_mask(image: &RasterImage, spec: &SpectralMaskSpec) -> Result<RasterImage, ProxyError> {
    Ok(apply_frequency_mask_with_diagnostics(image, spec)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyOp {
    FrequencyMask,
    Smoothing,
    Sharpening,
    GaussianNoise,
    ColorJitter,
}

impl FromStr for ProxyOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "frequency_mask" | "frequency-mask" | "fm" => Ok(Self::FrequencyMask),
            "smoothing" | "blur" => Ok(Self::Smoothing),
            "sharpening" | "sharpen" => Ok(Self::Sharpening),
            "gaussian_noise" | "gaussian-noise" | "noise" => Ok(Self::GaussianNoise),
            "color_jitter" | "color-jitter" | "jitter" => Ok(Self::ColorJitter),
            other => Err(format!(
                "unknown proxy operation {other:?} (frequency_mask|smoothing|sharpening|gaussian_noise|color_jitter)"
            )),
        }
    }
}

/// Maximum relative deviations for color jitter; hue is in turns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub operation: ProxyOp,
    pub spectral: Option<SpectralMaskSpec>,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
    pub jitter: JitterRanges,
    /// Seed for the stochastic spatial operations.
    pub seed: u64,
}

impl ProxyConfig {
    pub fn new(operation: ProxyOp) -> Self {
        Self {
            operation,
            spectral: None,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            blur_sigma: 1.0,
            sharpen_amount: 1.0,
            jitter: JitterRanges::default(),
            seed: 0,
        }
    }

    pub fn frequency_mask(spec: SpectralMaskSpec) -> Self {
        Self {
            spectral: Some(spec),
            seed: spec.seed,
            ..Self::new(ProxyOp::FrequencyMask)
        }
    }

    /// Same configuration with every seed replaced by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let Some(s) = c.spectral.as_mut() {
            s.seed = seed;
        }
        c
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * plane[y * width + clampi(x as isize + i as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clampi(y as isize + i as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn color_jitter(image: &RasterImage, ranges: &JitterRanges, rng: &mut ChaCha8Rng) -> RasterImage {
    let mut factor = |range: f64| if range > 0.0 { rng.gen_range(1.0 - range..=1.0 + range) } else { 1.0 };
    let brightness = factor(ranges.brightness);
    let contrast = factor(ranges.contrast);
    let saturation = factor(ranges.saturation);
    let hue = if ranges.hue > 0.0 { rng.gen_range(-ranges.hue..=ranges.hue) } else { 0.0 };

    let n = image.width * image.height;
    let gray = |p: &[Vec<f64>; 3], i: usize| 0.299 * p[0][i] + 0.587 * p[1][i] + 0.114 * p[2][i];
    let mut p = image.planes.clone();
    for plane in &mut p {
        plane.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 255.0));
    }
    let mean_gray = (0..n).map(|i| gray(&p, i)).sum::<f64>() / n as f64;
    for plane in &mut p {
        plane
            .iter_mut()
            .for_each(|v| *v = (mean_gray + contrast * (*v - mean_gray)).clamp(0.0, 255.0));
    }
    for i in 0..n {
        let g = gray(&p, i);
        for plane in &mut p {
            plane[i] = (g + saturation * (plane[i] - g)).clamp(0.0, 255.0);
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(p[0][i] / 255.0, p[1][i] / 255.0, p[2][i] / 255.0);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            p[0][i] = r * 255.0;
            p[1][i] = g * 255.0;
            p[2][i] = b * 255.0;
        }
    }
    RasterImage {
        width: image.width,
        height: image.height,
        planes: p,
    }
}

/// Builds one proxy image. The result is clamped to `[0, 255]`.
pub fn make_proxy(image: &RasterImage, config: &ProxyConfig) -> Result<RasterImage, ProxyError> {
    let (w, h) = (image.width, image.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let out = match config.operation {
        ProxyOp::FrequencyMask => {
            let spec = config
                .spectral
                .as_ref()
                .ok_or_else(|| ProxyError::Config("frequency_mask requires a spectral mask spec".into()))?;
            return apply_frequency_mask(image, spec);
        }
        ProxyOp::Smoothing => {
            check_nonneg("blur_sigma", config.blur_sigma)?;
            if config.blur_sigma == 0.0 {
                return Ok(image.clone());
            }
            image.map_planes(|_, p| blur_plane(p, w, h, config.blur_sigma))
        }
        ProxyOp::Sharpening => {
            check_nonneg("blur_sigma", config.blur_sigma)?;
            check_nonneg("sharpen_amount", config.sharpen_amount)?;
            if config.blur_sigma == 0.0 {
                return Ok(image.clone());
            }
            let amount = config.sharpen_amount;
            image.map_planes(|_, p| {
                let b = blur_plane(p, w, h, config.blur_sigma);
                p.iter().zip(&b).map(|(x, bl)| x + amount * (x - bl)).collect()
            })
        }
        ProxyOp::GaussianNoise => {
            check_nonneg("noise_sigma", config.noise_sigma)?;
            if config.noise_sigma == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, config.noise_sigma).expect("sigma checked");
            image.map_planes(|_, p| p.iter().map(|v| v + normal.sample(&mut rng)).collect())
        }
        ProxyOp::ColorJitter => color_jitter(image, &config.jitter, &mut rng),
    };
    Ok(out.clamped())
}

fn check_nonneg(name: &str, v: f64) -> Result<(), ProxyError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ProxyError::Config(format!("{name} must be a finite value >= 0")))
    }
}
