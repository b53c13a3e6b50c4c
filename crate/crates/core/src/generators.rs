//! View-specific CESM synthesis from FFDM and generation-quality metrics.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GrayImage, RecordKey, View};
use crate::error::{Error, Result};
use crate::raster;
use crate::seed::{derive_rng, SeedPath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Returns the FFDM image unchanged.
    Identity,
    /// Affine intensity map `a * x + b`, refitted per image by least squares
    /// when a paired target is supplied.
    LinearPerImage { a: f64, b: f64 },
    /// Identity plus clipped Gaussian noise, a stand-in for an imperfect generator.
    NoisyIdentity { sigma: f64 },
    /// Pre-generated rasters addressed by a pattern with `{root}`,
    /// `{patient_id}`, `{laterality}` and `{view}` placeholders.
    External { pattern: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub view: View,
    #[serde(flatten)]
    pub kind: GeneratorKind,
}

/// Per-call inputs beyond the FFDM image.
#[derive(Clone, Debug)]
pub struct GenerationContext<'a> {
    pub record: &'a RecordKey,
    /// Substituted for `{root}` in external patterns.
    pub root: &'a Path,
    /// Real CESM image used to fit the linear generator, when available.
    pub target: Option<&'a GrayImage>,
    /// Stream for stochastic generators.
    pub seed: SeedPath,
}

pub fn external_path(pattern: &str, root: &Path, record: &RecordKey, view: View) -> PathBuf {
    PathBuf::from(
        pattern
            .replace("{root}", &root.to_string_lossy())
            .replace("{patient_id}", &record.patient_id)
            .replace("{laterality}", record.laterality.code())
            .replace("{view}", view.as_str()),
    )
}

/// Least-squares `(a, b)` with `target ≈ a * source + b`.
pub fn fit_affine(source: &GrayImage, target: &GrayImage) -> Result<(f64, f64)> {
    if !source.same_shape(target) {
        return Err(Error::ShapeMismatch {
            expected: source.shape_string(),
            actual: target.shape_string(),
        });
    }
    let n = source.pixels().len() as f64;
    let mx = source.pixels().iter().sum::<f64>() / n;
    let my = target.pixels().iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in source.pixels().iter().zip(target.pixels()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Ok((0.0, my));
    }
    let a = sxy / sxx;
    Ok((a, my - a * mx))
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the logarithm finite
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn clipped(img: &GrayImage, pixels: Vec<f64>) -> Result<GrayImage> {
    let pixels = pixels
        .into_iter()
        .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        .collect();
    img.with_pixels(pixels, true)
}

/// Synthesizes the CESM image for `ctx.record` in the generator's view.
pub fn generate(spec: &GeneratorSpec, img_f: &GrayImage, ctx: &GenerationContext<'_>) -> Result<GrayImage> {
    match &spec.kind {
        GeneratorKind::Identity => clipped(img_f, img_f.pixels().to_vec()),
        GeneratorKind::LinearPerImage { a, b } => {
            let (a, b) = match ctx.target {
                Some(t) => fit_affine(img_f, t)?,
                None => (*a, *b),
            };
            clipped(img_f, img_f.pixels().iter().map(|x| a * x + b).collect())
        }
        GeneratorKind::NoisyIdentity { sigma } => {
            let mut rng = derive_rng(&ctx.seed);
            let pixels = img_f
                .pixels()
                .iter()
                .map(|x| x + sigma * standard_normal(&mut rng))
                .collect();
            clipped(img_f, pixels)
        }
        GeneratorKind::External { pattern } => {
            let path = external_path(pattern, ctx.root, ctx.record, spec.view);
            if !path.is_file() {
                return Err(Error::MissingExternalImage { path });
            }
            let img = raster::read_normalized(&path)?;
            if !img.same_shape(img_f) {
                return Err(Error::ShapeMismatch {
                    expected: img_f.shape_string(),
                    actual: img.shape_string(),
                });
            }
            Ok(img)
        }
    }
}

/// Peak signal-to-noise ratio; identical images have no finite PSNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR `{t}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenQuality {
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

fn check_shapes(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: b.shape_string(),
            actual: a.shape_string(),
        })
    }
}

pub fn mse(synth: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_shapes(synth, target)?;
    let sum = compensated_sum(
        synth
            .pixels()
            .iter()
            .zip(target.pixels())
            .map(|(a, b)| (b - a) * (b - a)),
    );
    Ok(sum / synth.pixels().len() as f64)
}

/// Neumaier summation, so that a constant error image yields its exact square.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `10 log10(max(target)^2 / MSE)` with the target's own maximum as peak.
pub fn psnr(synth: &GrayImage, target: &GrayImage) -> Result<Psnr> {
    let m = mse(synth, target)?;
    if m == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let peak = target.max();
    if peak <= 0.0 {
        return Err(Error::UndefinedMax);
    }
    Ok(Psnr::Finite(10.0 * (peak * peak / m).log10()))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_B1: f64 = 0.01 * 0.01;
const SSIM_B2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" Gaussian filter.
fn filter_valid(data: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) lying inside the image,
/// with stabilizers for unit dynamic range.
pub fn ssim(synth: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_shapes(synth, target)?;
    let (w, h) = (target.width(), target.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            expected: format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            actual: target.shape_string(),
        });
    }
    let g = gaussian_taps();
    let x = target.pixels();
    let y = synth.pixels();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &g);
    let mu_y = filter_valid(y, w, h, &g);
    let e_xx = filter_valid(&xx, w, h, &g);
    let e_yy = filter_valid(&yy, w, h, &g);
    let e_xy = filter_valid(&xy, w, h, &g);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_B1) * (2.0 * cov + SSIM_B2))
            / ((mx * mx + my * my + SSIM_B1) * (vx + vy + SSIM_B2));
    }
    Ok(total / mu_x.len() as f64)
}

pub fn eval_generation(synth: &GrayImage, target: &GrayImage) -> Result<GenQuality> {
    Ok(GenQuality {
        mse: mse(synth, target)?,
        psnr: psnr(synth, target)?,
        ssim: ssim(synth, target)?,
    })
}
