//! Image preprocessing: pad to square, contrast stretch, normalize, resize,
//! laterality flip, and the random training-time augmentation.
//!
//! Every step is mirror-equivariant bit for bit, so a left breast and its
//! mirrored right counterpart preprocess to identical rasters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GrayImage, Laterality};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub stretch_lo_percentile: f64,
    pub stretch_hi_percentile: f64,
    /// Fraction of `min(width, height)` used as the background border band.
    pub border_frac: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 256,
            stretch_lo_percentile: 1.0,
            stretch_hi_percentile: 99.0,
            border_frac: 0.02,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.stretch_lo_percentile, self.stretch_hi_percentile);
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "stretch percentiles must satisfy 0 <= lo < hi <= 100, got {lo}, {hi}"
            )));
        }
        if self.target_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "target_size must be at least 8, got {}",
                self.target_size
            )));
        }
        if !(self.border_frac > 0.0 && self.border_frac <= 0.25) {
            return Err(Error::InvalidConfig(format!(
                "border_frac must lie in (0, 0.25], got {}",
                self.border_frac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub shift_frac: f64,
    pub zoom_frac: f64,
    pub rot_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_frac: 0.10,
            zoom_frac: 0.10,
            rot_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            shift_frac: 0.0,
            zoom_frac: 0.0,
            rot_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.shift_frac, self.zoom_frac, self.rot_deg]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidConfig(
                "augmentation ranges must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Horizontal shift as a fraction of the width.
    pub shift_x: f64,
    /// Vertical shift as a fraction of the height.
    pub shift_y: f64,
    pub zoom: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        shift_x: 0.0,
        shift_y: 0.0,
        zoom: 1.0,
        rotation_deg: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut symmetric = |range: f64| (2.0 * rng.random::<f64>() - 1.0) * range;
        let shift_x = symmetric(cfg.shift_frac);
        let shift_y = symmetric(cfg.shift_frac);
        let zoom = 1.0 + symmetric(cfg.zoom_frac);
        let rotation_deg = symmetric(cfg.rot_deg);
        AugmentParams {
            shift_x,
            shift_y,
            zoom,
            rotation_deg,
        }
    }
}

/// Mean over the frame of width `band` around the image edge.
///
/// Each row is summed in mirrored pairs so the result is invariant to a
/// horizontal flip.
fn border_mean(img: &GrayImage, band: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let band = band.clamp(1, w.min(h));
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        let row = img.row(y);
        let full = y < band || y >= h - band;
        let include = |x: usize| full || x < band || x >= w - band;
        let mut row_sum = 0.0;
        for x in 0..w / 2 {
            if include(x) {
                row_sum += row[x] + row[w - 1 - x];
                count += 2;
            }
        }
        if w % 2 == 1 && include(w / 2) {
            row_sum += row[w / 2];
            count += 1;
        }
        total += row_sum;
    }
    total / count as f64
}

fn band_width(img: &GrayImage, cfg: &PreprocessConfig) -> usize {
    let min_side = img.width().min(img.height()) as f64;
    ((cfg.border_frac * min_side).ceil() as usize).max(1)
}

/// Pads to a square of side `max(width, height)` with the mean border intensity.
/// Content is centered; an odd leftover pixel goes on the trailing side.
pub fn pad_square(img: &GrayImage, cfg: &PreprocessConfig) -> GrayImage {
    pad_square_with(img, cfg, false)
}

fn pad_square_with(img: &GrayImage, cfg: &PreprocessConfig, extra_on_left: bool) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    if w == h {
        return img.clone();
    }
    let fill = border_mean(img, band_width(img, cfg));
    let side = w.max(h);
    let extra_x = side - w;
    let left = if extra_on_left {
        extra_x - extra_x / 2
    } else {
        extra_x / 2
    };
    let top = (side - h) / 2;
    let mut pixels = vec![fill; side * side];
    for y in 0..h {
        let dst = (y + top) * side + left;
        pixels[dst..dst + w].copy_from_slice(img.row(y));
    }
    GrayImage::from_parts_unchecked(side, side, pixels, img.is_normalized())
}

/// Linear-interpolated percentile of already sorted values.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
    }
}

/// Maps the low percentile to 0 and the high percentile to the observed maximum,
/// clipping outside that interval.
pub fn contrast_stretch(img: &GrayImage, cfg: &PreprocessConfig) -> GrayImage {
    let mut sorted = img.pixels().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, cfg.stretch_lo_percentile);
    let hi = percentile(&sorted, cfg.stretch_hi_percentile);
    let top = sorted[sorted.len() - 1];
    if hi <= lo {
        return img.clone();
    }
    let span = hi - lo;
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0) * top)
        .collect();
    GrayImage::from_parts_unchecked(img.width(), img.height(), pixels, img.is_normalized())
}

/// Divides by the image maximum. Images already flagged normalized pass through.
pub fn normalize_unit(img: &GrayImage) -> GrayImage {
    if img.is_normalized() {
        return img.clone();
    }
    let max = img.max();
    let pixels = if max > 0.0 {
        img.pixels().iter().map(|&v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; img.pixels().len()]
    };
    GrayImage::from_parts_unchecked(img.width(), img.height(), pixels, true)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

#[inline]
fn lerp(a: f64, b: f64, w0: f64, w1: f64) -> f64 {
    if a == b {
        a
    } else {
        w0 * a + w1 * b
    }
}

/// Half-pixel-centered bilinear taps. The second half mirrors the first so
/// resizing commutes exactly with a flip.
#[allow(clippy::needless_range_loop)]
fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let mut out = vec![
        Tap {
            i0: 0,
            i1: 0,
            w0: 1.0,
            w1: 0.0
        };
        n_out
    ];
    let half = n_out.div_ceil(2);
    for d in 0..half {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let w1 = src - i0 as f64;
        out[d] = Tap {
            i0,
            i1,
            w0: 1.0 - w1,
            w1,
        };
    }
    for d in half..n_out {
        let t = out[n_out - 1 - d];
        out[d] = Tap {
            i0: n_in - 1 - t.i1,
            i1: n_in - 1 - t.i0,
            w0: t.w1,
            w1: t.w0,
        };
    }
    out
}

pub fn resize_bilinear(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if !img.is_square() {
        return Err(Error::NotSquare {
            width: img.width(),
            height: img.height(),
        });
    }
    if side == 0 {
        return Err(Error::InvalidImage("resize target must be positive".into()));
    }
    let n = img.width();
    if n == side {
        return Ok(img.clone());
    }
    let (lo, hi) = (img.min(), img.max());
    let t = taps(n, side);
    let mut pixels = Vec::with_capacity(side * side);
    for ty in &t {
        let r0 = img.row(ty.i0);
        let r1 = img.row(ty.i1);
        for tx in &t {
            let top = lerp(r0[tx.i0], r0[tx.i1], tx.w0, tx.w1);
            let bottom = lerp(r1[tx.i0], r1[tx.i1], tx.w0, tx.w1);
            pixels.push(lerp(top, bottom, ty.w0, ty.w1).clamp(lo, hi));
        }
    }
    Ok(GrayImage::from_parts_unchecked(
        side,
        side,
        pixels,
        img.is_normalized(),
    ))
}

/// Mirrors left-breast images so every breast faces the same way.
pub fn flip_to_right(img: &GrayImage, lat: Laterality) -> GrayImage {
    match lat {
        Laterality::Right => img.clone(),
        Laterality::Left => {
            let w = img.width();
            let mut pixels = img.pixels().to_vec();
            for row in pixels.chunks_exact_mut(w) {
                row.reverse();
            }
            GrayImage::from_parts_unchecked(w, img.height(), pixels, img.is_normalized())
        }
    }
}

/// Full chain: pad, stretch, normalize, resize, flip.
///
/// Left images put an odd padding pixel on the leading edge so the chain
/// stays mirror-equivariant; otherwise this is exactly the composition of the
/// individual steps.
pub fn preprocess(img: &GrayImage, lat: Laterality, cfg: &PreprocessConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let padded = pad_square_with(img, cfg, lat == Laterality::Left);
    let stretched = contrast_stretch(&padded, cfg);
    let normalized = normalize_unit(&stretched);
    let resized = resize_bilinear(&normalized, cfg.target_size)?;
    Ok(flip_to_right(&resized, lat))
}

/// Applies one random shift, zoom and rotation drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    let params = AugmentParams::sample(cfg, rng);
    apply_augment(img, &params)
}

/// Inverse-maps every output pixel through the transform and samples bilinearly;
/// samples falling outside the frame take the mean of the outermost pixel ring.
pub fn apply_augment(img: &GrayImage, p: &AugmentParams) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let fill = border_mean(img, 1);
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ux = (x as f64 + 0.5 - cx) - p.shift_x * wf;
            let uy = (y as f64 + 0.5 - cy) - p.shift_y * hf;
            let rx = cos * ux + sin * uy;
            let ry = -sin * ux + cos * uy;
            let sx = rx / p.zoom + cx - 0.5;
            let sy = ry / p.zoom + cy - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > wf - 0.5 || sy > hf - 0.5 {
                pixels.push(fill);
                continue;
            }
            let sx = sx.clamp(0.0, wf - 1.0);
            let sy = sy.clamp(0.0, hf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let top = lerp(img.get(x0, y0), img.get(x1, y0), 1.0 - fx, fx);
            let bottom = lerp(img.get(x0, y1), img.get(x1, y1), 1.0 - fx, fx);
            let mut v = lerp(top, bottom, 1.0 - fy, fy);
            if img.is_normalized() {
                v = v.clamp(0.0, 1.0);
            }
            pixels.push(v);
        }
    }
    GrayImage::from_parts_unchecked(w, h, pixels, img.is_normalized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{derive_rng, SeedPath};
    use proptest::prelude::*;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    fn img(w: usize, h: usize, px: &[f64]) -> GrayImage {
        GrayImage::new(w, h, px.to_vec()).unwrap()
    }

    fn mirror(img: &GrayImage) -> GrayImage {
        flip_to_right(img, Laterality::Left)
    }

    #[test]
    fn pad_square_keeps_square_input() {
        let x = GrayImage::from_fn(4, 4, |x, y| (x * 4 + y) as f64).unwrap();
        assert_eq!(pad_square(&x, &cfg()), x);
    }

    #[test]
    fn pad_square_zero_background_adds_zero_rows() {
        // 4 wide, 2 tall: every pixel of such a thin image is border
        let x = img(4, 2, &[0.0; 8]);
        let out = pad_square(&x, &cfg());
        assert_eq!((out.width(), out.height()), (4, 4));
        assert!(out.row(0).iter().all(|&v| v == 0.0));
        assert!(out.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_square_centers_and_uses_border_mean() {
        // 3 wide, 5 tall constant 7 -> 5x5 constant 7
        let x = GrayImage::filled(3, 5, 7.0).unwrap();
        let out = pad_square(&x, &cfg());
        assert_eq!((out.width(), out.height()), (5, 5));
        assert!(out.pixels().iter().all(|&v| v == 7.0));

        // 2 wide, 5 tall: 3 extra columns, 1 leading and 2 trailing
        let x = GrayImage::from_fn(2, 5, |_, _| 9.0).unwrap();
        let out = pad_square(&x, &cfg());
        assert!(out.pixels().iter().all(|&v| v == 9.0));
        let marked = GrayImage::from_fn(2, 3, |x, _| if x == 0 { 5.0 } else { 1.0 }).unwrap();
        let out = pad_square(&marked, &cfg());
        // one trailing column filled with the border mean of 3
        for y in 0..3 {
            assert_eq!(out.row(y), &[5.0, 1.0, 3.0]);
        }
    }

    #[test]
    fn border_band_excludes_interior() {
        let x = GrayImage::from_fn(10, 6, |x, y| {
            if (1..9).contains(&x) && (1..5).contains(&y) { 100.0 } else { 2.0 }
        })
        .unwrap();
        assert_eq!(border_mean(&x, 1), 2.0);
    }

    #[test]
    fn contrast_stretch_examples() {
        let flat = GrayImage::filled(3, 3, 4.0).unwrap();
        assert_eq!(contrast_stretch(&flat, &cfg()), flat);

        let full_range = cfg_with(0.0, 100.0);
        let ramp = GrayImage::from_fn(256, 1, |x, _| x as f64).unwrap();
        assert_eq!(contrast_stretch(&ramp, &full_range), ramp);

        let x = img(3, 1, &[10.0, 20.0, 30.0]);
        assert_eq!(contrast_stretch(&x, &full_range).pixels(), &[0.0, 15.0, 30.0]);
    }

    fn cfg_with(lo: f64, hi: f64) -> PreprocessConfig {
        PreprocessConfig {
            stretch_lo_percentile: lo,
            stretch_hi_percentile: hi,
            ..cfg()
        }
    }

    #[test]
    fn contrast_stretch_clips_outliers() {
        let mut px: Vec<f64> = (0..100).map(|v| v as f64).collect();
        px[99] = 10_000.0;
        let x = img(100, 1, &px);
        let out = contrast_stretch(&x, &cfg());
        assert_eq!(out.pixels()[0], 0.0);
        assert_eq!(out.pixels()[99], 10_000.0);
        assert!(out.pixels().iter().all(|&v| (0.0..=10_000.0).contains(&v)));
    }

    #[test]
    fn normalize_unit_examples() {
        let x = img(3, 1, &[0.0, 128.0, 255.0]);
        let n = normalize_unit(&x);
        assert_eq!(n.pixels(), &[0.0, 128.0 / 255.0, 1.0]);
        assert!(n.is_normalized());

        let z = normalize_unit(&GrayImage::filled(2, 2, 0.0).unwrap());
        assert!(z.is_normalized());
        assert!(z.pixels().iter().all(|&v| v == 0.0));

        let already = GrayImage::new_normalized(2, 1, vec![0.1, 0.5]).unwrap();
        assert_eq!(normalize_unit(&already), already);
        assert_eq!(normalize_unit(&n), n);
    }

    #[test]
    fn resize_examples() {
        let x = GrayImage::from_fn(256, 256, |x, y| ((x * 7 + y * 3) % 11) as f64).unwrap();
        assert_eq!(resize_bilinear(&x, 256).unwrap(), x);

        let c = GrayImage::filled(2, 2, 0.3).unwrap();
        let r = resize_bilinear(&c, 9).unwrap();
        assert!(r.pixels().iter().all(|&v| v == 0.3));

        let checker = GrayImage::from_fn(4, 4, |x, y| ((x + y) % 2) as f64).unwrap();
        let r = resize_bilinear(&checker, 2).unwrap();
        assert_eq!(r.pixels(), &[0.5; 4]);

        assert!(matches!(
            resize_bilinear(&GrayImage::filled(2, 3, 0.0).unwrap(), 4),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn flip_examples() {
        let x = img(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(flip_to_right(&x, Laterality::Right), x);
        assert_eq!(flip_to_right(&x, Laterality::Left).pixels(), &[3.0, 2.0, 1.0]);
        assert_eq!(mirror(&mirror(&x)), x);
    }

    #[test]
    fn chain_output_contract() {
        let x = GrayImage::from_fn(37, 53, |x, y| ((x * 13 + y * 29) % 400) as f64).unwrap();
        let out = preprocess(&x, Laterality::Right, &cfg()).unwrap();
        assert_eq!((out.width(), out.height()), (256, 256));
        assert!(out.is_normalized());
        assert!(out.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let flat = preprocess(&GrayImage::filled(3, 5, 7.0).unwrap(), Laterality::Left, &cfg()).unwrap();
        assert!(flat.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn chain_is_laterality_symmetric_for_odd_padding() {
        // 3 wide, 6 tall: three padding columns split unevenly
        let x = GrayImage::from_fn(3, 6, |x, y| (x * 10 + y) as f64 + 1.0).unwrap();
        let cfg = PreprocessConfig {
            target_size: 16,
            ..cfg()
        };
        let right = preprocess(&x, Laterality::Right, &cfg).unwrap();
        let left = preprocess(&mirror(&x), Laterality::Left, &cfg).unwrap();
        assert_eq!(right, left);
    }

    #[test]
    fn null_augmentation_is_identity() {
        let x = GrayImage::from_fn(16, 16, |x, y| ((x * 5 + y * 3) % 17) as f64 / 16.0).unwrap();
        let mut rng = derive_rng(&SeedPath::root(1));
        assert_eq!(augment(&x, &AugmentConfig::none(), &mut rng), x);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let x = GrayImage::from_fn(16, 16, |x, y| ((x * 5 + y * 3) % 17) as f64).unwrap();
        let path = SeedPath::root(3).child("aug", 0);
        let a = augment(&x, &AugmentConfig::default(), &mut derive_rng(&path));
        let b = augment(&x, &AugmentConfig::default(), &mut derive_rng(&path));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn opposite_rotations_are_mirror_images() {
        // vertically symmetric fixture: rotating by -r equals the vertical mirror of rotating by r
        let n = 24;
        let x = GrayImage::from_fn(n, n, |x, y| {
            let dy = (y as f64 + 0.5 - 12.0).abs();
            (x as f64 * 0.3 + dy * dy * 0.1).sin().abs()
        })
        .unwrap();
        let rot = |deg| AugmentParams {
            rotation_deg: deg,
            ..AugmentParams::IDENTITY
        };
        let a = apply_augment(&x, &rot(11.0));
        let b = apply_augment(&x, &rot(-11.0));
        for y in 0..n {
            for xx in 0..n {
                assert!((a.get(xx, y) - b.get(xx, n - 1 - y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn radially_symmetric_image_is_rotation_stable() {
        let n = 32;
        let x = GrayImage::from_fn(n, n, |x, y| {
            let dx = x as f64 + 0.5 - 16.0;
            let dy = y as f64 + 0.5 - 16.0;
            (-(dx * dx + dy * dy) / 60.0).exp()
        })
        .unwrap();
        let rot = |deg| AugmentParams {
            rotation_deg: deg,
            ..AugmentParams::IDENTITY
        };
        let a = apply_augment(&x, &rot(13.0));
        let b = apply_augment(&x, &rot(-13.0));
        let worst = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "max diff {worst}");
    }

    proptest! {
        #[test]
        fn stretch_is_monotone(px in proptest::collection::vec(0.0f64..1000.0, 4..64)) {
            let x = GrayImage::new(px.len(), 1, px.clone()).unwrap();
            let out = contrast_stretch(&x, &cfg());
            for i in 0..px.len() {
                for j in 0..px.len() {
                    if px[i] <= px[j] {
                        prop_assert!(out.pixels()[i] <= out.pixels()[j]);
                    }
                }
            }
        }

        #[test]
        fn preprocess_contract_holds(w in 1usize..40, h in 1usize..40, seed in 0u64..1000) {
            let x = GrayImage::from_fn(w, h, |x, y| {
                ((x as u64 * 31 + y as u64 * 17 + seed) % 4096) as f64
            }).unwrap();
            let cfg = PreprocessConfig { target_size: 32, ..cfg() };
            let out = preprocess(&x, Laterality::Right, &cfg).unwrap();
            prop_assert_eq!((out.width(), out.height()), (32, 32));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let left = preprocess(&mirror(&x), Laterality::Left, &cfg).unwrap();
            prop_assert_eq!(left, out);
        }
    }
}
