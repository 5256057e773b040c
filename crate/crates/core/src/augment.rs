//! Manufacturing-style augmentation: rotation about the center, brightness
//! shift, fine contour noise and blurred burn-off circles.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{self, Rng};

/// Rotates counter-clockwise by `angle_deg` about the image center with
/// bilinear sampling; pixels mapped from outside the frame take `background`.
pub fn rotate_center(img: &Image, angle_deg: f64, background: f32) -> Image {
    if angle_deg == 0.0 || !angle_deg.is_finite() {
        return img.clone();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Image::filled(h, w, c, background);
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output coordinate clockwise back into the source
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = snap(cx + cos * dx - sin * dy);
            let sy = snap(cy + sin * dx + cos * dy);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let top = (1.0 - fx) * img.get(y0, x0, ch) + fx * img.get(y0, x1, ch);
                let bottom = (1.0 - fx) * img.get(y1, x0, ch) + fx * img.get(y1, x1, ch);
                out.set(y, x, ch, (1.0 - fy) * top + fy * bottom);
            }
        }
    }
    out
}

/// `clamp(img + delta, 0, 1)`.
pub fn adjust_brightness(img: &Image, delta: f32) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + delta).clamp(0.0, 1.0);
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur of a row-major `h × w` plane, zero outside.
fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as i64 + j as i64 - r;
                if (0..w as i64).contains(&xx) {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if (0..h as i64).contains(&yy) {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn add_plane(img: &Image, plane: &[f32]) -> Image {
    let c = img.channels();
    let mut out = img.clone();
    for (p, add) in plane.iter().enumerate() {
        for ch in 0..c {
            let v = &mut out.data_mut()[p * c + ch];
            *v = (*v + add).clamp(0.0, 1.0);
        }
    }
    out
}

/// One burn-off disc.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
    /// Added brightness at full coverage; negative darkens.
    pub intensity: f64,
}

/// Draws `count` discs at seeded positions with radii and intensities drawn
/// from the given ranges, blurs them with `sigma` and adds them to every
/// channel. Returns the image and the discs drawn.
pub fn overlay_blurred_circles(
    img: &Image,
    count: usize,
    radii: (f64, f64),
    intensities: (f64, f64),
    sigma: f64,
    rng_seed: u64,
) -> (Image, Vec<Circle>) {
    let mut rng = seed::derived_rng(rng_seed, "circles", 0);
    let circles: Vec<Circle> = (0..count)
        .map(|_| Circle {
            y: rng.random_range(0.0..img.height() as f64),
            x: rng.random_range(0.0..img.width() as f64),
            radius: draw(&mut rng, radii),
            intensity: draw(&mut rng, intensities),
        })
        .collect();
    (draw_circles(img, &circles, sigma), circles)
}

fn draw_circles(img: &Image, circles: &[Circle], sigma: f64) -> Image {
    if circles.is_empty() {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut layer = vec![0f32; h * w];
    for c in circles {
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 + 0.5 - c.y).powi(2) + (x as f64 + 0.5 - c.x).powi(2)).sqrt();
                let cover = (c.radius - d + 0.5).clamp(0.0, 1.0);
                layer[y * w + x] += (c.intensity * cover) as f32;
            }
        }
    }
    add_plane(img, &blur_plane(&layer, h, w, sigma))
}

/// Adds Gaussian noise of standard deviation `amplitude`, blurred with
/// `sigma`, to every channel.
pub fn contour_noise(img: &Image, amplitude: f64, sigma: f64, rng: &mut Rng) -> Image {
    if amplitude == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let noise: Vec<f32> = (0..h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (amplitude * z) as f32
        })
        .collect();
    add_plane(img, &blur_plane(&noise, h, w, sigma))
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn draw_count(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Ranges the augmentation pipeline draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Degrees, counter-clockwise.
    pub rotation: (f64, f64),
    /// Fraction of full scale.
    pub brightness: (f64, f64),
    pub circles: (usize, usize),
    /// Pixels; at least 1.
    pub circle_radius: (f64, f64),
    pub circle_intensity: (f64, f64),
    /// Blur of the circle layer in pixels.
    pub blur_sigma: f64,
    pub contour_amplitude: f64,
    pub contour_sigma: f64,
    pub background: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: (-10.0, 10.0),
            brightness: (-0.1, 0.1),
            circles: (0, 3),
            circle_radius: (1.0, 3.0),
            circle_intensity: (-0.3, 0.3),
            blur_sigma: 1.0,
            contour_amplitude: 0.02,
            contour_sigma: 0.7,
            background: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Ranges that leave every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation: (0.0, 0.0),
            brightness: (0.0, 0.0),
            circles: (0, 0),
            circle_radius: (1.0, 1.0),
            circle_intensity: (0.0, 0.0),
            blur_sigma: 1.0,
            contour_amplitude: 0.0,
            contour_sigma: 0.7,
            background: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.rotation) || !ordered(self.brightness) || !ordered(self.circle_radius) || !ordered(self.circle_intensity) {
            return Err(Error::Config("augmentation ranges must be finite and ordered low to high".into()));
        }
        if self.circles.0 > self.circles.1 {
            return Err(Error::Config("circle count range is reversed".into()));
        }
        if self.circle_radius.0 < 1.0 {
            return Err(Error::Config("circle radii must be at least 1 pixel".into()));
        }
        if self.brightness.0 < -1.0 || self.brightness.1 > 1.0 {
            return Err(Error::Config("brightness shifts must lie in [-1, 1]".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.contour_amplitude >= 0.0 && self.contour_sigma >= 0.0) {
            return Err(Error::Config("blur and noise settings must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters drawn for one augmented image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub seed: u64,
    pub angle: f64,
    pub brightness: f64,
    pub circles: Vec<Circle>,
}

impl AugmentRecord {
    /// `key = value` lines for a provenance sidecar.
    pub fn to_sidecar(&self, source: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source = {source}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "angle = {}", self.angle);
        let _ = writeln!(s, "brightness = {}", self.brightness);
        let _ = writeln!(s, "circles = {}", self.circles.len());
        for (i, c) in self.circles.iter().enumerate() {
            let _ = writeln!(s, "circle.{i} = {} {} {} {}", c.y, c.x, c.radius, c.intensity);
        }
        s
    }
}

/// Rotation, brightness, contour noise and circles with parameters drawn
/// under `config.seed` mixed with `index`.
pub fn augment_pipeline(img: &Image, config: &AugmentConfig, index: u64) -> Result<(Image, AugmentRecord)> {
    config.validate()?;
    let seed = seed::derive(config.seed, "augment", index);
    let mut rng = seed::rng(seed);
    let angle = draw(&mut rng, config.rotation);
    let brightness = draw(&mut rng, config.brightness);
    let count = draw_count(&mut rng, config.circles);
    let (h, w) = (img.height() as f64, img.width() as f64);
    let circles: Vec<Circle> = (0..count)
        .map(|_| Circle {
            y: rng.random_range(0.0..h),
            x: rng.random_range(0.0..w),
            radius: draw(&mut rng, config.circle_radius),
            intensity: draw(&mut rng, config.circle_intensity),
        })
        .collect();

    let mut out = rotate_center(img, angle, config.background);
    if brightness != 0.0 {
        out = adjust_brightness(&out, brightness as f32);
    }
    out = contour_noise(&out, config.contour_amplitude, config.contour_sigma, &mut rng);
    out = draw_circles(&out, &circles, config.blur_sigma);
    Ok((
        out,
        AugmentRecord {
            seed,
            angle,
            brightness,
            circles,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k.len() % 2, 1);
    }
}
