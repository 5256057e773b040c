//! Procedural anode images.
//!
//! Each class is one anode: a textured rectangle carrying a handful of
//! circular stubs. Views of a class keep the stubs fixed and vary surface
//! brightness and texture, the way a part changes between photographs taken
//! before and after baking.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{pgm, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Generator parameters. Lengths are in pixels, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticAnodeSpec {
    pub height: usize,
    pub width: usize,
    pub stubs_min: usize,
    pub stubs_max: usize,
    pub stub_radius_min: f64,
    pub stub_radius_max: f64,
    /// How much darker a stub is than the surface around it.
    pub stub_contrast: f64,
    /// Standard deviation of the per-anode coarse surface texture.
    pub texture_scale: f64,
    /// Largest absolute brightness shift between views.
    pub bake_brightness: f64,
    /// Standard deviation of per-view fine texture noise.
    pub bake_texture: f64,
    pub seed: u64,
}

impl Default for SyntheticAnodeSpec {
    fn default() -> Self {
        SyntheticAnodeSpec {
            height: 24,
            width: 24,
            stubs_min: 3,
            stubs_max: 6,
            stub_radius_min: 1.5,
            stub_radius_max: 3.0,
            stub_contrast: 0.35,
            texture_scale: 0.04,
            bake_brightness: 0.1,
            bake_texture: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticAnodeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("anode images must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.stubs_min < 1 || self.stubs_min > self.stubs_max {
            return bad(format!("stub count range {}..={} is invalid", self.stubs_min, self.stubs_max));
        }
        if !(self.stub_radius_min > 0.0 && self.stub_radius_min < self.stub_radius_max) {
            return bad(format!(
                "stub radius range {}..{} is invalid",
                self.stub_radius_min, self.stub_radius_max
            ));
        }
        if 2.0 * self.stub_radius_max + 6.0 > self.height.min(self.width) as f64 {
            return bad("stubs do not fit on the anode".into());
        }
        let nonneg = [self.stub_contrast, self.texture_scale, self.bake_brightness, self.bake_texture];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("contrast, texture and bake settings must be non-negative".into());
        }
        Ok(())
    }
}

/// A circular surface feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stub {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
}

/// Identity-carrying geometry of one anode.
#[derive(Clone, Debug, PartialEq)]
pub struct AnodeLayout {
    /// Body rectangle `[top, left, bottom, right)` in pixels.
    pub body: [usize; 4],
    pub surface: f64,
    pub stubs: Vec<Stub>,
    /// Coarse texture sampled on the full pixel grid.
    texture: Vec<f64>,
}

const BACKGROUND: f64 = 0.08;

fn layout(spec: &SyntheticAnodeSpec, class: usize) -> AnodeLayout {
    let mut rng = seed::derived_rng(spec.seed, "anode", class as u64);
    let (h, w) = (spec.height, spec.width);
    let top = rng.random_range(1..=2);
    let left = rng.random_range(1..=2);
    let bottom = h - rng.random_range(1..=2);
    let right = w - rng.random_range(1..=2);
    let surface = rng.random_range(0.45..0.65);

    let count = rng.random_range(spec.stubs_min..=spec.stubs_max);
    let mut stubs = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(spec.stub_radius_min..spec.stub_radius_max);
        let y = rng.random_range(top as f64 + radius + 0.5..bottom as f64 - radius - 0.5);
        let x = rng.random_range(left as f64 + radius + 0.5..right as f64 - radius - 0.5);
        stubs.push(Stub { y, x, radius });
    }

    // 5x5 lattice of N(0, texture) bilinearly interpolated over the image
    let normal = Normal::new(0.0, spec.texture_scale.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let lattice: Vec<f64> = (0..25)
        .map(|_| if spec.texture_scale > 0.0 { normal.sample(&mut rng) } else { 0.0 })
        .collect();
    let mut texture = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h - 1) as f64 * 4.0;
            let gx = x as f64 / (w - 1) as f64 * 4.0;
            let (y0, x0) = ((gy.floor() as usize).min(3), (gx.floor() as usize).min(3));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |r: usize, c: usize| lattice[r * 5 + c];
            texture[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    AnodeLayout {
        body: [top, left, bottom, right],
        surface,
        stubs,
        texture,
    }
}

/// Layouts of classes `0..n_classes`.
pub fn anode_layouts(spec: &SyntheticAnodeSpec, n_classes: usize) -> Result<Vec<AnodeLayout>> {
    spec.validate()?;
    Ok((0..n_classes).map(|c| layout(spec, c)).collect())
}

fn render(spec: &SyntheticAnodeSpec, anode: &AnodeLayout, class: usize, view: usize) -> Image {
    let mut rng = seed::derived_rng(spec.seed, "bake", ((class as u64) << 20) | view as u64);
    let shift = if spec.bake_brightness > 0.0 {
        rng.random_range(-spec.bake_brightness..=spec.bake_brightness)
    } else {
        0.0
    };
    let grain = rng.random_range(0.6..1.4);
    let noise = Normal::new(0.0, spec.bake_texture.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let use_noise = spec.bake_texture > 0.0;
    let (h, w) = (spec.height, spec.width);
    let [top, left, bottom, right] = anode.body;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fine = if use_noise { noise.sample(&mut rng) } else { 0.0 };
            let inside = (top..bottom).contains(&y) && (left..right).contains(&x);
            let v = if inside {
                let mut v = anode.surface + shift + grain * anode.texture[y * w + x] + fine;
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                for s in &anode.stubs {
                    let d = ((py - s.y).powi(2) + (px - s.x).powi(2)).sqrt();
                    let cover = (s.radius - d + 0.5).clamp(0.0, 1.0);
                    v -= spec.stub_contrast * cover;
                }
                v
            } else {
                BACKGROUND + 0.5 * shift + fine
            };
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::gray(h, w, data).expect("buffer matches dims")
}

/// Generates `views_per_class` views of each of `n_classes` anodes.
/// Images are ordered class-major.
pub fn generate_synthetic_anodes(spec: &SyntheticAnodeSpec, n_classes: usize, views_per_class: usize) -> Result<Dataset> {
    let layouts = anode_layouts(spec, n_classes)?;
    let mut images = Vec::with_capacity(n_classes * views_per_class);
    let mut class_ids = Vec::with_capacity(images.capacity());
    let mut origins = Vec::with_capacity(images.capacity());
    for (c, anode) in layouts.iter().enumerate() {
        for v in 0..views_per_class {
            images.push(render(spec, anode, c, v));
            class_ids.push(c);
            origins.push(format!("synthetic-anode/c{c:03}/v{v}"));
        }
    }
    Dataset::new(
        images,
        class_ids,
        origins,
        DatasetMeta {
            source: format!("synthetic-anodes(seed={})", spec.seed),
            synthetic: true,
        },
    )
}

/// Writes single-channel datasets as `dir/s<class+1>/<k+1>.pgm`, the layout
/// [`pgm::load_pgm_faces`] reads back.
pub fn export_pgm_tree(dataset: &Dataset, dir: &Path) -> Result<()> {
    for (class, idx) in dataset.by_class() {
        for (k, &i) in idx.iter().enumerate() {
            let path = dir.join(format!("s{}", class + 1)).join(format!("{}.pgm", k + 1));
            pgm::write_pgm(&path, dataset.image(i))?;
        }
    }
    Ok(())
}
