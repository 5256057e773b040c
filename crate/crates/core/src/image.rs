use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Image with pixel values in `[0, 1]`, stored row-major as `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || channels == 0 {
            return Err(shape_err!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel image from a row-major `[H, W]` buffer.
    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[H, W, C]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Concatenates single- or multi-channel images along the channel axis.
    pub fn from_channels(parts: &[&Image]) -> Result<Image> {
        let first = parts.first().ok_or_else(|| shape_err!("no channels given"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(shape_err!("channel planes differ in size"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for px in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Image::new(h, w, channels, data)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Planar `[C, H, W]` values as `f64`, the layout networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let hw = self.height * self.width;
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c] as f64;
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`].
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Image> {
        if chw.len() != height * width * channels {
            return Err(shape_err!(
                "{} planar values for a {height}x{width}x{channels} image",
                chw.len()
            ));
        }
        let hw = height * width;
        let mut data = vec![0.0f32; chw.len()];
        for p in 0..hw {
            for c in 0..channels {
                data[p * channels + c] = chw[c * hw + p] as f32;
            }
        }
        Image::new(height, width, channels, data)
    }

    /// Box-filter downscale by an integer factor (trailing pixels dropped).
    pub fn downscale(&self, factor: usize) -> Result<Image> {
        if factor == 0 || factor > self.height || factor > self.width {
            return Err(shape_err!(
                "cannot downscale {}x{} by {factor}",
                self.height,
                self.width
            ));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w, c) = (self.height / factor, self.width / factor, self.channels);
        let norm = (factor * factor) as f32;
        let mut data = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(y * factor + dy, x * factor + dx, ch);
                        }
                    }
                    data[(y * w + x) * c + ch] = acc / norm;
                }
            }
        }
        Image::new(h, w, c, data)
    }
}

/// Stacks images into a `[N, C, H, W]` network batch.
pub fn batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("empty image batch"))?;
    let [h, w, c] = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != first.shape() {
            return Err(shape_err!(
                "batch mixes image shapes {:?} and {:?}",
                first.shape(),
                img.shape()
            ));
        }
        data.extend(img.to_chw());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = Image::new(2, 3, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let chw = img.to_chw();
        assert_eq!(chw[0], 0.0);
        assert_eq!(chw[1] as f32, img.get(0, 1, 0));
        assert_eq!(Image::from_chw(2, 3, 2, &chw).unwrap(), img);
    }

    #[test]
    fn channels_split_and_join() {
        let a = Image::filled(2, 2, 1, 0.25);
        let b = Image::filled(2, 2, 1, 0.75);
        let ab = Image::from_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.channels(), 2);
        assert_eq!(ab.channel(0), a);
        assert_eq!(ab.channel(1), b);
    }

    #[test]
    fn downscale_averages_blocks() {
        let img = Image::gray(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = img.downscale(2).unwrap();
        assert_eq!(d.data(), &[0.5]);
    }
}
