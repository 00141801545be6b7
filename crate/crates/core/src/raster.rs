//! Row-major, channel-last `f32` images and boolean masks.

use serde::{Deserialize, Serialize};

/// `height × width × channels` image, row-major and channel-last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * value.len());
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Self { height, width, channels: value.len(), data }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self { height, width, channels, data })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = self.index(y, x);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Box blur with a `(2r+1)²` window, clamped at the borders.
    pub fn box_blur(&self, radius: usize) -> Raster {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Raster::zeros(self.height, self.width, self.channels);
        let r = radius as isize;
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = vec![0.0f32; self.channels];
                let mut n = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as isize + dy).clamp(0, self.height as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, self.width as isize - 1) as usize;
                        for (a, v) in acc.iter_mut().zip(self.pixel(yy, xx)) {
                            *a += v;
                        }
                        n += 1.0;
                    }
                }
                for (o, a) in out.pixel_mut(y, x).iter_mut().zip(acc) {
                    *o = a / n;
                }
            }
        }
        out
    }

    /// Mean squared 4-neighbour Laplacian over all channels, a simple
    /// high-frequency energy statistic.
    pub fn high_frequency_energy(&self) -> f64 {
        if self.height < 3 || self.width < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                for c in 0..self.channels {
                    let v = |yy: usize, xx: usize| self.data[self.index(yy, xx) + c] as f64;
                    let lap = 4.0 * v(y, x) - v(y - 1, x) - v(y + 1, x) - v(y, x - 1) - v(y, x + 1);
                    acc += lap * lap;
                    n += 1;
                }
            }
        }
        acc / n as f64
    }
}

/// `height × width` boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_flattens_and_lowers_energy() {
        let mut r = Raster::zeros(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                r.pixel_mut(y, x)[0] = ((x + y) % 2) as f32;
            }
        }
        let b = r.box_blur(1);
        assert!(b.high_frequency_energy() < r.high_frequency_energy());
        assert_eq!(Raster::filled(4, 4, &[0.3]).high_frequency_energy(), 0.0);
    }
}
