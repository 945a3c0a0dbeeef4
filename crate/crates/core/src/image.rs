//! HSV image container.
//!
//! Channels are stored interleaved, row-major: `data[(y * w + x) * 3 + c]` with
//! `c = 0` hue in degrees `[0, 360)`, `c = 1` saturation `[0, 100]` and
//! `c = 2` value `[0, 100]`.

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

pub const CHANNELS: usize = 3;
pub const HUE_PERIOD: f64 = 360.0;
pub const SV_MAX: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsvImage {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl HsvImage {
    /// Black image (value 0, saturation 0, hue 0).
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, c: CHANNELS, data: vec![0.0; h * w * CHANNELS] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self { h, w, c: CHANNELS, data };
        img.check_shape()?;
        Ok(img)
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.w + x) * CHANNELS
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = self.idx(y, x);
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.c != CHANNELS {
            return Err(ReidError::invalid(format!("expected 3 channels, got {}", self.c)));
        }
        if self.data.len() != self.h * self.w * CHANNELS {
            return Err(ReidError::invalid(format!("image data length {} does not match {}x{}x3", self.data.len(), self.h, self.w)));
        }
        Ok(())
    }

    /// Checks shape and that every channel is inside its HSV range.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            let ok =
                px.iter().all(|v| v.is_finite()) && (0.0..HUE_PERIOD).contains(&px[0]) && (0.0..=SV_MAX).contains(&px[1]) && (0.0..=SV_MAX).contains(&px[2]);
            if !ok {
                return Err(ReidError::invalid(format!("pixel {i} out of HSV range: {:?}", px)));
            }
        }
        Ok(())
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.idx(y, self.w - 1 - x);
                let dst = self.idx(y, x);
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Converts to interleaved RGB in `[0, 1]`.
    pub fn to_rgb(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(CHANNELS) {
            out.extend_from_slice(&hsv_to_rgb(px[0], px[1], px[2]));
        }
        out
    }
}

/// Wraps a hue in degrees into `[0, 360)`.
#[inline]
pub fn wrap_hue(h: f64) -> f64 {
    let r = h.rem_euclid(HUE_PERIOD);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= HUE_PERIOD {
        0.0
    } else {
        r
    }
}

/// Standard HSV to RGB conversion; `s` and `v` in `[0, 100]`, output in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let s = (s / SV_MAX).clamp(0.0, 1.0);
    let v = (v / SV_MAX).clamp(0.0, 1.0);
    let c = v * s;
    let hp = wrap_hue(h) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
