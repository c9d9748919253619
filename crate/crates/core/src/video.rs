use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// rgb-like appearance stream
    A,
    /// depth-like auxiliary stream
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Condition,
    Target,
}

/// A T x H x W x C frame tensor for one modality, values in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub modality: Modality,
    pub role: Role,
    pub data: Vec<f64>,
}

impl VideoClip {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize, modality: Modality, role: Role) -> Self {
        VideoClip { t, h, w, c, modality, role, data: vec![0.0; t * h * w * c] }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, ch: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(t, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(t, y, x, ch);
        self.data[i] = v;
    }

    pub fn pixels(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.t < 1 {
            return Err(Error::InvalidGeometry("T must be >= 1".into()));
        }
        if self.h % patch != 0 || self.w % patch != 0 {
            return Err(Error::InvalidGeometry(format!(
                "H={} and W={} must be divisible by patch size {}",
                self.h, self.w, patch
            )));
        }
        if self.data.len() != self.pixels() {
            return Err(Error::ShapeMismatch("frame buffer size mismatch".into()));
        }
        if self.data.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::Domain("clip values must be finite and in [-1, 1]".into()));
        }
        Ok(())
    }

    /// Frames [t0, t0+len) as a new clip.
    pub fn window(&self, t0: usize, len: usize, role: Role) -> Result<VideoClip> {
        if t0 + len > self.t {
            return Err(Error::Domain(format!(
                "window [{}, {}) out of range for T={}",
                t0,
                t0 + len,
                self.t
            )));
        }
        let stride = self.h * self.w * self.c;
        Ok(VideoClip {
            t: len,
            h: self.h,
            w: self.w,
            c: self.c,
            modality: self.modality,
            role,
            data: self.data[t0 * stride..(t0 + len) * stride].to_vec(),
        })
    }

    /// Concatenate frames of `other` after `self` along time.
    pub fn append_frames(&mut self, other: &VideoClip) -> Result<()> {
        if self.h != other.h || self.w != other.w || self.c != other.c {
            return Err(Error::ShapeMismatch("append_frames geometry".into()));
        }
        self.data.extend_from_slice(&other.data);
        self.t += other.t;
        Ok(())
    }

    /// Build a fixed-length conditioning clip from the most recent frames,
    /// left-padding by repeating the earliest available frame when the
    /// window is shorter than the codec geometry.
    pub fn pad_to_length(&self, t_out: usize) -> VideoClip {
        let stride = self.h * self.w * self.c;
        let mut data = Vec::with_capacity(t_out * stride);
        for t in 0..t_out {
            let src = if t_out - t > self.t { 0 } else { self.t - (t_out - t) };
            data.extend_from_slice(&self.data[src * stride..(src + 1) * stride]);
        }
        VideoClip {
            t: t_out,
            h: self.h,
            w: self.w,
            c: self.c,
            modality: self.modality,
            role: Role::Condition,
            data,
        }
    }

    pub fn mse(&self, other: &VideoClip) -> Result<f64> {
        if self.t != other.t || self.h != other.h || self.w != other.w || self.c != other.c {
            return Err(Error::ShapeMismatch("mse geometry".into()));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}
