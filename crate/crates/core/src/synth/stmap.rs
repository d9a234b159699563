//! STMap containers: raw per-region traces and the normalized model input.

use serde::{Deserialize, Serialize};

use super::SynthError;

pub const CHANNELS: usize = 3;

/// Raw per-frame, per-region RGB means before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTraces {
    pub frames: usize,
    pub regions: usize,
    pub frame_rate_hz: f64,
    /// Index of the first frame in the source stream.
    pub t0: usize,
    /// `frames x regions x 3`, row-major.
    pub data: Vec<f64>,
}

impl RoiTraces {
    pub fn new(
        frames: usize,
        regions: usize,
        frame_rate_hz: f64,
        t0: usize,
        data: Vec<f64>,
    ) -> Result<Self, SynthError> {
        if data.len() != frames * regions * CHANNELS {
            return Err(SynthError::Shape {
                expected: frames * regions * CHANNELS,
                actual: data.len(),
            });
        }
        Ok(Self {
            frames,
            regions,
            frame_rate_hz,
            t0,
            data,
        })
    }

    pub fn get(&self, t: usize, w: usize, c: usize) -> f64 {
        self.data[(t * self.regions + w) * CHANNELS + c]
    }

    /// Frames `[start, start + len)` as a new trace set.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, SynthError> {
        if start + len > self.frames {
            return Err(SynthError::WindowTooLong {
                window: start + len,
                available: self.frames,
            });
        }
        let row = self.regions * CHANNELS;
        Ok(Self {
            frames: len,
            regions: self.regions,
            frame_rate_hz: self.frame_rate_hz,
            t0: self.t0 + start,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    /// Resize the region axis to `width` columns, then min-max normalize
    /// every column.
    pub fn to_stmap(&self, width: usize) -> Stmap {
        let resized = resize_regions(&self.data, self.frames, self.regions, width);
        let mut map = Stmap {
            frames: self.frames,
            width,
            frame_rate_hz: self.frame_rate_hz,
            t0: self.t0,
            data: resized,
        };
        map.normalize_in_place();
        map
    }
}

/// A `T x W x 3` spatio-temporal map with every column scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stmap {
    pub frames: usize,
    pub width: usize,
    pub frame_rate_hz: f64,
    pub t0: usize,
    /// `frames x width x 3`, row-major.
    pub data: Vec<f64>,
}

impl Stmap {
    pub fn new(
        frames: usize,
        width: usize,
        frame_rate_hz: f64,
        t0: usize,
        data: Vec<f64>,
    ) -> Result<Self, SynthError> {
        if data.len() != frames * width * CHANNELS {
            return Err(SynthError::Shape {
                expected: frames * width * CHANNELS,
                actual: data.len(),
            });
        }
        Ok(Self {
            frames,
            width,
            frame_rate_hz,
            t0,
            data,
        })
    }

    pub fn get(&self, t: usize, w: usize, c: usize) -> f64 {
        self.data[(t * self.width + w) * CHANNELS + c]
    }

    pub fn column(&self, w: usize, c: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, w, c)).collect()
    }

    /// Frames `[start, start + len)`, not renormalized.
    pub fn frames_slice(&self, start: usize, len: usize) -> Result<Stmap, SynthError> {
        if start + len > self.frames {
            return Err(SynthError::WindowTooLong {
                window: start + len,
                available: self.frames,
            });
        }
        let row = self.width * CHANNELS;
        Ok(Stmap {
            frames: len,
            width: self.width,
            frame_rate_hz: self.frame_rate_hz,
            t0: self.t0 + start,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    pub fn normalized(&self) -> Stmap {
        let mut m = self.clone();
        m.normalize_in_place();
        m
    }

    /// Per-column min-max scaling; constant columns become 0.5.
    pub fn normalize_in_place(&mut self) {
        normalize_columns(&mut self.data, self.frames, self.width * CHANNELS);
    }

    /// Channel-major copy `[3, frames, width]` for the convolutional stem.
    pub fn to_chw(&self) -> Vec<f64> {
        let (t_len, w_len) = (self.frames, self.width);
        let mut out = vec![0.0; CHANNELS * t_len * w_len];
        for t in 0..t_len {
            for w in 0..w_len {
                for c in 0..CHANNELS {
                    out[(c * t_len + t) * w_len + w] = self.data[(t * w_len + w) * CHANNELS + c];
                }
            }
        }
        out
    }

    /// Mean over columns of channel `c`, per frame.
    pub fn region_mean(&self, c: usize) -> Vec<f64> {
        (0..self.frames)
            .map(|t| (0..self.width).map(|w| self.get(t, w, c)).sum::<f64>() / self.width as f64)
            .collect()
    }
}

/// Min-max normalizes each of the `cols` interleaved columns of a
/// `rows x cols` buffer.
pub fn normalize_columns(data: &mut [f64], rows: usize, cols: usize) {
    for col in 0..cols {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..rows {
            let v = data[r * cols + col];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for r in 0..rows {
            let v = &mut data[r * cols + col];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        }
    }
}

/// Linear interpolation along the region axis with aligned end points.
pub fn resize_regions(data: &[f64], frames: usize, regions: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames * width * CHANNELS];
    for j in 0..width {
        let pos = if width > 1 {
            j as f64 * (regions - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(regions - 1);
        let hi = (lo + 1).min(regions - 1);
        let frac = pos - lo as f64;
        for t in 0..frames {
            for c in 0..CHANNELS {
                let a = data[(t * regions + lo) * CHANNELS + c];
                let b = data[(t * regions + hi) * CHANNELS + c];
                out[(t * width + j) * CHANNELS + c] =
                    if frac == 0.0 { a } else { a + frac * (b - a) };
            }
        }
    }
    out
}
