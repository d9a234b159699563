//! Spectral and rhythm analysis of pulse signals.
//!
//! The periodogram is computed as an explicit product with precomputed
//! cosine/sine basis matrices so that it can sit inside a [`Graph`] as a
//! plain linear map. Frequencies are carried in beats per minute.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Heart-rate search band used by default, in bpm.
pub const HR_BAND_BPM: (f64, f64) = (42.0, 180.0);
/// Minimum signal length accepted by [`DftBasis`].
pub const MIN_PSD_LEN: usize = 64;
/// Sampling rate of the interpolated inter-beat-interval series.
pub const IBI_RESAMPLE_HZ: f64 = 4.0;
pub const LF_BAND_HZ: (f64, f64) = (0.04, 0.15);
pub const HF_BAND_HZ: (f64, f64) = (0.15, 0.4);
/// Physiologic ceiling used for the minimum beat separation.
pub const MAX_HR_BPM: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("degenerate signal: spectrum has no positive power")]
    DegenerateSignal,
    #[error("signal of {len} samples is shorter than the required {min}")]
    TooShort { len: usize, min: usize },
    #[error("invalid band [{lo}, {hi}] bpm for frame rate {frame_rate_hz} Hz")]
    InvalidBand { lo: f64, hi: f64, frame_rate_hz: f64 },
    #[error("band [{lo}, {hi}] retains no frequency bins")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("insufficient beats: found {found}, need {needed}")]
    InsufficientBeats { found: usize, needed: usize },
    #[error("degenerate IBI spectrum: LF + HF power is zero")]
    DegenerateIbiSpectrum,
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A 1-D pulse waveform sampled at a known frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSignal {
    pub samples: Vec<f64>,
    pub frame_rate_hz: f64,
}

impl BvpSignal {
    pub fn new(samples: Vec<f64>, frame_rate_hz: f64) -> Self {
        Self {
            samples,
            frame_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.frame_rate_hz
    }
}

/// Power spectrum restricted to a frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub freqs_bpm: Vec<f64>,
    pub power: Vec<f64>,
    pub frame_rate_hz: f64,
}

impl Psd {
    pub fn max_power(&self) -> f64 {
        self.power.iter().cloned().fold(0.0, f64::max)
    }

    /// Spacing between adjacent bins, in bpm.
    pub fn bin_width_bpm(&self) -> f64 {
        if self.freqs_bpm.len() >= 2 {
            self.freqs_bpm[1] - self.freqs_bpm[0]
        } else {
            f64::NAN
        }
    }
}

/// Precomputed real-DFT rows for the bins inside a band.
///
/// Rows are centered (row mean subtracted), so multiplying by the basis
/// applies mean removal and the DFT in one linear map. Power per bin is
/// `|X_k|^2 / T`, with the Nyquist bin halved; with the full band retained
/// the bins sum to `sum((x - mean)^2) / 2`.
#[derive(Debug, Clone)]
pub struct DftBasis {
    len: usize,
    frame_rate_hz: f64,
    bins: Vec<usize>,
    freqs_bpm: Vec<f64>,
    cos: Tensor,
    sin: Tensor,
    /// Per-bin power scale.
    scale: Vec<f64>,
}

impl DftBasis {
    pub fn new(len: usize, frame_rate_hz: f64, band_bpm: (f64, f64)) -> Result<Self, DspError> {
        if len < MIN_PSD_LEN {
            return Err(DspError::TooShort {
                len,
                min: MIN_PSD_LEN,
            });
        }
        let (lo, hi) = band_bpm;
        let nyquist_bpm = frame_rate_hz * 30.0;
        if !(lo > 0.0 && lo < hi && hi <= nyquist_bpm + 1e-9) {
            return Err(DspError::InvalidBand {
                lo,
                hi,
                frame_rate_hz,
            });
        }
        let spacing = frame_rate_hz / len as f64 * 60.0;
        // Tolerance keeps a bin that sits exactly on an edge from being lost
        // to rounding in `k * spacing`.
        let tol = 1e-9 * spacing;
        let bins: Vec<usize> = (1..=len / 2)
            .filter(|&k| {
                let f = k as f64 * spacing;
                f >= lo - tol && f <= hi + tol
            })
            .collect();
        if bins.is_empty() {
            return Err(DspError::EmptyBand { lo, hi });
        }
        let nb = bins.len();
        let mut cos = vec![0.0; nb * len];
        let mut sin = vec![0.0; nb * len];
        for (r, &k) in bins.iter().enumerate() {
            let crow = &mut cos[r * len..(r + 1) * len];
            let srow = &mut sin[r * len..(r + 1) * len];
            for t in 0..len {
                let phase = 2.0 * PI * ((k * t) % len) as f64 / len as f64;
                crow[t] = phase.cos();
                srow[t] = phase.sin();
            }
            center_row(crow);
            center_row(srow);
        }
        let scale = bins
            .iter()
            .map(|&k| {
                if 2 * k == len {
                    0.5 / len as f64
                } else {
                    1.0 / len as f64
                }
            })
            .collect();
        Ok(Self {
            len,
            frame_rate_hz,
            freqs_bpm: bins.iter().map(|&k| k as f64 * spacing).collect(),
            bins,
            cos: Tensor::new(vec![nb, len], cos)?,
            sin: Tensor::new(vec![nb, len], sin)?,
            scale,
        })
    }

    /// Basis covering every bin from the first up to Nyquist.
    pub fn full_band(len: usize, frame_rate_hz: f64) -> Result<Self, DspError> {
        let spacing = frame_rate_hz / len as f64 * 60.0;
        Self::new(len, frame_rate_hz, (spacing * 0.5, frame_rate_hz * 30.0))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn freqs_bpm(&self) -> &[f64] {
        &self.freqs_bpm
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    fn check_len(&self, n: usize) -> Result<(), DspError> {
        if n != self.len {
            return Err(TensorError::ShapeMismatch {
                op: "psd",
                lhs: vec![n],
                rhs: vec![self.len],
            }
            .into());
        }
        Ok(())
    }

    /// Periodogram of plain samples.
    pub fn psd(&self, samples: &[f64]) -> Result<Psd, DspError> {
        self.check_len(samples.len())?;
        let nb = self.bins.len();
        if samples.iter().all(|&v| v == samples[0]) {
            return Ok(Psd {
                freqs_bpm: self.freqs_bpm.clone(),
                power: vec![0.0; nb],
                frame_rate_hz: self.frame_rate_hz,
            });
        }
        let mut power = Vec::with_capacity(nb);
        for r in 0..nb {
            let crow = &self.cos.data()[r * self.len..(r + 1) * self.len];
            let srow = &self.sin.data()[r * self.len..(r + 1) * self.len];
            let re: f64 = crow.iter().zip(samples).map(|(c, x)| c * x).sum();
            let im: f64 = srow.iter().zip(samples).map(|(s, x)| s * x).sum();
            power.push((re * re + im * im) * self.scale[r]);
        }
        Ok(Psd {
            freqs_bpm: self.freqs_bpm.clone(),
            power,
            frame_rate_hz: self.frame_rate_hz,
        })
    }

    /// Differentiable periodogram of a length-`T` node; returns a `[bins]` node.
    pub fn psd_var(&self, graph: &mut Graph, signal: Var) -> Result<Var, DspError> {
        self.check_len(graph.value(signal).numel())?;
        let nb = self.bins.len();
        let col = graph.reshape(signal, &[self.len, 1])?;
        let c = graph.constant(self.cos.clone());
        let s = graph.constant(self.sin.clone());
        let re = graph.matmul(c, col)?;
        let im = graph.matmul(s, col)?;
        let re2 = graph.square(re);
        let im2 = graph.square(im);
        let p = graph.add(re2, im2)?;
        let p = graph.reshape(p, &[nb])?;
        let w = graph.constant(Tensor::vector(self.scale.clone()));
        Ok(graph.mul(p, w)?)
    }

    /// Snapshot of a power node produced by [`DftBasis::psd_var`].
    pub fn psd_from_var(&self, graph: &Graph, power: Var) -> Psd {
        Psd {
            freqs_bpm: self.freqs_bpm.clone(),
            power: graph.value(power).data().to_vec(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// `sum_i f_i * softmax(power / temperature)_i` as a graph node.
    pub fn soft_peak_var(
        &self,
        graph: &mut Graph,
        power: Var,
        temperature: f64,
    ) -> Result<Var, DspError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DspError::InvalidTemperature(temperature));
        }
        let w = graph.softmax(power, temperature)?;
        let f = graph.constant(Tensor::vector(self.freqs_bpm.clone()));
        Ok(graph.dot(w, f)?)
    }
}

fn center_row(row: &mut [f64]) {
    let m = row.iter().sum::<f64>() / row.len() as f64;
    row.iter_mut().for_each(|v| *v -= m);
}

/// Periodogram of `bvp` over `band_bpm`.
pub fn psd(bvp: &BvpSignal, band_bpm: (f64, f64)) -> Result<Psd, DspError> {
    DftBasis::new(bvp.len(), bvp.frame_rate_hz, band_bpm)?.psd(&bvp.samples)
}

/// Frequency of the strongest bin; ties resolve to the lower frequency.
pub fn peak_hr_bpm(psd: &Psd) -> Result<f64, DspError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in psd.power.iter().enumerate() {
        if p > 0.0 && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| psd.freqs_bpm[i])
        .ok_or(DspError::DegenerateSignal)
}

/// How the soft-peak temperature is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Temperature {
    /// Fraction of the maximum band power of the spectrum being peaked.
    RelativeToPeak(f64),
    Absolute(f64),
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::RelativeToPeak(0.05)
    }
}

impl Temperature {
    pub fn resolve(self, max_power: f64) -> Result<f64, DspError> {
        let t = match self {
            Temperature::RelativeToPeak(r) => {
                if !(max_power > 0.0) {
                    return Err(DspError::DegenerateSignal);
                }
                r * max_power
            }
            Temperature::Absolute(t) => t,
        };
        if t > 0.0 && t.is_finite() {
            Ok(t)
        } else {
            Err(DspError::InvalidTemperature(t))
        }
    }
}

/// Softmax-weighted mean frequency of a spectrum.
pub fn soft_peak_bpm(psd: &Psd, temperature: f64) -> Result<f64, DspError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DspError::InvalidTemperature(temperature));
    }
    if !(psd.max_power() > 0.0) {
        return Err(DspError::DegenerateSignal);
    }
    let max = psd.max_power();
    let w: Vec<f64> = psd
        .power
        .iter()
        .map(|p| ((p - max) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.iter().zip(&psd.freqs_bpm).map(|(w, f)| w * f).sum::<f64>() / z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPower {
    pub power: f64,
    /// No bin fell inside the band.
    pub empty: bool,
}

/// Sum of power over bins with frequency in `[lo_hz, hi_hz)`.
pub fn band_power(psd: &Psd, lo_hz: f64, hi_hz: f64) -> Result<BandPower, DspError> {
    if !(lo_hz < hi_hz) {
        return Err(DspError::InvalidBand {
            lo: lo_hz * 60.0,
            hi: hi_hz * 60.0,
            frame_rate_hz: psd.frame_rate_hz,
        });
    }
    let mut power = 0.0;
    let mut count = 0;
    for (f, p) in psd.freqs_bpm.iter().zip(&psd.power) {
        let hz = f / 60.0;
        if hz >= lo_hz && hz < hi_hz {
            power += p;
            count += 1;
        }
    }
    Ok(BandPower {
        power,
        empty: count == 0,
    })
}

/// Local maxima above a one-second moving mean, at least `60 / MAX_HR_BPM`
/// seconds apart. When two candidates are too close the larger one wins.
pub fn detect_beats(bvp: &BvpSignal) -> Result<Vec<usize>, DspError> {
    let fs = bvp.frame_rate_hz;
    let x = &bvp.samples;
    let min_len = (2.0 * fs).ceil() as usize;
    if x.len() < min_len || x.len() < 3 {
        return Err(DspError::TooShort {
            len: x.len(),
            min: min_len.max(3),
        });
    }
    let half = ((fs / 2.0).round() as usize).max(1);
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let threshold = |i: usize| {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(x.len());
        (prefix[hi] - prefix[lo]) / (hi - lo) as f64
    };
    let mut candidates: Vec<usize> = (1..x.len() - 1)
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > threshold(i))
        .collect();
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let min_sep = (60.0 / MAX_HR_BPM * fs).round() as usize;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| a.abs_diff(c) >= min_sep) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    if accepted.len() < 3 {
        return Err(DspError::InsufficientBeats {
            found: accepted.len(),
            needed: 3,
        });
    }
    Ok(accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrvMetrics {
    pub lf_power: f64,
    pub hf_power: f64,
    pub lfnu: f64,
    pub hfnu: f64,
    pub lf_hf_ratio: f64,
}

pub const MIN_HRV_BEATS: usize = 30;

/// Inter-beat intervals in seconds, each stamped at the later beat.
pub fn ibi_series(beats: &[usize], frame_rate_hz: f64) -> Vec<(f64, f64)> {
    beats
        .windows(2)
        .map(|w| {
            let t1 = w[1] as f64 / frame_rate_hz;
            (t1, (w[1] - w[0]) as f64 / frame_rate_hz)
        })
        .collect()
}

/// Linear interpolation of `(time, value)` points onto a uniform grid.
pub fn resample_linear(points: &[(f64, f64)], rate_hz: f64) -> Vec<f64> {
    if points.is_empty() {
        return Vec::new();
    }
    let t0 = points[0].0;
    let span = points[points.len() - 1].0 - t0;
    let n = (span * rate_hz).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let t = t0 + i as f64 / rate_hz;
        while seg + 2 < points.len() && points[seg + 1].0 < t {
            seg += 1;
        }
        if points.len() == 1 {
            out.push(points[0].1);
            continue;
        }
        let (ta, va) = points[seg];
        let (tb, vb) = points[seg + 1];
        let w = if tb > ta { ((t - ta) / (tb - ta)).clamp(0.0, 1.0) } else { 0.0 };
        out.push(va + w * (vb - va));
    }
    out
}

/// LF/HF analysis of the inter-beat-interval series.
pub fn hrv_metrics(beats: &[usize], frame_rate_hz: f64) -> Result<HrvMetrics, DspError> {
    if beats.len() < MIN_HRV_BEATS {
        return Err(DspError::InsufficientBeats {
            found: beats.len(),
            needed: MIN_HRV_BEATS,
        });
    }
    let series = resample_linear(&ibi_series(beats, frame_rate_hz), IBI_RESAMPLE_HZ);
    let basis = DftBasis::full_band(series.len(), IBI_RESAMPLE_HZ)?;
    let spectrum = basis.psd(&series)?;
    let lf = band_power(&spectrum, LF_BAND_HZ.0, LF_BAND_HZ.1)?.power;
    let hf = band_power(&spectrum, HF_BAND_HZ.0, HF_BAND_HZ.1)?.power;
    let total = lf + hf;
    if !(total > 0.0) {
        return Err(DspError::DegenerateIbiSpectrum);
    }
    Ok(HrvMetrics {
        lf_power: lf,
        hf_power: hf,
        lfnu: lf / total,
        hfnu: hf / total,
        lf_hf_ratio: if hf > 0.0 { lf / hf } else { f64::INFINITY },
    })
}

/// Error statistics of predicted against reference heart rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either input has zero variance.
    pub pearson: Option<f64>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa > 0.0 && sbb > 0.0 {
        Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<EvalMetrics, DspError> {
    if pred.len() != truth.len() {
        return Err(DspError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(DspError::Empty);
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    Ok(EvalMetrics {
        mae,
        rmse: mse.sqrt(),
        pearson: pearson(pred, truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 30.0;
    const T: usize = 256;

    fn tone(bin: usize, amp: f64) -> Vec<f64> {
        (0..T)
            .map(|t| amp * (2.0 * PI * bin as f64 * t as f64 / T as f64).sin())
            .collect()
    }

    #[test]
    fn bin_aligned_tone_peaks_at_its_bin() {
        let s = BvpSignal::new(tone(12, 1.0), FS);
        let p = psd(&s, HR_BAND_BPM).unwrap();
        assert!((p.bin_width_bpm() - 7.03125).abs() < 1e-12);
        assert_eq!(peak_hr_bpm(&p).unwrap(), 84.375);
        let peak = p.max_power();
        let others = p.power.iter().filter(|&&v| v < peak).cloned().fold(0.0, f64::max);
        assert!(others < 1e-20 * peak.max(1.0), "leakage {others}");
    }

    #[test]
    fn constant_signal_has_zero_power() {
        let s = BvpSignal::new(vec![3.5; T], FS);
        let p = psd(&s, HR_BAND_BPM).unwrap();
        assert!(p.power.iter().all(|&v| v == 0.0));
        assert_eq!(peak_hr_bpm(&p), Err(DspError::DegenerateSignal));
    }

    #[test]
    fn dominant_component_wins() {
        let x: Vec<f64> = tone(12, 2.0).iter().zip(tone(20, 1.0)).map(|(a, b)| a + b).collect();
        let p = psd(&BvpSignal::new(x, FS), HR_BAND_BPM).unwrap();
        assert_eq!(peak_hr_bpm(&p).unwrap(), 84.375);
    }

    #[test]
    fn ties_resolve_low() {
        let p = Psd {
            freqs_bpm: vec![60.0, 70.0, 80.0],
            power: vec![1.0, 2.0, 2.0],
            frame_rate_hz: FS,
        };
        assert_eq!(peak_hr_bpm(&p).unwrap(), 70.0);
    }

    #[test]
    fn soft_peak_limits() {
        let p = psd(&BvpSignal::new(tone(12, 1.0), FS), HR_BAND_BPM).unwrap();
        let hard = peak_hr_bpm(&p).unwrap();
        let soft = soft_peak_bpm(&p, 1e-6 * p.max_power()).unwrap();
        assert!((soft - hard).abs() < 0.01);

        let flat = Psd {
            freqs_bpm: vec![50.0, 60.0, 70.0, 100.0],
            power: vec![2.0; 4],
            frame_rate_hz: FS,
        };
        assert!((soft_peak_bpm(&flat, 0.3).unwrap() - 70.0).abs() < 1e-12);
        assert!(soft_peak_bpm(&flat, 0.0).is_err());
    }

    #[test]
    fn band_power_in_and_out() {
        let p = psd(&BvpSignal::new(tone(12, 1.0), FS), HR_BAND_BPM).unwrap();
        let total: f64 = p.power.iter().sum();
        let inside = band_power(&p, 1.3, 1.5).unwrap();
        assert!((inside.power - total).abs() <= 1e-12 * total);
        let outside = band_power(&p, 2.0, 2.5).unwrap();
        assert!(outside.power < 1e-20 && !outside.empty);
        let empty = band_power(&p, 0.01, 0.02).unwrap();
        assert!(empty.empty && empty.power == 0.0);
        assert!(band_power(&p, 2.0, 1.0).is_err());
    }

    #[test]
    fn psd_preconditions() {
        assert!(matches!(
            DftBasis::new(32, FS, HR_BAND_BPM),
            Err(DspError::TooShort { .. })
        ));
        assert!(DftBasis::new(T, FS, (180.0, 42.0)).is_err());
        assert!(DftBasis::new(T, FS, (42.0, 1000.0)).is_err());
    }

    #[test]
    fn clean_sinusoid_beats() {
        let x: Vec<f64> = (0..300)
            .map(|t| (2.0 * PI * 1.5 * t as f64 / FS).sin())
            .collect();
        let beats = detect_beats(&BvpSignal::new(x, FS)).unwrap();
        assert!((14..=16).contains(&beats.len()), "{}", beats.len());
    }

    #[test]
    fn constant_signal_has_no_beats() {
        let r = detect_beats(&BvpSignal::new(vec![1.0; 300], FS));
        assert!(matches!(r, Err(DspError::InsufficientBeats { .. })));
        let short = detect_beats(&BvpSignal::new(vec![1.0; 30], FS));
        assert!(matches!(short, Err(DspError::TooShort { .. })));
    }

    #[test]
    fn hrv_requires_enough_beats() {
        let beats: Vec<usize> = (0..10).map(|i| i * 30).collect();
        assert!(matches!(
            hrv_metrics(&beats, FS),
            Err(DspError::InsufficientBeats { .. })
        ));
        // perfectly regular beats have a flat IBI series
        let regular: Vec<usize> = (0..100).map(|i| i * 30).collect();
        assert_eq!(hrv_metrics(&regular, FS), Err(DspError::DegenerateIbiSpectrum));
    }

    #[test]
    fn metric_identities() {
        let t = [60.0, 72.0, 90.0, 101.0];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        assert!((m.pearson.unwrap() - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        let m = metrics(&shifted, &t).unwrap();
        assert!((m.mae - 2.0).abs() < 1e-12 && (m.rmse - 2.0).abs() < 1e-12);
        assert!((m.pearson.unwrap() - 1.0).abs() < 1e-12);

        let m = metrics(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((m.pearson.unwrap() + 1.0).abs() < 1e-12);

        let m = metrics(&[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert_eq!(m.pearson, None);
        assert_eq!(m.mae, 1.0);
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn resample_interpolates_linearly() {
        let pts = [(1.0, 0.0), (2.0, 1.0), (3.0, 3.0)];
        let r = resample_linear(&pts, 2.0);
        assert_eq!(r, vec![0.0, 0.5, 1.0, 2.0, 3.0]);
    }
}
