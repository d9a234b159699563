//! Synthetic rPPG scenarios with known ground truth.
//!
//! Every region carries the same underlying pulse rate but its own transit
//! delay, amplitude and harmonic phases, so regions (and nearby windows)
//! agree in the frequency domain while differing in the time domain. Noise
//! is a pure function of `(seed, region, stream, frame)`, which makes any
//! window reproducible independently of how the stream is cut.

mod beats;
mod io;
mod stmap;
mod suite;

pub use beats::{gen_beat_train, BeatTrain, BeatTrainConfig, IbiModulation};
pub use io::{load_roi_csv, read_roi_csv, read_stm1, write_roi_csv, write_stm1, DEFAULT_STRIDE_DIVISOR};
pub use stmap::{normalize_columns, resize_regions, RoiTraces, Stmap, CHANNELS};
pub use suite::SuiteSpec;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::dsp::BvpSignal;

/// Frames per model input window.
pub const DEFAULT_WINDOW: usize = 256;
/// Facial regions in a raw trace set.
pub const RAW_REGIONS: usize = 25;
/// Region-axis width of the model input.
pub const MODEL_WIDTH: usize = 64;
/// Extra frames generated past each window for the temporal offset.
pub const MAX_OFFSET: usize = 30;
pub const HR_LIMITS_BPM: (f64, f64) = (45.0, 170.0);
pub const MAX_DELAY_FRAMES: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("region {region} out of range (scenario has {regions})")]
    RegionOutOfRange { region: usize, regions: usize },
    #[error("window of {window} frames exceeds the {available} available")]
    WindowTooLong { window: usize, available: usize },
    #[error("buffer holds {actual} values, expected {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("no data")]
    NoData,
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("bad magic {found:?}, expected \"STM1\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated STM1 payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sinusoidal modulation of the heart rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrModulation {
    pub freq_hz: f64,
    pub depth_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_frames: usize,
    pub frame_rate_hz: f64,
    /// `(frame, bpm)` knots, linearly interpolated and held flat outside.
    pub hr_trajectory: Vec<(f64, f64)>,
    #[serde(default)]
    pub hr_modulation: Vec<HrModulation>,
    /// Pulse transit delay per region, in frames.
    pub region_delays: Vec<f64>,
    pub region_amplitudes: Vec<f64>,
    /// Amplitudes of the fundamental and two harmonics.
    pub harmonics: [f64; 3],
    /// Standard deviation (radians) of the per-region harmonic phase jitter.
    pub morphology_jitter: f64,
    pub respiration_hz: f64,
    pub respiration_depth: f64,
    /// Region-level pulse noise, shared by the three channels of a region.
    pub noise_sigma: f64,
    /// Independent noise per region and channel.
    #[serde(default)]
    pub channel_noise_sigma: f64,
    pub channel_gains: [f64; 3],
    pub channel_offsets: [f64; 3],
    /// Relative illumination change from the first to the last frame.
    pub illumination_ramp: f64,
    /// Narrowband motion artifacts added to single regions.
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

/// A sinusoidal disturbance confined to one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub region: usize,
    pub freq_bpm: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Phases of the three harmonics of the reference waveform.
const BASE_HARMONIC_PHASES: [f64; 3] = [0.0, -0.9, -1.8];

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_frames: DEFAULT_WINDOW + MAX_OFFSET,
            frame_rate_hz: 30.0,
            hr_trajectory: vec![(0.0, 75.0)],
            hr_modulation: Vec::new(),
            region_delays: vec![0.0; RAW_REGIONS],
            region_amplitudes: vec![1.0; RAW_REGIONS],
            harmonics: [1.0, 0.4, 0.15],
            morphology_jitter: 0.3,
            respiration_hz: 0.25,
            respiration_depth: 0.2,
            noise_sigma: 0.02,
            channel_noise_sigma: 0.0,
            channel_gains: [0.3, 1.0, 0.5],
            channel_offsets: [0.6, 0.4, 0.3],
            illumination_ramp: 0.0,
            artifacts: Vec::new(),
        }
    }
}

/// One generated training/evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    /// `T + MAX_OFFSET` normalized frames at model width.
    pub window: Stmap,
    /// Delay-free reference pulse for the first `T` frames.
    pub gt_bvp: BvpSignal,
    pub gt_hr_bpm: f64,
}

impl ScenarioConfig {
    pub fn regions(&self) -> usize {
        self.region_delays.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.duration_frames == 0 {
            return bad("duration_frames must be positive".into());
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad(format!("frame_rate_hz must be positive, got {}", self.frame_rate_hz));
        }
        if self.hr_trajectory.is_empty() {
            return bad("hr_trajectory needs at least one knot".into());
        }
        if self.hr_trajectory.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("hr_trajectory frames must increase".into());
        }
        let (lo, hi) = self.hr_range();
        if lo < HR_LIMITS_BPM.0 || hi > HR_LIMITS_BPM.1 {
            return bad(format!(
                "heart rate range [{lo}, {hi}] outside [{}, {}] bpm",
                HR_LIMITS_BPM.0, HR_LIMITS_BPM.1
            ));
        }
        if self.region_delays.is_empty() {
            return bad("at least one region is required".into());
        }
        if self.region_amplitudes.len() != self.region_delays.len() {
            return bad(format!(
                "{} amplitudes for {} regions",
                self.region_amplitudes.len(),
                self.region_delays.len()
            ));
        }
        if let Some(d) = self
            .region_delays
            .iter()
            .find(|d| !(0.0..=MAX_DELAY_FRAMES).contains(*d))
        {
            return bad(format!("region delay {d} outside [0, {MAX_DELAY_FRAMES}] frames"));
        }
        if let Some(a) = self.region_amplitudes.iter().find(|a| !(**a > 0.0)) {
            return bad(format!("region amplitude {a} must be positive"));
        }
        if self.noise_sigma < 0.0 || self.channel_noise_sigma < 0.0 {
            return bad("noise sigmas must be nonnegative".into());
        }
        for a in &self.artifacts {
            if a.region >= self.regions() {
                return bad(format!("artifact region {} out of range", a.region));
            }
            if !(a.freq_bpm > 0.0 && a.amplitude >= 0.0 && a.phase.is_finite()) {
                return bad(format!("invalid artifact {a:?}"));
            }
        }
        Ok(())
    }

    /// Extremes of the instantaneous heart rate, modulation included.
    pub fn hr_range(&self) -> (f64, f64) {
        let depth: f64 = self.hr_modulation.iter().map(|m| m.depth_bpm.abs()).sum();
        let lo = self.hr_trajectory.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
        let hi = self.hr_trajectory.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
        (lo - depth, hi + depth)
    }

    /// Instantaneous heart rate (bpm) at frame `t`.
    pub fn hr_at(&self, t: f64) -> f64 {
        let k = &self.hr_trajectory;
        let base = if t <= k[0].0 {
            k[0].1
        } else if t >= k[k.len() - 1].0 {
            k[k.len() - 1].1
        } else {
            let i = k.iter().position(|p| p.0 > t).unwrap() - 1;
            let (a, b) = (k[i], k[i + 1]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        };
        base + self
            .hr_modulation
            .iter()
            .map(|m| m.depth_bpm * (2.0 * PI * m.freq_hz * t / self.frame_rate_hz).sin())
            .sum::<f64>()
    }

    /// Number of heartbeats elapsed between frame 0 and frame `t`.
    pub fn cycles_at(&self, t: f64) -> f64 {
        let mut beat_frames = integral_flat_then_linear(&self.hr_trajectory, t);
        for m in &self.hr_modulation {
            let w = 2.0 * PI * m.freq_hz / self.frame_rate_hz;
            beat_frames += m.depth_bpm * (1.0 - (w * t).cos()) / w;
        }
        beat_frames / (60.0 * self.frame_rate_hz)
    }

    /// Mean heart rate over frames `[t0, t0 + len)`.
    pub fn mean_hr(&self, t0: usize, len: usize) -> f64 {
        (t0..t0 + len).map(|t| self.hr_at(t as f64)).sum::<f64>() / len as f64
    }

    fn harmonic_phase(&self, region: usize, k: usize) -> f64 {
        BASE_HARMONIC_PHASES[k]
            + self.morphology_jitter * gaussian(self.seed, region as u64, 100 + k as u64, 0)
    }

    fn waveform(&self, cycles: f64, phases: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| {
                self.harmonics[k] * (2.0 * PI * (k + 1) as f64 * cycles + phases[k]).sin()
            })
            .sum()
    }

    fn respiration(&self, t: f64) -> f64 {
        self.respiration_depth * (2.0 * PI * self.respiration_hz * t / self.frame_rate_hz).sin()
    }

    fn check_span(&self, t0: usize, len: usize) -> Result<(), SynthError> {
        if t0 + len > self.duration_frames {
            return Err(SynthError::WindowTooLong {
                window: t0 + len,
                available: self.duration_frames,
            });
        }
        Ok(())
    }
}

/// Integral of a piecewise-linear, flat-extrapolated curve from 0 to `t`.
fn integral_flat_then_linear(knots: &[(f64, f64)], t: f64) -> f64 {
    let at = |x: f64| -> f64 {
        // antiderivative F(x) with F(0) = 0 handled by subtraction below
        let first = knots[0];
        if x <= first.0 {
            return first.1 * (x - first.0);
        }
        let mut acc = 0.0;
        for w in knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if x <= a.0 {
                break;
            }
            let end = x.min(b.0);
            let slope = (b.1 - a.1) / (b.0 - a.0);
            let d = end - a.0;
            acc += a.1 * d + 0.5 * slope * d * d;
            if x <= b.0 {
                return acc;
            }
        }
        let last = knots[knots.len() - 1];
        acc + last.1 * (x - last.0)
    };
    at(t) - at(0.0)
}

/// Pulse signal observed at one region: delayed, scaled, with its own
/// morphology, respiration baseline and noise.
pub fn gen_bvp(
    config: &ScenarioConfig,
    region: usize,
    t0: usize,
    length: usize,
) -> Result<BvpSignal, SynthError> {
    if region >= config.regions() {
        return Err(SynthError::RegionOutOfRange {
            region,
            regions: config.regions(),
        });
    }
    config.check_span(t0, length)?;
    Ok(BvpSignal::new(
        (t0..t0 + length).map(|t| region_sample(config, region, t)).collect(),
        config.frame_rate_hz,
    ))
}

fn region_sample(config: &ScenarioConfig, region: usize, t: usize) -> f64 {
    let phases = [
        config.harmonic_phase(region, 0),
        config.harmonic_phase(region, 1),
        config.harmonic_phase(region, 2),
    ];
    let tf = t as f64;
    let cycles = config.cycles_at(tf - config.region_delays[region]);
    let artifacts: f64 = config
        .artifacts
        .iter()
        .filter(|a| a.region == region)
        .map(|a| a.amplitude * (2.0 * PI * a.freq_bpm / 60.0 * tf / config.frame_rate_hz + a.phase).sin())
        .sum();
    config.region_amplitudes[region] * config.waveform(cycles, phases)
        + config.respiration(tf)
        + artifacts
        + config.noise_sigma * gaussian(config.seed, region as u64, 3, t as u64)
}

/// Delay-free, noise-free reference pulse with the base morphology.
pub fn gen_reference_bvp(
    config: &ScenarioConfig,
    t0: usize,
    length: usize,
) -> Result<BvpSignal, SynthError> {
    config.check_span(t0, length)?;
    Ok(BvpSignal::new(
        (t0..t0 + length)
            .map(|t| config.waveform(config.cycles_at(t as f64), BASE_HARMONIC_PHASES))
            .collect(),
        config.frame_rate_hz,
    ))
}

/// Raw RGB traces for frames `[t0, t0 + frames)`.
pub fn gen_traces(config: &ScenarioConfig, t0: usize, frames: usize) -> Result<RoiTraces, SynthError> {
    config.validate()?;
    config.check_span(t0, frames)?;
    let regions = config.regions();
    let mut data = Vec::with_capacity(frames * regions * CHANNELS);
    for t in t0..t0 + frames {
        let illum = 1.0 + config.illumination_ramp * t as f64 / config.duration_frames as f64;
        for w in 0..regions {
            let s = region_sample(config, w, t);
            for c in 0..CHANNELS {
                let noise = if config.channel_noise_sigma > 0.0 {
                    config.channel_noise_sigma * gaussian(config.seed, w as u64, c as u64, t as u64)
                } else {
                    0.0
                };
                data.push(illum * (config.channel_offsets[c] + config.channel_gains[c] * s) + noise);
            }
        }
    }
    RoiTraces::new(frames, regions, config.frame_rate_hz, t0, data)
}

/// A labeled window starting at `t0`: `window + MAX_OFFSET` frames of
/// normalized STMap plus the reference pulse and mean HR of the first
/// `window` frames.
pub fn gen_instance(
    config: &ScenarioConfig,
    t0: usize,
    window: usize,
) -> Result<LabeledInstance, SynthError> {
    let traces = gen_traces(config, t0, window + MAX_OFFSET)?;
    Ok(LabeledInstance {
        window: traces.to_stmap(MODEL_WIDTH),
        gt_bvp: gen_reference_bvp(config, t0, window)?,
        gt_hr_bpm: config.mean_hr(t0, window),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_uniform(bits: u64) -> f64 {
    // 53 random mantissa bits in (0, 1]
    ((bits >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

/// Standard normal deviate keyed by `(seed, a, b, c)` (Box-Muller).
pub(crate) fn gaussian(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.wrapping_mul(0x1000_0000_01B3));
    h = splitmix64(h ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    let u1 = unit_uniform(h);
    let u2 = unit_uniform(splitmix64(h));
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{peak_hr_bpm, psd, HR_BAND_BPM};

    fn quiet(bpm: f64) -> ScenarioConfig {
        ScenarioConfig {
            hr_trajectory: vec![(0.0, bpm)],
            harmonics: [1.0, 0.0, 0.0],
            morphology_jitter: 0.0,
            respiration_depth: 0.0,
            noise_sigma: 0.0,
            duration_frames: 1024,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn cycles_integrate_piecewise_linear_rate() {
        let c = ScenarioConfig {
            hr_trajectory: vec![(0.0, 60.0), (30.0, 120.0)],
            ..quiet(60.0)
        };
        // 60 -> 120 bpm over one second averages 90 bpm = 1.5 beats
        assert!((c.cycles_at(30.0) - 1.5).abs() < 1e-12);
        // then flat at 2 beats per second
        assert!((c.cycles_at(60.0) - 3.5).abs() < 1e-12);
        assert!((c.cycles_at(-30.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn modulation_integral_matches_quadrature() {
        let c = ScenarioConfig {
            hr_modulation: vec![HrModulation {
                freq_hz: 0.1,
                depth_bpm: 6.0,
            }],
            ..quiet(70.0)
        };
        let t_end = 400.0;
        let n = 40_000;
        let h = t_end / n as f64;
        let mut s = 0.5 * (c.hr_at(0.0) + c.hr_at(t_end));
        for i in 1..n {
            s += c.hr_at(i as f64 * h);
        }
        let quad = s * h / (60.0 * c.frame_rate_hz);
        assert!((c.cycles_at(t_end) - quad).abs() < 1e-6);
    }

    #[test]
    fn pure_tone_peaks_at_its_rate() {
        let bvp = gen_bvp(&quiet(84.375), 0, 0, 256).unwrap();
        let p = psd(&bvp, HR_BAND_BPM).unwrap();
        assert_eq!(peak_hr_bpm(&p).unwrap(), 84.375);
    }

    #[test]
    fn rejects_bad_region_and_span() {
        let c = quiet(70.0);
        assert!(matches!(
            gen_bvp(&c, 99, 0, 10),
            Err(SynthError::RegionOutOfRange { .. })
        ));
        assert!(gen_bvp(&c, 0, 1000, 100).is_err());
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        let mut c = quiet(70.0);
        c.hr_trajectory = vec![(0.0, 200.0)];
        assert!(c.validate().is_err());
        let mut c = quiet(70.0);
        c.region_delays[3] = 11.0;
        assert!(c.validate().is_err());
        let mut c = quiet(70.0);
        c.region_amplitudes[0] = 0.0;
        assert!(c.validate().is_err());
        assert!(quiet(70.0).validate().is_ok());
    }

    #[test]
    fn symmetric_scenario_gives_identical_columns() {
        let c = quiet(80.0);
        let inst = gen_instance(&c, 0, 256).unwrap();
        let w = &inst.window;
        for ch in 0..CHANNELS {
            let first = w.column(0, ch);
            for col in 1..w.width {
                assert_eq!(w.column(col, ch), first);
            }
        }
    }

    #[test]
    fn instances_are_deterministic() {
        let c = ScenarioConfig {
            duration_frames: 600,
            ..ScenarioConfig::default()
        };
        let a = gen_instance(&c, 17, 256).unwrap();
        let b = gen_instance(&c, 17, 256).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.window.frames, 256 + MAX_OFFSET);
        assert_eq!(a.window.width, MODEL_WIDTH);
        assert!(a.window.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gaussian_is_roughly_standard() {
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|i| gaussian(5, 1, 2, i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
