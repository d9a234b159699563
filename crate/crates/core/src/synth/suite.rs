//! Families of randomized scenarios ("suites") standing in for datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_instance, Artifact, LabeledInstance, ScenarioConfig, SynthError, MAX_OFFSET, RAW_REGIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub seed: u64,
    pub scenarios: usize,
    pub instances_per_scenario: usize,
    /// Frames per model window (`T`).
    pub window: usize,
    /// Frames between consecutive window starts within a scenario.
    pub stride: usize,
    pub frame_rate_hz: f64,
    /// Range the starting heart rate of each scenario is drawn from.
    pub hr_range_bpm: (f64, f64),
    /// Maximum absolute change of heart rate across a scenario.
    pub hr_drift_bpm: f64,
    pub max_delay_frames: f64,
    pub amplitude_range: (f64, f64),
    pub harmonics: [f64; 3],
    pub morphology_jitter: f64,
    pub respiration_depth: f64,
    pub noise_sigma: f64,
    pub channel_noise_sigma: f64,
    pub channel_gains: [f64; 3],
    /// Relative per-scenario jitter of the channel gains.
    pub gain_jitter: f64,
    pub channel_offsets: [f64; 3],
    /// Maximum absolute illumination ramp over a scenario.
    pub illumination_ramp: f64,
    /// Raw regions `[start, end)` that carry a clean pulse.
    pub reliable_regions: (usize, usize),
    /// Pulse amplitude multiplier for the remaining regions.
    pub unreliable_gain: f64,
    /// Amplitude of the artifact placed in every unreliable region.
    pub artifact_amplitude: f64,
    /// Range the artifact frequencies are drawn from.
    pub artifact_band_bpm: (f64, f64),
}

impl SuiteSpec {
    /// Clean, well-lit, synchronous capture used for supervised pretraining.
    pub fn source_default() -> Self {
        Self {
            name: "source".into(),
            seed: 1000,
            scenarios: 24,
            instances_per_scenario: 4,
            window: super::DEFAULT_WINDOW,
            stride: 64,
            frame_rate_hz: 30.0,
            hr_range_bpm: (55.0, 110.0),
            hr_drift_bpm: 4.0,
            max_delay_frames: 0.0,
            amplitude_range: (0.8, 1.2),
            harmonics: [1.0, 0.4, 0.15],
            morphology_jitter: 0.2,
            respiration_depth: 0.2,
            noise_sigma: 0.05,
            channel_noise_sigma: 0.02,
            channel_gains: [0.3, 1.0, 0.5],
            gain_jitter: 0.1,
            channel_offsets: [0.6, 0.4, 0.3],
            illumination_ramp: 0.05,
            reliable_regions: (0, 10),
            unreliable_gain: 0.1,
            artifact_amplitude: 1.0,
            artifact_band_bpm: (45.0, 170.0),
        }
    }

    /// Shifted deployment domain: noisier, altered channel response and
    /// nonzero pulse transit delays.
    pub fn target_default() -> Self {
        Self {
            name: "target".into(),
            seed: 2000,
            scenarios: 20,
            instances_per_scenario: 10,
            window: super::DEFAULT_WINDOW,
            stride: 64,
            frame_rate_hz: 30.0,
            hr_range_bpm: (60.0, 120.0),
            hr_drift_bpm: 6.0,
            max_delay_frames: 8.0,
            amplitude_range: (0.5, 1.5),
            harmonics: [1.0, 0.5, 0.25],
            morphology_jitter: 0.5,
            respiration_depth: 0.4,
            noise_sigma: 0.3,
            channel_noise_sigma: 0.1,
            channel_gains: [0.6, 0.7, 0.6],
            gain_jitter: 0.15,
            channel_offsets: [0.5, 0.45, 0.35],
            illumination_ramp: 0.2,
            reliable_regions: (15, 25),
            unreliable_gain: 0.1,
            artifact_amplitude: 1.0,
            artifact_band_bpm: (45.0, 170.0),
        }
    }

    pub fn total_instances(&self) -> usize {
        self.scenarios * self.instances_per_scenario
    }

    pub fn scenario_frames(&self) -> usize {
        (self.instances_per_scenario.max(1) - 1) * self.stride + self.window + MAX_OFFSET
    }

    /// The `index`-th scenario of the suite.
    pub fn scenario(&self, index: usize) -> ScenarioConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64));
        let duration = self.scenario_frames();
        let start = rng.random_range(self.hr_range_bpm.0..=self.hr_range_bpm.1);
        let end = (start + rng.random_range(-1.0..=1.0) * self.hr_drift_bpm)
            .clamp(super::HR_LIMITS_BPM.0, super::HR_LIMITS_BPM.1);
        let region_delays = (0..RAW_REGIONS)
            .map(|_| {
                if self.max_delay_frames > 0.0 {
                    rng.random_range(0.0..=self.max_delay_frames)
                } else {
                    0.0
                }
            })
            .collect();
        let (alo, ahi) = self.amplitude_range;
        let reliable = |r: usize| (self.reliable_regions.0..self.reliable_regions.1).contains(&r);
        let region_amplitudes = (0..RAW_REGIONS)
            .map(|r| {
                let a = if ahi > alo { rng.random_range(alo..=ahi) } else { alo };
                if reliable(r) {
                    a
                } else {
                    a * self.unreliable_gain
                }
            })
            .collect();
        let (flo, fhi) = self.artifact_band_bpm;
        let artifacts = (0..RAW_REGIONS)
            .filter(|&r| !reliable(r) && self.artifact_amplitude > 0.0)
            .map(|region| Artifact {
                region,
                freq_bpm: rng.random_range(flo..=fhi),
                amplitude: self.artifact_amplitude,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        let mut channel_gains = self.channel_gains;
        for g in &mut channel_gains {
            *g *= 1.0 + self.gain_jitter * rng.random_range(-1.0..=1.0);
        }
        let illumination_ramp = self.illumination_ramp * rng.random_range(-1.0..=1.0);
        let respiration_hz = rng.random_range(0.15..=0.4);
        ScenarioConfig {
            seed: rng.random(),
            duration_frames: duration,
            frame_rate_hz: self.frame_rate_hz,
            hr_trajectory: vec![(0.0, start), ((duration - 1) as f64, end)],
            hr_modulation: Vec::new(),
            region_delays,
            region_amplitudes,
            harmonics: self.harmonics,
            morphology_jitter: self.morphology_jitter,
            respiration_hz,
            respiration_depth: self.respiration_depth,
            noise_sigma: self.noise_sigma,
            channel_noise_sigma: self.channel_noise_sigma,
            channel_gains,
            channel_offsets: self.channel_offsets,
            illumination_ramp,
            artifacts,
        }
    }

    /// All instances, scenario-major, in stream order.
    pub fn instances(&self) -> Result<Vec<LabeledInstance>, SynthError> {
        let per_scenario: Vec<Vec<LabeledInstance>> = (0..self.scenarios)
            .into_par_iter()
            .map(|s| {
                let cfg = self.scenario(s);
                (0..self.instances_per_scenario)
                    .map(|i| gen_instance(&cfg, i * self.stride, self.window))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(per_scenario.into_iter().flatten().collect())
    }
}
