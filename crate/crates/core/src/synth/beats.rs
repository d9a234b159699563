//! Beat trains with prescribed inter-beat-interval dynamics.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dsp::BvpSignal;

/// Sinusoidal modulation of the inter-beat interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbiModulation {
    pub freq_hz: f64,
    pub amplitude_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTrainConfig {
    pub frame_rate_hz: f64,
    pub duration_s: f64,
    pub mean_ibi_s: f64,
    pub modulations: Vec<IbiModulation>,
    /// Standard deviation of each Gaussian pulse, in seconds.
    pub pulse_width_s: f64,
}

impl Default for BeatTrainConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: 30.0,
            duration_s: 300.0,
            mean_ibi_s: 0.6,
            modulations: Vec::new(),
            pulse_width_s: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatTrain {
    pub signal: BvpSignal,
    /// Frame index of every pulse maximum.
    pub peaks: Vec<usize>,
}

/// Sum of Gaussian pulses centered on integer frames. Beat `n + 1` follows
/// beat `n` after `mean_ibi + sum_m a_m sin(2 pi f_m t_n)` seconds.
pub fn gen_beat_train(config: &BeatTrainConfig) -> BeatTrain {
    let fs = config.frame_rate_hz;
    let len = (config.duration_s * fs).round() as usize;
    let sigma = config.pulse_width_s * fs;
    let margin = (4.0 * sigma).ceil() as usize + 1;
    let mut peaks = Vec::new();
    let mut t = margin as f64 / fs;
    loop {
        let p = (t * fs).round() as usize;
        if p + margin >= len {
            break;
        }
        if peaks.last() != Some(&p) {
            peaks.push(p);
        }
        let ibi = config.mean_ibi_s
            + config
                .modulations
                .iter()
                .map(|m| m.amplitude_s * (2.0 * PI * m.freq_hz * t).sin())
                .sum::<f64>();
        t += ibi.max(1.0 / fs);
    }
    let mut samples = vec![0.0; len];
    let reach = (6.0 * sigma).ceil() as usize;
    for &p in &peaks {
        for (i, s) in samples
            .iter_mut()
            .enumerate()
            .take((p + reach + 1).min(len))
            .skip(p.saturating_sub(reach))
        {
            let d = i as f64 - p as f64;
            *s += (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }
    BeatTrain {
        signal: BvpSignal::new(samples, fs),
        peaks,
    }
}
