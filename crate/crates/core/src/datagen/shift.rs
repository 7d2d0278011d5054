//! Distribution-shift transforms applied to clean recordings.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rectified_carrier, Recording};
use crate::error::{Error, Result};
use crate::model::{CLOSE, RELAX};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shift {
    /// Gain ramps from `start` to `end` (as fractions of `drift_delta`).
    Drift {
        start: f32,
        end: f32,
    },
    Posture,
    Rotation {
        degrees: f32,
    },
    Device,
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drift" => Ok(Shift::Drift {
                start: 0.0,
                end: 1.0,
            }),
            "posture" => Ok(Shift::Posture),
            "rotation" => Ok(Shift::Rotation { degrees: 15.0 }),
            "device" => Ok(Shift::Device),
            _ => Err(Error::Config(format!(
                "unknown shift {s:?}; expected drift, posture, rotation or device"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    /// Final relative gain increase of a full drift.
    pub drift_delta: f32,
    /// Relax-segment tone added by a full drift, relative to channel RMS.
    pub drift_tone: f32,
    /// Slow baseline wander amplitude, relative to channel RMS.
    pub drift_wander: f32,
    /// Tonic activation level relative to channel RMS.
    pub posture_level: f32,
    pub posture_channels: Vec<usize>,
    /// Passive-motion artifact level relative to channel RMS.
    pub device_level: f32,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            drift_delta: 0.15,
            drift_tone: 0.3,
            drift_wander: 0.1,
            posture_level: 0.5,
            posture_channels: vec![2, 3, 4],
            device_level: 0.5,
        }
    }
}

fn channel_rms(rec: &Recording) -> Vec<f32> {
    let c = rec.channels();
    let mut sq = vec![0.0f64; c];
    for (i, v) in rec.samples.data().iter().enumerate() {
        sq[i % c] += (*v as f64).powi(2);
    }
    let n = rec.num_samples().max(1) as f64;
    sq.iter().map(|s| (s / n).sqrt() as f32).collect()
}

/// Circularly remaps channels by `degrees` of an 8-electrode ring (45° per
/// electrode), interpolating linearly between neighbours.
pub fn rotate_channels(data: &[f32], channels: usize, degrees: f32) -> Vec<f32> {
    let spacing = 360.0 / channels as f32;
    let steps = (degrees / spacing).rem_euclid(channels as f32);
    let whole = steps.floor() as usize;
    let frac = steps - whole as f32;
    let mut out = vec![0.0f32; data.len()];
    for (src, dst) in data.chunks(channels).zip(out.chunks_mut(channels)) {
        for c in 0..channels {
            let a = src[(c + channels - whole) % channels];
            dst[c] = if frac == 0.0 {
                a
            } else {
                let b = src[(c + 2 * channels - whole - 1) % channels];
                (1.0 - frac) * a + frac * b
            };
        }
    }
    out
}

/// Returns a shifted copy; labels are never altered.
pub fn apply_shift(
    rec: &Recording,
    shift: Shift,
    params: &ShiftParams,
    seed: u64,
) -> Result<Recording> {
    let c = rec.channels();
    let n = rec.num_samples();
    let rate = rec.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rec.clone();
    let rms = channel_rms(rec);
    match shift {
        Shift::Rotation { degrees } => {
            let rotated = rotate_channels(rec.samples.data(), c, degrees);
            out.samples.data_mut().copy_from_slice(&rotated);
        }
        Shift::Drift { start, end } => {
            let carrier = rectified_carrier(n, c, &mut rng);
            let wander_hz: f32 = rng.gen_range(0.02..0.05);
            let phases: Vec<f32> = (0..c)
                .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
                .collect();
            let data = out.samples.data_mut();
            for t in 0..n {
                let frac = start + (end - start) * t as f32 / n.max(1) as f32;
                let gain = 1.0 + params.drift_delta * frac;
                for ch in 0..c {
                    let i = t * c + ch;
                    let mut v = data[i] * gain;
                    let wander =
                        (std::f32::consts::TAU * wander_hz * t as f32 / rate + phases[ch]).sin();
                    v += params.drift_wander * frac * rms[ch] * wander;
                    if rec.labels[t] == RELAX {
                        v += params.drift_tone * frac * rms[ch] * carrier[i];
                    }
                    data[i] = v;
                }
            }
        }
        Shift::Posture => {
            let carrier = rectified_carrier(n, c, &mut rng);
            let data = out.samples.data_mut();
            for t in 0..n {
                for &ch in params.posture_channels.iter().filter(|&&ch| ch < c) {
                    let i = t * c + ch;
                    data[i] += params.posture_level * rms[ch] * carrier[i];
                }
            }
        }
        Shift::Device => {
            // The orthosis moves the hand during the relax period before each
            // close cue: a slow half-sine bump that ends at the cue.
            let carrier = rectified_carrier(n, c, &mut rng);
            let data = out.samples.data_mut();
            let mut t = 0;
            while t < n {
                let k = rec.labels[t];
                let mut end = t;
                while end < n && rec.labels[end] == k {
                    end += 1;
                }
                if k == RELAX && end < n && rec.labels[end] == CLOSE {
                    let len = (end - t).min((2.0 * rate) as usize);
                    let from = end - len;
                    for s in from..end {
                        let e = (std::f32::consts::PI * (s - from) as f32 / len as f32).sin();
                        for ch in 0..c {
                            let i = s * c + ch;
                            data[i] += params.device_level * rms[ch] * e * carrier[i];
                        }
                    }
                }
                t = end;
            }
        }
    }
    if !out.samples.is_finite() {
        return Err(Error::NonFinite("apply_shift".into()));
    }
    Ok(out)
}
