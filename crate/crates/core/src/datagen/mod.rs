//! Cue timelines, synthetic subjects and recordings.

mod benchmark;
mod format;
mod shift;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CLOSE, OPEN, RELAX};
use crate::numerics::Tensor;

pub use benchmark::{
    build_benchmark, read_benchmark, tree_checksums, write_benchmark, Benchmark, BenchmarkConfig,
    SubjectData,
};
pub use format::{
    parse_recording, read_recording, recording_bytes, write_recording, RECORDING_MAGIC,
    RECORDING_VERSION,
};
pub use shift::{apply_shift, rotate_channels, Shift, ShiftParams};

pub const SAMPLE_RATE_HZ: f32 = 200.0;
pub const CHANNELS: usize = 8;
pub const RELAX_S: f32 = 5.0;
pub const ACTIVE_S: f32 = 6.0;

/// Derives an independent seed for a labelled sub-task.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x = splitmix(x ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelineKind {
    Standard,
    ClosingOnly,
}

impl FromStr for TimelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TimelineKind::Standard),
            "closing_only" | "closing-only" => Ok(TimelineKind::ClosingOnly),
            _ => Err(Error::Config(format!(
                "unknown timeline kind {s:?}; expected standard or closing_only"
            ))),
        }
    }
}

/// Ordered `(class, seconds)` cue segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueTimeline {
    pub segments: Vec<(usize, f32)>,
    pub sample_rate_hz: f32,
}

impl CueTimeline {
    /// Alternates relax with `class` four times relax, three times active.
    fn sequence(class: usize) -> Vec<(usize, f32)> {
        (0..7)
            .map(|i| {
                if i % 2 == 0 {
                    (RELAX, RELAX_S)
                } else {
                    (class, ACTIVE_S)
                }
            })
            .collect()
    }

    pub fn segment_samples(&self) -> Vec<usize> {
        self.segments
            .iter()
            .map(|&(_, d)| (d * self.sample_rate_hz).round() as usize)
            .collect()
    }

    /// `(class, start, end)` sample ranges.
    pub fn spans(&self) -> Vec<(usize, usize, usize)> {
        let mut at = 0;
        self.segments
            .iter()
            .zip(self.segment_samples())
            .map(|(&(k, _), n)| {
                let span = (k, at, at + n);
                at += n;
                span
            })
            .collect()
    }

    pub fn num_samples(&self) -> usize {
        self.segment_samples().iter().sum()
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_samples());
        for (&(k, _), n) in self.segments.iter().zip(self.segment_samples()) {
            out.extend(std::iter::repeat(k).take(n));
        }
        out
    }
}

pub fn make_set_timeline(kind: TimelineKind) -> CueTimeline {
    let segments = match kind {
        TimelineKind::Standard => {
            let mut s = CueTimeline::sequence(OPEN);
            s.extend(CueTimeline::sequence(CLOSE));
            s
        }
        TimelineKind::ClosingOnly => CueTimeline::sequence(CLOSE),
    };
    CueTimeline {
        segments,
        sample_rate_hz: SAMPLE_RATE_HZ,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Healthy,
    Stroke,
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Population::Healthy => "healthy",
            Population::Stroke => "stroke",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Train,
    TestDriftMid,
    TestDriftEnd,
    TestPosture,
    TestRotation,
    TestDevice,
}

impl SetKind {
    pub const ALL: [SetKind; 6] = [
        SetKind::Train,
        SetKind::TestDriftMid,
        SetKind::TestDriftEnd,
        SetKind::TestPosture,
        SetKind::TestRotation,
        SetKind::TestDevice,
    ];
    pub const TESTS: [SetKind; 5] = [
        SetKind::TestDriftMid,
        SetKind::TestDriftEnd,
        SetKind::TestPosture,
        SetKind::TestRotation,
        SetKind::TestDevice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::Train => "train",
            SetKind::TestDriftMid => "test_drift_mid",
            SetKind::TestDriftEnd => "test_drift_end",
            SetKind::TestPosture => "test_posture",
            SetKind::TestRotation => "test_rotation",
            SetKind::TestDevice => "test_device",
        }
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = SetKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Format(format!(
                    "unknown set_kind {s:?}; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Generative parameters of one synthetic subject. Amplitude and
/// co-contraction rows are indexed by class (relax row holds resting tone).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub population: Population,
    pub severity: f32,
    /// `[K×C]` activation amplitude per class and channel.
    pub amplitudes: Tensor,
    /// `[K×C]` antagonist leakage added while a class is attempted.
    pub cocontraction: Tensor,
    pub onset_delay_s: f32,
    pub rise_time_s: f32,
    pub release_time_s: f32,
    pub noise_std: f32,
    pub tremor_hz: f32,
    pub tremor_amp: f32,
    /// Electrode placement offset, in channels.
    pub placement_offset: f32,
}

const EXTENSOR_CENTER: f32 = 1.5;
const FLEXOR_CENTER: f32 = 5.5;
const BUMP_WIDTH: f32 = 1.2;
/// Extra electrode rotation for stroke subjects, in channels.
const STROKE_ROTATION: f32 = 1.5;

fn bump(center: f32, c: usize) -> f32 {
    let n = CHANNELS as f32;
    let mut d = (c as f32 - center).rem_euclid(n);
    if d > n / 2.0 {
        d = n - d;
    }
    (-d * d / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
}

impl SubjectProfile {
    /// Largest co-contraction leak relative to the peak amplitude of the
    /// attempted class.
    pub fn cocontraction_norm(&self) -> f32 {
        let c = self.amplitudes.shape()[1];
        let mut worst = 0.0f32;
        for k in [OPEN, CLOSE] {
            let peak = self.amplitudes.data()[k * c..(k + 1) * c]
                .iter()
                .cloned()
                .fold(0.0, f32::max);
            let leak = self.cocontraction.data()[k * c..(k + 1) * c]
                .iter()
                .cloned()
                .fold(0.0, f32::max);
            if peak > 0.0 {
                worst = worst.max(leak / peak);
            }
        }
        worst
    }

    /// Overall amplitude multiplier relative to a healthy subject.
    pub fn amplitude_scale(severity: f32) -> f32 {
        1.0 - 0.6 * severity
    }
}

/// Draws a subject. Healthy subjects ignore `severity`.
pub fn sample_subject(
    population: Population,
    severity: f32,
    seed: u64,
    subject_id: &str,
) -> Result<SubjectProfile> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sev = if population == Population::Healthy {
        0.0
    } else {
        severity
    };
    let scale = SubjectProfile::amplitude_scale(sev);
    // A band donned on a flexed, pronated paretic forearm sits rotated
    // relative to the healthy placements.
    let offset: f32 = rng.gen_range(-1.0..1.0)
        + if population == Population::Stroke {
            STROKE_ROTATION
        } else {
            0.0
        };
    // Finger extensors weaken more than flexors; mild impairment already
    // shows, hence the fourth root.
    let mild = sev.powf(0.25);
    let a_open = scale * (1.0 - 0.5 * mild) * rng.gen_range(0.8..1.2);
    let a_close = scale * rng.gen_range(0.8..1.2);
    let (cocon, onset, rise, release, tone, tremor) = match population {
        Population::Healthy => (
            rng.gen_range(0.0..0.1),
            rng.gen_range(0.02..0.1),
            rng.gen_range(0.05..0.15),
            rng.gen_range(0.05..0.1),
            0.0,
            0.0,
        ),
        Population::Stroke => (
            0.05 * (1.0 - mild) + 0.9 * mild,
            0.05 + 0.5 * sev + rng.gen_range(0.0..0.05),
            0.1 + 0.6 * sev + rng.gen_range(0.0..0.05),
            0.08 + 0.3 * sev,
            0.6 * mild,
            0.05 * mild,
        ),
    };
    let noise_std = rng.gen_range(0.04..0.06) * (1.0 + 0.5 * sev);
    let tremor_hz = rng.gen_range(4.0..8.0);

    let mut amp = vec![0.0f32; 3 * CHANNELS];
    let mut leak = vec![0.0f32; 3 * CHANNELS];
    for c in 0..CHANNELS {
        let ext = bump(EXTENSOR_CENTER + offset, c);
        let flex = bump(FLEXOR_CENTER + offset, c);
        amp[RELAX * CHANNELS + c] = tone * a_close * flex;
        amp[OPEN * CHANNELS + c] = a_open * ext;
        amp[CLOSE * CHANNELS + c] = a_close * flex;
        // Flexors fire during attempted opening at their own strength; the
        // reverse leak is weaker.
        leak[OPEN * CHANNELS + c] = cocon * a_close * flex;
        leak[CLOSE * CHANNELS + c] = 0.3 * cocon * a_close * ext;
    }
    Ok(SubjectProfile {
        subject_id: subject_id.to_string(),
        population,
        severity: sev,
        amplitudes: Tensor::new(vec![3, CHANNELS], amp)?,
        cocontraction: Tensor::new(vec![3, CHANNELS], leak)?,
        onset_delay_s: onset,
        rise_time_s: rise,
        release_time_s: release,
        noise_std,
        tremor_hz,
        tremor_amp: tremor,
        placement_offset: offset,
    })
}

/// Multichannel EMG with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub population: Population,
    pub set_kind: SetKind,
    pub condition: String,
    pub sample_rate_hz: f32,
    /// `[N×C]`.
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        self.samples.row(t)
    }
}

/// Per-sample multiplier of one attempt: a delayed first-order rise after the
/// cue, a first-order release after the cue ends.
fn envelope(t: usize, start: usize, end: usize, p: &SubjectProfile, rate: f32) -> f32 {
    let on = start as f32 + p.onset_delay_s * rate;
    let t = t as f32;
    if t < on {
        return 0.0;
    }
    // rise_time is the 10-90% time of a first-order response.
    let tau_rise = (p.rise_time_s * rate / 9f32.ln()).max(1e-3);
    let tau_fall = (p.release_time_s * rate).max(1e-3);
    let off = end as f32 + 0.5 * p.onset_delay_s * rate;
    let level = |x: f32| 1.0 - (-(x - on) / tau_rise).exp();
    if t < off {
        level(t)
    } else {
        level(off) * (-(t - off) / tau_fall).exp()
    }
}

/// Unit-mean rectified AR(1) noise, one independent stream per channel.
pub(crate) fn rectified_carrier(n: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let a = 0.3f32;
    let innov = (1.0 - a * a).sqrt();
    let norm = (std::f32::consts::PI / 2.0).sqrt();
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut state = vec![0.0f32; channels];
    let mut out = Vec::with_capacity(n * channels);
    for _ in 0..n {
        for s in state.iter_mut() {
            *s = a * *s + innov * unit.sample(rng);
            out.push(s.abs() * norm);
        }
    }
    out
}

/// Renders a recording of `profile` following `timeline`.
pub fn synthesize(
    profile: &SubjectProfile,
    timeline: &CueTimeline,
    seed: u64,
) -> Result<Recording> {
    let c = profile.amplitudes.shape()[1];
    let n = timeline.num_samples();
    let rate = timeline.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let carrier = rectified_carrier(n, c, &mut rng);
    let noise = Normal::new(0.0f32, profile.noise_std.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let amp = profile.amplitudes.data();
    let leak = profile.cocontraction.data();
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);

    // Activation drive per sample and channel, before the carrier.
    let mut drive = vec![0.0f32; n * c];
    for (k, start, end) in timeline.spans() {
        if k == RELAX {
            // Resting tone beats with the tremor.
            for t in start..end {
                let g = 1.0
                    + profile.tremor_amp
                        * (std::f32::consts::TAU * profile.tremor_hz * t as f32 / rate + phase)
                            .sin();
                for ch in 0..c {
                    drive[t * c + ch] += g.max(0.0) * amp[RELAX * c + ch];
                }
            }
            continue;
        }
        // Paretic effort varies far more between attempts.
        let spread = 0.15 + 0.35 * profile.severity.powf(0.25);
        let effort: f32 = rng.gen_range(1.0 - spread..1.0 + spread);
        let tail = (profile.release_time_s * rate * 6.0) as usize
            + (profile.onset_delay_s * rate) as usize;
        for t in start..(end + tail).min(n) {
            let e = envelope(t, start, end, profile, rate);
            if e <= 0.0 {
                continue;
            }
            let tremor = 1.0
                + profile.tremor_amp
                    * (std::f32::consts::TAU * profile.tremor_hz * t as f32 / rate + phase).sin();
            let g = effort * e * tremor.max(0.0);
            for ch in 0..c {
                drive[t * c + ch] += g * (amp[k * c + ch] + leak[k * c + ch]);
            }
        }
    }
    let samples: Vec<f32> = drive
        .iter()
        .zip(&carrier)
        .map(|(d, cr)| d * cr + noise.sample(&mut rng))
        .collect();
    Ok(Recording {
        subject_id: profile.subject_id.clone(),
        population: profile.population,
        set_kind: SetKind::Train,
        condition: "baseline".into(),
        sample_rate_hz: rate,
        samples: Tensor::new(vec![n, c], samples)?,
        labels: timeline.labels(),
    })
}
