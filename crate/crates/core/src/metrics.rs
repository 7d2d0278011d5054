//! Raw (per-timestep) accuracy and event-based transition accuracy.
//!
//! A ground-truth transition into class `c` at sample `i` passes when the
//! prediction switches into `c` inside the reaction buffer
//! `[i, min(i + buffer, next transition))` and then holds `c` without a
//! single deviation until the next transition (or the end of the stream).
//! A switch means `pred[j] == c` with `pred[j - 1] != c`; a prediction that
//! merely stays on a class it was already emitting does not count as
//! reacting to the cue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Recording;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stream::predict_recording;

pub const DEFAULT_BUFFER_S: f32 = 1.0;

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "truth has {} samples, prediction has {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("empty label stream".into()));
    }
    Ok(())
}

pub fn raw_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `(index, from, to)` for every sample where the label changes.
pub fn extract_transitions(truth: &[usize]) -> Vec<(usize, usize, usize)> {
    truth
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, w)| (i + 1, w[0], w[1]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub index: usize,
    pub from_class: usize,
    pub to_class: usize,
    pub buffer_end: usize,
    pub maintenance_end: usize,
    /// Sample at which the prediction switched into the new class.
    pub detected_at: Option<usize>,
    pub detected: bool,
    pub flicker_free: bool,
    pub passed: bool,
}

/// Scores every ground-truth transition. Returns `None` for the fraction when
/// the stream has no transitions.
pub fn transition_accuracy(
    truth: &[usize],
    pred: &[usize],
    sample_rate_hz: f32,
    buffer_s: f32,
) -> Result<(Option<f64>, Vec<TransitionEvent>)> {
    check_lengths(truth, pred)?;
    if !(buffer_s >= 0.0) {
        return Err(Error::Config(format!(
            "reaction buffer {buffer_s} s must be non-negative"
        )));
    }
    let buffer = (buffer_s * sample_rate_hz).round() as usize;
    let changes = extract_transitions(truth);
    let mut events = Vec::with_capacity(changes.len());
    for (n, &(i, from, to)) in changes.iter().enumerate() {
        let maintenance_end = changes.get(n + 1).map_or(truth.len(), |e| e.0);
        let buffer_end = (i + buffer).min(maintenance_end);
        let detected_at = (i..buffer_end).find(|&j| pred[j] == to && (j == 0 || pred[j - 1] != to));
        let hold_from = detected_at.unwrap_or(buffer_end);
        let flicker_free = pred[hold_from..maintenance_end].iter().all(|&p| p == to);
        let detected = detected_at.is_some();
        events.push(TransitionEvent {
            index: i,
            from_class: from,
            to_class: to,
            buffer_end,
            maintenance_end,
            detected_at,
            detected,
            flicker_free,
            passed: detected && flicker_free,
        });
    }
    if events.is_empty() {
        return Ok((None, events));
    }
    let passed = events.iter().filter(|e| e.passed).count();
    Ok((Some(passed as f64 / events.len() as f64), events))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub raw_accuracy: f64,
    /// Absent when the recording has no transitions.
    pub transition_accuracy: Option<f64>,
    pub num_samples: usize,
    pub sample_rate_hz: f32,
    pub buffer_s: f32,
    /// Where the reaction buffer starts relative to the ground-truth change.
    pub buffer_anchor: String,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub events: Vec<TransitionEvent>,
}

pub fn score(
    truth: &[usize],
    pred: &[usize],
    num_classes: usize,
    sample_rate_hz: f32,
    buffer_s: f32,
) -> Result<MetricsReport> {
    let raw = raw_accuracy(truth, pred)?;
    let (trans, events) = transition_accuracy(truth, pred, sample_rate_hz, buffer_s)?;
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Label(format!(
                "label pair ({t}, {p}) outside [0, {num_classes})"
            )));
        }
        confusion[t][p] += 1;
    }
    Ok(MetricsReport {
        raw_accuracy: raw,
        transition_accuracy: trans,
        num_samples: truth.len(),
        sample_rate_hz,
        buffer_s,
        buffer_anchor: "transition".into(),
        confusion,
        events,
    })
}

/// Unweighted means over reports; recordings without transitions are left
/// out of the transition mean.
pub fn mean_metrics(reports: &[&MetricsReport]) -> (f64, Option<f64>) {
    if reports.is_empty() {
        return (f64::NAN, None);
    }
    let raw = reports.iter().map(|r| r.raw_accuracy).sum::<f64>() / reports.len() as f64;
    let trans: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.transition_accuracy)
        .collect();
    if trans.len() < reports.len() {
        log::warn!(
            "{} recording(s) without transitions excluded from the transition mean",
            reports.len() - trans.len()
        );
    }
    let t = (!trans.is_empty()).then(|| trans.iter().sum::<f64>() / trans.len() as f64);
    (raw, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub subject_id: String,
    pub set_kind: String,
    pub condition: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub recordings: Vec<RecordingScore>,
    pub mean_raw_accuracy: f64,
    pub mean_transition_accuracy: Option<f64>,
    pub hop: usize,
    pub buffer_s: f32,
}

/// Sliding-window prediction and scoring of every recording, plus
/// unweighted means.
pub fn evaluate_testsuite(
    model: &Model,
    recordings: &[&Recording],
    hop: usize,
    buffer_s: f32,
) -> Result<SuiteReport> {
    let k = model.config.num_classes;
    let scores = recordings
        .par_iter()
        .map(|rec| {
            let pred = predict_recording(model, rec, hop)?;
            Ok(RecordingScore {
                subject_id: rec.subject_id.clone(),
                set_kind: rec.set_kind.to_string(),
                condition: rec.condition.clone(),
                report: score(&rec.labels, &pred, k, rec.sample_rate_hz, buffer_s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MetricsReport> = scores.iter().map(|s| &s.report).collect();
    let (raw, trans) = mean_metrics(&refs);
    Ok(SuiteReport {
        recordings: scores,
        mean_raw_accuracy: raw,
        mean_transition_accuracy: trans,
        hop,
        buffer_s,
    })
}
