//! Sliding-window inference over a live or replayed sample stream.
//!
//! A producer thread pulls samples from the source (which keeps the sample
//! clock) into a bounded queue; the consumer runs the model every `hop`
//! samples and emits one command per hop. The command for the hop is the
//! model's prediction at the newest sample of the window.

mod queue;
mod source;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::datagen::{read_recording, Recording};
use crate::error::{Error, Result};
use crate::model::{argmax, infer_patch_logits, Model, RELAX};
use crate::numerics::{softmax_vec, Tensor};
use queue::{SampleQueue, Stamped};

pub use source::{replay_source, socket_source, ReplaySource, SampleSource, SocketSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "m")]
pub enum Smoothing {
    None,
    /// Majority vote over the last `m` hop predictions (ties keep the newest).
    Majority(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub hop: usize,
    /// 1.0 replays at the recording rate; 0 replays losslessly as fast as possible.
    pub realtime_factor: f32,
    pub smoothing: Smoothing,
    /// Samples held between producer and consumer.
    pub queue_capacity: usize,
    pub heartbeat_timeout_s: f32,
    /// Artificial per-inference delay, for exercising the drop path.
    pub inference_delay_us: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            hop: 10,
            realtime_factor: 1.0,
            smoothing: Smoothing::None,
            queue_capacity: 400,
            heartbeat_timeout_s: 2.0,
            inference_delay_us: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        if self.hop == 0 || self.hop > window_len {
            return Err(Error::Config(format!(
                "hop {} must be in [1, {window_len}]",
                self.hop
            )));
        }
        if let Smoothing::Majority(0) = self.smoothing {
            return Err(Error::Config("majority smoothing needs m >= 1".into()));
        }
        if !(self.realtime_factor >= 0.0) {
            return Err(Error::Config("realtime_factor must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandEvent {
    /// Index of the newest sample in the window.
    pub sample_index: usize,
    pub class: usize,
    pub posterior_max: f32,
    pub inference_latency_us: u64,
    pub queue_depth: usize,
    /// True for hops emitted before the first full window.
    pub warmup: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: u64,
    pub p99: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub achieved_factor: f64,
    pub latency_us: LatencySummary,
    pub drops: usize,
    pub commands_path: Option<String>,
    pub samples: usize,
    pub events: usize,
    pub hop: usize,
    pub wall_time_s: f64,
}

/// Output of a stream run: the report plus the per-timestep command stream.
#[derive(Clone, Debug)]
pub struct StreamRun {
    pub report: StreamReport,
    pub commands: Vec<usize>,
    pub events: Vec<CommandEvent>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[u64], q: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Prediction at the newest sample of each normalized `[B×T×C]` window, with
/// its posterior maximum.
fn newest_predictions(model: &Model, windows: Tensor) -> Result<Vec<(usize, f32)>> {
    let tp = model.config.num_patches();
    let logits = infer_patch_logits(&model.params, None, &model.config, windows)?;
    Ok((0..logits.rows() / tp)
        .map(|b| {
            let row = logits.row(b * tp + tp - 1);
            let p = softmax_vec(row);
            (argmax(row), p.iter().cloned().fold(f32::MIN, f32::max))
        })
        .collect())
}

/// Offline sliding-window prediction of a whole recording. Window ends fall
/// on every multiple of `hop` from `T` on; each window's newest-sample class
/// labels the `hop` samples ending there. Samples before the first window
/// are relax; a trailing partial hop keeps the last command.
pub fn predict_recording(model: &Model, rec: &Recording, hop: usize) -> Result<Vec<usize>> {
    let cfg = &model.config;
    let (t, c) = (cfg.window_len, cfg.channels);
    if rec.channels() != c {
        return Err(Error::Dimension(format!(
            "recording has {} channels, model expects {c}",
            rec.channels()
        )));
    }
    if hop == 0 || hop > t {
        return Err(Error::Config(format!("hop {hop} must be in [1, {t}]")));
    }
    let n = rec.num_samples();
    let norm = model.norm.apply(rec.samples.data());
    let mut out = vec![RELAX; n];
    let ends: Vec<usize> = (1..)
        .map(|k| k * hop)
        .skip_while(|&e| e < t)
        .take_while(|&e| e <= n)
        .collect();
    const BATCH: usize = 64;
    let mut last = RELAX;
    for chunk in ends.chunks(BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * t * c);
        for &e in chunk {
            data.extend_from_slice(&norm[(e - t) * c..e * c]);
        }
        let preds = newest_predictions(model, Tensor::new(vec![chunk.len(), t, c], data)?)?;
        for (&e, &(cls, _)) in chunk.iter().zip(&preds) {
            out[e - hop..e].iter_mut().for_each(|v| *v = cls);
            last = cls;
        }
    }
    if let Some(&e) = ends.last() {
        out[e..].iter_mut().for_each(|v| *v = last);
    }
    Ok(out)
}

struct Smoother {
    mode: Smoothing,
    recent: Vec<usize>,
}

impl Smoother {
    fn push(&mut self, cls: usize, k: usize) -> usize {
        let Smoothing::Majority(m) = self.mode else {
            return cls;
        };
        self.recent.push(cls);
        if self.recent.len() > m {
            self.recent.remove(0);
        }
        let mut counts = vec![0usize; k];
        for &r in &self.recent {
            counts[r] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        if counts[cls] == best {
            cls
        } else {
            counts.iter().position(|&n| n == best).unwrap_or(cls)
        }
    }
}

/// Opens `input`: a recording file to replay, or `tcp:PORT` to accept one
/// client on localhost.
pub fn read_source(
    input: &str,
    model: &Model,
    cfg: &StreamConfig,
) -> Result<Box<dyn SampleSource>> {
    if let Some(port) = input.strip_prefix("tcp:") {
        let port: u16 = port
            .parse()
            .map_err(|_| Error::Config(format!("bad port in {input:?}")))?;
        let src = socket_source(
            ("127.0.0.1", port),
            model.config.channels,
            Duration::from_secs_f32(cfg.heartbeat_timeout_s),
        )?;
        log::info!(
            "listening on 127.0.0.1:{}",
            src.local_port().unwrap_or(port)
        );
        return Ok(Box::new(src));
    }
    let rec = read_recording(input)?;
    Ok(Box::new(replay_source(&rec, cfg.realtime_factor)))
}

/// Runs the model over `source` until it ends. `sink` sees every command
/// event in order, from the consumer side only.
pub fn run_stream(
    model: &Model,
    cfg: &StreamConfig,
    mut source: Box<dyn SampleSource>,
    sink: &mut dyn FnMut(&CommandEvent),
) -> Result<StreamRun> {
    let mc = &model.config;
    let (t, c) = (mc.window_len, mc.channels);
    cfg.validate(t)?;
    if source.channels() != c {
        return Err(Error::Dimension(format!(
            "source has {} channels, model expects {c}",
            source.channels()
        )));
    }
    let rate = source.sample_rate_hz();
    let lossless = cfg.realtime_factor == 0.0;
    let queue = SampleQueue::new(cfg.queue_capacity);
    let started = Instant::now();

    let mut events = Vec::new();
    let mut latencies = Vec::new();
    let mut produced = 0usize;
    std::thread::scope(|scope| -> Result<()> {
        let producer = scope.spawn(|| {
            let mut index = 0usize;
            loop {
                match source.next_sample() {
                    Ok(Some(values)) => {
                        if values.len() != c {
                            queue.close(Some(Error::Dimension(format!(
                                "sample {index} has {} channels, expected {c}",
                                values.len()
                            ))));
                            return index;
                        }
                        let item = Stamped {
                            index,
                            values,
                            at: Instant::now(),
                        };
                        let accepted = if lossless {
                            queue.push_blocking(item)
                        } else {
                            queue.push_drop_oldest(item)
                        };
                        if !accepted {
                            return index;
                        }
                        index += 1;
                    }
                    Ok(None) => {
                        queue.close(None);
                        return index;
                    }
                    Err(e) => {
                        queue.close(Some(e));
                        return index;
                    }
                }
            }
        });

        let mut consume = || -> Result<()> {
            // Ring of the newest `t` normalized samples.
            let mut ring = vec![0.0f32; t * c];
            let mut filled = 0usize;
            let mut head = 0usize;
            let mut smoother = Smoother {
                mode: cfg.smoothing,
                recent: Vec::new(),
            };
            let mut batch = Vec::new();
            loop {
                batch.clear();
                let depth = queue.pop_all(&mut batch);
                if batch.is_empty() {
                    break;
                }
                for (k, s) in batch.iter().enumerate() {
                    let norm = model.norm.apply(&s.values);
                    ring[head * c..(head + 1) * c].copy_from_slice(&norm);
                    head = (head + 1) % t;
                    filled = (filled + 1).min(t);
                    if (s.index + 1) % cfg.hop != 0 {
                        continue;
                    }
                    let ev = if filled < t || s.index + 1 < t {
                        CommandEvent {
                            sample_index: s.index,
                            class: RELAX,
                            posterior_max: 1.0,
                            inference_latency_us: 0,
                            queue_depth: depth - k - 1,
                            warmup: true,
                        }
                    } else {
                        let mut window = Vec::with_capacity(t * c);
                        window.extend_from_slice(&ring[head * c..]);
                        window.extend_from_slice(&ring[..head * c]);
                        let (cls, pmax) =
                            newest_predictions(model, Tensor::new(vec![1, t, c], window)?)?[0];
                        if cfg.inference_delay_us > 0 {
                            std::thread::sleep(Duration::from_micros(cfg.inference_delay_us));
                        }
                        let latency = s.at.elapsed().as_micros() as u64;
                        latencies.push(latency);
                        CommandEvent {
                            sample_index: s.index,
                            class: smoother.push(cls, mc.num_classes),
                            posterior_max: pmax,
                            inference_latency_us: latency,
                            queue_depth: depth - k - 1,
                            warmup: false,
                        }
                    };
                    sink(&ev);
                    events.push(ev);
                }
            }
            Ok(())
        };
        let consumed = consume();
        if consumed.is_err() {
            queue.abandon();
        }
        produced = producer.join().expect("producer thread");
        consumed
    })?;
    let wall = started.elapsed().as_secs_f64();
    let (drops, error) = queue.finish();
    if let Some(e) = error {
        return Err(e);
    }

    let mut commands = vec![RELAX; produced];
    let mut next = 0usize;
    let mut last = RELAX;
    for ev in &events {
        let end = ev.sample_index + 1;
        let from = end.saturating_sub(cfg.hop).max(next);
        commands[next..from].iter_mut().for_each(|v| *v = last);
        commands[from..end].iter_mut().for_each(|v| *v = ev.class);
        last = ev.class;
        next = end;
    }
    commands[next..].iter_mut().for_each(|v| *v = last);

    let report = StreamReport {
        achieved_factor: if wall > 0.0 {
            produced as f64 / rate as f64 / wall
        } else {
            f64::INFINITY
        },
        latency_us: LatencySummary {
            p50: percentile(&latencies, 50.0),
            p99: percentile(&latencies, 99.0),
        },
        drops,
        commands_path: None,
        samples: produced,
        events: events.len(),
        hop: cfg.hop,
        wall_time_s: wall,
    };
    Ok(StreamRun {
        report,
        commands,
        events,
    })
}
