use std::io::Write;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use emgadapt::datagen::{
    make_set_timeline, sample_subject, synthesize, Population, Recording, TimelineKind,
};
use emgadapt::model::{Model, ModelConfig, Normalizer, RELAX};
use emgadapt::numerics::Tensor;
use emgadapt::stream::{predict_recording, replay_source, run_stream, socket_source, StreamConfig};
use emgadapt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn recording(seed: u64) -> Recording {
    let p = sample_subject(Population::Healthy, 0.0, seed, "H01").unwrap();
    synthesize(&p, &make_set_timeline(TimelineKind::ClosingOnly), seed + 1).unwrap()
}

fn truncated(rec: &Recording, n: usize) -> Recording {
    let c = rec.channels();
    Recording {
        samples: Tensor::new(vec![n, c], rec.samples.data()[..n * c].to_vec()).unwrap(),
        labels: rec.labels[..n].to_vec(),
        ..rec.clone()
    }
}

/// A random model with a sharpened head, so its predictions vary over time.
fn model(rec: &Recording) -> Model {
    let mut m = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    m.norm = Normalizer::fit(8, [rec.samples.data()]).unwrap();
    for v in m.params.get_mut("head_intent.weight").unwrap().data_mut() {
        *v *= 20.0;
    }
    m
}

fn lossless() -> StreamConfig {
    StreamConfig {
        realtime_factor: 0.0,
        ..StreamConfig::default()
    }
}

#[test]
fn online_commands_equal_offline_prediction() {
    let rec = recording(3);
    let m = model(&rec);
    let offline = predict_recording(&m, &rec, 10).unwrap();
    let mut classes: Vec<usize> = offline.clone();
    classes.sort_unstable();
    classes.dedup();
    assert!(classes.len() >= 2, "degenerate fixture: {classes:?}");

    let mut seen = 0;
    let run = run_stream(
        &m,
        &lossless(),
        Box::new(replay_source(&rec, 0.0)),
        &mut |_| seen += 1,
    )
    .unwrap();
    assert_eq!(run.commands, offline);
    assert_eq!(seen, run.events.len());
    assert_eq!(run.report.drops, 0);
    assert_eq!(run.report.samples, rec.num_samples());
    let warm = run.events.iter().filter(|e| e.warmup).count();
    assert_eq!(warm, 200 / 10 - 1);
    assert!(run.events.iter().all(|e| !e.warmup || e.class == RELAX));
}

#[test]
fn relax_biased_model_on_silence_stays_relaxed() {
    let rec = recording(4);
    let mut m = model(&rec);
    let mut silent = truncated(&rec, 1000);
    silent.samples.data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.params
        .get_mut("head_intent.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[1e4, 0.0, 0.0]);
    let run = run_stream(
        &m,
        &lossless(),
        Box::new(replay_source(&silent, 0.0)),
        &mut |_| {},
    )
    .unwrap();
    assert!(run.commands.iter().all(|&c| c == RELAX));
}

#[test]
fn slow_consumer_drops_oldest_samples() {
    let rec = truncated(&recording(5), 600);
    let m = model(&rec);
    let cfg = StreamConfig {
        realtime_factor: 1.0,
        queue_capacity: 20,
        inference_delay_us: 100_000,
        ..StreamConfig::default()
    };
    let run = run_stream(&m, &cfg, Box::new(replay_source(&rec, 1.0)), &mut |_| {}).unwrap();
    assert!(run.report.drops > 0);
    assert_eq!(run.commands.len(), 600);
}

fn spawn_client(port: u16, payload: Vec<u8>, linger: Duration) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut conn = TcpStream::connect(("127.0.0.1", port)).unwrap();
        conn.write_all(&payload).unwrap();
        thread::sleep(linger);
    })
}

#[test]
fn loopback_socket_matches_replay() {
    let rec = truncated(&recording(6), 2000);
    let m = model(&rec);
    let src = socket_source(("127.0.0.1", 0), 8, Duration::from_secs(2)).unwrap();
    let port = src.local_port().unwrap();
    let payload: Vec<u8> = rec
        .samples
        .data()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let client = spawn_client(port, payload, Duration::ZERO);
    let live = run_stream(&m, &lossless(), Box::new(src), &mut |_| {}).unwrap();
    client.join().unwrap();
    let replay = run_stream(
        &m,
        &lossless(),
        Box::new(replay_source(&rec, 0.0)),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(live.commands, replay.commands);
    assert_eq!(live.report.samples, 2000);
}

#[test]
fn short_record_is_a_protocol_error() {
    let rec = recording(7);
    let m = model(&rec);
    let src = socket_source(("127.0.0.1", 0), 8, Duration::from_secs(2)).unwrap();
    let port = src.local_port().unwrap();
    let payload: Vec<u8> = [0.5f32; 7].iter().flat_map(|v| v.to_le_bytes()).collect();
    let client = spawn_client(port, payload, Duration::ZERO);
    let out = run_stream(&m, &lossless(), Box::new(src), &mut |_| {});
    client.join().unwrap();
    assert!(matches!(out, Err(Error::Protocol(_))), "{out:?}");
}

#[test]
fn silent_client_ends_the_stream_cleanly() {
    let rec = recording(8);
    let m = model(&rec);
    let src = socket_source(("127.0.0.1", 0), 8, Duration::from_secs(2)).unwrap();
    let port = src.local_port().unwrap();
    let client = spawn_client(port, Vec::new(), Duration::from_secs(3));
    let run = run_stream(&m, &StreamConfig::default(), Box::new(src), &mut |_| {}).unwrap();
    client.join().unwrap();
    assert_eq!(run.report.samples, 0);
    assert!(run.commands.is_empty());
}

#[test]
fn bad_hop_is_rejected() {
    let rec = recording(9);
    let m = model(&rec);
    let cfg = StreamConfig {
        hop: 0,
        ..StreamConfig::default()
    };
    let out = run_stream(&m, &cfg, Box::new(replay_source(&rec, 0.0)), &mut |_| {});
    assert!(matches!(out, Err(Error::Config(_))));
}
