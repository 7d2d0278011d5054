use std::io::{ErrorKind, Read};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::datagen::Recording;
use crate::error::{Error, Result};

/// A stream of multichannel samples. `Ok(None)` ends the stream.
pub trait SampleSource: Send {
    fn channels(&self) -> usize;
    fn sample_rate_hz(&self) -> f32;
    fn next_sample(&mut self) -> Result<Option<Vec<f32>>>;
}

/// Replays a recording, paced at `rate * factor` samples per second
/// (`factor == 0` means as fast as possible).
pub struct ReplaySource {
    samples: Vec<f32>,
    channels: usize,
    rate: f32,
    factor: f32,
    pos: usize,
    start: Option<Instant>,
}

pub fn replay_source(rec: &Recording, realtime_factor: f32) -> ReplaySource {
    ReplaySource {
        samples: rec.samples.data().to_vec(),
        channels: rec.channels(),
        rate: rec.sample_rate_hz,
        factor: realtime_factor.max(0.0),
        pos: 0,
        start: None,
    }
}

impl SampleSource for ReplaySource {
    fn channels(&self) -> usize {
        self.channels
    }

    fn sample_rate_hz(&self) -> f32 {
        self.rate
    }

    fn next_sample(&mut self) -> Result<Option<Vec<f32>>> {
        let n = self.samples.len() / self.channels;
        if self.pos >= n {
            return Ok(None);
        }
        if self.factor > 0.0 {
            let start = *self.start.get_or_insert_with(Instant::now);
            let due = start
                + Duration::from_secs_f64(
                    self.pos as f64 / (self.rate as f64 * self.factor as f64),
                );
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        let c = self.channels;
        let row = self.samples[self.pos * c..(self.pos + 1) * c].to_vec();
        self.pos += 1;
        Ok(Some(row))
    }
}

/// Receives little-endian f32 records of `channels` values from one TCP
/// client. A silent connection ends the stream after `heartbeat`.
pub struct SocketSource {
    listener: Option<TcpListener>,
    conn: Option<TcpStream>,
    channels: usize,
    rate: f32,
    heartbeat: Duration,
}

pub fn socket_source(
    addr: impl ToSocketAddrs,
    channels: usize,
    heartbeat: Duration,
) -> Result<SocketSource> {
    let listener = TcpListener::bind(addr)?;
    Ok(SocketSource {
        listener: Some(listener),
        conn: None,
        channels,
        rate: 200.0,
        heartbeat,
    })
}

impl SocketSource {
    pub fn local_port(&self) -> Option<u16> {
        self.listener
            .as_ref()
            .and_then(|l| l.local_addr().ok())
            .map(|a| a.port())
    }
}

impl SampleSource for SocketSource {
    fn channels(&self) -> usize {
        self.channels
    }

    fn sample_rate_hz(&self) -> f32 {
        self.rate
    }

    fn next_sample(&mut self) -> Result<Option<Vec<f32>>> {
        if self.conn.is_none() {
            let Some(listener) = self.listener.take() else {
                return Ok(None);
            };
            let (conn, _) = listener.accept()?;
            conn.set_read_timeout(Some(self.heartbeat))?;
            conn.set_nodelay(true)?;
            self.conn = Some(conn);
        }
        let conn = self.conn.as_mut().expect("connected");
        let mut buf = vec![0u8; 4 * self.channels];
        let mut got = 0;
        while got < buf.len() {
            match conn.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        if got == 0 {
            self.conn = None;
            return Ok(None);
        }
        if got < buf.len() {
            self.conn = None;
            return Err(Error::Protocol(format!(
                "partial record of {got} bytes; expected {} ({} channels of f32)",
                buf.len(),
                self.channels
            )));
        }
        Ok(Some(
            buf.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ))
    }
}
