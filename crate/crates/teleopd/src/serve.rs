//! Live serving: the pipeline ticks on its own thread at the configured rate
//! while wire clients (raw TCP frames or web-socket binary messages) send
//! grip and control commands and receive the sensor-derived streams.
//!
//! Threads only talk through channels. Commands from every client funnel
//! into the pipeline's fifo queues; a broadcaster drains the pipeline's
//! latest-wins outputs and hands encoded frames to a bounded per-client
//! queue, dropping frames for a client that cannot keep up.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use log::{debug, info, warn};
use serde::Serialize;

use tactile_core::flowtrack::FlowField;
use tactile_core::forceest::ForceEstimate;
use tactile_core::teleop::{
    spawn_recorder, GripCommand, Pipeline, PipelineConfig, PipelineHandles, SessionLine, SessionSummary, Stamped,
    TickRecord,
};
use tactile_core::wire::channel::FifoProducer;
use tactile_core::wire::{encode, now_ns, ChannelError, ControlCode, Frame, FrameReader, Message, WireFlowEntry};
use tactile_core::GelImage;

const CLIENT_QUEUE: usize = 64;

/// An encoded frame shared by every client it is broadcast to.
type Outgoing = Arc<Vec<u8>>;
const POLL: Duration = Duration::from_millis(20);

pub struct ServeOptions {
    pub cfg: PipelineConfig,
    /// Run until shut down when `None`.
    pub duration: Option<Duration>,
    pub session: Option<PathBuf>,
    pub auto_lift: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServeStats {
    pub ticks: u64,
    pub faults: u64,
    pub clients: u64,
    pub grip_received: u64,
    pub grip_consumed: u64,
    pub control_received: u64,
    pub heartbeats: u64,
    pub rejected_frames: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub sensor_frames_forwarded: u64,
    /// Newer SENSOR_FRAMEs published while a forwarded one was being sent.
    pub max_sensor_staleness: u64,
    pub latency_samples: u64,
    pub mean_latency_ms: Option<f64>,
    pub max_latency_ms: Option<f64>,
    pub mean_tick_ms: f64,
    pub max_tick_ms: f64,
}

struct Client {
    id: u64,
    tx: SyncSender<Outgoing>,
}

struct Shared {
    shutdown: AtomicBool,
    stats: Mutex<ServeStats>,
    clients: Mutex<Vec<Client>>,
    next_client: AtomicU64,
    out_seq: AtomicU32,
    grip: FifoProducer<GripCommand>,
    control: FifoProducer<ControlCode>,
}

impl Shared {
    fn stats(&self) -> MutexGuard<'_, ServeStats> {
        self.stats.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn clients(&self) -> MutexGuard<'_, Vec<Client>> {
        self.clients.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Relaxed)
    }

    fn register(&self) -> (u64, Receiver<Outgoing>, SyncSender<Outgoing>) {
        let id = self.next_client.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::sync_channel(CLIENT_QUEUE);
        self.clients().push(Client { id, tx: tx.clone() });
        self.stats().clients += 1;
        (id, rx, tx)
    }

    fn unregister(&self, id: u64) {
        self.clients().retain(|c| c.id != id);
    }

    fn encode(&self, msg: &Message, timestamp_ns: u64) -> Option<Outgoing> {
        let seq = self.out_seq.fetch_add(1, Ordering::Relaxed);
        match encode(msg, seq, timestamp_ns, true) {
            Ok(bytes) => Some(Arc::new(bytes)),
            Err(e) => {
                warn!("cannot encode outgoing frame: {e}");
                None
            }
        }
    }

    /// Acts on one frame from a client. Returns a reply to send back, if any.
    fn handle(&self, frame: Frame) -> Option<Outgoing> {
        match frame.message {
            Message::GripCmd { aperture, max_rate } => {
                let cmd = GripCommand {
                    aperture: f64::from(aperture),
                    max_rate: f64::from(max_rate),
                    enqueued_ns: now_ns(),
                };
                // Blocks when the queue is full: commands are never dropped.
                if self.grip.send(cmd).is_ok() {
                    self.stats().grip_received += 1;
                }
                None
            }
            Message::Control(code) => {
                if self.control.send(code).is_ok() {
                    self.stats().control_received += 1;
                }
                None
            }
            Message::Heartbeat => {
                self.stats().heartbeats += 1;
                self.encode(&Message::Heartbeat, frame.timestamp_ns)
            }
            other => {
                debug!("ignoring client message type {:#04x}", other.msg_type());
                None
            }
        }
    }

    fn broadcast(&self, frame: Outgoing) {
        let mut dropped = 0;
        let mut sent = 0;
        self.clients().retain(|c| match c.tx.try_send(frame.clone()) {
            Ok(()) => {
                sent += 1;
                true
            }
            Err(TrySendError::Full(_)) => {
                dropped += 1;
                true
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
        let mut stats = self.stats();
        stats.frames_sent += sent;
        stats.frames_dropped += dropped;
    }
}

pub fn force_message(est: &ForceEstimate) -> Message {
    let w = est.wrench;
    Message::Force {
        fx: w.fx as f32,
        fy: w.fy as f32,
        fn_: w.fn_ as f32,
        tau: w.tau as f32,
        total: est.total as f32,
        quality_percent: (est.quality * 100.0).round().clamp(0.0, 100.0) as u8,
    }
}

pub fn sensor_message(img: &GelImage) -> Message {
    Message::SensorFrame {
        width: img.width() as u16,
        height: img.height() as u16,
        format: 0,
        pixels: img.pixels().to_vec(),
    }
}

pub fn flow_message(flow: &FlowField) -> Message {
    Message::FlowField(
        flow.entries
            .iter()
            .map(|e| WireFlowEntry {
                bx: e.base.x as f32,
                by: e.base.y as f32,
                dx: e.delta.x as f32,
                dy: e.delta.y as f32,
                valid: e.valid,
            })
            .collect(),
    )
}

pub struct Server {
    opts: ServeOptions,
    tcp: TcpListener,
    ws: TcpListener,
    shutdown: Arc<AtomicBool>,
}

/// Binds both listeners without starting anything, so callers can report
/// the actual ports before serving.
pub fn bind(opts: ServeOptions) -> Result<Server> {
    opts.cfg.validate()?;
    let w = &opts.cfg.wire;
    let tcp = TcpListener::bind((w.bind.as_str(), w.tcp_port))
        .with_context(|| format!("binding TCP {}:{}", w.bind, w.tcp_port))?;
    let ws = TcpListener::bind((w.bind.as_str(), w.ws_port))
        .with_context(|| format!("binding web-socket {}:{}", w.bind, w.ws_port))?;
    Ok(Server {
        opts,
        tcp,
        ws,
        shutdown: Arc::new(AtomicBool::new(false)),
    })
}

impl Server {
    pub fn tcp_addr(&self) -> io::Result<SocketAddr> {
        self.tcp.local_addr()
    }

    pub fn ws_addr(&self) -> io::Result<SocketAddr> {
        self.ws.local_addr()
    }

    /// Setting the flag stops [`Server::run`] at its next tick.
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    pub fn run(self) -> Result<ServeStats> {
        let Server {
            opts,
            tcp,
            ws,
            shutdown,
        } = self;
        let (mut pipeline, handles) = Pipeline::new(opts.cfg.clone())?;
        pipeline.set_auto_lift(opts.auto_lift);
        let PipelineHandles {
            grip,
            control,
            force,
            haptic,
            sensor,
            flow,
        } = handles;
        let shared = Arc::new(Shared {
            shutdown: AtomicBool::new(false),
            stats: Mutex::new(ServeStats::default()),
            clients: Mutex::new(Vec::new()),
            next_client: AtomicU64::new(0),
            out_seq: AtomicU32::new(0),
            grip,
            control,
        });

        let recorder = match &opts.session {
            Some(path) => {
                let (tx, handle) =
                    spawn_recorder(path).with_context(|| format!("creating session log {}", path.display()))?;
                let _ = tx.send(SessionLine::Config {
                    config: Box::new(opts.cfg.clone()),
                    mode: Some("serve".into()),
                });
                Some((tx, handle))
            }
            None => None,
        };

        let mut threads: Vec<JoinHandle<()>> = Vec::new();
        {
            let shared = shared.clone();
            threads.push(spawn("broadcast", move || {
                broadcast_loop(&shared, &force, &haptic, &sensor, &flow)
            })?);
        }
        for (listener, kind) in [(tcp, Transport::Tcp), (ws, Transport::WebSocket)] {
            listener.set_nonblocking(true)?;
            let shared = shared.clone();
            threads.push(spawn("accept", move || accept_loop(&shared, listener, kind))?);
        }

        let period = Duration::from_secs_f64(opts.cfg.dt());
        let started = Instant::now();
        let mut next = started;
        let mut ticks: Vec<TickRecord> = Vec::new();
        loop {
            if shutdown.load(Ordering::Relaxed) || opts.duration.is_some_and(|d| started.elapsed() >= d) {
                break;
            }
            if let Some(rec) = pipeline.tick() {
                {
                    let mut stats = shared.stats();
                    stats.ticks += 1;
                    stats.grip_consumed += u64::from(rec.grip_commands);
                    if rec.events.iter().any(|e| e.starts_with("fault")) {
                        stats.faults += 1;
                    }
                }
                if let Some((tx, _)) = &recorder {
                    let _ = tx.send(SessionLine::Tick(rec.clone()));
                }
                ticks.push(rec);
            }
            next += period;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            } else {
                // Fell behind: restart the schedule rather than burst.
                next = now;
            }
        }

        shared.shutdown.store(true, Ordering::Relaxed);
        drop(pipeline);
        for t in threads {
            let _ = t.join();
        }
        let summary = SessionSummary::from_ticks(&ticks);
        if let Some((tx, handle)) = recorder {
            let _ = tx.send(SessionLine::Summary(summary.clone()));
            drop(tx);
            match handle.join() {
                Ok(Ok(lines)) => info!("session log: {lines} lines"),
                Ok(Err(e)) => warn!("session log write failed: {e}"),
                Err(_) => warn!("session recorder panicked"),
            }
        }

        let mut stats = shared.stats().clone();
        stats.latency_samples = ticks
            .iter()
            .filter(|t| t.latency_ns.is_some())
            .map(|t| u64::from(t.grip_commands))
            .sum();
        stats.mean_latency_ms = summary.mean_latency_ms;
        stats.max_latency_ms = ticks
            .iter()
            .filter_map(|t| t.max_latency_ns)
            .map(|v| v as f64 / 1e6)
            .reduce(f64::max);
        stats.mean_tick_ms = summary.mean_tick_ms;
        stats.max_tick_ms = summary.max_tick_ms;
        Ok(stats)
    }
}

fn spawn<F: FnOnce() + Send + 'static>(name: &str, f: F) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name(name.to_string()).spawn(f)
}

fn broadcast_loop(
    shared: &Shared,
    force: &tactile_core::wire::channel::LatestConsumer<Stamped<ForceEstimate>>,
    haptic: &tactile_core::wire::channel::LatestConsumer<Stamped<tactile_core::hapticmap::HapticCommand>>,
    sensor: &tactile_core::wire::channel::LatestConsumer<Stamped<GelImage>>,
    flow: &tactile_core::wire::channel::LatestConsumer<Stamped<FlowField>>,
) {
    while !shared.stopping() {
        let h = match haptic.recv_timeout(Duration::from_millis(100)) {
            Ok(h) => h,
            Err(ChannelError::Timeout) => continue,
            Err(_) => break,
        };
        if let Ok(f) = force.try_recv() {
            if let Some(bytes) = shared.encode(&force_message(&f.value), f.timestamp_ns) {
                shared.broadcast(bytes);
            }
        }
        let msg = Message::haptic_from_intensities(&h.value.intensities);
        if let Some(bytes) = shared.encode(&msg, h.value.source_timestamp) {
            shared.broadcast(bytes);
        }
        let published_before = sensor.sent();
        if let Ok(s) = sensor.try_recv() {
            if let Some(bytes) = shared.encode(&sensor_message(&s.value), s.timestamp_ns) {
                shared.broadcast(bytes);
            }
            let newer = sensor.sent().saturating_sub(published_before);
            let mut stats = shared.stats();
            stats.sensor_frames_forwarded += 1;
            stats.max_sensor_staleness = stats.max_sensor_staleness.max(newer);
        }
        if let Ok(f) = flow.try_recv() {
            if let Some(bytes) = shared.encode(&flow_message(&f.value), f.timestamp_ns) {
                shared.broadcast(bytes);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Transport {
    Tcp,
    WebSocket,
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener, kind: Transport) {
    let mut workers = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                info!("{kind:?} client {peer} connected");
                let shared = shared.clone();
                let worker = spawn("client", move || {
                    let result = match kind {
                        Transport::Tcp => serve_tcp(&shared, stream),
                        Transport::WebSocket => serve_ws(&shared, stream),
                    };
                    match result {
                        Ok(()) => info!("{kind:?} client {peer} closed"),
                        Err(e) => info!("{kind:?} client {peer} dropped: {e:#}"),
                    }
                });
                match worker {
                    Ok(w) => workers.push(w),
                    Err(e) => warn!("cannot start client thread: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

fn serve_tcp(shared: &Arc<Shared>, stream: TcpStream) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let (id, rx, reply) = shared.register();

    let mut out = stream.try_clone()?;
    let writer_shared = shared.clone();
    let writer = spawn("client-writer", move || {
        while !writer_shared.stopping() {
            match rx.recv_timeout(POLL) {
                Ok(bytes) => {
                    if out.write_all(&bytes).is_err() {
                        break;
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        let _ = out.shutdown(std::net::Shutdown::Both);
    })?;

    let result = read_tcp(shared, stream, &reply);
    shared.unregister(id);
    drop(reply);
    let _ = writer.join();
    result
}

fn read_tcp(shared: &Shared, mut stream: TcpStream, reply: &SyncSender<Outgoing>) -> Result<()> {
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    while !shared.stopping() {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if is_timeout(&e) => continue,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        reader.extend(&buf[..n]);
        while let Some(frame) = reader.next_frame().context("unrecoverable framing error")? {
            match frame {
                Ok(frame) => {
                    if let Some(bytes) = shared.handle(frame) {
                        let _ = reply.try_send(bytes);
                    }
                }
                Err(e) => {
                    shared.stats().rejected_frames += 1;
                    debug!("rejected frame: {e}");
                }
            }
        }
    }
    Ok(())
}

fn serve_ws(shared: &Arc<Shared>, stream: TcpStream) -> Result<()> {
    use tungstenite::Message as WsMessage;

    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut socket = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake failed: {e}"))?;
    socket.get_mut().set_read_timeout(Some(Duration::from_millis(5)))?;
    let (id, rx, _reply) = shared.register();

    let result = (|| -> Result<()> {
        while !shared.stopping() {
            match socket.read() {
                Ok(WsMessage::Binary(bytes)) => match tactile_core::wire::decode(&bytes) {
                    Ok(frame) => {
                        if let Some(reply) = shared.handle(frame) {
                            socket.send(WsMessage::binary(reply.as_slice().to_vec()))?;
                        }
                    }
                    Err(e) => {
                        shared.stats().rejected_frames += 1;
                        debug!("rejected web-socket frame: {e}");
                    }
                },
                Ok(WsMessage::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
                Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
            loop {
                match rx.try_recv() {
                    Ok(bytes) => socket.send(WsMessage::binary(bytes.as_slice().to_vec()))?,
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => return Ok(()),
                }
            }
        }
        let _ = socket.close(None);
        Ok(())
    })();
    shared.unregister(id);
    result
}

/// Restricts the calling process, and every thread it starts afterwards,
/// to a single CPU.
#[cfg(target_os = "linux")]
pub fn pin_to_cpu(cpu: usize) -> Result<()> {
    // SAFETY: cpu_set_t is plain data; CPU_ZERO/CPU_SET only write inside it
    // and sched_setaffinity reads exactly size_of::<cpu_set_t>() bytes.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(io::Error::last_os_error()).with_context(|| format!("pinning to CPU {cpu}"));
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub fn pin_to_cpu(_cpu: usize) -> Result<()> {
    anyhow::bail!("--pin-cpu is only supported on Linux")
}
