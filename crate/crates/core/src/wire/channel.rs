//! In-process hand-off between pipeline stages.
//!
//! Two policies:
//!
//! * latest-wins: a single-slot mailbox. Sending never blocks and overwrites
//!   whatever the consumer has not taken yet, so a slow consumer only ever
//!   sees the freshest value. Used for sensor-derived data.
//! * fifo: a bounded queue. A full queue pushes back on the producer and
//!   nothing is lost. Used for operator commands.

use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ChannelError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("channel empty")]
    Empty,
    #[error("timed out")]
    Timeout,
    #[error("channel full")]
    Full,
    #[error("capacity must be at least 1")]
    ZeroCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    LatestWins,
    Fifo,
}

struct Slot<T> {
    value: Option<T>,
    sent: u64,
    overwritten: u64,
    producer_alive: bool,
    consumer_alive: bool,
}

struct Shared<T> {
    slot: Mutex<Slot<T>>,
    ready: Condvar,
}

impl<T> Shared<T> {
    fn lock(&self) -> MutexGuard<'_, Slot<T>> {
        self.slot.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub struct LatestProducer<T> {
    shared: Arc<Shared<T>>,
}

pub struct LatestConsumer<T> {
    shared: Arc<Shared<T>>,
}

pub fn latest_wins<T>() -> (LatestProducer<T>, LatestConsumer<T>) {
    let shared = Arc::new(Shared {
        slot: Mutex::new(Slot {
            value: None,
            sent: 0,
            overwritten: 0,
            producer_alive: true,
            consumer_alive: true,
        }),
        ready: Condvar::new(),
    });
    (LatestProducer { shared: shared.clone() }, LatestConsumer { shared })
}

impl<T> LatestProducer<T> {
    /// Replaces the pending value. Fails only when the consumer is gone.
    pub fn send(&self, value: T) -> Result<(), ChannelError> {
        let mut slot = self.shared.lock();
        if !slot.consumer_alive {
            return Err(ChannelError::Disconnected);
        }
        if slot.value.replace(value).is_some() {
            slot.overwritten += 1;
        }
        slot.sent += 1;
        drop(slot);
        self.shared.ready.notify_one();
        Ok(())
    }

    pub fn sent(&self) -> u64 {
        self.shared.lock().sent
    }
}

impl<T> Drop for LatestProducer<T> {
    fn drop(&mut self) {
        self.shared.lock().producer_alive = false;
        self.shared.ready.notify_all();
    }
}

impl<T> LatestConsumer<T> {
    pub fn try_recv(&self) -> Result<T, ChannelError> {
        let mut slot = self.shared.lock();
        match slot.value.take() {
            Some(v) => Ok(v),
            None if !slot.producer_alive => Err(ChannelError::Disconnected),
            None => Err(ChannelError::Empty),
        }
    }

    pub fn recv(&self) -> Result<T, ChannelError> {
        let mut slot = self.shared.lock();
        loop {
            if let Some(v) = slot.value.take() {
                return Ok(v);
            }
            if !slot.producer_alive {
                return Err(ChannelError::Disconnected);
            }
            slot = self.shared.ready.wait(slot).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, ChannelError> {
        let deadline = Instant::now() + timeout;
        let mut slot = self.shared.lock();
        loop {
            if let Some(v) = slot.value.take() {
                return Ok(v);
            }
            if !slot.producer_alive {
                return Err(ChannelError::Disconnected);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ChannelError::Timeout);
            }
            slot = self
                .shared
                .ready
                .wait_timeout(slot, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Values replaced before the consumer took them.
    pub fn overwritten(&self) -> u64 {
        self.shared.lock().overwritten
    }

    /// Total values sent so far.
    pub fn sent(&self) -> u64 {
        self.shared.lock().sent
    }
}

impl<T> Drop for LatestConsumer<T> {
    fn drop(&mut self) {
        self.shared.lock().consumer_alive = false;
    }
}

pub struct FifoProducer<T> {
    tx: mpsc::SyncSender<T>,
}

// Cloning lets several connection readers feed one command queue.
impl<T> Clone for FifoProducer<T> {
    fn clone(&self) -> Self {
        Self { tx: self.tx.clone() }
    }
}

pub struct FifoConsumer<T> {
    rx: mpsc::Receiver<T>,
}

pub fn fifo<T>(capacity: usize) -> Result<(FifoProducer<T>, FifoConsumer<T>), ChannelError> {
    if capacity == 0 {
        return Err(ChannelError::ZeroCapacity);
    }
    let (tx, rx) = mpsc::sync_channel(capacity);
    Ok((FifoProducer { tx }, FifoConsumer { rx }))
}

impl<T> FifoProducer<T> {
    /// Blocks while the queue is full.
    pub fn send(&self, value: T) -> Result<(), ChannelError> {
        self.tx.send(value).map_err(|_| ChannelError::Disconnected)
    }

    pub fn try_send(&self, value: T) -> Result<(), ChannelError> {
        self.tx.try_send(value).map_err(|e| match e {
            mpsc::TrySendError::Full(_) => ChannelError::Full,
            mpsc::TrySendError::Disconnected(_) => ChannelError::Disconnected,
        })
    }
}

impl<T> FifoConsumer<T> {
    pub fn recv(&self) -> Result<T, ChannelError> {
        self.rx.recv().map_err(|_| ChannelError::Disconnected)
    }

    pub fn try_recv(&self) -> Result<T, ChannelError> {
        self.rx.try_recv().map_err(|e| match e {
            mpsc::TryRecvError::Empty => ChannelError::Empty,
            mpsc::TryRecvError::Disconnected => ChannelError::Disconnected,
        })
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, ChannelError> {
        self.rx.recv_timeout(timeout).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => ChannelError::Timeout,
            mpsc::RecvTimeoutError::Disconnected => ChannelError::Disconnected,
        })
    }

    /// Everything queued right now, oldest first.
    pub fn drain(&self) -> Vec<T> {
        self.rx.try_iter().collect()
    }
}

pub enum Producer<T> {
    Latest(LatestProducer<T>),
    Fifo(FifoProducer<T>),
}

pub enum Consumer<T> {
    Latest(LatestConsumer<T>),
    Fifo(FifoConsumer<T>),
}

/// Policy-selected channel. Latest-wins ignores `capacity` beyond checking it.
pub fn channel<T>(policy: Policy, capacity: usize) -> Result<(Producer<T>, Consumer<T>), ChannelError> {
    if capacity == 0 {
        return Err(ChannelError::ZeroCapacity);
    }
    Ok(match policy {
        Policy::LatestWins => {
            let (p, c) = latest_wins();
            (Producer::Latest(p), Consumer::Latest(c))
        }
        Policy::Fifo => {
            let (p, c) = fifo(capacity)?;
            (Producer::Fifo(p), Consumer::Fifo(c))
        }
    })
}

impl<T> Producer<T> {
    pub fn send(&self, value: T) -> Result<(), ChannelError> {
        match self {
            Producer::Latest(p) => p.send(value),
            Producer::Fifo(p) => p.send(value),
        }
    }
}

impl<T> Consumer<T> {
    pub fn recv(&self) -> Result<T, ChannelError> {
        match self {
            Consumer::Latest(c) => c.recv(),
            Consumer::Fifo(c) => c.recv(),
        }
    }

    pub fn try_recv(&self) -> Result<T, ChannelError> {
        match self {
            Consumer::Latest(c) => c.try_recv(),
            Consumer::Fifo(c) => c.try_recv(),
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, ChannelError> {
        match self {
            Consumer::Latest(c) => c.recv_timeout(timeout),
            Consumer::Fifo(c) => c.recv_timeout(timeout),
        }
    }
}
