//! Binary wire protocol and the channel contract between pipeline stages.

pub mod channel;
pub mod codec;

pub use channel::{channel, fifo, latest_wins, ChannelError, Consumer, Policy, Producer};
pub use codec::{
    decode, decode_prefix, encode, read_frame, ControlCode, Frame, FrameReader, Message, WireError, WireFlowEntry,
};

use std::time::{SystemTime, UNIX_EPOCH};

/// Wall-clock nanoseconds since the Unix epoch, the timestamp base shared by
/// every process on a link.
pub fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}
