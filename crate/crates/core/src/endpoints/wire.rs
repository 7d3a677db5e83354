//! Simulated wire units. Sizes are byte counts on the wire; no bytes are
//! actually encoded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::recovery::Space;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Client,
    Server,
    Link,
}

impl Actor {
    pub fn peer(self) -> Actor {
        match self {
            Actor::Client => Actor::Server,
            Actor::Server => Actor::Client,
            Actor::Link => Actor::Link,
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Actor::Client => "client",
            Actor::Server => "server",
            Actor::Link => "link",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CryptoRole {
    ClientHello,
    ServerHello,
    CertChain,
    Finished,
}

/// Inclusive packet-number ranges, ascending and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    ranges: Vec<(u64, u64)>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pn: u64) -> bool {
        if self.contains(pn) {
            return false;
        }
        let pos = self.ranges.partition_point(|&(_, hi)| hi + 1 < pn);
        if pos < self.ranges.len() && self.ranges[pos].0 <= pn + 1 {
            let r = &mut self.ranges[pos];
            r.0 = r.0.min(pn);
            r.1 = r.1.max(pn);
            if pos + 1 < self.ranges.len() && self.ranges[pos + 1].0 <= self.ranges[pos].1 + 1 {
                let next = self.ranges.remove(pos + 1);
                self.ranges[pos].1 = next.1;
            }
        } else {
            self.ranges.insert(pos, (pn, pn));
        }
        true
    }

    pub fn contains(&self, pn: u64) -> bool {
        let pos = self.ranges.partition_point(|&(_, hi)| hi < pn);
        pos < self.ranges.len() && self.ranges[pos].0 <= pn
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn largest(&self) -> Option<u64> {
        self.ranges.last().map(|r| r.1)
    }

    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.ranges
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.ranges.iter().flat_map(|&(lo, hi)| lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Ack {
        ack_delay_us: u64,
        acked: RangeSet,
    },
    Crypto {
        role: CryptoRole,
        offset: u64,
        length: u64,
    },
    Ping,
    Stream {
        stream_id: u64,
        offset: u64,
        length: u64,
        fin: bool,
    },
    Padding {
        length: u64,
    },
}

impl Frame {
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(self, Frame::Ack { .. } | Frame::Padding { .. })
    }

    /// Approximate encoded length.
    pub fn wire_len(&self) -> u64 {
        match self {
            Frame::Ack { .. } => ACK_FRAME_BYTES,
            Frame::Crypto { length, .. } => CRYPTO_FRAME_HEADER + length,
            Frame::Ping => 1,
            Frame::Stream { length, .. } => STREAM_FRAME_HEADER + length,
            Frame::Padding { length } => *length,
        }
    }

    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Ack { .. } => FrameKind::Ack,
            Frame::Crypto { role, .. } => match role {
                CryptoRole::ClientHello => FrameKind::CryptoClientHello,
                CryptoRole::ServerHello => FrameKind::CryptoServerHello,
                CryptoRole::CertChain => FrameKind::CryptoCertChain,
                CryptoRole::Finished => FrameKind::CryptoFinished,
            },
            Frame::Ping => FrameKind::Ping,
            Frame::Stream { .. } => FrameKind::Stream,
            Frame::Padding { .. } => FrameKind::Padding,
        }
    }
}

/// Frame type tag as written to traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Ack,
    CryptoClientHello,
    CryptoServerHello,
    CryptoCertChain,
    CryptoFinished,
    Ping,
    Stream,
    Padding,
}

pub const ACK_FRAME_BYTES: u64 = 10;
pub const CRYPTO_FRAME_HEADER: u64 = 4;
pub const STREAM_FRAME_HEADER: u64 = 8;

pub fn header_overhead(space: Space) -> u64 {
    match space {
        Space::Initial => 50,
        Space::Handshake => 40,
        Space::Application => 25,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub space: Space,
    pub number: u64,
    pub frames: Vec<Frame>,
    pub size: u64,
}

impl Packet {
    /// Builds a packet whose size is the header overhead plus its frames.
    pub fn new(space: Space, number: u64, frames: Vec<Frame>) -> Self {
        let size = header_overhead(space) + frames.iter().map(Frame::wire_len).sum::<u64>();
        Packet {
            space,
            number,
            frames,
            size,
        }
    }

    pub fn is_ack_eliciting(&self) -> bool {
        self.frames.iter().any(Frame::is_ack_eliciting)
    }

    pub fn ack(&self) -> Option<(&RangeSet, u64)> {
        self.frames.iter().find_map(|f| match f {
            Frame::Ack {
                acked,
                ack_delay_us,
            } => Some((acked, *ack_delay_us)),
            _ => None,
        })
    }

    /// Grows the packet to `target` bytes with a PADDING frame.
    pub fn pad_to(&mut self, target: u64) {
        if self.size < target {
            let extra = target - self.size;
            self.frames.push(Frame::Padding { length: extra });
            self.size = target;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    /// 1-based emission ordinal per sender. Zero until emitted.
    pub index: u32,
    pub sender: Actor,
    pub packets: Vec<Packet>,
}

impl Datagram {
    pub fn new(sender: Actor, packets: Vec<Packet>) -> Self {
        Datagram {
            index: 0,
            sender,
            packets,
        }
    }

    pub fn size(&self) -> u64 {
        self.packets.iter().map(|p| p.size).sum()
    }

    pub fn is_ack_eliciting(&self) -> bool {
        self.packets.iter().any(Packet::is_ack_eliciting)
    }

    pub fn has_space(&self, space: Space) -> bool {
        self.packets.iter().any(|p| p.space == space)
    }

    /// Pads the last packet so the datagram reaches `target` bytes.
    pub fn pad_to(&mut self, target: u64) {
        let size = self.size();
        if size < target {
            if let Some(last) = self.packets.last_mut() {
                let goal = last.size + (target - size);
                last.pad_to(goal);
            }
        }
    }

    /// Distinct frame kinds in packet order, PADDING omitted.
    pub fn frame_kinds(&self) -> Vec<FrameKind> {
        let mut kinds = Vec::new();
        for frame in self.packets.iter().flat_map(|p| &p.frames) {
            let k = frame.kind();
            if k != FrameKind::Padding && !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        kinds
    }

    pub fn contains_kind(&self, kind: FrameKind) -> bool {
        self.packets
            .iter()
            .flat_map(|p| &p.frames)
            .any(|f| f.kind() == kind)
    }

    /// ack_delay of the first ACK frame, if any.
    pub fn first_ack_delay(&self) -> Option<u64> {
        self.packets.iter().find_map(|p| p.ack().map(|(_, d)| d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ack_eliciting_rule() {
        let ack = Packet::new(
            Space::Initial,
            0,
            vec![Frame::Ack {
                ack_delay_us: 0,
                acked: RangeSet::new(),
            }],
        );
        assert!(!ack.is_ack_eliciting());
        let mut padded = ack.clone();
        padded.pad_to(1200);
        assert!(!padded.is_ack_eliciting());
        assert_eq!(padded.size, 1200);
        let ping = Packet::new(Space::Initial, 1, vec![Frame::Ping]);
        assert!(ping.is_ack_eliciting());
    }

    #[test]
    fn packet_size_covers_frames_and_header() {
        let p = Packet::new(
            Space::Handshake,
            3,
            vec![Frame::Crypto {
                role: CryptoRole::CertChain,
                offset: 0,
                length: 1000,
            }],
        );
        assert_eq!(p.size, 40 + 4 + 1000);
    }

    #[test]
    fn frame_kinds_skip_padding() {
        let mut p = Packet::new(
            Space::Initial,
            0,
            vec![Frame::Crypto {
                role: CryptoRole::ClientHello,
                offset: 0,
                length: 280,
            }],
        );
        p.pad_to(1200);
        let dg = Datagram::new(Actor::Client, vec![p]);
        assert_eq!(dg.frame_kinds(), vec![FrameKind::CryptoClientHello]);
        assert_eq!(dg.size(), 1200);
    }

    proptest! {
        #[test]
        fn range_set_matches_btreeset(pns in proptest::collection::vec(0u64..200, 0..120)) {
            let mut rs = RangeSet::new();
            let mut reference = std::collections::BTreeSet::new();
            for pn in &pns {
                prop_assert_eq!(rs.insert(*pn), reference.insert(*pn));
            }
            prop_assert_eq!(rs.iter().collect::<Vec<_>>(), reference.iter().copied().collect::<Vec<_>>());
            for w in rs.ranges().windows(2) {
                prop_assert!(w[0].1 + 1 < w[1].0);
            }
            for pn in 0..200 {
                prop_assert_eq!(rs.contains(pn), reference.contains(&pn));
            }
        }
    }
}
