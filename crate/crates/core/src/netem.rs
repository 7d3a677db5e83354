//! Symmetric point-to-point link: fixed one-way delay, per-direction FIFO
//! serialization at a configured rate, and deterministic datagram drops
//! selected by sender index.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::wire::{Actor, Datagram};
use crate::endpoints::ServerMode;
use crate::profiles::ImplementationProfile;
use crate::sim::SimTime;

/// 10 Mbit/s.
pub const DEFAULT_BANDWIDTH_BPS: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub one_way_delay_us: u64,
    /// Zero disables serialization delay.
    pub bandwidth_bits_per_s: u64,
}

impl LinkConfig {
    pub fn symmetric(rtt_us: u64, bandwidth_bits_per_s: u64) -> Self {
        LinkConfig {
            one_way_delay_us: rtt_us / 2,
            bandwidth_bits_per_s,
        }
    }

    pub fn serialization_us(&self, size: u64) -> u64 {
        serialization_us(size, self.bandwidth_bits_per_s)
    }
}

/// `ceil(size · 8 · 10⁶ / bandwidth)` microseconds.
pub fn serialization_us(size_bytes: u64, bandwidth_bits_per_s: u64) -> u64 {
    if bandwidth_bits_per_s == 0 {
        return 0;
    }
    (size_bytes * 8 * 1_000_000).div_ceil(bandwidth_bits_per_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn from_sender(sender: Actor) -> Direction {
        match sender {
            Actor::Server => Direction::ServerToClient,
            _ => Direction::ClientToServer,
        }
    }

    fn slot(self) -> usize {
        match self {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossConfigError {
    #[error("unknown content selector `{0}`")]
    UnknownSelector(String),
    #[error("selector `{selector}` applies to {expected:?}, not {got:?}")]
    WrongDirection {
        selector: ContentSelector,
        expected: Direction,
        got: Direction,
    },
    #[error("datagram indices are 1-based; got 0")]
    ZeroIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSelector {
    /// Every first-flight server datagram after the first one.
    RemainingFirstServerFlight,
    /// All datagrams carrying the client's Finished and request.
    EntireSecondClientFlight,
}

impl ContentSelector {
    pub fn name(self) -> &'static str {
        match self {
            ContentSelector::RemainingFirstServerFlight => "remaining_first_server_flight",
            ContentSelector::EntireSecondClientFlight => "entire_second_client_flight",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            ContentSelector::RemainingFirstServerFlight => Direction::ServerToClient,
            ContentSelector::EntireSecondClientFlight => Direction::ClientToServer,
        }
    }
}

impl fmt::Display for ContentSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContentSelector {
    type Err = LossConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ContentSelector::RemainingFirstServerFlight,
            ContentSelector::EntireSecondClientFlight,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| LossConfigError::UnknownSelector(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    ByIndex(BTreeSet<u32>),
    ByContent(ContentSelector),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossRule {
    pub direction: Direction,
    pub selector: Selector,
    /// Maximum number of drops; defaults to the size of the resolved index set.
    pub max_applications: Option<u32>,
}

impl LossRule {
    pub fn by_index(direction: Direction, indices: &[u32]) -> Self {
        LossRule {
            direction,
            selector: Selector::ByIndex(indices.iter().copied().collect()),
            max_applications: None,
        }
    }

    pub fn by_content(selector: ContentSelector) -> Self {
        LossRule {
            direction: selector.direction(),
            selector: Selector::ByContent(selector),
            max_applications: None,
        }
    }

    pub fn resolve(
        &self,
        profile: &ImplementationProfile,
        mode: ServerMode,
    ) -> Result<ResolvedLossRule, LossConfigError> {
        let indices = match &self.selector {
            Selector::ByIndex(set) => {
                if set.contains(&0) {
                    return Err(LossConfigError::ZeroIndex);
                }
                set.clone()
            }
            Selector::ByContent(content) => {
                if content.direction() != self.direction {
                    return Err(LossConfigError::WrongDirection {
                        selector: *content,
                        expected: content.direction(),
                        got: self.direction,
                    });
                }
                resolve_content_selector(*content, profile, mode)
            }
        };
        let remaining = self.max_applications.unwrap_or(indices.len() as u32);
        Ok(ResolvedLossRule {
            direction: self.direction,
            indices,
            remaining,
        })
    }
}

/// Maps a content designator to sender datagram indices.
pub fn resolve_content_selector(
    selector: ContentSelector,
    profile: &ImplementationProfile,
    mode: ServerMode,
) -> BTreeSet<u32> {
    match selector {
        ContentSelector::EntireSecondClientFlight => {
            profile.second_flight_datagrams.iter().copied().collect()
        }
        ContentSelector::RemainingFirstServerFlight => match mode {
            ServerMode::Iack => [2, 3].into_iter().collect(),
            ServerMode::Wfc => [2].into_iter().collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLossRule {
    pub direction: Direction,
    pub indices: BTreeSet<u32>,
    pub remaining: u32,
}

impl ResolvedLossRule {
    fn matches(&self, direction: Direction, index: u32) -> bool {
        self.remaining > 0 && self.direction == direction && self.indices.contains(&index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmitOutcome {
    Delivered { at: SimTime },
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Link {
    config: LinkConfig,
    free_at: [SimTime; 2],
    rules: Vec<ResolvedLossRule>,
}

impl Link {
    pub fn new(config: LinkConfig, rules: Vec<ResolvedLossRule>) -> Self {
        Link {
            config,
            free_at: [SimTime::ZERO; 2],
            rules,
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    /// Applies loss rules in order, then queues the datagram behind earlier
    /// transmissions in the same direction.
    pub fn transmit(&mut self, datagram: &Datagram, emit_time: SimTime) -> TransmitOutcome {
        let direction = Direction::from_sender(datagram.sender);
        if let Some(rule) = self
            .rules
            .iter_mut()
            .find(|r| r.matches(direction, datagram.index))
        {
            rule.remaining -= 1;
            return TransmitOutcome::Dropped;
        }
        let slot = direction.slot();
        let start = emit_time.max(self.free_at[slot]);
        let done = start + self.config.serialization_us(datagram.size());
        self.free_at[slot] = done;
        TransmitOutcome::Delivered {
            at: done + self.config.one_way_delay_us,
        }
    }

    /// Time at which the given direction finishes its current backlog.
    pub fn free_at(&self, direction: Direction) -> SimTime {
        self.free_at[direction.slot()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoints::wire::{Frame, Packet};
    use crate::profiles::lookup;
    use crate::recovery::Space;

    fn dg(sender: Actor, index: u32, size: u64) -> Datagram {
        let mut p = Packet::new(Space::Initial, index as u64, vec![Frame::Ping]);
        p.pad_to(size);
        let mut d = Datagram::new(sender, vec![p]);
        d.index = index;
        d
    }

    #[test]
    fn serialization_rounds_up() {
        assert_eq!(serialization_us(1200, 10_000_000), 960);
        assert_eq!(serialization_us(1252, 10_000_000), 1002);
        assert_eq!(serialization_us(1, 10_000_000), 1);
        assert_eq!(serialization_us(1200, 0), 0);
    }

    #[test]
    fn delivery_time_includes_serialization_and_delay() {
        let mut link = Link::new(LinkConfig::symmetric(9_000, DEFAULT_BANDWIDTH_BPS), vec![]);
        let out = link.transmit(&dg(Actor::Client, 1, 1200), SimTime(0));
        assert_eq!(out, TransmitOutcome::Delivered { at: SimTime(960 + 4_500) });
    }

    #[test]
    fn back_to_back_datagrams_queue() {
        let mut link = Link::new(LinkConfig::symmetric(9_000, DEFAULT_BANDWIDTH_BPS), vec![]);
        link.transmit(&dg(Actor::Server, 1, 1252), SimTime(0));
        let second = link.transmit(&dg(Actor::Server, 2, 1200), SimTime(0));
        assert_eq!(second, TransmitOutcome::Delivered { at: SimTime(1002 + 960 + 4_500) });
        // the other direction is unaffected
        let rev = link.transmit(&dg(Actor::Client, 1, 1200), SimTime(0));
        assert_eq!(rev, TransmitOutcome::Delivered { at: SimTime(960 + 4_500) });
    }

    #[test]
    fn index_rule_drops_only_listed_datagrams() {
        let profile = lookup("quic-go").unwrap();
        let rule = LossRule::by_index(Direction::ServerToClient, &[2, 3])
            .resolve(&profile, ServerMode::Iack)
            .unwrap();
        let mut link = Link::new(LinkConfig::symmetric(9_000, 0), vec![rule]);
        let outcomes: Vec<_> = (1..=4)
            .map(|i| link.transmit(&dg(Actor::Server, i, 100), SimTime(0)))
            .collect();
        assert!(matches!(outcomes[0], TransmitOutcome::Delivered { .. }));
        assert_eq!(outcomes[1], TransmitOutcome::Dropped);
        assert_eq!(outcomes[2], TransmitOutcome::Dropped);
        assert!(matches!(outcomes[3], TransmitOutcome::Delivered { .. }));
        // client datagram 2 is not affected by a server-direction rule
        assert!(matches!(
            link.transmit(&dg(Actor::Client, 2, 100), SimTime(0)),
            TransmitOutcome::Delivered { .. }
        ));
    }

    #[test]
    fn max_applications_limits_drops() {
        let profile = lookup("quic-go").unwrap();
        let mut rule = LossRule::by_index(Direction::ClientToServer, &[1, 2, 3]);
        rule.max_applications = Some(1);
        let rule = rule.resolve(&profile, ServerMode::Wfc).unwrap();
        let mut link = Link::new(LinkConfig::symmetric(1_000, 0), vec![rule]);
        assert_eq!(link.transmit(&dg(Actor::Client, 1, 100), SimTime(0)), TransmitOutcome::Dropped);
        assert!(matches!(
            link.transmit(&dg(Actor::Client, 2, 100), SimTime(0)),
            TransmitOutcome::Delivered { .. }
        ));
    }

    #[test]
    fn content_selectors() {
        let neqo = lookup("neqo").unwrap();
        let rule = LossRule::by_content(ContentSelector::EntireSecondClientFlight)
            .resolve(&neqo, ServerMode::Iack)
            .unwrap();
        assert_eq!(rule.indices, [2, 3].into_iter().collect());

        let pico = lookup("picoquic").unwrap();
        let quiche = lookup("quiche").unwrap();
        let sel = ContentSelector::EntireSecondClientFlight;
        assert_eq!(resolve_content_selector(sel, &pico, ServerMode::Wfc), [2, 3, 4, 5].into_iter().collect());
        assert_eq!(resolve_content_selector(sel, &quiche, ServerMode::Wfc), [2].into_iter().collect());
        let sel = ContentSelector::RemainingFirstServerFlight;
        assert_eq!(resolve_content_selector(sel, &quiche, ServerMode::Wfc), [2].into_iter().collect());
        assert_eq!(resolve_content_selector(sel, &quiche, ServerMode::Iack), [2, 3].into_iter().collect());
    }

    #[test]
    fn selector_errors() {
        assert_eq!(
            "first_flight".parse::<ContentSelector>(),
            Err(LossConfigError::UnknownSelector("first_flight".into()))
        );
        let profile = lookup("neqo").unwrap();
        let rule = LossRule {
            direction: Direction::ClientToServer,
            selector: Selector::ByContent(ContentSelector::RemainingFirstServerFlight),
            max_applications: None,
        };
        assert!(matches!(
            rule.resolve(&profile, ServerMode::Iack),
            Err(LossConfigError::WrongDirection { .. })
        ));
        assert_eq!(
            LossRule::by_index(Direction::ClientToServer, &[0]).resolve(&profile, ServerMode::Iack),
            Err(LossConfigError::ZeroIndex)
        );
    }
}
