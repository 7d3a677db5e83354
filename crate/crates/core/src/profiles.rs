//! Client implementation profiles: default PTO, how the second client flight
//! is split into datagrams, and known behavioral quirks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recovery::Space;

/// Default smoothed RTT used by [`Quirk::ErroneousPtoInit`].
pub const DEFAULT_ERRONEOUS_SMOOTHED_US: u64 = 90_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quirk {
    /// RTT samples from Initial-space ACKs are thrown away.
    IgnoreIackRttSample,
    /// An ACK-only reply that empties the in-flight set does not arm a probe timer.
    NoProbeOnIack,
    /// A coalesced datagram acknowledging an outstanding PING is dropped whole (once).
    DropCoalescedPingReply,
    /// Initial-space probes resend the ClientHello instead of a PING.
    RetransmitClienthelloOnPto,
    /// The first sample seeds smoothed RTT with a fixed bogus value.
    ErroneousPtoInit,
}

impl Quirk {
    pub const ALL: [Quirk; 5] = [
        Quirk::IgnoreIackRttSample,
        Quirk::NoProbeOnIack,
        Quirk::DropCoalescedPingReply,
        Quirk::RetransmitClienthelloOnPto,
        Quirk::ErroneousPtoInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quirk::IgnoreIackRttSample => "ignore_iack_rtt_sample",
            Quirk::NoProbeOnIack => "no_probe_on_iack",
            Quirk::DropCoalescedPingReply => "drop_coalesced_ping_reply",
            Quirk::RetransmitClienthelloOnPto => "retransmit_clienthello_on_pto",
            Quirk::ErroneousPtoInit => "erroneous_pto_init",
        }
    }
}

impl fmt::Display for Quirk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("unknown quirk `{0}`")]
    UnknownQuirk(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("duplicate profile name `{0}`")]
    DuplicateName(String),
    #[error("profile `{0}`: default_pto_us must be positive")]
    ZeroPto(String),
    #[error("profile `{0}`: second_flight_datagrams must be 1 to 4 consecutive indices starting at 2")]
    BadSecondFlight(String),
}

impl FromStr for Quirk {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Quirk::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| ProfileError::UnknownQuirk(s.to_string()))
    }
}

fn default_probe_count() -> u8 {
    1
}

fn default_erroneous_smoothed() -> u64 {
    DEFAULT_ERRONEOUS_SMOOTHED_US
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplementationProfile {
    pub name: String,
    pub default_pto_us: u64,
    pub second_flight_datagrams: Vec<u32>,
    #[serde(default = "default_probe_count")]
    pub probe_count: u8,
    #[serde(default)]
    pub quirks: BTreeSet<Quirk>,
    #[serde(default = "default_erroneous_smoothed")]
    pub erroneous_smoothed_us: u64,
}

impl ImplementationProfile {
    pub fn new(name: &str, default_pto_ms: u64, second_flight: &[u32], quirks: &[Quirk]) -> Self {
        ImplementationProfile {
            name: name.to_string(),
            default_pto_us: default_pto_ms * 1000,
            second_flight_datagrams: second_flight.to_vec(),
            probe_count: 1,
            quirks: quirks.iter().copied().collect(),
            erroneous_smoothed_us: DEFAULT_ERRONEOUS_SMOOTHED_US,
        }
    }

    pub fn has(&self, quirk: Quirk) -> bool {
        self.quirks.contains(&quirk)
    }

    /// Number of datagrams the second client flight is split into.
    pub fn second_flight_len(&self) -> usize {
        self.second_flight_datagrams.len()
    }

    pub fn without_quirks(&self) -> Self {
        ImplementationProfile {
            quirks: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.default_pto_us == 0 {
            return Err(ProfileError::ZeroPto(self.name.clone()));
        }
        let n = self.second_flight_datagrams.len();
        let expected: Vec<u32> = (2..2 + n as u32).collect();
        if n == 0 || n > 4 || self.second_flight_datagrams != expected {
            return Err(ProfileError::BadSecondFlight(self.name.clone()));
        }
        Ok(())
    }
}

/// The eight client profiles measured against the IACK-capable server.
pub fn builtin_profiles() -> Vec<ImplementationProfile> {
    use Quirk::*;
    vec![
        ImplementationProfile::new("aioquic", 200, &[2, 3, 4], &[]),
        ImplementationProfile::new("go-x-net", 999, &[2, 3, 4], &[ErroneousPtoInit]),
        ImplementationProfile::new("mvfst", 100, &[2, 3, 4], &[NoProbeOnIack]),
        ImplementationProfile::new("neqo", 300, &[2, 3], &[]),
        ImplementationProfile::new("ngtcp2", 300, &[2, 3, 4], &[]),
        ImplementationProfile::new(
            "picoquic",
            250,
            &[2, 3, 4, 5],
            &[IgnoreIackRttSample, NoProbeOnIack],
        ),
        ImplementationProfile::new("quic-go", 200, &[2, 3, 4], &[]),
        ImplementationProfile::new("quiche", 999, &[2], &[DropCoalescedPingReply]),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRegistry {
    profiles: Vec<ImplementationProfile>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        ProfileRegistry {
            profiles: builtin_profiles(),
        }
    }
}

impl ProfileRegistry {
    pub fn builtin() -> Self {
        Self::default()
    }

    pub fn profiles(&self) -> &[ImplementationProfile] {
        &self.profiles
    }

    pub fn lookup(&self, name: &str) -> Result<&ImplementationProfile, ProfileError> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ProfileError::UnknownProfile(name.to_string()))
    }

    /// Adds a custom profile; names must stay unique.
    pub fn register(&mut self, profile: ImplementationProfile) -> Result<(), ProfileError> {
        profile.validate()?;
        if self.profiles.iter().any(|p| p.name == profile.name) {
            return Err(ProfileError::DuplicateName(profile.name));
        }
        self.profiles.push(profile);
        Ok(())
    }
}

/// Shorthand for `ProfileRegistry::builtin().lookup(name)`.
pub fn lookup(name: &str) -> Result<ImplementationProfile, ProfileError> {
    ProfileRegistry::builtin().lookup(name).cloned()
}

/// Client-side decision points where a quirk may change behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuirkEvent {
    /// An ACK produced an RTT sample in `space`.
    RttSample { space: Space, first: bool },
    /// An ACK-only datagram left nothing in flight; the endpoint is about to
    /// arm the anti-deadlock probe timer.
    ProbeAfterAckOnly,
    /// A datagram arrived. `acks_outstanding_ping` is true if one of its ACK
    /// frames covers a PING probe the client is still waiting on.
    Reception { packets: usize, acks_outstanding_ping: bool },
    /// The probe timer fired in `space` with nothing left to retransmit.
    PingProbe { space: Space },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorOverride {
    PassThrough,
    DiscardSample,
    SuppressProbe,
    DropDatagram,
    RetransmitClientHello,
    MisinitializeSmoothed(u64),
}

pub fn apply_quirk(profile: &ImplementationProfile, event: QuirkEvent) -> BehaviorOverride {
    match event {
        QuirkEvent::RttSample { space, first } => {
            if space == Space::Initial && profile.has(Quirk::IgnoreIackRttSample) {
                BehaviorOverride::DiscardSample
            } else if first && profile.has(Quirk::ErroneousPtoInit) {
                BehaviorOverride::MisinitializeSmoothed(profile.erroneous_smoothed_us)
            } else {
                BehaviorOverride::PassThrough
            }
        }
        QuirkEvent::ProbeAfterAckOnly if profile.has(Quirk::NoProbeOnIack) => {
            BehaviorOverride::SuppressProbe
        }
        QuirkEvent::Reception {
            packets,
            acks_outstanding_ping,
        } if packets > 1 && acks_outstanding_ping && profile.has(Quirk::DropCoalescedPingReply) => {
            BehaviorOverride::DropDatagram
        }
        QuirkEvent::PingProbe {
            space: Space::Initial,
        } if profile.has(Quirk::RetransmitClienthelloOnPto) => BehaviorOverride::RetransmitClientHello,
        _ => BehaviorOverride::PassThrough,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_values() {
        let reg = ProfileRegistry::builtin();
        assert_eq!(reg.profiles().len(), 8);
        assert_eq!(reg.lookup("mvfst").unwrap().default_pto_us, 100_000);
        assert!(reg
            .lookup("picoquic")
            .unwrap()
            .has(Quirk::IgnoreIackRttSample));
        assert_eq!(reg.lookup("quiche").unwrap().second_flight_datagrams, vec![2]);
        assert_eq!(reg.lookup("picoquic").unwrap().second_flight_datagrams, vec![2, 3, 4, 5]);
        assert_eq!(reg.lookup("neqo").unwrap().second_flight_datagrams, vec![2, 3]);
        assert_eq!(reg.lookup("go-x-net").unwrap().default_pto_us, 999_000);
        for p in reg.profiles() {
            p.validate().unwrap();
            assert_eq!(p.probe_count, 1);
        }
    }

    #[test]
    fn unknown_names() {
        assert!(matches!(lookup("msquic"), Err(ProfileError::UnknownProfile(_))));
        assert_eq!(
            "no_such_quirk".parse::<Quirk>(),
            Err(ProfileError::UnknownQuirk("no_such_quirk".into()))
        );
        assert_eq!("no_probe_on_iack".parse::<Quirk>(), Ok(Quirk::NoProbeOnIack));
    }

    #[test]
    fn unknown_quirk_in_serialized_profile_is_rejected() {
        let text = r#"{"name":"x","default_pto_us":1,"second_flight_datagrams":[2],"quirks":["bogus"]}"#;
        assert!(serde_json::from_str::<ImplementationProfile>(text).is_err());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut reg = ProfileRegistry::builtin();
        let dup = ImplementationProfile::new("neqo", 10, &[2], &[]);
        assert_eq!(reg.register(dup), Err(ProfileError::DuplicateName("neqo".into())));
        let bad = ImplementationProfile::new("custom", 10, &[3, 4], &[]);
        assert!(matches!(reg.register(bad), Err(ProfileError::BadSecondFlight(_))));
        reg.register(ImplementationProfile::new("custom", 10, &[2, 3], &[])).unwrap();
        assert_eq!(reg.lookup("custom").unwrap().default_pto_us, 10_000);
    }

    #[test]
    fn registry_round_trip() {
        let reg = ProfileRegistry::builtin();
        let json = serde_json::to_string(&reg).unwrap();
        let back: ProfileRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(reg, back);
        let toml_text = toml::to_string(&reg).unwrap();
        let back: ProfileRegistry = toml::from_str(&toml_text).unwrap();
        assert_eq!(reg, back);
    }

    #[test]
    fn quirk_overrides() {
        let pico = lookup("picoquic").unwrap();
        assert_eq!(
            apply_quirk(&pico, QuirkEvent::RttSample { space: Space::Initial, first: true }),
            BehaviorOverride::DiscardSample
        );
        assert_eq!(
            apply_quirk(&pico, QuirkEvent::RttSample { space: Space::Handshake, first: true }),
            BehaviorOverride::PassThrough
        );
        let quiche = lookup("quiche").unwrap();
        assert_eq!(
            apply_quirk(&quiche, QuirkEvent::Reception { packets: 2, acks_outstanding_ping: true }),
            BehaviorOverride::DropDatagram
        );
        assert_eq!(
            apply_quirk(&quiche, QuirkEvent::Reception { packets: 1, acks_outstanding_ping: true }),
            BehaviorOverride::PassThrough
        );
        let gox = lookup("go-x-net").unwrap();
        assert_eq!(
            apply_quirk(&gox, QuirkEvent::RttSample { space: Space::Initial, first: true }),
            BehaviorOverride::MisinitializeSmoothed(90_000)
        );
        let mvfst = lookup("mvfst").unwrap();
        assert_eq!(apply_quirk(&mvfst, QuirkEvent::ProbeAfterAckOnly), BehaviorOverride::SuppressProbe);
    }

    #[test]
    fn quirk_free_profiles_pass_through() {
        let events = [
            QuirkEvent::RttSample { space: Space::Initial, first: true },
            QuirkEvent::ProbeAfterAckOnly,
            QuirkEvent::Reception { packets: 3, acks_outstanding_ping: true },
            QuirkEvent::PingProbe { space: Space::Initial },
        ];
        for name in ["quic-go", "aioquic", "neqo", "ngtcp2"] {
            let p = lookup(name).unwrap();
            for e in events {
                assert_eq!(apply_quirk(&p, e), BehaviorOverride::PassThrough, "{name} {e:?}");
            }
        }
        for p in builtin_profiles() {
            let bare = p.without_quirks();
            for e in events {
                assert_eq!(apply_quirk(&bare, e), BehaviorOverride::PassThrough);
            }
        }
    }

    #[test]
    fn clienthello_retransmit_flag() {
        let p = ImplementationProfile::new("tuned", 200, &[2, 3, 4], &[Quirk::RetransmitClienthelloOnPto]);
        assert_eq!(
            apply_quirk(&p, QuirkEvent::PingProbe { space: Space::Initial }),
            BehaviorOverride::RetransmitClientHello
        );
        assert_eq!(
            apply_quirk(&p, QuirkEvent::PingProbe { space: Space::Handshake }),
            BehaviorOverride::PassThrough
        );
    }
}
