use proptest::prelude::*;

use iacksim::endpoints::wire::{Actor, FrameKind};
use iacksim::recovery::Space;
use iacksim::netem::{ContentSelector, Direction, LossRule};
use iacksim::simulation::LARGE_CERT_BYTES;
use iacksim::traces::{audit_amplification, audit_delivery, parse_trace, trace_to_string, TraceKind};
use iacksim::{builtin_profiles, simulate, ImplementationProfile, RunConfig, RunStatus, ServerMode};

fn second_flight(r: &iacksim::RunResult) -> Vec<(Space, Vec<FrameKind>)> {
    let done = r
        .trace
        .iter()
        .find(|e| e.actor == Actor::Client && e.kind == TraceKind::HandshakeComplete)
        .expect("client completes")
        .time_us;
    r.trace
        .iter()
        .filter(|e| e.actor == Actor::Client && e.kind == TraceKind::Emit && e.time_us == done)
        .map(|e| (e.space.unwrap(), e.frames.clone().unwrap_or_default()))
        .collect()
}

#[test]
fn second_flight_datagram_layouts() {
    use FrameKind::*;
    use Space::*;
    // highest space per datagram, distinct frame kinds
    let expected: [&[(Space, &[FrameKind])]; 4] = [
        &[(Application, &[Ack, CryptoFinished, Stream])],
        &[(Handshake, &[Ack, CryptoFinished]), (Application, &[Stream])],
        &[(Initial, &[Ack]), (Handshake, &[Ack, CryptoFinished]), (Application, &[Stream])],
        &[
            (Initial, &[Ack]),
            (Handshake, &[Ack, CryptoFinished]),
            (Application, &[Stream]),
            (Application, &[Stream]),
        ],
    ];
    for n in 1..=4u32 {
        let flight: Vec<u32> = (2..2 + n).collect();
        let profile = ImplementationProfile::new("layout", 200, &flight, &[]);
        let r = simulate(&RunConfig::new(9_000, 4_000, ServerMode::Iack, profile)).unwrap();
        let got = second_flight(&r);
        let want: Vec<(Space, Vec<FrameKind>)> =
            expected[n as usize - 1].iter().map(|(s, f)| (*s, f.to_vec())).collect();
        assert_eq!(got, want, "n = {n}");
    }
}

#[test]
fn client_initial_datagrams_padded_only_when_eliciting() {
    let r = simulate(&RunConfig::builtin(9_000, 40_000, ServerMode::Iack, "quic-go")).unwrap();
    for e in r.trace.iter().filter(|e| e.actor == Actor::Client && e.kind == TraceKind::Emit) {
        let frames = e.frames.clone().unwrap_or_default();
        let eliciting_initial = frames.contains(&FrameKind::CryptoClientHello) || frames == [FrameKind::Ping];
        if eliciting_initial {
            assert_eq!(e.size_bytes, Some(1200), "{e:?}");
        }
    }
}

#[test]
fn pad_iack_sends_full_size_ack() {
    let mut c = RunConfig::builtin(9_000, 4_000, ServerMode::Iack, "quic-go");
    c.pad_iack = true;
    let r = simulate(&c).unwrap();
    let iack = r
        .trace
        .iter()
        .find(|e| e.actor == Actor::Server && e.kind == TraceKind::Emit)
        .unwrap();
    assert_eq!(iack.frames.as_deref(), Some(&[FrameKind::Ack][..]));
    assert_eq!(iack.size_bytes, Some(1200));
}

#[test]
fn mvfst_deadlocks_on_large_cert_loss() {
    let mut c = RunConfig::builtin(9_000, 4_000, ServerMode::Iack, "mvfst");
    c.cert_bytes = LARGE_CERT_BYTES;
    c.loss = vec![LossRule::by_content(ContentSelector::RemainingFirstServerFlight)];
    let r = simulate(&c).unwrap();
    assert_eq!(r.status, RunStatus::Timeout);
    assert_eq!(r.ttfb_us, None);
}

#[test]
fn trace_file_round_trip() {
    let r = simulate(&RunConfig::builtin(20_000, 4_000, ServerMode::Iack, "neqo")).unwrap();
    let text = trace_to_string(&r.trace);
    let parsed = parse_trace(text.as_bytes()).unwrap();
    assert_eq!(parsed, r.trace);
    assert_eq!(trace_to_string(&parsed), text);
}

fn profile_strategy() -> impl Strategy<Value = ImplementationProfile> {
    prop::sample::select(builtin_profiles())
}

fn loss_strategy() -> impl Strategy<Value = Vec<LossRule>> {
    prop_oneof![
        Just(vec![]),
        Just(vec![LossRule::by_content(ContentSelector::RemainingFirstServerFlight)]),
        Just(vec![LossRule::by_content(ContentSelector::EntireSecondClientFlight)]),
        (1u32..6).prop_map(|i| vec![LossRule::by_index(Direction::ServerToClient, &[i])]),
        (1u32..4).prop_map(|i| vec![LossRule::by_index(Direction::ClientToServer, &[i])]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariants_hold_for_random_scenarios(
        rtt_ms in 1u64..120,
        dt_ms in 0u64..250,
        large in any::<bool>(),
        iack in any::<bool>(),
        bw in prop_oneof![Just(0u64), Just(10_000_000u64), Just(1_000_000u64)],
        profile in profile_strategy(),
        loss in loss_strategy(),
        pad in any::<bool>(),
        jitter in 0u64..500,
        seed in any::<u64>(),
    ) {
        let mode = if iack { ServerMode::Iack } else { ServerMode::Wfc };
        let mut c = RunConfig::new(rtt_ms * 1000, dt_ms * 1000, mode, profile);
        c.bandwidth_bits_per_s = bw;
        c.cert_bytes = if large { LARGE_CERT_BYTES } else { 1212 };
        c.loss = loss;
        c.pad_iack = pad;
        c.stack_jitter_us = jitter;
        c.seed = seed;
        let r = simulate(&c).unwrap();
        prop_assert!(r.trace.windows(2).all(|w| w[0].time_us <= w[1].time_us));
        prop_assert_eq!(audit_amplification(&r.trace), Ok(()));
        prop_assert_eq!(audit_delivery(&r.trace, true), Ok(()));
        if let Some(t) = r.ttfb_us {
            // at least two round trips: handshake, then request/response
            prop_assert!(t >= 2 * rtt_ms * 1000);
        }
        let again = simulate(&c).unwrap();
        prop_assert_eq!(trace_to_string(&again.trace), trace_to_string(&r.trace));
    }
}
