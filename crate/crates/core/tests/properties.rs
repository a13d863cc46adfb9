// Licensed under the Apache-2.0 license

use std::collections::BTreeSet;

use proptest::prelude::*;
use wisecr::crypto::{
    mac_compute, mac_verify, skp_decrypt, skp_encrypt, wrap_key, MacTag, RandomSource,
    SymmetricKey,
};
use wisecr::power::{
    pam_get, received_power, step, time_to_brownout, ChannelState, HarvesterParams,
    HarvesterState, LoadMode, PamParams,
};
use wisecr::scenario::{build_world, csv_string, run_once, RunRow, Scenario};
use wisecr::server::{
    elect_pilot, prelude, security_association, throughput_bps, AssociationPolicy, Candidate,
    DbEntry, FirmwareImage, PilotStrategy, TokenDb,
};
use wisecr::sim::{InventoryObs, Sender, SimTime};
use wisecr::token::{mac_message, Token, TokenConfig};
use wisecr::wire::{
    chunk_firmware, crc16, decode, encode, AttestMode, CommandKind, Frame, Handle, Segment,
    TokenId,
};

fn block() -> impl Strategy<Value = [u8; 16]> {
    any::<[u8; 16]>()
}

fn kind() -> impl Strategy<Value = CommandKind> {
    prop_oneof![
        Just(CommandKind::Inventory),
        (any::<[u8; 12]>(), any::<u32>(), any::<u16>()).prop_map(|(id, ver, vt_mv)| {
            CommandKind::InventoryReply {
                id: TokenId(id),
                ver,
                vt_mv,
            }
        }),
        Just(CommandKind::EnterWisecr),
        (
            block(),
            block(),
            any::<u32>(),
            any::<u16>(),
            prop::option::of(0u16..u16::MAX),
            block(),
            any::<bool>()
        )
            .prop_map(|(wrapped_sk, s, nver, t_lpm_ms, t_active_ms, iv, pilot)| {
                CommandKind::Authenticate {
                    wrapped_sk,
                    s: MacTag(s),
                    nver,
                    t_lpm_ms,
                    t_active_ms,
                    iv,
                    pilot,
                }
            }),
        (any::<u16>(), prop::collection::vec(any::<u8>(), 1..=64))
            .prop_map(|(index, data)| CommandKind::SecureComm { index, data }),
        Just(CommandKind::Eob),
        (block(), block(), any::<bool>(), any::<u16>(), any::<u16>()).prop_map(
            |(wrapped_sk, challenge, fast, offset, len)| CommandKind::AttestRequest {
                wrapped_sk,
                challenge,
                mode: if fast {
                    AttestMode::Fast
                } else {
                    AttestMode::Elaborate
                },
                segment: Segment { offset, len },
            }
        ),
        block().prop_map(|r| CommandKind::AttestReply { r: MacTag(r) }),
        any::<bool>().prop_map(|crc_error| CommandKind::Ack { crc_error }),
    ]
}

fn frame() -> impl Strategy<Value = Frame> {
    (kind(), prop::option::of(any::<u16>().prop_map(Handle))).prop_map(|(k, h)| Frame::new(k, h))
}

proptest! {
    #[test]
    fn codec_roundtrip(f in frame()) {
        let bytes = encode(&f).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn empty_chunks_are_rejected_both_ways(index in any::<u16>()) {
        let f = Frame::broadcast(CommandKind::SecureComm { index, data: Vec::new() });
        prop_assert!(encode(&f).is_err());
        let mut bytes = encode(&Frame::broadcast(CommandKind::SecureComm { index, data: vec![0] })).unwrap();
        // Drop the data byte and re-seal: decode must still refuse it.
        bytes.truncate(bytes.len() - 3);
        bytes[1] -= 1;
        let crc = crc16(&bytes);
        bytes.extend_from_slice(&crc.to_be_bytes());
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn crc_detects_every_single_bit_flip(data in prop::collection::vec(any::<u8>(), 1..=64)) {
        let base = crc16(&data);
        for bit in 0..data.len() * 8 {
            let mut d = data.clone();
            d[bit / 8] ^= 1 << (bit % 8);
            prop_assert_ne!(crc16(&d), base, "bit {}", bit);
        }
    }

    #[test]
    fn chunks_reassemble_exactly(
        ct in prop::collection::vec(any::<u8>(), 16..=2048),
        payload in 1usize..=64,
    ) {
        let plan = chunk_firmware(&ct, payload).unwrap();
        prop_assert_eq!(plan.reassemble(), ct.clone());
        prop_assert_eq!(plan.len(), ct.len().div_ceil(payload));
        for (i, c) in plan.packets.iter().enumerate() {
            prop_assert_eq!(usize::from(c.index), i);
        }
    }

    #[test]
    fn skp_roundtrip(k in block(), iv in block(), pt in prop::collection::vec(any::<u8>(), 0..600)) {
        let k = SymmetricKey::from_bytes(k);
        let ct = skp_encrypt(&k, &iv, &pt);
        prop_assert!(ct.len().is_multiple_of(16) && ct.len() > pt.len());
        prop_assert_eq!(skp_decrypt(&k, &ct).unwrap(), pt);
    }

    #[test]
    fn mac_verify_is_tag_equality(k in block(), m in prop::collection::vec(any::<u8>(), 0..200), t in block()) {
        let k = SymmetricKey::from_bytes(k);
        let good = mac_compute(&k, &m);
        prop_assert_eq!(mac_compute(&k, &m), good);
        prop_assert!(mac_verify(&k, &m, &good));
        prop_assert_eq!(mac_verify(&k, &m, &MacTag(t)), MacTag(t) == good);
    }

    #[test]
    fn mac_tag_changes_on_every_bit_flip(k in block(), m in prop::collection::vec(any::<u8>(), 1..=128)) {
        let k = SymmetricKey::from_bytes(k);
        let base = mac_compute(&k, &m);
        for bit in 0..m.len() * 8 {
            let mut x = m.clone();
            x[bit / 8] ^= 1 << (bit % 8);
            prop_assert_ne!(mac_compute(&k, &x), base);
        }
    }

    #[test]
    fn lowest_vt_election_is_affine_invariant(
        vts in prop::collection::btree_set(0u32..3000, 1..8),
        a in 0.01f64..100.0,
        b in -10.0f64..10.0,
    ) {
        let cands: Vec<Candidate> = vts
            .iter()
            .enumerate()
            .map(|(i, &v)| Candidate {
                id: TokenId::from_index(1, i as u64),
                vt: f64::from(v) / 1000.0,
                read_rate: 1.0,
                rssi: 1.0,
            })
            .collect();
        let scaled: Vec<Candidate> =
            cands.iter().map(|c| Candidate { vt: a * c.vt + b, ..*c }).collect();
        prop_assert_eq!(
            elect_pilot(&cands, PilotStrategy::LowestVt),
            elect_pilot(&scaled, PilotStrategy::LowestVt)
        );
    }

    #[test]
    fn throughput_recomputes(bytes in 1usize..5000, updated in 0usize..50, latency in 0.001f64..1e4) {
        let t = throughput_bps(bytes, updated, latency);
        prop_assert_eq!(t, (bytes * 8 * updated) as f64 / latency);
    }

    #[test]
    fn session_keys_are_fresh(seed in any::<u64>()) {
        let fw = FirmwareImage { bytes: vec![0xAB; 64], version: 2 };
        let mut rng = RandomSource::from_seed(seed);
        let keys: BTreeSet<[u8; 16]> = (0..32)
            .map(|_| *prelude(&fw, &mut rng, 2).unwrap().sk.as_bytes())
            .collect();
        prop_assert_eq!(keys.len(), 32);
    }

    #[test]
    fn association_never_targets_unknown_ids(
        known in prop::collection::btree_set(0u64..64, 0..8),
        seen in prop::collection::btree_set(0u64..64, 1..12),
        seed in any::<u64>(),
    ) {
        let mut rng = RandomSource::from_seed(seed);
        let mut db = TokenDb::default();
        for &i in &known {
            db.insert(DbEntry {
                id: TokenId::from_index(1, i),
                k: SymmetricKey::random(&mut rng),
                ver: 1,
                valid: true,
            })
            .unwrap();
        }
        let obs: Vec<InventoryObs> = seen
            .iter()
            .map(|&i| InventoryObs {
                id: TokenId::from_index(1, i),
                ver: 1,
                vt: 2.5,
                handle: Handle(i as u16),
                rssi: 1.0,
                read_rate: 1.0,
                at: SimTime(0),
            })
            .collect();
        let fw = FirmwareImage { bytes: vec![1; 48], version: 2 };
        let mut plan = prelude(&fw, &mut rng, 2).unwrap();
        let res = security_association(&mut plan, &db, &obs, AssociationPolicy::default());
        for a in &plan.associations {
            prop_assert!(db.get(&a.id).is_some());
        }
        if res.is_ok() {
            let want = seen.iter().filter(|i| known.contains(i)).count();
            prop_assert_eq!(plan.associations.len(), want);
        }
    }

    #[test]
    fn pam_table_is_monotone(hi in 1.5f64..3.0, d in 0.0f64..1.0) {
        let lo = hi - d;
        let (a, b) = (pam_get(hi), pam_get(lo));
        let active = |p: PamParams| p.t_active_ms.map_or(u32::MAX, u32::from);
        prop_assert!(b.t_lpm_ms >= a.t_lpm_ms);
        prop_assert!(active(b) <= active(a));
    }

    #[test]
    fn charging_is_monotone_in_received_power(
        v in 0.0f64..3.0,
        p in 0.0f64..0.2,
        dp in 0.0f64..0.2,
        dt in 0.0f64..0.1,
        m in 0usize..7,
    ) {
        let mode = LoadMode::ALL[m];
        let h = HarvesterState::new(HarvesterParams::default(), v);
        prop_assert!(step(&h, mode, p + dp, dt).v_cap >= step(&h, mode, p, dt).v_cap);
    }

    #[test]
    fn power_distance_equivalence(pt in 0.01f64..4.0, d in 0.05f64..5.0, alpha in 0.1f64..10.0) {
        let a = received_power(&ChannelState { tx_power_w: pt / alpha, distance_m: d, ..Default::default() });
        let b = received_power(&ChannelState { tx_power_w: pt, distance_m: d * alpha.sqrt(), ..Default::default() });
        prop_assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn heavier_loads_brown_out_first(p in 0.0f64..0.01) {
        let h = HarvesterState::released(HarvesterParams::default());
        let t = |m| time_to_brownout(&h, m, p).unwrap_or(f64::INFINITY);
        prop_assert!(t(LoadMode::RfidTransmit) <= t(LoadMode::FramRead));
        prop_assert!(t(LoadMode::FramRead) <= t(LoadMode::FramWrite));
        prop_assert!(t(LoadMode::FramWrite) <= t(LoadMode::ActiveCpu));
    }

    #[test]
    fn scratch_is_wiped_after_every_session_end(
        seed in any::<u64>(),
        fw in prop::collection::vec(any::<u8>(), 1..200),
        end in 0u8..3,
    ) {
        let mut rng = RandomSource::from_seed(seed);
        let k = SymmetricKey::random(&mut rng);
        let sk = SymmetricKey::random(&mut rng);
        let iv = rng.block();
        let ct = skp_encrypt(&sk, &iv, &fw).to_bytes();
        let mut s = mac_compute(&k, &mac_message(&fw, 1, 2));
        if end == 1 {
            s.0[0] ^= 1;
        }
        let mut t = Token::provision(TokenId::from_index(1, 0), k.clone(), 1, Some(vec![0]), TokenConfig::default());
        t.boot();
        t.assign_handle(Handle(1));
        t.handle_command(&Frame::to(Handle(1), CommandKind::EnterWisecr));
        t.boot();
        t.security_associate(&wrap_key(&k, &sk), s, 2, PamParams::CONTINUOUS, iv, true);
        for c in chunk_firmware(&ct, 2).unwrap().packets {
            t.store_block(c.index, &c.data).unwrap();
        }
        prop_assert!(t.holds_key_material());
        match end {
            0 => prop_assert!(t.finalize_update()),
            1 => prop_assert!(!t.finalize_update()),
            _ => t.on_power_loss(),
        }
        prop_assert!(!t.holds_key_material());
        prop_assert_eq!(t.ver(), if end == 0 { 2 } else { 1 });
        prop_assert_eq!(t.device_key(), &k);
    }
}

fn small_scenario(seed: u64, tokens: usize) -> Scenario {
    Scenario {
        seed,
        token_count: tokens,
        firmware: wisecr::scenario::FirmwareSpec {
            size: 96,
            ..Default::default()
        },
        ..Scenario::default()
    }
}

/// Maps handles to ids from the uplink inventory replies seen so far.
fn observers_silent(t: &wisecr::sim::Transcript) -> Result<(), String> {
    let mut handles = std::collections::BTreeMap::new();
    let mut observers = BTreeSet::new();
    let mut broadcasting = false;
    for r in t.records() {
        match (&r.sender, r.frame().map(|f| f.kind)) {
            (Sender::Token(id), Some(CommandKind::InventoryReply { .. })) => {
                if let Some(h) = r.handle {
                    handles.insert(h, *id);
                }
            }
            (Sender::Reader, Some(CommandKind::Inventory)) => {
                handles.clear();
                observers.clear();
                broadcasting = false;
            }
            (Sender::Reader, Some(CommandKind::Authenticate { pilot: false, .. })) => {
                if let Some(id) = r.handle.and_then(|h| handles.get(&h)) {
                    observers.insert(*id);
                }
            }
            (Sender::Reader, Some(CommandKind::SecureComm { .. })) => broadcasting = true,
            (Sender::Reader, Some(CommandKind::Eob)) => broadcasting = false,
            (Sender::Token(id), _) if broadcasting && observers.contains(id) => {
                return Err(format!("observer {id} spoke at seq {}", r.seq));
            }
            _ => {}
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_sessions_hold_invariants(seed in any::<u64>(), n in 1usize..=4) {
        let sc = small_scenario(seed, n);
        let mut w = build_world(&sc, seed).unwrap();
        let report = w.server.run_update(&mut w.sim, &w.firmware);
        let t = w.sim.transcript();

        prop_assert_eq!(
            report.throughput_bps,
            throughput_bps(report.firmware_bytes, report.updated(), report.latency_s)
        );
        if let Err(e) = observers_silent(t) {
            prop_assert!(false, "{}", e);
        }

        // Replies never start before the frame that triggered them ended.
        let mut last_downlink_end = 0;
        for r in t.records() {
            if r.is_downlink() {
                last_downlink_end = r.end_ns;
            } else {
                prop_assert!(r.start_ns >= last_downlink_end, "seq {}", r.seq);
            }
        }

        let params = sc.sim.harvester;
        for i in 0..w.sim.node_count() {
            let e = w.sim.energy(i);
            let redo = e.recomputed(&params);
            prop_assert!((e.total_drain - redo).abs() <= 1e-9 * redo.max(1.0), "token {}", i);
            let tok = w.sim.token(i);
            prop_assert!(!tok.holds_key_material());
            if tok.ver() == 2 {
                prop_assert_eq!(tok.installed_firmware(), Some(&w.firmware.bytes[..]));
            }
        }
    }

    #[test]
    fn reruns_are_byte_identical(seed in any::<u64>()) {
        let sc = small_scenario(seed, 3);
        let a = run_once(&sc, seed).unwrap();
        let b = run_once(&sc, seed).unwrap();
        prop_assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl());
        let row = |o: &wisecr::scenario::RunOutput| csv_string(&[RunRow::new(&sc.name, o.seed, &o.report)]);
        prop_assert_eq!(row(&a), row(&b));
    }
}
