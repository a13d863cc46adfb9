// Licensed under the Apache-2.0 license

use wisecr::adversary::{
    run_attack, run_positive_control, write_outcomes, AttackOutcome, AttackScript,
};
use wisecr::scenario::{FirmwareSpec, Scenario};

const SEEDS: std::ops::Range<u64> = 40..50;

fn scenario() -> Scenario {
    Scenario {
        token_count: 3,
        firmware: FirmwareSpec {
            size: 128,
            ..FirmwareSpec::default()
        },
        ..Scenario::default()
    }
}

fn scripts() -> Vec<AttackScript> {
    vec![
        AttackScript::Eavesdrop,
        AttackScript::InjectFirmware(b"attacker controlled image".repeat(4)),
        AttackScript::TamperChunk { index: 3, mask: 0x40 },
        AttackScript::ReplaySession,
        AttackScript::Downgrade,
        AttackScript::SpoofAck { target: 1 },
        AttackScript::UnauthorizedDevice,
    ]
}

fn protected(script: &AttackScript) -> Vec<AttackOutcome> {
    SEEDS
        .map(|s| run_attack(&scenario(), s, script).unwrap())
        .collect()
}

#[test]
fn every_attack_fails_against_the_protocol() {
    for script in scripts() {
        for o in protected(&script) {
            assert!(!o.succeeded(), "{o:?}");
            assert!(!o.foreign_install && !o.version_decreased, "{o:?}");
        }
    }
}

#[test]
fn every_attack_succeeds_with_its_defence_disabled() {
    // Injection needs no key, so only MAC checks stand in its way.
    for script in scripts() {
        for s in SEEDS {
            let o = run_positive_control(&scenario(), s, &script).unwrap();
            assert!(o.protections_disabled);
            assert!(o.succeeded(), "control did not succeed: {o:?}");
        }
    }
}

#[test]
fn eavesdropper_sees_no_plaintext_run() {
    for o in protected(&AttackScript::Eavesdrop) {
        let overlap = o.plaintext_overlap.expect("eavesdrop measures overlap");
        assert!(overlap < wisecr::adversary::RECOVERY_THRESHOLD, "{o:?}");
    }
}

#[test]
fn spoofed_acknowledgement_is_caught_by_attestation() {
    // Target 0 wins the election on ties, so the pilot's acks get forged too.
    for target in 0..3 {
        for o in protected(&AttackScript::SpoofAck { target }) {
            assert_eq!(o.server_fooled, Some(true), "spoof never reached the server: {o:?}");
            assert_eq!(o.attestation_caught, Some(true), "{o:?}");
        }
    }
}

#[test]
fn authorized_tokens_still_update_beside_an_intruder() {
    for o in protected(&AttackScript::UnauthorizedDevice) {
        assert_eq!(o.control_updated, Some(true), "{o:?}");
    }
}

#[test]
fn outcomes_serialize_with_scenario_seed() {
    let rows = protected(&AttackScript::Downgrade);
    let mut buf = Vec::new();
    write_outcomes(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(text.lines().nth(1).unwrap().starts_with("downgrade,40,"));
}
