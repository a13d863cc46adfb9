// Licensed under the Apache-2.0 license

use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use wisecr_ffi::*;

const OK: i32 = WisecrStatus::Ok as i32;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let mut n = 0;
    unsafe { wisecr_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len(), &mut n) };
    String::from_utf8_lossy(&buf[..n.saturating_sub(1)]).into_owned()
}

#[test]
fn run_scenario_through_handles() {
    let text = CString::new("token_count = 2\n[firmware]\nsize = 64\n").unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { wisecr_scenario_parse(text.as_ptr(), ptr::null(), &mut sc) }, OK);
    let mut rep = ptr::null_mut();
    assert_eq!(unsafe { wisecr_run(sc, 4, &mut rep) }, OK);

    let (mut lat, mut tput, mut upd, mut att) = (0.0, 0.0, 0usize, 0u32);
    assert_eq!(unsafe { wisecr_report_summary(rep, &mut lat, &mut tput, &mut upd, &mut att) }, OK);
    assert_eq!(upd, 2);
    assert!(att >= 1 && lat > 0.0);
    assert_eq!(tput, (64 * 8 * 2) as f64 / lat);

    let mut n = 0;
    let small = unsafe { wisecr_report_csv(rep, ptr::null_mut(), 0, &mut n) };
    assert_eq!(small, WisecrStatus::BufferTooSmall as i32);
    let mut csv = vec![0u8; n];
    assert_eq!(unsafe { wisecr_report_csv(rep, csv.as_mut_ptr(), n, &mut n) }, OK);
    assert!(String::from_utf8(csv).unwrap().starts_with("scenario,seed,"));

    unsafe {
        wisecr_report_free(rep);
        wisecr_scenario_free(sc);
        wisecr_scenario_free(ptr::null_mut());
    }
}

#[test]
fn config_error_is_reported() {
    let text = CString::new("repetitions = -1\n").unwrap();
    let origin = CString::new("inline.toml").unwrap();
    let mut sc = ptr::null_mut();
    let rc = unsafe { wisecr_scenario_parse(text.as_ptr(), origin.as_ptr(), &mut sc) };
    assert_eq!(rc, WisecrStatus::Config as i32);
    assert!(sc.is_null());
    assert!(last_error().starts_with("inline.toml:1:"), "{}", last_error());

    let missing = CString::new("/nonexistent.toml").unwrap();
    assert_eq!(unsafe { wisecr_scenario_load(missing.as_ptr(), &mut sc) }, WisecrStatus::Config as i32);
    assert_eq!(unsafe { wisecr_scenario_load(ptr::null(), &mut sc) }, WisecrStatus::NullPointer as i32);
}

#[test]
fn crypto_entry_points_match_known_answers() {
    let key: [u8; 16] = hex("2b7e151628aed2a6abf7158809cf4f3c");
    let mut tag = [0u8; 16];
    assert_eq!(unsafe { wisecr_mac_compute(key.as_ptr(), ptr::null(), 0, tag.as_mut_ptr()) }, OK);
    assert_eq!(tag, hex::<16>("bb1d6929e95937287fa37d129b756746"));
    let mut valid = false;
    unsafe { wisecr_mac_verify(key.as_ptr(), ptr::null(), 0, tag.as_ptr(), &mut valid) };
    assert!(valid);
    tag[0] ^= 1;
    unsafe { wisecr_mac_verify(key.as_ptr(), ptr::null(), 0, tag.as_ptr(), &mut valid) };
    assert!(!valid);

    let iv = [3u8; 16];
    let pt = b"sixteen byte msg";
    let mut ct = [0u8; 32];
    let mut n = 0;
    assert_eq!(unsafe { wisecr_encrypt(key.as_ptr(), iv.as_ptr(), pt.as_ptr(), 16, ct.as_mut_ptr(), 32, &mut n) }, OK);
    assert_eq!(n, 32);
    let mut back = [0u8; 32];
    assert_eq!(unsafe { wisecr_decrypt(key.as_ptr(), iv.as_ptr(), ct.as_ptr(), 32, back.as_mut_ptr(), 32, &mut n) }, OK);
    assert_eq!(&back[..n], pt);
    ct[31] ^= 0xFF;
    let rc = unsafe { wisecr_decrypt(key.as_ptr(), iv.as_ptr(), ct.as_ptr(), 32, back.as_mut_ptr(), 32, &mut n) };
    assert_eq!(rc, WisecrStatus::Crypto as i32);
}

#[test]
fn pam_lookup() {
    let mut p = WisecrPam { t_active_ms: 1, t_lpm_ms: 1, update_advised: false };
    assert_eq!(unsafe { wisecr_pam_get(2.5, &mut p) }, OK);
    assert_eq!((p.t_active_ms, p.t_lpm_ms, p.update_advised), (0, 0, true));
    unsafe { wisecr_pam_get(2.15, &mut p) };
    assert_eq!((p.t_active_ms, p.t_lpm_ms, p.update_advised), (14, 15, true));
    unsafe { wisecr_pam_get(2.0, &mut p) };
    assert!(!p.update_advised);
}

#[test]
fn generated_header_compiles_as_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/wisecr.h")).unwrap();
    for sym in ["wisecr_scenario_load", "wisecr_run", "wisecr_report_free", "WisecrScenario", "WISECR_STATUS_OK"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    std::fs::write(&src, "#include \"wisecr.h\"\nint main(void) { WisecrPam p; return wisecr_pam_get(2.5, &p); }\n").unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler on PATH; header syntax unchecked");
        return;
    };
    assert!(status.success());
}

fn hex<const N: usize>(s: &str) -> [u8; N] {
    let v: Vec<u8> = (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect();
    v.try_into().unwrap()
}
