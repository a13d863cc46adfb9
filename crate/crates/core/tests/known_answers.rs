// Licensed under the Apache-2.0 license

//! Published known-answer vectors and a bit-serial CRC oracle.

use wisecr::crypto::{
    aes_decrypt_block, aes_encrypt_block, mac_compute, mac_verify, skp_decrypt, skp_encrypt,
    unwrap_key, wrap_key, CipherBlockChain, MacTag, SymmetricKey,
};
use wisecr::wire::crc16;

fn h<const N: usize>(s: &str) -> [u8; N] {
    hex::decode(s).unwrap().try_into().unwrap()
}

fn hv(s: &str) -> Vec<u8> {
    hex::decode(s).unwrap()
}

#[test]
fn aes128_fips197_appendix_c1() {
    let k = SymmetricKey::from_bytes(h("000102030405060708090a0b0c0d0e0f"));
    let pt = h("00112233445566778899aabbccddeeff");
    let ct = aes_encrypt_block(&k, &pt);
    assert_eq!(ct, h::<16>("69c4e0d86a7b0430d8cdb78070b4c55a"));
    assert_eq!(aes_decrypt_block(&k, &ct), pt);
}

#[test]
fn aes128_fips197_appendix_b() {
    let k = SymmetricKey::from_bytes(h("2b7e151628aed2a6abf7158809cf4f3c"));
    let ct = aes_encrypt_block(&k, &h("3243f6a8885a308d313198a2e0370734"));
    assert_eq!(ct, h::<16>("3925841d02dc09fbdc118597196a0b32"));
}

/// SP 800-38A F.2.1 CBC-AES128; padding only appends a final block.
#[test]
fn cbc_sp800_38a_prefix() {
    let k = SymmetricKey::from_bytes(h("2b7e151628aed2a6abf7158809cf4f3c"));
    let iv = h("000102030405060708090a0b0c0d0e0f");
    let pt = hv(concat!(
        "6bc1bee22e409f96e93d7e117393172a",
        "ae2d8a571e03ac9c9eb76fac45af8e51",
        "30c81c46a35ce411e5fbc1191a0a52ef",
        "f69f2445df4f9b17ad2b417be66c3710"
    ));
    let expect = hv(concat!(
        "7649abac8119b246cee98e9b12e9197d",
        "5086cb9b507219ee95db113a917678b2",
        "73bed6b8e3c1743b7116e69e22229516",
        "3ff1caa1681fac09120eca307586e1a7"
    ));
    let ct = skp_encrypt(&k, &iv, &pt);
    assert_eq!(ct.len(), 80);
    assert_eq!(&ct.to_bytes()[..64], &expect[..]);
    assert_eq!(skp_decrypt(&k, &ct).unwrap(), pt);
}

#[test]
fn cbc_rejects_bad_padding() {
    let k = SymmetricKey::from_bytes([7; 16]);
    let iv = [1; 16];
    let mut bytes = skp_encrypt(&k, &iv, b"firmware").to_bytes();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let ct = CipherBlockChain::from_bytes(iv, &bytes).unwrap();
    assert!(skp_decrypt(&k, &ct).is_err());
}

const RFC4493_KEY: &str = "2b7e151628aed2a6abf7158809cf4f3c";
const RFC4493_MSG: &str = concat!(
    "6bc1bee22e409f96e93d7e117393172a",
    "ae2d8a571e03ac9c9eb76fac45af8e51",
    "30c81c46a35ce411e5fbc1191a0a52ef",
    "f69f2445df4f9b17ad2b417be66c3710"
);

#[test]
fn cmac_rfc4493_examples() {
    let k = SymmetricKey::from_bytes(h(RFC4493_KEY));
    let msg = hv(RFC4493_MSG);
    let cases = [
        (0, "bb1d6929e95937287fa37d129b756746"),
        (16, "070a16b46b4d4144f79bdd9dd04a287c"),
        (40, "dfa66747de9ae63030ca32611497c827"),
        (64, "51f0bebf7e3b9d92fc49741779363cfe"),
    ];
    for (len, tag) in cases {
        let t = mac_compute(&k, &msg[..len]);
        assert_eq!(t, MacTag(h(tag)), "length {len}");
        assert!(mac_verify(&k, &msg[..len], &t));
    }
}

#[test]
fn cmac_rejects_flipped_bit() {
    let k = SymmetricKey::from_bytes(h(RFC4493_KEY));
    let msg = hv(RFC4493_MSG);
    let mut t = mac_compute(&k, &msg);
    t.0[15] ^= 0x80;
    assert!(!mac_verify(&k, &msg, &t));
}

#[test]
fn key_wrap_is_single_block_encryption() {
    let kek = SymmetricKey::from_bytes(h("000102030405060708090a0b0c0d0e0f"));
    let sk = SymmetricKey::from_bytes(h("00112233445566778899aabbccddeeff"));
    let w = wrap_key(&kek, &sk);
    assert_eq!(w, h::<16>("69c4e0d86a7b0430d8cdb78070b4c55a"));
    assert_eq!(unwrap_key(&kek, &w), sk);
}

/// MSB-first shift register: poly 0x1021, preset 0xFFFF, ones' complement.
fn crc16_bitwise(data: &[u8]) -> u16 {
    let mut reg: u16 = 0xFFFF;
    for &byte in data {
        for i in (0..8).rev() {
            let bit = (byte >> i) & 1 == 1;
            let top = reg & 0x8000 != 0;
            reg <<= 1;
            if bit != top {
                reg ^= 0x1021;
            }
        }
    }
    !reg
}

#[test]
fn crc16_matches_bit_serial_oracle() {
    // Frozen oracle output for the standard check string.
    assert_eq!(crc16_bitwise(b"123456789"), 0xD64E);
    assert_eq!(crc16(b"123456789"), 0xD64E);
    let mut x: u32 = 0x1234_5678;
    for len in 0..64 {
        let data: Vec<u8> = (0..len)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                x as u8
            })
            .collect();
        assert_eq!(crc16(&data), crc16_bitwise(&data), "len {len}");
    }
}
