// Licensed under the Apache-2.0 license

//! AES-128 in CBC mode with PKCS#7 padding, AES-CMAC, and the seedable
//! random source shared by every simulated party.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const BLOCK_LEN: usize = 16;

pub type Block = [u8; BLOCK_LEN];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("ciphertext is empty or not a multiple of the block length")]
    MalformedCiphertext,
    #[error("padding check failed")]
    MalformedPadding,
    #[error("expected {expected} bytes of key material, got {got}")]
    BadLength { expected: usize, got: usize },
}

/// 128-bit key. Wiped on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SymmetricKey([u8; BLOCK_LEN]);

impl SymmetricKey {
    pub const fn from_bytes(bytes: [u8; BLOCK_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; BLOCK_LEN] = bytes.try_into().map_err(|_| CryptoError::BadLength {
            expected: BLOCK_LEN,
            got: bytes.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn random(rng: &mut RandomSource) -> Self {
        let mut k = [0u8; BLOCK_LEN];
        rng.fill(&mut k);
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; BLOCK_LEN] {
        &self.0
    }

    fn cipher(&self) -> Aes128 {
        Aes128::new(GenericArray::from_slice(&self.0))
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MacTag(pub Block);

impl MacTag {
    pub fn as_bytes(&self) -> &Block {
        &self.0
    }

    /// Constant-time equality.
    pub fn ct_eq(&self, other: &MacTag) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl std::fmt::Debug for MacTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MacTag({})", hex::encode(self.0))
    }
}

/// CBC ciphertext together with the IV it was produced under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherBlockChain {
    pub iv: Block,
    blocks: Vec<Block>,
}

impl CipherBlockChain {
    pub fn from_bytes(iv: Block, bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(BLOCK_LEN) {
            return Err(CryptoError::MalformedCiphertext);
        }
        let blocks = bytes
            .chunks_exact(BLOCK_LEN)
            .map(|c| c.try_into().expect("chunks_exact yields full blocks"))
            .collect();
        Ok(Self { iv, blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len() * BLOCK_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.blocks.iter().flatten().copied().collect()
    }
}

/// Length after PKCS#7 padding; always adds at least one byte.
pub const fn padded_len(len: usize) -> usize {
    (len / BLOCK_LEN + 1) * BLOCK_LEN
}

pub fn aes_encrypt_block(key: &SymmetricKey, block: &Block) -> Block {
    let mut b = GenericArray::clone_from_slice(block);
    key.cipher().encrypt_block(&mut b);
    b.into()
}

pub fn aes_decrypt_block(key: &SymmetricKey, block: &Block) -> Block {
    let mut b = GenericArray::clone_from_slice(block);
    key.cipher().decrypt_block(&mut b);
    b.into()
}

fn xor_into(dst: &mut Block, src: &Block) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d ^= s);
}

pub fn skp_encrypt(key: &SymmetricKey, iv: &Block, plaintext: &[u8]) -> CipherBlockChain {
    let cipher = key.cipher();
    let pad = (BLOCK_LEN - plaintext.len() % BLOCK_LEN) as u8;
    let mut padded = Vec::with_capacity(padded_len(plaintext.len()));
    padded.extend_from_slice(plaintext);
    padded.resize(padded_len(plaintext.len()), pad);

    let mut chain = *iv;
    let blocks = padded
        .chunks_exact(BLOCK_LEN)
        .map(|p| {
            xor_into(&mut chain, p.try_into().expect("full block"));
            let mut b = GenericArray::clone_from_slice(&chain);
            cipher.encrypt_block(&mut b);
            chain = b.into();
            chain
        })
        .collect();
    CipherBlockChain { iv: *iv, blocks }
}

/// Decrypts and strips PKCS#7 padding. The padding check inspects every pad
/// byte so the work done does not depend on where the mismatch is.
pub fn skp_decrypt(key: &SymmetricKey, ct: &CipherBlockChain) -> Result<Vec<u8>, CryptoError> {
    if ct.blocks.is_empty() {
        return Err(CryptoError::MalformedCiphertext);
    }
    let cipher = key.cipher();
    let mut prev = ct.iv;
    let mut out = Vec::with_capacity(ct.len());
    for c in &ct.blocks {
        let mut b = GenericArray::clone_from_slice(c);
        cipher.decrypt_block(&mut b);
        let mut p: Block = b.into();
        xor_into(&mut p, &prev);
        out.extend_from_slice(&p);
        prev = *c;
    }
    let pad = *out.last().expect("non-empty") as usize;
    let tail = &out[out.len() - BLOCK_LEN..];
    let mut bad = u8::from(pad == 0 || pad > BLOCK_LEN);
    for (i, &b) in tail.iter().rev().enumerate() {
        let in_pad = u8::from(i < pad);
        bad |= in_pad & u8::from(b as usize != pad);
    }
    if bad != 0 {
        return Err(CryptoError::MalformedPadding);
    }
    out.truncate(out.len() - pad);
    Ok(out)
}

/// Single-block key wrap: CBC with a zero IV over exactly one block, no padding.
pub fn wrap_key(kek: &SymmetricKey, key: &SymmetricKey) -> Block {
    aes_encrypt_block(kek, key.as_bytes())
}

pub fn unwrap_key(kek: &SymmetricKey, wrapped: &Block) -> SymmetricKey {
    SymmetricKey(aes_decrypt_block(kek, wrapped))
}

fn dbl(b: &Block) -> Block {
    let mut out = [0u8; BLOCK_LEN];
    let mut carry = 0u8;
    for i in (0..BLOCK_LEN).rev() {
        out[i] = (b[i] << 1) | carry;
        carry = b[i] >> 7;
    }
    // Rb for a 128-bit block cipher.
    out[BLOCK_LEN - 1] ^= 0x87 & carry.wrapping_neg();
    out
}

/// CMAC over `message` (NIST SP 800-38B).
pub fn mac_compute(key: &SymmetricKey, message: &[u8]) -> MacTag {
    let cipher = key.cipher();
    let enc = |b: &Block| -> Block {
        let mut g = GenericArray::clone_from_slice(b);
        cipher.encrypt_block(&mut g);
        g.into()
    };
    let l = enc(&[0u8; BLOCK_LEN]);
    let k1 = dbl(&l);
    let k2 = dbl(&k1);

    let n = message.len().div_ceil(BLOCK_LEN).max(1);
    let complete = !message.is_empty() && message.len().is_multiple_of(BLOCK_LEN);
    let mut x = [0u8; BLOCK_LEN];
    for chunk in message.chunks(BLOCK_LEN).take(n - 1) {
        xor_into(&mut x, chunk.try_into().expect("full block before the last"));
        x = enc(&x);
    }
    let mut last = [0u8; BLOCK_LEN];
    let tail = &message[(n - 1) * BLOCK_LEN..];
    last[..tail.len()].copy_from_slice(tail);
    if complete {
        xor_into(&mut last, &k1);
    } else {
        last[tail.len()] = 0x80;
        xor_into(&mut last, &k2);
    }
    xor_into(&mut x, &last);
    MacTag(enc(&x))
}

pub fn mac_verify(key: &SymmetricKey, message: &[u8], tag: &MacTag) -> bool {
    mac_compute(key, message).ct_eq(tag)
}

/// Deterministic ChaCha20 stream per seed. With the `os-entropy` feature a
/// non-reproducible variant seeded from the OS is also available.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    #[cfg(feature = "os-entropy")]
    pub fn from_os_entropy() -> Self {
        Self {
            rng: ChaCha20Rng::from_entropy(),
        }
    }

    /// Independent child stream; `label` separates children of one parent.
    pub fn fork(&mut self, label: u64) -> Self {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        seed[..8]
            .iter_mut()
            .zip(label.to_le_bytes())
            .for_each(|(s, l)| *s ^= l);
        Self {
            rng: ChaCha20Rng::from_seed(seed),
        }
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }

    pub fn block(&mut self) -> Block {
        let mut b = [0u8; BLOCK_LEN];
        self.fill(&mut b);
        b
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn next_u16(&mut self) -> u16 {
        (self.rng.next_u32() >> 16) as u16
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.unit() * n as f64) as usize % n
    }

    /// Bernoulli draw. Always consumes one value so streams stay aligned.
    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

pub fn rng_bytes(source: &mut RandomSource, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    source.fill(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbl_shifts_and_reduces() {
        let mut b = [0u8; 16];
        b[0] = 0x80;
        let d = dbl(&b);
        assert_eq!(d[15], 0x87);
        assert!(d[..15].iter().all(|&x| x == 0));
    }

    #[test]
    fn padding_always_adds_a_block_on_exact_multiples() {
        assert_eq!(padded_len(0), 16);
        assert_eq!(padded_len(16), 32);
        assert_eq!(padded_len(407), 416);
        assert_eq!(padded_len(240), 256);
    }

    #[test]
    fn corrupted_pad_byte_is_rejected() {
        let k = SymmetricKey::from_bytes([7; 16]);
        let iv = [1; 16];
        let mut raw = skp_encrypt(&k, &iv, &[0u8; 20]).to_bytes();
        // Last byte of block 0 is XORed into the pad byte of block 1.
        raw[15] ^= 0x01;
        let tampered = CipherBlockChain::from_bytes(iv, &raw).unwrap();
        assert_eq!(skp_decrypt(&k, &tampered), Err(CryptoError::MalformedPadding));
    }

    #[test]
    fn key_wrap_roundtrip() {
        let kek = SymmetricKey::from_bytes([3; 16]);
        let sk = SymmetricKey::from_bytes([9; 16]);
        assert_eq!(unwrap_key(&kek, &wrap_key(&kek, &sk)), sk);
    }

    #[test]
    fn fork_streams_differ_by_label() {
        let mut a = RandomSource::from_seed(1);
        let mut b = RandomSource::from_seed(1);
        assert_ne!(a.fork(1).block(), b.fork(2).block());
    }
}
