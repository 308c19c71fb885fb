use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{CryptoRng, RngCore};
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const PREFIX_KEY_LEN: usize = 32;

/// AES-128 key plus the 16-byte padding seed.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct PrefixCipherKey {
    cipher_key: [u8; 16],
    pad: [u8; 16],
}

impl std::fmt::Debug for PrefixCipherKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrefixCipherKey(..)")
    }
}

impl PrefixCipherKey {
    pub fn new(cipher_key: [u8; 16], pad: [u8; 16]) -> Self {
        Self { cipher_key, pad }
    }

    /// First 16 bytes are the cipher key, the rest the pad.
    pub fn from_bytes(bytes: &[u8; PREFIX_KEY_LEN]) -> Self {
        let mut cipher_key = [0u8; 16];
        let mut pad = [0u8; 16];
        cipher_key.copy_from_slice(&bytes[..16]);
        pad.copy_from_slice(&bytes[16..]);
        Self { cipher_key, pad }
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; PREFIX_KEY_LEN];
        rng.fill_bytes(&mut bytes);
        let key = Self::from_bytes(&bytes);
        bytes.zeroize();
        key
    }

    pub fn to_bytes(&self) -> [u8; PREFIX_KEY_LEN] {
        let mut out = [0u8; PREFIX_KEY_LEN];
        out[..16].copy_from_slice(&self.cipher_key);
        out[16..].copy_from_slice(&self.pad);
        out
    }

    pub fn cipher_key(&self) -> &[u8; 16] {
        &self.cipher_key
    }

    pub fn pad(&self) -> &[u8; 16] {
        &self.pad
    }
}

/// Prefix-preserving address pseudonymization (Crypto-PAn).
///
/// Address bits sit in the most significant end of a `u128`, so IPv4 and
/// IPv6 share one code path that differs only in width. All per-bit blocks
/// are built up front and encrypted in one batch.
pub struct CryptoPan {
    cipher: Aes128,
    pad: u128,
}

impl CryptoPan {
    pub fn new(key: &PrefixCipherKey) -> Self {
        let cipher = Aes128::new(GenericArray::from_slice(&key.cipher_key));
        let mut pad = GenericArray::clone_from_slice(&key.pad);
        cipher.encrypt_block(&mut pad);
        let pad = u128::from_be_bytes(pad.into());
        Self { cipher, pad }
    }

    pub fn pseudonymize(&self, addr: IpAddr) -> IpAddr {
        match addr {
            IpAddr::V4(a) => IpAddr::V4(self.pseudonymize_v4(a)),
            IpAddr::V6(a) => IpAddr::V6(self.pseudonymize_v6(a)),
        }
    }

    pub fn pseudonymize_v4(&self, addr: Ipv4Addr) -> Ipv4Addr {
        let bits = (u32::from(addr) as u128) << 96;
        Ipv4Addr::from((self.walk(bits, 32) >> 96) as u32)
    }

    pub fn pseudonymize_v6(&self, addr: Ipv6Addr) -> Ipv6Addr {
        Ipv6Addr::from(self.walk(u128::from(addr), 128))
    }

    fn walk(&self, addr: u128, width: usize) -> u128 {
        let mut blocks = Vec::with_capacity(width);
        for i in 0..width {
            let keep = if i == 0 { 0 } else { u128::MAX << (128 - i) };
            let block = (addr & keep) | (self.pad & !keep);
            blocks.push(GenericArray::from(block.to_be_bytes()));
        }
        self.cipher.encrypt_blocks(&mut blocks);
        let mut flips = 0u128;
        for (i, b) in blocks.iter().enumerate() {
            flips |= ((b[0] >> 7) as u128) << (127 - i);
        }
        addr ^ flips
    }
}

/// Length of the shared leading bit string of two same-family addresses.
pub fn common_prefix_len(a: IpAddr, b: IpAddr) -> Option<u32> {
    match (a, b) {
        (IpAddr::V4(a), IpAddr::V4(b)) => Some((u32::from(a) ^ u32::from(b)).leading_zeros()),
        (IpAddr::V6(a), IpAddr::V6(b)) => Some((u128::from(a) ^ u128::from(b)).leading_zeros()),
        _ => None,
    }
}
