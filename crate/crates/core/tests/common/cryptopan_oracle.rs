//! Bit-at-a-time Crypto-PAn written straight from the construction, kept
//! separate from the library code it checks. Per-bit block encryptions go
//! through ring's AES (QUIC header-protection mask = first bytes of
//! AES-ECB), the one-off pad encryption through the `aes` crate.

use std::net::IpAddr;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use ring::aead::quic::{HeaderProtectionKey, AES_128};

fn to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

fn from_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
        .collect()
}

pub fn oracle_pseudonymize(key: &[u8; 32], addr: IpAddr) -> IpAddr {
    let cipher_key = &key[..16];
    let mut pad = GenericArray::clone_from_slice(&key[16..]);
    aes::Aes128::new(GenericArray::from_slice(cipher_key)).encrypt_block(&mut pad);
    let pad_bits = to_bits(&pad);

    let prf = HeaderProtectionKey::new(&AES_128, cipher_key).unwrap();
    let addr_bytes = match addr {
        IpAddr::V4(a) => a.octets().to_vec(),
        IpAddr::V6(a) => a.octets().to_vec(),
    };
    let addr_bits = to_bits(&addr_bytes);
    let mut out_bits = Vec::with_capacity(addr_bits.len());
    for i in 0..addr_bits.len() {
        let mut block = addr_bits[..i].to_vec();
        block.extend_from_slice(&pad_bits[i..]);
        let mask = prf.new_mask(&from_bits(&block)).unwrap();
        let flip = mask[0] & 0x80 != 0;
        out_bits.push(addr_bits[i] ^ flip);
    }
    let out = from_bits(&out_bits);
    match addr {
        IpAddr::V4(_) => IpAddr::from(<[u8; 4]>::try_from(out).unwrap()),
        IpAddr::V6(_) => IpAddr::from(<[u8; 16]>::try_from(out).unwrap()),
    }
}
