use std::net::IpAddr;

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const HMAC_KEY_LEN: usize = 20;

/// 160-bit HMAC secret.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct HmacKey([u8; HMAC_KEY_LEN]);

impl std::fmt::Debug for HmacKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HmacKey(..)")
    }
}

impl HmacKey {
    pub fn new(bytes: [u8; HMAC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; HMAC_KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn as_bytes(&self) -> &[u8; HMAC_KEY_LEN] {
        &self.0
    }
}

/// HMAC-SHA-256 over the address's 4- or 16-byte network form.
pub fn hmac_pseudonymize(key: &HmacKey, addr: IpAddr) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("hmac takes any key size");
    match addr {
        IpAddr::V4(a) => mac.update(&a.octets()),
        IpAddr::V6(a) => mac.update(&a.octets()),
    }
    mac.finalize().into_bytes().into()
}
