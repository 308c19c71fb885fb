mod common;

use std::collections::HashSet;
use std::net::{IpAddr, Ipv4Addr};

use common::cryptopan_oracle::oracle_pseudonymize;
use common::{FROZEN_VECTORS, REFERENCE_KEY, REFERENCE_SAMPLE};
use enclaved::pseudonymizer::{common_prefix_len, CryptoPan, PrefixCipherKey};
use rand::{Rng, SeedableRng};

fn key_from_hex(h: &str) -> [u8; 32] {
    hex::decode(h).unwrap().try_into().unwrap()
}

#[test]
fn frozen_vectors_match() {
    for (key, addr, expected) in FROZEN_VECTORS {
        let key = key_from_hex(key);
        let addr: IpAddr = addr.parse().unwrap();
        let expected: IpAddr = expected.parse().unwrap();
        let pan = CryptoPan::new(&PrefixCipherKey::from_bytes(&key));
        assert_eq!(pan.pseudonymize(addr), expected, "{addr}");
        assert_eq!(oracle_pseudonymize(&key, addr), expected, "{addr}");
    }
}

#[test]
fn reference_sample_trace_matches() {
    let pan = CryptoPan::new(&PrefixCipherKey::from_bytes(&REFERENCE_KEY));
    for (raw, anon) in REFERENCE_SAMPLE {
        assert_eq!(pan.pseudonymize(raw.parse().unwrap()).to_string(), anon);
    }
}

#[test]
fn slash16_is_a_bijection_onto_a_slash16() {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(16);
    let pan = CryptoPan::new(&PrefixCipherKey::generate(&mut rng));
    let mut seen = HashSet::with_capacity(1 << 16);
    let mut prefix = None;
    for low in 0..=u16::MAX {
        let a = Ipv4Addr::from(0xC633_0000u32 | low as u32);
        let out = u32::from(pan.pseudonymize_v4(a));
        assert_eq!(*prefix.get_or_insert(out >> 16), out >> 16);
        assert!(seen.insert(out), "collision at {a}");
    }
}

#[test]
fn oracle_agrees_on_random_inputs() {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
    for i in 0..2_000 {
        let key: [u8; 32] = rng.gen();
        let addr = if i % 2 == 0 {
            IpAddr::from(rng.gen::<[u8; 4]>())
        } else {
            IpAddr::from(rng.gen::<[u8; 16]>())
        };
        let pan = CryptoPan::new(&PrefixCipherKey::from_bytes(&key));
        assert_eq!(pan.pseudonymize(addr), oracle_pseudonymize(&key, addr));
    }
}

#[test]
fn prefix_length_is_preserved_for_related_pairs() {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
    let pan = CryptoPan::new(&PrefixCipherKey::generate(&mut rng));
    for shared in 0..=32u32 {
        let a: u32 = rng.gen();
        // Keep `shared` leading bits, flip the next one, randomize the rest.
        let b = if shared == 32 {
            a
        } else {
            let flip = 1u32 << (31 - shared);
            (a ^ flip) ^ (rng.gen::<u32>() & (flip - 1))
        };
        let (a, b) = (IpAddr::V4(a.into()), IpAddr::V4(b.into()));
        let cpl = common_prefix_len(a, b).unwrap();
        assert_eq!(cpl, shared);
        assert_eq!(
            common_prefix_len(pan.pseudonymize(a), pan.pseudonymize(b)),
            Some(cpl)
        );
    }
}
