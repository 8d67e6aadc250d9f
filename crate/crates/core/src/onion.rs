//! Layered per-hop encryption and recognition digests.

use thiserror::Error;

use crate::cell::{RelayPayload, DIGEST_RANGE, PAYLOAD_LEN, RECOGNIZED_RANGE};
use crate::crypto::{CryptoProvider, Direction, FNV_OFFSET_BASIS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OnionError {
    #[error("{0} cell counter exhausted")]
    CounterOverflow(&'static str),
}

/// Symmetric state shared between the client and one hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopKeys {
    pub key: [u8; 32],
    pub fwd_cell_counter: u64,
    pub bwd_cell_counter: u64,
    pub fwd_digest_state: u64,
    pub bwd_digest_state: u64,
}

impl HopKeys {
    pub fn new(key: [u8; 32]) -> HopKeys {
        HopKeys {
            key,
            fwd_cell_counter: 0,
            bwd_cell_counter: 0,
            fwd_digest_state: FNV_OFFSET_BASIS,
            bwd_digest_state: FNV_OFFSET_BASIS,
        }
    }

    pub fn counter(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Forward => self.fwd_cell_counter,
            Direction::Backward => self.bwd_cell_counter,
        }
    }

    fn counter_mut(&mut self, dir: Direction) -> &mut u64 {
        match dir {
            Direction::Forward => &mut self.fwd_cell_counter,
            Direction::Backward => &mut self.bwd_cell_counter,
        }
    }

    pub fn digest_state(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Forward => self.fwd_digest_state,
            Direction::Backward => self.bwd_digest_state,
        }
    }

    fn digest_state_mut(&mut self, dir: Direction) -> &mut u64 {
        match dir {
            Direction::Forward => &mut self.fwd_digest_state,
            Direction::Backward => &mut self.bwd_digest_state,
        }
    }
}

fn digest_candidate(provider: &dyn CryptoProvider, bytes: &[u8; PAYLOAD_LEN], state: u64) -> u64 {
    let mut zeroed = *bytes;
    zeroed[DIGEST_RANGE].fill(0);
    provider.digest_update(state, &zeroed)
}

/// Sender side: fill in `payload.digest` from this hop's running digest for
/// `dir` and commit the new state.
pub fn stamp_digest(provider: &dyn CryptoProvider, payload: &mut RelayPayload, keys: &mut HopKeys, dir: Direction) {
    payload.recognized = 0;
    let state = digest_candidate(provider, &payload.encode(), keys.digest_state(dir));
    payload.digest = state as u32;
    *keys.digest_state_mut(dir) = state;
}

/// Removes (or, going backward at a relay, adds) one stream layer and
/// advances the hop's counter for `dir`.
pub fn onion_unwrap_layer(
    provider: &dyn CryptoProvider,
    buffer: &mut [u8; PAYLOAD_LEN],
    keys: &mut HopKeys,
    dir: Direction,
) -> Result<(), OnionError> {
    let counter = keys.counter(dir);
    let next = counter.checked_add(1).ok_or(OnionError::CounterOverflow(dir.name()))?;
    provider.stream_xor(&keys.key, dir, counter, buffer);
    *keys.counter_mut(dir) = next;
    Ok(())
}

/// Wraps `payload` for `hops` (hop 1 first): the last hop's layer is
/// innermost, hop 1's outermost. Every hop's counter for `dir` advances by
/// one. On overflow nothing is mutated.
pub fn onion_wrap(
    provider: &dyn CryptoProvider,
    payload: &RelayPayload,
    hops: &mut [HopKeys],
    dir: Direction,
) -> Result<[u8; PAYLOAD_LEN], OnionError> {
    if hops.iter().any(|h| h.counter(dir) == u64::MAX) {
        return Err(OnionError::CounterOverflow(dir.name()));
    }
    let mut buf = payload.encode();
    for hop in hops.iter_mut().rev() {
        onion_unwrap_layer(provider, &mut buf, hop, dir)?;
    }
    Ok(buf)
}

/// Checks whether a fully unwrapped payload is addressed to this hop. The
/// digest state advances only on success.
pub fn recognize(provider: &dyn CryptoProvider, bytes: &[u8; PAYLOAD_LEN], keys: &mut HopKeys, dir: Direction) -> bool {
    if bytes[RECOGNIZED_RANGE] != [0, 0] {
        return false;
    }
    let state = digest_candidate(provider, bytes, keys.digest_state(dir));
    let claimed = u32::from_le_bytes(bytes[DIGEST_RANGE].try_into().expect("4 bytes"));
    if claimed == state as u32 {
        *keys.digest_state_mut(dir) = state;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{fnv1a64, splitmix64, TestProvider};

    fn sample(data: &[u8]) -> RelayPayload {
        RelayPayload::new(1, 9, data).unwrap()
    }

    #[test]
    fn zero_hops_is_identity() {
        let p = sample(b"abc");
        assert_eq!(onion_wrap(&TestProvider, &p, &mut [], Direction::Forward).unwrap(), p.encode());
    }

    #[test]
    fn first_block_matches_closed_form() {
        let p = sample(b"0123456789");
        let mut hop = [HopKeys::new([0u8; 32])];
        let out = onion_wrap(&TestProvider, &p, &mut hop, Direction::Forward).unwrap();
        let mut key_dir = [0u8; 33];
        key_dir[32] = 0x01;
        let ks = splitmix64(fnv1a64(&key_dir)).to_le_bytes();
        let plain = p.encode();
        for i in 0..8 {
            assert_eq!(out[i], plain[i] ^ ks[i]);
        }
        assert_eq!(hop[0].fwd_cell_counter, 1);
        assert_eq!(hop[0].bwd_cell_counter, 0);
    }

    #[test]
    fn sequential_cells_use_distinct_keystreams() {
        let p = sample(b"same");
        let mut hop = [HopKeys::new([3u8; 32])];
        let a = onion_wrap(&TestProvider, &p, &mut hop, Direction::Forward).unwrap();
        let b = onion_wrap(&TestProvider, &p, &mut hop, Direction::Forward).unwrap();
        assert_ne!(a, b);
        assert_eq!(hop[0].fwd_cell_counter, 2);
    }

    #[test]
    fn wrong_key_fails_recognition() {
        let mut sender = HopKeys::new([1u8; 32]);
        let mut p = sample(b"secret");
        stamp_digest(&TestProvider, &mut p, &mut sender, Direction::Forward);
        let mut wire = onion_wrap(&TestProvider, &p, std::slice::from_mut(&mut sender), Direction::Forward).unwrap();
        let mut wrong = HopKeys::new([2u8; 32]);
        onion_unwrap_layer(&TestProvider, &mut wire, &mut wrong, Direction::Forward).unwrap();
        assert!(!recognize(&TestProvider, &wire, &mut wrong, Direction::Forward));
        assert_eq!(wrong.fwd_digest_state, FNV_OFFSET_BASIS);
    }

    #[test]
    fn recognized_field_must_be_zero() {
        let mut keys = HopKeys::new([1u8; 32]);
        let mut p = sample(b"x");
        let mut probe = keys.clone();
        stamp_digest(&TestProvider, &mut p, &mut probe, Direction::Forward);
        p.recognized = 1;
        assert!(!recognize(&TestProvider, &p.encode(), &mut keys, Direction::Forward));
    }

    #[test]
    fn recognition_commits_state_only_on_success() {
        let mut client = HopKeys::new([5u8; 32]);
        let mut relay = client.clone();
        let mut p = sample(b"hello");
        stamp_digest(&TestProvider, &mut p, &mut client, Direction::Forward);
        assert!(recognize(&TestProvider, &p.encode(), &mut relay, Direction::Forward));
        assert_eq!(relay.fwd_digest_state, client.fwd_digest_state);
        // Replaying the same cell fails because the running digest moved on.
        assert!(!recognize(&TestProvider, &p.encode(), &mut relay, Direction::Forward));
    }

    #[test]
    fn counter_overflow_is_reported_without_mutation() {
        let mut hops = [HopKeys::new([0u8; 32]), HopKeys::new([1u8; 32])];
        hops[1].fwd_cell_counter = u64::MAX;
        let err = onion_wrap(&TestProvider, &sample(b""), &mut hops, Direction::Forward).unwrap_err();
        assert_eq!(err, OnionError::CounterOverflow("forward"));
        assert_eq!(hops[0].fwd_cell_counter, 0);
    }
}
