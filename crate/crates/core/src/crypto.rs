//! Pluggable cell crypto.
//!
//! [`TestProvider`] is a fully deterministic, bit-exact provider used for
//! simulation and cross-implementation vectors. It offers no confidentiality
//! whatsoever and must never protect real traffic.

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Keystream blocks reserved per cell; 64 eight-byte blocks cover a 507-byte payload.
pub const BLOCKS_PER_CELL: u64 = 64;

/// Direction of travel along a circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Client towards exit.
    Forward,
    /// Exit towards client.
    Backward,
}

impl Direction {
    /// Wire byte: forward = 0x01, backward = 0x00.
    pub fn as_byte(self) -> u8 {
        match self {
            Direction::Forward => 0x01,
            Direction::Backward => 0x00,
        }
    }

    pub fn from_byte(b: u64) -> Option<Direction> {
        match b {
            1 => Some(Direction::Forward),
            0 => Some(Direction::Backward),
            _ => None,
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// FNV-1a 64-bit continuation from `state`.
pub fn fnv1a64_update(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(FNV_OFFSET_BASIS, bytes)
}

pub fn splitmix64(x: u64) -> u64 {
    let x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// XOR `buf` with the splitmix64 keystream for `seed` starting at
/// block `counter * 64`.
fn xor_keystream(seed: u64, counter: u64, buf: &mut [u8]) {
    let base = counter.wrapping_mul(BLOCKS_PER_CELL);
    for (j, chunk) in buf.chunks_mut(8).enumerate() {
        let block = splitmix64(seed.wrapping_add(base.wrapping_add(j as u64)));
        for (b, k) in chunk.iter_mut().zip(block.to_le_bytes()) {
            *b ^= k;
        }
    }
}

pub trait CryptoProvider: Send + Sync {
    /// XOR `buffer` with the keystream for (key, direction, cell counter).
    /// Must be an involution.
    fn stream_xor(&self, key: &[u8; 32], direction: Direction, cell_counter: u64, buffer: &mut [u8]);

    fn digest_update(&self, state: u64, bytes: &[u8]) -> u64;

    /// Encrypt a hop key so that only `relay_id` can recover it.
    fn seal(&self, relay_id: &[u8; 16], plaintext: &[u8]) -> Vec<u8>;

    /// Recover a sealed hop key with the relay's private material.
    fn open(&self, relay_private: &[u8], sealed: &[u8]) -> Vec<u8>;
}

/// Deterministic, insecure provider: splitmix64 keystream, FNV-1a digest,
/// identity-keyed sealing.
#[derive(Debug, Default, Clone, Copy)]
pub struct TestProvider;

impl TestProvider {
    pub fn stream_seed(key: &[u8; 32], direction: Direction) -> u64 {
        let state = fnv1a64_update(FNV_OFFSET_BASIS, key);
        fnv1a64_update(state, &[direction.as_byte()])
    }

    fn seal_seed(relay_id: &[u8]) -> u64 {
        fnv1a64_update(fnv1a64(b"seal"), relay_id)
    }
}

impl CryptoProvider for TestProvider {
    fn stream_xor(&self, key: &[u8; 32], direction: Direction, cell_counter: u64, buffer: &mut [u8]) {
        xor_keystream(Self::stream_seed(key, direction), cell_counter, buffer);
    }

    fn digest_update(&self, state: u64, bytes: &[u8]) -> u64 {
        fnv1a64_update(state, bytes)
    }

    fn seal(&self, relay_id: &[u8; 16], plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        xor_keystream(Self::seal_seed(relay_id), 0, &mut out);
        out
    }

    // The relay's "private" material under this provider is simply its node id.
    fn open(&self, relay_private: &[u8], sealed: &[u8]) -> Vec<u8> {
        let mut out = sealed.to_vec();
        xor_keystream(Self::seal_seed(relay_private), 0, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_values() {
        assert_eq!(fnv1a64(b""), FNV_OFFSET_BASIS);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn splitmix_zero() {
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }

    #[test]
    fn seal_open_inverse() {
        let id = [7u8; 16];
        let pt: Vec<u8> = (0..32).collect();
        let sealed = TestProvider.seal(&id, &pt);
        assert_ne!(sealed, pt);
        assert_eq!(TestProvider.open(&id, &sealed), pt);
        assert_ne!(TestProvider.open(&[8u8; 16], &sealed), pt);
    }

    #[test]
    fn directions_use_distinct_streams() {
        let key = [1u8; 32];
        let mut a = [0u8; 16];
        let mut b = [0u8; 16];
        TestProvider.stream_xor(&key, Direction::Forward, 0, &mut a);
        TestProvider.stream_xor(&key, Direction::Backward, 0, &mut b);
        assert_ne!(a, b);
    }
}
