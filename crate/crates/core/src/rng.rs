//! Counter-based random streams.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-mode stream
//! cipher. A master seed and a purpose tag form the 256-bit key; the replica
//! index selects the 64-bit stream. Any replica can therefore be regenerated
//! on its own, in any order, on any worker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream families, so that different consumers of one master seed never
/// share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Particles = 1,
    Field = 2,
    Calibration = 3,
    Misc = 4,
}

/// Key = `master ‖ purpose ‖ 0…`, stream = `replica`.
pub fn stream(master: u64, purpose: Purpose, replica: u64) -> SimRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replica);
    rng
}
