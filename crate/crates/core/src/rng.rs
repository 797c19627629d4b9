//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded with
//! the run seed and switched to a stream id built from a purpose tag, an
//! iteration counter and a slot index:
//! `(purpose << 56) | (iteration << 16) | slot`. Draws therefore depend only
//! on those coordinates and never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sample = 2,
    Synth = 3,
    Split = 4,
}

const ITER_BITS: u64 = 40;
const SLOT_BITS: u64 = 16;

pub fn stream(seed: u64, purpose: Purpose, iteration: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iter = iteration & ((1 << ITER_BITS) - 1);
    let slot = slot & ((1 << SLOT_BITS) - 1);
    rng.set_stream(((purpose as u64) << (ITER_BITS + SLOT_BITS)) | (iter << SLOT_BITS) | slot);
    rng
}
