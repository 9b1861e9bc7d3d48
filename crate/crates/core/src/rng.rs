//! Named, index-addressable random streams.
//!
//! Every random draw in a run comes from `substream(seed, stream, indices)`,
//! so a value depends only on the config seed and where it is used, never on
//! how many draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Augment,
    Noise,
    Batch,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Augment => 0x6175_676d,
            Stream::Noise => 0x6e6f_6973,
            Stream::Batch => 0x6261_7463,
            Stream::Eval => 0x6576_616c,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: Stream, indices: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ splitmix64(stream.tag()));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
