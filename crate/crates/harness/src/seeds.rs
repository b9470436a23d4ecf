//! Random-source splitting.
//!
//! Every random draw in a run comes from a ChaCha8 stream seeded with
//! `derive(root, stream, iteration, index)`, where `derive` folds the four
//! words through the splitmix64 finalizer. Episodes therefore do not depend
//! on thread scheduling or on how many draws other episodes made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Exploration rollouts fitting the baseline's model.
    Explore = 1,
    /// Plant rollouts used for model fitting.
    Collect = 2,
    /// Model-generated cost observations.
    Observe = 3,
    /// Evaluation rollouts.
    Eval = 4,
    /// Monte-Carlo expected cost-to-go.
    Expect = 5,
}

pub const SCHEME: &str = "chacha8(splitmix64 fold of [root, stream, iteration, index]); \
streams: explore=1 collect=2 observe=3 eval=4 (iteration fixed to 0) expect=5";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream, iteration: u64, index: u64) -> u64 {
    [stream as u64, iteration, index]
        .into_iter()
        .fold(splitmix64(root), |h, w| splitmix64(h ^ w))
}

pub fn rng(root: u64, stream: Stream, iteration: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream, iteration, index))
}
