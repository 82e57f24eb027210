//! Seed derivation and the per-seed map used for independent rollouts.
//!
//! With the `parallel` feature the map runs on the rayon pool; without it,
//! sequentially. Results come back in input order either way, so the output
//! does not depend on the feature.

/// Seed streams.
pub mod stream {
    pub const DEMO: u64 = 1;
    pub const HIL: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const EXPERT: u64 = 4;
    pub const SCALING: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

pub fn seeds(master: u64, stream: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(master, stream, i)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    map_seeds_sequential(seeds, f)
}

pub fn map_seeds_sequential<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.iter().map(|&s| f(s)).collect()
}
