use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Key domains so different consumers of one user seed never share a stream.
pub(crate) mod domain {
    pub const PERTURBATION: u64 = 0x5745_4950_4552_0001;
    pub const SYNTH_DIRECTIONS: u64 = 0x5745_4950_4552_0002;
    pub const SYNTH_SAMPLES: u64 = 0x5745_4950_4552_0003;
}

/// Counter-based generator: the stream for `(seed, domain, index)` is fixed no
/// matter which thread asks for it or in what order.
pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
