use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Deterministic random source keyed by a 64-bit seed and a 64-bit stream id.
///
/// Identical (seed, stream) pairs yield identical sequences everywhere; every
/// independent consumer (a client in a round, a class being partitioned, a
/// model being initialized) gets its own stream so results do not depend on
/// scheduling or call order elsewhere.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn gauss(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    /// Gamma(shape, 1) draw, floored away from zero so normalizations stay finite.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        let g = Gamma::new(shape, 1.0).expect("gamma shape must be positive");
        g.sample(&mut self.inner).max(1e-300)
    }

    /// Glorot-uniform weight draw for a layer with the given fan-in/out.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> f64 {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(-bound, bound)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream-id derivation. Each independent random consumer composes a salt with
/// its indices so streams never collide across purposes.
pub mod streams {
    const SALT_INIT_CLASSIFIER: u64 = 0x5eed_c1a5;
    const SALT_INIT_GAE: u64 = 0x5eed_6ae0;
    const SALT_TRAIN: u64 = 0x5eed_7a10;
    const SALT_PARTITION_DRAW: u64 = 0x5eed_d1d1;
    const SALT_PARTITION_SHUFFLE: u64 = 0x5eed_0d0d;
    const SALT_LABEL_PICK: u64 = 0x5eed_1abe;
    const SALT_SYNTH: u64 = 0x5eed_5717;
    const SALT_TSNE: u64 = 0x5eed_e0bd;
    const SALT_MASK: u64 = 0x5eed_0a5c;

    fn mix(mut x: u64) -> u64 {
        // splitmix64 finalizer
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    pub fn compose(salt: u64, parts: &[u64]) -> u64 {
        let mut acc = mix(salt);
        for &p in parts {
            acc = mix(acc ^ p.wrapping_mul(0x9e3779b97f4a7c15));
        }
        acc
    }

    /// Shared initial classifier draw (one per experiment).
    pub fn classifier_init() -> u64 {
        compose(SALT_INIT_CLASSIFIER, &[])
    }

    /// Per-client teacher initialization.
    pub fn gae_init(client: usize) -> u64 {
        compose(SALT_INIT_GAE, &[client as u64])
    }

    /// Per-client per-round training stream (batch order, mask choices).
    pub fn train(client: usize, round: usize) -> u64 {
        compose(SALT_TRAIN, &[client as u64, round as u64])
    }

    /// Per-(class, client) allocation draw; keyed independently of the
    /// concentration so sweeps over it reuse common random numbers.
    pub fn partition_draw(class: usize, client: usize) -> u64 {
        compose(SALT_PARTITION_DRAW, &[class as u64, client as u64])
    }

    pub fn partition_shuffle(class: usize) -> u64 {
        compose(SALT_PARTITION_SHUFFLE, &[class as u64])
    }

    pub fn label_pick(client: usize) -> u64 {
        compose(SALT_LABEL_PICK, &[client as u64])
    }

    pub fn synth(index: u64) -> u64 {
        compose(SALT_SYNTH, &[index])
    }

    pub fn tsne(tag: u64) -> u64 {
        compose(SALT_TSNE, &[tag])
    }

    pub fn mask(tag: u64) -> u64 {
        compose(SALT_MASK, &[tag])
    }
}
