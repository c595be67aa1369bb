//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a [`Stream`] keyed by
//! `(run_seed, step, purpose)`. The n-th draw of a stream is a pure function of
//! its key and n, so streams never interfere: turning SAM on consumes values
//! from the `"ascent"` stream and leaves the `"data"` stream untouched.
//!
//! The generator is SplitMix64 evaluated at counter positions:
//! `draw(n) = mix(key + (n + 1) * GOLDEN)` where `mix` is the SplitMix64
//! finalizer. Keys are derived by folding the seed, step, and the FNV-1a hash
//! of the purpose tag through the same finalizer.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used to turn purpose tags into key material.
pub fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a stream key from `(seed, step, purpose)`.
pub fn derive_key(seed: u64, step: u64, purpose: &str) -> u64 {
    let a = mix64(seed ^ GOLDEN);
    let b = mix64(a ^ step.wrapping_mul(GOLDEN).wrapping_add(1));
    mix64(b ^ fnv1a(purpose))
}

#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, step: u64, purpose: &str) -> Self {
        Self::from_key(derive_key(seed, step, purpose))
    }

    pub fn from_key(key: u64) -> Self {
        Stream { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of values drawn so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Value at an absolute counter position, without advancing.
    pub fn at(&self, n: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(n.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Index in `[0, n)` by the multiply-shift reduction `(u * n) >> 64`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; consumes two draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `k` distinct indices from `0..n`, returned in ascending order.
    ///
    /// Partial Fisher-Yates: for `i in 0..k`, swap slot `i` with slot
    /// `i + index(n - i)` of the identity permutation, then sort the prefix.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut perm: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            perm.swap(i, j);
        }
        perm.truncate(k);
        perm.sort_unstable();
        perm
    }

    /// Unit vector of dimension `dim` drawn uniformly from the sphere.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}
