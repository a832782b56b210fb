//! Small numeric helpers shared across the crate.

/// Pairwise (tree) summation. Deterministic for a fixed element order and
/// noticeably more accurate than a running sum on long, small-magnitude
/// streams such as per-cell losses.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 128;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Streaming accumulator with pairwise reduction semantics: values are summed
/// in fixed-size blocks and the block totals are tree-summed at the end, so
/// the result depends only on the order in which values are pushed.
#[derive(Debug, Default)]
pub struct PairwiseAccumulator {
    blocks: Vec<f64>,
    current: f64,
    in_block: u32,
}

impl PairwiseAccumulator {
    const BLOCK: u32 = 256;

    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, value: f64) {
        self.current += value;
        self.in_block += 1;
        if self.in_block == Self::BLOCK {
            self.blocks.push(self.current);
            self.current = 0.0;
            self.in_block = 0;
        }
    }

    pub fn total(mut self) -> f64 {
        if self.in_block > 0 {
            self.blocks.push(self.current);
        }
        pairwise_sum(&self.blocks)
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 64-bit FNV-1a over a byte string; used to stamp reports with stable
/// config/seed fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; used to derive independent per-entity RNG seeds
/// from a run seed without any ordering sensitivity.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
