//! Seed derivation. Independent streams come from one master seed through
//! SplitMix64, so adding a stream never shifts the others.

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `stream` under `master`.
pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(stream.wrapping_add(0x5EED)))
}

/// Named streams used across the pipeline.
pub mod stream {
    pub const TOKENIZER: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const NEW_TOKENS: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const DATA: u64 = 10;
    pub const RUNS: u64 = 11;
}
