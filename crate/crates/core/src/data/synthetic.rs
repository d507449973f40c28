//! Four-class categorical benchmark with two semantically paired feature
//! pairs and two noise features.
//!
//! * `x1 ∈ {A,B,C,D}`, `x2 ∈ {E,F,G,H}`: uniform.
//! * `x3 ∈ {A',B',C',D'}` repeats `x1`'s choice with probability 0.8, otherwise uniform;
//!   `x4` does the same for `x2`.
//! * `x5 ∈ {I,J,K,L}`, `x6 ∈ {M,N,O,P}`: uniform noise.
//! * The label follows the quadrant of `(x1, x2)` with probability 0.8, otherwise uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::table::{Cell, DatasetTable, FeatureSpec, Labels, TaskKind};
use crate::error::{bail, Result};

pub const COPY_PROBABILITY: f64 = 0.8;
pub const LABEL_PROBABILITY: f64 = 0.8;

pub const FEATURES: [(&str, [&str; 4]); 6] = [
    ("x1", ["A", "B", "C", "D"]),
    ("x2", ["E", "F", "G", "H"]),
    ("x3", ["A'", "B'", "C'", "D'"]),
    ("x4", ["E'", "F'", "G'", "H'"]),
    ("x5", ["I", "J", "K", "L"]),
    ("x6", ["M", "N", "O", "P"]),
];

/// (source feature, copy feature) index pairs; category `c` of one matches category `c` of the other.
pub const PAIRED_FEATURES: [(usize, usize); 2] = [(0, 2), (1, 3)];
pub const NOISE_FEATURES: [usize; 2] = [4, 5];
pub const INFORMATIVE_FEATURES: [usize; 4] = [0, 1, 2, 3];

/// Class index (0-based, class names "1".."4") implied by `(x1, x2)`.
pub fn quadrant(x1: usize, x2: usize) -> usize {
    let x1_low = x1 < 2; // A or B
    let x2_low = x2 < 2; // E or F
    match (x1_low, x2_low) {
        (false, true) => 0,
        (true, false) => 1,
        (true, true) => 2,
        (false, false) => 3,
    }
}

pub fn gen_synthetic_fourclass(n: usize, seed: u64) -> Result<DatasetTable> {
    if n == 0 {
        bail!(InvalidArgument, "n must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = rng.random_range(0..4);
        let x2 = rng.random_range(0..4);
        let copy_or_draw = |src: usize, rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < COPY_PROBABILITY {
                src
            } else {
                rng.random_range(0..4)
            }
        };
        let x3 = copy_or_draw(x1, &mut rng);
        let x4 = copy_or_draw(x2, &mut rng);
        let x5 = rng.random_range(0..4);
        let x6 = rng.random_range(0..4);
        let y = if rng.random::<f64>() < LABEL_PROBABILITY {
            quadrant(x1, x2)
        } else {
            rng.random_range(0..4)
        };
        rows.push([x1, x2, x3, x4, x5, x6].map(Cell::Cat).to_vec());
        labels.push(y);
    }
    let schema = FEATURES
        .iter()
        .map(|(name, cats)| FeatureSpec::categorical(*name, *cats))
        .collect();
    let class_names = (1..=4).map(|c| c.to_string()).collect();
    DatasetTable::new(
        schema,
        rows,
        Labels::Class(labels),
        TaskKind::for_classes(4),
        class_names,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_and_labels() {
        let t = gen_synthetic_fourclass(50, 1).unwrap();
        assert_eq!(t.n_features(), 6);
        assert!(t.schema.iter().all(|f| f.cardinality() == Some(4)));
        assert_eq!(t.class_names, ["1", "2", "3", "4"]);
        assert!(gen_synthetic_fourclass(0, 1).is_err());
    }

    #[test]
    fn quadrant_rules() {
        // C&E → 1, A&G → 2, B&F → 3, D&H → 4
        assert_eq!(quadrant(2, 0), 0);
        assert_eq!(quadrant(0, 2), 1);
        assert_eq!(quadrant(1, 1), 2);
        assert_eq!(quadrant(3, 3), 3);
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_synthetic_fourclass(20, 3).unwrap(),
            gen_synthetic_fourclass(20, 3).unwrap()
        );
    }
}
