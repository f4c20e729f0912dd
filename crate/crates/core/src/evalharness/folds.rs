use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::drumsim::SPEEDS_MM_S;

/// One leave-one-speed-out fold: train on nine speeds, validate and test
/// only on the held-out one.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub heldout_speed: f64,
    /// The other nine speeds, ascending.
    pub train_speeds: Vec<f64>,
    /// Drives this fold's val/test split draws and its model and training
    /// seeds; derived from the master seed so folds are independent.
    pub seed: u64,
}

impl FoldSpec {
    /// Directory component for this fold's results.
    pub fn dir_name(&self) -> String {
        format!("fold_{}", self.heldout_speed as u32)
    }
}

/// splitmix64 finalizer; decorrelates derived seeds from consecutive salts.
pub(crate) fn mix_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the ten folds, one per drum speed, deterministically from the
/// master seed.
pub fn make_folds(master_seed: u64) -> Vec<FoldSpec> {
    SPEEDS_MM_S
        .iter()
        .enumerate()
        .map(|(i, &speed)| FoldSpec {
            heldout_speed: speed,
            train_speeds: SPEEDS_MM_S
                .iter()
                .copied()
                .filter(|&v| v != speed)
                .collect(),
            seed: mix_seed(master_seed, i as u64),
        })
        .collect()
}

/// Validation/test sizes for `n` held-out samples: half each, with the odd
/// sample going to test. At 500 images that is 250:250; at 59 spectra, 29:30.
pub fn split_sizes(n: usize) -> (usize, usize) {
    (n / 2, n - n / 2)
}

/// Randomly partitions `0..n` into (val, test) index sets of [`split_sizes`],
/// each sorted ascending.
pub fn split_indices(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (n_val, _) = split_sizes(n);
    let mut val = idx[..n_val].to_vec();
    let mut test = idx[n_val..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    (val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ten_folds_each_hold_out_one_speed() {
        let folds = make_folds(7);
        assert_eq!(folds.len(), 10);
        let heldout: Vec<f64> = folds.iter().map(|f| f.heldout_speed).collect();
        assert_eq!(heldout, SPEEDS_MM_S);
        for f in &folds {
            assert_eq!(f.train_speeds.len(), 9);
            assert!(!f.train_speeds.contains(&f.heldout_speed));
            for s in &f.train_speeds {
                assert!(SPEEDS_MM_S.contains(s));
            }
        }
    }

    #[test]
    fn folds_are_deterministic_and_seed_sensitive() {
        assert_eq!(make_folds(7), make_folds(7));
        let a = make_folds(7);
        let b = make_folds(8);
        assert!(a.iter().zip(&b).any(|(x, y)| x.seed != y.seed));
        let seeds: std::collections::HashSet<u64> = a.iter().map(|f| f.seed).collect();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn split_sizes_match_the_protocol() {
        assert_eq!(split_sizes(500), (250, 250));
        assert_eq!(split_sizes(59), (29, 30));
        assert_eq!(split_sizes(1), (0, 1));
        for n in 0..200 {
            let (v, t) = split_sizes(n);
            assert_eq!(v + t, n);
            assert!(t >= v && t - v <= 1);
        }
    }

    #[test]
    fn split_indices_partition_without_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 59, 100] {
            let (val, test) = split_indices(n, &mut rng);
            let (nv, nt) = split_sizes(n);
            assert_eq!(val.len(), nv);
            assert_eq!(test.len(), nt);
            let mut all: Vec<usize> = val.iter().chain(&test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_draws_replay_from_the_seed() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            split_indices(59, &mut rng)
        };
        assert_eq!(draw(), draw());
        // A generic split is not the trivial first-half/second-half cut.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (val, _) = split_indices(59, &mut rng);
        assert_ne!(val, (0..29).collect::<Vec<_>>());
    }
}
