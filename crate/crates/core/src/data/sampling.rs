use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Source indices for one epoch: every source sample `target_count / n`
/// times, plus a random subset for the remainder, shuffled. When the target
/// set is smaller than the source set, each source sample appears once.
pub fn oversample_source<R: Rng>(n_source: usize, target_count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_source == 0 {
        return Err(Error::Config("source set is empty".into()));
    }
    let total = target_count.max(n_source);
    let mut seq: Vec<usize> = (0..total / n_source).flat_map(|_| 0..n_source).collect();
    let mut rest: Vec<usize> = (0..n_source).collect();
    rest.shuffle(rng);
    seq.extend_from_slice(&rest[..total % n_source]);
    seq.shuffle(rng);
    Ok(seq)
}

/// One element of a mixed-domain training pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolEntry {
    Source(usize),
    Target(usize),
}

/// Shuffled mixed-domain batches for one epoch: oversampled source plus
/// every target sample once, so both domains appear equally often.
pub fn epoch_batches<R: Rng>(n_source: usize, n_target: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<PoolEntry>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut pool: Vec<PoolEntry> = oversample_source(n_source, n_target, rng)?.into_iter().map(PoolEntry::Source).collect();
    pool.extend((0..n_target).map(PoolEntry::Target));
    pool.shuffle(rng);
    Ok(pool.chunks(batch_size).map(<[PoolEntry]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counts(seq: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &i in seq {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn oversampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = oversample_source(150, 500, &mut rng).unwrap();
        assert_eq!(seq.len(), 500);
        let c = counts(&seq, 150);
        assert!(c.iter().all(|&k| k == 3 || k == 4));
        assert_eq!(c.iter().filter(|&&k| k == 4).count(), 50);
    }

    #[test]
    fn equal_counts_give_a_permutation() {
        let seq = oversample_source(40, 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(counts(&seq, 40), vec![1; 40]);
    }

    #[test]
    fn empty_source_is_an_error() {
        assert!(oversample_source(0, 10, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn epochs_are_domain_balanced() {
        let batches = epoch_batches(40, 120, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let all: Vec<PoolEntry> = batches.concat();
        assert_eq!(all.len(), 240);
        let src = all.iter().filter(|e| matches!(e, PoolEntry::Source(_))).count();
        assert_eq!(src, 120);
        assert!(batches.iter().all(|b| b.len() == 10));
    }
}
