use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Origin of one item in a mixed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    A,
    B,
}

/// Endless shuffled stream of indices into one source, reshuffled every epoch.
#[derive(Debug, Clone)]
struct Epochs {
    order: Vec<usize>,
    pos: usize,
}

impl Epochs {
    fn new(len: usize) -> Self {
        Epochs {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Deterministic stream of minibatches drawn from two sources.
///
/// Batch `k` takes `round(r*bs*(k+1)) - round(r*bs*k)` items from source A,
/// which equals `round(r*bs)` whenever `r*bs` is a whole number and keeps the
/// running share within half an item of `r` otherwise.
#[derive(Debug, Clone)]
pub struct MixedBatches {
    ratio: f64,
    batch_size: usize,
    batches: u64,
    a: Epochs,
    b: Epochs,
    rng: ChaCha8Rng,
}

pub fn mix_batches(len_a: usize, len_b: usize, ratio: f64, batch_size: usize, seed: u64) -> Result<MixedBatches> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mixing ratio {ratio} outside [0, 1]")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if len_a == 0 && ratio > 0.0 {
        return Err(Error::invalid("source A is empty but has a nonzero share"));
    }
    if len_b == 0 && ratio < 1.0 {
        return Err(Error::invalid("source B is empty but has a nonzero share"));
    }
    Ok(MixedBatches {
        ratio,
        batch_size,
        batches: 0,
        a: Epochs::new(len_a),
        b: Epochs::new(len_b),
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl MixedBatches {
    fn quota(&self, k: u64) -> usize {
        (self.ratio * self.batch_size as f64 * k as f64).round() as usize
    }
}

impl Iterator for MixedBatches {
    type Item = Vec<(Source, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        let k = self.batches;
        let from_a = self.quota(k + 1) - self.quota(k);
        self.batches += 1;
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..from_a {
            out.push((Source::A, self.a.next(&mut self.rng)));
        }
        for _ in from_a..self.batch_size {
            out.push((Source::B, self.b.next(&mut self.rng)));
        }
        Some(out)
    }
}

/// Single-source stream: shuffled epochs of `0..len`.
pub fn single_source(len: usize, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    let inner = mix_batches(len, 0, 1.0, batch_size, seed)?;
    Ok(inner.map(|b| b.into_iter().map(|(_, i)| i).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventy_thirty_every_batch() {
        for batch in mix_batches(50, 50, 0.7, 10, 1).unwrap().take(100) {
            assert_eq!(batch.iter().filter(|(s, _)| *s == Source::A).count(), 7);
        }
    }

    #[test]
    fn pure_sources_and_errors() {
        let b = mix_batches(5, 0, 1.0, 4, 0).unwrap().next().unwrap();
        assert!(b.iter().all(|(s, _)| *s == Source::A));
        assert!(mix_batches(0, 5, 0.5, 4, 0).is_err());
        assert!(mix_batches(5, 5, 1.5, 4, 0).is_err());
    }

    #[test]
    fn every_item_once_per_epoch() {
        let mut seen: Vec<usize> = single_source(12, 4, 3).unwrap().take(3).flatten().collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }
}
