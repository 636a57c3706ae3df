//! Experience-replay buffer: stores seen training data and draws seeded
//! subsamples from it.
//!
//! The default is unbounded storage (every seen sample is kept). A bounded
//! buffer applies reservoir sampling over the lifetime stream, so each seen
//! item ends up retained with probability `capacity / seen_count`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;
use crate::seeds;

#[derive(Debug, Clone)]
struct Slot {
    features: Vec<f64>,
    label: usize,
    source_task_id: usize,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: Option<usize>,
    slots: Vec<Slot>,
    seen_count: usize,
    feature_dim: Option<usize>,
}

/// `N_s` candidate samples drawn from the buffer, with their slot indices.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub indices: Vec<usize>,
    pub batch: Batch,
}

impl Subsample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl MemoryBuffer {
    pub fn unbounded() -> Self {
        MemoryBuffer {
            capacity: None,
            slots: Vec::new(),
            seen_count: 0,
            feature_dim: None,
        }
    }

    pub fn bounded(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(MemoryBuffer {
            capacity: Some(capacity),
            slots: Vec::new(),
            seen_count: 0,
            feature_dim: None,
        })
    }

    pub fn new(capacity: Option<usize>) -> Result<Self> {
        match capacity {
            None => Ok(Self::unbounded()),
            Some(c) => Self::bounded(c),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Stores a batch. Unbounded buffers append everything; bounded buffers
    /// run reservoir sampling, seed-deterministically.
    pub fn store(&mut self, batch: &Batch, source_task_id: usize, seed: u64) {
        if batch.is_empty() {
            return;
        }
        match self.feature_dim {
            None => self.feature_dim = Some(batch.feature_dim()),
            Some(d) => assert_eq!(d, batch.feature_dim(), "buffer feature width mismatch"),
        }
        let mut rng = seeds::rng(seed, &[seeds::tag::STORE]);
        for i in 0..batch.len() {
            let slot = Slot {
                features: batch.features().row(i).to_vec(),
                label: batch.labels()[i],
                source_task_id,
            };
            self.seen_count += 1;
            match self.capacity {
                None => self.slots.push(slot),
                Some(cap) => {
                    if self.slots.len() < cap {
                        self.slots.push(slot);
                    } else {
                        let j = rng.random_range(0..self.seen_count);
                        if j < cap {
                            self.slots[j] = slot;
                        }
                    }
                }
            }
        }
    }

    /// Draws `min(n_s, len)` distinct slots uniformly without replacement.
    pub fn draw_subsample(&self, n_s: usize, seed: u64) -> Result<Subsample> {
        if self.slots.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut rng = seeds::rng(seed, &[seeds::tag::SUBSAMPLE]);
        let indices = crate::sampling::sample_without_replacement(self.slots.len(), n_s, &mut rng);
        let take = indices.len();

        let dim = self.feature_dim.unwrap_or(0);
        let mut features = Matrix::empty(dim);
        let mut labels = Vec::with_capacity(take);
        for &i in &indices {
            features.push_row(&self.slots[i].features);
            labels.push(self.slots[i].label);
        }
        Ok(Subsample {
            indices,
            batch: Batch::new(features, labels)?,
        })
    }

    /// (features, label, source_task_id) of slot `i`; used by provenance
    /// checks.
    pub fn slot(&self, i: usize) -> (&[f64], usize, usize) {
        let s = &self.slots[i];
        (&s.features, s.label, s.source_task_id)
    }

    /// True if slot `i` carries exactly these features/label.
    pub fn slot_matches(&self, i: usize, features: &[f64], label: usize) -> bool {
        self.slots[i].features == features && self.slots[i].label == label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_of(values: &[usize]) -> Batch {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v as f64 / 1000.0]).collect();
        Batch::new(
            Matrix::from_rows(&rows).unwrap(),
            values.iter().map(|&v| v % 7).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unbounded_appends_everything() {
        let mut buf = MemoryBuffer::unbounded();
        buf.store(&batch_of(&(0..100).collect::<Vec<_>>()), 0, 1);
        buf.store(&batch_of(&(0..50).collect::<Vec<_>>()), 1, 2);
        assert_eq!(buf.len(), 150);
        assert_eq!(buf.seen_count(), 150);
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let mut buf = MemoryBuffer::unbounded();
        buf.store(&Batch::empty(3), 0, 1);
        assert_eq!(buf.len(), 0);
        assert_eq!(buf.seen_count(), 0);
    }

    #[test]
    fn bounded_never_exceeds_capacity() {
        let mut buf = MemoryBuffer::bounded(10).unwrap();
        for t in 0..20 {
            buf.store(&batch_of(&(0..37).collect::<Vec<_>>()), t, t as u64);
            assert!(buf.len() <= 10);
        }
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.seen_count(), 20 * 37);
    }

    #[test]
    fn bounded_with_large_capacity_matches_unbounded() {
        let items: Vec<usize> = (0..64).collect();
        let mut a = MemoryBuffer::unbounded();
        let mut b = MemoryBuffer::bounded(1000).unwrap();
        a.store(&batch_of(&items), 0, 3);
        b.store(&batch_of(&items), 0, 3);
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert!(b.slot_matches(i, &[items[i] as f64 / 1000.0], items[i] % 7));
        }
    }

    #[test]
    fn reservoir_inclusion_frequency() {
        // capacity 10 over a 1000-item stream: each item retained with
        // probability ~0.01. 20k trials keep the binomial noise of the
        // worst of the 1000 per-item estimates inside the +-0.003 band.
        let items: Vec<usize> = (0..1000).collect();
        let batch = batch_of(&items);
        let trials = 20_000;
        let mut hits = vec![0u32; 1000];
        for seed in 0..trials {
            let mut buf = MemoryBuffer::bounded(10).unwrap();
            buf.store(&batch, 0, seed);
            for i in 0..buf.len() {
                let item = (buf.slots[i].features[0] * 1000.0).round() as usize;
                assert!(buf.slot_matches(i, &[item as f64 / 1000.0], item % 7));
                hits[item] += 1;
            }
        }
        let mut mean = 0.0;
        for (item, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            mean += freq / 1000.0;
            assert!(
                (freq - 0.01).abs() <= 0.003,
                "item {item} retained with frequency {freq}"
            );
        }
        assert!((mean - 0.01).abs() < 2e-4, "mean retention {mean}");
    }

    #[test]
    fn subsample_draw_contracts() {
        let mut buf = MemoryBuffer::unbounded();
        buf.store(&batch_of(&(0..20).collect::<Vec<_>>()), 0, 1);

        // n_s >= len returns the whole buffer
        let all = buf.draw_subsample(100, 5).unwrap();
        assert_eq!(all.len(), 20);
        let mut sorted = all.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);

        // determinism
        let a = buf.draw_subsample(5, 9).unwrap();
        let b = buf.draw_subsample(5, 9).unwrap();
        assert_eq!(a.indices, b.indices);

        // distinct, in-range
        let c = buf.draw_subsample(7, 11).unwrap();
        let mut idx = c.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 7);
        assert!(idx.iter().all(|&i| i < 20));
    }

    #[test]
    fn subsample_of_single_slot_buffer() {
        let mut buf = MemoryBuffer::unbounded();
        buf.store(&batch_of(&[3]), 0, 1);
        let s = buf.draw_subsample(1, 2).unwrap();
        assert_eq!(s.indices, vec![0]);
        assert_eq!(s.batch.labels(), &[3 % 7]);
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = MemoryBuffer::unbounded();
        assert!(matches!(buf.draw_subsample(5, 1), Err(Error::EmptyBuffer)));
    }
}
