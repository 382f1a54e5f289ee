//! Exemplar memory replayed in later steps.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stream::Instance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    PerClass(usize),
    /// Global cap, shared equally among seen classes.
    Budget(usize),
}

impl Default for BufferPolicy {
    fn default() -> Self {
        Self::PerClass(20)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    policy: BufferPolicy,
    items: Vec<Instance>,
}

impl MemoryBuffer {
    pub fn new(policy: BufferPolicy) -> Result<Self> {
        match policy {
            BufferPolicy::PerClass(0) | BufferPolicy::Budget(0) => Err(Error::config("buffer capacity must be positive")),
            _ => Ok(Self { policy, items: Vec::new() }),
        }
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn items(&self) -> &[Instance] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for it in &self.items {
            *counts.entry(it.label).or_insert(0) += 1;
        }
        counts
    }

    /// Stores exemplars of the classes in `data`; called once at the end of a step.
    pub fn update<R: Rng>(&mut self, data: &[Instance], rng: &mut R) {
        let mut by_class: BTreeMap<usize, Vec<&Instance>> = BTreeMap::new();
        for inst in data {
            by_class.entry(inst.label).or_default().push(inst);
        }
        let quota = match self.policy {
            BufferPolicy::PerClass(k) => k,
            BufferPolicy::Budget(b) => {
                let classes = self.class_counts().len() + by_class.len();
                (b / classes.max(1)).max(1)
            }
        };
        for members in by_class.values() {
            let take = quota.min(members.len());
            self.items.extend(members.choose_multiple(rng, take).map(|&i| i.clone()));
        }
        if let BufferPolicy::Budget(b) = self.policy {
            self.rebalance(b, rng);
        }
    }

    /// Evicts random items from the largest class until the budget holds.
    fn rebalance<R: Rng>(&mut self, budget: usize, rng: &mut R) {
        while self.items.len() > budget {
            let counts = self.class_counts();
            let (&label, _) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty buffer");
            let positions: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].label == label).collect();
            let victim = *positions.choose(rng).expect("class present");
            self.items.remove(victim);
        }
    }

    /// Random buffer indices without replacement, at most `k`.
    pub fn sample_indices<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(classes: std::ops::Range<usize>, per: usize) -> Vec<Instance> {
        classes
            .flat_map(|c| (0..per).map(move |i| Instance { input: vec![i as f64], label: c }))
            .collect()
    }

    #[test]
    fn per_class_appends_twenty_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = MemoryBuffer::new(BufferPolicy::PerClass(20)).unwrap();
        b.update(&data(0..4, 50), &mut rng);
        assert_eq!(b.len(), 80);
        assert!(b.class_counts().values().all(|&c| c == 20));
    }

    #[test]
    fn scarce_class_stored_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = MemoryBuffer::new(BufferPolicy::PerClass(20)).unwrap();
        b.update(&data(0..1, 5), &mut rng);
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn budget_rebalances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = MemoryBuffer::new(BufferPolicy::Budget(200)).unwrap();
        b.update(&data(0..2, 300), &mut rng);
        assert_eq!(b.len(), 200);
        for t in 1..5 {
            b.update(&data(2 * t..2 * t + 2, 300), &mut rng);
            assert!(b.len() <= 200);
        }
        assert!(b.class_counts().values().all(|&c| c <= 20));
        assert_eq!(b.class_counts().len(), 10);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(MemoryBuffer::new(BufferPolicy::Budget(0)).is_err());
    }
}
