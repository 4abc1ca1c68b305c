//! Progress-filtered replay buffer with least-progress eviction.

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::pairgen::{PreferencePair, Trajectory};

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub pair: PreferencePair,
    /// Aggregate gain of the source trajectory; always positive.
    pub progress: f64,
    pub seq: u64,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub size: usize,
    pub admitted: u64,
    pub evicted: u64,
    pub mean_progress: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
    admitted: u64,
    evicted: u64,
    next_seq: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay capacity must be positive");
        Self { capacity, entries: Vec::new(), admitted: 0, evicted: 0, next_seq: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    /// Stores the pairs of a trajectory that made measurable progress.
    /// Exhausted or non-improving trajectories admit nothing.
    pub fn admit(&mut self, traj: &Trajectory, pairs: &[PreferencePair]) -> usize {
        match traj.progress() {
            Some(progress) if progress > 0.0 => {
                for pair in pairs {
                    self.insert(pair.clone(), progress);
                }
                pairs.len()
            }
            _ => 0,
        }
    }

    /// Inserts one entry, then evicts the least-progress, oldest entry while
    /// over capacity. Non-positive progress is refused.
    pub fn insert(&mut self, pair: PreferencePair, progress: f64) -> bool {
        if progress.is_nan() || progress <= 0.0 {
            return false;
        }
        self.entries.push(ReplayEntry { pair, progress, seq: self.next_seq, samples: 0 });
        self.next_seq += 1;
        self.admitted += 1;
        while self.entries.len() > self.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.progress.total_cmp(&b.progress).then(a.seq.cmp(&b.seq)))
                .map(|(i, _)| i)
                .expect("nonempty");
            self.entries.swap_remove(victim);
            self.evicted += 1;
        }
        true
    }

    /// With replacement while the buffer holds fewer than `batch` entries,
    /// without replacement otherwise. Empty buffer gives an empty batch.
    pub fn sample_batch(&mut self, batch: usize, rng: &mut dyn RngCore) -> Vec<PreferencePair> {
        let n = self.entries.len();
        if n == 0 || batch == 0 {
            return Vec::new();
        }
        let picks: Vec<usize> =
            if n < batch { (0..batch).map(|_| rng.random_range(0..n)).collect() } else { index::sample(rng, n, batch).into_vec() };
        picks
            .into_iter()
            .map(|i| {
                self.entries[i].samples += 1;
                self.entries[i].pair.clone()
            })
            .collect()
    }

    pub fn stats(&self) -> ReplayStats {
        let mean_progress =
            if self.entries.is_empty() { 0.0 } else { self.entries.iter().map(|e| e.progress).sum::<f64>() / self.entries.len() as f64 };
        ReplayStats { size: self.entries.len(), admitted: self.admitted, evicted: self.evicted, mean_progress }
    }

    /// One entry per line, in insertion order.
    pub fn to_jsonl(&self) -> String {
        let mut sorted: Vec<&ReplayEntry> = self.entries.iter().collect();
        sorted.sort_by_key(|e| e.seq);
        sorted.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::{Status, TrajectoryStep};
    use crate::rng::{stream, Domain};
    use crate::synthworld::{Category, EntitySpec, PromptSpec, Scene};
    use crate::verifier::ScoreVector;

    fn prompt() -> PromptSpec {
        PromptSpec {
            id: 0,
            category: Category::SingleObject,
            entities: vec![EntitySpec { object_id: 0, color_id: None, required_count: 1, relation: None }],
        }
    }

    fn pair(tag: usize) -> PreferencePair {
        PreferencePair { prompt: prompt(), rejected: Scene::new(vec![]), chosen: Scene::new(vec![]), margin: 1.0, step: tag }
    }

    fn traj(first: f64, last: f64, satisfied: bool) -> Trajectory {
        let step = |a: f64, i| TrajectoryStep { scene: Scene::new(vec![]), scores: ScoreVector::new(vec![a], i), critique: None };
        Trajectory {
            prompt: prompt(),
            steps: vec![step(first, 0), step(last, 1)],
            status: if satisfied { Status::SatisfiedAt(1) } else { Status::Exhausted },
        }
    }

    #[test]
    fn fresh_buffer_stats_are_zero() {
        let b = ReplayBuffer::new(4);
        assert_eq!(b.stats(), ReplayStats { size: 0, admitted: 0, evicted: 0, mean_progress: 0.0 });
    }

    #[test]
    fn exhausted_admits_nothing_and_satisfied_passes_through() {
        let mut b = ReplayBuffer::new(16);
        assert_eq!(b.admit(&traj(0.0, 0.5, false), &[pair(0)]), 0);
        assert_eq!(b.admit(&traj(0.0, 1.0, true), &[pair(0), pair(1), pair(2)]), 3);
        assert_eq!(b.stats().admitted, 3);
        assert_eq!(b.admit(&traj(1.0, 1.0, true), &[pair(0)]), 0);
    }

    #[test]
    fn evicts_least_progress() {
        let mut b = ReplayBuffer::new(2);
        for p in [0.3, 0.5, 0.8] {
            b.insert(pair(0), p);
        }
        let mut kept: Vec<f64> = b.entries().iter().map(|e| e.progress).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![0.5, 0.8]);
        let s = b.stats();
        assert_eq!((s.admitted - s.evicted) as usize, s.size);
        assert!((s.mean_progress - 0.65).abs() < 1e-15);
    }

    #[test]
    fn ties_evict_oldest() {
        let mut b = ReplayBuffer::new(2);
        for tag in 0..3 {
            b.insert(pair(tag), 0.5);
        }
        let mut tags: Vec<usize> = b.entries().iter().map(|e| e.pair.step).collect();
        tags.sort();
        assert_eq!(tags, vec![1, 2]);
    }

    #[test]
    fn sampling_modes() {
        let mut rng = stream(0, Domain::Burst, 0);
        let mut b = ReplayBuffer::new(200);
        assert!(b.sample_batch(4, &mut rng).is_empty());
        b.insert(pair(7), 1.0);
        let batch = b.sample_batch(2, &mut rng);
        assert_eq!(batch.len(), 2);
        assert!(batch.iter().all(|p| p.step == 7));
        let mut b = ReplayBuffer::new(200);
        for i in 0..100 {
            b.insert(pair(i), 1.0);
        }
        let mut tags: Vec<usize> = b.sample_batch(16, &mut rng).iter().map(|p| p.step).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 16);
        let a: Vec<usize> = b.clone().sample_batch(16, &mut stream(1, Domain::Burst, 0)).iter().map(|p| p.step).collect();
        let c: Vec<usize> = b.clone().sample_batch(16, &mut stream(1, Domain::Burst, 0)).iter().map(|p| p.step).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn export_is_ordered_jsonl() {
        let mut b = ReplayBuffer::new(8);
        b.insert(pair(0), 0.2);
        b.insert(pair(1), 0.4);
        let text = b.to_jsonl();
        let seqs: Vec<u64> = text.lines().map(|l| serde_json::from_str::<ReplayEntry>(l).unwrap().seq).collect();
        assert_eq!(seqs, vec![0, 1]);
    }
}
