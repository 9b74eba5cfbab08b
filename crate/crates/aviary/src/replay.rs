//! Bounded FIFO experience store with uniform sampling and a global action
//! counter. The orchestrator hosts one of these behind the wire endpoints
//! `PushExperiences` / `SampleBatch` / `ReplayStats`.

use crate::dqn::{ActionIndex, StackedState};
use rand::Rng;
use std::collections::VecDeque;
use thiserror::Error;

/// One transition: (s, a, s', r, done). The done flag gates bootstrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: StackedState,
    pub action: ActionIndex,
    pub next_state: StackedState,
    pub reward: f32,
    pub done: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperienceError {
    #[error("reward {0} not in the allowed set")]
    RewardOutOfSet(f32),
    #[error("non-finite value in experience")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("buffer not ready: {len} of {want} experiences")]
    NotReady { len: usize, want: usize },
}

/// Consistent snapshot of the buffer counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayStatsSnapshot {
    pub len: usize,
    pub capacity: usize,
    /// Lifetime total of actions reported (accepted pushes).
    pub a_t: u64,
    /// Lifetime total of accepted inserts (same as a_t: one action per
    /// experience).
    pub insert_count: u64,
}

/// Outcome of a push: how many landed, and which indices were rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PushReport {
    pub accepted: usize,
    pub rejected: Vec<(usize, ExperienceError)>,
}

/// Bounded FIFO buffer. Eviction is strictly oldest-first; sampling is
/// uniform with replacement and never mutates.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    ring: VecDeque<Experience>,
    insert_count: u64,
    a_t: u64,
    /// When set, rewards outside this set are rejected at ingest.
    allowed_rewards: Option<Vec<f32>>,
}

impl ReplayBuffer {
    /// Buffer for the collision-avoidance task: rewards validated against
    /// {-100, +3}.
    pub fn new(capacity: usize) -> Self {
        Self::with_reward_set(capacity, Some(vec![-100.0, 3.0]))
    }

    /// Buffer with a custom (or no) reward whitelist, for other tasks.
    pub fn with_reward_set(capacity: usize, allowed_rewards: Option<Vec<f32>>) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self {
            capacity,
            ring: VecDeque::with_capacity(capacity.min(1 << 20)),
            insert_count: 0,
            a_t: 0,
            allowed_rewards,
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.capacity
    }

    fn validate(&self, e: &Experience) -> Result<(), ExperienceError> {
        if !e.state.is_finite() || !e.next_state.is_finite() || !e.reward.is_finite() {
            return Err(ExperienceError::NonFinite);
        }
        if let Some(set) = &self.allowed_rewards {
            if !set.contains(&e.reward) {
                return Err(ExperienceError::RewardOutOfSet(e.reward));
            }
        }
        Ok(())
    }

    /// Append items in order, evicting oldest-first past capacity.
    /// Malformed experiences are rejected individually with their index;
    /// every accepted item counts toward the action total.
    pub fn push(&mut self, items: Vec<Experience>) -> PushReport {
        let mut report = PushReport::default();
        for (idx, item) in items.into_iter().enumerate() {
            match self.validate(&item) {
                Ok(()) => {
                    if self.ring.len() == self.capacity {
                        self.ring.pop_front();
                    }
                    self.ring.push_back(item);
                    self.insert_count += 1;
                    self.a_t += 1;
                    report.accepted += 1;
                }
                Err(e) => report.rejected.push((idx, e)),
            }
        }
        report
    }

    /// Draw `n` experiences uniformly with replacement. Requires at least
    /// `n` stored items; otherwise the caller gets a not-ready signal and
    /// should wait.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Experience>, SampleError> {
        if self.ring.len() < n {
            return Err(SampleError::NotReady { len: self.ring.len(), want: n });
        }
        Ok((0..n).map(|_| self.ring[rng.gen_range(0..self.ring.len())].clone()).collect())
    }

    pub fn stats(&self) -> ReplayStatsSnapshot {
        ReplayStatsSnapshot {
            len: self.ring.len(),
            capacity: self.capacity,
            a_t: self.a_t,
            insert_count: self.insert_count,
        }
    }

    /// Iterate stored experiences oldest to newest (tests and diagnostics).
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.ring.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::DepthImage;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    /// A marker experience; the tag rides in velocity[0].
    fn tagged(tag: f32) -> Experience {
        let s = StackedState {
            image_now: DepthImage::constant(1.0),
            image_prev: DepthImage::constant(1.0),
            velocity: [tag, 0.0, 0.0],
        };
        Experience {
            state: s.clone(),
            action: ActionIndex::LEFT,
            next_state: s,
            reward: 3.0,
            done: false,
        }
    }

    fn tag_of(e: &Experience) -> f32 {
        e.state.velocity[0]
    }

    #[test]
    fn fifo_retains_most_recent() {
        let mut buf = ReplayBuffer::new(5);
        buf.push((0..7).map(|i| tagged(i as f32)).collect());
        assert_eq!(buf.len(), 5);
        let tags: Vec<f32> = buf.iter().map(tag_of).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_push_is_noop() {
        let mut buf = ReplayBuffer::new(5);
        let report = buf.push(Vec::new());
        assert_eq!(report.accepted, 0);
        assert_eq!(buf.stats(), ReplayStatsSnapshot { len: 0, capacity: 5, a_t: 0, insert_count: 0 });
    }

    #[test]
    fn rejects_malformed_with_index() {
        let mut buf = ReplayBuffer::new(5);
        let mut bad_reward = tagged(1.0);
        bad_reward.reward = 7.0;
        let mut bad_vel = tagged(2.0);
        bad_vel.state.velocity[1] = f32::INFINITY;
        let report = buf.push(vec![tagged(0.0), bad_reward, bad_vel, tagged(3.0)]);
        assert_eq!(report.accepted, 2);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.rejected[0].0, 1);
        assert!(matches!(report.rejected[0].1, ExperienceError::RewardOutOfSet(_)));
        assert_eq!(report.rejected[1].0, 2);
        assert!(matches!(report.rejected[1].1, ExperienceError::NonFinite));
        assert_eq!(buf.stats().a_t, 2);
    }

    #[test]
    fn custom_reward_set_accepts_other_tasks() {
        let mut buf = ReplayBuffer::with_reward_set(5, None);
        let mut e = tagged(0.0);
        e.reward = -5.0;
        assert_eq!(buf.push(vec![e]).accepted, 1);
    }

    #[test]
    fn sample_not_ready_below_batch_size() {
        let mut buf = ReplayBuffer::new(100);
        buf.push((0..31).map(|i| tagged(i as f32)).collect());
        let mut rng = StdRng::seed_from_u64(0);
        assert_eq!(
            buf.sample(32, &mut rng).unwrap_err(),
            SampleError::NotReady { len: 31, want: 32 }
        );
    }

    #[test]
    fn sample_of_single_repeated_item() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(vec![tagged(9.0)]);
        let mut rng = StdRng::seed_from_u64(0);
        let batch = buf.sample(1, &mut rng).unwrap();
        assert_eq!(tag_of(&batch[0]), 9.0);
    }

    #[test]
    fn sample_does_not_mutate() {
        let mut buf = ReplayBuffer::new(50);
        buf.push((0..50).map(|i| tagged(i as f32)).collect());
        let before = buf.stats();
        let mut rng = StdRng::seed_from_u64(1);
        buf.sample(32, &mut rng).unwrap();
        buf.sample(32, &mut rng).unwrap();
        assert_eq!(buf.stats(), before);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(100);
        buf.push((0..100).map(|i| tagged(i as f32)).collect());
        let mut rng = StdRng::seed_from_u64(2);
        let mut counts = vec![0usize; 100];
        let draws = 100_000;
        for _ in 0..draws / 50 {
            for e in buf.sample(50, &mut rng).unwrap() {
                counts[tag_of(&e) as usize] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / draws as f64;
            assert!((freq - 0.01).abs() < 0.0015, "item {i} frequency {freq}");
        }
    }

    #[test]
    fn stats_track_counters() {
        let mut buf = ReplayBuffer::new(15_000);
        assert_eq!(
            buf.stats(),
            ReplayStatsSnapshot { len: 0, capacity: 15_000, a_t: 0, insert_count: 0 }
        );
        for _ in 0..3 {
            buf.push(vec![tagged(0.0), tagged(1.0)]);
        }
        let s = buf.stats();
        assert_eq!(s.a_t, 6);
        assert_eq!(s.insert_count, 6);
        assert_eq!(s.len, 6);
    }

    #[test]
    fn len_caps_at_capacity() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..20 {
            buf.push(vec![tagged(i as f32)]);
        }
        assert!(buf.is_full());
        assert_eq!(buf.len(), 8);
        assert_eq!(buf.stats().insert_count, 20);
        let tags: Vec<f32> = buf.iter().map(tag_of).collect();
        assert_eq!(tags, (12..20).map(|i| i as f32).collect::<Vec<_>>());
    }
}
