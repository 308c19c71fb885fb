use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::clock::Clock;

/// Flush once at least `min_count` entries are queued and the oldest one is
/// at least `min_age` old.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPolicy {
    pub min_count: usize,
    pub min_age: Duration,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            min_count: 100,
            min_age: Duration::from_secs(5 * 60),
        }
    }
}

impl BatchPolicy {
    pub fn new(min_count: usize, min_age: Duration) -> Option<Self> {
        (min_count > 0 && !min_age.is_zero()).then_some(Self { min_count, min_age })
    }

    pub fn due(&self, count: usize, oldest_age: Duration) -> bool {
        count >= self.min_count && oldest_age >= self.min_age
    }
}

/// Queue that releases its whole content, shuffled, when the policy allows.
pub struct Batcher<T> {
    policy: BatchPolicy,
    clock: Arc<dyn Clock>,
    rng: Box<dyn RngCore + Send>,
    queue: Vec<T>,
    oldest_ms: Option<u64>,
}

impl<T> Batcher<T> {
    pub fn new(policy: BatchPolicy, clock: Arc<dyn Clock>, rng: Box<dyn RngCore + Send>) -> Self {
        Self {
            policy,
            clock,
            rng,
            queue: Vec::new(),
            oldest_ms: None,
        }
    }

    pub fn policy(&self) -> &BatchPolicy {
        &self.policy
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn oldest_age(&self) -> Duration {
        self.oldest_ms
            .map(|t| Duration::from_millis(self.clock.now_ms().saturating_sub(t)))
            .unwrap_or_default()
    }

    pub fn queued(&self) -> &[T] {
        &self.queue
    }

    /// Adds an entry and flushes if that made the batch due.
    pub fn push(&mut self, item: T) -> Option<Vec<T>> {
        if self.queue.is_empty() {
            self.oldest_ms = Some(self.clock.now_ms());
        }
        self.queue.push(item);
        self.poll()
    }

    /// Flushes if due; call from a timer so age alone can trigger release.
    pub fn poll(&mut self) -> Option<Vec<T>> {
        if !self.policy.due(self.queue.len(), self.oldest_age()) {
            return None;
        }
        let mut batch = std::mem::take(&mut self.queue);
        self.oldest_ms = None;
        batch.shuffle(&mut self.rng);
        Some(batch)
    }
}
