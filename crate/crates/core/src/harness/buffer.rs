use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world_model::Segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_observation: Vec<f64>,
    pub terminated: bool,
    /// Last transition of its episode (terminated or truncated).
    pub episode_end: bool,
    pub episode: u64,
}

/// Fixed-capacity ring of transitions that samples segments lying entirely
/// within one episode.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    /// Physical index of the oldest transition once the ring has wrapped.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay buffer capacity must be positive"));
        }
        Ok(Self { capacity, data: Vec::with_capacity(capacity.min(1 << 16)), head: 0 })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// The `k`-th oldest stored transition.
    pub fn get(&self, k: usize) -> &Transition {
        &self.data[(self.head + k) % self.data.len()]
    }

    /// Whether the `len` transitions starting at logical index `start` form a
    /// segment: same episode, and no episode end before the last one.
    pub fn is_valid_start(&self, start: usize, len: usize) -> bool {
        if len == 0 || start + len > self.data.len() {
            return false;
        }
        let ep = self.get(start).episode;
        (0..len).all(|i| {
            let t = self.get(start + i);
            t.episode == ep && (i + 1 == len || !t.episode_end)
        })
    }

    fn segment_at(&self, start: usize, len: usize) -> Segment {
        let ts: Vec<&Transition> = (0..len).map(|i| self.get(start + i)).collect();
        Segment {
            observations: ts.iter().map(|t| t.observation.clone()).collect(),
            actions: ts.iter().map(|t| t.action.clone()).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            costs: ts.iter().map(|t| t.cost).collect(),
            next_observations: ts.iter().map(|t| t.next_observation.clone()).collect(),
            terminated: ts.iter().map(|t| t.terminated).collect(),
        }
    }

    /// `count` segments of `len` transitions, start indices uniform over all
    /// valid starts. Errors when no valid start exists.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, len: usize, rng: &mut R) -> Result<Vec<Segment>> {
        if self.data.len() < len || len == 0 {
            return Err(Error::Usage(format!("buffer holds {} transitions, cannot sample {len}-step segments", self.data.len())));
        }
        let last = self.data.len() - len;
        let mut valid: Option<Vec<usize>> = None;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let start = match &valid {
                Some(v) => v[rng.random_range(0..v.len())],
                None => {
                    let mut found = None;
                    for _ in 0..64 {
                        let s = rng.random_range(0..=last);
                        if self.is_valid_start(s, len) {
                            found = Some(s);
                            break;
                        }
                    }
                    match found {
                        Some(s) => s,
                        None => {
                            let v: Vec<usize> = (0..=last).filter(|&s| self.is_valid_start(s, len)).collect();
                            if v.is_empty() {
                                return Err(Error::Usage(format!("no {len}-step segment fits inside one episode yet")));
                            }
                            valid = Some(v);
                            continue;
                        }
                    }
                }
            };
            out.push(self.segment_at(start, len));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fill(buf: &mut ReplayBuffer, lengths: &[usize]) {
        let mut step = 0.0;
        for (ep, &n) in lengths.iter().enumerate() {
            for i in 0..n {
                let end = i + 1 == n;
                buf.push(Transition {
                    observation: vec![step],
                    action: vec![ep as f64],
                    reward: 0.0,
                    cost: 0.0,
                    next_observation: vec![step + 1.0],
                    terminated: end && ep % 2 == 0,
                    episode_end: end,
                    episode: ep as u64,
                });
                step += 1.0;
            }
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        fill(&mut buf, &[5]);
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).observation, vec![2.0]);
        assert_eq!(buf.get(2).observation, vec![4.0]);
    }

    #[test]
    fn too_short_episodes_are_a_usage_error() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        fill(&mut buf, &[2, 2, 2]);
        assert!(matches!(buf.sample(1, 3, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn segments_never_cross_episodes(
            lengths in prop::collection::vec(1usize..12, 1..30),
            capacity in 4usize..120,
            len in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut buf = ReplayBuffer::new(capacity).unwrap();
            fill(&mut buf, &lengths);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let any_valid = (0..buf.len()).any(|s| buf.is_valid_start(s, len));
            match buf.sample(16, len, &mut rng) {
                Ok(segs) => {
                    prop_assert!(any_valid);
                    prop_assert_eq!(segs.len(), 16);
                    for s in segs {
                        prop_assert_eq!(s.len(), len);
                        // one episode: identical episode tags in the action slot
                        prop_assert!(s.actions.iter().all(|a| a == &s.actions[0]));
                        // consecutive storage order
                        for w in s.observations.windows(2) {
                            prop_assert_eq!(w[1][0], w[0][0] + 1.0);
                        }
                        // a terminal flag can only sit on the last step
                        prop_assert!(s.terminated[..len - 1].iter().all(|t| !t));
                    }
                }
                Err(_) => prop_assert!(!any_valid),
            }
        }
    }
}
