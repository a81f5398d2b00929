use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// Ranked database items, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedResult {
    pub hits: Vec<(usize, f64)>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<usize> {
        self.hits.iter().map(|&(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Orders candidates so that "greater" means "ranks earlier": higher score, then lower id.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    id: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// The `k` highest scores (all of them if `k ≥ N`), descending, ties to the lower id.
///
/// Keeps a bounded min-heap of the current best `k`, so the cost is `O(N log k)`.
pub fn top_k(scores: &[f64], k: usize) -> RankedResult {
    let k = k.min(scores.len());
    if k == 0 {
        return RankedResult::default();
    }
    let mut heap: BinaryHeap<Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (id, &score) in scores.iter().enumerate() {
        let c = Candidate { score, id };
        if heap.len() < k {
            heap.push(Reverse(c));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if c > *worst {
                heap.pop();
                heap.push(Reverse(c));
            }
        }
    }
    let mut best: Vec<Candidate> = heap.into_iter().map(|Reverse(c)| c).collect();
    best.sort_unstable_by(|a, b| b.cmp(a));
    RankedResult {
        hits: best.into_iter().map(|c| (c.id, c.score)).collect(),
    }
}
