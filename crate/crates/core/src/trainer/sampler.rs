use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One batch drawn from an epoch permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    /// 0-based epoch the batch belongs to.
    pub epoch: u64,
    /// Corpus indices of the retained documents, in permutation order.
    pub kept: Vec<usize>,
    /// Every index the batch covers, retained or not, in permutation order.
    pub covered: Vec<usize>,
}

/// Epoch-shuffled sampling without replacement.
///
/// Each epoch permutes all `n` corpus indices with the seeded generator and
/// walks the permutation; a batch ends once it holds `batch_size` retained
/// indices or the permutation runs out, so the last batch of an epoch may be
/// short and every retained document is seen exactly once per epoch.
/// Restricting to a retained subset filters the same permutation, which is
/// what makes subset training and zero-weight full-corpus training share
/// one schedule.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    keep: Vec<bool>,
    kept_total: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self::restricted(vec![true; n], batch_size, seed)
    }

    /// Sampler over the indices with `keep[i]`.
    pub fn restricted(keep: Vec<bool>, batch_size: usize, seed: u64) -> Self {
        let kept_total = keep.iter().filter(|&&k| k).count();
        let mut s = EpochSampler {
            order: (0..keep.len()).collect(),
            keep,
            kept_total,
            batch_size: batch_size.max(1),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn kept_total(&self) -> usize {
        self.kept_total
    }

    /// Next batch; `None` only when nothing is retained.
    pub fn next_span(&mut self) -> Option<Span> {
        if self.kept_total == 0 {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let epoch = self.epoch;
        let mut kept = Vec::with_capacity(self.batch_size);
        let mut covered = Vec::with_capacity(self.batch_size);
        while self.pos < self.order.len() && kept.len() < self.batch_size {
            let i = self.order[self.pos];
            self.pos += 1;
            covered.push(i);
            if self.keep[i] {
                kept.push(i);
            }
        }
        // trailing dropped indices belong to the batch that closes the epoch
        if !self.order[self.pos..].iter().any(|&i| self.keep[i]) {
            covered.extend_from_slice(&self.order[self.pos..]);
            self.pos = self.order.len();
        }
        Some(Span { epoch, kept, covered })
    }
}
