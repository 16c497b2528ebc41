//! Synthetic two-domain corpus.
//!
//! Both domains are first-order character grammars producing space-separated
//! words. They share the letters `i..=p` but disagree on what follows them:
//!
//! | domain | alphabet         | successor rule (p = 0.8)      | word length |
//! |--------|------------------|-------------------------------|-------------|
//! | `A`    | `a..=p`          | next letter, wrapping p → a   | 3..=7       |
//! | `B`    | `i..=x`          | previous letter, wrapping i → x | 2..=5     |
//!
//! The first letter of each word is uniform over the domain alphabet; with
//! probability 0.2 any later letter is also uniform instead of following the
//! successor rule. Documents are exactly `seq_len` bytes, cut mid-word if
//! needed. A model fit on `A` therefore assigns `B` text a strictly higher
//! loss: half of `B`'s letters never occur in `A`, and the shared letters
//! transition the opposite way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_domain: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Validation documents per domain: a tenth of the training count, at
    /// least one.
    pub fn val_per_domain(&self) -> usize {
        (self.n_per_domain / 10).max(1)
    }
}

struct Grammar {
    name: &'static str,
    alphabet: &'static [u8],
    forward: bool,
    follow_prob: f64,
    word_len: (usize, usize),
}

const GRAMMARS: [Grammar; 2] = [
    Grammar {
        name: "A",
        alphabet: b"abcdefghijklmnop",
        forward: true,
        follow_prob: 0.8,
        word_len: (3, 7),
    },
    Grammar {
        name: "B",
        alphabet: b"ijklmnopqrstuvwx",
        forward: false,
        follow_prob: 0.8,
        word_len: (2, 5),
    },
];

impl Grammar {
    fn successor(&self, letter: u8) -> u8 {
        let n = self.alphabet.len();
        let pos = self
            .alphabet
            .iter()
            .position(|&c| c == letter)
            .expect("letter from own alphabet");
        let next = if self.forward { (pos + 1) % n } else { (pos + n - 1) % n };
        self.alphabet[next]
    }

    fn sample(&self, len: usize, rng: &mut impl Rng) -> String {
        let mut out = Vec::with_capacity(len + 8);
        while out.len() < len {
            if !out.is_empty() {
                out.push(b' ');
            }
            let word_len = rng.random_range(self.word_len.0..=self.word_len.1);
            let mut letter = self.alphabet[rng.random_range(0..self.alphabet.len())];
            out.push(letter);
            for _ in 1..word_len {
                letter = if rng.random_bool(self.follow_prob) {
                    self.successor(letter)
                } else {
                    self.alphabet[rng.random_range(0..self.alphabet.len())]
                };
                out.push(letter);
            }
        }
        out.truncate(len);
        String::from_utf8(out).expect("ascii")
    }
}

/// Emits train documents (all of `A`, then all of `B`) followed by val
/// documents in the same domain order.
///
/// # Panics
/// If `n_per_domain < 1` or `seq_len < 2`.
pub fn synth_corpus(spec: &SynthSpec) -> Corpus {
    assert!(spec.n_per_domain >= 1, "n_per_domain must be at least 1");
    assert!(spec.seq_len >= 2, "seq_len must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::with_capacity(2 * (spec.n_per_domain + spec.val_per_domain()));
    for (split, count) in [
        (Split::Train, spec.n_per_domain),
        (Split::Val, spec.val_per_domain()),
    ] {
        for grammar in &GRAMMARS {
            for i in 0..count {
                let text = grammar.sample(spec.seq_len, &mut rng);
                let id = format!("{}-{}-{:06}", grammar.name, split, i);
                docs.push(Document::new(id, text, grammar.name, split));
            }
        }
    }
    Corpus::new(docs)
}
