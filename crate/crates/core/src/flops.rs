//! Compute accounting: 6N FLOPs per trained token, 2N per forward-only
//! token, and closed-form totals for offline curation methods.
//!
//! Everything is integer (`u128`). Gating arithmetic inside the training
//! loop (pooling, cosines against the anchors, sigmoids) costs
//! O(d·|anchors|) per sample against O(N) for a forward pass and is not
//! counted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};

pub fn flops_train_tokens(n_params: u128, tokens: u128) -> u128 {
    6 * n_params * tokens
}

pub fn flops_forward_tokens(n_params: u128, tokens: u128) -> u128 {
    2 * n_params * tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Bm25,
    Embedding,
    Ppl,
    Less,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 5] = [
        SelectionMethod::Random,
        SelectionMethod::Bm25,
        SelectionMethod::Embedding,
        SelectionMethod::Ppl,
        SelectionMethod::Less,
    ];
}

impl FromStr for SelectionMethod {
    type Err = CuratorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(SelectionMethod::Random),
            "bm25" => Ok(SelectionMethod::Bm25),
            "embedding" | "embed" => Ok(SelectionMethod::Embedding),
            "ppl" | "perplexity" => Ok(SelectionMethod::Ppl),
            "less" => Ok(SelectionMethod::Less),
            _ => Err(CuratorError::UnknownMethod(s.to_string())),
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Bm25 => "bm25",
            SelectionMethod::Embedding => "embedding",
            SelectionMethod::Ppl => "ppl",
            SelectionMethod::Less => "less",
        };
        f.write_str(s)
    }
}

/// Constants of the closed-form method totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConstants {
    /// Trained model parameters N.
    pub n_params: u128,
    /// Proxy or encoder parameters N'.
    pub n_prime: u128,
    /// Tokens per sample.
    pub tokens_per_sample: u128,
    /// Pool size P in samples.
    pub pool: u128,
    /// Selected samples D.
    pub selected: u128,
    /// Epochs E.
    pub epochs: u128,
}

impl FlopsConstants {
    /// 7B parameters, 2048 tokens per sample, two epochs; pool and
    /// selection size as given.
    pub fn reference(pool: u128, selected: u128) -> Self {
        FlopsConstants {
            n_params: 7_000_000_000,
            n_prime: 7_000_000_000,
            tokens_per_sample: 2048,
            pool,
            selected,
            epochs: 2,
        }
    }
}

/// `(prep, train)` split of a method total.
pub fn flops_method_terms(method: SelectionMethod, c: &FlopsConstants) -> (u128, u128) {
    let k = c.tokens_per_sample;
    let train = k * 6 * c.n_params * c.selected * c.epochs;
    let prep = match method {
        SelectionMethod::Random | SelectionMethod::Bm25 => 0,
        SelectionMethod::Embedding => k * 2 * c.n_prime * c.pool,
        SelectionMethod::Ppl => k * 2 * c.n_params * c.pool,
        // 1.53 as 153/100, multiplied before the (flooring) division
        SelectionMethod::Less => 153 * k * 6 * c.n_params * c.pool / 100,
    };
    (prep, train)
}

pub fn flops_method_total(method: SelectionMethod, c: &FlopsConstants) -> u128 {
    let (prep, train) = flops_method_terms(method, c);
    prep + train
}

/// An extra forward pass not shared with training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub n_params: u128,
    pub tokens: u128,
}

/// `6N·train_tokens + Σ 2N_e·tokens_e`.
pub fn flops_online_total(train_tokens: u128, n_params: u128, events: &[MetricEvent]) -> u128 {
    flops_train_tokens(n_params, train_tokens)
        + events
            .iter()
            .map(|e| flops_forward_tokens(e.n_params, e.tokens))
            .sum::<u128>()
}

/// Running totals for one run, owned by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub prep: u128,
    pub train: u128,
    pub metrics: u128,
    pub constants: FlopsConstants,
}

impl FlopsLedger {
    pub fn new(constants: FlopsConstants) -> Self {
        FlopsLedger {
            constants,
            ..Default::default()
        }
    }

    pub fn add_prep_forward(&mut self, n_params: u128, tokens: u128) {
        self.prep += flops_forward_tokens(n_params, tokens);
    }

    pub fn add_prep_train(&mut self, n_params: u128, tokens: u128) {
        self.prep += flops_train_tokens(n_params, tokens);
    }

    pub fn add_train(&mut self, tokens: u128) {
        self.train += flops_train_tokens(self.constants.n_params, tokens);
    }

    pub fn add_metric(&mut self, event: MetricEvent) {
        self.metrics += flops_forward_tokens(event.n_params, event.tokens);
    }

    pub fn total(&self) -> u128 {
        self.prep + self.train + self.metrics
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_token_examples() {
        assert_eq!(flops_train_tokens(1000, 1), 6000);
        assert_eq!(flops_train_tokens(1000, 0), 0);
        assert_eq!(flops_train_tokens(7_000_000_000, 2048), 86_016_000_000_000);
        assert_eq!(flops_forward_tokens(1000, 1), 2000);
        assert_eq!(flops_forward_tokens(77, 13) * 3, flops_train_tokens(77, 13));
        assert_eq!(flops_forward_tokens(7_000_000_000, 2048 * 100_000), 2_867_200_000_000_000_000);
    }

    #[test]
    fn method_examples() {
        let c = FlopsConstants::reference(100_000, 10_000);
        assert_eq!(flops_method_total(SelectionMethod::Random, &c), 1_720_320_000_000_000_000);
        assert_eq!(flops_method_total(SelectionMethod::Bm25, &c), 1_720_320_000_000_000_000);
        assert_eq!(
            flops_method_terms(SelectionMethod::Ppl, &c),
            (2_867_200_000_000_000_000, 1_720_320_000_000_000_000)
        );
        assert_eq!(flops_method_total(SelectionMethod::Ppl, &c), 4_587_520_000_000_000_000);
        let none = FlopsConstants { selected: 0, ..c };
        assert_eq!(flops_method_terms(SelectionMethod::Ppl, &none).1, 0);
        assert_eq!(flops_method_total(SelectionMethod::Random, &none), 0);
    }

    #[test]
    fn unknown_method() {
        assert!(matches!("dsir".parse::<SelectionMethod>(), Err(CuratorError::UnknownMethod(_))));
        assert_eq!("LESS".parse::<SelectionMethod>().unwrap(), SelectionMethod::Less);
    }

    #[test]
    fn online_examples() {
        assert_eq!(flops_online_total(640, 1000, &[]), flops_train_tokens(1000, 640));
        let refresh = MetricEvent { n_params: 1_000_000, tokens: 6400 };
        assert_eq!(flops_online_total(0, 1_000_000, &[refresh]), 12_800_000_000);
        let once = flops_online_total(500, 1_000_000, &[refresh]);
        let twice = flops_online_total(500, 1_000_000, &[refresh, refresh]);
        assert_eq!(twice - once, once - flops_train_tokens(1_000_000, 500));
    }

    #[test]
    fn ledger_totals() {
        let mut l = FlopsLedger::new(FlopsConstants { n_params: 10, ..Default::default() });
        l.add_train(3);
        l.add_metric(MetricEvent { n_params: 10, tokens: 5 });
        l.add_prep_forward(4, 1);
        assert_eq!((l.prep, l.train, l.metrics, l.total()), (8, 180, 100, 288));
    }
}
