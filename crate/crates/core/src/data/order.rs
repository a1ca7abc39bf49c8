use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AttributeLabels, AttributeSequence, AttributeVocab, Granularity};
use crate::error::{JrlError, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OrderKind {
    RareFirst,
    FrequentFirst,
    TopDown,
    BottomUp,
    GlobalLocal,
    LocalGlobal,
    Random { seed: u64 },
}

impl fmt::Display for OrderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderKind::RareFirst => write!(f, "rare_first"),
            OrderKind::FrequentFirst => write!(f, "frequent_first"),
            OrderKind::TopDown => write!(f, "top_down"),
            OrderKind::BottomUp => write!(f, "bottom_up"),
            OrderKind::GlobalLocal => write!(f, "global_local"),
            OrderKind::LocalGlobal => write!(f, "local_global"),
            OrderKind::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

/// A total emission order over attribute indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderSpec {
    #[serde(flatten)]
    pub kind: OrderKind,
    pub permutation: Vec<usize>,
}

impl OrderSpec {
    pub fn new(kind: OrderKind, permutation: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(JrlError::InvalidData(format!("order {kind} is not a permutation")));
            }
        }
        Ok(OrderSpec { kind, permutation })
    }

    pub fn identity(n_attr: usize) -> Self {
        OrderSpec {
            kind: OrderKind::RareFirst,
            permutation: (0..n_attr).collect(),
        }
    }

    pub fn random(n_attr: usize, seed: u64) -> Self {
        let mut permutation: Vec<usize> = (0..n_attr).collect();
        SeededRng::new(seed).shuffle(&mut permutation);
        OrderSpec {
            kind: OrderKind::Random { seed },
            permutation,
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }
}

fn sorted_by(n: usize, mut key: impl FnMut(usize, usize) -> std::cmp::Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Stable sort keeps ascending index among equal keys.
    idx.sort_by(|&a, &b| key(a, b));
    idx
}

/// The ensemble's emission orders: rare-first, frequent-first, top-down,
/// bottom-up, global-local, local-global and `n_random` random permutations
/// seeded `base_seed, base_seed + 1, …`. Orders whose metadata is missing are
/// replaced by further random permutations, so the count is always `6 + n_random`.
pub fn build_orders(vocab: &AttributeVocab, n_random: usize, base_seed: u64) -> Vec<OrderSpec> {
    let n = vocab.len();
    let freq = &vocab.train_frequency;
    let asc = |a: usize, b: usize| freq[a].total_cmp(&freq[b]);
    let desc = |a: usize, b: usize| freq[b].total_cmp(&freq[a]);

    let mut out = vec![
        OrderSpec {
            kind: OrderKind::RareFirst,
            permutation: sorted_by(n, asc),
        },
        OrderSpec {
            kind: OrderKind::FrequentFirst,
            permutation: sorted_by(n, desc),
        },
    ];
    let mut missing = 0u64;

    match &vocab.region_hint {
        Some(hint) => {
            out.push(OrderSpec {
                kind: OrderKind::TopDown,
                permutation: sorted_by(n, |a, b| hint[a].cmp(&hint[b])),
            });
            out.push(OrderSpec {
                kind: OrderKind::BottomUp,
                permutation: sorted_by(n, |a, b| hint[b].cmp(&hint[a])),
            });
        }
        None => missing += 2,
    }

    match &vocab.granularity {
        Some(gran) => {
            let rank = |g: Granularity, global_first: bool| match (g, global_first) {
                (Granularity::Global, true) | (Granularity::Local, false) => 0u8,
                _ => 1u8,
            };
            out.push(OrderSpec {
                kind: OrderKind::GlobalLocal,
                permutation: sorted_by(n, |a, b| {
                    rank(gran[a], true).cmp(&rank(gran[b], true)).then(desc(a, b))
                }),
            });
            out.push(OrderSpec {
                kind: OrderKind::LocalGlobal,
                permutation: sorted_by(n, |a, b| {
                    rank(gran[a], false).cmp(&rank(gran[b], false)).then(desc(a, b))
                }),
            });
        }
        None => missing += 2,
    }

    let total_random = n_random as u64 + missing;
    for s in 0..total_random {
        out.push(OrderSpec::random(n, base_seed.wrapping_add(s)));
    }
    out
}

/// Present attributes in emission order; the stop token is implied.
pub fn labels_to_sequence(labels: &AttributeLabels, order: &OrderSpec) -> Result<AttributeSequence> {
    if labels.len() != order.len() {
        return Err(JrlError::DimensionMismatch {
            context: "labels vs order",
            expected: order.len(),
            found: labels.len(),
        });
    }
    let attrs = order
        .permutation
        .iter()
        .copied()
        .filter(|&a| labels[a] != 0)
        .collect();
    AttributeSequence::new(attrs, labels.len())
}

pub fn sequence_to_labels(seq: &AttributeSequence, n_attr: usize) -> Result<AttributeLabels> {
    let mut labels = vec![0u8; n_attr];
    for &a in seq.attrs() {
        if a >= n_attr {
            return Err(JrlError::MalformedSequence(format!(
                "token {a} out of range for {n_attr} attributes"
            )));
        }
        labels[a] = 1;
    }
    Ok(labels)
}
