//! Synthetic sequence tasks with a difficulty knob `K`.
//!
//! Token ids `0..vocab-2` are values; `vocab-2` is a separator and
//! `vocab-1` a query marker. Every example predicts one or more target
//! tokens from the logits at its answer positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// `[a_1 … a_K, QUERY] → (Σ a_i) mod m`.
    ModularSum,
    /// `K` objects start at positions `0..K`; the sequence lists swaps of
    /// two positions, then `QUERY o`; the answer is where object `o` ends.
    ObjectTracking,
    /// `[x_1 … x_K, SEP, x_1 … x_{K-1}]`; positions `K..2K` predict
    /// `x_1 … x_K`.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub k: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Modulus for `modular_sum`; defaults to the number of value tokens.
    pub modulus: Option<usize>,
    /// Swap count for `object_tracking`; defaults to `K`.
    pub swaps: Option<usize>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            family: TaskFamily::ModularSum,
            k: 3,
            train_size: 2000,
            eval_size: 500,
            seed: 0,
            modulus: None,
            swaps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub answer_positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TaskSpec {
    /// Sequence length of every generated example.
    pub fn seq_len(&self) -> usize {
        match self.family {
            TaskFamily::ModularSum => self.k + 1,
            TaskFamily::ObjectTracking => 2 * self.swaps.unwrap_or(self.k) + 2,
            TaskFamily::Copy => 2 * self.k,
        }
    }

    pub fn validate(&self, vocab: usize, max_seq: usize) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("train_size and eval_size must be >= 1".into()));
        }
        if vocab < 4 {
            return Err(Error::Config(format!("vocab {vocab} leaves no room for value tokens")));
        }
        let values = vocab - 2;
        let min_k = if self.family == TaskFamily::Copy { 1 } else { 2 };
        if self.k < min_k {
            return Err(Error::Config(format!("difficulty K={} below {min_k}", self.k)));
        }
        match self.family {
            TaskFamily::ModularSum => {
                let m = self.modulus.unwrap_or(values);
                if m < 2 || m > values {
                    return Err(Error::Config(format!("modulus {m} outside [2, {values}]")));
                }
            }
            TaskFamily::ObjectTracking if self.k > values => {
                return Err(Error::Config(format!("vocab {vocab} too small for K={} objects", self.k)));
            }
            _ => {}
        }
        if self.seq_len() > max_seq {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_seq {max_seq}",
                self.seq_len()
            )));
        }
        Ok(())
    }
}

/// `[operands…, query]` with target `Σ operands mod m`.
pub fn modular_sum_example(operands: &[usize], m: usize, query: usize) -> Example {
    let mut tokens = operands.to_vec();
    tokens.push(query);
    Example {
        answer_positions: vec![operands.len()],
        targets: vec![operands.iter().sum::<usize>() % m],
        tokens,
    }
}

fn modular_sum(rng: &mut ChaCha8Rng, k: usize, m: usize, query: usize) -> Example {
    let operands: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
    modular_sum_example(&operands, m, query)
}

fn object_tracking(rng: &mut ChaCha8Rng, k: usize, swaps: usize, query: usize) -> Example {
    let mut position_of: Vec<usize> = (0..k).collect();
    let mut object_at: Vec<usize> = (0..k).collect();
    let mut tokens = Vec::with_capacity(2 * swaps + 2);
    for _ in 0..swaps {
        let a = rng.random_range(0..k);
        let b = (a + rng.random_range(1..k)) % k;
        tokens.extend([a, b]);
        let (oa, ob) = (object_at[a], object_at[b]);
        object_at.swap(a, b);
        position_of[oa] = b;
        position_of[ob] = a;
    }
    let obj = rng.random_range(0..k);
    tokens.extend([query, obj]);
    Example {
        answer_positions: vec![tokens.len() - 1],
        targets: vec![position_of[obj]],
        tokens,
    }
}

fn copy(rng: &mut ChaCha8Rng, k: usize, values: usize, sep: usize) -> Example {
    let xs: Vec<usize> = (0..k).map(|_| rng.random_range(0..values)).collect();
    let mut tokens = xs.clone();
    tokens.push(sep);
    tokens.extend_from_slice(&xs[..k - 1]);
    Example {
        answer_positions: (k..2 * k).collect(),
        targets: xs,
        tokens,
    }
}

/// Deterministic `(train, eval)` sets for `spec` over a `vocab`-token
/// alphabet.
pub fn generate_task(spec: &TaskSpec, vocab: usize, max_seq: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate(vocab, max_seq)?;
    let values = vocab - 2;
    let (sep, query) = (vocab - 2, vocab - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let one = |rng: &mut ChaCha8Rng| match spec.family {
        TaskFamily::ModularSum => modular_sum(rng, spec.k, spec.modulus.unwrap_or(values), query),
        TaskFamily::ObjectTracking => object_tracking(rng, spec.k, spec.swaps.unwrap_or(spec.k), query),
        TaskFamily::Copy => copy(rng, spec.k, values, sep),
    };
    let train = (0..spec.train_size).map(|_| one(&mut rng)).collect();
    let eval = (0..spec.eval_size).map(|_| one(&mut rng)).collect();
    Ok((train, eval))
}
