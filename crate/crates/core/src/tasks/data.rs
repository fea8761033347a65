use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Seed of the fixed token-transition table behind the masked-LM data.
const TRANSITION_SEED: u64 = 0x7ab1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target at position `i` is the input token at `i − offset`.
    OffsetCopy,
    /// Recover tokens hidden behind a mask symbol from their neighbours.
    MaskedLm,
}

/// A synthetic task and the sequence lengths it is trained and evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Signed copy offset (offset-copy only).
    pub offset: i64,
    /// Fraction of positions masked (masked-LM only).
    pub mask_rate: f64,
    /// Inclusive training length range.
    pub train_len: (usize, usize),
    pub eval_lens: Vec<usize>,
}

impl TaskSpec {
    pub fn offset_copy(vocab: usize, offset: i64, train_len: (usize, usize), eval_lens: Vec<usize>) -> Self {
        Self {
            kind: TaskKind::OffsetCopy,
            vocab,
            offset,
            mask_rate: 0.15,
            train_len,
            eval_lens,
        }
    }

    pub fn masked_lm(vocab: usize, mask_rate: f64, train_len: (usize, usize), eval_lens: Vec<usize>) -> Self {
        Self {
            kind: TaskKind::MaskedLm,
            vocab,
            offset: 0,
            mask_rate,
            train_len,
            eval_lens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_len;
        if lo == 0 || lo > hi {
            return Err(Error::Task(format!("invalid training length range {lo}..={hi}")));
        }
        if self.eval_lens.contains(&0) {
            return Err(Error::Task("evaluation lengths must be positive".into()));
        }
        match self.kind {
            TaskKind::OffsetCopy => {
                if self.vocab < 2 {
                    return Err(Error::Task("offset copy needs at least 2 tokens".into()));
                }
                if self.offset.unsigned_abs() as usize >= lo {
                    return Err(Error::Task(format!(
                        "|offset| = {} must be below the shortest training length {lo}",
                        self.offset.unsigned_abs()
                    )));
                }
                if let Some(&l) = self.eval_lens.iter().find(|&&l| l as u64 <= self.offset.unsigned_abs()) {
                    return Err(Error::Task(format!("evaluation length {l} not longer than |offset|")));
                }
            }
            TaskKind::MaskedLm => {
                if self.vocab < 3 {
                    return Err(Error::Task("masked LM needs at least 2 tokens plus the mask symbol".into()));
                }
                if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
                    return Err(Error::Task(format!("mask rate {} outside (0, 1)", self.mask_rate)));
                }
            }
        }
        Ok(())
    }

    /// Reserved mask token of the masked-LM task (the last vocabulary id).
    pub fn mask_token(&self) -> usize {
        self.vocab - 1
    }

    /// Accuracy of always predicting one fixed token.
    pub fn chance_accuracy(&self) -> f64 {
        match self.kind {
            TaskKind::OffsetCopy => 1.0 / self.vocab as f64,
            TaskKind::MaskedLm => 1.0 / (self.vocab - 1) as f64,
        }
    }
}

/// Equal-length sequences with per-position targets and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn flat_targets(&self) -> Vec<usize> {
        self.targets.iter().flatten().copied().collect()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.loss_mask
            .iter()
            .flatten()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn scored_positions(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Sequence source for a [`TaskSpec`].
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    spec: TaskSpec,
    /// Cumulative next-token distribution per previous token (masked LM).
    transitions: Vec<Vec<f64>>,
}

impl TaskGenerator {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let transitions = match spec.kind {
            TaskKind::MaskedLm => transition_table(spec.vocab - 1),
            TaskKind::OffsetCopy => Vec::new(),
        };
        Ok(Self { spec, transitions })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// A batch at a length drawn uniformly from the training range.
    pub fn sample_train(&self, rng: &mut SeededRng, batch: usize) -> Result<Batch> {
        let (lo, hi) = self.spec.train_len;
        let len = rng.between(lo, hi);
        self.generate(rng, batch, len)
    }

    pub fn generate(&self, rng: &mut SeededRng, batch: usize, len: usize) -> Result<Batch> {
        match self.spec.kind {
            TaskKind::OffsetCopy => gen_offset_copy(&self.spec, rng, batch, len),
            TaskKind::MaskedLm => self.gen_masked_lm(rng, batch, len),
        }
    }

    /// Markov-chain text with `mask_rate` of its positions hidden.
    pub fn gen_masked_lm(&self, rng: &mut SeededRng, batch: usize, len: usize) -> Result<Batch> {
        if self.spec.kind != TaskKind::MaskedLm {
            return Err(Error::Task("not a masked-LM task".into()));
        }
        if len == 0 || batch == 0 {
            return Err(Error::Task("empty batch".into()));
        }
        let content = self.spec.vocab - 1;
        let mask = self.spec.mask_token();
        let mut out = Batch {
            inputs: Vec::with_capacity(batch),
            targets: Vec::with_capacity(batch),
            loss_mask: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let mut seq = Vec::with_capacity(len);
            seq.push(rng.below(content));
            for i in 1..len {
                let u = rng.uniform();
                let row = &self.transitions[seq[i - 1]];
                let next = row.iter().position(|&c| u < c).unwrap_or(content - 1);
                seq.push(next);
            }
            let hide: Vec<bool> = (0..len).map(|_| rng.bernoulli(self.spec.mask_rate)).collect();
            let inputs = seq.iter().zip(&hide).map(|(&t, &h)| if h { mask } else { t }).collect();
            out.inputs.push(inputs);
            out.targets.push(seq);
            out.loss_mask.push(hide);
        }
        Ok(out)
    }
}

/// Every token has two favoured successors sharing 90% of the mass; the
/// rest is spread uniformly.
fn transition_table(content: usize) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(TRANSITION_SEED);
    (0..content)
        .map(|_| {
            let mut probs = vec![0.1 / content as f64; content];
            let a = rng.below(content);
            let mut b = rng.below(content);
            if content > 1 {
                while b == a {
                    b = rng.below(content);
                }
            }
            probs[a] += 0.45;
            probs[b] += 0.45;
            let mut acc = 0.0;
            probs
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect()
}

/// Uniform random tokens; `targets[i] = inputs[i − offset]` wherever that
/// index exists, unscored elsewhere.
pub fn gen_offset_copy(spec: &TaskSpec, rng: &mut SeededRng, batch: usize, len: usize) -> Result<Batch> {
    if spec.kind != TaskKind::OffsetCopy {
        return Err(Error::Task("not an offset-copy task".into()));
    }
    if len as u64 <= spec.offset.unsigned_abs() {
        return Err(Error::Task(format!(
            "sequence length {len} must exceed |offset| = {}",
            spec.offset.unsigned_abs()
        )));
    }
    if batch == 0 {
        return Err(Error::Task("empty batch".into()));
    }
    let mut out = Batch {
        inputs: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
        loss_mask: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let inputs: Vec<usize> = (0..len).map(|_| rng.below(spec.vocab)).collect();
        let mut targets = vec![0; len];
        let mut mask = vec![false; len];
        for i in 0..len {
            let src = i as i64 - spec.offset;
            if (0..len as i64).contains(&src) {
                targets[i] = inputs[src as usize];
                mask[i] = true;
            }
        }
        out.inputs.push(inputs);
        out.targets.push(targets);
        out.loss_mask.push(mask);
    }
    Ok(out)
}
