use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::train::{EvalOutcome, Experiment, RunMetrics};
use crate::attention::Encoder;
use crate::error::{Error, Result};
use crate::posembed::Extrapolation;
use crate::tensor::Tensor;

/// Band half-width used when summarizing attention locality.
pub const BAND_RADIUS: usize = 4;

/// Final accuracies of one clipping distance across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    /// `(seed, final per-length accuracy)` in seed order.
    pub runs: Vec<(u64, BTreeMap<usize, EvalOutcome>)>,
}

impl SweepRow {
    /// Mean accuracy at `len` over seeds; `None` if any seed has no accuracy there.
    pub fn mean_at(&self, len: usize) -> Option<f64> {
        let mut sum = 0.0;
        for (_, acc) in &self.runs {
            sum += acc.get(&len)?.accuracy()?;
        }
        (!self.runs.is_empty()).then(|| sum / self.runs.len() as f64)
    }
}

/// Trains one model per `(k, seed)` pair, at most `workers` at a time.
/// Each worker owns its model; rows come back ordered by `k`.
pub fn sweep_k(base: &Experiment, ks: &[usize], seeds: &[u64], workers: usize) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for &k in ks {
        let mut exp = base.clone();
        exp.encoder.method.clip_k = Some(k);
        exp.encoder.method.validate(exp.encoder.max_len)?;
        for &seed in seeds {
            let mut e = exp.clone();
            e.seed = seed;
            jobs.push((k, e));
        }
    }
    let results = run_parallel(&jobs.iter().map(|(_, e)| e.clone()).collect::<Vec<_>>(), workers)?;
    let mut rows: BTreeMap<usize, SweepRow> = BTreeMap::new();
    for ((k, exp), metrics) in jobs.into_iter().zip(results) {
        let acc = metrics.final_accuracy().cloned().unwrap_or_default();
        rows.entry(k)
            .or_insert_with(|| SweepRow { k, runs: Vec::new() })
            .runs
            .push((exp.seed, acc));
    }
    Ok(rows.into_values().collect())
}

/// Runs experiments on up to `workers` threads, returning metrics in input
/// order. The first error (by input order) is returned.
pub fn run_parallel(experiments: &[Experiment], workers: usize) -> Result<Vec<RunMetrics>> {
    let workers = workers.clamp(1, experiments.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunMetrics>>>> = Mutex::new(vec![None; experiments.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= experiments.len() {
                    break;
                }
                let out = experiments[i].run().map(|(_, m)| m);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job runs"))
        .collect()
}

/// Accuracy-vs-k table as CSV: one row per k, one column per eval length
/// holding the seed mean (`capacity_error` when undefined).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let lens: Vec<usize> = rows
        .first()
        .and_then(|r| r.runs.first())
        .map(|(_, acc)| acc.keys().copied().collect())
        .unwrap_or_default();
    let mut out = String::from("k");
    for len in &lens {
        let _ = write!(out, ",acc_len_{len}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{}", row.k);
        for &len in &lens {
            match row.mean_at(len) {
                Some(a) => {
                    let _ = write!(out, ",{a}");
                }
                None => out.push_str(",capacity_error"),
            }
        }
        out.push('\n');
    }
    out
}

/// Head-averaged post-softmax attention of `layer` for one sequence (L×L).
pub fn export_attention(model: &Encoder, tokens: &[usize], layer: usize) -> Result<Tensor> {
    let maps = model.attention_maps(tokens, layer, None, Extrapolation::Saturate)?;
    let heads = maps.len();
    if heads == 0 {
        return Err(Error::Bounds("encoder has no attention heads".into()));
    }
    let mut avg = Tensor::zeros(maps[0].1.shape());
    for (_, w) in &maps {
        avg.add_assign(w)?;
    }
    Ok(avg.scale(1.0 / heads as f64))
}

/// Mean over query rows of the attention mass on keys with `|j - i| <= radius`.
pub fn band_mass(weights: &Tensor, radius: usize) -> Result<f64> {
    let (rows, cols) = weights.dims2()?;
    let mut total = 0.0;
    for i in 0..rows {
        let row = weights.row(i);
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(cols - 1);
        if lo < cols {
            total += row[lo..=hi].iter().sum::<f64>();
        }
    }
    Ok(total / rows as f64)
}

/// Band mass of uniform attention over `len` keys, averaged over rows.
pub fn uniform_band_mass(len: usize, radius: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..len {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(len - 1);
        total += (hi - lo + 1) as f64 / len as f64;
    }
    total / len as f64
}

/// Attention heatmap as CSV: header `query,key_0,...`, one row per query.
pub fn attention_csv(weights: &Tensor) -> String {
    let cols = weights.cols();
    let mut out = String::from("query");
    for c in 0..cols {
        let _ = write!(out, ",key_{c}");
    }
    out.push('\n');
    for r in 0..weights.rows() {
        let _ = write!(out, "{r}");
        for v in weights.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncoderConfig;
    use crate::posembed::{MethodKind, PositionMethod};
    use crate::tasks::{Schedule, TaskSpec};
    use crate::tensor::OptimizerConfig;

    fn base() -> Experiment {
        Experiment {
            encoder: EncoderConfig::new(1, 1, 4, 8, 5, PositionMethod::new(MethodKind::Method4)),
            task: TaskSpec::offset_copy(5, 1, (4, 6), vec![6, 12]),
            optimizer: OptimizerConfig::adam(1e-2),
            schedule: Schedule {
                epochs: 1,
                steps_per_epoch: 3,
                batch_size: 2,
                eval_batch: 2,
            },
            seed: 0,
        }
    }

    #[test]
    fn sweep_is_ordered_and_worker_independent() {
        let a = sweep_k(&base(), &[7, 2], &[1, 2], 1).unwrap();
        let b = sweep_k(&base(), &[7, 2], &[1, 2], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 7]);
        assert_eq!(a[0].runs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2]);
        let csv = sweep_csv(&a);
        assert!(csv.starts_with("k,acc_len_6,acc_len_12\n2,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn sweep_rejects_out_of_range_k() {
        assert!(matches!(sweep_k(&base(), &[8], &[1], 1), Err(Error::Config(_))));
        assert!(matches!(sweep_k(&base(), &[0], &[1], 1), Err(Error::Config(_))));
    }

    #[test]
    fn exported_attention_is_row_stochastic() {
        let model = Encoder::new(base().encoder, 4).unwrap();
        let w = export_attention(&model, &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0], 0).unwrap();
        assert_eq!(w.shape(), &[11, 11]);
        for r in 0..11 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(export_attention(&model, &[0, 1], 1), Err(Error::Bounds(_))));
    }

    #[test]
    fn band_mass_cases() {
        let eye = Tensor::eye(6);
        assert_eq!(band_mass(&eye, 0).unwrap(), 1.0);
        let uniform = Tensor::full(&[10, 10], 0.1);
        assert!((band_mass(&uniform, 4).unwrap() - uniform_band_mass(10, 4)).abs() < 1e-12);
        // Interior rows of a long sequence see 9 of L keys.
        assert!((uniform_band_mass(1000, 4) - 9.0 / 1000.0).abs() < 1e-4);
        assert!(uniform_band_mass(32, 4) <= 9.0 / 32.0);
    }

    #[test]
    fn attention_csv_layout() {
        let t = Tensor::from_rows(&[vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        assert_eq!(attention_csv(&t), "query,key_0,key_1\n0,0.25,0.75\n1,1,0\n");
    }
}
