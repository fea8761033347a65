//! Self-checks over randomized tiny instances: finite-difference gradients,
//! the two forms of the pairwise logits, and identity initialization.

use super::logits::{
    logits_m1m2, logits_m3, logits_m4, logits_m4_alt, logits_shaw, logits_vanilla, logits_xlnet, TableView,
    XlnetView,
};
use super::{Encoder, EncoderConfig, ForwardOptions};
use crate::error::{Error, Result};
use crate::posembed::{relative_sinusoid, Extrapolation, MethodKind, PositionMethod, RelTable};
use crate::tensor::{param_gradcheck, GroupError, ParamStore, SeededRng, Tape, Tensor, Var};

/// Finite-difference step used by the checks.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Bound on the relative gradient error.
pub const GRADCHECK_TOL: f64 = 1e-6;

/// Pass rule for one parameter group. Single operations and logits functions
/// must meet the relative bound on every coordinate. Through the whole
/// encoder, coordinates whose gradient is below
/// [`FD_RESOLUTION`](crate::tensor::FD_RESOLUTION) are compared against that
/// floor instead, since f64 evaluation noise alone exceeds the bound there.
pub fn group_passes(g: &GroupError, full_encoder: bool) -> bool {
    if full_encoder {
        g.rel_floored < GRADCHECK_TOL
    } else {
        g.rel < GRADCHECK_TOL
    }
}

/// Replaces every parameter whose name passes `select` with `N(0, std²)` draws.
pub fn randomize<F>(store: &mut ParamStore, std: f64, rng: &mut SeededRng, select: F) -> Result<()>
where
    F: Fn(&str) -> bool,
{
    let ids: Vec<_> = store.ids().filter(|&id| select(store.name(id))).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::randn(&shape, std, rng))?;
    }
    Ok(())
}

/// Names of position parameters: tables and the projected-sinusoid weights
/// and biases.
pub fn is_position_param(name: &str) -> bool {
    name.starts_with("rel_table")
        || name == "abs_table"
        || name.ends_with(".w_r")
        || name.ends_with(".u")
        || name.ends_with(".v")
}

/// Random query/key rows plus the position parameters of `kind` for one
/// layer and head, all held as parameters so they are all gradient-checked.
struct LogitsCase {
    store: ParamStore,
    table: Option<RelTable>,
    len: usize,
    d: usize,
}

impl LogitsCase {
    fn new(kind: MethodKind, len: usize, d: usize, n: usize, clip_k: Option<usize>, rng: &mut SeededRng) -> Result<Self> {
        let mut store = ParamStore::new();
        store.add("q", Tensor::randn(&[len, d], 1.0, rng));
        store.add("k", Tensor::randn(&[len, d], 1.0, rng));
        let method = PositionMethod {
            clip_k: clip_k.filter(|_| kind.accepts_clip()),
            ..PositionMethod::new(kind)
        }
        .with_xlnet_bias(kind == MethodKind::XlnetLike);
        let table = RelTable::new(&mut store, &method, 1, 1, n, d)?;
        if let Some(t) = &table {
            let shape = store.value(t.weights).shape().to_vec();
            store.set_value(t.weights, Tensor::randn(&shape, 1.0, rng))?;
        }
        if kind == MethodKind::XlnetLike {
            store.add("w_r", Tensor::randn(&[d, d], 1.0, rng));
            store.add("u", Tensor::randn(&[d], 1.0, rng));
            store.add("v", Tensor::randn(&[d], 1.0, rng));
        }
        Ok(Self { store, table, len, d })
    }

    fn logits(&self, kind: MethodKind, alt: bool, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let find = |name: &str| store.find(name).expect("case parameter");
        let q = tape.param(store, find("q"));
        let k = tape.param(store, find("k"));
        let view = self.table.as_ref().map(|t| TableView {
            table: t,
            node: tape.param(store, t.weights),
            layer: 0,
            head: 0,
            policy: Extrapolation::Saturate,
        });
        match kind {
            MethodKind::Absolute | MethodKind::Sinusoid => logits_vanilla(tape, q, k),
            MethodKind::Shaw => logits_shaw(tape, q, k, view.expect("table")),
            MethodKind::XlnetLike => {
                let params = XlnetView {
                    w_r: tape.param(store, find("w_r")),
                    content_bias: Some(tape.param(store, find("u"))),
                    position_bias: Some(tape.param(store, find("v"))),
                };
                logits_xlnet(tape, q, k, params, &relative_sinusoid(self.len, self.d)?)
            }
            MethodKind::Method1 | MethodKind::Method2 => logits_m1m2(tape, q, k, view.expect("table")),
            MethodKind::Method3 => logits_m3(tape, q, k, view.expect("table")),
            MethodKind::Method4 if alt => logits_m4_alt(tape, q, k, view.expect("table")),
            MethodKind::Method4 => logits_m4(tape, q, k, view.expect("table")),
        }
    }
}

/// `Σ e ⊙ W` for a fixed random `W`, so every logit reaches the gradient.
fn weighted_sum(tape: &mut Tape, e: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(e, w)?;
    Ok(tape.sum(prod))
}

/// Gradient check of one method's logits with respect to queries, keys and
/// every position parameter. `alt` selects the expanded pairwise form.
pub fn logits_gradcheck(kind: MethodKind, alt: bool, seed: u64) -> Result<Vec<GroupError>> {
    let mut rng = SeededRng::new(seed);
    let (len, d, n) = (4, 4, 4);
    let case = LogitsCase::new(kind, len, d, n, Some(2), &mut rng)?;
    let weights = Tensor::randn(&[len, len], 1.0, &mut rng);
    param_gradcheck(&case.store, GRADCHECK_STEP, |tape, store| {
        let e = case.logits(kind, alt, tape, store)?;
        weighted_sum(tape, e, &weights)
    })
}

/// Size of the encoder and batch used by [`encoder_gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckDims {
    pub layers: usize,
    pub heads: usize,
    pub d_z: usize,
    pub vocab: usize,
    pub len: usize,
    pub batch: usize,
}

impl Default for CheckDims {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_z: 2,
            vocab: 5,
            len: 4,
            batch: 2,
        }
    }
}

/// Gradient check of the full encoder loss for `kind`. The backbone keeps
/// its regular initialization; position parameters, which start at
/// constants, are randomized.
pub fn encoder_gradcheck(kind: MethodKind, seed: u64, dims: CheckDims) -> Result<Vec<GroupError>> {
    let mut rng = SeededRng::new(seed);
    let method = PositionMethod {
        clip_k: kind.accepts_clip().then_some(2),
        ..PositionMethod::new(kind)
    }
    .with_xlnet_bias(kind == MethodKind::XlnetLike);
    let config = EncoderConfig::new(dims.layers, dims.heads, dims.d_z, dims.len + 1, dims.vocab, method);
    let mut model = Encoder::new(config, seed)?;
    randomize(model.store_mut(), 0.5, &mut rng, |name| name != "abs_table" && is_position_param(name))?;
    let n = dims.batch * dims.len;
    let batch: Vec<Vec<usize>> = (0..dims.batch)
        .map(|_| (0..dims.len).map(|_| rng.below(dims.vocab)).collect())
        .collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.below(dims.vocab)).collect();
    let weights: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let opts = ForwardOptions::default();
    let mut probe = model.clone();
    param_gradcheck(model.store(), GRADCHECK_STEP, |tape, store| {
        probe.store_mut().clone_from(store);
        probe.loss(tape, &batch, &targets, &weights, &opts)
    })
}

/// Largest `|pairwise − expanded pairwise|` logit difference over `instances`
/// random cases with `L ≤ 8` and `d ≤ 8`.
pub fn m4_equivalence(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.between(1, 8);
        let d = rng.between(1, 8);
        let n = rng.between(2, 8);
        let k = rng.between(1, n - 1);
        let case = LogitsCase::new(MethodKind::Method4, len, d, n, Some(k), &mut rng)?;
        let mut tape = Tape::new();
        let a = case.logits(MethodKind::Method4, false, &mut tape, &case.store)?;
        let b = case.logits(MethodKind::Method4, true, &mut tape, &case.store)?;
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b))?);
    }
    Ok(worst)
}

/// For every method, the largest difference between its freshly initialized
/// logits and plain `q·k/√d` on a random sequence.
pub fn identity_init_deviation(seed: u64) -> Result<Vec<(MethodKind, f64)>> {
    let mut out = Vec::new();
    for kind in MethodKind::ALL {
        let method = PositionMethod {
            clip_k: kind.accepts_clip().then_some(3),
            ..PositionMethod::new(kind)
        }
        .with_xlnet_bias(kind == MethodKind::XlnetLike);
        let config = EncoderConfig::new(1, 1, 4, 8, 6, method);
        let model = Encoder::new(config, seed)?;
        let mut rng = SeededRng::new(seed);
        let tokens: Vec<usize> = (0..7).map(|_| rng.below(6)).collect();
        let maps = model.attention_maps(&tokens, 0, None, Extrapolation::Saturate)?;
        let mut tape = Tape::new();
        let batch = vec![tokens.clone()];
        let out_vanilla = vanilla_reference(&model, &mut tape, &batch)?;
        let dev = maps[0].0.max_abs_diff(&out_vanilla)?;
        out.push((kind, dev));
    }
    Ok(out)
}

fn method_for(kind: MethodKind, clip_k: usize) -> PositionMethod {
    PositionMethod {
        clip_k: kind.accepts_clip().then_some(clip_k),
        ..PositionMethod::new(kind)
    }
    .with_xlnet_bias(kind == MethodKind::XlnetLike)
}

/// Model with its position parameters randomized, so relative terms
/// actually contribute.
fn probe_model(kind: MethodKind, clip_k: usize, max_len: usize, vocab: usize, seed: u64) -> Result<Encoder> {
    let config = EncoderConfig::new(2, 2, 4, max_len, vocab, method_for(kind, clip_k.min(max_len.saturating_sub(1)).max(1)));
    let mut model = Encoder::new(config, seed)?;
    let mut rng = SeededRng::new(seed).fork(1);
    randomize(model.store_mut(), 0.5, &mut rng, |n| n != "abs_table" && is_position_param(n))?;
    Ok(model)
}

/// Largest difference between the logits of a random sequence of length
/// `len` and those of the same tokens placed after `shift` masked-out
/// padding tokens, over every layer, head and token pair.
pub fn shift_deviation(kind: MethodKind, len: usize, shift: usize, seed: u64) -> Result<f64> {
    let vocab = 6;
    let model = probe_model(kind, 3, len + shift, vocab, seed)?;
    let mut rng = SeededRng::new(seed).fork(2);
    let a: Vec<usize> = (0..len).map(|_| rng.below(vocab)).collect();
    let mut b: Vec<usize> = (0..shift).map(|_| rng.below(vocab)).collect();
    b.extend(&a);
    let mask_b: Vec<bool> = (0..len + shift).map(|p| p >= shift).collect();

    let capture = |tokens: &[usize], mask: Option<Vec<bool>>| -> Result<(Tape, super::ForwardOutput)> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            policy: Extrapolation::Strict,
            key_mask: mask.map(|m| vec![m]),
            capture: true,
        };
        let out = model.forward(&mut tape, &[tokens.to_vec()], &opts)?;
        Ok((tape, out))
    };
    let (tape_a, out_a) = capture(&a, None)?;
    let (tape_b, out_b) = capture(&b, Some(mask_b))?;
    let mut worst: f64 = 0.0;
    for (heads_a, heads_b) in out_a.captures.iter().zip(&out_b.captures) {
        for (ha, hb) in heads_a.iter().zip(heads_b) {
            let ea = tape_a.value(ha[0].logits);
            let eb = tape_b.value(hb[0].logits);
            for i in 0..len {
                for j in 0..len {
                    worst = worst.max((ea.at(i, j) - eb.at(i + shift, j + shift)).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Layer-0 logits of a constant-token sequence of length `len` under clip
/// distance `k`, with randomized tables. Returns, for every head, the spread
/// (max − min) of the logits at distances `≥ k` and at distances `≤ −k`.
pub fn clip_plateau_spread(kind: MethodKind, k: usize, len: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if !kind.accepts_clip() {
        return Err(Error::Config(format!("{kind} has no clipping distance")));
    }
    let model = probe_model(kind, k, len.max(k + 1), 5, seed)?;
    let tokens = vec![2; len];
    let maps = model.attention_maps(&tokens, 0, None, Extrapolation::Strict)?;
    let spread = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if vals.is_empty() {
            0.0
        } else {
            hi - lo
        }
    };
    let k = k as i64;
    Ok(maps
        .iter()
        .map(|(e, _)| {
            let at = |pred: &dyn Fn(i64) -> bool| {
                let mut v = Vec::new();
                for i in 0..len {
                    for j in 0..len {
                        if pred(j as i64 - i as i64) {
                            v.push(e.at(i, j));
                        }
                    }
                }
                v
            };
            (spread(at(&|d| d >= k)), spread(at(&|d| d <= -k)))
        })
        .collect())
}

/// `q·k/√d` of layer 0, head 0 computed from the model's own projections.
fn vanilla_reference(model: &Encoder, tape: &mut Tape, batch: &[Vec<usize>]) -> Result<Tensor> {
    let x = model.input_embedding(tape, batch)?;
    let head = model
        .head_params(0, 0)
        .ok_or_else(|| Error::Bounds("encoder has no attention heads".into()))?;
    let (w_q, w_k) = (tape.param(model.store(), head.w_q), tape.param(model.store(), head.w_k));
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let e = logits_vanilla(tape, q, k)?;
    Ok(tape.value(e).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_logits_pass() {
        for kind in MethodKind::ALL {
            for g in logits_gradcheck(kind, false, 7).unwrap() {
                assert!(group_passes(&g, false), "{kind} {g:?}");
            }
        }
        for g in logits_gradcheck(MethodKind::Method4, true, 7).unwrap() {
            assert!(group_passes(&g, false), "alt {g:?}");
        }
    }

    #[test]
    fn equivalence_and_identity() {
        assert!(m4_equivalence(20, 1).unwrap() < 1e-10);
        for (kind, dev) in identity_init_deviation(5).unwrap() {
            assert!(dev < 1e-12, "{kind}: {dev}");
        }
    }

    #[test]
    fn shift_and_clip() {
        for kind in MethodKind::ALL {
            let dev = shift_deviation(kind, 5, 3, 2).unwrap();
            if kind.is_relative() {
                assert!(dev < 1e-12, "{kind}: {dev}");
            } else {
                assert!(dev > 1e-6, "{kind}: {dev}");
            }
        }
        for kind in MethodKind::ALL.into_iter().filter(|k| k.accepts_clip()) {
            for (pos, neg) in clip_plateau_spread(kind, 2, 7, 3).unwrap() {
                assert_eq!((pos, neg), (0.0, 0.0), "{kind}");
            }
        }
    }
}
