use serde::{Deserialize, Serialize};

use super::logits::{
    logits_m1m2, logits_m3, logits_m4, logits_shaw, logits_vanilla, logits_xlnet, TableView, XlnetView,
};
use crate::error::{Error, Result};
use crate::posembed::{
    relative_sinusoid, sinusoid_table, AbsTable, Extrapolation, MethodKind, PositionMethod, RelTable,
};
use crate::tensor::{ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// Additive logit for keys excluded from attention.
pub const MASKED_LOGIT: f64 = -1e9;

/// Shape of an encoder and its position scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_x: usize,
    pub d_z: usize,
    /// Longest sequence seen in training; sizes the position tables.
    pub max_len: usize,
    pub d_ff: usize,
    pub method: PositionMethod,
    pub vocab: usize,
}

impl EncoderConfig {
    /// `h` heads of width `d_z`, `d_ff = 4·d_x`.
    pub fn new(layers: usize, heads: usize, d_z: usize, max_len: usize, vocab: usize, method: PositionMethod) -> Self {
        let d_x = heads * d_z;
        Self {
            layers,
            heads,
            d_x,
            d_z,
            max_len,
            d_ff: 4 * d_x,
            method,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_z == 0 || self.d_ff == 0 || self.vocab == 0 {
            return Err(Error::Config("heads, d_z, d_ff and vocab must be positive".into()));
        }
        if self.heads * self.d_z != self.d_x {
            return Err(Error::Config(format!(
                "heads ({}) x d_z ({}) must equal d_x ({})",
                self.heads, self.d_z, self.d_x
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        match self.method.kind {
            MethodKind::Sinusoid if !self.d_x.is_multiple_of(2) => {
                return Err(Error::Config("sinusoid input encoding needs an even d_x".into()))
            }
            MethodKind::XlnetLike if !self.d_z.is_multiple_of(2) => {
                return Err(Error::Config("sinusoid relative encoding needs an even d_z".into()))
            }
            _ => {}
        }
        self.method.validate(self.max_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Per-head parameters of the sinusoid-based relative variant. The biases
/// exist only when enabled; otherwise they are fixed at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct XlnetParams {
    pub w_r: ParamId,
    pub u: Option<ParamId>,
    pub v: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    heads: Vec<HeadParams>,
    xlnet: Vec<XlnetParams>,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub policy: Extrapolation,
    /// Per-sequence key mask; `false` keys receive [`MASKED_LOGIT`].
    pub key_mask: Option<Vec<Vec<bool>>>,
    /// Keep per-head logits and attention weights.
    pub capture: bool,
}

/// Captured attention of one head on one sequence.
#[derive(Debug, Clone, Copy)]
pub struct HeadCapture {
    /// Logits before masking.
    pub logits: Var,
    pub weights: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `(B·L)×vocab` output logits, sequences stacked in batch order.
    pub logits: Var,
    /// `captures[layer][head][sequence]`, empty unless requested.
    pub captures: Vec<Vec<Vec<HeadCapture>>>,
}

/// Transformer encoder: token embedding, optional input position encoding,
/// `m` blocks of multi-head attention and a ReLU feed-forward (each with a
/// residual connection), and a linear read-out to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    token_emb: ParamId,
    abs: Option<AbsTable>,
    rel: Option<RelTable>,
    layers: Vec<Layer>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let EncoderConfig {
            layers: m,
            heads: h,
            d_x,
            d_z,
            max_len: n,
            d_ff,
            vocab,
            ..
        } = config;
        let method = config.method;

        let token_emb = store.add("token_emb", Tensor::randn(&[vocab, d_x], 1.0, &mut rng));
        let abs = (method.kind == MethodKind::Absolute).then(|| AbsTable::new(&mut store, n, d_x, &mut rng));
        let rel = RelTable::new(&mut store, &method, m, h, n, d_z)?;

        let proj_std = 1.0 / (d_x as f64).sqrt();
        let mut layers = Vec::with_capacity(m);
        for l in 0..m {
            let mut heads = Vec::with_capacity(h);
            let mut xlnet = Vec::new();
            for hd in 0..h {
                let mut w = |name: &str| {
                    store.add(
                        format!("layer{l}.head{hd}.{name}"),
                        Tensor::randn(&[d_x, d_z], proj_std, &mut rng),
                    )
                };
                heads.push(HeadParams {
                    w_q: w("w_q"),
                    w_k: w("w_k"),
                    w_v: w("w_v"),
                });
                if method.kind == MethodKind::XlnetLike {
                    let w_r = store.add(format!("layer{l}.head{hd}.w_r"), Tensor::zeros(&[d_z, d_z]));
                    let (u, v) = if method.xlnet_bias_enabled {
                        (
                            Some(store.add(format!("layer{l}.head{hd}.u"), Tensor::zeros(&[d_z]))),
                            Some(store.add(format!("layer{l}.head{hd}.v"), Tensor::zeros(&[d_z]))),
                        )
                    } else {
                        (None, None)
                    };
                    xlnet.push(XlnetParams { w_r, u, v });
                }
            }
            let ff1_w = store.add(
                format!("layer{l}.ff1.w"),
                Tensor::randn(&[d_x, d_ff], (2.0 / d_x as f64).sqrt(), &mut rng),
            );
            let ff1_b = store.add(format!("layer{l}.ff1.b"), Tensor::zeros(&[d_ff]));
            let ff2_w = store.add(
                format!("layer{l}.ff2.w"),
                Tensor::randn(&[d_ff, d_x], 0.5 / (d_ff as f64).sqrt(), &mut rng),
            );
            let ff2_b = store.add(format!("layer{l}.ff2.b"), Tensor::zeros(&[d_x]));
            layers.push(Layer {
                heads,
                xlnet,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
            });
        }
        let out_w = store.add("out.w", Tensor::randn(&[d_x, vocab], proj_std, &mut rng));
        let out_b = store.add("out.b", Tensor::zeros(&[vocab]));

        Ok(Self {
            config,
            store,
            token_emb,
            abs,
            rel,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn rel_table(&self) -> Option<&RelTable> {
        self.rel.as_ref()
    }

    pub fn abs_table(&self) -> Option<&AbsTable> {
        self.abs.as_ref()
    }

    pub fn head_params(&self, layer: usize, head: usize) -> Option<&HeadParams> {
        self.layers.get(layer)?.heads.get(head)
    }

    pub fn xlnet_params(&self, layer: usize, head: usize) -> Option<&XlnetParams> {
        self.layers.get(layer)?.xlnet.get(head)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    /// Elements of every learnable parameter.
    pub fn element_count(&self) -> usize {
        self.store.element_count()
    }

    /// Elements of the parameters introduced by the position scheme.
    pub fn position_element_count(&self) -> usize {
        let abs = self.abs.as_ref().map_or(0, |a| a.element_count(&self.store));
        let rel = self.rel.as_ref().map_or(0, RelTable::element_count);
        let xl: usize = self
            .layers
            .iter()
            .flat_map(|l| &l.xlnet)
            .map(|x| {
                [Some(x.w_r), x.u, x.v]
                    .into_iter()
                    .flatten()
                    .map(|id| self.store.value(id).numel())
                    .sum::<usize>()
            })
            .sum();
        abs + rel + xl
    }

    pub fn backbone_element_count(&self) -> usize {
        self.element_count() - self.position_element_count()
    }

    /// Token embeddings plus any input-level position signal, stacked to
    /// `B·L × d_x`.
    pub fn input_embedding(&self, tape: &mut Tape, batch: &[Vec<usize>]) -> Result<Var> {
        let len = batch_len(batch)?;
        let cfg = &self.config;
        if let Some(&bad) = batch.iter().flatten().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Bounds(format!("token {bad} with vocabulary {}", cfg.vocab)));
        }
        let tokens: Vec<usize> = batch.iter().flatten().copied().collect();

        let emb = tape.param(&self.store, self.token_emb);
        let mut x = tape.gather_rows(emb, &tokens)?;
        match cfg.method.kind {
            MethodKind::Absolute => {
                let abs = self.abs.as_ref().expect("absolute table");
                if len > abs.max_len() {
                    return Err(Error::Capacity {
                        detail: "absolute position embeddings exist only for trained positions".into(),
                        len,
                        max: abs.max_len(),
                    });
                }
                let table = tape.param(&self.store, abs.weights);
                let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
                let pos = tape.gather_rows(table, &positions)?;
                x = tape.add(x, pos)?;
            }
            MethodKind::Sinusoid => {
                let one = sinusoid_table(0..len as i64, cfg.d_x)?;
                let rows: Vec<Vec<f64>> = (0..batch.len())
                    .flat_map(|_| (0..len).map(|i| one.row(i).to_vec()))
                    .collect();
                let pos = tape.constant(Tensor::from_rows(&rows)?);
                x = tape.add(x, pos)?;
            }
            _ => {}
        }
        Ok(x)
    }

    /// Records the forward pass for a batch of equal-length sequences.
    pub fn forward(&self, tape: &mut Tape, batch: &[Vec<usize>], opts: &ForwardOptions) -> Result<ForwardOutput> {
        let len = batch_len(batch)?;
        let cfg = &self.config;
        if let Some(mask) = &opts.key_mask {
            if mask.len() != batch.len() || mask.iter().any(|m| m.len() != len) {
                return Err(Error::Usage("key mask must match the batch shape".into()));
            }
            if mask.iter().any(|m| !m.iter().any(|&b| b)) {
                return Err(Error::Usage("every sequence needs at least one visible key".into()));
            }
        }
        let mut x = self.input_embedding(tape, batch)?;

        let masks = match &opts.key_mask {
            Some(mask) => Some(
                mask.iter()
                    .map(|m| {
                        let row: Vec<f64> = m.iter().map(|&keep| if keep { 0.0 } else { MASKED_LOGIT }).collect();
                        let t = Tensor::new(&[len, len], row.repeat(len))?;
                        Ok(tape.constant(t))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let rel_rows_ok = match &self.rel {
            // surface capacity errors before recording the expensive part
            Some(rel) => rel.index_matrix(len, opts.policy).map(|_| ()),
            None => Ok(()),
        };
        rel_rows_ok?;
        let sinusoid = match cfg.method.kind {
            MethodKind::XlnetLike => Some(relative_sinusoid(len, cfg.d_z)?),
            _ => None,
        };
        let rel_node = self.rel.as_ref().map(|r| tape.param(&self.store, r.weights));

        let mut captures = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut head_outs = Vec::with_capacity(cfg.heads);
            let mut layer_caps = Vec::new();
            for (hd, head) in layer.heads.iter().enumerate() {
                let w_q = tape.param(&self.store, head.w_q);
                let w_k = tape.param(&self.store, head.w_k);
                let w_v = tape.param(&self.store, head.w_v);
                let q_all = tape.matmul(x, w_q)?;
                let k_all = tape.matmul(x, w_k)?;
                let v_all = tape.matmul(x, w_v)?;
                let xl = layer.xlnet.get(hd).map(|p| XlnetView {
                    w_r: tape.param(&self.store, p.w_r),
                    content_bias: p.u.map(|id| tape.param(&self.store, id)),
                    position_bias: p.v.map(|id| tape.param(&self.store, id)),
                });
                let mut seq_outs = Vec::with_capacity(batch.len());
                let mut head_caps = Vec::new();
                for b in 0..batch.len() {
                    let q = tape.slice_rows(q_all, b * len, len)?;
                    let k = tape.slice_rows(k_all, b * len, len)?;
                    let v = tape.slice_rows(v_all, b * len, len)?;
                    let view = rel_node.map(|node| TableView {
                        table: self.rel.as_ref().unwrap(),
                        node,
                        layer: l,
                        head: hd,
                        policy: opts.policy,
                    });
                    let e = self.dispatch_logits(tape, q, k, view, xl, sinusoid.as_ref())?;
                    let masked = match &masks {
                        Some(m) => tape.add(e, m[b])?,
                        None => e,
                    };
                    let weights = tape.softmax_rows(masked)?;
                    seq_outs.push(tape.matmul(weights, v)?);
                    if opts.capture {
                        head_caps.push(HeadCapture { logits: e, weights });
                    }
                }
                head_outs.push(if seq_outs.len() == 1 {
                    seq_outs[0]
                } else {
                    tape.concat_rows(&seq_outs)?
                });
                layer_caps.push(head_caps);
            }
            let attn = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)?
            };
            x = tape.add(x, attn)?;

            let w1 = tape.param(&self.store, layer.ff1_w);
            let b1 = tape.param(&self.store, layer.ff1_b);
            let w2 = tape.param(&self.store, layer.ff2_w);
            let b2 = tape.param(&self.store, layer.ff2_b);
            let hidden = tape.matmul(x, w1)?;
            let hidden = tape.add_row_bias(hidden, b1)?;
            let hidden = tape.relu(hidden);
            let ff = tape.matmul(hidden, w2)?;
            let ff = tape.add_row_bias(ff, b2)?;
            x = tape.add(x, ff)?;
            if opts.capture {
                captures.push(layer_caps);
            }
        }

        let out_w = tape.param(&self.store, self.out_w);
        let out_b = tape.param(&self.store, self.out_b);
        let logits = tape.matmul(x, out_w)?;
        let logits = tape.add_row_bias(logits, out_b)?;
        Ok(ForwardOutput { logits, captures })
    }

    fn dispatch_logits(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        view: Option<TableView<'_>>,
        xl: Option<XlnetView>,
        sinusoid: Option<&Tensor>,
    ) -> Result<Var> {
        match self.config.method.kind {
            MethodKind::Absolute | MethodKind::Sinusoid => logits_vanilla(tape, q, k),
            MethodKind::Shaw => logits_shaw(tape, q, k, view.expect("shaw table")),
            MethodKind::XlnetLike => logits_xlnet(tape, q, k, xl.expect("xlnet params"), sinusoid.expect("R")),
            MethodKind::Method1 | MethodKind::Method2 => logits_m1m2(tape, q, k, view.expect("scalar table")),
            MethodKind::Method3 => logits_m3(tape, q, k, view.expect("gate table")),
            MethodKind::Method4 => logits_m4(tape, q, k, view.expect("pairwise table")),
        }
    }

    /// Weighted cross-entropy of the batch, `targets`/`weights` laid out like
    /// the stacked sequences.
    pub fn loss(
        &self,
        tape: &mut Tape,
        batch: &[Vec<usize>],
        targets: &[usize],
        weights: &[f64],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let out = self.forward(tape, batch, opts)?;
        tape.cross_entropy(out.logits, targets, weights)
    }

    /// Vocabulary logits for a single sequence.
    pub fn predict(&self, tokens: &[usize], policy: Extrapolation) -> Result<Tensor> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            policy,
            ..Default::default()
        };
        let out = self.forward(&mut tape, &[tokens.to_vec()], &opts)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Per-head `(logits, attention weights)` of one layer for one sequence.
    pub fn attention_maps(
        &self,
        tokens: &[usize],
        layer: usize,
        key_mask: Option<Vec<bool>>,
        policy: Extrapolation,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        if layer >= self.config.layers {
            return Err(Error::Bounds(format!(
                "layer {layer} of a {}-layer encoder",
                self.config.layers
            )));
        }
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            policy,
            key_mask: key_mask.map(|m| vec![m]),
            capture: true,
        };
        let out = self.forward(&mut tape, &[tokens.to_vec()], &opts)?;
        Ok(out.captures[layer]
            .iter()
            .map(|h| (tape.value(h[0].logits).clone(), tape.value(h[0].weights).clone()))
            .collect())
    }
}

fn batch_len(batch: &[Vec<usize>]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::Usage("empty sequence".into()));
    }
    if batch.iter().any(|s| s.len() != len) {
        return Err(Error::Usage("sequences in a batch must share one length".into()));
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: MethodKind) -> EncoderConfig {
        let method = PositionMethod {
            clip_k: kind.accepts_clip().then_some(3),
            ..PositionMethod::new(kind)
        };
        EncoderConfig::new(2, 2, 4, 6, 7, method)
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(MethodKind::Method4);
        assert!(cfg.validate().is_ok());
        cfg.d_x = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny(MethodKind::Method4);
        cfg.max_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(MethodKind::Method4);
        cfg.method.clip_k = Some(6);
        assert!(cfg.validate().is_err());
        assert_eq!(tiny(MethodKind::Absolute).d_ff, 32);
    }

    #[test]
    fn single_token_attention_passes_value_through() {
        for kind in MethodKind::ALL {
            let enc = Encoder::new(tiny(kind), 1).unwrap();
            let maps = enc.attention_maps(&[3], 0, None, Extrapolation::Strict).unwrap();
            for (_, w) in maps {
                assert_eq!(w.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_for_every_method() {
        for kind in MethodKind::ALL {
            let enc = Encoder::new(tiny(kind), 2).unwrap();
            for layer in 0..2 {
                for (_, w) in enc.attention_maps(&[0, 4, 2, 2, 6], layer, None, Extrapolation::Strict).unwrap() {
                    for r in 0..w.rows() {
                        let s: f64 = w.row(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12, "{kind}");
                        assert!(w.row(r).iter().all(|&p| p >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_layer_encoder_is_embedding_times_readout() {
        let mut cfg = tiny(MethodKind::Method4);
        cfg.layers = 0;
        let enc = Encoder::new(cfg, 3).unwrap();
        let tokens = [1usize, 5, 0];
        let got = enc.predict(&tokens, Extrapolation::Strict).unwrap();
        let emb = enc.store().value(enc.token_emb);
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| emb.row(t).to_vec()).collect();
        let want = Tensor::from_rows(&rows)
            .unwrap()
            .matmul(enc.store().value(enc.out_w))
            .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn same_seed_same_logits_bitwise() {
        let a = Encoder::new(tiny(MethodKind::Shaw), 9).unwrap();
        let b = Encoder::new(tiny(MethodKind::Shaw), 9).unwrap();
        let ta = a.predict(&[1, 2, 3, 4], Extrapolation::Strict).unwrap();
        let tb = b.predict(&[1, 2, 3, 4], Extrapolation::Strict).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ta), bits(&tb));
    }

    #[test]
    fn absolute_rejects_long_inputs() {
        let enc = Encoder::new(tiny(MethodKind::Absolute), 1).unwrap();
        assert!(enc.predict(&[0; 6], Extrapolation::Strict).is_ok());
        assert!(matches!(
            enc.predict(&[0; 7], Extrapolation::Saturate),
            Err(Error::Capacity { len: 7, max: 6, .. })
        ));
    }

    #[test]
    fn bad_tokens_and_ragged_batches() {
        let enc = Encoder::new(tiny(MethodKind::Method2), 1).unwrap();
        assert!(matches!(enc.predict(&[7], Extrapolation::Strict), Err(Error::Bounds(_))));
        let mut tape = Tape::new();
        let ragged = vec![vec![1, 2], vec![1]];
        assert!(enc.forward(&mut tape, &ragged, &ForwardOptions::default()).is_err());
        assert!(enc.attention_maps(&[1, 2], 2, None, Extrapolation::Strict).is_err());
    }

    #[test]
    fn position_counts_match_formula() {
        for kind in MethodKind::ALL {
            for bias in [false, true] {
                if bias && kind != MethodKind::XlnetLike {
                    continue;
                }
                let mut cfg = tiny(kind);
                cfg.method.xlnet_bias_enabled = bias;
                let enc = Encoder::new(cfg, 1).unwrap();
                let want = crate::posembed::param_count(&cfg.method, 2, 2, 6, 4);
                assert_eq!(enc.position_element_count(), want, "{kind}");
            }
        }
    }
}
