//! Position-embedding schemes: configuration, learnable tables, index
//! resolution with clipping, sinusoid generation and parameter counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, SeededRng, Tensor};

/// Clip distance used when a clipped method is configured without one.
pub const DEFAULT_CLIP_K: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Absolute,
    Sinusoid,
    Shaw,
    XlnetLike,
    Method1,
    Method2,
    Method3,
    Method4,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::Absolute,
        MethodKind::Sinusoid,
        MethodKind::Shaw,
        MethodKind::XlnetLike,
        MethodKind::Method1,
        MethodKind::Method2,
        MethodKind::Method3,
        MethodKind::Method4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Absolute => "absolute",
            MethodKind::Sinusoid => "sinusoid",
            MethodKind::Shaw => "shaw",
            MethodKind::XlnetLike => "xlnet",
            MethodKind::Method1 => "method1",
            MethodKind::Method2 => "method2",
            MethodKind::Method3 => "method3",
            MethodKind::Method4 => "method4",
        }
    }

    /// Position information enters inside every attention layer rather
    /// than at the input.
    pub fn is_relative(self) -> bool {
        !matches!(self, MethodKind::Absolute | MethodKind::Sinusoid)
    }

    pub fn accepts_clip(self) -> bool {
        matches!(
            self,
            MethodKind::Shaw | MethodKind::Method2 | MethodKind::Method3 | MethodKind::Method4
        )
    }

    /// Layout of the learnable relative table, if the method has one.
    pub fn rel_layout(self) -> Option<RelLayout> {
        match self {
            MethodKind::Method1 => Some(RelLayout::ScalarUnsigned),
            MethodKind::Method2 => Some(RelLayout::ScalarSigned),
            MethodKind::Shaw | MethodKind::Method3 | MethodKind::Method4 => Some(RelLayout::VectorSigned),
            _ => None,
        }
    }

    /// Parameter-count formula in terms of m, h, n, d (head width) and d_x.
    pub fn formula(self) -> &'static str {
        match self {
            MethodKind::Absolute => "n*d_x",
            MethodKind::Sinusoid => "0",
            MethodKind::Shaw | MethodKind::Method3 | MethodKind::Method4 => "m*h*(2n-1)*d",
            MethodKind::Method1 => "m*h*n",
            MethodKind::Method2 => "m*h*(2n-1)",
            MethodKind::XlnetLike => "m*h*d*d (+ 2*m*h*d with biases)",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "xlnetlike" && *m == MethodKind::XlnetLike))
            .ok_or_else(|| Error::Config(format!("unknown position method {s:?}")))
    }
}

/// A position scheme plus its clip distance and bias switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMethod {
    pub kind: MethodKind,
    pub clip_k: Option<usize>,
    pub xlnet_bias_enabled: bool,
}

impl PositionMethod {
    /// Unclipped method with biases disabled.
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            clip_k: None,
            xlnet_bias_enabled: false,
        }
    }

    /// Clipped methods get [`DEFAULT_CLIP_K`]; the rest are unclipped.
    pub fn with_default_clip(kind: MethodKind) -> Self {
        let mut m = Self::new(kind);
        if kind.accepts_clip() {
            m.clip_k = Some(DEFAULT_CLIP_K);
        }
        m
    }

    pub fn clipped(kind: MethodKind, k: usize) -> Self {
        Self {
            clip_k: Some(k),
            ..Self::new(kind)
        }
    }

    pub fn with_xlnet_bias(mut self, enabled: bool) -> Self {
        self.xlnet_bias_enabled = enabled;
        self
    }

    /// Checks the clip distance against the maximum sequence length `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(k) = self.clip_k {
            if !self.kind.accepts_clip() {
                return Err(Error::Config(format!("{} does not take a clip distance", self.kind)));
            }
            if k == 0 || k + 1 > n {
                return Err(Error::Config(format!("clip distance {k} outside [1, {}]", n.saturating_sub(1))));
            }
        }
        if self.xlnet_bias_enabled && self.kind != MethodKind::XlnetLike {
            return Err(Error::Config(format!("{} has no query biases", self.kind)));
        }
        Ok(())
    }
}

impl fmt::Display for PositionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(k) = self.clip_k {
            write!(f, "(k={k})")?;
        }
        if self.xlnet_bias_enabled {
            write!(f, "+bias")?;
        }
        Ok(())
    }
}

/// `max(−k, min(k, x))`
pub fn clip(x: i64, k: i64) -> i64 {
    (-k).max(k.min(x))
}

/// Sinusoid position vector: entry `2i` is `sin(pos / 10000^(2i/d))`,
/// entry `2i+1` the matching cosine. Negative positions are evaluated
/// directly.
pub fn sinusoid_encoding(pos: i64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoid width must be even and positive, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Rows of sinusoid encodings, one per position in `positions`.
pub fn sinusoid_table(positions: impl IntoIterator<Item = i64>, d: usize) -> Result<Tensor> {
    let rows = positions
        .into_iter()
        .map(|p| sinusoid_encoding(p, d))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Relative table `R` covering distances `−(len−1) ..= len−1`; row `r`
/// holds distance `r − (len−1)`.
pub fn relative_sinusoid(len: usize, d: usize) -> Result<Tensor> {
    let span = len as i64 - 1;
    sinusoid_table(-span..=span, d)
}

/// What happens when a distance exceeds what an unclipped table stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Extrapolation {
    /// Raise [`Error::Capacity`].
    #[default]
    Strict,
    /// Reuse the outermost entry (distance `±(n−1)`).
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelLayout {
    /// `m×h×n` scalars indexed by `|j−i|`.
    ScalarUnsigned,
    /// `m×h×(2n−1)` scalars indexed by signed distance.
    ScalarSigned,
    /// `m×h×(2n−1)×d` vectors indexed by signed distance.
    VectorSigned,
}

/// Learnable relative-position storage for every layer and head.
///
/// Signed row `n−1+δ` holds distance `δ`, so row 0 is `−(n−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelTable {
    pub layout: RelLayout,
    pub weights: ParamId,
    layers: usize,
    heads: usize,
    n: usize,
    width: usize,
    clip_k: Option<usize>,
}

impl RelTable {
    /// Allocates the table for `method`, or `None` for methods without one.
    ///
    /// Initial values leave every layer's logits equal to plain dot-product
    /// attention: scalar and gating tables start at one, additive tables at
    /// zero.
    pub fn new(
        store: &mut ParamStore,
        method: &PositionMethod,
        layers: usize,
        heads: usize,
        n: usize,
        d_z: usize,
    ) -> Result<Option<Self>> {
        method.validate(n)?;
        let Some(layout) = method.kind.rel_layout() else {
            return Ok(None);
        };
        if layers == 0 || heads == 0 {
            return Ok(None);
        }
        let rows = match layout {
            RelLayout::ScalarUnsigned => n,
            _ => 2 * n - 1,
        };
        let width = match layout {
            RelLayout::VectorSigned => d_z,
            _ => 1,
        };
        let init = match method.kind {
            MethodKind::Method1 | MethodKind::Method2 | MethodKind::Method3 => 1.0,
            _ => 0.0,
        };
        let mut shape = vec![layers, heads, rows];
        if layout == RelLayout::VectorSigned {
            shape.push(width);
        }
        let weights = store.add(format!("rel_table.{}", method.kind), Tensor::full(&shape, init));
        Ok(Some(Self {
            layout,
            weights,
            layers,
            heads,
            n,
            width,
            clip_k: method.clip_k,
        }))
    }

    pub fn rows(&self) -> usize {
        match self.layout {
            RelLayout::ScalarUnsigned => self.n,
            _ => 2 * self.n - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_len(&self) -> usize {
        self.n
    }

    pub fn clip_k(&self) -> Option<usize> {
        self.clip_k
    }

    /// Learnable elements across all layers and heads.
    pub fn element_count(&self) -> usize {
        self.layers * self.heads * self.rows() * self.width
    }

    /// Flat offset of the `(layer, head)` slab inside the weights.
    pub fn head_offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.heads + head) * self.rows() * self.width
    }

    /// Table row used by query position `i` attending to key position `j`.
    /// Depends on `j − i` only.
    pub fn index(&self, i: usize, j: usize, policy: Extrapolation) -> Result<usize> {
        let dist = j as i64 - i as i64;
        let max = self.n as i64 - 1;
        let dist = match self.clip_k {
            Some(k) => clip(dist, k as i64),
            None => dist,
        };
        let dist = match self.layout {
            RelLayout::ScalarUnsigned => dist.abs(),
            _ => dist,
        };
        let dist = if dist.abs() > max {
            match policy {
                Extrapolation::Strict => {
                    return Err(Error::Capacity {
                        detail: format!("relative distance {dist} beyond table extent ±{max}"),
                        len: i.max(j) + 1,
                        max: self.n,
                    })
                }
                Extrapolation::Saturate => dist.signum() * max,
            }
        } else {
            dist
        };
        Ok(match self.layout {
            RelLayout::ScalarUnsigned => dist as usize,
            _ => (dist + max) as usize,
        })
    }

    /// Row indices for every `(i, j)` pair of a length-`len` sequence,
    /// row-major.
    pub fn index_matrix(&self, len: usize, policy: Extrapolation) -> Result<Vec<usize>> {
        let mut rows = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                rows.push(self.index(i, j, policy)?);
            }
        }
        Ok(rows)
    }

    /// The stored entry for pair `(i, j)`, borrowed from the live weights.
    pub fn resolve<'a>(
        &self,
        store: &'a ParamStore,
        layer: usize,
        head: usize,
        i: usize,
        j: usize,
        policy: Extrapolation,
    ) -> Result<&'a [f64]> {
        self.check_head(layer, head)?;
        let row = self.index(i, j, policy)?;
        let start = self.head_offset(layer, head) + row * self.width;
        Ok(&store.value(self.weights).data()[start..start + self.width])
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.layers || head >= self.heads {
            return Err(Error::Bounds(format!(
                "layer {layer}, head {head} of a {}x{} table",
                self.layers, self.heads
            )));
        }
        Ok(())
    }

    /// Inclusive range of distances this table stores.
    pub fn distance_extent(&self) -> (i64, i64) {
        let max = self.n as i64 - 1;
        match self.layout {
            RelLayout::ScalarUnsigned => (0, max),
            _ => (-max, max),
        }
    }

    /// Weights for distances `lo ..= hi` of one layer and head, one row per
    /// distance.
    pub fn export_weights(&self, store: &ParamStore, layer: usize, head: usize, lo: i64, hi: i64) -> Result<Tensor> {
        self.check_head(layer, head)?;
        let (min, max) = self.distance_extent();
        if lo > hi || lo < min || hi > max {
            return Err(Error::Bounds(format!("distances {lo}..={hi} outside table extent {min}..={max}")));
        }
        let data = store.value(self.weights).data();
        let base = self.head_offset(layer, head);
        let offset = if self.layout == RelLayout::ScalarUnsigned { 0 } else { max };
        let mut out = Vec::with_capacity((hi - lo + 1) as usize * self.width);
        for dist in lo..=hi {
            let start = base + (dist + offset) as usize * self.width;
            out.extend_from_slice(&data[start..start + self.width]);
        }
        Tensor::new(&[(hi - lo + 1) as usize, self.width], out)
    }
}

/// Learned absolute position vectors, added once at the encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsTable {
    pub weights: ParamId,
    n: usize,
}

impl AbsTable {
    pub fn new(store: &mut ParamStore, n: usize, d_x: usize, rng: &mut SeededRng) -> Self {
        let weights = store.add("abs_table", Tensor::randn(&[n, d_x], 0.1, rng));
        Self { weights, n }
    }

    pub fn max_len(&self) -> usize {
        self.n
    }

    pub fn element_count(&self, store: &ParamStore) -> usize {
        store.value(self.weights).numel()
    }
}

/// Learnable position parameters introduced by `method` for an encoder
/// with `m` layers, `h` heads, maximum length `n` and head width `d`
/// (model width `h·d`).
pub fn param_count(method: &PositionMethod, m: usize, h: usize, n: usize, d: usize) -> usize {
    match method.kind {
        MethodKind::Absolute => n * h * d,
        MethodKind::Sinusoid => 0,
        MethodKind::Shaw | MethodKind::Method3 | MethodKind::Method4 => m * h * (2 * n - 1) * d,
        MethodKind::Method1 => m * h * n,
        MethodKind::Method2 => m * h * (2 * n - 1),
        MethodKind::XlnetLike => {
            let bias = if method.xlnet_bias_enabled { 2 * m * h * d } else { 0 };
            m * h * d * d + bias
        }
    }
}

/// CSV rendering of exported weights: header `rel_pos,dim_0,...`, one row
/// per distance starting at `first_distance`.
pub fn weights_csv(weights: &Tensor, first_distance: i64) -> String {
    let cols = weights.cols();
    let mut out = String::from("rel_pos");
    for c in 0..cols {
        out.push_str(&format!(",dim_{c}"));
    }
    out.push('\n');
    for r in 0..weights.rows() {
        out.push_str(&(first_distance + r as i64).to_string());
        for v in weights.row(r) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(kind: MethodKind, k: Option<usize>, n: usize) -> (ParamStore, RelTable) {
        let mut store = ParamStore::new();
        let method = PositionMethod {
            clip_k: k,
            ..PositionMethod::new(kind)
        };
        let t = RelTable::new(&mut store, &method, 2, 3, n, 4).unwrap().unwrap();
        (store, t)
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(5, 3), 3);
        assert_eq!(clip(-7, 2), -2);
        for k in 1..10 {
            assert_eq!(clip(0, k), 0);
        }
    }

    #[test]
    fn sinusoid_examples() {
        assert_eq!(sinusoid_encoding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let v = sinusoid_encoding(1, 2).unwrap();
        assert_eq!(v, vec![1f64.sin(), 1f64.cos()]);
        assert!((v[0] - 0.8415).abs() < 1e-4 && (v[1] - 0.5403).abs() < 1e-4);
        assert_eq!(sinusoid_encoding(10000, 2).unwrap()[0], 10000f64.sin());
        assert!(matches!(sinusoid_encoding(3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn negative_sinusoid_positions_use_parity() {
        let pos = sinusoid_encoding(7, 6).unwrap();
        let neg = sinusoid_encoding(-7, 6).unwrap();
        for t in 0..3 {
            assert_eq!(neg[2 * t], -pos[2 * t]);
            assert_eq!(neg[2 * t + 1], pos[2 * t + 1]);
        }
    }

    #[test]
    fn method1_ignores_sign() {
        let (store, t) = table(MethodKind::Method1, None, 10);
        let a = t.resolve(&store, 1, 2, 3, 7, Extrapolation::Strict).unwrap();
        let b = t.resolve(&store, 1, 2, 7, 3, Extrapolation::Strict).unwrap();
        assert_eq!(a.as_ptr(), b.as_ptr());
    }

    #[test]
    fn shaw_clipping_shares_entry() {
        let (store, t) = table(MethodKind::Shaw, Some(2), 10);
        let far = t.resolve(&store, 0, 0, 0, 5, Extrapolation::Strict).unwrap();
        let near = t.resolve(&store, 0, 0, 0, 2, Extrapolation::Strict).unwrap();
        assert_eq!(far.as_ptr(), near.as_ptr());
        let one = t.resolve(&store, 0, 0, 0, 1, Extrapolation::Strict).unwrap();
        assert_ne!(one.as_ptr(), near.as_ptr());
    }

    #[test]
    fn method2_zero_distance_is_centre_row() {
        let (_, t) = table(MethodKind::Method2, None, 10);
        for i in 0..10 {
            assert_eq!(t.index(i, i, Extrapolation::Strict).unwrap(), 9);
        }
        assert_eq!(t.index(9, 0, Extrapolation::Strict).unwrap(), 0);
        assert_eq!(t.index(0, 9, Extrapolation::Strict).unwrap(), 18);
    }

    #[test]
    fn unclipped_capacity_error_and_saturation() {
        let (_, t) = table(MethodKind::Method1, None, 4);
        assert!(matches!(t.index(0, 4, Extrapolation::Strict), Err(Error::Capacity { .. })));
        assert_eq!(t.index(0, 9, Extrapolation::Saturate).unwrap(), 3);
        let (_, t) = table(MethodKind::Method3, None, 4);
        assert_eq!(t.index(9, 0, Extrapolation::Saturate).unwrap(), 0);
        assert_eq!(t.index(0, 9, Extrapolation::Saturate).unwrap(), 6);
        let (_, t) = table(MethodKind::Method4, Some(2), 4);
        assert_eq!(t.index(0, 40, Extrapolation::Strict).unwrap(), 5);
    }

    #[test]
    fn validation_rules() {
        assert!(PositionMethod::clipped(MethodKind::Method1, 2).validate(10).is_err());
        assert!(PositionMethod::clipped(MethodKind::Absolute, 2).validate(10).is_err());
        assert!(PositionMethod::clipped(MethodKind::Shaw, 10).validate(10).is_err());
        assert!(PositionMethod::clipped(MethodKind::Shaw, 0).validate(10).is_err());
        assert!(PositionMethod::clipped(MethodKind::Shaw, 9).validate(10).is_ok());
        assert!(PositionMethod::new(MethodKind::Shaw).with_xlnet_bias(true).validate(10).is_err());
        assert_eq!(PositionMethod::with_default_clip(MethodKind::Method4).clip_k, Some(32));
        assert_eq!(PositionMethod::with_default_clip(MethodKind::Method1).clip_k, None);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert_eq!("XLNet-like".parse::<MethodKind>().unwrap(), MethodKind::XlnetLike);
        assert!("rope".parse::<MethodKind>().is_err());
    }

    #[test]
    fn bert_base_counts() {
        let (m, h, n, d) = (12, 12, 512, 64);
        let count = |k| param_count(&PositionMethod::new(k), m, h, n, d);
        assert_eq!(count(MethodKind::Method2), 147_312);
        assert_eq!(count(MethodKind::Method1), 73_728);
        assert_eq!(count(MethodKind::Sinusoid), 0);
        assert_eq!(count(MethodKind::Method4), 12 * 12 * 1023 * 64);
        assert_eq!(count(MethodKind::Absolute), 512 * 768);
    }

    #[test]
    fn initial_values_are_identity_preserving() {
        for (kind, want) in [
            (MethodKind::Method1, 1.0),
            (MethodKind::Method2, 1.0),
            (MethodKind::Method3, 1.0),
            (MethodKind::Method4, 0.0),
            (MethodKind::Shaw, 0.0),
        ] {
            let (store, t) = table(kind, None, 5);
            assert!(store.value(t.weights).data().iter().all(|&v| v == want), "{kind}");
            assert_eq!(store.value(t.weights).numel(), t.element_count());
        }
    }

    #[test]
    fn export_rows_and_csv() {
        let (mut store, t) = table(MethodKind::Method4, None, 6);
        let mut w = store.value(t.weights).clone();
        let base = t.head_offset(1, 0);
        for r in 0..t.rows() {
            w.data_mut()[base + r * 4] = r as f64 - 5.0;
        }
        store.set_value(t.weights, w).unwrap();
        let e = t.export_weights(&store, 1, 0, -2, 2).unwrap();
        assert_eq!(e.shape(), &[5, 4]);
        assert_eq!(e.row(0)[0], -2.0);
        assert_eq!(e.row(4)[0], 2.0);
        let csv = weights_csv(&e, -2);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "rel_pos,dim_0,dim_1,dim_2,dim_3");
        assert_eq!(lines.next().unwrap(), "-2,-2,0,0,0");
        assert!(t.export_weights(&store, 1, 0, -6, 0).is_err());
        assert!(t.export_weights(&store, 2, 0, 0, 0).is_err());
    }
}
