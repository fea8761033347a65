//! Attention-logit variants for one head.
//!
//! Every function takes query and key rows already on the tape (`L×d`) and
//! records a single fused node producing the `L×L` logit matrix, scaled by
//! `1/√d`.

use crate::error::{Error, Result};
use crate::posembed::{Extrapolation, RelLayout, RelTable};
use crate::tensor::{LogitForm, RelLogits, Tape, Tensor, Var};

/// One layer/head slice of a relative table that is already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TableView<'a> {
    pub table: &'a RelTable,
    pub node: Var,
    pub layer: usize,
    pub head: usize,
    pub policy: Extrapolation,
}

impl TableView<'_> {
    fn spec(&self, form: LogitForm, len: usize) -> Result<RelLogits> {
        Ok(RelLogits {
            form,
            table: Some(self.node),
            offset: self.table.head_offset(self.layer, self.head),
            width: self.table.width(),
            rows: self.table.index_matrix(len, self.policy)?,
            content_bias: None,
            position_bias: None,
        })
    }

    fn expect_layout(&self, op: &str, allowed: &[RelLayout]) -> Result<()> {
        if allowed.contains(&self.table.layout) {
            Ok(())
        } else {
            Err(Error::Config(format!("{op} cannot use a {:?} table", self.table.layout)))
        }
    }
}

/// Query/key biases and projection of the sinusoid-based variant, for one
/// layer and head.
#[derive(Debug, Clone, Copy)]
pub struct XlnetView {
    pub w_r: Var,
    pub content_bias: Option<Var>,
    pub position_bias: Option<Var>,
}

fn seq_len(tape: &Tape, q: Var) -> Result<usize> {
    Ok(tape.value(q).dims2()?.0)
}

/// `e[i][j] = q_i·k_j / √d`
pub fn logits_vanilla(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    tape.rel_logits(q, k, RelLogits::vanilla())
}

/// `e[i][j] = q_i·(k_j + a_ij) / √d`
pub fn logits_shaw(tape: &mut Tape, q: Var, k: Var, table: TableView<'_>) -> Result<Var> {
    table.expect_layout("shaw logits", &[RelLayout::VectorSigned])?;
    let len = seq_len(tape, q)?;
    let spec = table.spec(LogitForm::Shaw, len)?;
    tape.rel_logits(q, k, spec)
}

/// `e[i][j] = ((q_i + u)·k_j + (q_i + v)·(R_ij W_R)) / √d` where `R` is the
/// `(2L−1)×d` relative sinusoid matrix (row `L−1+δ` for distance `δ`).
pub fn logits_xlnet(tape: &mut Tape, q: Var, k: Var, params: XlnetView, sinusoid: &Tensor) -> Result<Var> {
    let len = seq_len(tape, q)?;
    if sinusoid.dims2()?.0 != 2 * len - 1 {
        return Err(Error::Dimension {
            op: "xlnet sinusoid rows",
            lhs: sinusoid.shape().to_vec(),
            rhs: vec![2 * len - 1],
        });
    }
    let r = tape.constant(sinusoid.clone());
    let projected = tape.matmul(r, params.w_r)?;
    let d = tape.value(projected).dims2()?.1;
    let span = len - 1;
    let rows = (0..len)
        .flat_map(|i| (0..len).map(move |j| j + span - i))
        .collect();
    let spec = RelLogits {
        form: LogitForm::Xlnet,
        table: Some(projected),
        offset: 0,
        width: d,
        rows,
        content_bias: params.content_bias,
        position_bias: params.position_bias,
    };
    tape.rel_logits(q, k, spec)
}

/// `e[i][j] = (q_i·k_j)·a_ij / √d` with scalar `a` (signed or unsigned).
pub fn logits_m1m2(tape: &mut Tape, q: Var, k: Var, table: TableView<'_>) -> Result<Var> {
    table.expect_layout("scalar logits", &[RelLayout::ScalarUnsigned, RelLayout::ScalarSigned])?;
    let len = seq_len(tape, q)?;
    let spec = table.spec(LogitForm::Multiplicative, len)?;
    tape.rel_logits(q, k, spec)
}

/// `e[i][j] = Σₜ q_i[t]·k_j[t]·a_ij[t] / √d`
pub fn logits_m3(tape: &mut Tape, q: Var, k: Var, table: TableView<'_>) -> Result<Var> {
    table.expect_layout("gated logits", &[RelLayout::VectorSigned])?;
    let len = seq_len(tape, q)?;
    let spec = table.spec(LogitForm::Gated, len)?;
    tape.rel_logits(q, k, spec)
}

/// `e[i][j] = (q_i·k_j + q_i·a_ij + k_j·a_ij) / √d`
pub fn logits_m4(tape: &mut Tape, q: Var, k: Var, table: TableView<'_>) -> Result<Var> {
    table.expect_layout("pairwise logits", &[RelLayout::VectorSigned])?;
    let len = seq_len(tape, q)?;
    let spec = table.spec(LogitForm::Pairwise, len)?;
    tape.rel_logits(q, k, spec)
}

/// Same values as [`logits_m4`], computed as
/// `((q_i + a_ij)·(k_j + a_ij) − a_ij·a_ij) / √d`.
pub fn logits_m4_alt(tape: &mut Tape, q: Var, k: Var, table: TableView<'_>) -> Result<Var> {
    table.expect_layout("pairwise logits", &[RelLayout::VectorSigned])?;
    let len = seq_len(tape, q)?;
    let spec = table.spec(LogitForm::PairwiseExpanded, len)?;
    tape.rel_logits(q, k, spec)
}
