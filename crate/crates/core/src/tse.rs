//! Textual semantics: a role graph over occurrence, action and entity nodes,
//! one relational graph-convolution layer with residual, and the holistic
//! (occurrence row) and discrete (summed action and entity rows) vectors.

use ndarray::Array2;

use crate::datamodel::TextRecord;
use crate::encoders::encode_text_global;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::params::RgcnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Occurrence,
    Action,
    Entity,
}

/// Typed, row-normalized adjacency over `[occurrence; actions; entities]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleGraph {
    pub kinds: Vec<NodeKind>,
    /// One matrix per relation; relations `0..num_roles` link entities to
    /// actions, relation `num_roles` links actions to the occurrence node.
    pub adjacency: Vec<Array2<f64>>,
}

impl RoleGraph {
    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_relations(&self) -> usize {
        self.adjacency.len()
    }
}

fn row_normalize(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let s = row.sum();
        if s != 0.0 {
            row.mapv_inplace(|x| x / s);
        }
    }
}

/// Symmetric entity-action edges typed by role, symmetric action-occurrence
/// edges in the reserved relation, then row normalization.
pub fn build_role_graph(text: &TextRecord, num_roles: usize) -> Result<RoleGraph> {
    let actions = text.actions.len();
    let n = 1 + actions + text.entities.len();
    let mut kinds = vec![NodeKind::Occurrence];
    kinds.extend(std::iter::repeat(NodeKind::Action).take(actions));
    kinds.extend(std::iter::repeat(NodeKind::Entity).take(text.entities.len()));

    let mut adjacency = vec![Array2::zeros((n, n)); num_roles + 1];
    for a in 0..actions {
        let g = &mut adjacency[num_roles];
        g[[0, 1 + a]] = 1.0;
        g[[1 + a, 0]] = 1.0;
    }
    for (e, ent) in text.entities.iter().enumerate() {
        let (r, a) = (ent.role_id as usize, ent.action_index as usize);
        if r >= num_roles || a >= actions {
            return Err(Error::InvalidRecord {
                id: text.text_id.clone(),
                reason: format!("entity {e}: role {r} / action {a} out of range"),
            });
        }
        let (ei, ai) = (1 + actions + e, 1 + a);
        adjacency[r][[ei, ai]] = 1.0;
        adjacency[r][[ai, ei]] = 1.0;
    }
    adjacency.iter_mut().for_each(row_normalize);
    Ok(RoleGraph { kinds, adjacency })
}

fn span_mean(tape: &mut Tape, table: Var, span: &[u32], what: impl FnOnce() -> String) -> Result<Var> {
    if span.is_empty() {
        return Err(Error::EmptySpan(what()));
    }
    let ids: Vec<usize> = span.iter().map(|&t| t as usize).collect();
    let rows = tape.gather_rows(table, &ids)?;
    tape.mean_rows(rows)
}

/// Initial node matrix: the occurrence encoder output, then the mean token
/// embedding of every action span and every entity span.
pub fn init_role_nodes(tape: &mut Tape, text: &TextRecord, params: &RgcnParams<Var>) -> Result<Var> {
    let table = params.occurrence.token_embedding;
    let mut rows = Vec::with_capacity(1 + text.actions.len() + text.entities.len());
    rows.push(encode_text_global(tape, text.occurrence_tokens(), &params.occurrence)?);
    for (a, span) in text.actions.iter().enumerate() {
        rows.push(span_mean(tape, table, span, || format!("text `{}` action {a}", text.text_id))?);
    }
    for (e, ent) in text.entities.iter().enumerate() {
        rows.push(span_mean(tape, table, &ent.tokens, || format!("text `{}` entity {e}", text.text_id))?);
    }
    tape.stack_rows(&rows)
}

/// `ReLU(sum_r G^r E W^r + E)`. Relations without edges contribute nothing
/// and are skipped.
pub fn rgcn_layer(tape: &mut Tape, nodes: Var, graph: &RoleGraph, weights: &[Var]) -> Result<Var> {
    if weights.len() != graph.num_relations() {
        return Err(Error::shape(
            "rgcn",
            format!("{} relation weights for {} relations", weights.len(), graph.num_relations()),
        ));
    }
    let mut acc = nodes;
    for (g, &w) in graph.adjacency.iter().zip(weights) {
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let g = tape.constant(g.clone());
        let msg = tape.matmul(g, nodes)?;
        let msg = tape.matmul(msg, w)?;
        acc = tape.add(msg, acc)?;
    }
    tape.relu(acc)
}

#[derive(Debug, Clone, Copy)]
pub struct TextSemantics {
    /// Holistic: the occurrence node row.
    pub ths: Var,
    /// Discrete: sum of action and entity rows (mean in the pooling ablation).
    pub tds: Var,
    /// Elementwise mean of the two.
    pub ts: Var,
}

/// Mean of two 1 x d rows.
pub fn mean_of_two(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Runs node initialization, graph reasoning and extraction. With
/// `mean_pool` set, reasoning is bypassed and the discrete vector is the mean
/// of the initialized action and entity rows.
pub fn textual_semantics(
    tape: &mut Tape,
    text: &TextRecord,
    graph: &RoleGraph,
    params: &RgcnParams<Var>,
    mean_pool: bool,
) -> Result<TextSemantics> {
    let e0 = init_role_nodes(tape, text, params)?;
    let n = graph.num_nodes();
    let d = tape.shape(e0).1;
    let nodes = if mean_pool {
        e0
    } else {
        rgcn_layer(tape, e0, graph, &params.relation_weights)?
    };
    let ths = tape.select_row(nodes, 0)?;
    let tds = if n == 1 {
        tape.warn();
        tape.constant(Array2::zeros((1, d)))
    } else {
        let weight = if mean_pool { 1.0 / (n - 1) as f64 } else { 1.0 };
        let mut sel = Array2::from_elem((1, n), weight);
        sel[[0, 0]] = 0.0;
        let sel = tape.constant(sel);
        tape.matmul(sel, nodes)?
    };
    let ts = mean_of_two(tape, ths, tds)?;
    Ok(TextSemantics { ths, tds, ts })
}
