//! Declared forward+backward graphs and the fad-subgraph rewrite.
//!
//! Forward nodes are registry ops plus `input`/`param` leaves and the aux
//! ops the rewrite emits (`delem`, `jvp_mul`, `jvp_add`). Backward nodes are
//! `seed`, `vjp` (one operand slot of one forward op), `grad` (sum of
//! contributions) and `fad_acc` (Σ gᵢ ⊙ Dᵢ over a candidate's exits).
//!
//! Constant operands live in the `c` attribute, never in the argument list.

mod build;
mod interp;
mod partition;
mod rewrite;
mod text;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::OpKind;

pub use build::{from_program, grad_id, leaf_feeds, value_id};
pub use interp::{interpret, Evaluation};
pub use partition::{partition, select_candidates, FadSubgraph};
pub use rewrite::{optimize, prune_dead, rewrite, RewriteSummary};
pub use text::{parse, write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub op: String,
    pub args: Vec<String>,
    pub attrs: Vec<(String, String)>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: impl Into<String>, args: Vec<String>) -> Self {
        Node {
            id: id.into(),
            op: op.into(),
            args,
            attrs: Vec::new(),
        }
    }

    pub fn attr(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.attrs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Graph(format!("{}: missing attribute `{key}`", self.id)))
    }

    pub fn f64_attr(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Graph(format!("{}: `{key}={v}` is not a number", self.id)))
    }

    /// Registry op of a forward compute node.
    pub fn kind(&self) -> Option<OpKind> {
        OpKind::from_name(&self.op)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op.as_str(), "input" | "param")
    }

    /// Emitted by the rewrite; ignored by the partition.
    pub fn is_aux(&self) -> bool {
        matches!(self.op.as_str(), "delem" | "jvp_mul" | "jvp_add")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StaticGraph {
    pub forward: Vec<Node>,
    pub backward: Vec<Node>,
    /// (forward tensor, backward node consuming it)
    pub save_edges: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

impl StaticGraph {
    pub fn is_empty(&self) -> bool {
        self.forward.is_empty() && self.backward.is_empty() && self.outputs.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (Phase, &Node)> {
        self.forward
            .iter()
            .map(|n| (Phase::Forward, n))
            .chain(self.backward.iter().map(|n| (Phase::Backward, n)))
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes().map(|(_, n)| n).find(|n| n.id == id)
    }

    pub fn phase(&self, id: &str) -> Option<Phase> {
        self.nodes().find(|(_, n)| n.id == id).map(|(p, _)| p)
    }

    /// Forward position of every forward node.
    pub(crate) fn forward_index(&self) -> HashMap<&str, usize> {
        self.forward
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Save-edges implied by the backward arguments.
    pub fn derived_save_edges(&self) -> Vec<(String, String)> {
        let fwd: BTreeSet<&str> = self.forward.iter().map(|n| n.id.as_str()).collect();
        let mut out = Vec::new();
        for b in &self.backward {
            let mut seen = BTreeSet::new();
            for a in &b.args {
                if fwd.contains(a.as_str()) && seen.insert(a.as_str()) {
                    out.push((a.clone(), b.id.clone()));
                }
            }
        }
        out
    }

    /// Ids unique, arguments defined before use, save-edges consistent with
    /// the backward arguments, outputs defined.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for n in &self.forward {
            for a in &n.args {
                if !seen.contains(a.as_str()) {
                    return Err(Error::Graph(format!(
                        "{}: forward argument `{a}` not defined before use",
                        n.id
                    )));
                }
            }
            check_forward_op(n)?;
            if !seen.insert(&n.id) {
                return Err(Error::Graph(format!("duplicate id `{}`", n.id)));
            }
        }
        for n in &self.backward {
            for a in &n.args {
                if !seen.contains(a.as_str()) {
                    return Err(Error::Graph(format!(
                        "{}: backward argument `{a}` not defined before use",
                        n.id
                    )));
                }
            }
            if !matches!(n.op.as_str(), "seed" | "vjp" | "grad" | "fad_acc") {
                return Err(Error::Graph(format!(
                    "{}: `{}` is not a backward op",
                    n.id, n.op
                )));
            }
            if !seen.insert(&n.id) {
                return Err(Error::Graph(format!("duplicate id `{}`", n.id)));
            }
        }
        let declared: BTreeSet<(&str, &str)> = self
            .save_edges
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let derived = self.derived_save_edges();
        let derived: BTreeSet<(&str, &str)> = derived
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        if declared != derived || declared.len() != self.save_edges.len() {
            return Err(Error::Graph(
                "save-edges do not match the backward arguments".into(),
            ));
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                return Err(Error::Graph(format!("output `{o}` is not defined")));
            }
        }
        Ok(())
    }
}

fn check_forward_op(n: &Node) -> Result<()> {
    if n.is_leaf() {
        n.require("shape")?;
        return Ok(());
    }
    if n.is_aux() {
        return Ok(());
    }
    let kind = n
        .kind()
        .ok_or_else(|| Error::Graph(format!("{}: unknown op `{}`", n.id, n.op)))?;
    let def = kind.def();
    let tensors = def
        .operands
        .iter()
        .filter(|k| **k == crate::ops::OperandKind::Tensor)
        .count();
    if n.args.len() != tensors {
        return Err(Error::Graph(format!(
            "{}: {} takes {tensors} tensor arguments, got {}",
            n.id,
            def.name,
            n.args.len()
        )));
    }
    if tensors < def.arity() {
        n.f64_attr("c")?;
    }
    Ok(())
}
