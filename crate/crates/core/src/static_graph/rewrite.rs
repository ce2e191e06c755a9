//! Replace a fad subgraph's backward nodes with forward-mode derivatives.

use std::collections::{BTreeSet, HashSet};

use super::partition::{partition, select_candidates, FadSubgraph};
use super::{Node, StaticGraph};
use crate::error::{Error, Result};
use crate::ops::{OperandKind, Saved};

/// What [`optimize`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteSummary {
    pub subgraphs: usize,
    pub rewritten: Vec<FadSubgraph>,
    pub save_edges_before: usize,
    pub save_edges_after: usize,
}

/// Id of the first accumulate node a rewrite adds for `source`.
pub fn acc_id(source: &str) -> String {
    format!("{source}.acc")
}

/// Rewrite one candidate:
///
/// * forward gains `delem`/`jvp_mul`/`jvp_add` nodes computing, for every
///   member, the derivative D with respect to the source;
/// * every backward node of the members goes away; exit gradients keep only
///   their contributions from outside the subgraph;
/// * one `fad_acc` node feeds Σ g_exit ⊙ D_exit into the source gradient.
pub fn rewrite(g: &StaticGraph, cand: &FadSubgraph) -> Result<StaticGraph> {
    let members: BTreeSet<&str> = cand.members.iter().map(String::as_str).collect();
    let stale = || Error::StaleCandidate(cand.members.join(","));
    for m in &cand.members {
        if g.forward.iter().all(|n| &n.id != m) {
            return Err(stale());
        }
    }
    if !g
        .backward
        .iter()
        .any(|n| n.op == "vjp" && n.get("of").is_some_and(|o| members.contains(o)))
    {
        return Err(stale());
    }

    let taken: HashSet<&str> = g.nodes().map(|(_, n)| n.id.as_str()).collect();
    let fresh = |id: String| -> Result<String> {
        if taken.contains(id.as_str()) {
            Err(Error::Graph(format!("rewrite would reuse id `{id}`")))
        } else {
            Ok(id)
        }
    };

    // Forward-mode derivative of every member.
    let mut jvp_nodes: Vec<Node> = Vec::new();
    let mut deriv: std::collections::HashMap<&str, String> = std::collections::HashMap::new();
    for n in g.forward.iter().filter(|n| members.contains(n.id.as_str())) {
        let kind = n
            .kind()
            .ok_or_else(|| Error::Graph(format!("{}: member is not a registry op", n.id)))?;
        let def = kind.def();
        let mut tensors = n.args.iter();
        let slots: Vec<Option<&String>> = def
            .operands
            .iter()
            .map(|k| match k {
                OperandKind::Tensor => tensors.next(),
                OperandKind::Const => None,
            })
            .collect();
        let saved: Vec<String> = def
            .saves_for_vjp
            .iter()
            .map(|s| match s {
                Saved::Output => n.id.clone(),
                Saved::Input(j) => slots[*j].expect("ops never save constants").clone(),
            })
            .collect();
        let mut terms = Vec::new();
        for (k, input) in slots.iter().enumerate() {
            let Some(input) = input else { continue };
            let mut d = Node::new(fresh(format!("{}.d{k}", n.id))?, "delem", saved.clone())
                .attr("op", def.name)
                .attr("slot", k);
            if let Some(c) = n.get("c") {
                d = d.attr("c", c);
            }
            if saved.is_empty() {
                // Constant derivative; only the shape is needed.
                d = d.attr("like", &n.id);
            }
            let d_id = d.id.clone();
            jvp_nodes.push(d);
            if members.contains(input.as_str()) {
                let m = Node::new(
                    fresh(format!("{}.m{k}", n.id))?,
                    "jvp_mul",
                    vec![d_id, deriv[input.as_str()].clone()],
                );
                terms.push(m.id.clone());
                jvp_nodes.push(m);
            } else if input.as_str() == cand.source {
                terms.push(d_id);
            } else {
                return Err(Error::Graph(format!(
                    "{}: reads `{input}`, outside the subgraph and not its source",
                    n.id
                )));
            }
        }
        let mut acc = terms[0].clone();
        for (k, t) in terms.iter().enumerate().skip(1) {
            let a = Node::new(
                fresh(format!("{}.a{k}", n.id))?,
                "jvp_add",
                vec![acc, t.clone()],
            );
            acc = a.id.clone();
            jvp_nodes.push(a);
        }
        deriv.insert(n.id.as_str(), acc);
    }

    // Backward nodes produced by members.
    let removed: HashSet<&str> = g
        .backward
        .iter()
        .filter(|n| n.op == "vjp" && n.get("of").is_some_and(|o| members.contains(o)))
        .map(|n| n.id.as_str())
        .collect();
    let exits: BTreeSet<&str> = cand.exits.iter().map(String::as_str).collect();

    let mut backward: Vec<Node> = Vec::with_capacity(g.backward.len());
    let mut pairs: Vec<String> = Vec::new();
    let mut dropped: HashSet<String> = HashSet::new();
    let mut acc_done = false;
    for n in &g.backward {
        if removed.contains(n.id.as_str()) {
            continue;
        }
        let of = n.get("of").unwrap_or_default();
        let grad_like = matches!(n.op.as_str(), "grad" | "seed");
        if grad_like && members.contains(of) {
            if !exits.contains(of) {
                dropped.insert(n.id.clone());
                continue;
            }
            if acc_done {
                return Err(Error::Graph(format!(
                    "{}: exit gradient after the source gradient",
                    n.id
                )));
            }
            let mut kept = n.clone();
            kept.args.retain(|a| !removed.contains(a.as_str()));
            if kept.op == "grad" && kept.args.is_empty() {
                dropped.insert(n.id.clone());
                continue;
            }
            pairs.push(kept.id.clone());
            pairs.push(deriv[of].clone());
            backward.push(kept);
            continue;
        }
        if n.op == "grad" && of == cand.source {
            let mut kept = n.clone();
            kept.args.retain(|a| !removed.contains(a.as_str()));
            if !pairs.is_empty() {
                // Several candidates may share a source.
                let id = std::iter::once(acc_id(&cand.source))
                    .chain((1..).map(|k| format!("{}{k}", acc_id(&cand.source))))
                    .find(|id| !taken.contains(id.as_str()))
                    .expect("unbounded");
                let acc = Node::new(id, "fad_acc", pairs.clone()).attr("of", &cand.source);
                kept.args.push(acc.id.clone());
                backward.push(acc);
            }
            acc_done = true;
            backward.push(kept);
            continue;
        }
        if n.args
            .iter()
            .any(|a| dropped.contains(a) || removed.contains(a.as_str()))
        {
            return Err(Error::Graph(format!(
                "{}: consumes a gradient internal to the subgraph",
                n.id
            )));
        }
        backward.push(n.clone());
    }

    if !acc_done {
        return Err(Error::Graph(format!(
            "no gradient node for source `{}`",
            cand.source
        )));
    }
    let mut out = StaticGraph {
        forward: g.forward.clone(),
        backward,
        save_edges: Vec::new(),
        outputs: g.outputs.clone(),
    };
    out.forward.extend(jvp_nodes);
    out.save_edges = out.derived_save_edges();
    out.validate()?;
    Ok(out)
}

/// Drop nodes no output depends on. Leaves always stay.
pub fn prune_dead(g: &StaticGraph) -> StaticGraph {
    if g.outputs.is_empty() {
        return g.clone();
    }
    let mut live: HashSet<&str> = g.outputs.iter().map(String::as_str).collect();
    let all: Vec<&Node> = g.nodes().map(|(_, n)| n).collect();
    for n in all.iter().rev() {
        if live.contains(n.id.as_str()) {
            for a in &n.args {
                live.insert(a);
            }
            if let Some(like) = n.get("like") {
                live.insert(like);
            }
            // vjp reads its consumer's operand shapes.
            if n.op == "vjp" {
                if let Some(of) = n.get("of") {
                    live.insert(of);
                    if let Some(c) = g.node(of) {
                        for a in &c.args {
                            live.insert(a);
                        }
                    }
                }
            }
        }
    }
    let keep = |n: &&Node| n.is_leaf() || live.contains(n.id.as_str());
    let mut out = StaticGraph {
        forward: g.forward.iter().filter(keep).cloned().collect(),
        backward: g.backward.iter().filter(keep).cloned().collect(),
        save_edges: Vec::new(),
        outputs: g.outputs.clone(),
    };
    out.save_edges = out.derived_save_edges();
    out
}

/// Partition, rewrite every candidate in source order, prune dead nodes.
pub fn optimize(g: &StaticGraph) -> Result<(StaticGraph, RewriteSummary)> {
    let subgraphs = partition(g)?;
    let cands = select_candidates(g, &subgraphs);
    let mut cur = g.clone();
    for c in &cands {
        cur = rewrite(&cur, c)?;
    }
    let cur = prune_dead(&cur);
    let summary = RewriteSummary {
        subgraphs: subgraphs.len(),
        rewritten: cands,
        save_edges_before: g.save_edges.len(),
        save_edges_after: cur.save_edges.len(),
    };
    Ok((cur, summary))
}
