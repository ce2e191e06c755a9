//! Split the forward graph into maximal connected fad components.

use std::collections::{BTreeSet, HashMap};

use super::StaticGraph;
use crate::error::{Error, Result};
use crate::ops::{self, InputMeta, OperandKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FadSubgraph {
    /// Member node ids in forward order.
    pub members: Vec<String>,
    /// The single tensor every member derives from.
    pub source: String,
    /// Distinct external tensors read by members.
    pub in_edges: Vec<String>,
    /// (member, external forward consumer); `consumer` is `None` when the
    /// member is a graph output.
    pub out_edges: Vec<(String, Option<String>)>,
    /// Members read from outside, in forward order.
    pub exits: Vec<String>,
    pub in_degree: usize,
    pub out_degree: usize,
    /// Members still have their own backward nodes, i.e. the subgraph has
    /// not been rewritten yet.
    pub has_backward: bool,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Fad flag and source token of every non-aux forward node.
pub(crate) fn classify(g: &StaticGraph) -> Result<HashMap<String, (bool, String)>> {
    let idx = g.forward_index();
    // Node positions are unique, so they serve as source tokens.
    let token = |id: &str| crate::tensor::TensorId(idx[id] as u64);
    let mut meta: HashMap<String, (bool, String)> = HashMap::new();
    for n in &g.forward {
        if n.is_aux() {
            continue;
        }
        let Some(kind) = n.kind() else {
            if n.is_leaf() {
                meta.insert(n.id.clone(), (false, n.id.clone()));
                continue;
            }
            return Err(Error::Graph(format!("{}: unknown op `{}`", n.id, n.op)));
        };
        let mut tensors = n.args.iter();
        let inputs: Vec<InputMeta> = kind
            .def()
            .operands
            .iter()
            .map(|k| match k {
                OperandKind::Const => Ok(InputMeta::Const),
                OperandKind::Tensor => {
                    let a = tensors
                        .next()
                        .ok_or_else(|| Error::Graph(format!("{}: too few arguments", n.id)))?;
                    let (is_fad, src) = meta.get(a).ok_or_else(|| {
                        Error::Graph(format!("{}: argument `{a}` is not a forward value", n.id))
                    })?;
                    Ok(InputMeta::Tensor {
                        is_fad: *is_fad,
                        source: token(src),
                    })
                }
            })
            .collect::<Result<_>>()?;
        let cls = ops::classify(kind, &inputs);
        let source = if cls.fad {
            // Any tensor argument carries the common source.
            let a = n.args.first().expect("fad ops take a tensor");
            meta[a].1.clone()
        } else {
            n.id.clone()
        };
        meta.insert(n.id.clone(), (cls.fad, source));
    }
    Ok(meta)
}

/// Maximal connected components of fad nodes, in forward order of their
/// first member.
pub fn partition(g: &StaticGraph) -> Result<Vec<FadSubgraph>> {
    if g.forward.is_empty() && !g.backward.is_empty() {
        return Err(Error::Graph("backward without forward".into()));
    }
    let meta = classify(g)?;
    let idx = g.forward_index();
    let fad: Vec<bool> = g
        .forward
        .iter()
        .map(|n| meta.get(&n.id).is_some_and(|m| m.0))
        .collect();
    let mut parent: Vec<usize> = (0..g.forward.len()).collect();
    for (i, n) in g.forward.iter().enumerate() {
        if !fad[i] {
            continue;
        }
        for a in &n.args {
            let j = idx[a.as_str()];
            if fad[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for (i, _) in fad.iter().enumerate().filter(|(_, f)| **f) {
        let r = find(&mut parent, i);
        let k = *slot.entry(r).or_insert_with(|| {
            groups.push((r, Vec::new()));
            groups.len() - 1
        });
        groups[k].1.push(i);
    }

    let outputs: BTreeSet<&str> = g.outputs.iter().map(String::as_str).collect();
    let with_vjp: BTreeSet<&str> = g
        .backward
        .iter()
        .filter(|n| n.op == "vjp")
        .filter_map(|n| n.get("of"))
        .collect();
    let mut out = Vec::with_capacity(groups.len());
    for (_, members) in groups {
        let set: BTreeSet<usize> = members.iter().copied().collect();
        let mut in_edges = Vec::new();
        for &m in &members {
            for a in &g.forward[m].args {
                if !set.contains(&idx[a.as_str()]) && !in_edges.contains(a) {
                    in_edges.push(a.clone());
                }
            }
        }
        let mut out_edges = Vec::new();
        let mut exits = Vec::new();
        for &m in &members {
            let id = &g.forward[m].id;
            let mut is_exit = false;
            for (j, c) in g.forward.iter().enumerate() {
                if set.contains(&j) || c.is_aux() || !c.args.contains(id) {
                    continue;
                }
                out_edges.push((id.clone(), Some(c.id.clone())));
                is_exit = true;
            }
            if outputs.contains(id.as_str()) {
                out_edges.push((id.clone(), None));
                is_exit = true;
            }
            if is_exit {
                exits.push(id.clone());
            }
        }
        let member_ids: Vec<String> = members.iter().map(|&m| g.forward[m].id.clone()).collect();
        let has_backward = member_ids.iter().any(|m| with_vjp.contains(m.as_str()));
        out.push(FadSubgraph {
            source: meta[&member_ids[0]].1.clone(),
            in_degree: in_edges.len(),
            out_degree: exits.len(),
            members: member_ids,
            in_edges,
            out_edges,
            exits,
            has_backward,
        });
    }
    Ok(out)
}

/// In-degree 1, at least one exit, and not yet rewritten; sorted by the
/// forward position of the source.
pub fn select_candidates(g: &StaticGraph, subgraphs: &[FadSubgraph]) -> Vec<FadSubgraph> {
    let idx = g.forward_index();
    let mut c: Vec<FadSubgraph> = subgraphs
        .iter()
        .filter(|s| s.in_degree == 1 && s.out_degree >= 1 && s.has_backward)
        .cloned()
        .collect();
    c.sort_by_key(|s| idx.get(s.source.as_str()).copied().unwrap_or(usize::MAX));
    c
}
