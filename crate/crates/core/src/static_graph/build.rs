//! Lower a [`Program`] into a static graph with its full backward pass.

use std::collections::BTreeMap;

use super::{Node, StaticGraph};
use crate::error::Result;
use crate::ops::{OperandKind, Saved};
use crate::program::{Arg, Program};
use crate::tensor::{Category, Dense};

pub fn value_id(v: usize) -> String {
    format!("v{v}")
}

pub fn grad_id(v: usize) -> String {
    format!("g{v}")
}

fn vjp_id(v: usize, slot: usize) -> String {
    format!("d{v}_{slot}")
}

/// Feeds for the program's leaves, keyed by value id.
pub fn leaf_feeds(p: &Program) -> Result<BTreeMap<String, Dense>> {
    p.leaves
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((value_id(i), Dense::new(l.shape.clone(), l.data.clone())?)))
        .collect()
}

/// Forward nodes `v{i}`, gradient nodes `g{i}`. Outputs: the loss, then the
/// gradient of every leaf the loss depends on.
pub fn from_program(p: &Program) -> Result<StaticGraph> {
    let n_leaves = p.leaves.len();
    let mut g = StaticGraph::default();
    for (i, l) in p.leaves.iter().enumerate() {
        let op = if l.category == Category::Weight {
            "param"
        } else {
            "input"
        };
        g.forward.push(
            Node::new(value_id(i), op, vec![])
                .attr("name", &l.name)
                .attr("shape", &l.shape),
        );
    }
    for (k, ins) in p.instrs.iter().enumerate() {
        let mut args = Vec::new();
        let mut c = None;
        for a in &ins.args {
            match a {
                Arg::Val(v) => args.push(value_id(*v)),
                Arg::Const(x) => c = Some(*x),
            }
        }
        let mut n = Node::new(value_id(n_leaves + k), ins.op.name(), args);
        if let Some(c) = c {
            n = n.attr("c", c);
        }
        g.forward.push(n);
    }

    let loss = p.loss();
    let mut needs = vec![false; p.value_count()];
    needs[loss] = true;
    for k in (0..p.instrs.len()).rev() {
        if needs[n_leaves + k] {
            for a in &p.instrs[k].args {
                if let Arg::Val(v) = a {
                    needs[*v] = true;
                }
            }
        }
    }

    let mut contribs: Vec<Vec<String>> = vec![Vec::new(); p.value_count()];
    for k in (0..p.instrs.len()).rev() {
        let v = n_leaves + k;
        if !needs[v] {
            continue;
        }
        if v == loss {
            g.backward
                .push(Node::new(grad_id(v), "seed", vec![]).attr("of", value_id(v)));
        } else {
            g.backward.push(
                Node::new(grad_id(v), "grad", std::mem::take(&mut contribs[v]))
                    .attr("of", value_id(v)),
            );
        }
        let ins = &p.instrs[k];
        let def = ins.op.def();
        let saved: Vec<String> = def
            .saves_for_vjp
            .iter()
            .map(|s| match s {
                Saved::Output => value_id(v),
                Saved::Input(j) => match ins.args[*j] {
                    Arg::Val(x) => value_id(x),
                    Arg::Const(_) => unreachable!("ops never save constants"),
                },
            })
            .collect();
        for (slot, a) in ins.args.iter().enumerate() {
            let Arg::Val(x) = a else { continue };
            if def.operands[slot] != OperandKind::Tensor {
                continue;
            }
            let id = vjp_id(v, slot);
            let mut args = vec![grad_id(v)];
            args.extend(saved.iter().cloned());
            let mut n = Node::new(&id, "vjp", args)
                .attr("op", def.name)
                .attr("slot", slot)
                .attr("of", value_id(v));
            if let Some(Arg::Const(c)) = ins.args.iter().find(|a| matches!(a, Arg::Const(_))) {
                n = n.attr("c", c);
            }
            let mut seen = Vec::new();
            for s in &saved {
                if !seen.contains(s) {
                    seen.push(s.clone());
                    g.save_edges.push((s.clone(), id.clone()));
                }
            }
            g.backward.push(n);
            contribs[*x].push(id);
        }
    }
    g.outputs.push(value_id(loss));
    for i in 0..n_leaves {
        if needs[i] {
            g.backward.push(
                Node::new(grad_id(i), "grad", std::mem::take(&mut contribs[i]))
                    .attr("of", value_id(i)),
            );
            g.outputs.push(grad_id(i));
        }
    }
    g.validate()?;
    Ok(g)
}
