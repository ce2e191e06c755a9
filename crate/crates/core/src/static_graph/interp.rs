//! Reference evaluator for static graphs.

use std::collections::BTreeMap;

use super::{Node, StaticGraph};
use crate::error::{Error, Result};
use crate::ops::{self, Arg, OpKind, OperandKind, View};
use crate::tensor::{Dense, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: BTreeMap<String, Dense>,
}

impl Evaluation {
    pub fn get(&self, id: &str) -> Option<&Dense> {
        self.values.get(id)
    }
}

fn parse_shape(n: &Node) -> Result<Shape> {
    let s = n.require("shape")?;
    let dims = s
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Graph(format!("{}: bad shape `{s}`", n.id)))?;
    Shape::new(dims)
}

fn op_attr(n: &Node) -> Result<OpKind> {
    let name = n.require("op")?;
    OpKind::from_name(name).ok_or_else(|| Error::UnknownOp(name.to_string()))
}

fn c_attr(n: &Node) -> Result<f64> {
    match n.get("c") {
        Some(_) => n.f64_attr("c"),
        None => Ok(0.0),
    }
}

/// Evaluate every node in file order. `feeds` supplies `input`/`param`
/// values by node id.
pub fn interpret(g: &StaticGraph, feeds: &BTreeMap<String, Dense>) -> Result<Evaluation> {
    g.validate()?;
    let mut vals: BTreeMap<String, Dense> = BTreeMap::new();
    for n in &g.forward {
        let out = eval_forward(n, &vals, feeds)?;
        vals.insert(n.id.clone(), out);
    }
    for n in &g.backward {
        let out = eval_backward(g, n, &vals)?;
        vals.insert(n.id.clone(), out);
    }
    Ok(Evaluation { values: vals })
}

fn eval_forward(
    n: &Node,
    vals: &BTreeMap<String, Dense>,
    feeds: &BTreeMap<String, Dense>,
) -> Result<Dense> {
    let arg = |i: usize| -> &Dense { &vals[&n.args[i]] };
    match n.op.as_str() {
        "input" | "param" => {
            let d = feeds
                .get(&n.id)
                .ok_or_else(|| Error::MissingFeed(n.id.clone()))?;
            let want = parse_shape(n)?;
            if d.shape != want {
                return Err(Error::ShapeMismatch(format!(
                    "feed for {} has shape {}, declared {want}",
                    n.id, d.shape
                )));
            }
            Ok(d.clone())
        }
        "delem" => {
            let kind = op_attr(n)?;
            let slot: usize = n.f64_attr("slot")? as usize;
            let c = c_attr(n)?;
            let saved: Vec<&Dense> = (0..n.args.len()).map(arg).collect();
            let shape = match (saved.first(), n.get("like")) {
                (Some(d), _) => d.shape.clone(),
                (None, Some(like)) => vals.get(like).map(|d| d.shape.clone()).ok_or_else(|| {
                    Error::Graph(format!("{}: `like={like}` is not defined", n.id))
                })?,
                (None, None) => {
                    return Err(Error::Graph(format!(
                        "{}: delem needs saved tensors or `like`",
                        n.id
                    )))
                }
            };
            let mut scratch = vec![0.0; saved.len()];
            let data = (0..shape.numel())
                .map(|i| {
                    for (s, d) in scratch.iter_mut().zip(&saved) {
                        *s = d.data[i];
                    }
                    kind.d_elem(slot, &scratch, c)
                })
                .collect();
            Dense::new(shape, data)
        }
        "jvp_mul" | "jvp_add" => {
            let (a, b) = (arg(0), arg(1));
            let f = if n.op == "jvp_mul" {
                |x: f64, y: f64| x * y
            } else {
                |x: f64, y: f64| x + y
            };
            let data = crate::tensor::ew_binary(&a.data, &b.data, f)?;
            Dense::new(a.shape.clone(), data)
        }
        op => {
            let kind = OpKind::from_name(op).ok_or_else(|| Error::UnknownOp(op.to_string()))?;
            let c = c_attr(n)?;
            let mut tensors = n.args.iter();
            let args: Vec<Arg<'_>> = kind
                .def()
                .operands
                .iter()
                .map(|k| match k {
                    OperandKind::Tensor => {
                        let d = &vals[tensors.next().expect("validated arity")];
                        Arg::Tensor(View {
                            shape: &d.shape,
                            data: &d.data,
                        })
                    }
                    OperandKind::Const => Arg::Const(c),
                })
                .collect();
            ops::forward(kind, &args)
        }
    }
}

fn eval_backward(g: &StaticGraph, n: &Node, vals: &BTreeMap<String, Dense>) -> Result<Dense> {
    let arg = |i: usize| -> &Dense { &vals[&n.args[i]] };
    match n.op.as_str() {
        "seed" => {
            let of = &vals
                .get(n.require("of")?)
                .ok_or_else(|| Error::Graph(format!("{}: seed of unknown node", n.id)))?;
            Ok(Dense::filled(of.shape.clone(), 1.0))
        }
        "grad" => {
            let of = n.require("of")?;
            let shape = vals
                .get(of)
                .map(|d| d.shape.clone())
                .ok_or_else(|| Error::Graph(format!("{}: grad of unknown node `{of}`", n.id)))?;
            let mut acc = vec![0.0; shape.numel()];
            for a in &n.args {
                for (x, y) in acc.iter_mut().zip(&vals[a].data) {
                    *x += y;
                }
            }
            Dense::new(shape, acc)
        }
        "fad_acc" => {
            if !n.args.len().is_multiple_of(2) {
                return Err(Error::Graph(format!(
                    "{}: fad_acc takes (g, D) pairs",
                    n.id
                )));
            }
            let shape = arg(1).shape.clone();
            let mut acc = vec![0.0; shape.numel()];
            for pair in n.args.chunks(2) {
                let (gr, d) = (&vals[&pair[0]], &vals[&pair[1]]);
                for ((x, a), b) in acc.iter_mut().zip(&gr.data).zip(&d.data) {
                    *x += a * b;
                }
            }
            Dense::new(shape, acc)
        }
        "vjp" => {
            let kind = op_attr(n)?;
            let slot: usize = n.f64_attr("slot")? as usize;
            let c = c_attr(n)?;
            let of = g
                .node(n.require("of")?)
                .ok_or_else(|| Error::Graph(format!("{}: vjp of unknown node", n.id)))?;
            let mut tensors = of.args.iter();
            let input_shapes: Vec<Option<Shape>> = kind
                .def()
                .operands
                .iter()
                .map(|k| match k {
                    OperandKind::Tensor => tensors.next().map(|a| vals[a].shape.clone()),
                    OperandKind::Const => None,
                })
                .collect();
            let upstream = arg(0);
            let saved: Vec<View<'_>> = n.args[1..]
                .iter()
                .map(|a| View {
                    shape: &vals[a].shape,
                    data: &vals[a].data,
                })
                .collect();
            let mut grads = ops::vjp(kind, &saved, c, &input_shapes, &upstream.data)?;
            let shape = input_shapes.get(slot).cloned().flatten().ok_or_else(|| {
                Error::Graph(format!("{}: slot {slot} is not a tensor operand", n.id))
            })?;
            let data = grads
                .get_mut(slot)
                .and_then(Option::take)
                .ok_or_else(|| Error::Graph(format!("{}: no gradient for slot {slot}", n.id)))?;
            Dense::new(shape, data)
        }
        op => Err(Error::Graph(format!(
            "{}: `{op}` is not a backward op",
            n.id
        ))),
    }
}
