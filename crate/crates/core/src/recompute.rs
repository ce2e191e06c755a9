//! Element-wise chain programs kept for recomputation.
//!
//! In recompute mode a chain forgets every interior value. It keeps only the
//! op sequence from its source, which the backward pass replays.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::ops::{self, Arg, OpKind, View};
use crate::tensor::{Shape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainArg {
    Source,
    Step(TensorId),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep {
    pub out: TensorId,
    pub op: OpKind,
    pub args: Vec<ChainArg>,
}

/// Ops needed to rebuild `end` from the source, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainProgram {
    pub steps: Vec<ChainStep>,
    pub end: TensorId,
}

impl ChainProgram {
    pub fn single(step: ChainStep) -> Self {
        let end = step.out;
        ChainProgram {
            steps: vec![step],
            end,
        }
    }

    /// Union of the input programs followed by `step`. Tensor ids grow
    /// monotonically, so sorting by id keeps producers first.
    pub fn extend(inputs: &[&ChainProgram], step: ChainStep) -> Self {
        let mut by_id: BTreeMap<TensorId, ChainStep> = BTreeMap::new();
        for p in inputs {
            for s in &p.steps {
                by_id.entry(s.out).or_insert_with(|| s.clone());
            }
        }
        let end = step.out;
        by_id.insert(step.out, step);
        ChainProgram {
            steps: by_id.into_values().collect(),
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Re-run the chain from `source` and return `∂end/∂source ⊙ upstream`
    /// (the VJP of the whole chain) plus the number of kernels re-executed.
    pub fn replay_vjp(
        &self,
        source: &[f64],
        shape: &Shape,
        upstream: &[f64],
    ) -> Result<(Vec<f64>, usize)> {
        let mut values: BTreeMap<TensorId, Vec<f64>> = BTreeMap::new();
        for step in &self.steps {
            let args: Vec<Arg<'_>> = step
                .args
                .iter()
                .map(|a| match a {
                    ChainArg::Source => Arg::Tensor(View {
                        shape,
                        data: source,
                    }),
                    ChainArg::Step(id) => Arg::Tensor(View {
                        shape,
                        data: &values[id],
                    }),
                    ChainArg::Const(c) => Arg::Const(*c),
                })
                .collect();
            let out = ops::forward(step.op, &args)?;
            values.insert(step.out, out.data);
        }

        let mut grads: BTreeMap<TensorId, Vec<f64>> = BTreeMap::new();
        grads.insert(self.end, upstream.to_vec());
        let mut src_grad = vec![0.0; source.len()];
        for step in self.steps.iter().rev() {
            let Some(g) = grads.remove(&step.out) else {
                continue;
            };
            let args: Vec<Arg<'_>> = step
                .args
                .iter()
                .map(|a| match a {
                    ChainArg::Source => Arg::Tensor(View {
                        shape,
                        data: source,
                    }),
                    ChainArg::Step(id) => Arg::Tensor(View {
                        shape,
                        data: &values[id],
                    }),
                    ChainArg::Const(c) => Arg::Const(*c),
                })
                .collect();
            let out = View {
                shape,
                data: &values[&step.out],
            };
            let saved = ops::saved_views(step.op, &args, out);
            let c = ops::const_of(&args);
            let shapes: Vec<Option<Shape>> = step
                .args
                .iter()
                .map(|a| match a {
                    ChainArg::Const(_) => None,
                    _ => Some(shape.clone()),
                })
                .collect();
            let input_grads = ops::vjp(step.op, &saved, c, &shapes, &g)?;
            for (arg, ig) in step.args.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match arg {
                    ChainArg::Source => add_into(&mut src_grad, &ig),
                    ChainArg::Step(id) => match grads.get_mut(id) {
                        Some(acc) => add_into(acc, &ig),
                        None => {
                            grads.insert(*id, ig);
                        }
                    },
                    ChainArg::Const(_) => {}
                }
            }
        }
        Ok((src_grad, self.steps.len()))
    }
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
