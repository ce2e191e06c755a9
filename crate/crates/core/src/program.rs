//! Straight-line tensor programs: a seeded generator of layered models with
//! random element-wise chains, and an executor that drives the engine.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Engine, EngineConfig, EngineStats};
use crate::error::{Error, Result};
use crate::ops::{OpKind, Operand};
use crate::tensor::{Category, Shape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct LeafDecl {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub category: Category,
}

/// Operand of an instruction: a value index (leaves first, then
/// instruction outputs) or a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arg {
    Val(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instr {
    pub op: OpKind,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub leaves: Vec<LeafDecl>,
    pub instrs: Vec<Instr>,
}

impl Program {
    pub fn value_count(&self) -> usize {
        self.leaves.len() + self.instrs.len()
    }

    /// The last instruction's output.
    pub fn loss(&self) -> usize {
        self.value_count() - 1
    }

    /// Index of the last instruction reading each value, `None` if unread.
    pub fn last_uses(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.value_count()];
        for (i, ins) in self.instrs.iter().enumerate() {
            for a in &ins.args {
                if let Arg::Val(v) = a {
                    last[*v] = Some(i);
                }
            }
        }
        last
    }

    pub fn numel(&self, v: usize) -> Result<usize> {
        Ok(self.shapes()?[v].numel())
    }

    /// Shape of every value.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = self.leaves.iter().map(|l| l.shape.clone()).collect();
        for ins in &self.instrs {
            let first = ins
                .args
                .iter()
                .find_map(|a| match a {
                    Arg::Val(v) => Some(shapes[*v].clone()),
                    Arg::Const(_) => None,
                })
                .ok_or_else(|| Error::Graph(format!("{} without tensor operand", ins.op)))?;
            let s = match ins.op {
                OpKind::MatMul => {
                    let Arg::Val(b) = ins.args[1] else {
                        return Err(Error::Graph("matmul by constant".into()));
                    };
                    Shape::matrix(first.dims()[0], shapes[b].dims()[1])?
                }
                OpKind::ReduceSum | OpKind::MseLoss => Shape::scalar(),
                _ => first,
            };
            shapes.push(s);
        }
        Ok(shapes)
    }
}

/// Result of running a program once.
#[derive(Debug)]
pub struct Execution {
    pub loss: f64,
    /// Gradient per leaf, in declaration order.
    pub grads: Vec<Vec<f64>>,
    pub stats: EngineStats,
    pub backward_nodes: usize,
    pub engine: Engine,
}

/// Execute with handles released right after their last use, then
/// backward and teardown.
pub fn execute(p: &Program, config: EngineConfig) -> Result<Execution> {
    let mut e = Engine::new(config);
    let last = p.last_uses();
    let mut ids: Vec<TensorId> = Vec::with_capacity(p.value_count());
    for l in &p.leaves {
        let id = match l.category {
            Category::Weight => e.weight(l.shape.clone(), l.data.clone())?,
            _ => e.input(l.shape.clone(), l.data.clone())?,
        };
        ids.push(id);
    }
    let leaf_ids = ids.clone();
    let nleaves = p.leaves.len();
    for (v, l) in last.iter().enumerate().take(nleaves) {
        if l.is_none() {
            e.release(ids[v])?;
        }
    }
    for (i, ins) in p.instrs.iter().enumerate() {
        let operands: Vec<Operand> = ins
            .args
            .iter()
            .map(|a| match a {
                Arg::Val(v) => Operand::Tensor(ids[*v]),
                Arg::Const(c) => Operand::Const(*c),
            })
            .collect();
        ids.push(e.apply(ins.op, &operands)?);
        let mut seen = Vec::new();
        for a in &ins.args {
            if let Arg::Val(v) = a {
                if last[*v] == Some(i) && !seen.contains(v) {
                    seen.push(*v);
                    e.release(ids[*v])?;
                }
            }
        }
        let out = nleaves + i;
        if last[out].is_none() && out != p.loss() {
            e.release(ids[out])?;
        }
    }
    let loss_id = ids[p.loss()];
    let loss = e.data(loss_id)?[0];
    let backward_nodes = e.tape().len();
    let g = e.backward(loss_id, 1.0)?;
    let grads = leaf_ids
        .iter()
        .zip(&p.leaves)
        .map(|(id, l)| {
            g.get(*id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; l.shape.numel()])
        })
        .collect();
    e.release(loss_id)?;
    e.teardown()?;
    Ok(Execution {
        loss,
        grads,
        stats: e.stats().clone(),
        backward_nodes,
        engine: e,
    })
}

/// Knobs for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub max_layers: usize,
    pub max_chain: usize,
    pub max_dim: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_layers: 3,
            max_chain: 8,
            max_dim: 8,
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    p: Program,
}

impl Builder {
    fn leaf(&mut self, name: String, shape: Shape, category: Category, range: f64) -> usize {
        let data = (0..shape.numel())
            .map(|_| self.rng.gen_range(-range..=range))
            .collect();
        self.p.leaves.push(LeafDecl {
            name,
            shape,
            data,
            category,
        });
        self.p.leaves.len() - 1
    }

    fn push(&mut self, op: OpKind, args: Vec<Arg>) -> usize {
        self.p.instrs.push(Instr { op, args });
        self.p.leaves.len() + self.p.instrs.len() - 1
    }
}

/// A value of the chain under construction, with a bound on |value|.
#[derive(Clone, Copy)]
struct Live {
    v: usize,
    bound: f64,
    used: bool,
}

/// Random layered program: per layer a matmul, an optional bias, and a
/// random element-wise chain of depth ≤ `max_chain` from the affine output.
/// Values stay bounded so every kernel is well conditioned. numel ≤ 64.
///
/// Leaves come first in the value numbering, so layer weights are declared
/// up front; instructions then reference them by index.
pub fn generate(seed: u64, cfg: GenConfig) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=cfg.max_layers);
    let rows = rng.gen_range(1..=cfg.max_dim.min(4));
    let max_cols = (64 / rows).min(cfg.max_dim);
    let dims: Vec<usize> = (0..=layers).map(|_| rng.gen_range(1..=max_cols)).collect();
    let mut b = Builder {
        rng,
        p: Program {
            leaves: Vec::new(),
            instrs: Vec::new(),
        },
    };
    // Plan the leaves first; indices are fixed before any instruction.
    let x = b.leaf(
        "x".into(),
        Shape::matrix(rows, dims[0]).expect("dims > 0"),
        Category::Input,
        2.0,
    );
    let mut plan = Vec::new();
    for l in 0..layers {
        let scale = 1.0 / (dims[l] as f64).sqrt();
        let w = b.leaf(
            format!("w{l}"),
            Shape::matrix(dims[l], dims[l + 1]).expect("dims > 0"),
            Category::Weight,
            scale,
        );
        let bias = b.rng.gen_bool(0.6).then(|| {
            b.leaf(
                format!("b{l}"),
                Shape::vector(dims[l + 1]).expect("dims > 0"),
                Category::Weight,
                0.5,
            )
        });
        let gate = b.rng.gen_bool(0.4).then(|| {
            b.leaf(
                format!("g{l}"),
                Shape::matrix(rows, dims[l + 1]).expect("dims > 0"),
                Category::Weight,
                1.0,
            )
        });
        plan.push((w, bias, gate));
    }
    let mse = b.rng.gen_bool(0.5);
    let target = mse.then(|| {
        b.leaf(
            "y".into(),
            Shape::matrix(rows, dims[layers]).expect("dims > 0"),
            Category::Input,
            1.0,
        )
    });

    let mut h = x;
    let mut h_bound = 2.0;
    for (l, (w, bias, gate)) in plan.into_iter().enumerate() {
        let mut z = b.push(OpKind::MatMul, vec![Arg::Val(h), Arg::Val(w)]);
        // |Σ h·w| ≤ fan_in · bound · 1/√fan_in
        h_bound *= (dims[l] as f64).sqrt();
        if let Some(bv) = bias {
            z = b.push(OpKind::BiasAdd, vec![Arg::Val(z), Arg::Val(bv)]);
            h_bound += 0.5;
        }
        let (out, bound) = chain(&mut b, z, h_bound, cfg.max_chain, gate);
        h = out;
        h_bound = bound;
    }
    match target {
        Some(t) => b.push(OpKind::MseLoss, vec![Arg::Val(h), Arg::Val(t)]),
        None => b.push(OpKind::ReduceSum, vec![Arg::Val(h)]),
    };
    b.p
}

/// Grow a fad chain from `src`; returns the layer output and its bound.
fn chain(
    b: &mut Builder,
    src: usize,
    src_bound: f64,
    max_chain: usize,
    gate: Option<usize>,
) -> (usize, f64) {
    let depth = b.rng.gen_range(0..=max_chain);
    if depth == 0 {
        return (src, src_bound);
    }
    let mut pool: Vec<Live> = Vec::new();
    let mut ops = 0;
    while ops < depth {
        let pick = |b: &mut Builder, pool: &[Live]| -> (usize, f64, Option<usize>) {
            // Index into pool, or the source itself.
            if pool.is_empty() || b.rng.gen_bool(0.2) {
                (src, src_bound, None)
            } else {
                let i = if b.rng.gen_bool(0.6) {
                    pool.len() - 1
                } else {
                    b.rng.gen_range(0..pool.len())
                };
                (pool[i].v, pool[i].bound, Some(i))
            }
        };
        let (a, ab, ai) = pick(b, &pool);
        let choice = b.rng.gen_range(0..10);
        let (v, bound, extra) = match choice {
            0 => (b.push(OpKind::Tanh, vec![Arg::Val(a)]), 1.0, None),
            1 => (b.push(OpKind::Sigmoid, vec![Arg::Val(a)]), 1.0, None),
            2 => (b.push(OpKind::Softplus, vec![Arg::Val(a)]), ab + 1.0, None),
            3 => (b.push(OpKind::Relu, vec![Arg::Val(a)]), ab, None),
            4 if ab <= 3.0 => {
                if b.rng.gen_bool(0.5) {
                    (b.push(OpKind::Exp, vec![Arg::Val(a)]), ab.exp(), None)
                } else {
                    let k = *[2.0, 3.0].choose(&mut b.rng).expect("non-empty");
                    (
                        b.push(OpKind::PowConst, vec![Arg::Val(a), Arg::Const(k)]),
                        ab.powf(k),
                        None,
                    )
                }
            }
            4 | 5 => {
                let c = b.rng.gen_range(-1.5..=1.5);
                if b.rng.gen_bool(0.5) {
                    (
                        b.push(OpKind::ConstMul, vec![Arg::Val(a), Arg::Const(c)]),
                        ab * c.abs(),
                        None,
                    )
                } else {
                    (
                        b.push(OpKind::ConstAdd, vec![Arg::Val(a), Arg::Const(c)]),
                        ab + c.abs(),
                        None,
                    )
                }
            }
            6 => (b.push(OpKind::Neg, vec![Arg::Val(a)]), ab, None),
            7 if ops + 3 <= depth => {
                // a / (1 + sigmoid(d)); the denominator lies in [1, 2].
                let (d, _, di) = pick(b, &pool);
                let s = b.push(OpKind::Sigmoid, vec![Arg::Val(d)]);
                let den = b.push(OpKind::ConstAdd, vec![Arg::Val(s), Arg::Const(1.0)]);
                ops += 2;
                (
                    b.push(OpKind::Div, vec![Arg::Val(a), Arg::Val(den)]),
                    ab,
                    di,
                )
            }
            _ => {
                let (d, db, di) = pick(b, &pool);
                let op = if ab * db <= 16.0 {
                    *[OpKind::Add, OpKind::Sub, OpKind::Mul]
                        .choose(&mut b.rng)
                        .expect("non-empty")
                } else {
                    *[OpKind::Add, OpKind::Sub]
                        .choose(&mut b.rng)
                        .expect("non-empty")
                };
                let bound = if op == OpKind::Mul { ab * db } else { ab + db };
                (b.push(op, vec![Arg::Val(a), Arg::Val(d)]), bound, di)
            }
        };
        for i in [ai, extra].into_iter().flatten() {
            pool[i].used = true;
        }
        pool.push(Live {
            v,
            bound,
            used: false,
        });
        ops += 1;
    }

    // Pick 1-2 exits among unused values, then fold every other dangling
    // value into the first exit so nothing is left unconsumed.
    let dangling: Vec<usize> = (0..pool.len()).filter(|i| !pool[*i].used).collect();
    let two = dangling.len() >= 2 && b.rng.gen_bool(0.5);
    let first = *dangling.last().expect("the newest value is never used");
    let second = two.then(|| dangling[dangling.len() - 2]);
    let mut e1 = pool[first];
    for i in dangling {
        if i == first || Some(i) == second {
            continue;
        }
        let v = b.push(OpKind::Add, vec![Arg::Val(e1.v), Arg::Val(pool[i].v)]);
        e1 = Live {
            v,
            bound: e1.bound + pool[i].bound,
            used: false,
        };
    }
    let (mut out, mut bound) = (e1.v, e1.bound);
    if let Some(g) = gate {
        // A different-source binary ends the chain here.
        out = b.push(OpKind::Mul, vec![Arg::Val(out), Arg::Val(g)]);
    }
    if let Some(i) = second {
        out = b.push(OpKind::Add, vec![Arg::Val(out), Arg::Val(pool[i].v)]);
        bound += pool[i].bound;
    }
    (out, bound)
}
