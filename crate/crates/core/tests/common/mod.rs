//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fadnest::engine::EngineConfig;
use fadnest::fad::{FadState, TraceRecord};
use fadnest::ledger::LedgerEvent;
use fadnest::modeling::{ActArg, Activation};
use fadnest::ops::{OpKind, Saved};
use fadnest::program::{execute, Program};
use fadnest::static_graph::{self, Node, StaticGraph};
use fadnest::{Engine, Mode, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞), 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = norm(a).max(norm(b));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

/// Leaf gradients through the rewritten static graph.
pub fn static_grads(p: &Program) -> Vec<Vec<f64>> {
    let g = static_graph::from_program(p).unwrap();
    let (r, _) = static_graph::optimize(&g).unwrap();
    let ev = static_graph::interpret(&r, &static_graph::leaf_feeds(p).unwrap()).unwrap();
    p.leaves
        .iter()
        .enumerate()
        .map(|(i, l)| {
            ev.get(&static_graph::grad_id(i))
                .map(|d| d.data.clone())
                .unwrap_or_else(|| vec![0.0; l.shape.numel()])
        })
        .collect()
}

/// Largest per-leaf relative gradient difference between two paths.
pub fn max_rel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

pub fn run(p: &Program, mode: Mode) -> fadnest::program::Execution {
    execute(p, EngineConfig::new(mode).with_trace().with_events()).unwrap()
}

/// Tensors the plain tape keeps for one activation call, by walking the
/// composition and the registry's save declarations.
pub fn enumerated_saves(act: Activation) -> usize {
    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum T {
        Input,
        Step(usize),
    }
    let mut saved = BTreeSet::new();
    for (i, s) in act.composition().iter().enumerate() {
        let arg = |j: usize| match s.args[j] {
            ActArg::Input => T::Input,
            ActArg::Step(k) => T::Step(k),
            ActArg::Const(_) => unreachable!(),
        };
        for &sv in s.op.def().saves_for_vjp {
            saved.insert(match sv {
                Saved::Output => T::Step(i),
                Saved::Input(j) => arg(j),
            });
        }
    }
    saved.len()
}

/// Maximal fad components found by fixpoint classification and transitive
/// closure; returns (members, in-degree, out-degree).
pub fn brute_partition(g: &StaticGraph) -> Vec<(BTreeSet<String>, usize, usize)> {
    let n = g.forward.len();
    let pos: BTreeMap<&str, usize> = g
        .forward
        .iter()
        .enumerate()
        .map(|(i, x)| (x.id.as_str(), i))
        .collect();
    let args: Vec<Vec<usize>> = g
        .forward
        .iter()
        .map(|x| x.args.iter().map(|a| pos[a.as_str()]).collect())
        .collect();
    // src[i] = i for nfad nodes, else the shared source; iterate to a fixpoint.
    let mut fad = vec![false; n];
    let mut src: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in (0..n).rev() {
            let Some(kind) = g.forward[i].kind() else {
                continue;
            };
            let is_fad = kind.is_fad()
                && match args[i].as_slice() {
                    [_] => true,
                    [a, b] => src[*a] == src[*b],
                    _ => false,
                };
            let s = if is_fad { src[args[i][0]] } else { i };
            if fad[i] != is_fad || src[i] != s {
                fad[i] = is_fad;
                src[i] = s;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        if !fad[i] {
            continue;
        }
        reach[i][i] = true;
        for &a in &args[i] {
            if fad[a] {
                reach[i][a] = true;
                reach[a][i] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..n {
        if !fad[i] || seen.contains(&i) {
            continue;
        }
        let comp: BTreeSet<usize> = (0..n).filter(|&j| reach[i][j]).collect();
        seen.extend(comp.iter().copied());
        let ins: BTreeSet<usize> = comp
            .iter()
            .flat_map(|&m| args[m].iter().copied())
            .filter(|a| !comp.contains(a))
            .collect();
        let outs = comp
            .iter()
            .filter(|&&m| {
                g.outputs.contains(&g.forward[m].id)
                    || (0..n).any(|c| !comp.contains(&c) && args[c].contains(&m))
            })
            .count();
        let names = comp.iter().map(|&m| g.forward[m].id.clone()).collect();
        out.push((names, ins.len(), outs));
    }
    out
}

const UNARY: [OpKind; 6] = [
    OpKind::Neg,
    OpKind::Exp,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Softplus,
    OpKind::Relu,
];
const CONST_OPS: [OpKind; 3] = [OpKind::ConstAdd, OpKind::ConstMul, OpKind::PowConst];
const BINARY: [OpKind; 6] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::MatMul,
    OpKind::BiasAdd,
];

/// Forward-only graph of at most `max_nodes` nodes. Shapes are not
/// consistent; only the topology matters for partitioning.
pub fn random_forward_graph(seed: u64, max_nodes: usize) -> StaticGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.gen_range(2..=max_nodes);
    let inputs = rng.gen_range(1..=3.min(total - 1));
    let mut g = StaticGraph::default();
    for i in 0..inputs {
        g.forward
            .push(Node::new(format!("x{i}"), "input", vec![]).attr("shape", "2x2"));
    }
    for i in inputs..total {
        let pick = |rng: &mut ChaCha8Rng| g.forward[rng.gen_range(0..i)].id.clone();
        let id = format!("n{i}");
        let node = match rng.gen_range(0..10) {
            0..=3 => Node::new(
                id,
                UNARY[rng.gen_range(0..UNARY.len())].name(),
                vec![pick(&mut rng)],
            ),
            4 | 5 => Node::new(
                id,
                CONST_OPS[rng.gen_range(0..3)].name(),
                vec![pick(&mut rng)],
            )
            .attr("c", 0.5),
            6 => Node::new(id, OpKind::ReduceSum.name(), vec![pick(&mut rng)]),
            _ => {
                let a = pick(&mut rng);
                let b = pick(&mut rng);
                Node::new(
                    id,
                    BINARY[rng.gen_range(0..BINARY.len())].name(),
                    vec![a, b],
                )
            }
        };
        g.forward.push(node);
    }
    g.outputs.push(g.forward.last().unwrap().id.clone());
    g
}

/// Every interior chain tensor (and its derivative buffer) must be released
/// before the post-process of the first chain end that depends on it.
pub fn check_release_order(
    trace: &[TraceRecord],
    events: &[LedgerEvent],
    loss: Option<TensorId>,
) -> Result<(), String> {
    let ends: BTreeSet<TensorId> = trace
        .iter()
        .filter(|r| r.state == FadState::YN)
        .flat_map(|r| r.inputs.iter().filter(|(_, f)| *f).map(|(i, _)| *i))
        .chain(loss)
        .collect();
    // children through YY steps
    let mut kids: BTreeMap<TensorId, Vec<TensorId>> = BTreeMap::new();
    for r in trace.iter().filter(|r| r.state == FadState::YY) {
        for (i, f) in &r.inputs {
            if *f {
                kids.entry(*i).or_default().push(r.output);
            }
        }
    }
    let pos = |want: &LedgerEvent| events.iter().position(|e| e == want);
    let release_pos = |id: TensorId| {
        events
            .iter()
            .position(|e| matches!(e, LedgerEvent::Release { id: Some(x), .. } if *x == id))
    };
    let done_pos = |end: TensorId| pos(&LedgerEvent::PostProcessDone { end });
    for r in trace
        .iter()
        .filter(|r| matches!(r.state, FadState::NY | FadState::YY))
    {
        if ends.contains(&r.output) {
            continue;
        }
        // earliest post-process among reachable ends
        let mut stack = vec![r.output];
        let mut seen = BTreeSet::new();
        let mut first_done: Option<usize> = None;
        while let Some(t) = stack.pop() {
            if !seen.insert(t) {
                continue;
            }
            if ends.contains(&t) {
                if let Some(p) = done_pos(t) {
                    first_done = Some(first_done.map_or(p, |q: usize| q.min(p)));
                }
            }
            stack.extend(kids.get(&t).into_iter().flatten().copied());
        }
        let Some(deadline) = first_done else { continue };
        for id in std::iter::once(r.output).chain(r.derivative) {
            match release_pos(id) {
                Some(p) if p < deadline => {}
                Some(p) => {
                    return Err(format!(
                        "{id} released at event {p}, after post-process at {deadline}"
                    ))
                }
                None => return Err(format!("{id} never released")),
            }
        }
    }
    Ok(())
}

/// NN → NY → YY → YY → two YN ends, on a small two-layer block.
pub fn chain_example(mode: Mode) -> (Engine, TensorId) {
    use fadnest::Shape;
    let mut e = Engine::new(EngineConfig::new(mode).with_trace().with_events());
    let x = e
        .input(
            Shape::matrix(2, 3).unwrap(),
            vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7],
        )
        .unwrap();
    let w = e
        .weight(
            Shape::matrix(3, 4).unwrap(),
            (0..12).map(|i| (i as f64 - 6.0) / 10.0).collect(),
        )
        .unwrap();
    let w2 = e
        .weight(
            Shape::matrix(4, 4).unwrap(),
            (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) / 5.0).collect(),
        )
        .unwrap();
    let gate = e
        .weight(
            Shape::matrix(2, 4).unwrap(),
            (0..8).map(|i| 0.2 * i as f64 - 0.6).collect(),
        )
        .unwrap();
    let h = e.binary(OpKind::MatMul, x, w).unwrap(); // NN
    let a = e.unary(OpKind::Sigmoid, h).unwrap(); // NY
    let b = e.binary(OpKind::Mul, a, h).unwrap(); // YY
    e.release(a).unwrap();
    let c = e.unary(OpKind::Tanh, b).unwrap(); // YY
    let y1 = e.binary(OpKind::MatMul, c, w2).unwrap(); // YN
    e.release(c).unwrap();
    let y2 = e.binary(OpKind::Mul, b, gate).unwrap(); // YN
    e.release(b).unwrap();
    e.release(h).unwrap();
    let s = e.binary(OpKind::Add, y1, y2).unwrap();
    e.release(y1).unwrap();
    e.release(y2).unwrap();
    let l = e.unary(OpKind::ReduceSum, s).unwrap();
    e.release(s).unwrap();
    (e, l)
}
