//! Eager autodiff engine.
//!
//! Every op is executed immediately. What gets recorded for the backward
//! pass depends on the [`Mode`]:
//!
//! * `Bp` records one tape node per op, saving what the op's VJP needs.
//! * `Recompute` and `Fad` run the element-wise chain state machine (see
//!   [`crate::fad`]); chains leave no interior nodes and are collapsed into a
//!   single node when an nfad op consumes them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fad::{FadMeta, FadState, TraceRecord};
use crate::ledger::{FootprintLedger, LedgerEvent};
use crate::ops::{self, Arg, OpKind, Operand, OperandKind, Saved, View};
use crate::recompute::add_into;
use crate::store::{Fill, Precision, TensorStore};
use crate::tape::{Bfn, Edge, NodeId, Tape, TapeNode};
use crate::tensor::{Category, Dense, Shape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bp,
    Recompute,
    Fad,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Bp, Mode::Recompute, Mode::Fad];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Bp => "bp",
            Mode::Recompute => "recompute",
            Mode::Fad => "fad",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: Mode,
    pub precision: Precision,
    pub log_events: bool,
    pub trace: bool,
}

impl EngineConfig {
    pub fn new(mode: Mode) -> Self {
        EngineConfig {
            mode,
            precision: Precision::F64,
            log_events: false,
            trace: false,
        }
    }

    pub fn with_events(mut self) -> Self {
        self.log_events = true;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    /// Forward kernel invocations, including re-executions during backward.
    pub forward_kernels: usize,
    /// Kernels re-executed by recompute nodes.
    pub recompute_count: usize,
    /// Forward-mode derivative kernels.
    pub jvp_kernels: usize,
    /// Backward functions actually executed.
    pub backward_ops: usize,
}

/// Tensors held for the backward pass, split into activation-chain saves
/// and everything else. Only intermediate and derivative buffers count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retained {
    pub act_elems: usize,
    pub other_elems: usize,
    pub act_bytes: usize,
    pub other_bytes: usize,
}

impl Retained {
    pub fn total_bytes(&self) -> usize {
        self.act_bytes + self.other_bytes
    }

    pub fn total_elems(&self) -> usize {
        self.act_elems + self.other_elems
    }
}

/// Leaf gradients, keyed by tensor id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<TensorId, Vec<f64>>);

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.0.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &[f64])> {
        self.0.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug)]
pub struct Engine {
    pub(crate) config: EngineConfig,
    pub(crate) store: TensorStore,
    pub(crate) tape: Tape,
    pub(crate) producer: HashMap<TensorId, NodeId>,
    pub(crate) leaves: BTreeSet<TensorId>,
    pub(crate) fad: HashMap<TensorId, FadMeta>,
    stn_holds: HashMap<TensorId, u32>,
    retained_bytes: usize,
    pub(crate) stats: EngineStats,
    pub(crate) trace: Vec<TraceRecord>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine {
            store: TensorStore::new(config.precision, config.log_events),
            config,
            tape: Tape::default(),
            producer: HashMap::new(),
            leaves: BTreeSet::new(),
            fad: HashMap::new(),
            stn_holds: HashMap::new(),
            retained_bytes: 0,
            stats: EngineStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn with_mode(mode: Mode) -> Self {
        Engine::new(EngineConfig::new(mode))
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn input(&mut self, shape: Shape, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, Category::Input)
    }

    pub fn weight(&mut self, shape: Shape, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, Category::Weight)
    }

    fn leaf(&mut self, shape: Shape, data: Vec<f64>, category: Category) -> Result<TensorId> {
        let t = self.store.alloc(shape, category, Fill::Values(data))?;
        self.leaves.insert(t.id());
        Ok(t.id())
    }

    pub fn tensor(&self, id: TensorId) -> Result<&Tensor> {
        self.store.get(id)
    }

    pub fn data(&self, id: TensorId) -> Result<&[f64]> {
        Ok(self.store.get(id)?.data())
    }

    pub fn is_live(&self, id: TensorId) -> bool {
        self.store.is_live(id)
    }

    /// Drop the caller's handle on `id`.
    pub fn release(&mut self, id: TensorId) -> Result<()> {
        let gone = self.store.release(id)?;
        self.forget(&gone);
        Ok(())
    }

    fn forget(&mut self, released: &[TensorId]) {
        for id in released {
            self.fad.remove(id);
            self.producer.remove(id);
        }
    }

    /// Apply `kind` to `operands`.
    pub fn apply(&mut self, kind: OpKind, operands: &[Operand]) -> Result<TensorId> {
        let kinds: Vec<OperandKind> = operands
            .iter()
            .map(|o| match o {
                Operand::Tensor(_) => OperandKind::Tensor,
                Operand::Const(_) => OperandKind::Const,
            })
            .collect();
        ops::check_signature(kind, &kinds)?;
        let inputs: Vec<Option<Tensor>> = operands
            .iter()
            .map(|o| match o {
                Operand::Tensor(id) => self.store.get(*id).cloned().map(Some),
                Operand::Const(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        let args = args_of(operands, &inputs);
        let dense = ops::forward(kind, &args)?;
        self.stats.forward_kernels += 1;
        match self.config.mode {
            Mode::Bp => self.record(kind, operands, &inputs, dense),
            Mode::Recompute | Mode::Fad => self.step(kind, operands, &inputs, dense),
        }
    }

    pub fn unary(&mut self, kind: OpKind, x: TensorId) -> Result<TensorId> {
        self.apply(kind, &[x.into()])
    }

    pub fn binary(&mut self, kind: OpKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(kind, &[a.into(), b.into()])
    }

    pub fn with_const(&mut self, kind: OpKind, x: TensorId, c: f64) -> Result<TensorId> {
        self.apply(kind, &[x.into(), c.into()])
    }

    /// Plain reverse-mode recording: one node, saving per `saves_for_vjp`.
    pub(crate) fn record(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        dense: Dense,
    ) -> Result<TensorId> {
        let nxn = operands
            .iter()
            .map(|o| match o {
                Operand::Tensor(id) => self.edge_for(*id),
                Operand::Const(_) => None,
            })
            .collect();
        let out = self.store.insert(dense, Category::Intermediate, true)?;
        self.push_op_node(kind, operands, inputs, &out, nxn, kind.is_fad())?;
        self.push_trace(kind, operands, FadState::NN, None, out.id(), None);
        Ok(out.id())
    }

    pub(crate) fn push_op_node(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        out: &Tensor,
        nxn: Vec<Option<Edge>>,
        activation: bool,
    ) -> Result<NodeId> {
        let stn: Vec<TensorId> = kind
            .def()
            .saves_for_vjp
            .iter()
            .map(|s| match s {
                Saved::Output => out.id(),
                Saved::Input(j) => match operands[*j] {
                    Operand::Tensor(id) => id,
                    Operand::Const(_) => unreachable!("ops never save constants"),
                },
            })
            .collect();
        for id in &stn {
            self.hold_stn(*id)?;
        }
        let c = operands
            .iter()
            .find_map(|o| match o {
                Operand::Const(c) => Some(*c),
                Operand::Tensor(_) => None,
            })
            .unwrap_or(0.0);
        let input_shapes = inputs
            .iter()
            .map(|t| t.as_ref().map(|t| t.shape().clone()))
            .collect();
        let node = self.tape.push(TapeNode {
            id: NodeId(0),
            op_name: kind.name(),
            bfn: Bfn::Vjp {
                op: kind,
                c,
                input_shapes,
            },
            stn,
            nxn,
            out_shape: out.shape().clone(),
            activation,
            grad: None,
        });
        self.producer.insert(out.id(), node);
        Ok(node)
    }

    pub(crate) fn push_node(&mut self, node: TapeNode) -> Result<NodeId> {
        for id in &node.stn {
            self.hold_stn(*id)?;
        }
        Ok(self.tape.push(node))
    }

    pub(crate) fn edge_for(&self, id: TensorId) -> Option<Edge> {
        if self.leaves.contains(&id) {
            Some(Edge::Leaf(id))
        } else {
            self.producer.get(&id).map(|n| Edge::Node(*n))
        }
    }

    fn counts_as_retained(&self, t: &Tensor) -> bool {
        matches!(
            t.category(),
            Category::Intermediate | Category::FadDerivative
        )
    }

    fn hold_stn(&mut self, id: TensorId) -> Result<()> {
        self.store.hold(id)?;
        let n = self.stn_holds.entry(id).or_default();
        *n += 1;
        if *n == 1 {
            let t = self.store.get(id)?;
            if self.counts_as_retained(t) {
                self.retained_bytes += t.numel() * self.store.precision().bytes();
            }
        }
        Ok(())
    }

    fn unhold_stn(&mut self, id: TensorId) -> Result<()> {
        let n = self
            .stn_holds
            .get_mut(&id)
            .expect("stn hold without record");
        *n -= 1;
        if *n == 0 {
            self.stn_holds.remove(&id);
            let t = self.store.get(id)?;
            if self.counts_as_retained(t) {
                self.retained_bytes -= t.numel() * self.store.precision().bytes();
            }
        }
        let gone = self.store.unhold(id)?;
        self.forget(&gone);
        Ok(())
    }

    pub(crate) fn link(&mut self, owner: TensorId, target: TensorId) -> Result<()> {
        self.store.link(owner, target)
    }

    /// Bytes currently held by tape nodes (intermediate and derivative buffers).
    pub fn retained_bytes(&self) -> usize {
        self.retained_bytes
    }

    /// Split of the tensors currently held by tape nodes.
    pub fn retained(&self) -> Retained {
        let mut act = BTreeSet::new();
        let mut other = BTreeSet::new();
        for node in &self.tape.nodes {
            for id in &node.stn {
                if node.activation {
                    act.insert(*id);
                } else {
                    other.insert(*id);
                }
            }
        }
        let bytes = self.store.precision().bytes();
        let mut r = Retained::default();
        for id in &act {
            if let Ok(t) = self.store.get(*id) {
                if self.counts_as_retained(t) {
                    r.act_elems += t.numel();
                }
            }
        }
        for id in other.difference(&act) {
            if let Ok(t) = self.store.get(*id) {
                if self.counts_as_retained(t) {
                    r.other_elems += t.numel();
                }
            }
        }
        r.act_bytes = r.act_elems * bytes;
        r.other_bytes = r.other_elems * bytes;
        r
    }

    /// Reverse pass from `loss`, seeding its gradient with `seed` everywhere.
    pub fn backward(&mut self, loss: TensorId, seed: f64) -> Result<Gradients> {
        if self.tape.consumed {
            return Err(Error::TapeConsumed);
        }
        let numel = self.store.get(loss)?.numel();
        let entry = if self.fad.contains_key(&loss) {
            Some(Edge::Node(self.post_process(loss)?))
        } else {
            self.edge_for(loss)
        };
        let bytes = self.store.precision().bytes();
        let mut leaf_grads: BTreeMap<TensorId, Vec<f64>> = BTreeMap::new();
        let seed_grad = vec![seed; numel];
        match entry {
            None => return Err(Error::NotOnTape(loss)),
            Some(edge) => {
                self.store
                    .ledger_mut()
                    .alloc(None, Category::Gradient, numel * bytes);
                self.accumulate(edge, seed_grad, &mut leaf_grads);
            }
        }

        for idx in (0..self.tape.nodes.len()).rev() {
            if let Some(g) = self.tape.nodes[idx].grad.take() {
                let input_grads = self.run_bfn(idx, &g)?;
                self.store
                    .ledger_mut()
                    .release(None, Category::Gradient, g.len() * bytes);
                let nxn = self.tape.nodes[idx].nxn.clone();
                for (edge, ig) in nxn.into_iter().zip(input_grads) {
                    if let (Some(edge), Some(ig)) = (edge, ig) {
                        self.store
                            .ledger_mut()
                            .alloc(None, Category::Gradient, ig.len() * bytes);
                        self.accumulate(edge, ig, &mut leaf_grads);
                    }
                }
                self.stats.backward_ops += 1;
            }
            let stn = std::mem::take(&mut self.tape.nodes[idx].stn);
            for id in stn {
                self.unhold_stn(id)?;
            }
        }
        self.tape.consumed = true;
        for g in leaf_grads.values() {
            self.store
                .ledger_mut()
                .release(None, Category::Gradient, g.len() * bytes);
        }
        Ok(Gradients(leaf_grads))
    }

    /// Add `g` into the accumulator at `edge`. Charged to the ledger by the
    /// caller; merging into an existing accumulator frees the incoming buffer.
    fn accumulate(&mut self, edge: Edge, g: Vec<f64>, leaves: &mut BTreeMap<TensorId, Vec<f64>>) {
        let slot = match edge {
            Edge::Leaf(id) => leaves.entry(id).or_default(),
            Edge::Node(n) => self.tape.nodes[n.0].grad.get_or_insert_with(Vec::new),
        };
        if slot.is_empty() {
            *slot = g;
        } else {
            add_into(slot, &g);
            let bytes = g.len() * self.store.precision().bytes();
            self.store
                .ledger_mut()
                .release(None, Category::Gradient, bytes);
        }
    }

    fn run_bfn(&mut self, idx: usize, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.tape.nodes[idx];
        let saved: Vec<Tensor> = node
            .stn
            .iter()
            .map(|id| self.store.get(*id).cloned())
            .collect::<Result<_>>()?;
        match &node.bfn {
            Bfn::Vjp {
                op,
                c,
                input_shapes,
            } => {
                let views: Vec<View<'_>> = saved
                    .iter()
                    .map(|t| View {
                        shape: t.shape(),
                        data: t.data(),
                    })
                    .collect();
                ops::vjp(*op, &views, *c, input_shapes, g)
            }
            Bfn::MulFtr => {
                let ftr = saved[0].data();
                Ok(vec![Some(g.iter().zip(ftr).map(|(a, b)| a * b).collect())])
            }
            Bfn::Recompute { chain } => {
                let chain = chain.clone();
                let src = &saved[0];
                let transient = chain.len() * src.numel() * self.store.precision().bytes();
                self.store
                    .ledger_mut()
                    .alloc(None, Category::Intermediate, transient);
                let (gs, n) = chain.replay_vjp(src.data(), src.shape(), g)?;
                self.store
                    .ledger_mut()
                    .release(None, Category::Intermediate, transient);
                self.stats.recompute_count += n;
                self.stats.forward_kernels += n;
                Ok(vec![Some(gs)])
            }
        }
    }

    /// Release every tape-held tensor without running backward.
    pub fn drop_tape(&mut self) -> Result<()> {
        for idx in 0..self.tape.nodes.len() {
            let stn = std::mem::take(&mut self.tape.nodes[idx].stn);
            for id in stn {
                self.unhold_stn(id)?;
            }
            self.tape.nodes[idx].grad = None;
        }
        Ok(())
    }

    /// Drop the tape and every remaining tensor, including user-held ones.
    pub fn teardown(&mut self) -> Result<()> {
        self.drop_tape()?;
        let gone = self.store.clear();
        self.forget(&gone);
        self.leaves.clear();
        Ok(())
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn ledger(&self) -> &FootprintLedger {
        self.store.ledger()
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn fad_meta(&self, id: TensorId) -> Option<&FadMeta> {
        self.fad.get(&id)
    }

    pub(crate) fn mark(&mut self, event: LedgerEvent) {
        self.store.ledger_mut().mark(event);
    }
}

pub(crate) fn args_of<'a>(operands: &[Operand], inputs: &'a [Option<Tensor>]) -> Vec<Arg<'a>> {
    operands
        .iter()
        .zip(inputs)
        .map(|(o, t)| match (o, t) {
            (Operand::Const(c), _) => Arg::Const(*c),
            (Operand::Tensor(_), Some(t)) => Arg::Tensor(View {
                shape: t.shape(),
                data: t.data(),
            }),
            (Operand::Tensor(_), None) => unreachable!("tensor operand without value"),
        })
        .collect()
}
