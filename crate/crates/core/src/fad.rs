//! Forward-mode differentiation of element-wise chains inside the backward pass.
//!
//! Each op application is a tensor-operator pair whose state is read off two
//! flags: does any operand carry a forward-mode sidecar, and is the op fad
//! for these operands.
//!
//! | state | operands | op   | components                         |
//! |-------|----------|------|------------------------------------|
//! | NN    | plain    | nfad | forward, record node               |
//! | NY    | plain    | fad  | forward, seed sidecar              |
//! | YY    | fad      | fad  | forward, derivative, sidecar       |
//! | YN    | fad      | nfad | forward, collapse chain, record node |
//!
//! A chain starts at NY and ends at YN. Interior ops never create tape
//! nodes. At YN the chain collapses into one node that multiplies the
//! upstream gradient by the accumulated derivative (FTR) and links straight
//! to the node that produced the chain's source.
//!
//! The NY output keeps its derivative implicit: FTR is the symbolic seed 1 and
//! the sidecar holds the op's saved tensors (STT). The first YY op folds the
//! seed into a real derivative tensor. A chain of a single op never
//! materializes anything and collapses into that op's own VJP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::engine::{args_of, Engine, Mode};
use crate::error::{Error, Result};
use crate::ledger::LedgerEvent;
use crate::ops::{self, InputMeta, OpKind, Operand, OperandKind, Saved, Tangent, View};
use crate::recompute::{ChainArg, ChainProgram, ChainStep};
use crate::tape::{Bfn, Edge, NodeId, TapeNode};
use crate::tensor::{Category, Dense, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FadState {
    NN,
    NY,
    YY,
    YN,
}

impl FadState {
    pub fn from_flags(fad_input: bool, fad_op: bool) -> Self {
        match (fad_input, fad_op) {
            (false, false) => FadState::NN,
            (false, true) => FadState::NY,
            (true, true) => FadState::YY,
            (true, false) => FadState::YN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FadState::NN => "NN",
            FadState::NY => "NY",
            FadState::YY => "YY",
            FadState::YN => "YN",
        }
    }
}

impl fmt::Display for FadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FadState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NN" => Ok(FadState::NN),
            "NY" => Ok(FadState::NY),
            "YY" => Ok(FadState::YY),
            "YN" => Ok(FadState::YN),
            _ => Err(Error::Config(format!("unknown state `{s}`"))),
        }
    }
}

/// An STT entry: the tensor itself or another tensor it links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SavedRef {
    Own,
    Tensor(TensorId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Deriv {
    /// FTR is the symbolic 1; the derivative is the producing op's own
    /// `d_elem`, evaluated from `stt`.
    Seed {
        op: OpKind,
        c: f64,
        stt: Vec<SavedRef>,
    },
    /// FTR materialized as a derivative tensor.
    Full(TensorId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sidecar {
    Forward(Deriv),
    /// Recompute mode keeps the op sequence, not values.
    Replay(Rc<ChainProgram>),
}

/// Sidecar of a fad tensor. Presence means isFAD.
#[derive(Debug, Clone, PartialEq)]
pub struct FadMeta {
    /// Source token: id of the tensor the chain started from.
    pub source: TensorId,
    /// Where the collapsed node sends the source's gradient.
    pub head: Option<Edge>,
    pub sidecar: Sidecar,
}

impl FadMeta {
    pub fn ftr(&self) -> Option<TensorId> {
        match &self.sidecar {
            Sidecar::Forward(Deriv::Full(id)) => Some(*id),
            _ => None,
        }
    }

    pub fn is_seed(&self) -> bool {
        matches!(self.sidecar, Sidecar::Forward(Deriv::Seed { .. }))
    }
}

/// One executed T-O pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub op: String,
    pub state: FadState,
    pub src: Option<TensorId>,
    pub retained_bytes: usize,
    /// Tensor operands: (id, carried a fad sidecar).
    pub inputs: Vec<(TensorId, bool)>,
    pub output: TensorId,
    /// Derivative tensor materialized by this step, if any.
    pub derivative: Option<TensorId>,
}

impl TraceRecord {
    /// `step_id, op, state, src_token, retained_bytes`
    pub fn line(&self) -> String {
        let src = self
            .src
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into());
        format!(
            "{}, {}, {}, {}, {}",
            self.step, self.op, self.state, src, self.retained_bytes
        )
    }
}

impl Engine {
    pub(crate) fn push_trace(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        state: FadState,
        src: Option<TensorId>,
        output: TensorId,
        derivative: Option<TensorId>,
    ) {
        if !self.config.trace {
            return;
        }
        let inputs = operands
            .iter()
            .filter_map(|o| match o {
                Operand::Tensor(id) => Some((*id, self.fad.contains_key(id))),
                Operand::Const(_) => None,
            })
            .collect();
        let rec = TraceRecord {
            step: self.trace.len(),
            op: kind.name().to_string(),
            state,
            src,
            retained_bytes: self.retained_bytes(),
            inputs,
            output,
            derivative,
        };
        self.trace.push(rec);
    }

    fn input_meta(&self, operands: &[Operand]) -> Vec<InputMeta> {
        operands
            .iter()
            .map(|o| match o {
                Operand::Const(_) => InputMeta::Const,
                Operand::Tensor(id) => match self.fad.get(id) {
                    Some(m) => InputMeta::Tensor {
                        is_fad: true,
                        source: m.source,
                    },
                    None => InputMeta::Tensor {
                        is_fad: false,
                        source: *id,
                    },
                },
            })
            .collect()
    }

    /// State of applying `kind` to `operands` right now.
    pub fn peek_state(&self, kind: OpKind, operands: &[Operand]) -> FadState {
        if self.config.mode == Mode::Bp {
            return FadState::NN;
        }
        let metas = self.input_meta(operands);
        let cls = ops::classify(kind, &metas);
        let fad_in = metas
            .iter()
            .any(|m| matches!(m, InputMeta::Tensor { is_fad: true, .. }));
        FadState::from_flags(fad_in, cls.fad)
    }

    /// One T-O pair in recompute or fad mode. The forward value is already
    /// computed.
    pub(crate) fn step(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        dense: Dense,
    ) -> Result<TensorId> {
        let metas = self.input_meta(operands);
        let cls = ops::classify(kind, &metas);
        let fad_in = metas
            .iter()
            .any(|m| matches!(m, InputMeta::Tensor { is_fad: true, .. }));
        match FadState::from_flags(fad_in, cls.fad) {
            FadState::NN => self.record(kind, operands, inputs, dense),
            FadState::NY => {
                let source = cls.source.expect("fad classification carries a source");
                self.begin_chain(kind, operands, dense, source)
            }
            FadState::YY => {
                let source = cls.source.expect("fad classification carries a source");
                self.continue_chain(kind, operands, inputs, dense, source)
            }
            FadState::YN => self.end_chains(kind, operands, inputs, dense),
        }
    }

    fn begin_chain(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        dense: Dense,
        source: TensorId,
    ) -> Result<TensorId> {
        let out = self.store.insert(dense, Category::Intermediate, true)?.id();
        let c = const_operand(operands);
        let sidecar = match self.config.mode {
            Mode::Fad => {
                let stt: Vec<SavedRef> = kind
                    .def()
                    .saves_for_vjp
                    .iter()
                    .map(|s| match s {
                        Saved::Output => SavedRef::Own,
                        Saved::Input(j) => SavedRef::Tensor(tensor_operand(operands, *j)),
                    })
                    .collect();
                for s in &stt {
                    if let SavedRef::Tensor(id) = s {
                        self.link(out, *id)?;
                    }
                }
                Sidecar::Forward(Deriv::Seed { op: kind, c, stt })
            }
            Mode::Recompute => {
                self.link(out, source)?;
                let args = operands
                    .iter()
                    .map(|o| match o {
                        Operand::Tensor(_) => ChainArg::Source,
                        Operand::Const(c) => ChainArg::Const(*c),
                    })
                    .collect();
                Sidecar::Replay(Rc::new(ChainProgram::single(ChainStep {
                    out,
                    op: kind,
                    args,
                })))
            }
            Mode::Bp => unreachable!("bp mode never starts a chain"),
        };
        let head = self.edge_for(source);
        self.fad.insert(
            out,
            FadMeta {
                source,
                head,
                sidecar,
            },
        );
        self.push_trace(kind, operands, FadState::NY, Some(source), out, None);
        Ok(out)
    }

    fn continue_chain(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        dense: Dense,
        source: TensorId,
    ) -> Result<TensorId> {
        let mut head = None;
        for o in operands {
            if let Operand::Tensor(id) = o {
                match self.fad.get(id) {
                    Some(m) if m.source != source => return Err(Error::MixedSources(kind.name())),
                    Some(m) => head = m.head,
                    None if *id != source => return Err(Error::MixedSources(kind.name())),
                    None => {}
                }
            }
        }
        let out = self.store.insert(dense, Category::Intermediate, true)?;
        let mut derivative = None;
        let sidecar = match self.config.mode {
            Mode::Fad => {
                let ftr = self.fad_compute(kind, operands, inputs, &out)?;
                let ftr = self.store.insert(ftr, Category::FadDerivative, false)?.id();
                self.link(out.id(), ftr)?;
                derivative = Some(ftr);
                Sidecar::Forward(Deriv::Full(ftr))
            }
            Mode::Recompute => {
                self.link(out.id(), source)?;
                let mut parents = Vec::new();
                let args = operands
                    .iter()
                    .map(|o| match o {
                        Operand::Const(c) => ChainArg::Const(*c),
                        Operand::Tensor(id) => match self.fad.get(id).map(|m| &m.sidecar) {
                            Some(Sidecar::Replay(p)) => {
                                parents.push(p.clone());
                                ChainArg::Step(*id)
                            }
                            _ => ChainArg::Source,
                        },
                    })
                    .collect();
                let refs: Vec<&ChainProgram> = parents.iter().map(|p| p.as_ref()).collect();
                let step = ChainStep {
                    out: out.id(),
                    op: kind,
                    args,
                };
                Sidecar::Replay(Rc::new(ChainProgram::extend(&refs, step)))
            }
            Mode::Bp => unreachable!(),
        };
        self.fad.insert(
            out.id(),
            FadMeta {
                source,
                head,
                sidecar,
            },
        );
        self.push_trace(
            kind,
            operands,
            FadState::YY,
            Some(source),
            out.id(),
            derivative,
        );
        Ok(out.id())
    }

    /// Component B: derivative of this op's output with respect to the
    /// chain source, from the operands' sidecars.
    pub(crate) fn fad_compute(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        out: &Tensor,
    ) -> Result<Dense> {
        // Own tensors referenced by seed STTs.
        let mut held: BTreeMap<TensorId, Tensor> = BTreeMap::new();
        for o in operands {
            let Operand::Tensor(id) = o else { continue };
            if let Some(FadMeta {
                sidecar: Sidecar::Forward(d),
                ..
            }) = self.fad.get(id)
            {
                match d {
                    Deriv::Full(f) => {
                        held.insert(*f, self.store.get(*f)?.clone());
                    }
                    Deriv::Seed { stt, .. } => {
                        for s in stt {
                            if let SavedRef::Tensor(t) = s {
                                held.insert(*t, self.store.get(*t)?.clone());
                            }
                        }
                    }
                }
            }
        }
        let tangents: Vec<Tangent<'_>> = operands
            .iter()
            .zip(inputs)
            .map(|(o, t)| match (o, t) {
                (Operand::Const(_), _) => Ok(Tangent::Zero),
                (Operand::Tensor(id), Some(t)) => match self.fad.get(id) {
                    None => Ok(Tangent::One),
                    Some(FadMeta {
                        sidecar: Sidecar::Forward(Deriv::Full(f)),
                        ..
                    }) => Ok(Tangent::Dense(held[f].data())),
                    Some(FadMeta {
                        sidecar: Sidecar::Forward(Deriv::Seed { op, c, stt }),
                        ..
                    }) => Ok(Tangent::Seeded {
                        op: *op,
                        c: *c,
                        saved: stt
                            .iter()
                            .map(|s| match s {
                                SavedRef::Own => t.data(),
                                SavedRef::Tensor(x) => held[x].data(),
                            })
                            .collect(),
                    }),
                    Some(_) => Err(Error::MissingSource(*id)),
                },
                (Operand::Tensor(_), None) => unreachable!(),
            })
            .collect::<Result<_>>()?;
        let args = args_of(operands, inputs);
        let out_view = View {
            shape: out.shape(),
            data: out.data(),
        };
        let saved: Vec<&[f64]> = ops::saved_views(kind, &args, out_view)
            .into_iter()
            .map(|v| v.data)
            .collect();
        let c = ops::const_of(&args);
        let data = ops::local_jvp(kind, &saved, c, &tangents, out.numel())?;
        self.stats.jvp_kernels += 1;
        Dense::new(out.shape().clone(), data)
    }

    fn end_chains(
        &mut self,
        kind: OpKind,
        operands: &[Operand],
        inputs: &[Option<Tensor>],
        dense: Dense,
    ) -> Result<TensorId> {
        let mut nxn = Vec::with_capacity(operands.len());
        let mut src = None;
        for o in operands {
            match o {
                Operand::Const(_) => nxn.push(None),
                Operand::Tensor(id) if self.fad.contains_key(id) => {
                    src.get_or_insert(self.fad[id].source);
                    let node = self.post_process(*id)?;
                    nxn.push(Some(Edge::Node(node)));
                }
                Operand::Tensor(id) => nxn.push(self.edge_for(*id)),
            }
        }
        let out = self.store.insert(dense, Category::Intermediate, true)?;
        self.push_op_node(kind, operands, inputs, &out, nxn, false)?;
        self.push_trace(kind, operands, FadState::YN, src, out.id(), None);
        Ok(out.id())
    }

    /// Component C: collapse the chain ending at `end` into a single node
    /// feeding the chain's head.
    pub(crate) fn post_process(&mut self, end: TensorId) -> Result<NodeId> {
        let meta = self
            .fad
            .get(&end)
            .cloned()
            .ok_or(Error::MissingSource(end))?;
        let shape = self.store.get(end)?.shape().clone();
        let node = match meta.sidecar {
            Sidecar::Forward(Deriv::Full(ftr)) => TapeNode {
                id: NodeId(0),
                op_name: "fad_mul",
                bfn: Bfn::MulFtr,
                stn: vec![ftr],
                nxn: vec![meta.head],
                out_shape: shape,
                activation: true,
                grad: None,
            },
            Sidecar::Forward(Deriv::Seed { op, c, stt }) => {
                let def = op.def();
                let input_shapes = def
                    .operands
                    .iter()
                    .map(|k| (*k == OperandKind::Tensor).then(|| shape.clone()))
                    .collect();
                let nxn = def
                    .operands
                    .iter()
                    .map(|k| {
                        if *k == OperandKind::Tensor {
                            meta.head
                        } else {
                            None
                        }
                    })
                    .collect();
                TapeNode {
                    id: NodeId(0),
                    op_name: def.name,
                    bfn: Bfn::Vjp {
                        op,
                        c,
                        input_shapes,
                    },
                    stn: stt
                        .iter()
                        .map(|s| match s {
                            SavedRef::Own => end,
                            SavedRef::Tensor(t) => *t,
                        })
                        .collect(),
                    nxn,
                    out_shape: shape,
                    activation: true,
                    grad: None,
                }
            }
            Sidecar::Replay(chain) => TapeNode {
                id: NodeId(0),
                op_name: "recompute",
                bfn: Bfn::Recompute { chain },
                stn: vec![meta.source],
                nxn: vec![meta.head],
                out_shape: shape,
                activation: true,
                grad: None,
            },
        };
        let id = self.push_node(node)?;
        self.mark(LedgerEvent::PostProcessDone { end });
        Ok(id)
    }
}

fn const_operand(operands: &[Operand]) -> f64 {
    operands
        .iter()
        .find_map(|o| match o {
            Operand::Const(c) => Some(*c),
            Operand::Tensor(_) => None,
        })
        .unwrap_or(0.0)
}

fn tensor_operand(operands: &[Operand], slot: usize) -> TensorId {
    match operands[slot] {
        Operand::Tensor(id) => id,
        Operand::Const(_) => unreachable!("ops never save constants"),
    }
}

/// Why a trace was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceViolation {
    pub step: usize,
    pub msg: String,
}

impl fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.msg)
    }
}

/// Check that a trace follows the chain grammar `NY·YY*·YN` along every path.
///
/// Rebuilds fad-ness from the records alone: a tensor is fad iff an NY or YY
/// record produced it. With `require_closed`, every fad tensor must be
/// consumed by a later YY or YN record.
pub fn check_trace(
    trace: &[TraceRecord],
    require_closed: bool,
) -> std::result::Result<(), TraceViolation> {
    let mut fad_src: BTreeMap<TensorId, TensorId> = BTreeMap::new();
    let mut open: BTreeSet<TensorId> = BTreeSet::new();
    for rec in trace {
        let bad = |msg: String| TraceViolation {
            step: rec.step,
            msg,
        };
        for (id, claimed) in &rec.inputs {
            if *claimed != fad_src.contains_key(id) {
                return Err(bad(format!(
                    "input {id} {} fad but no NY/YY produced it that way",
                    if *claimed { "claimed" } else { "not claimed" }
                )));
            }
        }
        let fad_inputs: Vec<TensorId> = rec
            .inputs
            .iter()
            .filter(|(_, f)| *f)
            .map(|(i, _)| *i)
            .collect();
        let plain_inputs: Vec<TensorId> = rec
            .inputs
            .iter()
            .filter(|(_, f)| !*f)
            .map(|(i, _)| *i)
            .collect();
        let op = OpKind::from_name(&rec.op);
        match rec.state {
            FadState::NN => {
                if !fad_inputs.is_empty() {
                    return Err(bad("NN with a fad input".into()));
                }
            }
            FadState::NY => {
                let src = rec.src.ok_or_else(|| bad("NY without source".into()))?;
                if !fad_inputs.is_empty() {
                    return Err(bad("NY with a fad input".into()));
                }
                if op.is_some_and(|k| !k.is_fad()) {
                    return Err(bad(format!("NY on nfad op {}", rec.op)));
                }
                if plain_inputs.iter().any(|i| *i != src) {
                    return Err(bad("NY operands do not share the source".into()));
                }
                fad_src.insert(rec.output, src);
                open.insert(rec.output);
            }
            FadState::YY => {
                let src = rec.src.ok_or_else(|| bad("YY without source".into()))?;
                if fad_inputs.is_empty() {
                    return Err(bad("YY without a fad input".into()));
                }
                if op.is_some_and(|k| !k.is_fad()) {
                    return Err(bad(format!("YY on nfad op {}", rec.op)));
                }
                if fad_inputs.iter().any(|i| fad_src[i] != src) {
                    return Err(bad("fad-binary across different sources".into()));
                }
                if plain_inputs.iter().any(|i| *i != src) {
                    return Err(bad("plain operand of YY is not the source".into()));
                }
                for i in &fad_inputs {
                    open.remove(i);
                }
                fad_src.insert(rec.output, src);
                open.insert(rec.output);
            }
            FadState::YN => {
                if fad_inputs.is_empty() {
                    return Err(bad("YN without a fad input".into()));
                }
                let same_source = fad_inputs.iter().all(|i| Some(fad_src[i]) == rec.src)
                    && plain_inputs.iter().all(|i| Some(*i) == rec.src);
                if op.is_some_and(|k| k.is_fad()) && same_source {
                    return Err(bad("YN on an op that stays fad for these operands".into()));
                }
                for i in &fad_inputs {
                    open.remove(i);
                }
            }
        }
    }
    if require_closed {
        if let Some(id) = open.iter().next() {
            return Err(TraceViolation {
                step: trace.len(),
                msg: format!("fad tensor {id} never reaches YN"),
            });
        }
    }
    Ok(())
}
