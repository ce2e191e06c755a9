//! Primitive operators and their forward, derivative and VJP kernels.
//!
//! Element-wise ops expose `d_elem`, the partial derivative of one output
//! element with respect to one operand, evaluated only from the values the
//! op declares in `saves_for_vjp`. Both the reverse kernel (`vjp`) and the
//! forward-mode kernel (`local_jvp`) are built on it, so the two always agree.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, Dense, Shape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    ConstAdd,
    ConstMul,
    PowConst,
    MatMul,
    BiasAdd,
    ReduceSum,
    MseLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Relu,
        OpKind::ConstAdd,
        OpKind::ConstMul,
        OpKind::PowConst,
        OpKind::MatMul,
        OpKind::BiasAdd,
        OpKind::ReduceSum,
        OpKind::MseLoss,
    ];

    pub fn name(self) -> &'static str {
        self.def().name
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn def(self) -> &'static OpDef {
        use FadClass::*;
        use OperandKind::{Const as C, Tensor as T};
        use Saved::*;
        macro_rules! def {
            ($kind:ident, $name:expr, $class:expr, [$($opnd:expr),*], [$($saved:expr),*]) => {{
                const D: OpDef = OpDef {
                    name: $name,
                    kind: OpKind::$kind,
                    fad_class: $class,
                    operands: &[$($opnd),*],
                    saves_for_vjp: &[$($saved),*],
                };
                &D
            }};
        }
        let d: &'static OpDef = match self {
            OpKind::Add => def!(Add, "add", FadBinary, [T, T], []),
            OpKind::Sub => def!(Sub, "sub", FadBinary, [T, T], []),
            OpKind::Mul => def!(Mul, "mul", FadBinary, [T, T], [Input(0), Input(1)]),
            OpKind::Div => def!(Div, "div", FadBinary, [T, T], [Input(1), Output]),
            OpKind::Neg => def!(Neg, "neg", FadUnary, [T], []),
            OpKind::Exp => def!(Exp, "exp", FadUnary, [T], [Output]),
            OpKind::Tanh => def!(Tanh, "tanh", FadUnary, [T], [Output]),
            OpKind::Sigmoid => def!(Sigmoid, "sigmoid", FadUnary, [T], [Output]),
            OpKind::Softplus => def!(Softplus, "softplus", FadUnary, [T], [Input(0)]),
            OpKind::Relu => def!(Relu, "relu", FadUnary, [T], [Output]),
            OpKind::ConstAdd => def!(ConstAdd, "const_add", FadBinary, [T, C], []),
            OpKind::ConstMul => def!(ConstMul, "const_mul", FadBinary, [T, C], []),
            OpKind::PowConst => def!(PowConst, "pow_const", FadBinary, [T, C], [Input(0)]),
            OpKind::MatMul => def!(MatMul, "matmul", Nfad, [T, T], [Input(0), Input(1)]),
            OpKind::BiasAdd => def!(BiasAdd, "bias_add", Nfad, [T, T], []),
            OpKind::ReduceSum => def!(ReduceSum, "reduce_sum", Nfad, [T], []),
            OpKind::MseLoss => def!(MseLoss, "mse_loss", Nfad, [T, T], [Input(0), Input(1)]),
        };
        d
    }

    pub fn is_fad(self) -> bool {
        self.def().fad_class != FadClass::Nfad
    }

    pub fn is_elementwise(self) -> bool {
        self.is_fad()
    }

    /// Forward value of one element. `b` is the second tensor element or the constant.
    pub fn scalar(self, a: f64, b: f64) -> f64 {
        match self {
            OpKind::Add => a + b,
            OpKind::Sub => a - b,
            OpKind::Mul => a * b,
            OpKind::Div => a / b,
            OpKind::Neg => -a,
            OpKind::Exp => a.exp(),
            OpKind::Tanh => a.tanh(),
            OpKind::Sigmoid => sigmoid(a),
            OpKind::Softplus => softplus(a),
            OpKind::Relu => a.max(0.0),
            OpKind::ConstAdd => a + b,
            OpKind::ConstMul => a * b,
            OpKind::PowConst => a.powf(b),
            OpKind::MatMul | OpKind::BiasAdd | OpKind::ReduceSum | OpKind::MseLoss => {
                unreachable!("{} is not element-wise", self.name())
            }
        }
    }

    /// ∂out/∂operand[slot] at one element, from the saved values (in
    /// `saves_for_vjp` order) and the constant operand if any.
    pub fn d_elem(self, slot: usize, saved: &[f64], c: f64) -> f64 {
        match (self, slot) {
            (OpKind::Add, _) => 1.0,
            (OpKind::Sub, 0) => 1.0,
            (OpKind::Sub, _) => -1.0,
            (OpKind::Mul, 0) => saved[1],
            (OpKind::Mul, _) => saved[0],
            // saved = [b, out]
            (OpKind::Div, 0) => 1.0 / saved[0],
            (OpKind::Div, _) => -saved[1] / saved[0],
            (OpKind::Neg, _) => -1.0,
            (OpKind::Exp, _) => saved[0],
            (OpKind::Tanh, _) => 1.0 - saved[0] * saved[0],
            (OpKind::Sigmoid, _) => saved[0] * (1.0 - saved[0]),
            (OpKind::Softplus, _) => sigmoid(saved[0]),
            (OpKind::Relu, _) => {
                if saved[0] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            (OpKind::ConstAdd, _) => 1.0,
            (OpKind::ConstMul, _) => c,
            (OpKind::PowConst, _) => c * saved[0].powf(c - 1.0),
            _ => unreachable!("{} has no element-wise derivative", self.name()),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FadClass {
    FadUnary,
    FadBinary,
    Nfad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandKind {
    Tensor,
    Const,
}

/// Which forward value a VJP needs kept around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Saved {
    Input(usize),
    Output,
}

#[derive(Debug)]
pub struct OpDef {
    pub name: &'static str,
    kind: OpKind,
    pub fad_class: FadClass,
    pub operands: &'static [OperandKind],
    pub saves_for_vjp: &'static [Saved],
}

impl OpDef {
    pub fn arity(&self) -> usize {
        self.operands.len()
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }
}

/// Operand of an op application: a tensor or a scalar hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    Tensor(TensorId),
    Const(f64),
}

impl From<TensorId> for Operand {
    fn from(id: TensorId) -> Self {
        Operand::Tensor(id)
    }
}

impl From<f64> for Operand {
    fn from(c: f64) -> Self {
        Operand::Const(c)
    }
}

/// Borrowed tensor contents handed to kernels.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub shape: &'a Shape,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub enum Arg<'a> {
    Tensor(View<'a>),
    Const(f64),
}

impl<'a> Arg<'a> {
    fn tensor(&self, op: &'static str) -> Result<View<'a>> {
        match self {
            Arg::Tensor(v) => Ok(*v),
            Arg::Const(_) => Err(Error::Operand {
                op,
                msg: "expected a tensor operand".into(),
            }),
        }
    }
}

/// Constant operand of an application, 0 if none.
pub fn const_of(args: &[Arg<'_>]) -> f64 {
    args.iter()
        .find_map(|a| match a {
            Arg::Const(c) => Some(*c),
            Arg::Tensor(_) => None,
        })
        .unwrap_or(0.0)
}

pub fn check_signature(kind: OpKind, kinds: &[OperandKind]) -> Result<()> {
    let def = kind.def();
    if kinds.len() != def.arity() {
        return Err(Error::Arity {
            op: def.name,
            expected: def.arity(),
            got: kinds.len(),
        });
    }
    for (slot, (want, got)) in def.operands.iter().zip(kinds).enumerate() {
        if want != got {
            return Err(Error::Operand {
                op: def.name,
                msg: format!("operand {slot} should be {want:?}, got {got:?}"),
            });
        }
    }
    Ok(())
}

fn arg_kinds(args: &[Arg<'_>]) -> Vec<OperandKind> {
    args.iter()
        .map(|a| match a {
            Arg::Tensor(_) => OperandKind::Tensor,
            Arg::Const(_) => OperandKind::Const,
        })
        .collect()
}

/// Run the forward kernel.
pub fn forward(kind: OpKind, args: &[Arg<'_>]) -> Result<Dense> {
    check_signature(kind, &arg_kinds(args))?;
    let name = kind.name();
    let c = const_of(args);
    match kind {
        _ if kind.is_elementwise() => {
            let a = args[0].tensor(name)?;
            let data = match args.get(1) {
                Some(Arg::Tensor(b)) => {
                    if a.shape != b.shape {
                        return Err(Error::ShapeMismatch(format!(
                            "{name}: {} vs {}",
                            a.shape, b.shape
                        )));
                    }
                    tensor::ew_binary(a.data, b.data, |x, y| kind.scalar(x, y))?
                }
                _ => tensor::ew_unary(a.data, |x| kind.scalar(x, c)),
            };
            Dense::new(a.shape.clone(), data)
        }
        OpKind::MatMul => {
            let a = args[0].tensor(name)?;
            let b = args[1].tensor(name)?;
            tensor::matmul(a.data, a.shape, b.data, b.shape)
        }
        OpKind::BiasAdd => {
            let x = args[0].tensor(name)?;
            let b = args[1].tensor(name)?;
            let (rows, cols) = bias_dims(x.shape, b.shape)?;
            let mut out = x.data.to_vec();
            for r in 0..rows {
                for j in 0..cols {
                    out[r * cols + j] += b.data[j];
                }
            }
            Dense::new(x.shape.clone(), out)
        }
        OpKind::ReduceSum => {
            let x = args[0].tensor(name)?;
            Dense::new(Shape::scalar(), vec![tensor::reduce_sum(x.data)])
        }
        OpKind::MseLoss => {
            let p = args[0].tensor(name)?;
            let t = args[1].tensor(name)?;
            if p.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "mse_loss: {} vs {}",
                    p.shape, t.shape
                )));
            }
            let n = p.data.len() as f64;
            let sse: f64 = p
                .data
                .iter()
                .zip(t.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Dense::new(Shape::scalar(), vec![sse / n])
        }
        _ => unreachable!(),
    }
}

fn bias_dims(x: &Shape, b: &Shape) -> Result<(usize, usize)> {
    let (rows, cols) = x
        .as_matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("bias_add input rank {}", x.rank())))?;
    if b.dims() != [cols] {
        return Err(Error::ShapeMismatch(format!(
            "bias_add: bias {b} does not match {cols} columns"
        )));
    }
    Ok((rows, cols))
}

/// Gradients of one application with respect to each operand (`None` for
/// constants). Fan-in accumulation is the caller's job.
///
/// `saved` follows the op's `saves_for_vjp` order; `input_shapes` lists the
/// tensor operand shapes (constants get `None`).
pub fn vjp(
    kind: OpKind,
    saved: &[View<'_>],
    c: f64,
    input_shapes: &[Option<Shape>],
    upstream: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    let def = kind.def();
    if saved.len() != def.saves_for_vjp.len() {
        return Err(Error::MissingSaved {
            op: def.name,
            slot: saved.len(),
        });
    }
    if kind.is_elementwise() {
        let mut out = Vec::with_capacity(def.arity());
        let mut vals = vec![0.0; saved.len()];
        for (slot, operand) in def.operands.iter().enumerate() {
            if *operand == OperandKind::Const {
                out.push(None);
                continue;
            }
            let g: Vec<f64> = upstream
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    for (v, s) in vals.iter_mut().zip(saved) {
                        *v = s.data[i];
                    }
                    g * kind.d_elem(slot, &vals, c)
                })
                .collect();
            out.push(Some(g));
        }
        return Ok(out);
    }
    let shape_of = |slot: usize| -> Result<&Shape> {
        input_shapes
            .get(slot)
            .and_then(|s| s.as_ref())
            .ok_or(Error::MissingSaved { op: def.name, slot })
    };
    match kind {
        OpKind::MatMul => {
            let (a, b) = (saved[0], saved[1]);
            let (m, _) = a.shape.as_matrix().expect("checked in forward");
            let (_, n) = b.shape.as_matrix().expect("checked in forward");
            let g_shape = Shape::matrix(m, n)?;
            let bt = tensor::transpose(b.data, b.shape)?;
            let at = tensor::transpose(a.data, a.shape)?;
            let ga = tensor::matmul(upstream, &g_shape, &bt.data, &bt.shape)?;
            let gb = tensor::matmul(&at.data, &at.shape, upstream, &g_shape)?;
            Ok(vec![Some(ga.data), Some(gb.data)])
        }
        OpKind::BiasAdd => {
            let (rows, cols) = bias_dims(shape_of(0)?, shape_of(1)?)?;
            let mut gb = vec![0.0; cols];
            for r in 0..rows {
                for j in 0..cols {
                    gb[j] += upstream[r * cols + j];
                }
            }
            Ok(vec![Some(upstream.to_vec()), Some(gb)])
        }
        OpKind::ReduceSum => {
            let n = shape_of(0)?.numel();
            Ok(vec![Some(vec![upstream[0]; n])])
        }
        OpKind::MseLoss => {
            let (p, t) = (saved[0], saved[1]);
            let scale = 2.0 * upstream[0] / p.data.len() as f64;
            let gp: Vec<f64> = p
                .data
                .iter()
                .zip(t.data)
                .map(|(a, b)| scale * (a - b))
                .collect();
            let gt = gp.iter().map(|v| -v).collect();
            Ok(vec![Some(gp), Some(gt)])
        }
        _ => unreachable!(),
    }
}

/// Forward-mode tangent of one operand.
#[derive(Debug, Clone)]
pub enum Tangent<'a> {
    /// Constant operand, or a tensor that does not depend on the source.
    Zero,
    /// The source itself.
    One,
    Dense(&'a [f64]),
    /// Tangent of the output of `op` applied directly to the source, kept
    /// implicit: Σ over `op`'s tensor operands of `d_elem`, read from `saved`.
    Seeded {
        op: OpKind,
        saved: Vec<&'a [f64]>,
        c: f64,
    },
}

impl Tangent<'_> {
    pub fn at(&self, i: usize, scratch: &mut Vec<f64>) -> f64 {
        match self {
            Tangent::Zero => 0.0,
            Tangent::One => 1.0,
            Tangent::Dense(d) => d[i],
            Tangent::Seeded { op, saved, c } => {
                scratch.clear();
                scratch.extend(saved.iter().map(|s| s[i]));
                op.def()
                    .operands
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| **k == OperandKind::Tensor)
                    .map(|(slot, _)| op.d_elem(slot, scratch, *c))
                    .sum()
            }
        }
    }
}

/// Element-wise JVP: `out[i] = Σⱼ ∂out/∂inⱼ[i] · tangentⱼ[i]`.
///
/// Multiplications by a `One` tangent are skipped and `Zero` tangents are
/// dropped, so a seed never turns into a materialized ones tensor.
pub fn local_jvp(
    kind: OpKind,
    saved: &[&[f64]],
    c: f64,
    tangents: &[Tangent<'_>],
    numel: usize,
) -> Result<Vec<f64>> {
    let def = kind.def();
    if def.fad_class == FadClass::Nfad {
        return Err(Error::NotFad(def.name));
    }
    if tangents.len() != def.arity() {
        return Err(Error::Arity {
            op: def.name,
            expected: def.arity(),
            got: tangents.len(),
        });
    }
    if saved.len() != def.saves_for_vjp.len() {
        return Err(Error::MissingSaved {
            op: def.name,
            slot: saved.len(),
        });
    }
    let mut vals = vec![0.0; saved.len()];
    let mut scratch = Vec::new();
    let mut out = vec![0.0; numel];
    for (i, o) in out.iter_mut().enumerate() {
        for (v, s) in vals.iter_mut().zip(saved) {
            *v = s[i];
        }
        let mut acc = 0.0;
        for (slot, t) in tangents.iter().enumerate() {
            match t {
                Tangent::Zero => {}
                Tangent::One => acc += kind.d_elem(slot, &vals, c),
                t => acc += kind.d_elem(slot, &vals, c) * t.at(i, &mut scratch),
            }
        }
        *o = acc;
    }
    Ok(out)
}

/// Collect the values an op saves for its VJP from its operands and output.
pub fn saved_views<'a>(kind: OpKind, args: &[Arg<'a>], out: View<'a>) -> Vec<View<'a>> {
    kind.def()
        .saves_for_vjp
        .iter()
        .map(|s| match s {
            Saved::Output => out,
            Saved::Input(j) => match args[*j] {
                Arg::Tensor(v) => v,
                Arg::Const(_) => unreachable!("ops never save constants"),
            },
        })
        .collect()
}

/// Per-operand metadata used for fad/nfad classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMeta {
    Const,
    /// `source` is the fad source token for fad tensors and the tensor's own
    /// id otherwise.
    Tensor {
        is_fad: bool,
        source: TensorId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    UnaryElementwise,
    BinaryConst,
    BinarySameSource,
    BinaryDifferentSource,
    IntrinsicallyNfad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FadClassification {
    pub fad: bool,
    pub reason: Reason,
    /// Shared source token when `fad`.
    pub source: Option<TensorId>,
}

pub fn classify(kind: OpKind, inputs: &[InputMeta]) -> FadClassification {
    let def = kind.def();
    let nfad = |reason| FadClassification {
        fad: false,
        reason,
        source: None,
    };
    if def.fad_class == FadClass::Nfad || inputs.len() != def.arity() {
        return nfad(Reason::IntrinsicallyNfad);
    }
    let sources: Vec<TensorId> = inputs
        .iter()
        .filter_map(|m| match m {
            InputMeta::Tensor { source, .. } => Some(*source),
            InputMeta::Const => None,
        })
        .collect();
    let reason = match (def.fad_class, inputs.len(), sources.len()) {
        (FadClass::FadUnary, _, _) => Reason::UnaryElementwise,
        (_, 2, 1) => Reason::BinaryConst,
        _ if sources.windows(2).all(|w| w[0] == w[1]) => Reason::BinarySameSource,
        _ => return nfad(Reason::BinaryDifferentSource),
    };
    FadClassification {
        fad: true,
        reason,
        source: sources.first().copied(),
    }
}

/// Static view of the operator set, listable by the CLI.
#[derive(Debug)]
pub struct Registry {
    ops: BTreeMap<&'static str, OpKind>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            ops: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kind: OpKind) -> Result<()> {
        let name = kind.name();
        if self.ops.insert(name, kind).is_some() {
            return Err(Error::DuplicateOp(name.to_string()));
        }
        Ok(())
    }

    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        for k in OpKind::ALL {
            r.register(k).expect("builtin names are unique");
        }
        r
    }

    pub fn get(&self, name: &str) -> Result<OpKind> {
        self.ops
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOp(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.ops.values().copied()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}
