//! Activation compositions, a small MLP and its SGD loop.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, EngineStats, Mode, Retained};
use crate::error::{Error, Result};
use crate::ops::{OpKind, Operand};
use crate::tensor::{Category, Shape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Swish,
    Mish,
    Gelu,
}

/// Operand of a composition step: the activation input, an earlier step,
/// or a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActArg {
    Input,
    Step(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActStep {
    pub op: OpKind,
    pub args: Vec<ActArg>,
}

fn step(op: OpKind, args: &[ActArg]) -> ActStep {
    ActStep {
        op,
        args: args.to_vec(),
    }
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Swish,
        Activation::Mish,
        Activation::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Swish => "swish",
            Activation::Mish => "mish",
            Activation::Gelu => "gelu",
        }
    }

    /// Primitive-op program; the last step is the activation output.
    pub fn composition(self) -> Vec<ActStep> {
        use ActArg::{Const, Input, Step};
        match self {
            Activation::Relu => vec![step(OpKind::Relu, &[Input])],
            Activation::Sigmoid => vec![step(OpKind::Sigmoid, &[Input])],
            Activation::Tanh => vec![step(OpKind::Tanh, &[Input])],
            Activation::Swish => vec![
                step(OpKind::Sigmoid, &[Input]),
                step(OpKind::Mul, &[Step(0), Input]),
            ],
            Activation::Mish => vec![
                step(OpKind::Softplus, &[Input]),
                step(OpKind::Tanh, &[Step(0)]),
                step(OpKind::Mul, &[Input, Step(1)]),
            ],
            // 0.5·x·(1 + tanh[√(2/π)·(x + 0.044715·x³)])
            Activation::Gelu => vec![
                step(OpKind::PowConst, &[Input, Const(3.0)]),
                step(OpKind::ConstMul, &[Step(0), Const(0.044715)]),
                step(OpKind::Add, &[Input, Step(1)]),
                step(
                    OpKind::ConstMul,
                    &[Step(2), Const((2.0 / std::f64::consts::PI).sqrt())],
                ),
                step(OpKind::Tanh, &[Step(3)]),
                step(OpKind::ConstAdd, &[Step(4), Const(1.0)]),
                step(OpKind::Mul, &[Input, Step(5)]),
                step(OpKind::ConstMul, &[Step(6), Const(0.5)]),
            ],
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation `{s}`")))
    }
}

/// Run `act` on `x`. Intermediate handles are released after their last use;
/// the caller keeps `x` and owns the result.
pub fn apply_activation(e: &mut Engine, act: Activation, x: TensorId) -> Result<TensorId> {
    let steps = act.composition();
    let mut last_use = vec![0; steps.len()];
    for (i, s) in steps.iter().enumerate() {
        for a in &s.args {
            if let ActArg::Step(j) = a {
                last_use[*j] = i;
            }
        }
    }
    let mut vals: Vec<TensorId> = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        let operands: Vec<Operand> = s
            .args
            .iter()
            .map(|a| match a {
                ActArg::Input => Operand::Tensor(x),
                ActArg::Step(j) => Operand::Tensor(vals[*j]),
                ActArg::Const(c) => Operand::Const(*c),
            })
            .collect();
        vals.push(e.apply(s.op, &operands)?);
        for (j, v) in vals.iter().enumerate().take(i) {
            if last_use[j] == i {
                e.release(*v)?;
            }
        }
    }
    Ok(*vals.last().expect("compositions are non-empty"))
}

fn default_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub batch: usize,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl MlpConfig {
    pub fn new(
        widths: Vec<usize>,
        activation: Activation,
        batch: usize,
        seed: u64,
        mode: Mode,
    ) -> Self {
        MlpConfig {
            widths,
            activation,
            batch,
            seed,
            mode,
            lr: default_lr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "need at least input and output widths".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// One affine layer; `w` is `[fan_in, fan_out]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Inputs `[batch, in]` and targets `[batch, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
}

impl Batch {
    /// `y = sin(Σ x)` on every output, `x` uniform in [−2, 2].
    pub fn synthetic(in_dim: usize, out_dim: usize, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut x = Vec::with_capacity(rows * in_dim);
        let mut y = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            let row: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let t = row.iter().sum::<f64>().sin();
            x.extend(row);
            y.extend(std::iter::repeat_n(t, out_dim));
        }
        Batch { x, y, rows }
    }
}

/// Everything one forward+backward pass reports.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutcome {
    pub loss: f64,
    /// Per parameter tensor in traversal order (w₀, b₀, w₁, b₁, …).
    pub grads: Vec<Vec<f64>>,
    /// Tape-held buffers at the end of the forward pass.
    pub retained: Retained,
    pub stats: EngineStats,
    pub backward_nodes: usize,
    pub peak_total_bytes: usize,
    /// Live intermediate and derivative bytes after teardown.
    pub leaked_bytes: usize,
}

impl PassOutcome {
    pub fn grad_checksum(&self) -> f64 {
        grad_checksum(&self.grads)
    }
}

/// Position-weighted sum, so swapped entries change the value.
pub fn grad_checksum(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flatten()
        .enumerate()
        .map(|(k, g)| g * ((k % 13) + 1) as f64)
        .sum()
}

impl Mlp {
    /// Uniform init in [−0.1, 0.1]: layer by layer, weights row-major then bias.
    pub fn new(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = cfg
            .widths
            .windows(2)
            .map(|p| {
                let w = (0..p[0] * p[1])
                    .map(|_| rng.gen_range(-0.1..=0.1))
                    .collect();
                let b = (0..p[1]).map(|_| rng.gen_range(-0.1..=0.1)).collect();
                Layer { w, b }
            })
            .collect();
        Ok(Mlp {
            widths: cfg.widths.clone(),
            activation: cfg.activation,
            layers,
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|p| p.len()).sum();
        if flat.len() != total {
            return Err(Error::DataLength {
                expected: total,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            for p in [&mut l.w, &mut l.b] {
                let n = p.len();
                p.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Forward to the mse loss on `batch`, then backward.
    pub fn pass(&self, mode: Mode, batch: &Batch) -> Result<PassOutcome> {
        self.pass_with(EngineConfig::new(mode), batch)
            .map(|(o, _)| o)
    }

    /// Like [`Mlp::pass`]; also hands back the engine (torn down) for
    /// inspection of its trace and ledger.
    pub fn pass_with(&self, config: EngineConfig, batch: &Batch) -> Result<(PassOutcome, Engine)> {
        let mut e = Engine::new(config);
        let (input, output) = (self.widths[0], *self.widths.last().expect("validated"));
        if batch.x.len() != batch.rows * input || batch.y.len() != batch.rows * output {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} rows does not fit widths {:?}",
                batch.rows, self.widths
            )));
        }
        let x = e.input(Shape::matrix(batch.rows, input)?, batch.x.clone())?;
        let t = e.input(Shape::matrix(batch.rows, output)?, batch.y.clone())?;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for (l, p) in self.layers.iter().zip(self.widths.windows(2)) {
            params.push(e.weight(Shape::matrix(p[0], p[1])?, l.w.clone())?);
            params.push(e.weight(Shape::vector(p[1])?, l.b.clone())?);
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pw) in params.chunks(2).enumerate() {
            let z = e.binary(OpKind::MatMul, h, pw[0])?;
            e.release(h)?;
            let a = e.binary(OpKind::BiasAdd, z, pw[1])?;
            e.release(z)?;
            h = if i < last {
                let y = apply_activation(&mut e, self.activation, a)?;
                e.release(a)?;
                y
            } else {
                a
            };
        }
        let loss = e.binary(OpKind::MseLoss, h, t)?;
        e.release(h)?;
        e.release(t)?;
        let loss_value = e.data(loss)?[0];
        let retained = e.retained();
        let backward_nodes = e.tape().len();
        let g = e.backward(loss, 1.0)?;
        let grads = params
            .iter()
            .map(|p| {
                g.get(*p)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; e.tensor(*p).map(|t| t.numel()).unwrap_or(0)])
            })
            .collect();
        e.release(loss)?;
        for p in &params {
            e.release(*p)?;
        }
        e.teardown()?;
        let ledger = e.ledger();
        let outcome = PassOutcome {
            loss: loss_value,
            grads,
            retained,
            stats: e.stats().clone(),
            backward_nodes,
            peak_total_bytes: ledger.peak_total(),
            leaked_bytes: ledger.live(Category::Intermediate)
                + ledger.live(Category::FadDerivative),
        };
        Ok((outcome, e))
    }

    /// `w ← w − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut flat = self.params_flat();
        let g: Vec<f64> = grads.concat();
        if g.len() != flat.len() {
            return Err(Error::DataLength {
                expected: flat.len(),
                got: g.len(),
            });
        }
        for (w, d) in flat.iter_mut().zip(&g) {
            *w -= lr * d;
        }
        self.set_params_flat(&flat)
    }

    /// `steps` SGD updates; returns the loss before each update plus the
    /// final loss, and the flattened parameters after each update.
    pub fn train(
        &mut self,
        mode: Mode,
        batch: &Batch,
        steps: usize,
        lr: f64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut losses = Vec::with_capacity(steps + 1);
        let mut trajectory = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = self.pass(mode, batch)?;
            losses.push(out.loss);
            self.sgd_step(&out.grads, lr)?;
            trajectory.push(self.params_flat());
        }
        losses.push(self.loss(batch)?);
        Ok((losses, trajectory))
    }

    /// Loss only, evaluated in plain mode.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.pass(Mode::Bp, batch)?.loss)
    }
}
