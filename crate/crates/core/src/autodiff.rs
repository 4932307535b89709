//! Reverse-mode differentiation tape.
//!
//! Each recorded operation appends its output to the value arena and a node
//! naming its inputs plus whatever it saved for the backward pass. Backward
//! walks the nodes in reverse and accumulates gradients in a fixed order, so
//! replaying the same tape always yields bitwise-identical gradients.
//!
//! ```
//! use ssnn_core::autodiff::Tape;
//! use ssnn_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::scalar(2.0));
//! let x = tape.constant(Tensor::scalar(3.0));
//! let y = tape.mul(w, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap().item(), 3.0);
//! ```

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, BnSaved, LifParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rectangle surrogate for the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    /// Rectangle width.
    pub a: f64,
    /// Firing threshold.
    pub theta: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { a: 1.0, theta: 1.0 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(invalid("surrogate", format!("width a must be > 0, got {}", self.a)));
        }
        if !self.theta.is_finite() {
            return Err(invalid("surrogate", "threshold must be finite"));
        }
        Ok(())
    }
}

/// Batch statistics emitted by a train-mode batch norm, for running averages.
#[derive(Debug, Clone)]
pub struct BnBatchStats<F> {
    pub mean: Vec<F>,
    pub var_unbiased: Vec<F>,
}

#[derive(Debug)]
enum Op<F> {
    Conv2d { stride: usize, pad: usize, has_bias: bool },
    Linear { has_bias: bool },
    AvgPool { k: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(Box<BnSaved<F>>),
    Softmax { axis: usize },
    Spike(SurrogateConfig),
    AddScaled { alpha: F, beta: F },
    Mul,
    Scale(F),
    Sum,
    DotConst(Tensor<F>),
    Lif { params: LifParams, h: Tensor<F> },
    Descriptor,
    TimeMix,
    Reassign,
    MeanTime,
    CrossEntropy { labels: Vec<usize>, probs: Tensor<F> },
    WeightedSum(Vec<F>),
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    inputs: Vec<ValueId>,
    output: ValueId,
}

#[derive(Debug)]
pub struct Tape<F> {
    values: Vec<Tensor<F>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient store returned by [`Tape::backward`], indexed by value id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor<F> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires_grad: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn leaf(&mut self, t: Tensor<F>) -> ValueId {
        self.push_value(t, true)
    }

    /// Input leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> ValueId {
        self.push_value(t, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn try_value(&self, id: ValueId) -> Result<&Tensor<F>> {
        self.values.get(id.0).ok_or(Error::UnknownValue(id.0))
    }

    fn push_value(&mut self, t: Tensor<F>, grad: bool) -> ValueId {
        self.values.push(t);
        self.requires_grad.push(grad);
        ValueId(self.values.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, op: Op<F>, inputs: Vec<ValueId>, out: Tensor<F>) -> Result<ValueId> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let grad = inputs.iter().any(|i| self.requires_grad[i.0]);
        let output = self.push_value(out, grad);
        if grad {
            self.nodes.push(Node { op, inputs, output });
        }
        Ok(output)
    }

    fn check(&self, ids: &[ValueId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.values.len() {
                return Err(Error::UnknownValue(id.0));
            }
        }
        Ok(())
    }

    // --- recorded operations -----------------------------------------------

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>, stride: usize, pad: usize) -> Result<ValueId> {
        let mut ids = vec![x, w];
        ids.extend(b);
        self.check(&ids)?;
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let op = Op::Conv2d {
            stride,
            pad,
            has_bias: b.is_some(),
        };
        self.record("conv2d", op, ids, out)
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let mut ids = vec![x, w];
        ids.extend(b);
        self.check(&ids)?;
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.record("linear", Op::Linear { has_bias: b.is_some() }, ids, out)
    }

    pub fn avgpool2d(&mut self, x: ValueId, k: usize, stride: usize) -> Result<ValueId> {
        self.check(&[x])?;
        let out = kernels::avgpool2d(self.value(x), k, stride)?;
        self.record("avgpool2d", Op::AvgPool { k, stride }, vec![x], out)
    }

    pub fn global_avgpool(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = kernels::global_avgpool(self.value(x))?;
        self.record("global_avgpool", Op::GlobalAvgPool, vec![x], out)
    }

    /// Batch norm over `(T, N, H, W)`. With `running = Some((mean, var))` the
    /// op normalises with those statistics (eval mode) and returns no batch stats.
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running: Option<(&Tensor<F>, &Tensor<F>)>,
    ) -> Result<(ValueId, Option<BnBatchStats<F>>)> {
        self.check(&[x, gamma, beta])?;
        let (out, saved) = kernels::batchnorm(self.value(x), self.value(gamma), self.value(beta), running)?;
        let stats = saved.train.then(|| BnBatchStats {
            mean: saved.batch_mean.clone(),
            var_unbiased: saved.batch_var_unbiased.clone(),
        });
        let id = self.record("batchnorm", Op::BatchNorm(Box::new(saved)), vec![x, gamma, beta], out)?;
        Ok((id, stats))
    }

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.check(&[x])?;
        let out = kernels::softmax(self.value(x), axis)?;
        self.record("softmax", Op::Softmax { axis }, vec![x], out)
    }

    /// Heaviside spike; backward uses the rectangular surrogate.
    pub fn spike(&mut self, h: ValueId, cfg: SurrogateConfig) -> Result<ValueId> {
        self.check(&[h])?;
        cfg.validate()?;
        let theta = F::c(cfg.theta);
        let out = self.value(h).map(|v| kernels::heaviside(v, theta));
        self.record("spike", Op::Spike(cfg), vec![h], out)
    }

    /// `alpha * a + beta * b`.
    pub fn add_scaled(&mut self, a: ValueId, b: ValueId, alpha: f64, beta: f64) -> Result<ValueId> {
        self.check(&[a, b])?;
        let (al, be) = (F::c(alpha), F::c(beta));
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| al * x + be * y)?;
        self.record("add", Op::AddScaled { alpha: al, beta: be }, vec![a, b], out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.add_scaled(a, b, 1.0, 1.0)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(&[a, b])?;
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record("mul", Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, x: ValueId, alpha: f64) -> Result<ValueId> {
        self.check(&[x])?;
        let al = F::c(alpha);
        let out = self.value(x).map(|v| v * al);
        self.record("scale", Op::Scale(al), vec![x], out)
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        self.record("sum", Op::Sum, vec![x], out)
    }

    /// `sum(x * c)` for a constant tensor `c`; projects any output to a scalar.
    pub fn dot_const(&mut self, x: ValueId, c: Tensor<F>) -> Result<ValueId> {
        self.check(&[x])?;
        self.value(x).expect_same_shape(&c, "dot_const")?;
        let v = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        self.record("dot_const", Op::DotConst(c), vec![x], Tensor::scalar(v))
    }

    /// Fused LIF neuron layer over all timesteps of `input [T, ...]`.
    pub fn lif(&mut self, input: ValueId, params: LifParams) -> Result<ValueId> {
        self.check(&[input])?;
        let (spikes, h) = kernels::lif_sequence(self.value(input), &params)?;
        self.record("lif", Op::Lif { params, h }, vec![input], spikes)
    }

    pub fn temporal_descriptor(&mut self, o: ValueId) -> Result<ValueId> {
        self.check(&[o])?;
        let out = kernels::temporal_descriptor(self.value(o))?;
        self.record("temporal_descriptor", Op::Descriptor, vec![o], out)
    }

    /// `W [T2, T1] x avg [T1, N]`.
    pub fn time_mix(&mut self, w: ValueId, avg: ValueId) -> Result<ValueId> {
        self.check(&[w, avg])?;
        let out = kernels::time_mix(self.value(w), self.value(avg))?;
        self.record("time_mix", Op::TimeMix, vec![w, avg], out)
    }

    pub fn reassign(&mut self, o: ValueId, d: ValueId) -> Result<ValueId> {
        self.check(&[o, d])?;
        let out = kernels::reassign(self.value(o), self.value(d))?;
        self.record("reassign", Op::Reassign, vec![o, d], out)
    }

    pub fn mean_time(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = kernels::mean_time(self.value(x))?;
        self.record("rate_decode", Op::MeanTime, vec![x], out)
    }

    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        self.check(&[logits])?;
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            labels: labels.to_vec(),
            probs,
        };
        self.record("ce_loss", op, vec![logits], Tensor::scalar(loss))
    }

    /// `sum_i weights[i] * terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[ValueId], weights: &[f64]) -> Result<ValueId> {
        self.check(terms)?;
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(invalid(
                "weighted_sum",
                format!("{} terms vs {} weights", terms.len(), weights.len()),
            ));
        }
        let ws: Vec<F> = weights.iter().map(|&w| F::c(w)).collect();
        let mut total = F::zero();
        for (&t, &w) in terms.iter().zip(&ws) {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::Rank {
                    op: "weighted_sum term",
                    expected: 0,
                    got: v.shape().to_vec(),
                });
            }
            total += w * v.item();
        }
        self.record("weighted_sum", Op::WeightedSum(ws), terms.to_vec(), Tensor::scalar(total))
    }

    // --- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every value on the tape
    /// that influences it.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>> {
        let lv = self.try_value(loss)?;
        if lv.len() != 1 {
            return Err(Error::Rank {
                op: "backward (loss must be a scalar)",
                expected: 0,
                got: lv.shape().to_vec(),
            });
        }
        self.backward_seeded(loss, Tensor::full(lv.shape(), F::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_seeded(&self, output: ValueId, seed: Tensor<F>) -> Result<Gradients<F>> {
        self.try_value(output)?.expect_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);
        for node in self.nodes.iter().rev() {
            if node.output.0 > output.0 {
                continue;
            }
            let Some(g) = grads[node.output.0].as_ref() else {
                continue;
            };
            let local = self.node_backward(node, g)?;
            for (input, gi) in node.inputs.iter().zip(local) {
                let Some(gi) = gi else { continue };
                if !self.requires_grad[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: ValueId) -> bool {
        self.requires_grad[id.0]
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let inp = |i: usize| self.value(node.inputs[i]);
        let out = self.value(node.output);
        Ok(match &node.op {
            Op::Conv2d { stride, pad, has_bias } => {
                let need_x = self.needs(node.inputs[0]);
                let gr = kernels::conv2d_backward(inp(0), inp(1), *has_bias, need_x, *stride, *pad, g)?;
                vec![gr.input, Some(gr.weight), gr.bias]
            }
            Op::Linear { has_bias } => {
                let (gx, gw, gb) = kernels::linear_backward(inp(0), inp(1), *has_bias, g)?;
                vec![Some(gx), Some(gw), gb]
            }
            Op::AvgPool { k, stride } => vec![Some(kernels::avgpool2d_backward(inp(0).shape(), *k, *stride, g)?)],
            Op::GlobalAvgPool => vec![Some(kernels::global_avgpool_backward(inp(0).shape(), g))],
            Op::BatchNorm(saved) => {
                let (gx, gg, gb) = kernels::batchnorm_backward(saved, inp(1), g)?;
                vec![Some(gx), Some(gg), Some(gb)]
            }
            Op::Softmax { axis } => vec![Some(kernels::softmax_backward(out, *axis, g)?)],
            Op::Spike(cfg) => {
                let (theta, a) = (F::c(cfg.theta), F::c(cfg.a));
                vec![Some(inp(0).zip_map(g, "spike backward", |h, gv| {
                    gv * kernels::surrogate_grad(h, theta, a)
                })?)]
            }
            Op::AddScaled { alpha, beta } => {
                vec![Some(g.map(|v| v * *alpha)), Some(g.map(|v| v * *beta))]
            }
            Op::Mul => vec![
                Some(g.zip_map(inp(1), "mul backward", |a, b| a * b)?),
                Some(g.zip_map(inp(0), "mul backward", |a, b| a * b)?),
            ],
            Op::Scale(alpha) => vec![Some(g.map(|v| v * *alpha))],
            Op::Sum => vec![Some(Tensor::full(inp(0).shape(), g.item()))],
            Op::DotConst(c) => {
                let gv = g.item();
                vec![Some(c.map(|v| v * gv))]
            }
            Op::Lif { params, h } => vec![Some(kernels::lif_sequence_backward(h, g, params))],
            Op::Descriptor => vec![Some(kernels::temporal_descriptor_backward(inp(0).shape(), g))],
            Op::TimeMix => {
                let (gw, ga) = kernels::time_mix_backward(inp(0), inp(1), g);
                vec![Some(gw), Some(ga)]
            }
            Op::Reassign => {
                let (go, gd) = kernels::reassign_backward(inp(0), inp(1), g);
                vec![Some(go), Some(gd)]
            }
            Op::MeanTime => vec![Some(kernels::mean_time_backward(inp(0).shape(), g))],
            Op::CrossEntropy { labels, probs } => {
                vec![Some(kernels::cross_entropy_backward(probs, labels, g.item()))]
            }
            Op::WeightedSum(ws) => {
                let gv = g.item();
                ws.iter().map(|&w| Some(Tensor::scalar(w * gv))).collect()
            }
        })
    }
}

pub mod gradcheck {
    //! Central finite-difference checks for tape gradients (f64 only).

    use super::{Tape, ValueId};
    use crate::error::Result;
    use crate::tensor::Tensor;

    /// Maximum relative error for one input: `max|g - fd| / max(max|g|, max|fd|)`.
    #[derive(Debug, Clone)]
    pub struct InputReport {
        pub max_abs_err: f64,
        pub scale: f64,
        pub rel_err: f64,
    }

    #[derive(Debug, Clone)]
    pub struct Report {
        pub inputs: Vec<InputReport>,
    }

    impl Report {
        pub fn max_rel_err(&self) -> f64 {
            self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
        }
    }

    /// Compares tape gradients of the scalar built by `build` against central
    /// differences with step `h`, perturbing every element of every input.
    pub fn check<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> Result<Report>
    where
        B: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
    {
        let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&mut tape, &ids)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let grads = tape.backward(out)?;

        let mut reports = Vec::with_capacity(inputs.len());
        let mut work = inputs.to_vec();
        for (k, id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(*id, inputs[k].shape());
            let mut max_abs_err = 0.0f64;
            let mut scale = 0.0f64;
            for e in 0..inputs[k].len() {
                let orig = work[k].data()[e];
                work[k].data_mut()[e] = orig + h;
                let plus = eval(&work)?;
                work[k].data_mut()[e] = orig - h;
                let minus = eval(&work)?;
                work[k].data_mut()[e] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic.data()[e];
                max_abs_err = max_abs_err.max((a - fd).abs());
                scale = scale.max(a.abs()).max(fd.abs());
            }
            let rel_err = if scale > 0.0 { max_abs_err / scale } else { 0.0 };
            reports.push(InputReport {
                max_abs_err,
                scale,
                rel_err,
            });
        }
        Ok(Report { inputs: reports })
    }
}
