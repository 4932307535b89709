//! Multi-stage spiking networks with temporal transformers between stages and
//! optional early classifiers after every non-final stage.
//!
//! Training forward (per batch):
//! 1. `I_1 = X`
//! 2. for each stage `i < n`: `O_i = stage_i(I_i)`, `I_{i+1} = TT_i(O_i)`,
//!    `Y_i = EC_i(I_{i+1})`
//! 3. `Y_n = fc(gap(stage_n(I_n)))`
//!
//! Inference runs the same path without the early classifiers, so their
//! presence never changes the final logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{BnBatchStats, Tape, ValueId};
use crate::error::{invalid, Error, Result};
use crate::neuron::LifConfig;
use crate::scalar::Scalar;
use crate::temporal::{self, StagePlan};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 3x3 conv + batch norm + LIF.
    Conv { out_channels: usize, stride: usize },
    /// 2x2 average pool, stride 2.
    AvgPool,
    /// Two conv+BN+LIF units with a (projected) shortcut added after the
    /// second neuron layer.
    ResBlock { out_channels: usize, stride: usize },
}

impl LayerSpec {
    pub fn units(&self) -> usize {
        match self {
            LayerSpec::Conv { .. } => 1,
            LayerSpec::AvgPool => 0,
            LayerSpec::ResBlock { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Vgg9,
    ResNet18,
    /// Explicit per-stage layer lists (channel counts are used as given).
    Custom(Vec<Vec<LayerSpec>>),
}

impl Architecture {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "vgg9" => Ok(Self::Vgg9),
            "resnet18" => Ok(Self::ResNet18),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::Vgg9 => "vgg9",
            Self::ResNet18 => "resnet18",
            Self::Custom(_) => "custom",
        }
    }
}

/// Splits `total` items over `parts` stages, larger shares first.
fn front_loaded(total: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || parts > total {
        return Err(Error::InvalidPlan(format!(
            "cannot divide {total} layers into {parts} stages"
        )));
    }
    let (base, extra) = (total / parts, total % parts);
    Ok((0..parts).map(|i| base + usize::from(i < extra)).collect())
}

fn scaled(c: usize, scale: usize) -> usize {
    (c / scale).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Channel counts of the reference architectures are divided by this.
    pub width_scale: usize,
    pub stage_timesteps: Vec<usize>,
    pub early_classifiers: bool,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub lif: LifConfig,
}

impl NetworkSpec {
    pub fn new(arch: Architecture, stage_timesteps: &[usize], num_classes: usize, input_hw: (usize, usize)) -> Self {
        Self {
            arch,
            width_scale: 8,
            stage_timesteps: stage_timesteps.to_vec(),
            early_classifiers: true,
            num_classes,
            in_channels: 2,
            input_hw,
            lif: LifConfig::default(),
        }
    }

    /// Layer lists per stage.
    pub fn stage_layers(&self) -> Result<Vec<Vec<LayerSpec>>> {
        let n = self.stage_timesteps.len();
        if self.width_scale == 0 {
            return Err(invalid("network", "width scale must be >= 1"));
        }
        let s = self.width_scale;
        match &self.arch {
            Architecture::Custom(stages) => {
                if stages.len() != n {
                    return Err(Error::InvalidPlan(format!(
                        "{} custom stages for {} timesteps",
                        stages.len(),
                        n
                    )));
                }
                Ok(stages.clone())
            }
            Architecture::Vgg9 => {
                let widths = [64, 128, 256, 256, 512, 512, 512, 512];
                let shares = front_loaded(widths.len(), n)?;
                let mut stages: Vec<Vec<LayerSpec>> = vec![Vec::new(); n];
                let mut conv = 0;
                for (stage, &count) in shares.iter().enumerate() {
                    for _ in 0..count {
                        stages[stage].push(LayerSpec::Conv {
                            out_channels: scaled(widths[conv], s),
                            stride: 1,
                        });
                        // pools follow convs 2, 4 and 6
                        if conv % 2 == 1 && conv < 6 {
                            stages[stage].push(LayerSpec::AvgPool);
                        }
                        conv += 1;
                    }
                }
                Ok(stages)
            }
            Architecture::ResNet18 => {
                let blocks = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)];
                let shares = front_loaded(blocks.len(), n)?;
                let mut stages: Vec<Vec<LayerSpec>> = vec![Vec::new(); n];
                stages[0].push(LayerSpec::Conv {
                    out_channels: scaled(64, s),
                    stride: 1,
                });
                let mut b = 0;
                for (stage, &count) in shares.iter().enumerate() {
                    for _ in 0..count {
                        let (c, stride) = blocks[b];
                        stages[stage].push(LayerSpec::ResBlock {
                            out_channels: scaled(c, s),
                            stride,
                        });
                        b += 1;
                    }
                }
                Ok(stages)
            }
        }
    }

    pub fn plan(&self) -> Result<StagePlan> {
        let layers = self.stage_layers()?;
        let units: Vec<usize> = layers.iter().map(|l| l.iter().map(LayerSpec::units).sum()).collect();
        StagePlan::new(&units, &self.stage_timesteps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (running statistics) are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    tracked: usize,
    stride: usize,
    pad: usize,
    out_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Unit { name: String, conv: ConvBn, fanout: usize },
    Pool,
    Res {
        name: String,
        first: ConvBn,
        second: ConvBn,
        shortcut: Option<ConvBn>,
        fanout_first: usize,
        fanout_second: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct EarlyClassifier {
    conv: ConvBn,
    fc_weight: usize,
    fc_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    spec: NetworkSpec,
    plan: StagePlan,
    params: Vec<Param<F>>,
    stages: Vec<Vec<Block>>,
    transformers: Vec<usize>,
    early: Vec<EarlyClassifier>,
    head_weight: usize,
    head_bias: usize,
    mode: Mode,
}

/// One spiking layer's output on the tape.
#[derive(Debug, Clone)]
pub struct SpikeRecord {
    pub stage: usize,
    pub name: String,
    pub value: ValueId,
    /// Synapses driven by each spike of this layer.
    pub fanout: usize,
}

#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    running_mean: usize,
    running_var: usize,
    tracked: usize,
    stats: BnBatchStats<F>,
}

/// Values produced by one forward pass on a tape.
#[derive(Debug)]
pub struct TapeForward<F> {
    /// Early-classifier logits `[T_{i+1}, N, K]` (empty when not requested).
    pub ec_logits: Vec<ValueId>,
    pub final_logits: ValueId,
    /// Tape value for each model parameter that took part, by parameter index.
    pub param_values: Vec<Option<ValueId>>,
    pub spikes: Vec<SpikeRecord>,
    /// Per-stage outputs `O_i`.
    pub stage_outputs: Vec<ValueId>,
    /// Transformed stage outputs `I_{i+1}`.
    pub stage_inputs: Vec<ValueId>,
    pub bn_updates: Vec<BnUpdate<F>>,
}

/// Forward results detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainForward<F> {
    pub ec_logits: Vec<Tensor<F>>,
    pub final_logits: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRates {
    pub stage: usize,
    pub name: String,
    /// `[C, H, W]` (or `[C]`) of the spiking layer.
    pub shape: Vec<usize>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageTelemetry {
    pub spikes: f64,
    pub synaptic_ops: f64,
}

fn derived_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the parameter name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder<F> {
    seed: u64,
    params: Vec<Param<F>>,
}

impl<F: Scalar> Builder<F> {
    fn push(&mut self, name: String, value: Tensor<F>, trainable: bool) -> usize {
        self.params.push(Param { name, value, trainable });
        self.params.len() - 1
    }

    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.seed, &name));
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let t = Tensor::from_fn(shape, |_| F::c(normal.sample(&mut rng)));
        self.push(name, t, true)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.seed, &name));
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let t = Tensor::from_fn(shape, |_| F::c(dist.sample(&mut rng)));
        self.push(name, t, true)
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let weight = self.kaiming(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k);
        let gamma = self.push(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], F::one()), true);
        let beta = self.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]), true);
        let running_mean = self.push(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[cout]), false);
        let running_var = self.push(format!("{prefix}.bn.running_var"), Tensor::full(&[cout], F::one()), false);
        let tracked = self.push(format!("{prefix}.bn.num_batches"), Tensor::zeros(&[1]), false);
        ConvBn {
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            tracked,
            stride,
            pad: k / 2,
            out_channels: cout,
        }
    }

    fn fc(&mut self, prefix: &str, inp: usize, out: usize) -> (usize, usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.uniform(format!("{prefix}.weight"), &[out, inp], bound);
        let b = self.uniform(format!("{prefix}.bias"), &[out], bound);
        (w, b)
    }
}

/// Assembles a model with deterministic, name-derived parameter initialisation:
/// parameters shared between two specs get identical values for the same seed.
pub fn build_network<F: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Model<F>> {
    spec.lif.validate()?;
    if spec.num_classes == 0 || spec.in_channels == 0 {
        return Err(invalid("network", "need at least one class and one input channel"));
    }
    let plan = spec.plan()?;
    let layers = spec.stage_layers()?;
    let mut b = Builder::<F> {
        seed,
        params: Vec::new(),
    };

    // Fan-out per spiking layer = synapses of the next synaptic layer.
    let mut syn_next: Vec<usize> = Vec::new();
    for stage in &layers {
        for l in stage {
            match l {
                LayerSpec::Conv { out_channels, .. } => syn_next.push(out_channels * 9),
                LayerSpec::ResBlock { out_channels, .. } => {
                    syn_next.push(out_channels * 9);
                    syn_next.push(out_channels * 9);
                }
                LayerSpec::AvgPool => {}
            }
        }
    }
    syn_next.push(spec.num_classes);
    let mut spiking_index = 0usize;
    let mut next_fanout = || {
        spiking_index += 1;
        syn_next[spiking_index]
    };

    let (mut ch, (mut h, mut w)) = (spec.in_channels, spec.input_hw);
    let mut stages = Vec::with_capacity(layers.len());
    let mut stage_channels = Vec::with_capacity(layers.len());
    for (si, stage) in layers.iter().enumerate() {
        let mut blocks = Vec::with_capacity(stage.len());
        for (li, l) in stage.iter().enumerate() {
            match *l {
                LayerSpec::Conv { out_channels, stride } => {
                    let name = format!("stage{}.conv{}", si + 1, li + 1);
                    let conv = b.conv_bn(&name, ch, out_channels, 3, stride);
                    blocks.push(Block::Unit {
                        name,
                        conv,
                        fanout: next_fanout(),
                    });
                    ch = out_channels;
                    h = (h + 2 - 3) / stride + 1;
                    w = (w + 2 - 3) / stride + 1;
                }
                LayerSpec::AvgPool => {
                    if h < 2 || w < 2 {
                        return Err(invalid("network", format!("pool on {h}x{w} feature map")));
                    }
                    blocks.push(Block::Pool);
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::ResBlock { out_channels, stride } => {
                    let name = format!("stage{}.block{}", si + 1, li + 1);
                    let first = b.conv_bn(&format!("{name}.conv1"), ch, out_channels, 3, stride);
                    let second = b.conv_bn(&format!("{name}.conv2"), out_channels, out_channels, 3, 1);
                    let shortcut = (stride != 1 || ch != out_channels)
                        .then(|| b.conv_bn(&format!("{name}.shortcut"), ch, out_channels, 1, stride));
                    let fanout_first = next_fanout();
                    let fanout_second = next_fanout();
                    blocks.push(Block::Res {
                        name,
                        first,
                        second,
                        shortcut,
                        fanout_first,
                        fanout_second,
                    });
                    ch = out_channels;
                    h = (h + 2 - 3) / stride + 1;
                    w = (w + 2 - 3) / stride + 1;
                }
            }
            if h == 0 || w == 0 {
                return Err(invalid("network", "input too small for architecture"));
            }
        }
        stages.push(blocks);
        stage_channels.push(ch);
    }

    let ts = plan.timesteps();
    let transformers = (0..ts.len().saturating_sub(1))
        .map(|i| {
            let tt = temporal::TemporalTransformer::<F>::zeros(ts[i], ts[i + 1]);
            b.push(format!("tt{}.weight", i + 1), tt.weight, true)
        })
        .collect();

    let early = if spec.early_classifiers {
        (0..ts.len().saturating_sub(1))
            .map(|i| {
                let c = stage_channels[i];
                let conv = b.conv_bn(&format!("ec{}.conv", i + 1), c, c, 3, 1);
                let (fc_weight, fc_bias) = b.fc(&format!("ec{}.fc", i + 1), c, spec.num_classes);
                EarlyClassifier {
                    conv,
                    fc_weight,
                    fc_bias,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let (head_weight, head_bias) = b.fc("head.fc", ch, spec.num_classes);

    Ok(Model {
        spec: spec.clone(),
        plan,
        params: b.params,
        stages,
        transformers,
        early,
        head_weight,
        head_bias,
        mode: Mode::Train,
    })
}

struct Binder<'m, F> {
    model: &'m Model<F>,
    ids: Vec<Option<ValueId>>,
}

impl<F: Scalar> Binder<'_, F> {
    fn get(&mut self, tape: &mut Tape<F>, idx: usize) -> ValueId {
        *self.ids[idx].get_or_insert_with(|| tape.leaf(self.model.params[idx].value.clone()))
    }
}

impl<F: Scalar> Model<F> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_early_classifiers(&self) -> usize {
        self.early.len()
    }

    pub fn num_transformers(&self) -> usize {
        self.transformers.len()
    }

    /// Trainable scalar count, including transformer weights and early classifiers.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn transformer_parameter_count(&self) -> usize {
        self.transformers.iter().map(|&i| self.params[i].value.len()).sum()
    }

    pub fn early_classifier_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with("ec"))
            .map(|p| p.value.len())
            .sum()
    }

    /// Indices of the parameters owned by early classifier `i` (0-based).
    pub fn early_classifier_params(&self, i: usize) -> Vec<usize> {
        let prefix = format!("ec{}.", i + 1);
        (0..self.params.len())
            .filter(|&k| self.params[k].name.starts_with(&prefix))
            .collect()
    }

    fn conv_bn_lif(
        &self,
        tape: &mut Tape<F>,
        binder: &mut Binder<'_, F>,
        x: ValueId,
        c: &ConvBn,
        spike: bool,
        updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<ValueId> {
        let w = binder.get(tape, c.weight);
        let y = tape.conv2d(x, w, None, c.stride, c.pad)?;
        let gamma = binder.get(tape, c.gamma);
        let beta = binder.get(tape, c.beta);
        let running = match self.mode {
            Mode::Train => None,
            Mode::Eval => {
                if self.params[c.tracked].value.item() == F::zero() {
                    return Err(Error::UninitializedStats(self.params[c.weight].name.clone()));
                }
                Some((&self.params[c.running_mean].value, &self.params[c.running_var].value))
            }
        };
        let (z, stats) = tape.batchnorm(y, gamma, beta, running)?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                running_mean: c.running_mean,
                running_var: c.running_var,
                tracked: c.tracked,
                stats,
            });
        }
        if spike {
            tape.lif(z, self.spec.lif.params())
        } else {
            Ok(z)
        }
    }

    /// Algorithm forward on `tape`. `with_early` controls whether early
    /// classifiers are evaluated.
    pub fn forward_on_tape(&self, tape: &mut Tape<F>, x: &Tensor<F>, with_early: bool) -> Result<TapeForward<F>> {
        let ts = self.plan.timesteps();
        let [t, _, c, h, w] = x.dims::<5>("network input [T,N,C,H,W]")?;
        if t != ts[0] {
            return Err(invalid(
                "network",
                format!("input has {t} timesteps but the first stage runs {}", ts[0]),
            ));
        }
        if c != self.spec.in_channels || (h, w) != self.spec.input_hw {
            return Err(Error::ShapeMismatch {
                op: "network input vs spec (C, H, W)",
                left: x.shape().to_vec(),
                right: vec![self.spec.in_channels, self.spec.input_hw.0, self.spec.input_hw.1],
            });
        }
        let mut binder = Binder {
            model: self,
            ids: vec![None; self.params.len()],
        };
        let mut spikes = Vec::new();
        let mut updates = Vec::new();
        let mut ec_logits = Vec::new();
        let mut stage_outputs = Vec::new();
        let mut stage_inputs = Vec::new();

        let mut cur = tape.constant(x.clone());
        for (si, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                cur = match block {
                    Block::Unit { name, conv, fanout } => {
                        let s = self.conv_bn_lif(tape, &mut binder, cur, conv, true, &mut updates)?;
                        spikes.push(SpikeRecord {
                            stage: si,
                            name: name.clone(),
                            value: s,
                            fanout: *fanout,
                        });
                        s
                    }
                    Block::Pool => tape.avgpool2d(cur, 2, 2)?,
                    Block::Res {
                        name,
                        first,
                        second,
                        shortcut,
                        fanout_first,
                        fanout_second,
                    } => {
                        let s1 = self.conv_bn_lif(tape, &mut binder, cur, first, true, &mut updates)?;
                        let s2 = self.conv_bn_lif(tape, &mut binder, s1, second, true, &mut updates)?;
                        spikes.push(SpikeRecord {
                            stage: si,
                            name: format!("{name}.conv1"),
                            value: s1,
                            fanout: *fanout_first,
                        });
                        spikes.push(SpikeRecord {
                            stage: si,
                            name: format!("{name}.conv2"),
                            value: s2,
                            fanout: *fanout_second,
                        });
                        let sc = match shortcut {
                            Some(p) => self.conv_bn_lif(tape, &mut binder, cur, p, false, &mut updates)?,
                            None => cur,
                        };
                        tape.add(s2, sc)?
                    }
                };
            }
            stage_outputs.push(cur);
            if si + 1 < self.stages.len() {
                let wt = binder.get(tape, self.transformers[si]);
                cur = temporal::transform_on_tape(tape, cur, wt)?;
                stage_inputs.push(cur);
                if with_early {
                    if let Some(ec) = self.early.get(si) {
                        let s = self.conv_bn_lif(tape, &mut binder, cur, &ec.conv, true, &mut updates)?;
                        let pooled = tape.global_avgpool(s)?;
                        let fw = binder.get(tape, ec.fc_weight);
                        let fb = binder.get(tape, ec.fc_bias);
                        ec_logits.push(tape.linear(pooled, fw, Some(fb))?);
                    }
                }
            }
        }
        let pooled = tape.global_avgpool(cur)?;
        let hw = binder.get(tape, self.head_weight);
        let hb = binder.get(tape, self.head_bias);
        let final_logits = tape.linear(pooled, hw, Some(hb))?;

        Ok(TapeForward {
            ec_logits,
            final_logits,
            param_values: binder.ids,
            spikes,
            stage_outputs,
            stage_inputs,
            bn_updates: updates,
        })
    }

    /// Early-classifier logits plus final logits, using the current mode's
    /// batch-norm statistics.
    pub fn forward_train(&self, x: &Tensor<F>) -> Result<TrainForward<F>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, x, true)?;
        Ok(TrainForward {
            ec_logits: out.ec_logits.iter().map(|&id| tape.value(id).clone()).collect(),
            final_logits: tape.value(out.final_logits).clone(),
        })
    }

    /// Final logits with running statistics; early classifiers are skipped.
    pub fn forward_infer(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (logits, _) = self.infer_with_trace(x)?;
        Ok(logits)
    }

    fn eval_view(&self) -> std::borrow::Cow<'_, Self> {
        if self.mode == Mode::Eval {
            std::borrow::Cow::Borrowed(self)
        } else {
            let mut m = self.clone();
            m.mode = Mode::Eval;
            std::borrow::Cow::Owned(m)
        }
    }

    fn infer_with_trace(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<(SpikeRecord, Tensor<F>)>)> {
        let model = self.eval_view();
        let mut tape = Tape::new();
        let out = model.forward_on_tape(&mut tape, x, false)?;
        let spikes = out
            .spikes
            .into_iter()
            .map(|r| {
                let v = tape.value(r.value).clone();
                (r, v)
            })
            .collect();
        Ok((tape.value(out.final_logits).clone(), spikes))
    }

    /// Mean spike rate over `(T, N)` of every spiking layer on the inference path.
    pub fn firing_rates(&self, x: &Tensor<F>) -> Result<Vec<LayerRates>> {
        let (_, trace) = self.infer_with_trace(x)?;
        Ok(trace
            .into_iter()
            .map(|(rec, s)| {
                let (t, n) = (s.shape()[0], s.shape()[1]);
                let cell = s.len() / (t * n);
                let mut rates = vec![0.0f64; cell];
                for chunk in s.data().chunks(cell) {
                    for (r, v) in rates.iter_mut().zip(chunk) {
                        *r += v.to_f64().unwrap_or(0.0);
                    }
                }
                let denom = (t * n) as f64;
                rates.iter_mut().for_each(|r| *r /= denom);
                LayerRates {
                    stage: rec.stage,
                    name: rec.name,
                    shape: s.shape()[2..].to_vec(),
                    rates,
                }
            })
            .collect())
    }

    /// Inference logits plus per-stage spike and synaptic-operation tallies.
    pub fn infer_with_telemetry(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<StageTelemetry>)> {
        let (logits, trace) = self.infer_with_trace(x)?;
        let mut tele = vec![StageTelemetry::default(); self.stages.len()];
        for (rec, s) in trace {
            let count = s.sum().to_f64().unwrap_or(0.0);
            tele[rec.stage].spikes += count;
            tele[rec.stage].synaptic_ops += count * rec.fanout as f64;
        }
        Ok((logits, tele))
    }

    /// Folds the batch statistics of a train-mode forward into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let m = F::c(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            let first = self.params[u.tracked].value.item() == F::zero();
            for (r, &v) in self.params[u.running_mean]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *r = if first { v } else { keep * *r + m * v };
            }
            for (r, &v) in self.params[u.running_var]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var_unbiased)
            {
                *r = if first { v } else { keep * *r + m * v };
            }
            self.params[u.tracked].value.data_mut()[0] += F::one();
        }
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    pub fn copy_shared_from(&mut self, other: &Model<F>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(q) = other.param(&p.name) {
                if q.value.shape() == p.value.shape() {
                    p.value = q.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
