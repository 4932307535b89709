//! Leaky integrate-and-fire dynamics with soft reset.
//!
//! One step is charge `H = (1 - 1/tau) U + I`, fire `S = [H >= theta]`,
//! reset `U = H - S theta`. Potential starts at zero for every sample.

use crate::autodiff::{SurrogateConfig, Tape, ValueId};
use crate::error::{invalid, Result};
use crate::kernels::{self, LifParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronConfig {
    /// Membrane time constant, > 1.
    pub tau: f64,
    /// Firing threshold, > 0.
    pub theta: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self { tau: 2.0, theta: 1.0 }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(invalid("neuron", format!("tau must be > 1, got {}", self.tau)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(invalid("neuron", format!("theta must be > 0, got {}", self.theta)));
        }
        Ok(())
    }

    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }
}

/// Neuron plus surrogate settings for a spiking layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    pub neuron: NeuronConfig,
    pub surrogate_a: f64,
    /// Detach the spike in the reset path during backward. Off by default, so
    /// gradients flow through `U = H - S theta` literally.
    pub detach_reset: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            neuron: NeuronConfig::default(),
            surrogate_a: 1.0,
            detach_reset: false,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        self.surrogate().validate()
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            a: self.surrogate_a,
            theta: self.neuron.theta,
        }
    }

    pub fn params(&self) -> LifParams {
        LifParams {
            tau: self.neuron.tau,
            theta: self.neuron.theta,
            surrogate_a: self.surrogate_a,
            detach_reset: self.detach_reset,
        }
    }
}

/// Membrane state for one timestep: post-reset `u` and post-charge `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState<F> {
    pub u: Tensor<F>,
    pub h: Tensor<F>,
}

impl<F: Scalar> LifState<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            h: Tensor::zeros(shape),
        }
    }
}

/// `H = (1 - 1/tau) U_prev + I`.
pub fn lif_charge<F: Scalar>(u_prev: &Tensor<F>, input: &Tensor<F>, cfg: &NeuronConfig) -> Result<Tensor<F>> {
    let leak = F::c(cfg.leak());
    u_prev.zip_map(input, "lif_charge", |u, i| leak * u + i)
}

/// `U = H - S theta`.
pub fn soft_reset<F: Scalar>(h: &Tensor<F>, s: &Tensor<F>, cfg: &NeuronConfig) -> Result<Tensor<F>> {
    let theta = F::c(cfg.theta);
    h.zip_map(s, "soft_reset", |h, s| h - s * theta)
}

pub fn fire<F: Scalar>(h: &Tensor<F>, theta: f64) -> Tensor<F> {
    let th = F::c(theta);
    h.map(|v| kernels::heaviside(v, th))
}

/// Advances `state` by one timestep and returns the spikes.
pub fn lif_step<F: Scalar>(state: &mut LifState<F>, input: &Tensor<F>, cfg: &NeuronConfig) -> Result<Tensor<F>> {
    state.h = lif_charge(&state.u, input, cfg)?;
    let s = fire(&state.h, cfg.theta);
    state.u = soft_reset(&state.h, &s, cfg)?;
    Ok(s)
}

/// Spike train for `input [T, ...]`, starting from `U = 0`.
pub fn lif_forward_sequence<F: Scalar>(input: &Tensor<F>, cfg: &NeuronConfig) -> Result<Tensor<F>> {
    let params = LifParams {
        tau: cfg.tau,
        theta: cfg.theta,
        surrogate_a: 1.0,
        detach_reset: false,
    };
    Ok(kernels::lif_sequence(input, &params)?.0)
}

/// Records a spiking layer on the tape; the potentials are saved for BPTT.
pub fn lif_layer<F: Scalar>(tape: &mut Tape<F>, input: ValueId, cfg: &LifConfig) -> Result<ValueId> {
    tape.lif(input, cfg.params())
}

/// Same dynamics as [`lif_layer`] but unrolled into per-step charge, spike and
/// reset nodes. Slower; useful for cross-checking the fused kernel.
pub fn lif_layer_unrolled<F: Scalar>(tape: &mut Tape<F>, inputs: &[ValueId], cfg: &LifConfig) -> Result<Vec<ValueId>> {
    if inputs.is_empty() {
        return Err(invalid("lif", "T = 0"));
    }
    let shape = tape.value(inputs[0]).shape().to_vec();
    let mut u = tape.constant(Tensor::zeros(&shape));
    let mut spikes = Vec::with_capacity(inputs.len());
    let surrogate = cfg.surrogate();
    for &i in inputs {
        let h = tape.add_scaled(u, i, cfg.neuron.leak(), 1.0)?;
        let s = tape.spike(h, surrogate)?;
        u = if cfg.detach_reset {
            let s_const = tape.constant(tape.value(s).clone());
            tape.add_scaled(h, s_const, 1.0, -cfg.neuron.theta)?
        } else {
            tape.add_scaled(h, s, 1.0, -cfg.neuron.theta)?
        };
        spikes.push(s);
    }
    Ok(spikes)
}
