//! Timestep shrinkage: the temporal transformer between stages and the
//! latency / parameter accounting of a stage plan.
//!
//! For a stage output `O1 [T1, N, C, H, W]` the transformer computes a
//! per-sample descriptor `avg [T1, N]` (mean over `C, H, W`), scores
//! `d = softmax(W avg)` over the `T2` axis, and reassigns the time-summed
//! output as `I2[t] = (sum_t' O1[t']) * d[t]`. Because the scores sum to one,
//! the reassignment conserves the total input over time.

use crate::autodiff::{Tape, ValueId};
use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One stage: `units` conv+neuron pairs run for `timesteps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub units: usize,
    pub timesteps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    stages: Vec<StageSpec>,
}

impl StagePlan {
    /// Builds and validates a plan: `T_1 > T_2 > ... > T_n >= 1`, every `n_i >= 1`.
    pub fn new(units: &[usize], timesteps: &[usize]) -> Result<Self> {
        if units.len() != timesteps.len() {
            return Err(Error::InvalidPlan(format!(
                "{} unit counts for {} stage timesteps",
                units.len(),
                timesteps.len()
            )));
        }
        let plan = Self {
            stages: units
                .iter()
                .zip(timesteps)
                .map(|(&units, &timesteps)| StageSpec { units, timesteps })
                .collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("empty plan".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.units == 0) {
            return Err(Error::InvalidPlan(format!("stage with {} units", s.units)));
        }
        if self.stages.last().is_some_and(|s| s.timesteps == 0) {
            return Err(Error::InvalidPlan("timesteps must be >= 1".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].timesteps >= w[0].timesteps {
                return Err(Error::InvalidPlan(format!(
                    "timesteps must strictly shrink (got {} then {})",
                    w[0].timesteps, w[1].timesteps
                )));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.timesteps).collect()
    }

    pub fn units(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.units).collect()
    }
}

/// Unit-weighted mean stage timestep; the classification head is not counted.
pub fn average_timestep(plan: &StagePlan) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::InvalidPlan("empty plan".into()));
    }
    let weighted: usize = plan.stages().iter().map(|s| s.units * s.timesteps).sum();
    let units: usize = plan.stages().iter().map(|s| s.units).sum();
    Ok(weighted as f64 / units as f64)
}

/// Learnable parameters added by all temporal transformers: `sum T_i T_{i+1}`.
pub fn overhead_count(plan: &StagePlan) -> usize {
    plan.stages().windows(2).map(|w| w[0].timesteps * w[1].timesteps).sum()
}

/// Score matrix `W [T2, T1]` of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalTransformer<F> {
    pub weight: Tensor<F>,
}

impl<F: Scalar> TemporalTransformer<F> {
    /// Zero weights: initial scores are uniform over the target steps.
    pub fn zeros(t1: usize, t2: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[t2, t1]),
        }
    }

    pub fn from_weight(weight: Tensor<F>) -> Result<Self> {
        weight.dims::<2>("temporal transformer weight")?;
        Ok(Self { weight })
    }

    pub fn source_steps(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn target_steps(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Full transform `O1 [T1, N, ...] -> I2 [T2, N, ...]`.
    pub fn apply(&self, o1: &Tensor<F>) -> Result<Tensor<F>> {
        let avg = temporal_descriptor(o1)?;
        let d = temporal_score(&avg, self)?;
        reassign(o1, &d)
    }
}

pub fn temporal_descriptor<F: Scalar>(o1: &Tensor<F>) -> Result<Tensor<F>> {
    kernels::temporal_descriptor(o1)
}

/// `softmax(W avg)` along the target-time axis, per sample: `[T2, N]`.
pub fn temporal_score<F: Scalar>(avg: &Tensor<F>, tt: &TemporalTransformer<F>) -> Result<Tensor<F>> {
    let z = kernels::time_mix(&tt.weight, avg)?;
    kernels::softmax(&z, 0)
}

pub fn reassign<F: Scalar>(o1: &Tensor<F>, d: &Tensor<F>) -> Result<Tensor<F>> {
    kernels::reassign(o1, d)
}

/// Records the transform on the tape with `w` as the `[T2, T1]` weight value.
pub fn transform_on_tape<F: Scalar>(tape: &mut Tape<F>, o1: ValueId, w: ValueId) -> Result<ValueId> {
    let t1 = tape.try_value(o1)?.shape().first().copied().unwrap_or(0);
    let src = tape.try_value(w)?.shape().get(1).copied().unwrap_or(0);
    if t1 != src {
        return Err(invalid(
            "temporal transformer",
            format!("stage output has {t1} timesteps but transformer expects {src}"),
        ));
    }
    let avg = tape.temporal_descriptor(o1)?;
    let z = tape.time_mix(w, avg)?;
    let d = tape.softmax(z, 0)?;
    tape.reassign(o1, d)
}
