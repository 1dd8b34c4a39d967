//! Common interface over the Q-value approximators so the agent can train
//! either the spline network or the plain MLP baseline.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

pub trait QFunction: Clone + Send + Sync + Serialize + DeserializeOwned {
    /// Forward-pass cache consumed by [`QFunction::backward`].
    type Tape: Default + Send;

    fn input_width(&self) -> usize;
    fn output_width(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward_tape(&self, x: &[f64], tape: &mut Self::Tape) -> Result<()>;
    fn tape_output(tape: &Self::Tape) -> &[f64];

    /// Accumulates `upstreamᵀ·∂q/∂params` into `grad`.
    fn backward(&self, tape: &Self::Tape, upstream: &[f64], grad: &mut [f64]);

    fn regularization(&self) -> f64 {
        0.0
    }

    fn add_regularization_grad(&self, _grad: &mut [f64]) {}

    /// Hook run after every optimizer step (projections, sharing).
    fn after_update(&mut self) -> Result<()> {
        Ok(())
    }

    /// Rebuild derived state after deserialization.
    fn validate(&mut self) -> Result<()> {
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Self::Tape::default();
        self.forward_tape(x, &mut tape)?;
        Ok(Self::tape_output(&tape).to_vec())
    }
}
