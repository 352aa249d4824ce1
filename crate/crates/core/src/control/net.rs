use super::{Controller, StepContext};
use crate::error::Result;
use crate::geometry::Twist;
use crate::graph::build_graph;
use crate::nn::{ServoNet, Tensor};

/// Runs a [`ServoNet`] in closed loop, carrying the recurrent state
/// across steps. The state is cleared on [`Controller::reset`].
pub struct NetController<'a> {
    model: &'a ServoNet,
    label: String,
    hidden: Tensor,
}

impl<'a> NetController<'a> {
    pub fn new(model: &'a ServoNet, label: String) -> Self {
        Self {
            model,
            label,
            hidden: model.zero_hidden(),
        }
    }
}

impl Controller for NetController<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self) {
        self.hidden = self.model.zero_hidden();
    }

    fn velocity(&mut self, ctx: &StepContext<'_>) -> Result<Twist> {
        let graph = build_graph(ctx.pair)?;
        let (twist, hidden) = self.model.step(&graph, &self.hidden)?;
        self.hidden = hidden;
        Ok(twist)
    }
}
