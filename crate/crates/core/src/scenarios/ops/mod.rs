//! Pipeline operations. Each op reads its parameters from one `[[pipeline]]`
//! table and returns named metrics plus artifact files.

mod conformal;
mod dynamics;
mod spectral;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Context, OpOutput};
use crate::error::Result;

pub use conformal::{AxisResponse, BreakLoopOp, Cancellation, EndpointSurjectivity, LoopTailOp, ResponseOrder, TransverseResponse};
pub use dynamics::{
    FlowConservation, FlowTrajectory, ParamJacobian, PullbackCorrespondence, ReturnsScan, Separation, Transversality,
};
pub use spectral::{SphereKuznecov, TorusKuznecov};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    FlowTrajectory(FlowTrajectory),
    FlowConservation(FlowConservation),
    PullbackCorrespondence(PullbackCorrespondence),
    ParamJacobian(ParamJacobian),
    ReturnsScan(ReturnsScan),
    Transversality(Transversality),
    ClosedNormalSeparation(Separation),
    AxisResponse(AxisResponse),
    TransverseResponse(TransverseResponse),
    ResponseOrder(ResponseOrder),
    EndpointSurjectivity(EndpointSurjectivity),
    LoopTail(LoopTailOp),
    SecondPassCancellation(Cancellation),
    BreakLoop(BreakLoopOp),
    KuznecovTorus(TorusKuznecov),
    KuznecovSphere(SphereKuznecov),
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::FlowTrajectory(_) => "flow_trajectory",
            OpSpec::FlowConservation(_) => "flow_conservation",
            OpSpec::PullbackCorrespondence(_) => "pullback_correspondence",
            OpSpec::ParamJacobian(_) => "param_jacobian",
            OpSpec::ReturnsScan(_) => "returns_scan",
            OpSpec::Transversality(_) => "transversality",
            OpSpec::ClosedNormalSeparation(_) => "closed_normal_separation",
            OpSpec::AxisResponse(_) => "axis_response",
            OpSpec::TransverseResponse(_) => "transverse_response",
            OpSpec::ResponseOrder(_) => "response_order",
            OpSpec::EndpointSurjectivity(_) => "endpoint_surjectivity",
            OpSpec::LoopTail(_) => "loop_tail",
            OpSpec::SecondPassCancellation(_) => "second_pass_cancellation",
            OpSpec::BreakLoop(_) => "break_loop",
            OpSpec::KuznecovTorus(_) => "kuznecov_torus",
            OpSpec::KuznecovSphere(_) => "kuznecov_sphere",
        }
    }

    pub(crate) fn execute(&self, ctx: &Context) -> Result<OpOutput> {
        let name = self.name();
        match self {
            OpSpec::FlowTrajectory(o) => o.run(ctx, name),
            OpSpec::FlowConservation(o) => o.run(ctx),
            OpSpec::PullbackCorrespondence(o) => o.run(ctx, name),
            OpSpec::ParamJacobian(o) => o.run(ctx, name),
            OpSpec::ReturnsScan(o) => o.run(ctx, name),
            OpSpec::Transversality(o) => o.run(ctx, name),
            OpSpec::ClosedNormalSeparation(o) => o.run(ctx, name),
            OpSpec::AxisResponse(o) => o.run(ctx, name),
            OpSpec::TransverseResponse(o) => o.run(ctx, name),
            OpSpec::ResponseOrder(o) => o.run(ctx, name),
            OpSpec::EndpointSurjectivity(o) => o.run(ctx, name),
            OpSpec::LoopTail(o) => o.run(),
            OpSpec::SecondPassCancellation(o) => o.run(),
            OpSpec::BreakLoop(o) => o.run(),
            OpSpec::KuznecovTorus(o) => o.run(ctx, name),
            OpSpec::KuznecovSphere(o) => o.run(ctx, name),
        }
    }
}

/// Uniform unit vector in `R^n`, by rejection from the cube.
pub(crate) fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if r > 1e-3 && r <= 1.0 {
            return v.iter().map(|c| c / r).collect();
        }
    }
}
