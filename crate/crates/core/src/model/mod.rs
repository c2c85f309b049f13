//! The CLIP-IT model, its layers, cost accounting and checkpoints.

pub mod checkpoint;
pub mod clipit;
pub mod cost;
pub mod layers;

pub use clipit::{averaging_fusion, Bound, ClipItModel, Head, JointOutput, ModelDims, ModelKind, Part, TapeOutput};
pub use cost::{count_cost, CostReport};
pub use layers::{Affine, LoraLinear, Mlp};

use crate::error::Result;
use crate::numeric::{Tape, Var};

/// `CE(y, softmax(logits)) + λ·KD(t, t̂)` on a forward pass, with the KD
/// term restricted to rows in `mask`. Returns `(total, ce, kd)`.
pub fn joint_loss(
    tape: &mut Tape,
    out: &TapeOutput,
    labels: &[usize],
    lambda: f64,
    mask: Option<&[bool]>,
) -> Result<(Var, Var, Option<Var>)> {
    let ce = tape.softmax_ce(out.logits, labels)?;
    match (out.t, out.t_hat) {
        (Some(t), Some(t_hat)) => {
            let kd = tape.cosine_distill(t, t_hat, mask)?;
            let weighted = tape.scale(kd, lambda);
            let total = tape.add(ce, weighted)?;
            Ok((total, ce, Some(kd)))
        }
        _ => Ok((ce, ce, None)),
    }
}
