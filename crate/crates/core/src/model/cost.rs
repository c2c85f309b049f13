use serde::{Deserialize, Serialize};

use super::clipit::{ClipItModel, Head};

/// Parameter and FLOP counts for the image-only path and the text branch.
///
/// An affine map costs `2·d_in·d_out` FLOPs per sample, a LoRA layer the
/// sum of its three matrix products, and a nonlinearity one FLOP per unit.
/// Frozen adapter bases count towards the totals but are not trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub param_total: usize,
    pub param_trainable: usize,
    pub flops_per_sample: usize,
    pub text_param_total: usize,
    pub text_param_trainable: usize,
    pub text_flops_per_sample: usize,
}

pub fn count_cost(model: &ClipItModel) -> CostReport {
    let f_v = model.vision_adapter();
    let mut r = CostReport {
        param_total: f_v.param_count(),
        param_trainable: f_v.trainable_count(),
        flops_per_sample: f_v.flops(),
        ..CostReport::default()
    };
    let mut add = |total: usize, flops: usize| {
        r.param_total += total;
        r.param_trainable += total;
        r.flops_per_sample += flops;
    };
    let mut text_extra = (0, 0);
    match model.head() {
        Head::Late { h_t, h_v, h_d, g } => {
            for a in [h_t, h_v, g] {
                add(a.param_count(), a.flops());
            }
            add(h_d.param_count(), h_d.flops());
        }
        Head::Early { h_d, classifier, .. } => {
            add(h_d.param_count(), h_d.flops());
            add(classifier.param_count(), classifier.flops());
        }
        Head::Direct { h_v, projection } => {
            add(h_v.param_count(), h_v.flops());
            if let Some(p) = projection {
                text_extra = (p.param_count(), p.flops());
            }
        }
        Head::VisionOnly { h_v } => add(h_v.param_count(), h_v.flops()),
    }
    if let Some(f_t) = model.text_adapter() {
        r.text_param_total = f_t.param_count();
        r.text_param_trainable = f_t.trainable_count();
        r.text_flops_per_sample = f_t.flops();
    }
    r.text_param_total += text_extra.0;
    r.text_param_trainable += text_extra.0;
    r.text_flops_per_sample += text_extra.1;
    r
}
