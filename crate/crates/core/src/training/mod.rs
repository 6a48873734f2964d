//! Losses, optimizer and the toy training loops.

mod distill;
mod losses;
mod optim;
mod prefs;
mod teacher;

pub use distill::{build_pool, distill_run, eval_pool_kl, DistillConfig, DistillPool, DistillReport, DistillRow};
pub use losses::{
    cross_entropy_graph, dpo_loss, dpo_loss_graph, kl_distill_loss, kl_distill_loss_graph, kto_baseline, kto_loss,
    kto_loss_graph, sequence_logprobs_graph, total_distill_loss, total_distill_loss_graph, Label, PairLogps,
};
pub use optim::{adam_step, clip_global_norm, lr_at, AdamW};
pub use prefs::{
    parse_preferences, rl_run, synthetic_preferences, PreferenceExample, PreferenceRecord, RlConfig, RlMethod,
    RlReport, RlRow,
};
pub use teacher::{train_teacher, TeacherConfig, TeacherRow};

use crate::error::{Error, Result};
use crate::mamba2::{BoundModel, ModelParams};
use crate::numerics::{Gradients, Scalar, Tensor};

/// Clips and applies one AdamW step to the tensors of `model` accepted by `trainable`.
pub(crate) fn apply_update<T: Scalar>(
    model: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    bound: &BoundModel,
    mut grads: Gradients<T>,
    lr: f64,
    clip: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<()> {
    let mut gs: Vec<Tensor<T>> = bound.order.iter().map(|&id| grads.take(id)).collect();
    clip_global_norm(&mut gs, clip);
    if gs.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            layer: 0,
            step: opt.steps() as usize,
            what: "gradient".into(),
        });
    }
    opt.begin_step();
    let mut slot = 0;
    let mut err = None;
    model.visit_mut(&mut |name, t| {
        if err.is_none() && trainable(name) {
            if let Err(e) = opt.update(slot, t, &gs[slot], lr) {
                err = Some(e);
            }
        }
        slot += 1;
    });
    err.map_or(Ok(()), Err)
}

/// Fixed-precision CSV float.
pub(crate) fn f6(v: f64) -> String {
    format!("{v:.6}")
}
