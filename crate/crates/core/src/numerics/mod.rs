//! Dense tensors, reverse-mode differentiation, MLPs and Adam.

mod adam;
pub mod checkpoint;
mod linalg;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_params, save_params};
pub use mlp::{mlp_forward, Activation, Mlp, MlpSpec};
pub use params::{register_params, ParamSet, ParamVars};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Evaluates `loss_builder` on a fresh tape with every parameter registered as
/// a differentiable leaf and returns the loss value and `d loss / d param` for
/// each parameter (zeros for parameters the loss does not touch).
pub fn grad<'a, F>(params: &'a ParamSet, loss_builder: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape<'a>, &ParamVars) -> Result<Var>,
{
    grad_filtered(params, |_| true, loss_builder)
}

/// Like [`grad`], but only names accepted by `trainable` get gradients; the
/// rest enter the tape as constants and are omitted from the result.
pub fn grad_filtered<'a, F>(
    params: &'a ParamSet,
    trainable: impl Fn(&str) -> bool,
    loss_builder: F,
) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape<'a>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, &trainable);
    let loss = loss_builder(&mut tape, &vars)?;
    let value = tape.value(loss).data().first().copied().unwrap_or(f64::NAN);
    let mut g = tape.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        if !trainable(name) {
            continue;
        }
        let v = vars.get(name).expect("registered");
        let gt = g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let gt = gt.reshaped(t.shape().to_vec())?;
        out.insert(name.clone(), gt);
    }
    Ok((value, out))
}
