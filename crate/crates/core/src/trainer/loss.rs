//! Batch-softmax contrastive objective over fused similarity scores.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over rows of `−log softmax(sims / temperature)[positive]`.
///
/// `sims` is `B×C`; `positives[r]` is the column holding row `r`'s positive.
pub fn contrastive_loss(
    tape: &mut Tape,
    sims: Var,
    positives: &[usize],
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::arg(format!("temperature {temperature} must be positive")));
    }
    let logits = tape.scale(sims, 1.0 / temperature);
    tape.cross_entropy(logits, positives)
}

/// [`contrastive_loss`] on a plain matrix.
pub fn contrastive_loss_value(sims: &Tensor, positives: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(sims.clone());
    let l = contrastive_loss(&mut tape, s, positives, temperature)?;
    tape.value(l).item()
}
