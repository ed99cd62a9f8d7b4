use crate::data::Dataset;
use crate::devices::{ChipInstance, DetectionMode, Mapping};
use crate::error::{OsnnError, Result};
use crate::layers::model::{argmax, cross_entropy_grad};
use crate::layers::OsnnModel;

use super::train::{par_map, sample_rng, Evaluation};

/// Accuracy of `model` deployed on a fabricated chip.
///
/// Every blocked layer is programmed onto the same hardware in turn and
/// run with [`ChipInstance::simulate_scaled`]; the outputs are multiplied by
/// the layer gain. Image `i` draws its dynamic noise from stream
/// `(seed, i)`.
pub fn evaluate_on_chip(
    model: &OsnnModel,
    chip: &ChipInstance,
    data: &Dataset,
    mapping: Mapping,
    mode: DetectionMode,
    seed: u64,
    threads: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(OsnnError::Empty("dataset"));
    }
    let mut chips = Vec::new();
    let mut gains = Vec::new();
    for layer in model.layers() {
        if let Some((linear, gain)) = layer.blocked() {
            let mut c = chip.clone();
            c.program(linear, mapping)?;
            chips.push(c);
            gains.push(gain);
        }
    }
    let results = par_map(data.len(), threads, |i| -> Result<(usize, usize, f64)> {
        let mut rng = sample_rng(seed, usize::MAX >> 32, i);
        let logits = model.forward_with(data.image(i), |b, cols, np, positions| {
            let y = chips[b].simulate_scaled(cols, np, positions, mode, &mut rng)?;
            Ok::<_, OsnnError>(y.into_iter().map(|v| v * gains[b]).collect())
        })?;
        let label = data.label(i);
        Ok((label, argmax(&logits), cross_entropy_grad(&logits, label).0))
    });
    let preds = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_predictions(&preds, model.output_len()))
}
