use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{OsnnError, Result};
use crate::layers::OsnnModel;

use super::train::{run_epochs, EpochMetrics, Optimizer, Phase, TrainConfig};

/// Kept flags of every Σ unit, one grid (`m_blocks x n_blocks`, row-major)
/// per blocked layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub m_blocks: usize,
    pub n_blocks: usize,
    pub kept: Vec<bool>,
}

impl PruneMask {
    pub fn of(model: &OsnnModel) -> Self {
        Self {
            layers: model
                .blocked_layers()
                .map(|l| {
                    let pad = l.padding();
                    LayerMask {
                        m_blocks: pad.m_blocks,
                        n_blocks: pad.n_blocks,
                        kept: (0..pad.unit_count()).map(|u| l.is_kept(u)).collect(),
                    }
                })
                .collect(),
        }
    }

    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.kept.len()).sum()
    }

    pub fn kept_units(&self) -> usize {
        self.layers.iter().map(|l| l.kept.iter().filter(|k| **k).count()).sum()
    }

    pub fn pruned_fraction(&self) -> f64 {
        let total = self.total_units();
        if total == 0 {
            0.0
        } else {
            1.0 - self.kept_units() as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub total_units: usize,
    pub pruned_units: usize,
    pub pruned_fraction: f64,
    pub pruned_per_layer: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: OsnnModel,
    pub mask: PruneMask,
    pub report: PruneReport,
    /// Penalty epochs followed by fine-tuning epochs.
    pub metrics: Vec<EpochMetrics>,
}

/// Group-lasso pruning of whole Σ units.
///
/// Trains `config.prune.penalty_epochs` with the penalty
/// `lambda * sum ||Σ_ij||_2` (applied as a proximal shrink after each
/// step), removes the units whose norm is below `tau`, then fine-tunes the
/// remaining units for `config.prune.finetune_epochs`.
pub fn prune_sigma_groups(
    model: &OsnnModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<PruneOutcome> {
    let pc = config.prune;
    if !(pc.lambda >= 0.0 && pc.lambda.is_finite()) {
        return Err(OsnnError::invalid("lambda", format!("{} must be >= 0", pc.lambda)));
    }
    if !(pc.tau >= 0.0 && pc.tau.is_finite()) {
        return Err(OsnnError::invalid("tau", format!("{} must be >= 0", pc.tau)));
    }
    config.validate()?;
    let mut model = model.clone();
    model.set_quant(config.quant);
    let mut opt = Optimizer::new(&model);
    let mut metrics = run_epochs(
        &mut model,
        train_set,
        test_set,
        &Phase {
            config,
            epochs: pc.penalty_epochs,
            first_epoch: 0,
            group_penalty: pc.lambda,
        },
        &mut opt,
    )?;

    let mut pruned_per_layer = Vec::new();
    for layer in model.blocked_layers_mut() {
        let k = layer.k();
        let units = layer.padding().unit_count();
        let sigma = layer.sigma().to_vec();
        let kept: Vec<bool> = (0..units)
            .map(|u| {
                let norm = sigma[u * k..(u + 1) * k].iter().map(|s| s * s).sum::<f64>().sqrt();
                layer.is_kept(u) && norm >= pc.tau
            })
            .collect();
        pruned_per_layer.push(kept.iter().filter(|k| !**k).count());
        layer.set_mask(kept)?;
    }

    let mut opt = Optimizer::new(&model);
    metrics.extend(run_epochs(
        &mut model,
        train_set,
        test_set,
        &Phase {
            config,
            epochs: pc.finetune_epochs,
            first_epoch: pc.penalty_epochs,
            group_penalty: 0.0,
        },
        &mut opt,
    )?);

    let mask = PruneMask::of(&model);
    let total_units = mask.total_units();
    let report = PruneReport {
        total_units,
        pruned_units: total_units - mask.kept_units(),
        pruned_fraction: mask.pruned_fraction(),
        pruned_per_layer,
    };
    Ok(PruneOutcome {
        model,
        mask,
        report,
        metrics,
    })
}
