use super::{build_model, RunConfig};
use crate::diff::check::{check_params, GradCheckReport};
use crate::error::{Error, Result};
use crate::features::{self, synth_generate, SamplePair, SynthConfig};
use crate::fusion;

/// Finite-difference check of the total loss against every parameter of the
/// model `cfg` describes, backbone included, on `batch` synthetic samples.
pub fn grad_check(cfg: &RunConfig, batch: usize, step: f64) -> Result<GradCheckReport> {
    if cfg.height != cfg.width {
        return Err(Error::Config("the gradient check uses a square grid".into()));
    }
    let synth = SynthConfig {
        num_classes: cfg.num_classes,
        grid: cfg.height,
        image_size: cfg.height * features::total_stride(cfg.widths().len()),
        train_per_class: batch.div_ceil(cfg.num_classes),
        test_per_class: 0,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let (data, _) = synth_generate(&synth)?;
    let model = build_model(cfg, &data)?;
    let store = model.init(cfg.seed);
    let samples: Vec<&SamplePair> = data.samples.iter().take(batch).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let norm = data.manifest.normalization.as_ref();
    check_params(&store, step, |tape, s| {
        let fwd = model.forward(tape, s, &samples, norm)?;
        Ok(fusion::total_loss(tape, &fwd.loss_terms, &labels)?.0)
    })
}
