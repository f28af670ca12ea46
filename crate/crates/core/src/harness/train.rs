use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{checkpoint, RunConfig};
use crate::ans::NodeLayout;
use crate::diff::{cosine_lr, sgd_step, ParameterStore, Prng, Tape};
use crate::error::{Error, Result};
use crate::features::{self, augment, Content, Dataset, Planted, SamplePair, Split};
use crate::fusion::{self, EvalReport, LossBundle};
use crate::model::Model;
use crate::{par, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss_rgb_global: f64,
    pub loss_depth_global: f64,
    pub loss_local: f64,
    pub loss_total: f64,
    pub eval_mean_acc: Option<f64>,
    pub selection_recall: Option<f64>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Loss terms of every optimizer step, in order.
    pub steps: Vec<LossBundle>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,steps,loss_rgb_global,loss_depth_global,loss_local,loss_total,eval_mean_acc,selection_recall\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
                r.epoch,
                r.lr,
                r.steps,
                r.loss_rgb_global,
                r.loss_depth_global,
                r.loss_local,
                r.loss_total,
                opt(r.eval_mean_acc),
                opt(r.selection_recall)
            );
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss_rgb_global,loss_depth_global,loss_local,loss_total\n");
        for (i, b) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "{i},{:.17e},{:.17e},{:.17e},{:.17e}", b.rgb_global, b.depth_global, b.local, b.total);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    pub sample: usize,
    pub modality: Modality,
    pub layout: NodeLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Mean fraction of planted cells among the selected positions.
    pub selection_recall: Option<f64>,
    pub predictions: Vec<usize>,
    pub selections: Vec<SampleSelection>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    /// Parameters of the epoch with the best evaluation.
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub last: ParameterStore,
    pub evaluation: Evaluation,
}

/// Builds the model a config describes for a given dataset.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    cfg.validate()?;
    let m = &data.manifest;
    if m.num_classes != cfg.num_classes {
        return Err(Error::Config(format!("dataset has {} classes, config {}", m.num_classes, cfg.num_classes)));
    }
    let grid = match m.content {
        Content::Images => {
            let stride = features::total_stride(cfg.widths().len());
            (m.height / stride, m.width / stride)
        }
        Content::Features => {
            if m.channels != cfg.channels {
                return Err(Error::Config(format!("feature maps have {} channels, config {}", m.channels, cfg.channels)));
            }
            (m.height, m.width)
        }
    };
    if grid != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset yields a {}x{} grid, config expects {}x{}",
            grid.0, grid.1, cfg.height, cfg.width
        )));
    }
    Model::new(cfg.model_config(m.content, m.channels))
}

/// Forward, backward and one SGD step on a batch.
pub fn train_step(model: &Model, store: &mut ParameterStore, batch: &[&SamplePair], data: &Dataset, lr: f64) -> Result<LossBundle> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, store, batch, data.manifest.normalization.as_ref())?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let (loss, bundle) = fusion::total_loss(&mut tape, &fwd.loss_terms, &labels)?;
    tape.backward_into(loss, store)?;
    sgd_step(store, lr)?;
    Ok(bundle)
}

fn recall(layout: &NodeLayout, planted: &[(usize, usize)]) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    planted.iter().filter(|p| layout.positions.contains(p)).count() as f64 / planted.len() as f64
}

/// Predicts every sample of `split` without augmentation. Batches run in
/// parallel; results are gathered in sample order.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    data: &Dataset,
    split: Split,
    planted: Option<&Planted>,
    batch: usize,
) -> Result<Evaluation> {
    let samples = data.split(split);
    let chunks: Vec<&[&SamplePair]> = samples.chunks(batch.max(1)).collect();
    let norm = data.manifest.normalization.as_ref();
    let outputs = par::map_slice(&chunks, |chunk| -> Result<(Vec<usize>, Vec<SampleSelection>)> {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, chunk, norm)?;
        let k = model.cfg.num_classes;
        let preds = fusion::argmax_rows(tape.value(fwd.logits).data(), k);
        let mut sel = Vec::new();
        for (b, s) in chunk.iter().enumerate() {
            for (m, layouts) in &fwd.layouts {
                sel.push(SampleSelection { sample: s.id, modality: *m, layout: layouts[b].clone() });
            }
        }
        Ok((preds, sel))
    });
    let mut predictions = Vec::with_capacity(samples.len());
    let mut selections = Vec::new();
    for out in outputs {
        let (p, s) = out?;
        predictions.extend(p);
        selections.extend(s);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = fusion::mean_class_accuracy(&predictions, &labels, model.cfg.num_classes)?;
    let selection_recall = planted.filter(|_| !selections.is_empty()).map(|p| {
        let total: f64 = selections
            .iter()
            .map(|s| p.samples.get(&s.sample).map_or(0.0, |cells| recall(&s.layout, cells.get(s.modality))))
            .sum();
        total / selections.len() as f64
    });
    Ok(Evaluation { report, selection_recall, predictions, selections })
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Diverged { epoch, step, detail: e.to_string() },
        other => other,
    }
}

/// Trains from fresh parameters. Everything random derives from `cfg.seed`:
/// the initial parameters, the per-epoch sample order, and each sample's
/// augmentation from (seed, epoch, sample id).
pub fn train(cfg: &RunConfig, data: &Dataset, planted: Option<&Planted>) -> Result<TrainOutcome> {
    let model = build_model(cfg, data)?;
    let mut store = model.init(cfg.seed);
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParameterStore, Evaluation)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Prng::derive(cfg.seed, epoch as u64, u64::MAX).shuffle(&mut order);
        let mut sums = LossBundle::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let augmented: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    let s = train_set[i];
                    augment(s, &mut Prng::derive(cfg.seed, epoch as u64, s.id as u64), &cfg.augment)
                })
                .collect();
            let refs: Vec<&SamplePair> = augmented.iter().collect();
            let b = train_step(&model, &mut store, &refs, data, lr).map_err(diverged(epoch, step))?;
            sums.rgb_global += b.rgb_global;
            sums.depth_global += b.depth_global;
            sums.local += b.local;
            sums.total += b.total;
            log.steps.push(b);
            steps += 1;
            step += 1;
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        let eval = if (epoch + 1) % cfg.eval_every == 0 || last_epoch {
            Some(evaluate(&model, &store, data, Split::Test, planted, cfg.batch)?)
        } else {
            None
        };
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            loss_rgb_global: sums.rgb_global / n,
            loss_depth_global: sums.depth_global / n,
            loss_local: sums.local / n,
            loss_total: sums.total / n,
            eval_mean_acc: eval.as_ref().map(|e| e.report.mean_class_accuracy),
            selection_recall: eval.as_ref().and_then(|e| e.selection_recall),
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.3e} loss {:.4} eval {:?}",
            cfg.variant,
            record.loss_total,
            record.eval_mean_acc
        );
        log.epochs.push(record);
        if let Some(e) = eval {
            let acc = e.report.mean_class_accuracy;
            if best.as_ref().map_or(true, |b| acc > b.0) {
                best = Some((acc, epoch, store.clone(), e));
            }
        }
    }
    let (_, best_epoch, best_store, evaluation) = best.expect("the last epoch is always evaluated");
    Ok(TrainOutcome { model, log, best: best_store, best_epoch, last: store, evaluation })
}

/// The evaluation written to `eval_report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub variant: String,
    pub split: Split,
    pub epoch: Option<usize>,
    pub selection_recall: Option<f64>,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn write_evaluation(dir: &Path, variant: String, epoch: Option<usize>, split: Split, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = ReportFile { variant, split, epoch, selection_recall: eval.selection_recall, report: eval.report.clone() };
    fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&file)?)?;
    fs::write(dir.join("confusion.csv"), eval.report.confusion_csv())?;
    Ok(())
}

/// Writes `config.json`, `train_log.csv`, `train_steps.csv`,
/// `eval_report.json`, `confusion.csv` and `checkpoint.bin` (best epoch).
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(dir.join("train_log.csv"), out.log.to_csv())?;
    fs::write(dir.join("train_steps.csv"), out.log.steps_csv())?;
    write_evaluation(dir, cfg.variant.to_string(), Some(out.best_epoch), Split::Test, &out.evaluation)?;
    checkpoint::save(&dir.join("checkpoint.bin"), cfg, &out.best)?;
    Ok(())
}
