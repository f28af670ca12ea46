//! Global heads, graph readout, late fusion, the training objective and
//! evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ans::Selection;
use crate::diff::{ParameterStore, Prng, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::Modality;

/// `(B, din) @ W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    let dout = tape.shape(b)[0];
    let b = tape.reshape(b, &[1, dout])?;
    tape.add(y, b)
}

pub fn register_linear(store: &mut ParameterStore, prefix: &str, din: usize, dout: usize, rng: &mut Prng) {
    store.insert_glorot(format!("{prefix}.weight"), &[din, dout], din, dout, rng);
    store.insert_zeros(format!("{prefix}.bias"), &[dout]);
}

pub fn head_prefix(modality: Modality) -> String {
    format!("head.{}", modality.name())
}

/// Spatial mean -> FC (C -> Dg) -> classifier (Dg -> classes).
pub fn register_global_head(
    store: &mut ParameterStore,
    modality: Modality,
    channels: usize,
    dg: usize,
    classes: usize,
    rng: &mut Prng,
) {
    let p = head_prefix(modality);
    register_linear(store, &format!("{p}.fc"), channels, dg, rng);
    register_linear(store, &format!("{p}.cls"), dg, classes, rng);
}

/// Returns `(global feature (B, Dg), logits (B, classes))`.
pub fn global_head(tape: &mut Tape, store: &ParameterStore, modality: Modality, f: Var) -> Result<(Var, Var)> {
    let &[bs, c, h, w] = tape.shape(f) else {
        return Err(shape_err("global_head", format!("{:?}", tape.shape(f))));
    };
    let flat = tape.reshape(f, &[bs, c, h * w])?;
    let pooled = tape.mean_axis(flat, 2)?;
    let p = head_prefix(modality);
    let g = linear(tape, store, &format!("{p}.fc"), pooled)?;
    let logits = linear(tape, store, &format!("{p}.cls"), g)?;
    Ok((g, logits))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutMode {
    /// Mean over each modality's nodes, concatenated.
    #[default]
    Mean,
    /// Main and sub-central node states of each modality, concatenated.
    CentralConcat,
}

impl ReadoutMode {
    pub fn width(self, channels: usize, modalities: usize, sel: Selection) -> usize {
        match self {
            ReadoutMode::Mean => modalities * channels,
            ReadoutMode::CentralConcat => modalities * (sel.m + sel.n) * channels,
        }
    }
}

/// Node states (B, slots * k, C) -> local feature.
pub fn readout(tape: &mut Tape, h: Var, slots: usize, sel: Selection, mode: ReadoutMode) -> Result<Var> {
    let &[bs, n, c] = tape.shape(h) else {
        return Err(shape_err("readout", format!("{:?}", tape.shape(h))));
    };
    if n != slots * sel.k {
        return Err(shape_err("readout", format!("{n} nodes for {slots} x k={}", sel.k)));
    }
    let mut parts = Vec::with_capacity(slots);
    for s in 0..slots {
        let part = match mode {
            ReadoutMode::Mean => {
                let nodes = tape.narrow(h, 1, s * sel.k, sel.k)?;
                tape.mean_axis(nodes, 1)?
            }
            ReadoutMode::CentralConcat => {
                let central = sel.m + sel.n;
                let nodes = tape.narrow(h, 1, s * sel.k, central)?;
                tape.reshape(nodes, &[bs, central * c])?
            }
        };
        parts.push(part);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 1)
    }
}

pub const FUSE: &str = "fuse";

/// Concatenates `parts` in order and applies the final classifier.
/// Returns `(fused feature, logits)`.
pub fn fuse(tape: &mut Tape, store: &ParameterStore, parts: &[Var]) -> Result<(Var, Var)> {
    let first = *parts.first().ok_or(Error::Empty("fuse inputs"))?;
    let bs = tape.shape(first)[0];
    if parts.iter().any(|&p| tape.shape(p).len() != 2 || tape.shape(p)[0] != bs) {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| tape.shape(p).to_vec()).collect();
        return Err(shape_err("fuse", format!("{shapes:?}")));
    }
    let fused = if parts.len() == 1 { first } else { tape.concat(parts, 1)? };
    let expected = store.value(&format!("{FUSE}.weight")).map(|w| w.shape()[0]);
    if expected != Some(tape.shape(fused)[1]) {
        return Err(shape_err("fuse", format!("fused width {} vs classifier {expected:?}", tape.shape(fused)[1])));
    }
    let logits = linear(tape, store, FUSE, fused)?;
    Ok((fused, logits))
}

/// Values of the loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rgb_global: f64,
    pub depth_global: f64,
    pub local: f64,
    pub total: f64,
}

/// Which head a cross-entropy term belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    RgbGlobal,
    DepthGlobal,
    Local,
}

/// Sum of mean cross-entropies, accumulated in the order given. Absent
/// terms are 0 in the bundle.
pub fn total_loss(tape: &mut Tape, terms: &[(LossTerm, Var)], labels: &[usize]) -> Result<(Var, LossBundle)> {
    let mut bundle = LossBundle::default();
    let mut total: Option<Var> = None;
    for &(term, logits) in terms {
        let l = tape.cross_entropy(logits, labels)?;
        let v = tape.value(l).item();
        match term {
            LossTerm::RgbGlobal => bundle.rgb_global = v,
            LossTerm::DepthGlobal => bundle.depth_global = v,
            LossTerm::Local => bundle.local = v,
        }
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or(Error::Empty("loss terms"))?;
    bundle.total = tape.value(total).item();
    Ok((total, bundle))
}

/// Row-wise argmax, first maximum on ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub num_samples: usize,
    /// `None` for classes absent from the labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub absent_classes: Vec<usize>,
}

/// Mean over present classes of per-class recall, plus the confusion matrix.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation labels"));
    }
    if predictions.len() != labels.len() {
        return Err(shape_err("mean_class_accuracy", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for x in [p, l] {
            if x >= num_classes {
                return Err(Error::Label { label: x, num_classes });
            }
        }
        confusion[l][p] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut absent = Vec::new();
    for (c, row) in confusion.iter().enumerate() {
        let count: usize = row.iter().sum();
        if count == 0 {
            absent.push(c);
            per_class.push(None);
        } else {
            per_class.push(Some(row[c] as f64 / count as f64));
        }
    }
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no samples and are left out of the mean");
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        num_classes,
        num_samples: labels.len(),
        per_class_accuracy: per_class,
        mean_class_accuracy: mean,
        overall_accuracy: correct as f64 / labels.len() as f64,
        confusion,
        absent_classes: absent,
    })
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for c in 0..self.num_classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    #[test]
    fn worked_example() {
        // class 0: 2 of 4 right, class 1: 3 of 3 right
        let labels = [0, 0, 0, 0, 1, 1, 1];
        let preds = [0, 0, 1, 1, 1, 1, 1];
        let r = mean_class_accuracy(&preds, &labels, 2).unwrap();
        assert_eq!(r.mean_class_accuracy, 0.75);
        assert_eq!(r.confusion, vec![vec![2, 2], vec![0, 3]]);
        assert!((r.overall_accuracy - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn all_correct_and_absent_classes() {
        let r = mean_class_accuracy(&[0, 2, 2], &[0, 2, 2], 4).unwrap();
        assert_eq!(r.mean_class_accuracy, 1.0);
        assert_eq!(r.absent_classes, vec![1, 3]);
        assert_eq!(r.per_class_accuracy[1], None);
    }

    #[test]
    fn metric_errors() {
        assert!(mean_class_accuracy(&[], &[], 2).is_err());
        assert!(mean_class_accuracy(&[0], &[0, 1], 2).is_err());
        assert!(matches!(mean_class_accuracy(&[0], &[5], 2), Err(Error::Label { .. })));
    }

    #[test]
    fn confusion_csv_layout() {
        let r = mean_class_accuracy(&[1, 0], &[0, 0], 2).unwrap();
        assert_eq!(r.confusion_csv(), "truth\\pred,0,1\n0,1,1\n1,0,0\n");
    }

    #[test]
    fn uniform_heads_give_three_ln_classes() {
        let mut t = Tape::new();
        let z = t.input(Tensor::zeros(&[3, 4]));
        let (total, b) =
            total_loss(&mut t, &[(LossTerm::RgbGlobal, z), (LossTerm::DepthGlobal, z), (LossTerm::Local, z)], &[0, 1, 3])
                .unwrap();
        assert!((t.value(total).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(b.total, b.rgb_global + b.depth_global + b.local);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut t = Tape::new();
        let z = t.input(Tensor::new(vec![2, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap());
        let (_, b) = total_loss(&mut t, &[(LossTerm::RgbGlobal, z), (LossTerm::DepthGlobal, z), (LossTerm::Local, z)], &[0, 1])
            .unwrap();
        assert!(b.total < 1e-12);
    }

    #[test]
    fn zero_map_zero_bias_gives_zero_logits() {
        let mut s = ParameterStore::new();
        register_global_head(&mut s, Modality::Rgb, 5, 5, 4, &mut Prng::new(1));
        let mut t = Tape::new();
        let f = t.input(Tensor::zeros(&[2, 5, 8, 8]));
        let (g, logits) = global_head(&mut t, &s, Modality::Rgb, f).unwrap();
        assert_eq!(t.shape(g), &[2, 5]);
        assert!(t.value(logits).data().iter().all(|&v| v == 0.0));
        let ce = t.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn readout_of_identical_nodes_repeats_vector() {
        let sel = Selection::new(4, 1, 2);
        let mut t = Tape::new();
        let v = [1.5, -2.0, 0.25];
        let h = t.input(Tensor::from_fn(&[1, 8, 3], |i| v[i % 3]));
        let r = readout(&mut t, h, 2, sel, ReadoutMode::Mean).unwrap();
        assert_eq!(t.value(r).data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
        let r = readout(&mut t, h, 2, sel, ReadoutMode::CentralConcat).unwrap();
        assert_eq!(t.shape(r), &[1, 18]);
    }

    #[test]
    fn fused_width_is_sum_of_parts() {
        let mut s = ParameterStore::new();
        register_linear(&mut s, FUSE, 256, 4, &mut Prng::new(2));
        let mut t = Tape::new();
        let g1 = t.input(Tensor::zeros(&[2, 64]));
        let g2 = t.input(Tensor::zeros(&[2, 64]));
        let l = t.input(Tensor::zeros(&[2, 128]));
        let (f, logits) = fuse(&mut t, &s, &[g1, g2, l]).unwrap();
        assert_eq!(t.shape(f), &[2, 256]);
        assert_eq!(t.shape(logits), &[2, 4]);
        assert!(fuse(&mut t, &s, &[g1, g2]).is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}
