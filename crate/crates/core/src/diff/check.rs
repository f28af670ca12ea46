//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::par;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a| + |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Forward and backward one-sided differences at the worst coordinate.
    pub one_sided: (f64, f64),
}

impl ParamCheck {
    /// True when the worst coordinate's central difference straddles a kink:
    /// one one-sided difference agrees with the analytic gradient and the
    /// other does not.
    pub fn straddles_kink(&self, tol: f64) -> bool {
        let (f, b) = self.one_sided;
        let (ef, eb) = (relative_error(self.analytic, f), relative_error(self.analytic, b));
        ef.min(eb) < tol && ef.max(eb) >= tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the tape gradient of `loss` against central differences for every
/// scalar of every parameter in `store`.
pub fn check_params<F>(store: &ParameterStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var> + Sync,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &analytic)?;
    let base = tape.value(l).item();
    tape.backward_into(l, &mut analytic)?;

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.value(v).item())
    };
    let numeric = par::map_slice(&coords, |(name, i)| -> Result<(f64, f64)> {
        let mut s = store.clone();
        let base = s.value(name).expect("coordinate from store").data()[*i];
        s.value_mut(name).unwrap().data_mut()[*i] = base + h;
        let up = eval(&s)?;
        s.value_mut(name).unwrap().data_mut()[*i] = base - h;
        let down = eval(&s)?;
        Ok((up, down))
    });

    let mut report = GradCheckReport::default();
    let mut it = coords.iter().zip(numeric);
    for (name, p) in analytic.iter() {
        let mut entry = ParamCheck {
            name: name.to_string(),
            count: p.grad.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            one_sided: (0.0, 0.0),
        };
        for (i, a) in p.grad.data().iter().enumerate() {
            let (_, n) = it.next().expect("one numeric value per coordinate");
            let (up, down) = n?;
            let n = (up - down) / (2.0 * h);
            let e = relative_error(*a, n);
            if e > entry.max_rel_err || i == 0 {
                entry.max_rel_err = e.max(entry.max_rel_err);
                entry.worst_index = i;
                entry.analytic = *a;
                entry.numeric = n;
                entry.one_sided = ((up - base) / h, (base - down) / h);
            }
        }
        report.params.push(entry);
    }
    Ok(report)
}

/// Max relative error per input tensor for a function of free leaves.
pub fn check_leaves<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };
    let mut errs = Vec::with_capacity(inputs.len());
    for (j, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[j].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let mut worst: f64 = 0.0;
        for i in 0..inputs[j].len() {
            let mut xs = inputs.to_vec();
            let base = xs[j].data()[i];
            xs[j].data_mut()[i] = base + h;
            let up = eval(&xs)?;
            xs[j].data_mut()[i] = base - h;
            let down = eval(&xs)?;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * h)));
        }
        errs.push(worst);
    }
    Ok(errs)
}
