//! Central finite-difference checks against the tape's analytic gradients.

use crate::graph::{Graph, Mat, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Floor on the relative-error denominator, so entries whose true
    /// gradient is zero are compared absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.entries_checked += other.entries_checked;
    }
}

fn eval(inputs: &[Mat], f: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
    let out = f(&mut g, &vars);
    g.scalar_value(out)
}

/// Compare the analytic gradient of the scalar built by `f` with central
/// differences, for every element of every input.
pub fn check_gradients(
    inputs: &[Mat],
    f: &impl Fn(&mut Graph, &[Var]) -> Var,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let analytic: Vec<Mat> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Mat> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let flat: Vec<f64> = input.iter().copied().collect();
        for (e, &x0) in flat.iter().enumerate() {
            let (r, c) = (e / input.ncols(), e % input.ncols());
            work[k][[r, c]] = x0 + opts.step;
            let plus = eval(&work, f);
            work[k][[r, c]] = x0 - opts.step;
            let minus = eval(&work, f);
            work[k][[r, c]] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[k][[r, c]];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.denom_floor);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, e));
            }
        }
    }
    report
}
