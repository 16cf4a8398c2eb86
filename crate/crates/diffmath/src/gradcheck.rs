//! Central finite differences against the tape.

use crate::{Graph, Result, Tensor, Var};

/// Worst relative error between analytic and numeric gradients with
/// `err = |a - n| / max(|a| + |n|, floor)`.
#[derive(Clone, Copy, Debug)]
pub struct Report {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// `f` rebuilds the scalar loss from leaf variables on a fresh graph.
/// Every input gets a step of `h` in each coordinate.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|x| g.variable(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|x| g.variable(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = Report {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let abs = (analytic[j] - numeric).abs();
            let rel = abs / (analytic[j].abs() + numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}
