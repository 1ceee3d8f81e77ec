use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates whose gradients are both smaller than this are compared on
/// an absolute scale, so round-off in near-zero gradients does not dominate.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.scalar(out)?;
    if !value.is_finite() {
        return Err(Error::Numeric {
            op: "grad_check",
            detail: format!("objective evaluated to {value}"),
        });
    }
    Ok((g, out, vars))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("grad_check step {h} outside [1e-7, 1e-3]")));
    }
    let (graph, out, leaves) = evaluate(&f, params, true)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            grads
                .get(leaves[i])
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(graph);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for pi in 0..params.len() {
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let (gp, op, _) = evaluate(&f, &work, false)?;
            let fp = gp.scalar(op)?;
            work[pi].data_mut()[c] = orig - h;
            let (gm, om, _) = evaluate(&f, &work, false)?;
            let fm = gm.scalar(om)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            coordinates += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((pi, c));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        coordinates,
        tol,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0], [0.7, 0.01, -0.4]]).unwrap();
        let report = grad_check(
            |g, p| {
                let s = g.sum_squares(p[0]);
                Ok(g.scale(s, 0.5))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(|g, p| Ok(g.sum_all(p[0])), &[x], 0.1, 1e-4).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let x = Tensor::scalar(1000.0);
        let err = grad_check(|g, p| Ok(g.exp(p[0])), &[x], 1e-5, 1e-4).unwrap_err();
        assert_eq!(err.kind(), "numeric");
    }
}
