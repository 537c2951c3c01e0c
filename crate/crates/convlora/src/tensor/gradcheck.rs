//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences, one coordinate at a time.
///
/// Returns the maximum relative error over all input coordinates, with an
/// absolute-floor denominator max(|analytic|, |numeric|, 1e-8). The function
/// must be deterministic; a bitwise-different value on re-evaluation is
/// rejected as an invalid oracle.
pub fn finite_diff_check<F: Scalar>(
    f: impl Fn(&Graph<F>, &[Tensor<F>]) -> Result<Tensor<F>>,
    inputs: &[(Vec<F>, Vec<usize>)],
    h: f64,
) -> Result<f64> {
    let eval = |points: &[Vec<F>], rg: bool| -> Result<(F, Vec<Vec<F>>)> {
        let g = Graph::new();
        let leaves: Vec<Tensor<F>> = points
            .iter()
            .zip(inputs)
            .map(|(d, (_, shape))| g.leaf(d.clone(), shape, rg))
            .collect::<Result<_>>()?;
        let y = f(&g, &leaves)?;
        if y.numel() != 1 {
            return Err(Error::Argument(
                "finite_diff_check requires a scalar-valued function".into(),
            ));
        }
        let grads = if rg {
            let gr = g.backward(&y)?;
            leaves
                .iter()
                .map(|l| {
                    gr.wrt(l)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![F::zero(); l.numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((y.item(), grads))
    };

    let base: Vec<Vec<F>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let (y0, analytic) = eval(&base, true)?;
    let (y1, _) = eval(&base, false)?;
    if y0 != y1 {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {y0} vs {y1}"
        )));
    }

    let hf = F::c(h);
    let mut max_rel = 0.0f64;
    for (ti, (data, _)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            let mut plus = base.clone();
            plus[ti][ci] += hf;
            let mut minus = base.clone();
            minus[ti][ci] -= hf;
            let (yp, _) = eval(&plus, false)?;
            let (ym, _) = eval(&minus, false)?;
            let numeric = (yp - ym).to_f64_lossy() / (2.0 * h);
            let a = analytic[ti][ci].to_f64_lossy();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
