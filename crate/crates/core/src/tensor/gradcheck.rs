use super::{DType, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function with central
/// differences. Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        eps,
        None,
    )
}

/// [`grad_check`] over several inputs at once. With `max_coords`, at most that
/// many evenly spaced coordinates of each input are perturbed.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if points.iter().any(|p| p.dtype() != DType::Float64) {
        return Err(Error::invalid("gradient checks require float64 inputs"));
    }
    let eval = |pts: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts
            .iter()
            .map(|p| g.leaf(&p.clone().with_grad(track)))
            .collect();
        let out = f(&mut g, &vars)?;
        let value = g.scalar_value(out);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("function value {value}")));
        }
        if !track {
            return Ok((value, None));
        }
        let grads = g.backward(out)?;
        let per_input = vars
            .iter()
            .zip(pts)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect();
        Ok((value, Some(per_input)))
    };

    let (_, analytic) = eval(points, true)?;
    let analytic = analytic.expect("tracked evaluation");
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (t, point) in points.iter().enumerate() {
        for i in coordinates(point.len(), max_coords) {
            let x = point.data()[i];
            work[t].update(|j, v| if j == i { x + eps } else { v });
            let (plus, _) = eval(&work, false)?;
            work[t].update(|j, v| if j == i { x - eps } else { v });
            let (minus, _) = eval(&work, false)?;
            work[t].update(|j, v| if j == i { x } else { v });
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[t][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn coordinates(len: usize, max_coords: Option<usize>) -> Vec<usize> {
    match max_coords {
        Some(k) if k < len && k > 0 => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}
