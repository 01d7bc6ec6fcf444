//! Central finite-difference gradient checking.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Gradients whose magnitude is below this are compared on an absolute
/// scale, since their finite-difference estimate is dominated by
/// round-off in `f`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    /// False when two evaluations at the same point disagreed.
    pub deterministic: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.deterministic && self.max_rel_error < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::Usage(
            "grad_check needs a scalar function".into(),
        ));
    }
    Ok(g.value(out).item())
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Input(format!(
            "grad_check step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf requires grad"))
        .collect();

    let deterministic = eval(&f, params)?.to_bits() == base.to_bits();

    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grad.data()[e], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, e);
            }
        }
        checks.push(ParamCheck {
            index: pi,
            max_rel_error: worst.0,
            worst_element: worst.1,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tol,
        deterministic,
    })
}
