use super::{NumericsError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Relative error with a small floor on the denominator, so coordinates
/// whose true gradient is ~0 are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks `f` at a single point. See [`grad_check_inputs`].
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon, tolerance, 1)
}

/// Central-difference check of a scalar function of several inputs.
/// Every `stride`-th coordinate of every input is perturbed.
///
/// Fails with a precondition error when the function routes an input
/// through a non-differentiable primitive (argmax and friends).
pub fn grad_check_inputs<F>(
    f: F,
    points: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    stride: usize,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.has_nondifferentiable_path() {
        return Err(NumericsError::Precondition(
            "function is not differentiable with respect to its inputs",
        ));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64, NumericsError> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance,
        checked: 0,
        worst: (0, 0),
        passed: true,
    };
    for input in 0..points.len() {
        for coord in (0..points[input].len()).step_by(stride.max(1)) {
            let orig = points[input].data()[coord];
            work[input].data_mut()[coord] = orig + epsilon;
            let plus = eval(&work)?;
            work[input].data_mut()[coord] = orig - epsilon;
            let minus = eval(&work)?;
            work[input].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[input][coord], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (input, coord);
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
