use super::{AutodiffError, Graph, NodeId, Real, Tensor};

/// Max relative error between reverse-mode and central-difference
/// gradients of the scalar `f` at `x`.
///
/// Per coordinate: `|g_ad - g_fd| / max(1e-6, |g_ad| + |g_fd|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64, AutodiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId, AutodiffError>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several differentiable inputs at once.
pub fn grad_check_many<T, F>(f: F, xs: &[Tensor<T>], h: f64) -> Result<f64, AutodiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    grad_check_report(f, xs, h).map(|r| r.max_relative)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative: f64,
    pub max_absolute: f64,
    pub coordinates: usize,
}

/// Relative and absolute worst-case disagreement over every coordinate.
pub fn grad_check_report<T, F>(f: F, xs: &[Tensor<T>], h: f64) -> Result<GradCheckReport, AutodiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.data()[0].as_f64())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| match g.grad(id) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.len()],
        })
        .collect();

    let mut inputs = xs.to_vec();
    let mut report = GradCheckReport::default();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = T::from_f64(orig.as_f64() + h);
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = T::from_f64(orig.as_f64() - h);
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[t][i];
            let abs = (ad - fd).abs();
            report.max_absolute = report.max_absolute.max(abs);
            report.max_relative = report.max_relative.max(abs / (ad.abs() + fd.abs()).max(1e-6));
            report.coordinates += 1;
        }
    }
    Ok(report)
}
