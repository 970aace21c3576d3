//! Central-difference gradient checking, always in f64.

use ndarray::ArrayD;

/// Numerical gradient of `f` at `params` via central differences,
/// one coordinate at a time.
pub fn fd_grad<F>(mut f: F, params: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = ArrayD::<f64>::zeros(params[pi].raw_dim());
        for k in 0..params[pi].len() {
            let orig = work[pi].as_slice().unwrap()[k];
            work[pi].as_slice_mut().unwrap()[k] = orig + eps;
            let up = f(&work);
            work[pi].as_slice_mut().unwrap()[k] = orig - eps;
            let down = f(&work);
            work[pi].as_slice_mut().unwrap()[k] = orig;
            g.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative disagreement between two gradient sets, with the
/// denominator floored so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient set length mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&ae, &ne) in a.iter().zip(n.iter()) {
            let denom = ae.abs().max(ne.abs()).max(1e-6);
            let err = (ae - ne).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
