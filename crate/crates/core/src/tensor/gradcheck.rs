use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor: below this gradient magnitude the error is measured
/// in absolute terms.
const REL_FLOOR: f64 = 1e-3;

/// Checks `d f / d params` from the tape against
/// `(f(p + eps) - f(p - eps)) / 2 eps`, element by element.
///
/// `f` receives a fresh graph and one leaf per parameter (indexed by
/// `ParamId::index`) and must return a scalar.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check: eps must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g: Graph = Graph::new();
        let vars = g.params(store);
        let out = f(&mut g, &vars)?;
        g.check_finite()?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: objective is not finite".into()));
        }
        Ok(v)
    };

    let mut g: Graph = Graph::new();
    let vars = g.params(store);
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(store.iter())
        .map(|(&v, (_, p))| match g.grad(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.value.numel()],
        })
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for (k, &a) in analytic[pi].iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_polynomial() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let r = grad_check(&mut store, 1e-5, |g, p| {
            let y = g.mul(p[0], p[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.0]).unwrap()).unwrap();
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let s = g.softmax(p[0], 0).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert!(g.grad(p[0]).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        let r = grad_check(&mut store, 1e-5, |g, p| {
            let s = g.softmax(p[0], 0)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_error * REL_FLOOR < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::zeros(&[1])).unwrap();
        assert!(grad_check(&mut store, 0.0, |g, p| Ok(g.sum(p[0]))).is_err());
    }
}
