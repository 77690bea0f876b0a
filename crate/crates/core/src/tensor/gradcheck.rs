use super::{ParamStore, Tape, TensorError, Var};

/// Worst-case agreement between analytic and central-difference gradients
/// for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose perturbation flipped a relu input across zero.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }
}

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of `forward` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every trainable parameter.
///
/// An entry is excluded, not failed, when nudging it by ±ε changes the sign
/// pattern of any relu input: the loss has a kink inside the stencil.
pub fn grad_check<F, E>(store: &mut ParamStore, forward: F, eps: f64, tolerance: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<TensorError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.backward(loss, store)?;
    let base_pattern = tape.relu_pattern();

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();

    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for k in 0..analytic.len() {
            let original = store.get(id).value.data()[k];
            let mut eval = |delta: f64| -> Result<(f64, bool), E> {
                store.get_mut(id).value.data_mut()[k] = original + delta;
                let mut t = Tape::new();
                let out = forward(store, &mut t);
                store.get_mut(id).value.data_mut()[k] = original;
                let v = out?;
                let f = t.value(v).item().ok_or(TensorError::NotScalar(t.value(v).shape()))?;
                Ok((f, t.relu_pattern() == base_pattern))
            };
            let (plus, same_plus) = eval(eps)?;
            let (minus, same_minus) = eval(-eps)?;
            if !(same_plus && same_minus) {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            check.max_rel_err = check.max_rel_err.max(relative_error(analytic.data()[k], numeric));
            check.checked += 1;
        }
        params.push(check);
    }
    store.zero_grad();
    Ok(GradCheckReport { tolerance, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_store(seed: u64) -> (ParamStore, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("w", Matrix::randn(3, 4, 0.5, &mut rng), true).unwrap();
        store.add("b", Matrix::randn(1, 3, 0.5, &mut rng), true).unwrap();
        let x = Matrix::randn(5, 4, 1.0, &mut rng);
        let y = Matrix::randn(5, 3, 1.0, &mut rng);
        (store, x, y)
    }

    #[test]
    fn linear_layer_matches_to_1e6() {
        let (mut store, x, y) = linear_store(11);
        let report = grad_check(
            &mut store,
            |s, t| {
                let w = t.param(s, s.id("w").unwrap());
                let b = t.param(s, s.id("b").unwrap());
                let xv = t.constant(x.clone());
                let yv = t.constant(y.clone());
                let wt = t.transpose(w)?;
                let h = t.matmul(xv, wt)?;
                let h = t.add(h, b)?;
                t.mse(h, yv)
            },
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.excluded(), 0);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut store = ParamStore::new();
        store
            .add("x", Matrix::from_vec(1, 4, vec![0.7, -0.3, 1.2, -2.0]).unwrap(), true)
            .unwrap();
        let target = Matrix::row_vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let report = grad_check(
            &mut store,
            |s, t| {
                let x = t.param(s, s.id("x").unwrap());
                let r = t.relu(x)?;
                let y = t.constant(target.clone());
                t.mse(r, y)
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.excluded(), 0);
    }

    #[test]
    fn relu_at_exact_zero_is_excluded() {
        let mut store = ParamStore::new();
        store
            .add("x", Matrix::from_vec(1, 3, vec![0.0, 0.5, -0.5]).unwrap(), true)
            .unwrap();
        let target = Matrix::row_vector(vec![1.0, 1.0, 1.0]).unwrap();
        let report = grad_check(
            &mut store,
            |s, t| {
                let x = t.param(s, s.id("x").unwrap());
                let r = t.relu(x)?;
                let y = t.constant(target.clone());
                t.mse(r, y)
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.excluded(), 1);
        assert_eq!(report.params[0].checked, 2);
        assert!(report.passed());
    }
}
