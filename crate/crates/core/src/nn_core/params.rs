use std::hash::Hasher;

use super::NnError;

/// One named weight or bias array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameter arrays. Two sets built from the same
/// [`NetworkSpec`](super::NetworkSpec) are index-aligned, so they can be
/// combined element-wise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    arrays: Vec<ParamArray>,
}

impl ParameterSet {
    pub fn new(arrays: Vec<ParamArray>) -> Result<Self, NnError> {
        for a in &arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(NnError::Shape(format!(
                    "parameter '{}' shape {:?} needs {} values, got {}",
                    a.name,
                    a.shape,
                    n,
                    a.data.len()
                )));
            }
        }
        Ok(Self { arrays })
    }

    /// Union of several sets, in order (θ_U = θ_T ∪ θ_O style).
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a ParameterSet>) -> Self {
        Self {
            arrays: sets
                .into_iter()
                .flat_map(|s| s.arrays.iter().cloned())
                .collect(),
        }
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ParamArray] {
        &mut self.arrays
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: vec![0.0; a.data.len()],
                })
                .collect(),
        }
    }

    pub fn check_aligned(&self, other: &ParameterSet) -> Result<(), NnError> {
        if self.arrays.len() != other.arrays.len() {
            return Err(NnError::Shape(format!(
                "parameter sets have {} vs {} arrays",
                self.arrays.len(),
                other.arrays.len()
            )));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.shape != b.shape {
                return Err(NnError::Shape(format!(
                    "parameter '{}' shape {:?} does not match '{}' shape {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrays.iter().flat_map(|a| a.data.iter().copied())
    }

    pub fn get_flat(&self, mut idx: usize) -> Option<f64> {
        for a in &self.arrays {
            if idx < a.data.len() {
                return Some(a.data[idx]);
            }
            idx -= a.data.len();
        }
        None
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) -> bool {
        for a in &mut self.arrays {
            if idx < a.data.len() {
                a.data[idx] = value;
                return true;
            }
            idx -= a.data.len();
        }
        false
    }

    /// `a * x + b * y`, element-wise.
    pub fn linear_combination(
        a: f64,
        x: &ParameterSet,
        b: f64,
        y: &ParameterSet,
    ) -> Result<ParameterSet, NnError> {
        x.check_aligned(y)?;
        let arrays = x
            .arrays
            .iter()
            .zip(&y.arrays)
            .map(|(xa, ya)| ParamArray {
                name: xa.name.clone(),
                shape: xa.shape.clone(),
                data: xa
                    .data
                    .iter()
                    .zip(&ya.data)
                    .map(|(xv, yv)| a * xv + b * yv)
                    .collect(),
            })
            .collect();
        Ok(ParameterSet { arrays })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParameterSet) -> Result<(), NnError> {
        self.check_aligned(other)?;
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_flat().all(f64::is_finite)
    }

    /// Hash of the exact bit patterns; equal sets give equal fingerprints.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for a in &self.arrays {
            h.write(a.name.as_bytes());
            for &d in &a.shape {
                h.write_usize(d);
            }
            for v in &a.data {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// Plain SGD update `θ - lr * g`.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    lr: f64,
) -> Result<ParameterSet, NnError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NnError::Numeric(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    params.check_aligned(grads)?;
    if let Some(a) = grads.arrays.iter().find(|a| a.data.iter().any(|v| v.is_nan())) {
        return Err(NnError::Numeric(format!("NaN in gradient of '{}'", a.name)));
    }
    ParameterSet::linear_combination(1.0, params, -lr, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParameterSet {
        ParameterSet::new(vec![ParamArray {
            name: "w".into(),
            shape: vec![1],
            data: vec![v],
        }])
        .unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let p = single(0.5);
        assert_eq!(sgd_step(&p, &single(3.0), 0.0).unwrap(), p);
    }

    #[test]
    fn single_step_arithmetic() {
        let p = sgd_step(&single(0.5), &single(1.0), 0.01).unwrap();
        assert!((p.get_flat(0).unwrap() - 0.49).abs() < 1e-15);
    }

    #[test]
    fn two_steps_compose_linearly() {
        let g = single(0.7);
        let two = sgd_step(&sgd_step(&single(0.3), &g, 0.1).unwrap(), &g, 0.2).unwrap();
        let one = sgd_step(&single(0.3), &g, 0.3).unwrap();
        assert!((two.get_flat(0).unwrap() - one.get_flat(0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let err = sgd_step(&single(0.5), &single(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, NnError::Numeric(_)));
    }

    #[test]
    fn misaligned_sets_are_rejected() {
        let two = ParameterSet::new(vec![ParamArray {
            name: "w".into(),
            shape: vec![2],
            data: vec![0.0, 0.0],
        }])
        .unwrap();
        assert!(matches!(
            sgd_step(&single(0.5), &two, 0.1),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn flat_indexing_spans_arrays() {
        let mut p = ParameterSet::new(vec![
            ParamArray { name: "a".into(), shape: vec![2], data: vec![1.0, 2.0] },
            ParamArray { name: "b".into(), shape: vec![1], data: vec![3.0] },
        ])
        .unwrap();
        assert_eq!(p.get_flat(2), Some(3.0));
        assert!(p.set_flat(1, 9.0));
        assert_eq!(p.iter_flat().collect::<Vec<_>>(), vec![1.0, 9.0, 3.0]);
        assert_eq!(p.get_flat(3), None);
    }
}
