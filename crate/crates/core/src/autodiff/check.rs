use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(parameter, flat index, analytic, central difference)` at the worst coordinate
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` against central differences of `f` with step `h`.
///
/// Checks every coordinate when there are at most `max_coords` of them and a
/// seeded uniform sample of `max_coords` otherwise. The error at a coordinate
/// is `|a - d| / (|a| + |d| + 1e-12)`.
pub fn finite_difference_check(
    params: &ParamStore,
    analytic: &ParamStore,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    let mut flat = Vec::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            flat.push((name.to_string(), i));
        }
    }
    let picked: Vec<usize> = if flat.len() <= max_coords {
        (0..flat.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, flat.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        coordinates: picked.len(),
        worst: None,
    };
    for k in picked {
        let (name, i) = &flat[k];
        let original = params.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = original + h;
        let up = f(&work)?;
        work.get_mut(name)?.data_mut()[*i] = original - h;
        let down = f(&work)?;
        work.get_mut(name)?.data_mut()[*i] = original;
        let d = (up - down) / (2.0 * h);
        let a = analytic.get(name)?.data()[*i];
        let err = (a - d).abs() / (a.abs() + d.abs() + 1e-12);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), *i, a, d));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn half_squared_norm_has_gradient_p() {
        let s = store();
        let f = |p: &ParamStore| Ok(0.5 * p.get("p")?.data().iter().map(|v| v * v).sum::<f64>());
        let r = finite_difference_check(&s, &s, f, 1e-5, 200, 0).unwrap();
        assert_eq!(r.coordinates, 3);
        assert!(r.max_rel_error <= 1e-8);
    }

    #[test]
    fn constant_function_reports_zero() {
        let s = store();
        let r = finite_difference_check(&s, &s.zeros_like(), |_| Ok(4.0), 1e-5, 200, 0).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let s = store();
        let f = |p: &ParamStore| Ok(p.get("p")?.sum());
        let r = finite_difference_check(&s, &s, f, 1e-5, 200, 0).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
