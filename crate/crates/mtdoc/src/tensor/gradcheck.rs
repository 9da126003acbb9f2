//! Central finite-difference verification of reverse-mode gradients.

use super::ParamSet;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    /// Sampled coordinates per parameter tensor (capped at its length).
    pub per_param: usize,
    /// Lower bound on the total coordinate count; topped up by extra
    /// sampling if the per-parameter quota falls short.
    pub min_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            rel_tol: 1e-3,
            per_param: 2,
            min_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rel_tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Compares reverse-mode gradients against central differences on sampled
/// coordinates. `loss_fn` must be deterministic in the parameter values;
/// `grad_fn` returns d(loss)/d(param) for every parameter, typically by
/// running the same forward pass with a backward sweep.
pub fn finite_diff_check(
    params: &mut ParamSet,
    loss_fn: &dyn Fn(&ParamSet) -> Result<f64>,
    grad_fn: &dyn Fn(&ParamSet) -> Result<BTreeMap<String, Vec<f64>>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = grad_fn(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let names: Vec<String> = params.params.keys().cloned().collect();
    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in &names {
        let len = params.params[name].values.len();
        let take = cfg.per_param.min(len);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < take {
            seen.insert(rng.gen_range(0..len));
        }
        coords.extend(seen.into_iter().map(|i| (name.clone(), i)));
    }
    while coords.len() < cfg.min_coords {
        let name = &names[rng.gen_range(0..names.len())];
        let len = params.params[name].values.len();
        coords.push((name.clone(), rng.gen_range(0..len)));
    }

    let mut entries = Vec::with_capacity(coords.len());
    for (name, i) in coords {
        let orig = params.params[&name].values[i];
        params.params.get_mut(&name).unwrap().values[i] = orig + cfg.h;
        let f_plus = loss_fn(params)?;
        params.params.get_mut(&name).unwrap().values[i] = orig - cfg.h;
        let f_minus = loss_fn(params)?;
        params.params.get_mut(&name).unwrap().values[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * cfg.h);
        let an = analytic.get(&name).map(|g| g[i]).unwrap_or(0.0);
        entries.push(GradCheckEntry {
            rel_err: rel_err(an, numeric),
            param: name,
            coord: i,
            analytic: an,
            numeric,
        });
    }

    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned();
    let max_rel_err = worst.as_ref().map(|w| w.rel_err).unwrap_or(0.0);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        worst,
        rel_tol: cfg.rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_loss(ps: &ParamSet) -> Result<f64> {
        let t = Tape::new();
        let x = ps.get("x")?;
        let v = t.param("x", &x.values, &x.shape)?;
        let sq = t.mul(&v, &v)?;
        let loss = t.sum_all(&sq);
        Ok(t.scalar_value(&loss))
    }

    fn quadratic_grads(ps: &ParamSet) -> Result<BTreeMap<String, Vec<f64>>> {
        let t = Tape::new();
        let x = ps.get("x")?;
        let v = t.param("x", &x.values, &x.shape)?;
        let sq = t.mul(&v, &v)?;
        let loss = t.sum_all(&sq);
        t.backward(&loss)?;
        Ok(t.param_grads())
    }

    #[test]
    fn quadratic_is_near_exact() {
        let mut ps = ParamSet::default();
        ps.insert("x", vec![0.7, -1.3, 2.1], vec![3]);
        let cfg = GradCheckConfig {
            per_param: 3,
            min_coords: 3,
            ..Default::default()
        };
        let report =
            finite_diff_check(&mut ps, &quadratic_loss, &quadratic_grads, &cfg).unwrap();
        assert!(report.max_rel_err < 1e-6, "max {}", report.max_rel_err);
        assert!(report.passed());
    }

    #[test]
    fn constant_function_both_zero() {
        let mut ps = ParamSet::default();
        ps.insert("x", vec![0.4, 0.9], vec![2]);
        let loss = |_: &ParamSet| Ok(42.0);
        let grads = |ps: &ParamSet| {
            Ok(ps
                .params
                .iter()
                .map(|(n, p)| (n.clone(), vec![0.0; p.values.len()]))
                .collect())
        };
        let cfg = GradCheckConfig {
            per_param: 2,
            min_coords: 2,
            ..Default::default()
        };
        let report = finite_diff_check(&mut ps, &loss, &grads, &cfg).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }
}
