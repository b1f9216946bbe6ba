//! One-at-a-time screening and variance-based (Sobol) indices.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::BoundaryConditions;
use crate::linalg::Matrix;
use crate::rng::derive_seed;
use crate::sampler::{uniform_grid, unit_lhs, SamplerError};
use crate::scalar::{pairwise_sum, Real};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("screening needs at least 2 grid points, got {0}")]
    TooFewPoints(usize),
    #[error("threshold must be > 0, got {0}")]
    InvalidThreshold(f64),
    #[error("n_base must be a power of two >= 64, got {0}")]
    InvalidBaseSize(usize),
    #[error("{names} names for {ranges} ranges")]
    NameCount { names: usize, ranges: usize },
    #[error("runner returned {got} outputs, expected {expected}")]
    OutputCount { expected: usize, got: usize },
    #[error("runner failed while varying parameter {index}: {message}")]
    Runner { index: usize, message: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningResult {
    pub names: Vec<String>,
    /// `d x m` population variance of each output along each sweep.
    pub variance: Matrix<f64>,
    pub threshold: f64,
    pub selected: Vec<String>,
}

impl ScreeningResult {
    /// CSV `parameter,output,variance,selected`.
    pub fn write_csv<W: Write>(&self, outputs: &[&str], out: W) -> Result<(), SensitivityError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "output", "variance", "selected"])?;
        for (i, name) in self.names.iter().enumerate() {
            let sel = self.selected.contains(name);
            for (j, o) in outputs.iter().enumerate() {
                w.write_record([name.as_str(), o, &self.variance[(i, j)].to_string(), &sel.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SobolResult<T> {
    /// `d x m`.
    pub first_order: Matrix<T>,
    /// `d x m`.
    pub total: Matrix<T>,
    pub n_base: usize,
    pub seed: u64,
}

impl<T: Real> SobolResult<T> {
    /// CSV `parameter,output,first_order,total`.
    pub fn write_csv<W: Write>(&self, names: &[&str], outputs: &[&str], out: W) -> Result<(), SensitivityError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "output", "first_order", "total"])?;
        for (i, name) in names.iter().enumerate() {
            for (j, o) in outputs.iter().enumerate() {
                w.write_record([
                    *name,
                    o,
                    &self.first_order[(i, j)].to_string(),
                    &self.total[(i, j)].to_string(),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sweeps each parameter over an `n`-point grid with the others held at
/// 1.0 and keeps those whose output variance exceeds `threshold` at any
/// output.
pub fn oat_screen<F, E>(
    runner: F,
    x_fixed: &BoundaryConditions,
    names: &[&str],
    ranges: &[(f64, f64)],
    n: usize,
    threshold: f64,
) -> Result<ScreeningResult, SensitivityError>
where
    F: Fn(&BoundaryConditions, &[f64]) -> Result<Vec<f64>, E> + Sync,
    E: std::fmt::Display,
{
    if n < 2 {
        return Err(SensitivityError::TooFewPoints(n));
    }
    if !(threshold > 0.0) {
        return Err(SensitivityError::InvalidThreshold(threshold));
    }
    if names.len() != ranges.len() {
        return Err(SensitivityError::NameCount { names: names.len(), ranges: ranges.len() });
    }
    let d = ranges.len();
    let mut per_param: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut m = None;
    for (i, &range) in ranges.iter().enumerate() {
        let grid = uniform_grid(n, range)?;
        let runs: Vec<Result<Vec<f64>, String>> = grid
            .par_iter()
            .map(|&v| {
                let mut theta = vec![1.0; d];
                theta[i] = v;
                runner(x_fixed, &theta).map_err(|e| e.to_string())
            })
            .collect();
        let mut outputs = Vec::with_capacity(n);
        for r in runs {
            let y = r.map_err(|message| SensitivityError::Runner { index: i, message })?;
            let expected = *m.get_or_insert(y.len());
            if y.len() != expected {
                return Err(SensitivityError::OutputCount { expected, got: y.len() });
            }
            outputs.push(y);
        }
        let m = m.unwrap_or(0);
        per_param.push((0..m).map(|j| population_variance(&outputs.iter().map(|y| y[j]).collect::<Vec<_>>())).collect());
    }
    let m = m.unwrap_or(0);
    let variance = Matrix::from_vec(d, m, per_param.concat()).expect("shape");
    let selected = names
        .iter()
        .enumerate()
        .filter(|&(i, _)| variance.row(i).iter().any(|&v| v > threshold))
        .map(|(_, n)| n.to_string())
        .collect();
    Ok(ScreeningResult { names: names.iter().map(|s| s.to_string()).collect(), variance, threshold, selected })
}

fn population_variance(xs: &[f64]) -> f64 {
    // shifted by the first value so a constant sweep is exactly 0
    let shift = xs[0];
    let centered: Vec<f64> = xs.iter().map(|x| x - shift).collect();
    let mean = pairwise_sum(&centered) / xs.len() as f64;
    let dev: Vec<f64> = centered.iter().map(|x| (x - mean) * (x - mean)).collect();
    pairwise_sum(&dev) / xs.len() as f64
}

/// First-order (Saltelli 2010) and total (Jansen) indices over independent
/// uniform inputs. Costs `n_base * (d + 2)` runner calls.
pub fn sobol_indices<T, F, E>(runner: F, ranges: &[(T, T)], n_base: usize, seed: u64) -> Result<SobolResult<T>, SensitivityError>
where
    T: Real,
    F: Fn(&[T]) -> Result<Vec<T>, E> + Sync,
    E: std::fmt::Display,
{
    if n_base < 64 || !n_base.is_power_of_two() {
        return Err(SensitivityError::InvalidBaseSize(n_base));
    }
    let d = ranges.len();
    if d == 0 {
        return Err(SamplerError::Empty.into());
    }
    for (dim, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(SamplerError::InvalidRange { dim, lo: lo.as_f64(), hi: hi.as_f64() }.into());
        }
    }
    let to_box = |unit: Vec<f64>| -> Vec<T> {
        unit.iter().enumerate().map(|(k, &u)| {
            let (lo, hi) = ranges[k % d];
            lo + (hi - lo) * T::lit(u)
        }).collect()
    };
    let a = to_box(unit_lhs(n_base, d, derive_seed(seed, 0)));
    let b = to_box(unit_lhs(n_base, d, derive_seed(seed, 1)));

    // block 0 = A, block 1 = B, block 2 + i = A with column i from B
    let n_blocks = d + 2;
    let evals: Vec<Result<Vec<T>, String>> = (0..n_blocks * n_base)
        .into_par_iter()
        .map(|k| {
            let (block, r) = (k / n_base, k % n_base);
            let row = match block {
                0 => a[r * d..(r + 1) * d].to_vec(),
                1 => b[r * d..(r + 1) * d].to_vec(),
                _ => {
                    let mut row = a[r * d..(r + 1) * d].to_vec();
                    row[block - 2] = b[r * d + block - 2];
                    row
                }
            };
            runner(&row).map_err(|e| e.to_string())
        })
        .collect();
    let mut ys: Vec<Vec<T>> = Vec::with_capacity(evals.len());
    let mut m = None;
    for (k, r) in evals.into_iter().enumerate() {
        let block = k / n_base;
        let y = r.map_err(|message| SensitivityError::Runner { index: block.saturating_sub(2), message })?;
        let expected = *m.get_or_insert(y.len());
        if y.len() != expected {
            return Err(SensitivityError::OutputCount { expected, got: y.len() });
        }
        ys.push(y);
    }
    let m = m.unwrap_or(0);
    let nf = T::from_usize_lossy(n_base);
    let half = T::lit(0.5);
    let mut first = Matrix::zeros(d, m);
    let mut total = Matrix::zeros(d, m);
    for j in 0..m {
        let col = |block: usize| -> Vec<T> { (0..n_base).map(|r| ys[block * n_base + r][j]).collect() };
        let fa = col(0);
        let fb = col(1);
        let both: Vec<T> = fa.iter().chain(&fb).copied().collect();
        let mean = pairwise_sum(&both) / T::from_usize_lossy(both.len());
        let dev: Vec<T> = both.iter().map(|&v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&dev) / T::from_usize_lossy(both.len());
        if !(var > T::epsilon() * (T::one() + mean * mean)) {
            log::warn!("output {j}: zero output variance, indices set to 0");
            continue;
        }
        for i in 0..d {
            let fab = col(2 + i);
            let s: Vec<T> = (0..n_base).map(|r| fb[r] * (fab[r] - fa[r])).collect();
            let t: Vec<T> = (0..n_base).map(|r| (fa[r] - fab[r]) * (fa[r] - fab[r])).collect();
            first[(i, j)] = pairwise_sum(&s) / nf / var;
            total[(i, j)] = half * pairwise_sum(&t) / nf / var;
        }
    }
    Ok(SobolResult { first_order: first, total, n_base, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ParameterVector, PARAMETER_NAMES};
    use crate::synthbench::code_model;
    use std::convert::Infallible;
    use std::f64::consts::PI;

    fn ishigami(t: &[f64]) -> Result<Vec<f64>, Infallible> {
        let (a, b) = (7.0, 0.1);
        Ok(vec![t[0].sin() + a * t[1].sin().powi(2) + b * t[2].powi(4) * t[0].sin()])
    }

    /// Closed-form Ishigami indices.
    fn ishigami_oracle() -> ([f64; 3], [f64; 3]) {
        let (a, b) = (7.0f64, 0.1f64);
        let v1 = 0.5 * (1.0 + b * PI.powi(4) / 5.0).powi(2);
        let v2 = a * a / 8.0;
        let v13 = b * b * PI.powi(8) * (1.0 / 18.0 - 1.0 / 50.0);
        let v = v1 + v2 + v13;
        ([v1 / v, v2 / v, 0.0], [(v1 + v13) / v, v2 / v, v13 / v])
    }

    #[test]
    fn ishigami_indices() {
        let (s, t) = ishigami_oracle();
        assert!((s[0] - 0.3139).abs() < 1e-4 && (s[1] - 0.4424).abs() < 1e-4 && (t[2] - 0.2437).abs() < 1e-4);
        let r = sobol_indices(ishigami, &[(-PI, PI); 3], 1 << 14, 17).unwrap();
        for i in 0..3 {
            assert!((r.first_order[(i, 0)] - s[i]).abs() < 0.05, "S{i} = {}", r.first_order[(i, 0)]);
            assert!((r.total[(i, 0)] - t[i]).abs() < 0.05, "T{i} = {}", r.total[(i, 0)]);
        }
    }

    #[test]
    fn linear_function_indices() {
        let f = |t: &[f64]| Ok::<_, Infallible>(vec![2.0 * t[0] + t[1]]);
        let r = sobol_indices(f, &[(0.0, 1.0); 2], 1 << 13, 3).unwrap();
        assert!((r.first_order[(0, 0)] - 0.8).abs() < 0.03);
        assert!((r.first_order[(1, 0)] - 0.2).abs() < 0.03);
        for i in 0..2 {
            assert!((r.first_order[(i, 0)] - r.total[(i, 0)]).abs() < 0.05);
        }
        let sum = r.first_order[(0, 0)] + r.first_order[(1, 0)];
        assert!((sum - 1.0).abs() < 0.05);
    }

    #[test]
    fn constant_function_gives_zero() {
        let f = |_: &[f64]| Ok::<_, Infallible>(vec![3.0, -1.0]);
        let r = sobol_indices(f, &[(0.0, 1.0); 3], 64, 1).unwrap();
        assert!(r.first_order.as_slice().iter().chain(r.total.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn sobol_is_reproducible_and_bounded() {
        let a = sobol_indices(ishigami, &[(-PI, PI); 3], 256, 9).unwrap();
        let b = sobol_indices(ishigami, &[(-PI, PI); 3], 256, 9).unwrap();
        assert_eq!(a, b);
        let big = sobol_indices(ishigami, &[(-PI, PI); 3], 1 << 12, 9).unwrap();
        for i in 0..3 {
            let (s, t) = (big.first_order[(i, 0)], big.total[(i, 0)]);
            assert!(t >= s - 0.05);
            assert!((-0.05..=1.05).contains(&s) && (-0.05..=1.05).contains(&t));
        }
    }

    #[test]
    fn sobol_in_f32() {
        let f = |t: &[f32]| Ok::<_, Infallible>(vec![2.0 * t[0] + t[1]]);
        let r = sobol_indices(f, &[(0.0f32, 1.0); 2], 1 << 12, 3).unwrap();
        assert!((r.first_order[(0, 0)] - 0.8).abs() < 0.05);
    }

    #[test]
    fn base_size_checked() {
        assert!(matches!(sobol_indices(ishigami, &[(0.0, 1.0); 3], 100, 1), Err(SensitivityError::InvalidBaseSize(100))));
        assert!(matches!(sobol_indices(ishigami, &[(0.0, 1.0); 3], 32, 1), Err(SensitivityError::InvalidBaseSize(32))));
    }

    #[test]
    fn runner_errors_carry_parameter_index() {
        let f = |t: &[f64]| if t[1] > 4.9 { Err("boom") } else { Ok(vec![t[0]]) };
        let err = oat_screen(|_: &BoundaryConditions, t: &[f64]| f(t), &BoundaryConditions::new(0.5, 0.5, 0.5, 0.5), &["a", "b"], &[(0.0, 5.0); 2], 10, 1e-3)
            .unwrap_err();
        assert!(matches!(err, SensitivityError::Runner { index: 1, .. }), "{err}");
    }

    fn synth_with_dummies(x: &BoundaryConditions, t: &[f64]) -> Result<Vec<f64>, Infallible> {
        Ok(code_model(x, &ParameterVector([t[0], t[1], t[2], t[3]])).to_vec())
    }

    const NAMES: [&str; 8] = ["P1008", "P1012", "P1022", "P1028", "D1", "D2", "D3", "D4"];

    #[test]
    fn synthbench_screening_keeps_physical_parameters() {
        let x = BoundaryConditions::new(0.5, 0.5, 0.5, 0.5);
        let r = oat_screen(synth_with_dummies, &x, &NAMES, &[(0.0, 5.0); 8], 50, 1e-3).unwrap();
        assert_eq!(r.selected, PARAMETER_NAMES.to_vec());
        for i in 4..8 {
            assert!(r.variance.row(i).iter().all(|&v| v == 0.0));
        }
        let mut buf = Vec::new();
        r.write_csv(&["lower", "middle", "upper"], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "parameter,output,variance,selected");
        assert_eq!(text.lines().count(), 1 + 24);
    }

    #[test]
    fn infinite_threshold_selects_nothing() {
        let x = BoundaryConditions::new(0.5, 0.5, 0.5, 0.5);
        let r = oat_screen(synth_with_dummies, &x, &NAMES[..4], &[(0.0, 5.0); 4], 20, f64::INFINITY).unwrap();
        assert!(r.selected.is_empty());
        assert!(r.variance.row(0).iter().any(|&v| v > 0.0));
        assert!(oat_screen(synth_with_dummies, &x, &NAMES[..4], &[(0.0, 5.0); 4], 1, 1e-3).is_err());
        assert!(oat_screen(synth_with_dummies, &x, &NAMES[..4], &[(0.0, 5.0); 4], 5, 0.0).is_err());
    }

    #[test]
    fn population_variance_of_grid() {
        // population variance of 0..n-1 is (n^2 - 1) / 12
        let xs: Vec<f64> = (0..50).map(f64::from).collect();
        assert!((population_variance(&xs) - (2500.0 - 1.0) / 12.0).abs() < 1e-10);
    }

    #[test]
    fn sobol_csv() {
        let f = |t: &[f64]| Ok::<_, Infallible>(vec![t[0], t[1]]);
        let r = sobol_indices(f, &[(0.0, 1.0); 2], 64, 1).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&["a", "b"], &["y1", "y2"], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "parameter,output,first_order,total");
        assert!(text.contains("\nb,y2,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn selection_is_order_invariant(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle()) {
                let x = BoundaryConditions::new(0.4, 0.3, 0.6, 0.7);
                let base = oat_screen(synth_with_dummies, &x, &NAMES, &[(0.0, 5.0); 8], 20, 1e-3).unwrap();
                let names: Vec<&str> = perm.iter().map(|&i| NAMES[i]).collect();
                let permuted = |x: &BoundaryConditions, t: &[f64]| {
                    let mut orig = [0.0; 8];
                    for (k, &i) in perm.iter().enumerate() {
                        orig[i] = t[k];
                    }
                    synth_with_dummies(x, &orig)
                };
                let r = oat_screen(permuted, &x, &names, &[(0.0, 5.0); 8], 20, 1e-3).unwrap();
                let mut a = base.selected.clone();
                let mut b = r.selected.clone();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }
    }
}
