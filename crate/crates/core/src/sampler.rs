//! Latin hypercube and uniform grid designs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::seeded;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid range for dimension {dim}: lo = {lo} must be below hi = {hi}")]
    InvalidRange { dim: usize, lo: f64, hi: f64 },
    #[error("design needs at least one point and one dimension")]
    Empty,
    #[error("uniform grid needs at least 2 points, got {0}")]
    TooFewGridPoints(usize),
}

/// An `n x d` point set with the box it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Design<T> {
    pub points: Matrix<T>,
    pub ranges: Vec<(T, T)>,
    pub seed: u64,
}

impl<T: Real> Design<T> {
    pub fn n(&self) -> usize {
        self.points.rows()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Writes the design as CSV with header `p1,p2,...,pd`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("p{j}")).collect();
        w.write_record(&header)?;
        for row in self.points.iter_rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_ranges<T: Real>(ranges: &[(T, T)]) -> Result<(), SamplerError> {
    for (dim, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(SamplerError::InvalidRange { dim, lo: lo.as_f64(), hi: hi.as_f64() });
        }
    }
    Ok(())
}

/// Random Latin hypercube: one point per stratum per dimension, placed
/// uniformly inside its stratum. Points are drawn on the unit cube and
/// mapped affinely, so the same seed gives the same relative layout in
/// any box.
pub fn lhs_sample<T: Real>(n: usize, ranges: &[(T, T)], seed: u64) -> Result<Design<T>, SamplerError> {
    if n == 0 || ranges.is_empty() {
        return Err(SamplerError::Empty);
    }
    check_ranges(ranges)?;
    let unit = unit_lhs(n, ranges.len(), seed);
    let d = ranges.len();
    let mut points = Matrix::zeros(n, d);
    for i in 0..n {
        for (j, &(lo, hi)) in ranges.iter().enumerate() {
            points[(i, j)] = lo + (hi - lo) * T::lit(unit[i * d + j]);
        }
    }
    Ok(Design { points, ranges: ranges.to_vec(), seed })
}

/// Row-major `n x d` unit-cube LHS in f64.
pub(crate) fn unit_lhs(n: usize, d: usize, seed: u64) -> Vec<f64> {
    // keep draws a hair away from stratum edges so floor(u * n) recovers
    // the stratum exactly after rounding
    const EDGE: f64 = 1e-9;
    let mut rng = seeded(seed);
    let mut out = vec![0.0; n * d];
    let mut perm: Vec<usize> = (0..n).collect();
    let nf = n as f64;
    for j in 0..d {
        perm.shuffle(&mut rng);
        for (i, &k) in perm.iter().enumerate() {
            let u: f64 = rng.random::<f64>();
            let u = EDGE + u * (1.0 - 2.0 * EDGE);
            out[i * d + j] = (k as f64 + u) / nf;
        }
    }
    out
}

/// `n` equally spaced values from `lo` to `hi`, endpoints included.
pub fn uniform_grid<T: Real>(n: usize, range: (T, T)) -> Result<Vec<T>, SamplerError> {
    if n < 2 {
        return Err(SamplerError::TooFewGridPoints(n));
    }
    check_ranges(&[range])?;
    let (lo, hi) = range;
    let step = (hi - lo) / T::from_usize_lossy(n - 1);
    let mut out: Vec<T> = (0..n).map(|i| lo + step * T::from_usize_lossy(i)).collect();
    out[n - 1] = hi;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stratum_counts(design: &Design<f64>, j: usize) -> Vec<usize> {
        let n = design.n();
        let (lo, hi) = design.ranges[j];
        let mut counts = vec![0usize; n];
        for i in 0..n {
            let u = (design.points[(i, j)] - lo) / (hi - lo);
            let k = ((u * n as f64).floor() as usize).min(n - 1);
            counts[k] += 1;
        }
        counts
    }

    #[test]
    fn hundred_points_in_four_dims_fill_every_stratum_once() {
        let d = lhs_sample(100, &[(0.0, 5.0); 4], 11).unwrap();
        assert_eq!(d.n(), 100);
        for j in 0..4 {
            assert!(stratum_counts(&d, j).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn single_point_is_inside_box() {
        let d = lhs_sample(1, &[(-2.0, 3.0), (10.0, 11.0)], 5).unwrap();
        assert!(d.points[(0, 0)] > -2.0 && d.points[(0, 0)] < 3.0);
        assert!(d.points[(0, 1)] > 10.0 && d.points[(0, 1)] < 11.0);
    }

    #[test]
    fn same_seed_same_design() {
        let a = lhs_sample(10, &[(0.0, 1.0); 2], 7).unwrap();
        let b = lhs_sample(10, &[(0.0, 1.0); 2], 7).unwrap();
        assert_eq!(a, b);
        let c = lhs_sample(10, &[(0.0, 1.0); 2], 8).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn invalid_range_is_rejected() {
        let err = lhs_sample(4, &[(0.0, 1.0), (2.0, 2.0)], 1).unwrap_err();
        assert_eq!(err, SamplerError::InvalidRange { dim: 1, lo: 2.0, hi: 2.0 });
    }

    #[test]
    fn grids() {
        let g = uniform_grid(50, (0.0f64, 5.0)).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[49], 5.0);
        assert!((g[1] - 5.0 / 49.0).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(uniform_grid(2, (0.0, 1.0)).unwrap(), vec![0.0, 1.0]);
        assert_eq!(uniform_grid(3, (-1.0, 1.0)).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(uniform_grid::<f64>(1, (0.0, 1.0)), Err(SamplerError::TooFewGridPoints(1)));
    }

    #[test]
    fn csv_header() {
        let d = lhs_sample(3, &[(0.0f64, 1.0); 3], 2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "p1,p2,p3");
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn f32_design() {
        let d = lhs_sample(16, &[(0.0f32, 2.0); 2], 3).unwrap();
        assert!(d.points.as_slice().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    proptest! {
        #[test]
        fn stratified_in_every_dimension(n in 1usize..60, d in 1usize..5, seed in any::<u64>()) {
            let design = lhs_sample(n, &vec![(-3.0, 7.0); d], seed).unwrap();
            for j in 0..d {
                prop_assert!(stratum_counts(&design, j).iter().all(|&c| c == 1));
            }
        }

        #[test]
        fn affine_map_of_unit_design(n in 1usize..40, seed in any::<u64>(), lo in -10.0f64..10.0, w in 0.1f64..20.0) {
            let unit = lhs_sample(n, &[(0.0, 1.0); 3], seed).unwrap();
            let boxed = lhs_sample(n, &[(lo, lo + w); 3], seed).unwrap();
            for i in 0..n {
                for j in 0..3 {
                    let mapped = lo + w * unit.points[(i, j)];
                    prop_assert!((mapped - boxed.points[(i, j)]).abs() <= 1e-12 * (1.0 + lo.abs() + w));
                }
            }
        }
    }
}
