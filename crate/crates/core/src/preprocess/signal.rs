use crate::error::{Error, Result};

/// Series whose population standard deviation falls below this are treated
/// as constant and standardize to zeros.
pub const DEGENERATE_SD: f64 = 1e-10;

/// Subtract the least-squares line fitted over indices `0..T`.
pub fn linear_detrend(series: &[f64]) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Length { len: n, min: 2 });
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let x_mean = series.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &x) in series.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (x - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok(series
        .iter()
        .enumerate()
        .map(|(t, &x)| x - x_mean - slope * (t as f64 - t_mean))
        .collect())
}

/// Z-score with the population standard deviation. Degenerate (constant)
/// series map to all zeros.
pub fn standardize(series: &[f64]) -> Vec<f64> {
    if series.is_empty() {
        return Vec::new();
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < DEGENERATE_SD {
        return vec![0.0; series.len()];
    }
    series.iter().map(|x| (x - mean) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detrend_constant_and_ramp() {
        assert_eq!(linear_detrend(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        let r = linear_detrend(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn detrend_quadratic_matches_normal_equations() {
        // fit y = a + b t to (0,0),(1,1),(2,4),(3,9):
        // normal equations give b = 3, a = -1, residuals y - (3t - 1)
        let r = linear_detrend(&[0.0, 1.0, 4.0, 9.0]).unwrap();
        let want = [1.0, -1.0, -1.0, 1.0];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detrend_needs_two_points() {
        assert!(matches!(linear_detrend(&[1.0]), Err(Error::Length { len: 1, min: 2 })));
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(standardize(&[2.5; 6]), vec![0.0; 6]);
        // mean 5, population sd 2
        let z = standardize(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        let want = [-1.5, -0.5, -0.5, -0.5, 0.0, 0.0, 1.0, 2.0];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn detrend_residuals_uncorrelated_with_time(
            xs in proptest::collection::vec(-1e3f64..1e3, 2..200)
        ) {
            let r = linear_detrend(&xs).unwrap();
            let n = r.len() as f64;
            let tm = (n - 1.0) / 2.0;
            let mean = r.iter().sum::<f64>() / n;
            let cov: f64 = r.iter().enumerate().map(|(t, v)| (t as f64 - tm) * v).sum::<f64>() / n;
            let scale = xs.iter().map(|v| v.abs()).fold(1.0, f64::max) * n;
            prop_assert!(mean.abs() < 1e-9 * scale);
            prop_assert!(cov.abs() < 1e-9 * scale * n);
        }

        #[test]
        fn standardized_has_zero_mean_unit_sd(
            xs in proptest::collection::vec(-1e3f64..1e3, 2..200)
        ) {
            let z = standardize(&xs);
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var == 0.0 || (var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
