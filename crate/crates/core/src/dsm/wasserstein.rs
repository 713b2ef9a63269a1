//! One-dimensional 1-Wasserstein distance between empirical distributions.
//!
//! Both sides are treated as uniform empirical measures. The distance is the
//! integral over `t in (0, 1)` of `|Q_a(t) - Q_b(t)|`, where `Q` is the
//! piecewise-constant empirical quantile function. The breakpoints of the two
//! quantile functions only depend on the sample counts, so the integral
//! reduces to a fixed coupling of sorted positions with interval weights.

use tch::Tensor;

use crate::error::{Error, Result};

/// Pairing of sorted sample positions produced by merging the quantile
/// breakpoints `i / n` and `j / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileCoupling {
    pub left: Vec<i64>,
    pub right: Vec<i64>,
    pub weights: Vec<f64>,
}

impl QuantileCoupling {
    pub fn new(n: usize, m: usize) -> Self {
        assert!(n > 0 && m > 0, "quantile coupling needs non-empty sides");
        let (n64, m64) = (n as u64, m as u64);
        let denom = (n64 * m64) as f64;
        let cap = n + m - 1;
        let mut left = Vec::with_capacity(cap);
        let mut right = Vec::with_capacity(cap);
        let mut weights = Vec::with_capacity(cap);
        let (mut i, mut j) = (0u64, 0u64);
        // Breakpoints are kept as integer numerators over n * m.
        let mut t = 0u64;
        while i < n64 && j < m64 {
            let next_a = (i + 1) * m64;
            let next_b = (j + 1) * n64;
            let next = next_a.min(next_b);
            left.push(i as i64);
            right.push(j as i64);
            weights.push((next - t) as f64 / denom);
            t = next;
            if next_a == next {
                i += 1;
            }
            if next_b == next {
                j += 1;
            }
        }
        Self { left, right, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_samples(values: &[f64], what: &'static str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptySamples(what));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample(what));
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    // Stable: ties keep input order, which fixes the subgradient choice.
    out.sort_by(|x, y| x.total_cmp(y));
    out
}

/// 1-Wasserstein distance between the empirical distributions of `a` and `b`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, "left sample vector")?;
    check_samples(b, "right sample vector")?;
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / sa.len() as f64);
    }
    let plan = QuantileCoupling::new(sa.len(), sb.len());
    Ok(plan
        .left
        .iter()
        .zip(&plan.right)
        .zip(&plan.weights)
        .map(|((&i, &j), w)| w * (sa[i as usize] - sb[j as usize]).abs())
        .sum())
}

/// Analytic (sub)gradient of [`wasserstein_1d`] with respect to `a`.
pub fn wasserstein_1d_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_samples(a, "left sample vector")?;
    check_samples(b, "right sample vector")?;
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&x, &y| a[x].total_cmp(&a[y]));
    let sb = sorted(b);
    let plan = QuantileCoupling::new(a.len(), b.len());
    let mut grad = vec![0.0; a.len()];
    for ((&i, &j), w) in plan.left.iter().zip(&plan.right).zip(&plan.weights) {
        let src = order[i as usize];
        let d = a[src] - sb[j as usize];
        grad[src] += w * if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok(grad)
}

/// Differentiable per-row Wasserstein distances.
///
/// `a` has shape `(k, n)` and `b` shape `(k, m)`; row `r` of each holds the
/// samples of filter `r`. Returns a `(k,)` tensor. Gradients flow through the
/// sort into whichever side requires them.
pub fn wasserstein_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, n) = a.size2()?;
    let (kb, m) = b.size2()?;
    if ka != kb {
        return Err(Error::FilterMismatch {
            left: ka as usize,
            right: kb as usize,
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::EmptySamples("tensor samples"));
    }
    let (sa, _) = a.f_sort(1, false)?;
    let (sb, _) = b.f_sort(1, false)?;
    let plan = QuantileCoupling::new(n as usize, m as usize);
    let device = a.device();
    let left = Tensor::from_slice(&plan.left).to_device(device);
    let right = Tensor::from_slice(&plan.right).to_device(device);
    let weights = Tensor::from_slice(&plan.weights)
        .to_kind(a.kind())
        .to_device(device);
    let qa = sa.f_index_select(1, &left)?;
    let qb = sb.f_index_select(1, &right)?;
    let diff = (qa - qb).abs();
    Ok((diff * weights.unsqueeze(0)).sum_dim_intlist([1i64].as_slice(), false, a.kind()))
}

/// Convenience wrapper for a single pair of 1-D tensors.
pub fn wasserstein_1d_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rows = wasserstein_rows(&a.f_unsqueeze(0)?, &b.f_unsqueeze(0)?)?;
    Ok(rows.squeeze_dim(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_distance() {
        let a = [0.3, -1.2, 4.0, 2.2];
        assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_atoms() {
        assert_eq!(wasserstein_1d(&[0.0], &[-2.5]).unwrap(), 2.5);
        assert_eq!(wasserstein_1d(&[0.0], &[3.0]).unwrap(), 3.0);
    }

    #[test]
    fn two_point_shift() {
        assert!((wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_against_hand_value() {
        // Q_a = 0 on (0, 1); Q_b = 0 on (0, 1/2), 1 on (1/2, 1).
        assert!((wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // Q_a steps at 1/2, Q_b at 1/3 and 2/3.
        let w = wasserstein_1d(&[0.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        // (1/3)*0 + (1/6)*1 + (1/6)*2 + (1/3)*1
        assert!((w - (1.0 / 6.0 + 2.0 / 6.0 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(Error::EmptySamples(_))));
        assert!(matches!(
            wasserstein_1d(&[1.0, f64::NAN], &[1.0]),
            Err(Error::NonFiniteSample(_))
        ));
        assert!(matches!(
            wasserstein_1d(&[1.0], &[f64::INFINITY]),
            Err(Error::NonFiniteSample(_))
        ));
    }

    #[test]
    fn coupling_weights_sum_to_one() {
        for (n, m) in [(1, 1), (3, 5), (8, 256), (7, 7), (16, 3)] {
            let plan = QuantileCoupling::new(n, m);
            let total: f64 = plan.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "{n}x{m}: {total}");
            assert!(plan.len() <= n + m - 1);
            assert_eq!(*plan.left.last().unwrap() as usize, n - 1);
            assert_eq!(*plan.right.last().unwrap() as usize, m - 1);
        }
    }

    #[test]
    fn tensor_path_matches_host_path() {
        let a = [0.5, -0.25, 1.75, 0.0, 3.0];
        let b = [1.0, 2.0, -1.0];
        let host = wasserstein_1d(&a, &b).unwrap();
        let ta = Tensor::from_slice(&a);
        let tb = Tensor::from_slice(&b);
        let dev = wasserstein_1d_tensor(&ta, &tb).unwrap().double_value(&[]);
        assert!((host - dev).abs() < 1e-12);
    }

    #[test]
    fn tensor_gradient_matches_analytic_gradient() {
        let a = [0.5, -0.25, 1.75, 0.1, 3.0];
        let b = [1.0, 2.0, -1.0];
        let ta = Tensor::from_slice(&a).set_requires_grad(true);
        let tb = Tensor::from_slice(&b);
        wasserstein_1d_tensor(&ta, &tb).unwrap().backward();
        let g: Vec<f64> = Vec::try_from(ta.grad()).unwrap();
        let expected = wasserstein_1d_grad(&a, &b).unwrap();
        for (x, y) in g.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
