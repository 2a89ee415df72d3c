//! Gauss-Hermite rules for expectations against one-dimensional Gaussians.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights such that `sum w_i h(z_i) ≈ E[h(Z)]`, `Z ~ N(0,1)`.
///
/// Built by Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials; exact for polynomials of degree `< 2n`.
pub fn gauss_hermite_standard(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = rule.iter().map(|r| r.1).sum();
    for r in &mut rule {
        r.1 /= total;
    }
    rule
}

/// Default rule size for Gaussian jump expectations.
pub const GAUSS_HERMITE_NODES: usize = 48;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_normal_moments() {
        let rule = gauss_hermite_standard(20);
        let moment = |p: i32| rule.iter().map(|(z, w)| w * z.powi(p)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-14);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn integrates_exponential_mgf() {
        let rule = gauss_hermite_standard(48);
        let mgf: f64 = rule.iter().map(|(z, w)| w * (0.7 * z).exp()).sum();
        assert!((mgf - (0.5f64 * 0.49).exp()).abs() < 1e-13);
    }
}
