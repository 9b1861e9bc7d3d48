//! Post-training normalization: whitening, the spectrum of the whitened
//! cross-correlation, orthonormal bases and density-ratio reconstruction.

use std::fmt::Write as _;

use log::warn;

use crate::costs::{stats_pairwise, CorrStats};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{inv_sqrt_sym, svd_rect, Matrix, SymMatrix};

/// Default ridge for post-hoc analysis.
pub const ANALYSIS_RIDGE: f64 = 1e-3;
/// Eigenvalues above `1 + WARN_OVERSHOOT` are reported.
pub const WARN_OVERSHOOT: f64 = 1e-6;
/// Eigenvalues above `1 + FAIL_OVERSHOOT` mean the statistics are broken.
pub const FAIL_OVERSHOOT: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SpectrumResult {
    pub layer: usize,
    /// Clamped to [0, 1], descending; `min(Kφ, Kψ)` entries.
    pub sigma: Vec<f64>,
    /// Squared singular values before clamping.
    pub sigma_raw: Vec<f64>,
    /// Kφ×Kφ; column k is the k-th left singular vector.
    pub u_rot: Matrix,
    /// Kψ×Kψ.
    pub v_rot: Matrix,
    /// `(R_φ + λI)^{-1/2}`.
    pub w_phi: Matrix,
    pub w_psi: Matrix,
    pub ridge: f64,
}

pub fn extract_spectrum(stats: &CorrStats, ridge: f64, layer: usize) -> Result<SpectrumResult> {
    let w_phi = inv_sqrt_sym(&SymMatrix::new(stats.r_phi.symmetrized())?, ridge)?.into_matrix();
    let w_psi = inv_sqrt_sym(&SymMatrix::new(stats.r_psi.symmetrized())?, ridge)?.into_matrix();
    let t = w_phi.matmul(&stats.p_cross).matmul(&w_psi);
    let (u_rot, s, v_rot) = svd_rect(&t)?;
    let sigma_raw: Vec<f64> = s.iter().map(|x| x * x).collect();
    let top = sigma_raw.first().copied().unwrap_or(0.0);
    if top > 1.0 + FAIL_OVERSHOOT {
        return Err(Error::Numerical(format!(
            "layer {layer}: eigenvalue {top} exceeds 1; the statistics are not a valid joint"
        )));
    }
    if top > 1.0 + WARN_OVERSHOOT {
        warn!("layer {layer}: eigenvalue {top} above 1, clamped");
    }
    let sigma = sigma_raw.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    Ok(SpectrumResult {
        layer,
        sigma,
        sigma_raw,
        u_rot,
        v_rot,
        w_phi,
        w_psi,
        ridge,
    })
}

/// `rotationᵀ · whitener · z` for every row `z` of `positions×K`.
pub fn normalize_features(z: &Matrix, whitener: &Matrix, rotation: &Matrix) -> Result<Matrix> {
    if z.cols() != whitener.rows() || whitener.cols() != rotation.rows() {
        return Err(shape_err!(
            "normalize: features of width {} against a {}x{} whitener and {}x{} rotation",
            z.cols(),
            whitener.rows(),
            whitener.cols(),
            rotation.rows(),
            rotation.cols()
        ));
    }
    Ok(z.matmul(&whitener.transpose()).matmul(rotation))
}

impl SpectrumResult {
    pub fn normalize_phi(&self, z: &Matrix) -> Result<Matrix> {
        normalize_features(z, &self.w_phi, &self.u_rot)
    }

    pub fn normalize_psi(&self, z: &Matrix) -> Result<Matrix> {
        normalize_features(z, &self.w_psi, &self.v_rot)
    }
}

/// `Σ_k √σ_k φ̂_k ψ̂_k`, plus 1 for the constant pair when requested. Only
/// the first `sigma.len()` coordinates are read.
pub fn density_ratio(phi_hat: &[f64], psi_hat: &[f64], sigma: &[f64], include_constant: bool) -> f64 {
    let s: f64 = phi_hat
        .iter()
        .zip(psi_hat)
        .zip(sigma)
        .map(|((p, q), s)| s.sqrt() * p * q)
        .sum();
    if include_constant {
        1.0 + s
    } else {
        s
    }
}

/// Singular values of the cross-correlation between two whitened (centered)
/// feature sets evaluated on the same rows; 1 means a shared direction.
pub fn compare_bases(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Vec<f64>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err!(
            "compare_bases: {}x{} against {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let stats = stats_pairwise(a, b, true)?;
    let spec = extract_spectrum(&stats, ridge, 0)?;
    Ok(spec.sigma.iter().map(|s| s.sqrt()).collect())
}

/// `Σ_{k<K} log(1 − min(σ_k, 1 − ridge))`.
pub fn optimal_cost(sigma: &[f64], k: usize, ridge: f64) -> f64 {
    sigma.iter().take(k).map(|&s| (1.0 - s.min(1.0 - ridge)).ln()).sum()
}

/// `layer,rank,eigenvalue` rows, ranks from 1, 17 significant digits.
pub fn spectrum_csv(rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("layer,rank,eigenvalue\n");
    for (layer, sigma) in rows {
        for (k, s) in sigma.iter().enumerate() {
            writeln!(out, "{layer},{},{s:.16e}", k + 1).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// One-hot statistics of a discrete joint: diagonal marginals and the
    /// joint table as the cross block.
    fn onehot_stats(p: &Matrix) -> CorrStats {
        let px: Vec<f64> = (0..p.rows()).map(|i| p.row(i).iter().sum()).collect();
        let py: Vec<f64> = (0..p.cols()).map(|j| p.col(j).iter().sum()).collect();
        CorrStats {
            r_phi: Matrix::from_diag(&px),
            r_psi: Matrix::from_diag(&py),
            p_cross: p.clone(),
            m_phi: 1,
            m_psi: 1,
        }
    }

    #[test]
    fn trivial_spectra() {
        let zero = CorrStats {
            r_phi: Matrix::identity(3),
            r_psi: Matrix::identity(3),
            p_cross: Matrix::zeros(3, 3),
            m_phi: 1,
            m_psi: 1,
        };
        assert!(extract_spectrum(&zero, 0.0, 1).unwrap().sigma.iter().all(|&s| s == 0.0));
        let full = CorrStats {
            p_cross: Matrix::identity(3),
            ..zero
        };
        for s in extract_spectrum(&full, 0.0, 1).unwrap().sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_two_by_two() {
        let st = onehot_stats(&m(&[&[0.4, 0.1], &[0.1, 0.4]]));
        let sp = extract_spectrum(&st, 0.0, 1).unwrap();
        assert!((sp.sigma[0] - 1.0).abs() < 1e-12);
        assert!((sp.sigma[1] - 0.36).abs() < 1e-12);
        // Reconstruct the ratio table from the normalized one-hot features.
        let phi = sp.normalize_phi(&Matrix::identity(2)).unwrap();
        let psi = sp.normalize_psi(&Matrix::identity(2)).unwrap();
        let expect = [[1.6, 0.4], [0.4, 1.6]];
        for x in 0..2 {
            for y in 0..2 {
                let r = density_ratio(phi.row(x), psi.row(y), &sp.sigma, false);
                assert!((r - expect[x][y]).abs() < 1e-8, "{x}{y}: {r}");
            }
        }
    }

    #[test]
    fn centered_oracle_needs_the_constant() {
        // Centered one-hot stats drop the constant pair; adding it back
        // restores the ratio table.
        let p = m(&[&[0.4, 0.1], &[0.1, 0.4]]);
        let mut st = onehot_stats(&p);
        let px = [0.5, 0.5];
        for i in 0..2 {
            for j in 0..2 {
                st.r_phi[(i, j)] -= px[i] * px[j];
                st.r_psi[(i, j)] -= px[i] * px[j];
                st.p_cross[(i, j)] -= px[i] * px[j];
            }
        }
        let sp = extract_spectrum(&st, 1e-9, 1).unwrap();
        assert!((sp.sigma[0] - 0.36).abs() < 1e-6);
        // Non-constant eigenfunction ±1 at x, so φ̂ψ̂√σ = ±0.6.
        let phi = sp.normalize_phi(&m(&[&[0.5, -0.5], &[-0.5, 0.5]])).unwrap();
        let psi = sp.normalize_psi(&m(&[&[0.5, -0.5], &[-0.5, 0.5]])).unwrap();
        let r = density_ratio(phi.row(0), psi.row(0), &sp.sigma[..1], true);
        assert!((r - 1.6).abs() < 1e-6, "{r}");
        let r = density_ratio(phi.row(0), psi.row(1), &sp.sigma[..1], true);
        assert!((r - 0.4).abs() < 1e-6, "{r}");
    }

    #[test]
    fn rectangular_blocks() {
        // 3 vs 2 dims, independent rank: sigma has min(3,2) entries.
        let p = m(&[&[0.2, 0.1], &[0.05, 0.25], &[0.15, 0.25]]);
        let sp = extract_spectrum(&onehot_stats(&p), 0.0, 0).unwrap();
        assert_eq!(sp.sigma.len(), 2);
        assert!((sp.sigma[0] - 1.0).abs() < 1e-12);
        let ident = |u: &Matrix| u.transpose().matmul(u).max_abs_diff(&Matrix::identity(u.rows()));
        assert!(ident(&sp.u_rot) < 1e-12 && ident(&sp.v_rot) < 1e-12);
        // Exact reconstruction of the table with all components.
        let phi = sp.normalize_phi(&Matrix::identity(3)).unwrap();
        let psi = sp.normalize_psi(&Matrix::identity(2)).unwrap();
        let px = [0.3, 0.3, 0.4];
        let py = [0.4, 0.6];
        for x in 0..3 {
            for y in 0..2 {
                let r = density_ratio(phi.row(x), psi.row(y), &sp.sigma, false);
                assert!((r - p[(x, y)] / (px[x] * py[y])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn whitening_identity_on_fitting_batch() {
        let zf = m(&[&[1.0, 0.2], &[0.3, -1.0], &[0.5, 0.5], &[-0.7, 0.1], &[0.2, 0.9]]);
        let zg = m(&[&[0.1, 1.0], &[0.4, 0.2], &[-1.0, 0.3], &[0.6, 0.6], &[0.0, -0.5]]);
        let st = stats_pairwise(&zf, &zg, false).unwrap();
        let sp = extract_spectrum(&st, 0.0, 0).unwrap();
        let phi = sp.normalize_phi(&zf).unwrap();
        let gram = phi.transpose().matmul(&phi).scale(1.0 / 5.0);
        assert!(gram.max_abs_diff(&Matrix::identity(2)) < 1e-8);
        // Trace identity: E[ρ̂] over the paired rows equals Σσ.
        let psi = sp.normalize_psi(&zg).unwrap();
        let mean: f64 = (0..5).map(|r| density_ratio(phi.row(r), psi.row(r), &sp.sigma, false)).sum::<f64>() / 5.0;
        assert!((mean - sp.sigma.iter().sum::<f64>()).abs() < 1e-6);
        assert!(min_eigenvalue(&SymMatrix::new(gram).unwrap()).unwrap() > 0.99);
    }

    #[test]
    fn overshoot_fails() {
        let st = CorrStats {
            r_phi: Matrix::identity(1),
            r_psi: Matrix::identity(1),
            p_cross: m(&[&[1.01]]),
            m_phi: 1,
            m_psi: 1,
        };
        assert!(matches!(extract_spectrum(&st, 0.0, 0), Err(Error::Numerical(_))));
        let st = CorrStats {
            p_cross: m(&[&[1.0 + 1e-5]]),
            ..st
        };
        assert_eq!(extract_spectrum(&st, 0.0, 0).unwrap().sigma, vec![1.0]);
    }

    #[test]
    fn optimal_cost_values() {
        assert_eq!(optimal_cost(&[0.0, 0.0], 2, 0.0), 0.0);
        assert!((optimal_cost(&[0.36], 1, 0.0) - 0.64f64.ln()).abs() < 1e-15);
        assert!((optimal_cost(&[0.36], 1, 0.0) + 0.446287).abs() < 1e-6);
        assert!((optimal_cost(&[1.0, 1.0], 2, 1e-3) - 2.0 * 1e-3f64.ln()).abs() < 1e-9);
        assert_eq!(optimal_cost(&[0.5, 0.5], 0, 0.0), 0.0);
    }

    #[test]
    fn density_ratio_trivia() {
        assert_eq!(density_ratio(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0], false), 0.0);
        assert_eq!(density_ratio(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.3], false), 1.0);
    }

    #[test]
    fn self_alignment() {
        let a = m(&[&[1.0, 0.2], &[0.3, -1.0], &[0.5, 0.5], &[-0.7, 0.1], &[0.2, 0.9]]);
        for v in compare_bases(&a, &a, 0.0).unwrap() {
            assert!((v - 1.0).abs() < 1e-8);
        }
        let c = (0.3f64).cos();
        let s = (0.3f64).sin();
        let rot = a.matmul(&m(&[&[c, -s], &[s, c]]));
        for v in compare_bases(&a, &rot, 0.0).unwrap() {
            assert!((v - 1.0).abs() < 1e-8);
        }
        assert!(compare_bases(&a, &Matrix::zeros(4, 2), 0.0).is_err());
    }

    #[test]
    fn csv_format() {
        let s = spectrum_csv(&[("1".into(), vec![1.0, 0.36])]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines, ["layer,rank,eigenvalue", "1,1,1.0000000000000000e0", "1,2,3.5999999999999999e-1"]);
        let back: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 0.36);
    }
}
