//! Correlation statistics and log-determinant dependence costs.
//!
//! Statistics are built on a [`Tape`] so the same code yields values and
//! gradients; the value-level helpers run a throwaway tape.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{cholesky_logdet, ridge_inverse, Matrix, SymMatrix};
use crate::tensor::Tensor;

/// Auto- and cross-correlation blocks for one pair of feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrStats {
    pub r_phi: Matrix,
    pub r_psi: Matrix,
    pub p_cross: Matrix,
    /// Number of (lower vector, position) terms summed into `r_phi`.
    pub m_phi: usize,
    /// Number of upper positions summed into `r_psi`.
    pub m_psi: usize,
}

impl CorrStats {
    /// `[[r_phi, p], [pᵀ, r_psi]]`.
    pub fn joint(&self) -> Matrix {
        Matrix::block2(&self.r_phi, &self.p_cross, &self.p_cross.transpose(), &self.r_psi)
    }

    pub fn k_phi(&self) -> usize {
        self.r_phi.rows()
    }

    pub fn k_psi(&self) -> usize {
        self.r_psi.rows()
    }

    /// Same statistics with both feature sets mapped linearly:
    /// `(A φ, B ψ)`.
    pub fn transformed(&self, a: &Matrix, b: &Matrix) -> CorrStats {
        CorrStats {
            r_phi: a.matmul(&self.r_phi).matmul(&a.transpose()),
            r_psi: b.matmul(&self.r_psi).matmul(&b.transpose()),
            p_cross: a.matmul(&self.p_cross).matmul(&b.transpose()),
            m_phi: self.m_phi,
            m_psi: self.m_psi,
        }
    }
}

/// Statistics held as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct TapeStats {
    pub r_phi: Var,
    pub r_psi: Var,
    pub p_cross: Var,
    pub m_phi: usize,
    pub m_psi: usize,
}

impl TapeStats {
    pub fn read(&self, tape: &Tape) -> Result<CorrStats> {
        Ok(CorrStats {
            r_phi: tape.matrix(self.r_phi)?,
            r_psi: tape.matrix(self.r_psi)?,
            p_cross: tape.matrix(self.p_cross)?,
            m_phi: self.m_phi,
            m_psi: self.m_psi,
        })
    }
}

/// Subtracts the outer product of the means from each block, turning raw
/// second moments into covariances under the same weighting.
fn center(tape: &mut Tape, s: TapeStats, mu_phi: Var, mu_psi: Var) -> Result<TapeStats> {
    let one = [1.0];
    let mm_phi = tape.weighted_outer(mu_phi, mu_phi, &one)?;
    let mm_psi = tape.weighted_outer(mu_psi, mu_psi, &one)?;
    let mm_x = tape.weighted_outer(mu_phi, mu_psi, &one)?;
    Ok(TapeStats {
        r_phi: tape.sub(s.r_phi, mm_phi)?,
        r_psi: tape.sub(s.r_psi, mm_psi)?,
        p_cross: tape.sub(s.p_cross, mm_x)?,
        ..s
    })
}

fn uniform(p: usize) -> Vec<f64> {
    vec![1.0 / p as f64; p]
}

/// Paired positions: `E[f fᵀ]`, `E[g gᵀ]`, `E[f gᵀ]` over rows.
pub fn pairwise_on_tape(tape: &mut Tape, zf: Var, zg: Var, centered: bool) -> Result<TapeStats> {
    let (pf, _) = tape.value(zf).dims2()?;
    let (pg, _) = tape.value(zg).dims2()?;
    if pf != pg {
        return Err(shape_err!("paired statistics need equal row counts, got {} and {}", pf, pg));
    }
    if pf == 0 {
        return Err(Error::InvalidArgument("statistics over an empty position set".into()));
    }
    let s = TapeStats {
        r_phi: tape.outer_stats(zf, zf)?,
        r_psi: tape.outer_stats(zg, zg)?,
        p_cross: tape.outer_stats(zf, zg)?,
        m_phi: pf,
        m_psi: pf,
    };
    if !centered {
        return Ok(s);
    }
    let w = uniform(pf);
    let mf = tape.weighted_mean(zf, &w)?;
    let mg = tape.weighted_mean(zg, &w)?;
    center(tape, s, mf, mg)
}

/// View features (`L·B × K`, view-major: row `l·B + b`) against group
/// features (`B × K`). `r_phi` pools every view, the cross block averages the
/// L per-view cross blocks.
pub fn external_on_tape(tape: &mut Tape, views: Var, group: Var, l: usize, centered: bool) -> Result<TapeStats> {
    let (lb, _) = tape.value(views).dims2()?;
    let (b, _) = tape.value(group).dims2()?;
    if l == 0 || b == 0 || lb != l * b {
        return Err(shape_err!(
            "external statistics: {} view rows do not match L={} groups of {}",
            lb,
            l,
            b
        ));
    }
    let tiled = tape.concat_rows(&vec![group; l])?;
    let s = TapeStats {
        r_phi: tape.outer_stats(views, views)?,
        r_psi: tape.outer_stats(group, group)?,
        p_cross: tape.outer_stats(views, tiled)?,
        m_phi: lb,
        m_psi: b,
    };
    if !centered {
        return Ok(s);
    }
    let mv = tape.weighted_mean(views, &uniform(lb))?;
    let mg = tape.weighted_mean(group, &uniform(b))?;
    center(tape, s, mv, mg)
}

/// How often each lower index along one axis falls inside an upper window.
fn coverage(lower: usize, upper: usize, window: usize) -> Vec<usize> {
    (0..lower)
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let hi = i.min(upper - 1);
            if hi >= lo {
                hi - lo + 1
            } else {
                0
            }
        })
        .collect()
}

/// Lower map `N×K×H×W` against upper map `N×K×H'×W'` where each upper
/// element reads the lower window of size `(H−H'+1)×(W−W'+1)` at its own
/// offset. Every (window element, upper position) term counts once, so
/// border elements enter `r_phi` less often than interior ones.
pub fn internal_on_tape(tape: &mut Tape, lower: Var, upper: Var, centered: bool) -> Result<TapeStats> {
    let (n, _, h, w) = tape.value(lower).dims4()?;
    let (n2, _, ho, wo) = tape.value(upper).dims4()?;
    if n != n2 || ho > h || wo > w || ho == 0 || wo == 0 {
        return Err(shape_err!(
            "internal statistics: lower {:?} and upper {:?} are not a window pair",
            tape.value(lower).shape(),
            tape.value(upper).shape()
        ));
    }
    let (dm, dn) = (h - ho + 1, w - wo + 1);
    let m_phi = n * ho * wo * dm * dn;
    let m_psi = n * ho * wo;
    let cov_r = coverage(h, ho, dm);
    let cov_c = coverage(w, wo, dn);
    let mut weights = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        for &cr in &cov_r {
            for &cc in &cov_c {
                weights.push((cr * cc) as f64 / m_phi as f64);
            }
        }
    }
    let rows_lo = tape.to_rows(lower)?;
    let rows_up = tape.to_rows(upper)?;
    let boxed = tape.box_mean(lower, dm, dn)?;
    let rows_box = tape.to_rows(boxed)?;
    let s = TapeStats {
        r_phi: tape.weighted_outer(rows_lo, rows_lo, &weights)?,
        r_psi: tape.outer_stats(rows_up, rows_up)?,
        p_cross: tape.outer_stats(rows_box, rows_up)?,
        m_phi,
        m_psi,
    };
    if !centered {
        return Ok(s);
    }
    let mu_lo = tape.weighted_mean(rows_lo, &weights)?;
    let mu_up = tape.weighted_mean(rows_up, &uniform(m_psi))?;
    center(tape, s, mu_lo, mu_up)
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec())
}

pub fn stats_pairwise(zf: &Matrix, zg: &Matrix, centered: bool) -> Result<CorrStats> {
    let mut tape = Tape::new();
    let f = tape.constant(matrix_tensor(zf)?)?;
    let g = tape.constant(matrix_tensor(zg)?)?;
    pairwise_on_tape(&mut tape, f, g, centered)?.read(&tape)
}

/// `views[l]` holds the B×K features of view `l`; `group` is B×K.
pub fn stats_external(views: &[Matrix], group: &Matrix, centered: bool) -> Result<CorrStats> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("external statistics need at least one view".into()));
    }
    for v in views {
        if v.rows() != group.rows() {
            return Err(shape_err!("view batch {} differs from group batch {}", v.rows(), group.rows()));
        }
    }
    let mut tape = Tape::new();
    let parts = views
        .iter()
        .map(|v| tape.constant(matrix_tensor(v)?))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&parts)?;
    let g = tape.constant(matrix_tensor(group)?)?;
    external_on_tape(&mut tape, stacked, g, views.len(), centered)?.read(&tape)
}

pub fn stats_internal(lower: &Tensor, upper: &Tensor, centered: bool) -> Result<CorrStats> {
    let mut tape = Tape::new();
    let lo = tape.constant(lower.clone())?;
    let up = tape.constant(upper.clone())?;
    internal_on_tape(&mut tape, lo, up, centered)?.read(&tape)
}

fn logdet(m: &Matrix, ridge: f64) -> Result<f64> {
    Ok(cholesky_logdet(&SymMatrix::new(m.clone())?, ridge)?)
}

/// `log det(J + λI) − log det(R_φ + λI) − log det(R_ψ + λI)`.
pub fn logdet_cost(stats: &CorrStats, ridge: f64) -> Result<f64> {
    Ok(logdet(&stats.joint(), ridge)? - logdet(&stats.r_phi, ridge)? - logdet(&stats.r_psi, ridge)?)
}

fn joint_on_tape(tape: &mut Tape, s: &TapeStats) -> Result<Var> {
    let pt = tape.transpose(s.p_cross)?;
    tape.block2(s.r_phi, s.p_cross, pt, s.r_psi)
}

/// Exact differentiable cost; the gradient of each log-determinant is the
/// ridge inverse.
pub fn logdet_cost_on_tape(tape: &mut Tape, s: &TapeStats, ridge: f64) -> Result<Var> {
    let j = joint_on_tape(tape, s)?;
    let lj = tape.logdet(j, ridge)?;
    let lf = tape.logdet(s.r_phi, ridge)?;
    let lg = tape.logdet(s.r_psi, ridge)?;
    let a = tape.sub(lj, lf)?;
    tape.sub(a, lg)
}

fn ridge_inv(m: &Matrix, ridge: f64) -> Result<Matrix> {
    Ok(ridge_inverse(&SymMatrix::new(m.clone())?, ridge)?.into_matrix())
}

/// Frozen inverses that stand in for the instantaneous ones in the cost
/// gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Precond {
    pub joint: Matrix,
    pub phi: Matrix,
    pub psi: Matrix,
}

impl Precond {
    /// Ridge inverses of an estimate of the statistics.
    pub fn from_estimate(est: &CorrStats, ridge: f64) -> Result<Self> {
        Ok(Precond {
            joint: ridge_inv(&est.joint(), ridge)?,
            phi: ridge_inv(&est.r_phi, ridge)?,
            psi: ridge_inv(&est.r_psi, ridge)?,
        })
    }
}

/// `⟨C_J, J⟩ − ⟨C_φ, R_φ⟩ − ⟨C_ψ, R_ψ⟩` with the `C` held constant. Its value
/// is meaningless; its gradient is the log-determinant gradient with the
/// inverses replaced by `precond`.
pub fn surrogate_on_tape(tape: &mut Tape, s: &TapeStats, precond: &Precond) -> Result<Var> {
    let k = tape.value(s.r_phi).shape()[0] + tape.value(s.r_psi).shape()[0];
    if precond.joint.rows() != k || precond.phi.rows() != tape.value(s.r_phi).shape()[0] {
        return Err(shape_err!("preconditioner does not match statistics"));
    }
    let j = joint_on_tape(tape, s)?;
    let tj = tape.frob_dot(j, &precond.joint)?;
    let tf = tape.frob_dot(s.r_phi, &precond.phi)?;
    let tg = tape.frob_dot(s.r_psi, &precond.psi)?;
    let a = tape.sub(tj, tf)?;
    tape.sub(a, tg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterEntry {
    pub r_phi: Matrix,
    pub r_psi: Matrix,
    pub joint: Matrix,
    /// Number of updates folded in.
    pub k: u64,
}

/// Exponentially smoothed, bias-corrected estimators of the correlation
/// blocks, one slot per cost.
#[derive(Clone, Debug, PartialEq)]
pub struct AcfFilterBank {
    beta: f64,
    entries: Vec<Option<FilterEntry>>,
}

/// Bias-corrected estimate of the three blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub r_phi: Matrix,
    pub r_psi: Matrix,
    pub joint: Matrix,
}

impl Estimate {
    pub fn precond(&self, ridge: f64) -> Result<Precond> {
        Ok(Precond {
            joint: ridge_inv(&self.joint, ridge)?,
            phi: ridge_inv(&self.r_phi, ridge)?,
            psi: ridge_inv(&self.r_psi, ridge)?,
        })
    }
}

impl AcfFilterBank {
    pub fn new(beta: f64, slots: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1), got {beta}")));
        }
        Ok(AcfFilterBank {
            beta,
            entries: vec![None; slots],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, s: usize) -> Option<&FilterEntry> {
        self.entries.get(s).and_then(Option::as_ref)
    }

    pub fn set_entry(&mut self, s: usize, entry: Option<FilterEntry>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(s)
            .ok_or_else(|| Error::InvalidArgument(format!("filter slot {s} out of range")))?;
        *slot = entry;
        Ok(())
    }

    /// `R̃ ← βR̃ + (1−β)R` from zero, then `R̂ = R̃/(1−β^k)`.
    pub fn update(&mut self, s: usize, stats: &CorrStats) -> Result<Estimate> {
        let beta = self.beta;
        let slot = self
            .entries
            .get_mut(s)
            .ok_or_else(|| Error::InvalidArgument(format!("filter slot {s} out of range")))?;
        let joint = stats.joint();
        let entry = slot.get_or_insert_with(|| FilterEntry {
            r_phi: Matrix::zeros(stats.k_phi(), stats.k_phi()),
            r_psi: Matrix::zeros(stats.k_psi(), stats.k_psi()),
            joint: Matrix::zeros(joint.rows(), joint.cols()),
            k: 0,
        });
        if entry.joint.rows() != joint.rows() {
            return Err(shape_err!("filter slot {} holds a different width", s));
        }
        let mix = |old: &Matrix, new: &Matrix| old.scale(beta).add(&new.scale(1.0 - beta));
        entry.r_phi = mix(&entry.r_phi, &stats.r_phi);
        entry.r_psi = mix(&entry.r_psi, &stats.r_psi);
        entry.joint = mix(&entry.joint, &joint);
        entry.k += 1;
        let corr = 1.0 - beta.powi(entry.k as i32);
        Ok(Estimate {
            r_phi: entry.r_phi.scale(1.0 / corr),
            r_psi: entry.r_psi.scale(1.0 / corr),
            joint: entry.joint.scale(1.0 / corr),
        })
    }
}
