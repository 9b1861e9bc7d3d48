//! Exact ground truth on finite alphabets: the spectral decomposition of a
//! joint table, hierarchical chains built from subpatch-style kernels, and
//! the telescoping identity of their density ratios.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::{svd_rect, Matrix};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest joint state space [`chain_joint`] will enumerate.
pub const MAX_STATES: usize = 1_000_000;

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Joint distribution of two finite variables.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    pub n: usize,
    pub m: usize,
    /// Row-major `p(x, y)`.
    pub p: Vec<f64>,
}

impl JointTable {
    pub fn new(n: usize, m: usize, p: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || p.len() != n * m {
            return Err(bad(format!("joint table of {} entries for {n}x{m}", p.len())));
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(bad(format!("negative or non-finite mass {v}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(bad(format!("masses sum to {total}, not 1")));
        }
        let t = JointTable { n, m, p };
        if t.px().iter().chain(&t.py()).any(|&v| v <= 0.0) {
            return Err(bad("every symbol needs positive marginal mass"));
        }
        Ok(t)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(bad("ragged joint table"));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.m + y]
    }

    pub fn px(&self) -> Vec<f64> {
        (0..self.n).map(|x| (0..self.m).map(|y| self.at(x, y)).sum()).collect()
    }

    pub fn py(&self) -> Vec<f64> {
        (0..self.m).map(|y| (0..self.n).map(|x| self.at(x, y)).sum()).collect()
    }

    /// `p(x, y) / (p(x) p(y))`.
    pub fn ratio(&self, x: usize, y: usize) -> f64 {
        let (px, py) = (self.px(), self.py());
        self.at(x, y) / (px[x] * py[y])
    }

    /// Independent draws of `(x, y)` pairs.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        let mut cdf = Vec::with_capacity(self.p.len());
        let mut acc = 0.0;
        for &v in &self.p {
            acc += v;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let idx = cdf.partition_point(|&c| c <= u).min(self.p.len() - 1);
                (idx / self.m, idx % self.m)
            })
            .collect()
    }

    /// Reads `x,y,probability` lines. A non-numeric first line is taken as
    /// a header; missing cells are zero.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!("line {}: expected x,y,probability", ln + 1)));
            }
            let parsed = (parts[0].parse::<usize>(), parts[1].parse::<usize>(), parts[2].parse::<f64>());
            match parsed {
                (Ok(x), Ok(y), Ok(p)) => cells.push((x, y, p)),
                _ if ln == 0 && cells.is_empty() => continue,
                _ => return Err(Error::Data(format!("line {}: cannot parse {line:?}", ln + 1))),
            }
        }
        if cells.is_empty() {
            return Err(Error::Data("joint table has no entries".into()));
        }
        let n = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let m = cells.iter().map(|c| c.1).max().unwrap() + 1;
        if n.saturating_mul(m) > MAX_STATES {
            return Err(Error::Data(format!("{n}x{m} table is too large")));
        }
        let mut p = vec![f64::NAN; n * m];
        for (x, y, v) in cells {
            let slot = &mut p[x * m + y];
            if !slot.is_nan() {
                return Err(Error::Data(format!("cell ({x},{y}) listed twice")));
            }
            *slot = v;
        }
        for v in &mut p {
            if v.is_nan() {
                *v = 0.0;
            }
        }
        Self::new(n, m, p).map_err(|e| Error::Data(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ExactDecomposition {
    /// `min(n, m)` eigenvalues, descending; the first is the constant mode.
    pub sigma: Vec<f64>,
    /// n×K, column k holds φ_k.
    pub phi: Matrix,
    /// m×K.
    pub psi: Matrix,
}

impl ExactDecomposition {
    /// `Σ_k √σ_k φ_k(x) ψ_k(y)`.
    pub fn reconstruct(&self, x: usize, y: usize) -> f64 {
        (0..self.sigma.len())
            .map(|k| self.sigma[k].sqrt() * self.phi[(x, k)] * self.psi[(y, k)])
            .sum()
    }
}

/// SVD of `Q(x, y) = p(x, y)/√(p(x)p(y))`; `σ_k = s_k²`, `φ_k = u_k/√p(x)`,
/// `ψ_k = v_k/√p(y)`. Signs are fixed so each φ_k has positive mean under
/// p(x) (first nonzero entry positive when the mean vanishes).
pub fn exact_decompose(joint: &JointTable) -> Result<ExactDecomposition> {
    let (px, py) = (joint.px(), joint.py());
    if px.iter().chain(&py).any(|&v| v <= 0.0) {
        return Err(bad("zero marginal"));
    }
    let mut q = Matrix::zeros(joint.n, joint.m);
    for x in 0..joint.n {
        for y in 0..joint.m {
            q[(x, y)] = joint.at(x, y) / (px[x] * py[y]).sqrt();
        }
    }
    let (u, s, v) = svd_rect(&q)?;
    let k = s.len();
    let mut phi = Matrix::zeros(joint.n, k);
    let mut psi = Matrix::zeros(joint.m, k);
    for c in 0..k {
        let mean: f64 = (0..joint.n).map(|x| px[x].sqrt() * u[(x, c)]).sum();
        let sign = if mean.abs() > 1e-12 {
            mean.signum()
        } else {
            (0..joint.n)
                .map(|x| u[(x, c)])
                .find(|v| v.abs() > 1e-12)
                .map_or(1.0, f64::signum)
        };
        for x in 0..joint.n {
            phi[(x, c)] = sign * u[(x, c)] / px[x].sqrt();
        }
        for y in 0..joint.m {
            psi[(y, c)] = sign * v[(y, c)] / py[y].sqrt();
        }
    }
    Ok(ExactDecomposition {
        sigma: s.iter().map(|x| x * x).collect(),
        phi,
        psi,
    })
}

/// Top-down hierarchy over finite alphabets: `top` is the law of the last
/// level and `kernels[s]` is `p(x_s | x_{s+1})` with rows indexed by the
/// upper symbol.
#[derive(Clone, Debug)]
pub struct Chain {
    /// Alphabet sizes, bottom level first.
    pub alphabets: Vec<usize>,
    pub top: Vec<f64>,
    pub kernels: Vec<Matrix>,
}

/// Kernel where each upper symbol `y` contains the listed lower
/// components and the conditional is their empirical distribution.
pub fn component_kernel(components: &[Vec<usize>], lower_alphabet: usize) -> Result<Matrix> {
    let mut k = Matrix::zeros(components.len(), lower_alphabet);
    for (y, comps) in components.iter().enumerate() {
        if comps.is_empty() {
            return Err(bad(format!("upper symbol {y} has no components")));
        }
        for &x in comps {
            if x >= lower_alphabet {
                return Err(bad(format!("component {x} outside alphabet of {lower_alphabet}")));
            }
            k[(y, x)] += 1.0 / comps.len() as f64;
        }
    }
    Ok(k)
}

/// Random chain whose kernels each draw `per_symbol` components uniformly
/// for every upper symbol; the top law is a random positive vector.
pub fn random_component_chain(alphabets: &[usize], per_symbol: usize, rng: &mut Rng) -> Result<Chain> {
    if alphabets.len() < 2 || alphabets.contains(&0) || per_symbol == 0 {
        return Err(bad("a chain needs at least two non-empty levels and one component per symbol"));
    }
    let mut kernels = Vec::new();
    for s in 0..alphabets.len() - 1 {
        let comps: Vec<Vec<usize>> = (0..alphabets[s + 1])
            .map(|_| (0..per_symbol).map(|_| rng.random_range(0..alphabets[s])).collect())
            .collect();
        kernels.push(component_kernel(&comps, alphabets[s])?);
    }
    let raw: Vec<f64> = (0..*alphabets.last().unwrap())
        .map(|_| 0.1 + rng.random::<f64>())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(Chain {
        alphabets: alphabets.to_vec(),
        top: raw.iter().map(|v| v / z).collect(),
        kernels,
    })
}

/// Enumerated joint law of a chain, row-major with the bottom level as the
/// slowest index.
#[derive(Clone, Debug)]
pub struct ChainJoint {
    pub alphabets: Vec<usize>,
    pub p: Vec<f64>,
}

impl Chain {
    fn validate(&self) -> Result<()> {
        let s = self.alphabets.len();
        if s < 2 || self.kernels.len() != s - 1 || self.top.len() != self.alphabets[s - 1] {
            return Err(bad("chain levels, kernels and top law disagree"));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if k.rows() != self.alphabets[i + 1] || k.cols() != self.alphabets[i] {
                return Err(bad(format!("kernel {i} has shape {}x{}", k.rows(), k.cols())));
            }
            for r in 0..k.rows() {
                let row = k.row(r);
                if row.iter().any(|v| *v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(bad(format!("kernel {i} row {r} is not a distribution")));
                }
            }
        }
        let t: f64 = self.top.iter().sum();
        if self.top.iter().any(|v| *v < 0.0) || (t - 1.0).abs() > 1e-12 {
            return Err(bad("top law is not a distribution"));
        }
        Ok(())
    }
}

pub fn chain_joint(chain: &Chain) -> Result<ChainJoint> {
    chain.validate()?;
    let total = chain
        .alphabets
        .iter()
        .try_fold(1usize, |acc, &a| acc.checked_mul(a).filter(|&t| t <= MAX_STATES))
        .ok_or_else(|| bad(format!("chain exceeds {MAX_STATES} joint states")))?;
    let s_count = chain.alphabets.len();
    let mut p = vec![0.0; total];
    let mut idx = vec![0usize; s_count];
    for (flat, slot) in p.iter_mut().enumerate() {
        let mut r = flat;
        for s in (0..s_count).rev() {
            idx[s] = r % chain.alphabets[s];
            r /= chain.alphabets[s];
        }
        let mut v = chain.top[idx[s_count - 1]];
        for s in 0..s_count - 1 {
            v *= chain.kernels[s][(idx[s + 1], idx[s])];
        }
        *slot = v;
    }
    Ok(ChainJoint {
        alphabets: chain.alphabets.clone(),
        p,
    })
}

impl ChainJoint {
    fn for_each(&self, mut f: impl FnMut(&[usize], f64)) {
        let mut idx = vec![0usize; self.alphabets.len()];
        for &v in &self.p {
            f(&idx, v);
            for s in (0..idx.len()).rev() {
                idx[s] += 1;
                if idx[s] < self.alphabets[s] {
                    break;
                }
                idx[s] = 0;
            }
        }
    }

    pub fn marginal(&self, s: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.alphabets[s]];
        self.for_each(|i, v| m[i[s]] += v);
        m
    }

    /// Joint of levels `s` and `s + 1`.
    pub fn pair(&self, s: usize) -> Matrix {
        let mut m = Matrix::zeros(self.alphabets[s], self.alphabets[s + 1]);
        self.for_each(|i, v| m[(i[s], i[s + 1])] += v);
        m
    }

    /// `p(x_s | x_{s+1})` recovered from the enumeration; rows of upper
    /// symbols with no mass are left at zero.
    pub fn conditional(&self, s: usize) -> Matrix {
        let pair = self.pair(s);
        let upper = self.marginal(s + 1);
        let mut k = Matrix::zeros(self.alphabets[s + 1], self.alphabets[s]);
        for y in 0..upper.len() {
            if upper[y] > 0.0 {
                for x in 0..self.alphabets[s] {
                    k[(y, x)] = pair[(x, y)] / upper[y];
                }
            }
        }
        k
    }
}

/// Largest gap over the support between the global log ratio and the sum of
/// neighbouring-level log ratios.
pub fn telescoping_check(joint: &ChainJoint) -> Result<f64> {
    let s_count = joint.alphabets.len();
    let marg: Vec<Vec<f64>> = (0..s_count).map(|s| joint.marginal(s)).collect();
    let pairs: Vec<Matrix> = (0..s_count - 1).map(|s| joint.pair(s)).collect();
    let mut worst: f64 = 0.0;
    let mut failure = None;
    joint.for_each(|i, v| {
        if v <= 0.0 || failure.is_some() {
            return;
        }
        let prod: f64 = (0..s_count).map(|s| marg[s][i[s]]).product();
        let mut local = 0.0;
        for s in 0..s_count - 1 {
            let pj = pairs[s][(i[s], i[s + 1])];
            let d = marg[s][i[s]] * marg[s + 1][i[s + 1]];
            if pj <= 0.0 || d <= 0.0 {
                failure = Some(format!("zero-probability pair at level {s} on the support"));
                return;
            }
            local += (pj / d).ln();
        }
        worst = worst.max(((v / prod).ln() - local).abs());
    });
    match failure {
        Some(m) => Err(Error::Numerical(m)),
        None => Ok(worst),
    }
}

/// `N×n×1×1` unit-coordinate images for the given symbols.
pub fn onehot_embed(symbols: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; symbols.len() * n];
    for (i, &s) in symbols.iter().enumerate() {
        if s >= n {
            return Err(bad(format!("symbol {s} outside alphabet of {n}")));
        }
        data[i * n + s] = 1.0;
    }
    Tensor::new(vec![symbols.len(), n, 1, 1], data)
}

/// Basis tables as CSV: `symbol,k1,k2,…`.
pub fn basis_csv(basis: &Matrix) -> String {
    let mut out = String::from("symbol");
    for k in 0..basis.cols() {
        out.push_str(&format!(",k{}", k + 1));
    }
    out.push('\n');
    for x in 0..basis.rows() {
        out.push_str(&x.to_string());
        for k in 0..basis.cols() {
            out.push_str(&format!(",{:.16e}", basis[(x, k)]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn closed_form_two_by_two() {
        let t = JointTable::from_rows(&[&[0.4, 0.1], &[0.1, 0.4]]).unwrap();
        let d = exact_decompose(&t).unwrap();
        assert!(close(&d.sigma, &[1.0, 0.36], 1e-12));
        // φ_1 ≡ 1; φ_2 = ±(1, −1) with ψ_2 of the same pattern.
        assert!(close(&d.phi.col(0), &[1.0, 1.0], 1e-12));
        let (a, b) = (d.phi.col(1), d.psi.col(1));
        assert!(close(&[a[0].abs(), a[1].abs()], &[1.0, 1.0], 1e-12) && a[0] * a[1] < 0.0);
        assert!((a[0] * b[0] - 1.0).abs() < 1e-12);
        for x in 0..2 {
            for y in 0..2 {
                assert!((d.reconstruct(x, y) - t.ratio(x, y)).abs() < 1e-12);
            }
        }
        assert!((t.ratio(0, 0) - 1.6).abs() < 1e-12 && (t.ratio(0, 1) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn independent_and_identity() {
        let t = JointTable::new(3, 3, vec![1.0 / 9.0; 9]).unwrap();
        assert!(close(&exact_decompose(&t).unwrap().sigma, &[1.0, 0.0, 0.0], 1e-12));
        let mut p = vec![0.0; 16];
        for i in 0..4 {
            p[i * 4 + i] = 0.25;
        }
        let t = JointTable::new(4, 4, p).unwrap();
        assert!(close(&exact_decompose(&t).unwrap().sigma, &[1.0; 4], 1e-12));
    }

    #[test]
    fn table_validation() {
        assert!(JointTable::new(2, 1, vec![0.5, 0.6]).is_err());
        assert!(JointTable::new(2, 1, vec![1.5, -0.5]).is_err());
        assert!(JointTable::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(JointTable::new(2, 2, vec![0.25; 3]).is_err());
    }

    #[test]
    fn csv_parsing() {
        let t = JointTable::parse_csv("x,y,probability\n0,0,0.4\n0,1,0.1\n1,0,0.1\n1,1,0.4\n").unwrap();
        assert_eq!(t, JointTable::from_rows(&[&[0.4, 0.1], &[0.1, 0.4]]).unwrap());
        let t = JointTable::parse_csv("0,0,0.5\n1,1,0.5").unwrap();
        assert_eq!(t.p, vec![0.5, 0.0, 0.0, 0.5]);
        assert!(JointTable::parse_csv("0,0,0.5\n0,0,0.5").is_err());
        assert!(JointTable::parse_csv("0,0,0.5\n1,1,-0.5\n2,2,1.0").is_err());
        assert!(JointTable::parse_csv("0,0\n").is_err());
        assert!(JointTable::parse_csv("").is_err());
    }

    #[test]
    fn chains() {
        // Copy kernel: joint on the diagonal.
        let copy = component_kernel(&[vec![0], vec![1], vec![2]], 3).unwrap();
        let chain = Chain {
            alphabets: vec![3, 3],
            top: vec![0.2, 0.3, 0.5],
            kernels: vec![copy],
        };
        let j = chain_joint(&chain).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert_eq!(j.p[x * 3 + y] > 0.0, x == y);
            }
        }
        assert!(telescoping_check(&j).unwrap() <= 1e-14);
        // Components with repeats: masses in multiples of 1/L.
        let k = component_kernel(&[vec![0, 0, 1, 2], vec![2, 2, 2, 2]], 3).unwrap();
        for v in k.data() {
            assert!((v * 4.0 - (v * 4.0).round()).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_reproduces_kernels() {
        let mut rng = seeded(11);
        let chain = random_component_chain(&[3, 4, 5], 3, &mut rng).unwrap();
        let j = chain_joint(&chain).unwrap();
        assert!((j.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in 0..2 {
            let top_mass = j.marginal(s + 1);
            let rec = j.conditional(s);
            for y in 0..chain.alphabets[s + 1] {
                if top_mass[y] > 0.0 {
                    for x in 0..chain.alphabets[s] {
                        assert!((rec[(y, x)] - chain.kernels[s][(y, x)]).abs() <= 1e-12);
                    }
                }
            }
        }
        assert!(telescoping_check(&j).unwrap() <= 1e-10);
    }

    #[test]
    fn state_cap() {
        let chain = Chain {
            alphabets: vec![1000, 1001],
            top: vec![1.0 / 1001.0; 1001],
            kernels: vec![Matrix::zeros(1001, 1000)],
        };
        assert!(chain_joint(&chain).is_err());
    }

    #[test]
    fn independent_chain_has_zero_logs() {
        let chain = Chain {
            alphabets: vec![2, 3],
            top: vec![0.2, 0.3, 0.5],
            kernels: vec![Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()],
        };
        let j = chain_joint(&chain).unwrap();
        assert_eq!(telescoping_check(&j).unwrap(), 0.0);
    }

    #[test]
    fn onehot() {
        let t = onehot_embed(&[0, 2, 1], 3).unwrap();
        assert_eq!(t.shape(), &[3, 3, 1, 1]);
        assert_eq!(&t.data()[..3], &[1.0, 0.0, 0.0]);
        for (i, s) in [0, 2, 1].iter().enumerate() {
            let row = &t.data()[i * 3..i * 3 + 3];
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, *s);
        }
        assert!(onehot_embed(&[3], 3).is_err());
    }

    #[test]
    fn sampling_frequencies() {
        let t = JointTable::from_rows(&[&[0.4, 0.1], &[0.1, 0.4]]).unwrap();
        let s = t.sample(20_000, &mut seeded(3));
        let diag = s.iter().filter(|(x, y)| x == y).count() as f64 / 20_000.0;
        assert!((diag - 0.8).abs() < 4.0 * (0.8f64 * 0.2 / 20_000.0).sqrt());
        let xs: Vec<usize> = s.iter().map(|p| p.0).collect();
        let emb = onehot_embed(&xs, 2).unwrap();
        let mean0 = emb.data().chunks(2).map(|c| c[0]).sum::<f64>() / 20_000.0;
        assert!((mean0 - 0.5).abs() < 4.0 * (0.25f64 / 20_000.0).sqrt());
    }

    #[test]
    fn basis_table_csv() {
        let s = basis_csv(&Matrix::identity(2));
        assert!(s.starts_with("symbol,k1,k2\n0,1.0000000000000000e0,0.0000000000000000e0\n"));
    }
}
