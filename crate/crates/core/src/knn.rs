//! Nearest-neighbour evaluation of frozen features.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::Network;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 5;

/// Majority vote over the `k` nearest training rows (Euclidean). Distance
/// ties go to the lower training index, vote ties to the smaller class.
pub fn knn_predict(train: &Matrix, labels: &[usize], test: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > train.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs between 1 and {} training samples",
            train.rows()
        )));
    }
    if labels.len() != train.rows() || train.cols() != test.cols() {
        return Err(Error::InvalidArgument("training features, labels and test width disagree".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(test.rows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    for t in 0..test.rows() {
        let q = test.row(t);
        dist.clear();
        for r in 0..train.rows() {
            let d: f64 = train.row(r).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d, r));
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, r) in &dist[..k] {
            votes[labels[r]] += 1;
        }
        let best = votes.iter().max().copied().unwrap_or(0);
        out.push(votes.iter().position(|&v| v == best).unwrap_or(0));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Eval-mode backbone output of every image, flattened per sample, in
/// chunks of `chunk` images.
pub fn embed(net: &Network, images: &Tensor, noise_seed: u64, chunk: usize) -> Result<Matrix> {
    let (n, _, _, _) = images.dims4()?;
    let chunk = chunk.max(1);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let x = images.select_batch(&idx)?;
        let out = net.eval_features(&x, noise_seed)?.pop().expect("at least one block");
        let per = out.len() / idx.len();
        rows.extend(out.data().chunks(per).map(<[f64]>::to_vec));
        start += chunk;
    }
    Ok(Matrix::from_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn self_classification() {
        let x = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]);
        let y = [0, 1, 2, 1];
        let p = knn_predict(&x, &y, &x, 1).unwrap();
        assert_eq!(accuracy(&p, &y), 1.0);
    }

    #[test]
    fn vote_tie_goes_to_smaller_class() {
        let x = m(&[&[1.0], &[-1.0], &[10.0]]);
        let p = knn_predict(&x, &[2, 1, 0], &m(&[&[0.0]]), 2).unwrap();
        assert_eq!(p, vec![1]);
    }

    #[test]
    fn k_bounds() {
        let x = m(&[&[1.0]]);
        assert!(knn_predict(&x, &[0], &x, 2).is_err());
        assert!(knn_predict(&x, &[0], &x, 0).is_err());
    }
}
