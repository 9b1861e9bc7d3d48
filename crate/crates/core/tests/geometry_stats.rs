//! Brute-force transcriptions of the window statistics and the scale
//! geometry.

use hfmca::costs::stats_internal;
use hfmca::linalg::Matrix;
use hfmca::net::{geometry, Direction, Network, NetworkSpec, PairGeometry};
use hfmca::rng::seeded;
use hfmca::Tensor;
use rand::Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn at(t: &Tensor, n: usize, c: usize, i: usize, j: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]
}

/// Literal sum over images, upper positions and window elements.
fn triple_loop(lower: &Tensor, upper: &Tensor, centered: bool) -> (Matrix, Matrix, Matrix) {
    let (n, k, h, w) = lower.dims4().unwrap();
    let (_, kp, ho, wo) = upper.dims4().unwrap();
    let (dm, dn) = (h - ho + 1, w - wo + 1);
    let mut terms: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let psi: Vec<f64> = (0..kp).map(|c| at(upper, b, c, i, j)).collect();
                for a in 0..dm {
                    for d in 0..dn {
                        let phi: Vec<f64> = (0..k).map(|c| at(lower, b, c, i + a, j + d)).collect();
                        terms.push((phi, psi.clone()));
                    }
                }
            }
        }
    }
    let m = terms.len() as f64;
    let mut mu_f = vec![0.0; k];
    let mut mu_g = vec![0.0; kp];
    if centered {
        for (f, g) in &terms {
            for c in 0..k {
                mu_f[c] += f[c] / m;
            }
            for c in 0..kp {
                mu_g[c] += g[c] / m;
            }
        }
    }
    let mut rf = Matrix::zeros(k, k);
    let mut rg = Matrix::zeros(kp, kp);
    let mut p = Matrix::zeros(k, kp);
    for (f, g) in &terms {
        for a in 0..k {
            for b in 0..k {
                rf[(a, b)] += (f[a] - mu_f[a]) * (f[b] - mu_f[b]) / m;
            }
            for b in 0..kp {
                p[(a, b)] += (f[a] - mu_f[a]) * (g[b] - mu_g[b]) / m;
            }
        }
        for a in 0..kp {
            for b in 0..kp {
                rg[(a, b)] += (g[a] - mu_g[a]) * (g[b] - mu_g[b]) / m;
            }
        }
    }
    (rf, rg, p)
}

#[test]
fn internal_stats_equal_the_triple_loop_exhaustively() {
    let mut rng = seeded(2024);
    let mut cases = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for dm in 1..=3usize.min(h) {
                for dn in 1..=3usize.min(w) {
                    for k in 1..=4 {
                        let kp = 1 + (k + h) % 4;
                        let lower = random(&[2, k, h, w], &mut rng);
                        let upper = random(&[2, kp, h - dm + 1, w - dn + 1], &mut rng);
                        for centered in [false, true] {
                            let s = stats_internal(&lower, &upper, centered).unwrap();
                            let (rf, rg, p) = triple_loop(&lower, &upper, centered);
                            let worst = s
                                .r_phi
                                .max_abs_diff(&rf)
                                .max(s.r_psi.max_abs_diff(&rg))
                                .max(s.p_cross.max_abs_diff(&p));
                            assert!(
                                worst <= 1e-12,
                                "{h}x{w} window {dm}x{dn} K={k}/{kp} centered={centered}: {worst:e}"
                            );
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 500);
}

fn symmetric(g: &PairGeometry) {
    for a in 0..g.upper_dims.0 {
        for b in 0..g.upper_dims.1 {
            let down = g.window_map(a, b, Direction::Down).unwrap();
            for i in 0..g.lower_dims.0 {
                for j in 0..g.lower_dims.1 {
                    let up = g.window_map(i, j, Direction::Up).unwrap();
                    assert_eq!(down.contains(i, j), up.contains(a, b), "{g:?} ({i},{j}) vs ({a},{b})");
                }
            }
        }
    }
}

#[test]
fn window_membership_is_symmetric() {
    for dims in [(8, 8), (10, 12), (12, 12)] {
        let spec = NetworkSpec::desk(3, 2, 2, 0, None);
        for pair in &geometry(&spec, dims).unwrap().pairs {
            symmetric(pair);
        }
    }
    for (lh, lw, dm, dn) in [(5, 5, 1, 1), (6, 4, 3, 2), (4, 6, 4, 1)] {
        symmetric(&PairGeometry {
            block: 1,
            lower_dims: (lh, lw),
            upper_dims: (lh - dm + 1, lw - dn + 1),
            window: (dm, dn),
            pool_before: 1,
            pad: 0,
        });
    }
}

/// Input pixels whose change moves output `(s, i, j)`, found by perturbing
/// one pixel at a time in eval mode.
fn influence(net: &Network, x: &Tensor, scale: usize, i: usize, j: usize) -> Vec<(usize, usize)> {
    let base = net.eval_features(x, 1).unwrap();
    let (_, c, h, w) = x.dims4().unwrap();
    let (_, k, hs, ws) = base[scale].dims4().unwrap();
    let mut hits = Vec::new();
    for pi in 0..h {
        for pj in 0..w {
            let mut y = x.clone();
            for ch in 0..c {
                y.data_mut()[(ch * h + pi) * w + pj] += 0.7;
            }
            let out = net.eval_features(&y, 1).unwrap();
            let moved = (0..k).any(|ch| {
                let idx = (ch * hs + i) * ws + j;
                (out[scale].data()[idx] - base[scale].data()[idx]).abs() > 1e-13
            });
            if moved {
                hits.push((pi, pj));
            }
        }
    }
    hits
}

#[test]
fn receptive_fields_match_perturbation() {
    let spec = NetworkSpec::desk(3, 4, 8, 0, None);
    let net = Network::new(spec.clone(), 3).unwrap();
    let dims = (24, 24);
    let geom = geometry(&spec, dims).unwrap();
    let mut rng = seeded(5);
    let x = random(&[1, 3, dims.0, dims.1], &mut rng);
    // Global pooling in the last block reaches every pixel; check the others.
    for s in 0..geom.scales.len() - 1 {
        let info = &geom.scales[s];
        let (ci, cj) = (info.dims.0 / 2, info.dims.1 / 2);
        let hits = influence(&net, &x, s, ci, cj);
        let rows = hits.iter().map(|p| p.0).max().unwrap() - hits.iter().map(|p| p.0).min().unwrap() + 1;
        let cols = hits.iter().map(|p| p.1).max().unwrap() - hits.iter().map(|p| p.1).min().unwrap() + 1;
        assert_eq!((rows, cols), info.receptive_field, "scale {}", s + 1);
        assert_eq!(hits.len(), rows * cols, "scale {}: influence region has holes", s + 1);
    }
}
