//! Local density-ratio fields between neighbouring scales and their
//! top-down propagation into per-scale response maps.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::net::{Direction, Geometry, PairGeometry};
use crate::spectrum::{density_ratio, SpectrumResult};
use crate::tensor::Tensor;

/// `ρ̂(lower, upper)` for every lower position and each upper position whose
/// window covers it. Pairs outside the window map are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioField {
    pub geom: PairGeometry,
    /// Row-major over lower positions.
    entries: Vec<Vec<((usize, usize), f64)>>,
}

impl RatioField {
    pub fn from_fn(geom: &PairGeometry, mut f: impl FnMut((usize, usize), (usize, usize)) -> f64) -> Result<Self> {
        let (h, w) = geom.lower_dims;
        let mut entries = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let win = geom.window_map(i, j, Direction::Up)?;
                entries.push(win.iter().map(|u| (u, f((i, j), u))).collect());
            }
        }
        Ok(RatioField {
            geom: geom.clone(),
            entries,
        })
    }

    pub fn get(&self, lower: (usize, usize), upper: (usize, usize)) -> Option<f64> {
        let (h, w) = self.geom.lower_dims;
        if lower.0 >= h || lower.1 >= w {
            return None;
        }
        self.entries[lower.0 * w + lower.1]
            .iter()
            .find(|(u, _)| *u == upper)
            .map(|&(_, v)| v)
    }

    /// Upper positions covering `lower` with their ratios.
    pub fn row(&self, lower: (usize, usize)) -> &[((usize, usize), f64)] {
        &self.entries[lower.0 * self.geom.lower_dims.1 + lower.1]
    }

    pub fn scaled(&self, c: f64) -> RatioField {
        RatioField {
            geom: self.geom.clone(),
            entries: self
                .entries
                .iter()
                .map(|r| r.iter().map(|&(u, v)| (u, c * v)).collect())
                .collect(),
        }
    }
}

/// Rows of a single-image `1×K×H×W` map as an `H·W × K` matrix.
fn positions(map: &Tensor) -> Result<Matrix> {
    let (n, k, h, w) = map.dims4()?;
    if n != 1 {
        return Err(shape_err!("expected a single-image map, got batch {}", n));
    }
    let d = map.data();
    let mut m = Matrix::zeros(h * w, k);
    for c in 0..k {
        for p in 0..h * w {
            m[(p, c)] = d[c * h * w + p];
        }
    }
    Ok(m)
}

/// Evaluates the reconstructed ratio between each lower element (padded
/// block input) and every upper element whose window contains it.
pub fn local_ratio_field(
    lower: &Tensor,
    upper: &Tensor,
    spectrum: &SpectrumResult,
    geom: &PairGeometry,
    include_constant: bool,
) -> Result<RatioField> {
    let (_, _, h, w) = lower.dims4()?;
    let (_, _, ho, wo) = upper.dims4()?;
    if (h, w) != geom.lower_dims || (ho, wo) != geom.upper_dims {
        return Err(shape_err!(
            "maps {}x{} / {}x{} do not match pair geometry {:?} / {:?}",
            h,
            w,
            ho,
            wo,
            geom.lower_dims,
            geom.upper_dims
        ));
    }
    let phi = spectrum.normalize_phi(&positions(lower)?)?;
    let psi = spectrum.normalize_psi(&positions(upper)?)?;
    RatioField::from_fn(geom, |(i, j), (a, b)| {
        density_ratio(phi.row(i * w + j), psi.row(a * wo + b), &spectrum.sigma, include_constant)
    })
}

/// `ϱ_lower(i′,j′) = Σ_{(i,j) ∈ up-window} ϱ_upper(i,j)·ρ̂((i′,j′),(i,j))` on
/// the padded lower grid.
pub fn descend(field: &RatioField, upper: &[f64]) -> Result<Vec<f64>> {
    let (ho, wo) = field.geom.upper_dims;
    if upper.len() != ho * wo {
        return Err(shape_err!("upper response has {} cells, expected {}x{}", upper.len(), ho, wo));
    }
    Ok(field
        .entries
        .iter()
        .map(|row| row.iter().map(|&((a, b), r)| upper[a * wo + b] * r).sum())
        .collect())
}

/// Drops the padding border and undoes the pool in front of the block by
/// nearest-neighbour copy, giving a response on the previous scale's grid.
fn to_previous_scale(padded: &[f64], geom: &PairGeometry) -> (Vec<f64>, (usize, usize)) {
    let (hp, wp) = geom.lower_dims;
    let pad = geom.pad;
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let k = geom.pool_before;
    let (ho, wo) = (h * k, w * k);
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = padded[(i / k + pad) * wp + j / k + pad];
        }
    }
    (out, (ho, wo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    /// Scale index, 1-based (`S` is the top).
    pub layer: usize,
    pub dims: (usize, usize),
    pub grid: Vec<f64>,
    pub source: usize,
}

/// Top-down recursion from `ϱ_S ≡ 1`. `fields[p]` belongs to pair `p`
/// (scales `p+1` and `p+2`). Returns maps for scales `S, S−1, …, 1`.
pub fn propagate(fields: &[RatioField], geom: &Geometry, source: usize) -> Result<Vec<ResponseMap>> {
    let s_count = geom.scales.len();
    if fields.len() != geom.pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ratio fields for {} scale pairs",
            fields.len(),
            geom.pairs.len()
        )));
    }
    let top = geom.scales[s_count - 1].dims;
    let mut maps = vec![ResponseMap {
        layer: s_count,
        dims: top,
        grid: vec![1.0; top.0 * top.1],
        source,
    }];
    for (p, field) in fields.iter().enumerate().rev() {
        if field.geom != geom.pairs[p] {
            return Err(shape_err!("ratio field {} does not match the network geometry", p));
        }
        let padded = descend(field, &maps.last().unwrap().grid)?;
        let (grid, dims) = to_previous_scale(&padded, &field.geom);
        debug_assert_eq!(dims, geom.scales[p].dims);
        maps.push(ResponseMap {
            layer: p + 1,
            dims,
            grid,
            source,
        });
    }
    Ok(maps)
}

impl ResponseMap {
    /// 1st and 99th percentiles (nearest rank) used to window the rendering.
    pub fn window(&self) -> (f64, f64) {
        let mut v = self.grid.clone();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        (at(0.01), at(0.99))
    }

    /// Binary PGM (P5, maxval 255) after percentile windowing.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self.window();
        let (h, w) = self.dims;
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(self.grid.iter().map(|&v| {
            if hi > lo {
                (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                128
            }
        }));
        out
    }

    /// `i,j,value` with full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,value\n");
        let w = self.dims.1;
        for (p, v) in self.grid.iter().enumerate() {
            writeln!(out, "{},{},{v:.16e}", p / w, p % w).unwrap();
        }
        out
    }
}

fn field_entries(field: &RatioField) -> impl Iterator<Item = f64> + '_ {
    field.entries.iter().flatten().map(|&(_, v)| v)
}

/// Largest |ρ̂| of a field, for diagnostics.
pub fn max_abs_ratio(field: &RatioField) -> f64 {
    field_entries(field).fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{geometry, BlockSpec, LayerSpec, NetworkSpec};

    fn pair(lower: (usize, usize), upper: (usize, usize)) -> PairGeometry {
        PairGeometry {
            block: 1,
            lower_dims: lower,
            upper_dims: upper,
            window: (lower.0 - upper.0 + 1, lower.1 - upper.1 + 1),
            pool_before: 1,
            pad: 0,
        }
    }

    #[test]
    fn covering_counts() {
        let g = pair((6, 6), (4, 4));
        let f = RatioField::from_fn(&g, |_, _| 1.0).unwrap();
        let r = descend(&f, &[1.0; 16]).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[6 + 1], 4.0);
        assert_eq!(r[2 * 6 + 2], 9.0);
        assert_eq!(r[2 * 6 + 3], 9.0);
        assert_eq!(r[5 * 6 + 5], 1.0);
        assert_eq!(r.iter().sum::<f64>(), 16.0 * 9.0);
    }

    #[test]
    fn one_by_one_windows_are_diagonal() {
        let g = pair((3, 3), (3, 3));
        let f = RatioField::from_fn(&g, |l, u| if l == u { 2.0 } else { 5.0 }).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(f.row((i, j)), &[((i, j), 2.0)]);
            }
        }
        assert_eq!(f.get((0, 0), (0, 1)), None);
    }

    #[test]
    fn single_top_element_gives_its_ratio_row() {
        let g = pair((3, 2), (1, 1));
        let f = RatioField::from_fn(&g, |(i, j), _| (i * 2 + j) as f64 * 0.5).unwrap();
        let r = descend(&f, &[1.0]).unwrap();
        assert_eq!(r, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn hand_computed_two_layer() {
        // Scales: Z1 2x2 → Z2 1x1. ρ̂ on the 2x2/1x1 pair chosen by hand.
        let spec = NetworkSpec {
            in_channels: 1,
            k: 1,
            blocks: vec![
                BlockSpec {
                    pre_pad: 0,
                    n_noise: 0,
                    layers: vec![LayerSpec {
                        in_channels: 1,
                        out_channels: 1,
                        kernel: 1,
                        batchnorm: false,
                        activation: None,
                    }],
                    post_pool: None,
                },
                BlockSpec {
                    pre_pad: 0,
                    n_noise: 0,
                    layers: vec![LayerSpec {
                        in_channels: 1,
                        out_channels: 1,
                        kernel: 2,
                        batchnorm: false,
                        activation: None,
                    }],
                    post_pool: None,
                },
            ],
            head: None,
        };
        let geom = geometry(&spec, (2, 2)).unwrap();
        let table = [0.5, 1.5, -0.25, 2.0];
        let f = RatioField::from_fn(&geom.pairs[0], |(i, j), _| table[i * 2 + j]).unwrap();
        let maps = propagate(std::slice::from_ref(&f), &geom, 7).unwrap();
        assert_eq!(maps[0].grid, vec![1.0]);
        assert_eq!(maps[1].layer, 1);
        for (a, b) in maps[1].grid.iter().zip(table) {
            assert!((a - b).abs() < 1e-12);
        }
        // Linearity.
        let maps3 = propagate(&[f.scaled(3.0)], &geom, 7).unwrap();
        for (a, b) in maps3[1].grid.iter().zip(&maps[1].grid) {
            assert_eq!(*a, 3.0 * b);
        }
    }

    #[test]
    fn padding_and_pool_transfer() {
        let g = PairGeometry {
            block: 1,
            lower_dims: (4, 4),
            upper_dims: (2, 2),
            window: (3, 3),
            pool_before: 2,
            pad: 1,
        };
        let padded: Vec<f64> = (0..16).map(f64::from).collect();
        let (out, dims) = to_previous_scale(&padded, &g);
        assert_eq!(dims, (4, 4));
        assert_eq!(out[0], 5.0);
        assert_eq!(out[1], 5.0);
        assert_eq!(out[2], 6.0);
        assert_eq!(out[3 * 4 + 3], 10.0);
    }

    #[test]
    fn desk_propagation_dims() {
        let spec = NetworkSpec::desk(3, 4, 4, 0, None);
        let geom = geometry(&spec, (8, 8)).unwrap();
        let fields: Vec<_> = geom
            .pairs
            .iter()
            .map(|g| RatioField::from_fn(g, |_, _| 1.0).unwrap())
            .collect();
        let maps = propagate(&fields, &geom, 0).unwrap();
        assert_eq!(maps.len(), geom.scales.len());
        for m in &maps {
            assert_eq!(m.dims, geom.scales[m.layer - 1].dims);
            assert!(m.grid.iter().all(|v| v.is_finite()));
        }
        assert!(propagate(&fields[1..], &geom, 0).is_err());
    }

    #[test]
    fn rendering() {
        let m = ResponseMap {
            layer: 1,
            dims: (2, 3),
            grid: vec![0.0, 1.0, 2.0, 3.0, 4.0, 100.0],
            source: 0,
        };
        let pgm = m.to_pgm();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 6);
        assert_eq!(pgm[header.len()], 0);
        assert_eq!(pgm[header.len() + 5], 255);
        let csv = m.to_csv();
        assert!(csv.starts_with("i,j,value\n0,0,"));
        assert_eq!(csv.lines().count(), 7);
        let flat = ResponseMap {
            grid: vec![1.0; 6],
            ..m
        };
        assert!(flat.to_pgm()[header.len()..].iter().all(|&b| b == 128));
    }
}
