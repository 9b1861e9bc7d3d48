//! Evaluation-batch statistics, spectra and response maps for a trained
//! network.

use hfmca::costs::{stats_external, stats_internal, CorrStats};
use hfmca::hierarchy::{sample_views, LabeledDataset};
use hfmca::linalg::Matrix;
use hfmca::net::{geometry, Network};
use hfmca::spectrum::{extract_spectrum, SpectrumResult};
use hfmca::telescope::{local_ratio_field, propagate, ResponseMap};
use hfmca::Tensor;

use crate::config::RunConfig;
use crate::CliError;

/// Step index of the augmentation stream reserved for evaluation views, so
/// they never coincide with a training draw.
pub const EVAL_STEP: u64 = u64::MAX;

pub struct LayerStats {
    /// 1-based: pair `s` joins Z_s and Z_{s+1}; the external cost is `S`.
    pub layer: usize,
    pub label: String,
    pub stats: CorrStats,
}

/// The first `count` images of `data` (all of them if fewer).
pub fn eval_images(data: &LabeledDataset, count: usize) -> Result<Tensor, CliError> {
    let idx: Vec<usize> = (0..count.min(data.len())).collect();
    if idx.len() < 2 {
        return Err(CliError::Config("evaluation needs at least two images".into()));
    }
    Ok(data.images.select_batch(&idx)?)
}

fn to_matrix(t: &Tensor) -> Result<Matrix, CliError> {
    let (n, k, h, w) = t.dims4()?;
    if h * w != 1 {
        return Err(CliError::Config(format!("expected 1x1 features, got {h}x{w}")));
    }
    Ok(Matrix::from_vec(n, k, t.data().to_vec()).map_err(hfmca::Error::from)?)
}

fn wanted(layer: Option<usize>, s: usize) -> bool {
    layer.is_none_or(|l| l == s)
}

/// Statistics of every cost the network defines, on `images`.
pub fn layer_stats(net: &Network, cfg: &RunConfig, images: &Tensor, layer: Option<usize>) -> Result<Vec<LayerStats>, CliError> {
    let centered = cfg.train.center_features;
    let scales = net.spec().scales();
    let mut out = Vec::new();
    if (1..scales).any(|s| wanted(layer, s)) {
        let (z, lower) = net.eval_maps(images, cfg.seed)?;
        for p in 0..scales - 1 {
            if wanted(layer, p + 1) {
                out.push(LayerStats {
                    layer: p + 1,
                    label: format!("internal_{}", p + 1),
                    stats: stats_internal(&lower[p], &z[p + 1], centered)?,
                });
            }
        }
    }
    if let Some(head) = net.spec().head.as_ref().filter(|_| wanted(layer, scales)) {
        let (n, c, h, w) = images.dims4()?;
        let mut per_view: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n); head.views];
        for i in 0..n {
            let x = images.select_batch(&[i])?.reshape(vec![c, h, w])?;
            let g = sample_views(&x, &cfg.augment, head.views, cfg.seed, i, EVAL_STEP)?;
            for (v, img) in g.views.into_iter().enumerate() {
                per_view[v].push(img);
            }
        }
        let views = per_view
            .iter()
            .map(|v| Tensor::stack_batch(v))
            .collect::<hfmca::Result<Vec<_>>>()?;
        let (group, outs) = net.eval_external(&views, cfg.seed)?;
        let view_m = outs.iter().map(to_matrix).collect::<Result<Vec<_>, _>>()?;
        out.push(LayerStats {
            layer: scales,
            label: "external".into(),
            stats: stats_external(&view_m, &to_matrix(&group)?, centered)?,
        });
    }
    if out.is_empty() {
        return Err(CliError::Config(format!(
            "layer {} does not exist; valid layers are 1..={}",
            layer.unwrap_or(0),
            if net.spec().head.is_some() { scales } else { scales - 1 }
        )));
    }
    Ok(out)
}

pub fn spectra(net: &Network, cfg: &RunConfig, images: &Tensor, layer: Option<usize>) -> Result<Vec<(String, SpectrumResult)>, CliError> {
    layer_stats(net, cfg, images, layer)?
        .into_iter()
        .map(|l| Ok((l.label, extract_spectrum(&l.stats, cfg.analysis.ridge, l.layer)?)))
        .collect()
}

/// Scale shown when no layer is requested: the output of the third block,
/// or the top scale of shallower networks.
pub fn default_map_layer(scales: usize) -> usize {
    scales.min(3)
}

/// Response maps of image `x` (`1×C×H×W`) for scales S..1, using spectra
/// estimated on `images`.
pub fn response_maps(net: &Network, cfg: &RunConfig, images: &Tensor, x: &Tensor, source: usize) -> Result<Vec<ResponseMap>, CliError> {
    let (_, _, h, w) = x.dims4()?;
    let geom = geometry(net.spec(), (h, w))?;
    let pairs = net.spec().scales() - 1;
    let stats = if pairs == 0 {
        Vec::new()
    } else {
        let (z, lower) = net.eval_maps(images, cfg.seed)?;
        (0..pairs)
            .map(|p| stats_internal(&lower[p], &z[p + 1], cfg.train.center_features))
            .collect::<hfmca::Result<Vec<_>>>()?
    };
    let (z, lower) = net.eval_maps(x, cfg.seed)?;
    let mut fields = Vec::with_capacity(pairs);
    for (p, s) in stats.iter().enumerate() {
        let spec = extract_spectrum(s, cfg.analysis.ridge, p + 1)?;
        fields.push(local_ratio_field(
            &lower[p],
            &z[p + 1],
            &spec,
            &geom.pairs[p],
            false,
        )?);
    }
    Ok(propagate(&fields, &geom, source)?)
}
