//! Block-structured convolutional network and its scale geometry.
//!
//! A block is `pad → noise → [conv → bn → act]* → pool`. The padded block
//! input is the lower feature map of a cost pair and the block output is the
//! upper one. Block 0 maps pixels and has no lower partner.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BatchStats, Mode, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side.
    pub kernel: usize,
    #[serde(default = "yes")]
    pub batchnorm: bool,
    #[serde(default)]
    pub activation: Option<Activation>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// Non-overlapping average pooling applied after the block output is
    /// recorded, i.e. between this block and the next.
    Window(usize),
    /// Spatial mean that is part of the block output.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    #[serde(default)]
    pub pre_pad: usize,
    #[serde(default)]
    pub n_noise: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub post_pool: Option<Pool>,
}

/// How the L view features of one group enter the external head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadLayout {
    /// Views laid out on a `rows×cols` spatial grid with K channels.
    Grid,
    /// Views concatenated along channels on a 1×1 map.
    Channels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub views: usize,
    pub layout: HeadLayout,
    pub block: BlockSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub k: usize,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
}

/// Grid shape for `views` cells: rows is the largest divisor ≤ √views.
pub fn grid_shape(views: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= views {
        if views.is_multiple_of(r) {
            rows = r;
        }
        r += 1;
    }
    (rows, views / rows)
}

fn sandwich(cin: usize, hidden: usize, k: usize, mid: usize) -> Vec<LayerSpec> {
    let layer = |i, o, kern, act| LayerSpec {
        in_channels: i,
        out_channels: o,
        kernel: kern,
        batchnorm: true,
        activation: Some(act),
    };
    vec![
        layer(cin, hidden, 1, Activation::Relu),
        layer(hidden, hidden, mid, Activation::Relu),
        layer(hidden, k, 1, Activation::Sigmoid),
    ]
}

impl NetworkSpec {
    /// Four-block desk topology: a 1×1 pixel block, then three
    /// 1×1/3×3/1×1 sandwiches with a 2×2 pool after the second block and a
    /// global average closing the last one. `views` adds a grid head.
    pub fn desk(in_channels: usize, k: usize, hidden: usize, n_noise: usize, views: Option<usize>) -> Self {
        let blocks = vec![
            BlockSpec {
                pre_pad: 0,
                n_noise,
                layers: sandwich(in_channels + n_noise, hidden, k, 1),
                post_pool: None,
            },
            BlockSpec {
                pre_pad: 1,
                n_noise,
                layers: sandwich(k + n_noise, hidden, k, 3),
                post_pool: Some(Pool::Window(2)),
            },
            BlockSpec {
                pre_pad: 1,
                n_noise,
                layers: sandwich(k + n_noise, hidden, k, 3),
                post_pool: None,
            },
            BlockSpec {
                pre_pad: 1,
                n_noise,
                layers: sandwich(k + n_noise, hidden, k, 3),
                post_pool: Some(Pool::Global),
            },
        ];
        let head = views.map(|l| {
            let (rows, cols) = grid_shape(l);
            let mut layers = sandwich(k + n_noise, hidden, k, 1);
            layers[1].kernel = rows.max(cols);
            let layout = if rows == cols { HeadLayout::Grid } else { HeadLayout::Channels };
            if layout == HeadLayout::Channels {
                layers = sandwich(l * k + n_noise, hidden, k, 1);
            }
            HeadSpec {
                views: l,
                layout,
                block: BlockSpec {
                    pre_pad: 0,
                    n_noise,
                    layers,
                    post_pool: None,
                },
            }
        });
        NetworkSpec {
            in_channels,
            k,
            blocks,
            head,
        }
    }

    /// [`NetworkSpec::desk`] with the reduction moved earlier: the third
    /// block ends in a `window`×`window` average pool and the last block is
    /// pointwise before its global average. On 8×8 inputs the top block sees
    /// a single position, which keeps more per-image variance in Z_S.
    pub fn desk_pooled(in_channels: usize, k: usize, hidden: usize, n_noise: usize, views: Option<usize>, window: usize) -> Self {
        let mut spec = Self::desk(in_channels, k, hidden, n_noise, views);
        spec.blocks[2].post_pool = Some(Pool::Window(window));
        spec.blocks[3].pre_pad = 0;
        spec.blocks[3].layers[1].kernel = 1;
        spec
    }

    /// Checks the channel chain of backbone and head.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Spec("network needs at least one block".into()));
        }
        if self.k == 0 {
            return Err(Error::Spec("feature width k must be positive".into()));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            let cin = if b == 0 { self.in_channels } else { self.k };
            check_block(block, cin, self.k, &format!("block {b}"))?;
            if let Some(Pool::Window(0)) = block.post_pool {
                return Err(Error::Spec(format!("block {b}: pool window must be positive")));
            }
        }
        if let Some(head) = &self.head {
            if head.views == 0 {
                return Err(Error::Spec("head needs at least one view".into()));
            }
            let cin = match head.layout {
                HeadLayout::Grid => self.k,
                HeadLayout::Channels => self.k * head.views,
            };
            check_block(&head.block, cin, self.k, "head")?;
            if head.block.post_pool == Some(Pool::Window(0)) {
                return Err(Error::Spec("head: pool window must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of scales Z_1..Z_S produced by the backbone.
    pub fn scales(&self) -> usize {
        self.blocks.len()
    }
}

fn check_block(block: &BlockSpec, cin: usize, k: usize, name: &str) -> Result<()> {
    let mut c = cin + block.n_noise;
    if block.layers.is_empty() {
        return Err(Error::Spec(format!("{name}: block has no layers")));
    }
    for (i, l) in block.layers.iter().enumerate() {
        if l.in_channels != c {
            return Err(Error::Spec(format!(
                "{name} layer {i}: expects {} input channels but receives {c}",
                l.in_channels
            )));
        }
        if l.kernel == 0 || l.out_channels == 0 {
            return Err(Error::Spec(format!("{name} layer {i}: zero kernel or width")));
        }
        c = l.out_channels;
    }
    if c != k {
        return Err(Error::Spec(format!("{name}: outputs {c} channels, feature width is {k}")));
    }
    Ok(())
}

/// Spatial facts about one scale Z_s.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleInfo {
    pub dims: (usize, usize),
    /// Receptive field in input pixels (rows, cols).
    pub receptive_field: (usize, usize),
    /// Input-pixel stride between neighbouring elements.
    pub jump: usize,
}

/// Geometry of the cost pair between block `block`'s padded input (lower) and
/// its output (upper).
#[derive(Clone, Debug, PartialEq)]
pub struct PairGeometry {
    pub block: usize,
    pub lower_dims: (usize, usize),
    pub upper_dims: (usize, usize),
    /// Lower window read by one upper element.
    pub window: (usize, usize),
    /// Pool factor applied to the previous scale before padding.
    pub pool_before: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Lower window read by an upper element.
    Down,
    /// Upper elements whose window covers a lower element.
    Up,
}

/// Inclusive index ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Window {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.rows.0..=self.rows.1).contains(&i) && (self.cols.0..=self.cols.1).contains(&j)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.rows.0..=self.rows.1).flat_map(move |i| (self.cols.0..=self.cols.1).map(move |j| (i, j)))
    }
}

impl PairGeometry {
    pub fn window_map(&self, i: usize, j: usize, direction: Direction) -> Result<Window> {
        let (dm, dn) = self.window;
        match direction {
            Direction::Down => {
                if i >= self.upper_dims.0 || j >= self.upper_dims.1 {
                    return Err(Error::InvalidArgument(format!(
                        "upper position ({i},{j}) outside {:?}",
                        self.upper_dims
                    )));
                }
                Ok(Window {
                    rows: (i, i + dm - 1),
                    cols: (j, j + dn - 1),
                })
            }
            Direction::Up => {
                if i >= self.lower_dims.0 || j >= self.lower_dims.1 {
                    return Err(Error::InvalidArgument(format!(
                        "lower position ({i},{j}) outside {:?}",
                        self.lower_dims
                    )));
                }
                Ok(Window {
                    rows: ((i + 1).saturating_sub(dm), i.min(self.upper_dims.0 - 1)),
                    cols: ((j + 1).saturating_sub(dn), j.min(self.upper_dims.1 - 1)),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub input_dims: (usize, usize),
    /// Z_1..Z_S.
    pub scales: Vec<ScaleInfo>,
    /// One pair per block after the first.
    pub pairs: Vec<PairGeometry>,
}

fn conv_dims(block: &BlockSpec, dims: (usize, usize), name: &str) -> Result<(usize, usize)> {
    let (mut h, mut w) = (dims.0 + 2 * block.pre_pad, dims.1 + 2 * block.pre_pad);
    for l in &block.layers {
        if l.kernel > h || l.kernel > w {
            return Err(Error::Spec(format!(
                "{name}: kernel {} does not fit a {h}x{w} map",
                l.kernel
            )));
        }
        h = h - l.kernel + 1;
        w = w - l.kernel + 1;
    }
    Ok((h, w))
}

/// Per-scale dims, windows and receptive fields for an input of `input_dims`.
pub fn geometry(spec: &NetworkSpec, input_dims: (usize, usize)) -> Result<Geometry> {
    spec.validate()?;
    let mut scales = Vec::new();
    let mut pairs = Vec::new();
    let mut dims = input_dims;
    let (mut rf, mut jump) = ((1usize, 1usize), 1usize);
    let mut pool_before = 1;
    for (b, block) in spec.blocks.iter().enumerate() {
        let name = format!("block {b}");
        let lower = (dims.0 + 2 * block.pre_pad, dims.1 + 2 * block.pre_pad);
        let mut out = conv_dims(block, dims, &name)?;
        for l in &block.layers {
            rf.0 += (l.kernel - 1) * jump;
            rf.1 += (l.kernel - 1) * jump;
        }
        if block.post_pool == Some(Pool::Global) {
            rf.0 += (out.0 - 1) * jump;
            rf.1 += (out.1 - 1) * jump;
            out = (1, 1);
        }
        if b > 0 {
            pairs.push(PairGeometry {
                block: b,
                lower_dims: lower,
                upper_dims: out,
                window: (lower.0 - out.0 + 1, lower.1 - out.1 + 1),
                pool_before,
                pad: block.pre_pad,
            });
        }
        scales.push(ScaleInfo {
            dims: out,
            receptive_field: rf,
            jump,
        });
        dims = out;
        pool_before = 1;
        if let Some(Pool::Window(k)) = block.post_pool {
            if !dims.0.is_multiple_of(k) || !dims.1.is_multiple_of(k) {
                return Err(Error::Spec(format!(
                    "{name}: {}x{} map not divisible by pool {k}",
                    dims.0, dims.1
                )));
            }
            rf.0 += (k - 1) * jump;
            rf.1 += (k - 1) * jump;
            jump *= k;
            dims = (dims.0 / k, dims.1 / k);
            pool_before = k;
        }
    }
    if let Some(head) = &spec.head {
        if dims != (1, 1) {
            return Err(Error::Spec(format!(
                "external head needs 1x1 backbone output, got {}x{}",
                dims.0, dims.1
            )));
        }
        let grid = match head.layout {
            HeadLayout::Grid => grid_shape(head.views),
            HeadLayout::Channels => (1, 1),
        };
        let mut out = conv_dims(&head.block, grid, "head")?;
        if head.block.post_pool == Some(Pool::Global) {
            out = (1, 1);
        }
        if out != (1, 1) {
            return Err(Error::Spec(format!(
                "head must reduce its {}x{} grid to 1x1, got {}x{}",
                grid.0, grid.1, out.0, out.1
            )));
        }
    }
    Ok(Geometry {
        input_dims,
        scales,
        pairs,
    })
}

#[derive(Clone, Debug)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    /// (scale, shift, running-stats index)
    bn: Option<(usize, usize, usize)>,
}

/// Running batch-norm statistics for one normalized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.9;

/// Where noise channels come from during a forward pass.
pub enum Noise<'a> {
    /// Drawn from a running stream (training).
    Random(&'a mut Rng),
    /// A pure function of (seed, block, sample index), so evaluation is
    /// deterministic per input.
    Fixed(u64),
}

impl Noise<'_> {
    fn tensor(&mut self, tag: u64, shape: [usize; 4]) -> Result<Tensor> {
        let [n, c, h, w] = shape;
        let per = c * h * w;
        let mut data = Vec::with_capacity(n * per);
        match self {
            Noise::Random(rng) => data.extend((0..n * per).map(|_| rng.random::<f64>())),
            Noise::Fixed(seed) => {
                for s in 0..n {
                    let mut r = substream(*seed, Stream::Noise, &[tag, s as u64]);
                    data.extend((0..per).map(|_| r.random::<f64>()));
                }
            }
        }
        Tensor::new(shape.to_vec(), data)
    }
}

/// Tape handles for every network parameter, in [`Network::params`] order.
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Captured feature maps of one backbone pass.
pub struct Features {
    /// Z_1..Z_S (block outputs).
    pub z: Vec<Var>,
    /// Padded block inputs for blocks 1..S-1, lower side of each pair.
    pub lower: Vec<Var>,
}

impl Features {
    pub fn output(&self) -> Var {
        *self.z.last().expect("at least one block")
    }

    /// (lower, upper) of pair `p`, which belongs to block `p + 1`.
    pub fn pair(&self, p: usize) -> (Var, Var) {
        (self.lower[p], self.z[p + 1])
    }
}

/// Collects train-mode batch statistics per normalized layer.
#[derive(Default)]
pub struct BnUpdates {
    stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    blocks: Vec<Vec<LayerSlots>>,
    head: Vec<LayerSlots>,
}

impl Network {
    /// Builds and initializes a network: He-uniform convolution kernels,
    /// zero biases, unit scale and zero shift for normalization.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut net = Network {
            spec: spec.clone(),
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            running_names: Vec::new(),
            blocks: Vec::new(),
            head: Vec::new(),
        };
        for (b, block) in spec.blocks.iter().enumerate() {
            let slots = net.alloc_block(block, &format!("b{b}"), seed);
            net.blocks.push(slots);
        }
        if let Some(head) = &spec.head {
            net.head = net.alloc_block(&head.block, "head", seed);
        }
        Ok(net)
    }

    fn alloc_block(&mut self, block: &BlockSpec, prefix: &str, seed: u64) -> Vec<LayerSlots> {
        let mut slots = Vec::new();
        for (i, l) in block.layers.iter().enumerate() {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let idx = self.params.len() as u64;
            let mut rng = substream(seed, Stream::Init, &[idx]);
            let n = l.out_channels * fan_in;
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let shape = vec![l.out_channels, l.in_channels, l.kernel, l.kernel];
            let weight = self.push_param(format!("{prefix}.l{i}.weight"), Tensor::new(shape, w).unwrap());
            let bias = self.push_param(format!("{prefix}.l{i}.bias"), Tensor::zeros(&[l.out_channels]));
            let bn = l.batchnorm.then(|| {
                let s = self.push_param(
                    format!("{prefix}.l{i}.bn_scale"),
                    Tensor::full(&[l.out_channels], 1.0),
                );
                let t = self.push_param(format!("{prefix}.l{i}.bn_shift"), Tensor::zeros(&[l.out_channels]));
                self.running.push(RunningStats {
                    mean: vec![0.0; l.out_channels],
                    var: vec![1.0; l.out_channels],
                });
                self.running_names.push(format!("{prefix}.l{i}"));
                (s, t, self.running.len() - 1)
            });
            slots.push(LayerSlots { weight, bias, bn });
        }
        slots
    }

    fn push_param(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn running_names(&self) -> &[String] {
        &self.running_names
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: &BlockSpec,
        slots: &[LayerSlots],
        tag: u64,
        x: Var,
        mode: Mode,
        noise: &mut Noise,
        bn: &mut BnUpdates,
    ) -> Result<(Var, Var)> {
        let lower = tape.pad2d(x, block.pre_pad)?;
        let mut h = lower;
        if block.n_noise > 0 {
            let (n, _, hh, ww) = tape.value(lower).dims4()?;
            let nt = noise.tensor(tag, [n, block.n_noise, hh, ww])?;
            let nv = tape.constant(nt)?;
            h = tape.concat_channels(&[h, nv])?;
        }
        for (l, s) in block.layers.iter().zip(slots) {
            h = tape.conv2d(h, bound.vars[s.weight], Some(bound.vars[s.bias]))?;
            if let Some((sc, sh, r)) = s.bn {
                let rs = &self.running[r];
                let (y, stats) = tape.batchnorm2d(
                    h,
                    bound.vars[sc],
                    bound.vars[sh],
                    mode,
                    (&rs.mean, &rs.var),
                )?;
                if let Some(st) = stats {
                    bn.stats.push((r, st));
                }
                h = y;
            }
            if let Some(act) = l.activation {
                h = tape.activation(h, act)?;
            }
        }
        if block.post_pool == Some(Pool::Global) {
            h = tape.spatial_mean(h)?;
        }
        Ok((lower, h))
    }

    /// Runs the backbone on an N×C×H×W batch and captures every scale.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
        noise: &mut Noise,
        bn: &mut BnUpdates,
    ) -> Result<Features> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                c
            ));
        }
        let mut z = Vec::new();
        let mut lower = Vec::new();
        let mut h = x;
        for (b, (block, slots)) in self.spec.blocks.iter().zip(&self.blocks).enumerate() {
            if let Some(Pool::Window(k)) = b.checked_sub(1).and_then(|p| self.spec.blocks[p].post_pool) {
                h = tape.avgpool2d(h, k)?;
            }
            let (lo, up) = self.run_block(tape, bound, block, slots, b as u64, h, mode, noise, bn)?;
            if b > 0 {
                lower.push(lo);
            }
            z.push(up);
            h = up;
        }
        Ok(Features { z, lower })
    }

    /// Feeds the L view features of each group (each `B×K×1×1`, view order)
    /// through the external head, returning `B×K×1×1`.
    pub fn forward_head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        views: &[Var],
        mode: Mode,
        noise: &mut Noise,
        bn: &mut BnUpdates,
    ) -> Result<Var> {
        let head = self
            .spec
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("network has no external head".into()))?;
        if views.len() != head.views {
            return Err(shape_err!("head expects {} views, got {}", head.views, views.len()));
        }
        let input = match head.layout {
            HeadLayout::Grid => {
                let (rows, cols) = grid_shape(head.views);
                tape.assemble_grid(views, rows, cols)?
            }
            HeadLayout::Channels => tape.concat_channels(views)?,
        };
        let tag = self.spec.blocks.len() as u64;
        let (_, out) = self.run_block(tape, bound, &head.block, &self.head, tag, input, mode, noise, bn)?;
        Ok(out)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, bn: BnUpdates) {
        for (r, st) in bn.stats {
            let rs = &mut self.running[r];
            for c in 0..rs.mean.len() {
                rs.mean[c] = BN_MOMENTUM * rs.mean[c] + (1.0 - BN_MOMENTUM) * st.mean[c];
                rs.var[c] = BN_MOMENTUM * rs.var[c] + (1.0 - BN_MOMENTUM) * st.var_unbiased[c];
            }
        }
    }

    /// Eval-mode backbone pass returning the feature maps as tensors.
    pub fn eval_features(&self, x: &Tensor, noise_seed: u64) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let f = self.forward(
            &mut tape,
            &bound,
            xv,
            Mode::Eval,
            &mut Noise::Fixed(noise_seed),
            &mut BnUpdates::default(),
        )?;
        Ok(f.z.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Eval-mode pass returning the block outputs and the padded lower maps
    /// of every pair.
    pub fn eval_maps(&self, x: &Tensor, noise_seed: u64) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let f = self.forward(
            &mut tape,
            &bound,
            xv,
            Mode::Eval,
            &mut Noise::Fixed(noise_seed),
            &mut BnUpdates::default(),
        )?;
        let read = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok((read(&f.z), read(&f.lower)))
    }

    /// Eval-mode head output for L view batches (each `B×C×H×W` image
    /// tensors in view order): the group features `B×K×1×1` and the backbone
    /// output of every view.
    pub fn eval_external(&self, views: &[Tensor], noise_seed: u64) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape)?;
        let mut outs = Vec::with_capacity(views.len());
        let mut noise = Noise::Fixed(noise_seed);
        let mut bn = BnUpdates::default();
        for x in views {
            let xv = tape.constant(x.clone())?;
            outs.push(self.forward(&mut tape, &bound, xv, Mode::Eval, &mut noise, &mut bn)?.output());
        }
        let g = self.forward_head(&mut tape, &bound, &outs, Mode::Eval, &mut noise, &mut bn)?;
        Ok((tape.value(g).clone(), outs.iter().map(|&v| tape.value(v).clone()).collect()))
    }

    /// Parameters as constants, for passes that need no gradient.
    pub fn bind_constants(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_block(cin: usize, cout: usize, bn: bool) -> NetworkSpec {
        NetworkSpec {
            in_channels: cin,
            k: cout,
            blocks: vec![BlockSpec {
                pre_pad: 0,
                n_noise: 0,
                layers: vec![LayerSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 1,
                    batchnorm: bn,
                    activation: None,
                }],
                post_pool: None,
            }],
            head: None,
        }
    }

    #[test]
    fn parameter_count() {
        assert_eq!(Network::new(one_block(3, 4, false), 0).unwrap().param_count(), 16);
        assert_eq!(Network::new(one_block(3, 4, true), 0).unwrap().param_count(), 24);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::desk(3, 8, 16, 4, Some(4));
        let a = Network::new(spec.clone(), 11).unwrap();
        let b = Network::new(spec.clone(), 11).unwrap();
        let c = Network::new(spec, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn channel_chain_is_checked() {
        let mut spec = one_block(3, 4, false);
        spec.blocks[0].layers[0].in_channels = 5;
        assert!(matches!(Network::new(spec, 0), Err(Error::Spec(_))));
        let mut spec = one_block(3, 4, false);
        spec.k = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pixel_block_keeps_dims() {
        let mut spec = NetworkSpec::desk(3, 64, 200, 20, None);
        spec.blocks.truncate(1);
        let net = Network::new(spec, 0).unwrap();
        let x = Tensor::full(&[2, 3, 5, 5], 0.5);
        let z = net.eval_features(&x, 0).unwrap();
        assert_eq!(z[0].shape(), &[2, 64, 5, 5]);
    }

    #[test]
    fn identity_block_copies_features() {
        let mut spec = one_block(2, 2, false);
        spec.blocks.push(spec.blocks[0].clone());
        let mut net = Network::new(spec, 0).unwrap();
        for b in 0..2 {
            net.params_mut()[2 * b] = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let z = net.eval_features(&x, 0).unwrap();
        assert_eq!(z[0], z[1]);
    }

    #[test]
    fn recorded_dims_with_pool() {
        let mut spec = NetworkSpec::desk(3, 4, 4, 0, None);
        spec.blocks.truncate(3);
        let g = geometry(&spec, (16, 16)).unwrap();
        let dims: Vec<_> = g.scales.iter().map(|s| s.dims).collect();
        assert_eq!(dims, vec![(16, 16), (16, 16), (8, 8)]);
        let net = Network::new(spec, 0).unwrap();
        let z = net.eval_features(&Tensor::full(&[2, 3, 16, 16], 0.2), 0).unwrap();
        let shapes: Vec<_> = z.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        assert_eq!(shapes, dims);
    }

    #[test]
    fn early_pool_variant() {
        let spec = NetworkSpec::desk_pooled(3, 4, 4, 2, Some(4), 4);
        spec.validate().unwrap();
        let g = geometry(&spec, (8, 8)).unwrap();
        let dims: Vec<_> = g.scales.iter().map(|s| s.dims).collect();
        assert_eq!(dims, vec![(8, 8), (8, 8), (4, 4), (1, 1)]);
        assert!(g.scales[3].receptive_field >= (8, 8));
    }

    #[test]
    fn receptive_fields() {
        let spec = NetworkSpec::desk(3, 4, 4, 0, None);
        let g = geometry(&spec, (16, 16)).unwrap();
        assert_eq!(g.scales[0].receptive_field, (1, 1));
        assert_eq!(g.scales[1].receptive_field, (3, 3));
        // 1×1, 3×3, pool 2, 3×3
        assert_eq!(g.scales[2].receptive_field, (8, 8));
        assert!(g.scales.windows(2).all(|w| w[0].receptive_field <= w[1].receptive_field));
    }

    #[test]
    fn head_grid_input() {
        let spec = NetworkSpec::desk(3, 8, 8, 0, Some(9));
        assert_eq!(grid_shape(9), (3, 3));
        assert_eq!(grid_shape(4), (2, 2));
        assert_eq!(grid_shape(6), (2, 3));
        let net = Network::new(spec, 1).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind_constants(&mut tape).unwrap();
        let views: Vec<Var> = (0..9)
            .map(|l| tape.constant(Tensor::full(&[2, 8, 1, 1], l as f64 / 9.0)).unwrap())
            .collect();
        let grid = tape.assemble_grid(&views, 3, 3).unwrap();
        assert_eq!(tape.value(grid).shape(), &[2, 8, 3, 3]);
        let out = net
            .forward_head(
                &mut tape,
                &bound,
                &views,
                Mode::Eval,
                &mut Noise::Fixed(0),
                &mut BnUpdates::default(),
            )
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 8, 1, 1]);
    }

    #[test]
    fn window_maps() {
        let pair = PairGeometry {
            block: 1,
            lower_dims: (5, 5),
            upper_dims: (3, 3),
            window: (3, 3),
            pool_before: 1,
            pad: 1,
        };
        let up = pair.window_map(2, 2, Direction::Up).unwrap();
        assert_eq!(up, Window { rows: (0, 2), cols: (0, 2) });
        let corner = pair.window_map(0, 0, Direction::Up).unwrap();
        assert_eq!(corner.iter().collect::<Vec<_>>(), vec![(0, 0)]);
        assert!(pair.window_map(5, 0, Direction::Up).is_err());
        assert!(pair.window_map(3, 0, Direction::Down).is_err());

        let unit = PairGeometry {
            window: (1, 1),
            lower_dims: (4, 4),
            upper_dims: (4, 4),
            ..pair
        };
        for d in [Direction::Up, Direction::Down] {
            let w = unit.window_map(2, 1, d).unwrap();
            assert_eq!(w.iter().collect::<Vec<_>>(), vec![(2, 1)]);
        }
    }

    #[test]
    fn eval_is_pure() {
        let spec = NetworkSpec::desk(3, 4, 6, 2, None);
        let net = Network::new(spec, 5).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.3);
        assert_eq!(net.eval_features(&x, 9).unwrap(), net.eval_features(&x, 9).unwrap());
    }
}
