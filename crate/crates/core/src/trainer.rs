//! Training loops for the external (views vs. group) and internal
//! (neighbouring scales) costs, and for plain two-network pairs.

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::costs::{
    external_on_tape, internal_on_tape, logdet_cost, logdet_cost_on_tape, pairwise_on_tape, surrogate_on_tape,
    AcfFilterBank, CorrStats, Estimate, TapeStats,
};
use crate::error::{Error, Result};
use crate::hierarchy::{sample_same_class, sample_views, AugmentProtocol, LabeledDataset};
use crate::linalg::{min_eigenvalue, SymMatrix};
use crate::net::{BnUpdates, Bound, Network, Noise};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Views are augmentations of one image.
    SelfSupervised,
    /// Views are images of the same class.
    Supervised,
    /// Internal costs only; no head.
    Unsupervised,
}

/// How the cost gradient is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Inverses taken from the filter-bank estimates.
    Filtered,
    /// Differentiate the log-determinants directly.
    Exact,
}

/// Missing keys take their [`TrainConfig::desk`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub use_internal: bool,
    pub use_external: bool,
    /// View count L.
    pub views: usize,
    pub ridge: f64,
    pub beta: f64,
    pub internal_weight: f64,
    pub optimizer: OptimizerSpec,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Use covariances (second moments minus mean outer products) instead of
    /// raw second moments.
    pub center_features: bool,
    pub gradient: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(0)
    }
}

impl TrainConfig {
    /// Desk-scale self-supervised defaults.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::SelfSupervised,
            use_internal: false,
            use_external: true,
            views: 4,
            ridge: 0.1,
            beta: 0.0,
            internal_weight: 1.0,
            optimizer: OptimizerSpec::SGD_DEFAULT,
            batch: 32,
            steps: 1000,
            seed,
            center_features: false,
            gradient: GradientMode::Filtered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.mode == TrainMode::Unsupervised && self.use_external {
            return bad("unsupervised mode uses internal costs only; set use_external to false");
        }
        if !self.use_internal && !self.use_external {
            return bad("at least one of use_internal and use_external must be set");
        }
        if self.views == 0 {
            return bad("views must be at least 1");
        }
        if self.batch < 2 {
            return bad("batch must be at least 2");
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return bad("ridge must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if !self.internal_weight.is_finite() {
            return bad("internal_weight must be finite");
        }
        self.optimizer.validate()
    }
}

/// Costs of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub external: Option<f64>,
    /// One entry per neighbouring-scale pair.
    pub internal: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
    /// Smallest eigenvalue of the raw view-feature autocorrelation `E[f fᵀ]`,
    /// whether or not the cost centers its statistics.
    pub min_eig_views: Option<f64>,
}

/// Tape state after the forward pass of one step.
struct Pass {
    tape: Tape,
    bound: Bound,
    /// Internal pairs first, then the external cost if used.
    stats: Vec<TapeStats>,
    bn: BnUpdates,
    has_external: bool,
    /// `L·B × K` view features, when the external cost is used.
    view_rows: Option<Var>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub protocol: AugmentProtocol,
    pub network: Network,
    pub bank: AcfFilterBank,
    pub optimizer: Optimizer,
    /// Number of completed steps.
    pub step: u64,
}

fn grads_of(tape: &Tape, bound: &Bound, params: &[Tensor]) -> Vec<Vec<f64>> {
    bound
        .vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect()
}

fn norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl Trainer {
    pub fn new(config: TrainConfig, protocol: AugmentProtocol, network: Network) -> Result<Self> {
        config.validate()?;
        protocol.validate()?;
        if config.use_external {
            let head = network
                .spec()
                .head
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("external cost needs a network head".into()))?;
            if head.views != config.views {
                return Err(Error::InvalidArgument(format!(
                    "head takes {} views but the config asks for {}",
                    head.views, config.views
                )));
            }
        }
        let pairs = network.spec().scales() - 1;
        if config.use_internal && pairs == 0 {
            return Err(Error::InvalidArgument(
                "internal costs need at least two scales".into(),
            ));
        }
        let bank = AcfFilterBank::new(config.beta, pairs + 1)?;
        let optimizer = Optimizer::new(config.optimizer, network.params())?;
        Ok(Trainer {
            config,
            protocol,
            network,
            bank,
            optimizer,
            step: 0,
        })
    }

    fn pairs(&self) -> usize {
        self.network.spec().scales() - 1
    }

    /// Distinct sample indices for `step`.
    pub fn batch_indices(&self, n: usize, step: u64) -> Result<Vec<usize>> {
        let b = self.config.batch;
        if b > n {
            return Err(Error::InvalidArgument(format!("batch {b} larger than dataset of {n}")));
        }
        let mut rng = substream(self.config.seed, Stream::Batch, &[step]);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..b {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(b);
        Ok(idx)
    }

    /// Network input for `step`: view-major `L·B` images when the external
    /// cost is used, otherwise the plain batch.
    pub fn assemble_batch(&self, data: &LabeledDataset, step: u64) -> Result<Tensor> {
        let idx = self.batch_indices(data.len(), step)?;
        if !self.config.use_external {
            return data.images.select_batch(&idx);
        }
        let l = self.config.views;
        let mut groups = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let g = match self.config.mode {
                TrainMode::Supervised => {
                    let mut rng = substream(self.config.seed, Stream::Augment, &[step, b as u64]);
                    sample_same_class(data, i, l, &mut rng)?
                }
                _ => sample_views(&data.image(i)?, &self.protocol, l, self.config.seed, i, step)?,
            };
            groups.push(g.views);
        }
        let mut images = Vec::with_capacity(l * idx.len());
        for v in 0..l {
            for g in &groups {
                images.push(g[v].clone());
            }
        }
        Tensor::stack_batch(&images)
    }

    fn forward(&self, data: &LabeledDataset, step: u64, trainable: bool) -> Result<Pass> {
        let x = self.assemble_batch(data, step)?;
        let mut tape = Tape::new();
        let bound = if trainable {
            self.network.bind(&mut tape)?
        } else {
            self.network.bind_constants(&mut tape)?
        };
        let xv = tape.constant(x)?;
        let mut noise_rng = substream(self.config.seed, Stream::Noise, &[step]);
        let mut bn = BnUpdates::default();
        let mut noise = Noise::Random(&mut noise_rng);
        let feats = self.network.forward(&mut tape, &bound, xv, Mode::Train, &mut noise, &mut bn)?;
        let centered = self.config.center_features;
        let mut stats = Vec::new();
        let mut view_rows = None;
        if self.config.use_internal {
            for p in 0..self.pairs() {
                let (lo, up) = feats.pair(p);
                stats.push(internal_on_tape(&mut tape, lo, up, centered)?);
            }
        }
        if self.config.use_external {
            let l = self.config.views;
            let out = feats.output();
            let b = self.config.batch;
            let views: Vec<Var> = (0..l)
                .map(|v| tape.slice_batch(out, v * b, b))
                .collect::<Result<_>>()?;
            let group = self
                .network
                .forward_head(&mut tape, &bound, &views, Mode::Train, &mut noise, &mut bn)?;
            let vrows = tape.to_rows(out)?;
            let grows = tape.to_rows(group)?;
            if tape.value(vrows).shape()[0] != l * b {
                return Err(Error::Spec("external cost needs a 1x1 backbone output".into()));
            }
            stats.push(external_on_tape(&mut tape, vrows, grows, l, centered)?);
            view_rows = Some(vrows);
        }
        Ok(Pass {
            tape,
            bound,
            stats,
            bn,
            has_external: self.config.use_external,
            view_rows,
        })
    }

    fn weights(&self, pass: &Pass) -> Vec<f64> {
        let n_int = pass.stats.len() - usize::from(pass.has_external);
        let mut w = vec![self.config.internal_weight; n_int];
        if pass.has_external {
            w.push(1.0);
        }
        w
    }

    fn costs(&self, pass: &Pass) -> Result<(Vec<CorrStats>, Vec<f64>)> {
        let stats: Vec<CorrStats> = pass
            .stats
            .iter()
            .map(|s| s.read(&pass.tape))
            .collect::<Result<_>>()?;
        let costs = stats
            .iter()
            .map(|s| logdet_cost(s, self.config.ridge))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = costs.iter().find(|c| !c.is_finite()) {
            return Err(Error::Numerical(format!("cost became {bad}")));
        }
        Ok((stats, costs))
    }

    fn log_for(&self, pass: &Pass, costs: &[f64], step: u64, grad_norm: f64) -> Result<StepLog> {
        let weights = self.weights(pass);
        let total = costs.iter().zip(&weights).map(|(c, w)| c * w).sum();
        let (internal, external) = if pass.has_external {
            (costs[..costs.len() - 1].to_vec(), costs.last().copied())
        } else {
            (costs.to_vec(), None)
        };
        let min_eig_views = match pass.view_rows {
            Some(v) => {
                let f = pass.tape.matrix(v)?;
                let acf = f.transpose().matmul(&f).scale(1.0 / f.rows() as f64);
                Some(min_eigenvalue(&SymMatrix::new(acf.symmetrized())?)?)
            }
            None => None,
        };
        Ok(StepLog {
            step,
            external,
            internal,
            total,
            grad_norm,
            min_eig_views,
        })
    }

    /// Slot in the filter bank of the `i`-th statistic of a pass.
    fn slot(&self, pass: &Pass, i: usize) -> usize {
        let n_int = pass.stats.len() - usize::from(pass.has_external);
        if i < n_int {
            i
        } else {
            self.pairs()
        }
    }

    /// True weighted objective at the current parameters for `step`'s batch.
    pub fn objective(&self, data: &LabeledDataset, step: u64) -> Result<f64> {
        let pass = self.forward(data, step, false)?;
        let (_, costs) = self.costs(&pass)?;
        Ok(costs.iter().zip(self.weights(&pass)).map(|(c, w)| c * w).sum())
    }

    /// Statistics of every cost for `step`'s batch, internal pairs first.
    pub fn step_stats(&self, data: &LabeledDataset, step: u64) -> Result<Vec<CorrStats>> {
        let pass = self.forward(data, step, false)?;
        Ok(self.costs(&pass)?.0)
    }

    /// Exact gradient of [`Trainer::objective`] by differentiating the
    /// log-determinants.
    pub fn exact_gradient(&self, data: &LabeledDataset, step: u64) -> Result<Vec<Vec<f64>>> {
        let mut pass = self.forward(data, step, true)?;
        let weights = self.weights(&pass);
        let mut loss: Option<Var> = None;
        for (s, w) in pass.stats.clone().iter().zip(weights) {
            let c = logdet_cost_on_tape(&mut pass.tape, s, self.config.ridge)?;
            let c = pass.tape.scale(c, w)?;
            loss = Some(match loss {
                Some(acc) => pass.tape.add(acc, c)?,
                None => c,
            });
        }
        let loss = loss.expect("at least one cost");
        pass.tape.backward(loss)?;
        Ok(grads_of(&pass.tape, &pass.bound, self.network.params()))
    }

    /// Gradient with inverses replaced by the given estimates, one per
    /// statistic of the pass.
    pub fn filtered_gradient(&self, data: &LabeledDataset, step: u64, estimates: &[Estimate]) -> Result<Vec<Vec<f64>>> {
        let mut pass = self.forward(data, step, true)?;
        let loss = self.surrogate_loss(&mut pass, estimates)?;
        pass.tape.backward(loss)?;
        Ok(grads_of(&pass.tape, &pass.bound, self.network.params()))
    }

    fn surrogate_loss(&self, pass: &mut Pass, estimates: &[Estimate]) -> Result<Var> {
        if estimates.len() != pass.stats.len() {
            return Err(Error::InvalidArgument("one estimate per cost is required".into()));
        }
        let weights = self.weights(pass);
        let mut loss: Option<Var> = None;
        for ((s, est), w) in pass.stats.clone().iter().zip(estimates).zip(weights) {
            let pc = est.precond(self.config.ridge)?;
            let c = surrogate_on_tape(&mut pass.tape, s, &pc)?;
            let c = pass.tape.scale(c, w)?;
            loss = Some(match loss {
                Some(acc) => pass.tape.add(acc, c)?,
                None => c,
            });
        }
        Ok(loss.expect("at least one cost"))
    }

    /// One optimization step on the batch for the current step counter.
    pub fn train_step(&mut self, data: &LabeledDataset) -> Result<StepLog> {
        let step = self.step;
        let mut pass = self.forward(data, step, true)?;
        let (stats, costs) = self.costs(&pass)?;
        let grads = match self.config.gradient {
            GradientMode::Filtered => {
                let mut estimates = Vec::with_capacity(stats.len());
                for (i, s) in stats.iter().enumerate() {
                    let slot = self.slot(&pass, i);
                    estimates.push(self.bank.update(slot, s)?);
                }
                let loss = self.surrogate_loss(&mut pass, &estimates)?;
                pass.tape.backward(loss)?;
                grads_of(&pass.tape, &pass.bound, self.network.params())
            }
            GradientMode::Exact => {
                drop(pass);
                let g = self.exact_gradient(data, step)?;
                pass = self.forward(data, step, false)?;
                g
            }
        };
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        let log = self.log_for(&pass, &costs, step, norm(&grads))?;
        self.optimizer.step(self.network.params_mut(), &grads)?;
        let bn = std::mem::take(&mut pass.bn);
        self.network.apply_bn_updates(bn);
        self.step += 1;
        debug!("step {} total {:.6}", step, log.total);
        Ok(log)
    }

    /// Runs until `config.steps` steps are complete.
    pub fn train(&mut self, data: &LabeledDataset, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let log = self.train_step(data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Two networks trained against each other with the pairwise cost on paired
/// samples `(x, y)`.
pub struct PairTrainer {
    pub f: Network,
    pub g: Network,
    pub ridge: f64,
    pub centered: bool,
    pub bank: AcfFilterBank,
    opt_f: Optimizer,
    opt_g: Optimizer,
    pub step: u64,
    pub seed: u64,
}

impl PairTrainer {
    pub fn new(f: Network, g: Network, ridge: f64, beta: f64, centered: bool, optimizer: OptimizerSpec, seed: u64) -> Result<Self> {
        if f.spec().k != g.spec().k {
            return Err(Error::InvalidArgument("paired networks must share their width".into()));
        }
        Ok(PairTrainer {
            opt_f: Optimizer::new(optimizer, f.params())?,
            opt_g: Optimizer::new(optimizer, g.params())?,
            f,
            g,
            ridge,
            centered,
            bank: AcfFilterBank::new(beta, 1)?,
            step: 0,
            seed,
        })
    }

    fn features(tape: &mut Tape, net: &Network, bound: &Bound, x: &Tensor, mode: Mode, noise: &mut Noise, bn: &mut BnUpdates) -> Result<Var> {
        let xv = tape.constant(x.clone())?;
        let feats = net.forward(tape, bound, xv, mode, noise, bn)?;
        let out = feats.output();
        if tape.value(out).shape()[2..] != [1, 1] {
            return Err(Error::Spec("paired networks must end in a 1x1 map".into()));
        }
        tape.to_rows(out)
    }

    /// One update on a batch of pairs; returns the true cost before it.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bf = self.f.bind(&mut tape)?;
        let bg = self.g.bind(&mut tape)?;
        let mut rng = substream(self.seed, Stream::Noise, &[self.step]);
        let mut noise = Noise::Random(&mut rng);
        let (mut bn_f, mut bn_g) = (BnUpdates::default(), BnUpdates::default());
        let zf = Self::features(&mut tape, &self.f, &bf, x, Mode::Train, &mut noise, &mut bn_f)?;
        let zg = Self::features(&mut tape, &self.g, &bg, y, Mode::Train, &mut noise, &mut bn_g)?;
        let ts = pairwise_on_tape(&mut tape, zf, zg, self.centered)?;
        let stats = ts.read(&tape)?;
        let cost = logdet_cost(&stats, self.ridge)?;
        let est = self.bank.update(0, &stats)?;
        let loss = surrogate_on_tape(&mut tape, &ts, &est.precond(self.ridge)?)?;
        tape.backward(loss)?;
        let gf = grads_of(&tape, &bf, self.f.params());
        let gg = grads_of(&tape, &bg, self.g.params());
        self.opt_f.step(self.f.params_mut(), &gf)?;
        self.opt_g.step(self.g.params_mut(), &gg)?;
        self.f.apply_bn_updates(bn_f);
        self.g.apply_bn_updates(bn_g);
        self.step += 1;
        Ok(cost)
    }

    /// Eval-mode features of both networks as `B×K` row matrices.
    pub fn eval_features(&self, x: &Tensor, y: &Tensor, noise_seed: u64) -> Result<(Tensor, Tensor)> {
        let run = |net: &Network, input: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let b = net.bind_constants(&mut tape)?;
            let v = Self::features(
                &mut tape,
                net,
                &b,
                input,
                Mode::Eval,
                &mut Noise::Fixed(noise_seed),
                &mut BnUpdates::default(),
            )?;
            Ok(tape.value(v).clone())
        };
        Ok((run(&self.f, x)?, run(&self.g, y)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::generate_synthetic;
    use crate::net::NetworkSpec;

    fn small(views: usize) -> (TrainConfig, Network, LabeledDataset) {
        let spec = NetworkSpec::desk(3, 4, 6, 1, Some(views));
        let net = Network::new(spec, 3).unwrap();
        let mut cfg = TrainConfig::desk(5);
        cfg.views = views;
        cfg.batch = 4;
        cfg.steps = 2;
        let data = generate_synthetic(16, 4, (8, 8), 1).unwrap();
        (cfg, net, data)
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::desk(0);
        c.mode = TrainMode::Unsupervised;
        assert!(c.validate().is_err());
        c.use_external = false;
        assert!(c.validate().is_err());
        c.use_internal = true;
        assert!(c.validate().is_ok());
        c.beta = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn frozen_parameters_repeat_cost() {
        let (mut cfg, net, data) = small(4);
        cfg.optimizer = OptimizerSpec::Sgd { lr: 0.0, momentum: 0.0 };
        let mut t = Trainer::new(cfg, AugmentProtocol::NONE, net).unwrap();
        let a = t.objective(&data, 0).unwrap();
        t.train_step(&data).unwrap();
        // Running stats changed but train-mode costs do not read them.
        assert_eq!(a, t.objective(&data, 0).unwrap());
    }

    #[test]
    fn single_block_has_no_internal_pairs() {
        let mut spec = NetworkSpec::desk(3, 4, 4, 0, None);
        spec.blocks.truncate(1);
        let mut cfg = TrainConfig::desk(0);
        cfg.mode = TrainMode::Unsupervised;
        cfg.use_external = false;
        cfg.use_internal = true;
        assert!(Trainer::new(cfg, AugmentProtocol::NONE, Network::new(spec, 0).unwrap()).is_err());
    }

    #[test]
    fn head_is_required_for_external() {
        let spec = NetworkSpec::desk(3, 4, 4, 0, None);
        let cfg = TrainConfig::desk(0);
        assert!(Trainer::new(cfg, AugmentProtocol::NONE, Network::new(spec, 0).unwrap()).is_err());
    }

    #[test]
    fn batches_are_distinct_and_reproducible() {
        let (cfg, net, _) = small(4);
        let t = Trainer::new(cfg, AugmentProtocol::NONE, net).unwrap();
        let a = t.batch_indices(16, 3).unwrap();
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert_eq!(a, t.batch_indices(16, 3).unwrap());
        assert!(t.batch_indices(3, 0).is_err());
    }
}
