//! End-to-end behaviour of the trainer: learning, determinism and resume.

use hfmca::checkpoint::Checkpoint;
use hfmca::hierarchy::{generate_synthetic, AugmentProtocol, LabeledDataset};
use hfmca::net::{Network, NetworkSpec};
use hfmca::optim::OptimizerSpec;
use hfmca::trainer::{StepLog, TrainConfig, Trainer};

fn setup(steps: u64, internal: bool) -> (Trainer, LabeledDataset) {
    let data = generate_synthetic(96, 4, (8, 8), 1).unwrap();
    let net = Network::new(NetworkSpec::desk(3, 4, 8, 2, Some(4)), 2).unwrap();
    let mut cfg = TrainConfig::desk(3);
    cfg.steps = steps;
    cfg.batch = 16;
    cfg.use_internal = internal;
    cfg.beta = 0.5;
    cfg.optimizer = OptimizerSpec::Adam {
        lr: 3e-3,
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
    };
    (Trainer::new(cfg, AugmentProtocol::default(), net).unwrap(), data)
}

fn bits(logs: &[StepLog]) -> Vec<u64> {
    logs.iter()
        .flat_map(|l| {
            l.internal
                .iter()
                .copied()
                .chain(l.external)
                .chain([l.total, l.grad_norm])
                .map(f64::to_bits)
        })
        .collect()
}

#[test]
fn cost_trends_down() {
    let (mut t, data) = setup(200, false);
    let logs = t.train(&data, |_| {}).unwrap();
    let mean = |s: &[StepLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&logs[..20]), mean(&logs[180..]));
    assert!(last < first - 0.1, "first {first}, last {last}");
}

#[test]
fn runs_are_bit_identical() {
    let (mut a, data) = setup(6, true);
    let (mut b, _) = setup(6, true);
    let la = a.train(&data, |_| {}).unwrap();
    let lb = b.train(&data, |_| {}).unwrap();
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(Checkpoint::from_trainer(&a).encode().unwrap(), Checkpoint::from_trainer(&b).encode().unwrap());
}

#[test]
fn resume_continues_bit_exactly() {
    let (mut straight, data) = setup(10, true);
    let all = straight.train(&data, |_| {}).unwrap();

    let (mut first, _) = setup(5, true);
    let head = first.train(&data, |_| {}).unwrap();
    let bytes = Checkpoint::from_trainer(&first).encode().unwrap();
    let mut cfg = first.config.clone();
    cfg.steps = 10;
    let mut resumed = Checkpoint::decode(&bytes).unwrap().to_trainer(cfg, first.protocol).unwrap();
    assert_eq!(resumed.step, 5);
    let tail = resumed.train(&data, |_| {}).unwrap();

    let joined: Vec<StepLog> = head.into_iter().chain(tail).collect();
    assert_eq!(bits(&all), bits(&joined));
    assert_eq!(
        Checkpoint::from_trainer(&straight).encode().unwrap(),
        Checkpoint::from_trainer(&resumed).encode().unwrap()
    );
}
