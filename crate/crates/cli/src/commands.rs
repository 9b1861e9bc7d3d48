//! The five subcommands. Every artifact is a pure function of the config,
//! the seed and the input files.

use std::fmt::Write as _;

use log::{info, warn};

use hfmca::checkpoint::Checkpoint;
use hfmca::knn::{accuracy, embed, knn_predict};
use hfmca::linalg::Matrix;
use hfmca::net::Network;
use hfmca::oracle::{chain_joint, exact_decompose, random_component_chain, telescoping_check, basis_csv, JointTable};
use hfmca::rng::{substream, Stream};
use hfmca::spectrum::{compare_bases, spectrum_csv};
use hfmca::trainer::{StepLog, Trainer};

use crate::analysis::{default_map_layer, eval_images, response_maps, spectra};
use crate::config::{OracleInput, RunConfig};
use crate::{write_file, CliError, CommonArgs};

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// `step,external,internal_1,…,internal_{S−1},total`; unused costs are empty.
pub fn costs_header(scales: usize) -> String {
    let mut h = String::from("step,external");
    for s in 1..scales {
        write!(h, ",internal_{s}").unwrap();
    }
    h.push_str(",total\n");
    h
}

pub fn costs_row(log: &StepLog, scales: usize) -> String {
    let mut r = format!("{},{}", log.step, cell(log.external));
    for s in 0..scales - 1 {
        write!(r, ",{}", cell(log.internal.get(s).copied())).unwrap();
    }
    writeln!(r, ",{}", cell(Some(log.total))).unwrap();
    r
}

fn load_network(path: &std::path::Path) -> Result<Network, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::from(e).context(path))?;
    ck.to_network().map_err(|e| CliError::from(e).context(path))
}

pub fn train(cfg: &RunConfig, args: &CommonArgs) -> Result<(), CliError> {
    let splits = cfg.data.load(cfg.seed)?;
    let net = Network::new(cfg.network_spec(), cfg.seed)?;
    let scales = net.spec().scales();
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.augment, net)?;
    let eval = eval_images(&splits.test, cfg.analysis.images)?;
    let ck_path = args.out.join("checkpoint.bin");
    let resolved = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&args.out.join("config.json"), resolved + "\n")?;

    let mut costs = costs_header(scales);
    let mut last_good = Checkpoint::from_trainer(&trainer);
    let every = cfg.emit.spectrum_every;
    while trainer.step < cfg.train.steps {
        let log = match trainer.train_step(&splits.train) {
            Ok(log) => log,
            Err(e) => {
                last_good.save(&ck_path)?;
                if cfg.emit.costs_csv {
                    write_file(&args.out.join("costs.csv"), &costs)?;
                }
                warn!("step {0} failed; the checkpoint holds the state after {0} steps", trainer.step);
                return Err(e.into());
            }
        };
        costs.push_str(&costs_row(&log, scales));
        last_good = Checkpoint::from_trainer(&trainer);
        if log.step % 100 == 0 {
            info!("step {} total {:.6}", log.step, log.total);
        }
        if every > 0 && trainer.step % every == 0 {
            let rows: Vec<(String, Vec<f64>)> = spectra(&trainer.network, cfg, &eval, None)?
                .into_iter()
                .map(|(l, s)| (l, s.sigma))
                .collect();
            write_file(
                &args.out.join(format!("spectrum_step{:06}.csv", trainer.step)),
                spectrum_csv(&rows),
            )?;
        }
    }
    last_good.save(&ck_path)?;
    if cfg.emit.costs_csv {
        write_file(&args.out.join("costs.csv"), &costs)?;
    }
    if cfg.emit.response_maps {
        let x = splits.test.images.select_batch(&[0])?;
        let layer = args.layer.unwrap_or(default_map_layer(scales));
        write_maps(&response_maps(&trainer.network, cfg, &eval, &x, 0)?, layer, args)?;
    }
    info!("wrote {}", ck_path.display());
    Ok(())
}

pub fn spectrum(cfg: &RunConfig, args: &CommonArgs) -> Result<(), CliError> {
    let net = load_network(&args.checkpoint_path())?;
    let splits = cfg.data.load(cfg.seed)?;
    let eval = eval_images(&splits.test, cfg.analysis.images)?;
    if let Some(b_path) = &args.checkpoint_b {
        let net_b = load_network(b_path)?;
        let k = net.spec().k.max(net_b.spec().k);
        if cfg.analysis.align_ridge == 0.0 && eval.shape()[0] <= k {
            return Err(CliError::Config(format!(
                "alignment at ridge 0 needs more than {k} evaluation images, got {}; raise analysis.images or analysis.align_ridge",
                eval.shape()[0]
            )));
        }
        let fa = embed(&net, &eval, cfg.seed, cfg.analysis.chunk)?;
        let fb = embed(&net_b, &eval, cfg.seed, cfg.analysis.chunk)?;
        let align = compare_bases(&fa, &fb, cfg.analysis.align_ridge)?;
        let mut out = String::from("rank,alignment\n");
        for (k, a) in align.iter().enumerate() {
            writeln!(out, "{},{a:.16e}", k + 1).unwrap();
        }
        write_file(&args.out.join("alignment.csv"), out)?;
        let mean = align.iter().sum::<f64>() / align.len().max(1) as f64;
        println!("mean alignment {mean:.6}");
        return Ok(());
    }
    let rows: Vec<(String, Vec<f64>)> = spectra(&net, cfg, &eval, args.layer)?
        .into_iter()
        .map(|(l, s)| (l, s.sigma))
        .collect();
    for (label, sigma) in &rows {
        let shown: Vec<String> = sigma.iter().map(|s| format!("{s:.6}")).collect();
        println!("{label}: {}", shown.join(" "));
    }
    write_file(&args.out.join("spectrum.csv"), spectrum_csv(&rows))
}

fn write_maps(maps: &[hfmca::telescope::ResponseMap], layer: usize, args: &CommonArgs) -> Result<(), CliError> {
    for m in maps.iter().filter(|m| m.layer == layer) {
        write_file(&args.out.join(format!("response_s{}.pgm", m.layer)), m.to_pgm())?;
        write_file(&args.out.join(format!("response_s{}.csv", m.layer)), m.to_csv())?;
    }
    Ok(())
}

pub fn telescope(cfg: &RunConfig, args: &CommonArgs) -> Result<(), CliError> {
    let net = load_network(&args.checkpoint_path())?;
    let splits = cfg.data.load(cfg.seed)?;
    if args.image >= splits.test.len() {
        return Err(CliError::Config(format!(
            "image {} outside the {} evaluation images",
            args.image,
            splits.test.len()
        )));
    }
    let scales = net.spec().scales();
    if let Some(l) = args.layer.filter(|&l| l == 0 || l > scales) {
        return Err(CliError::Config(format!("layer {l} outside 1..={scales}")));
    }
    let eval = eval_images(&splits.test, cfg.analysis.images)?;
    warn!("no spectrum cache; estimating spectra from {} evaluation images", eval.shape()[0]);
    let x = splits.test.images.select_batch(&[args.image])?;
    let layer = args.layer.unwrap_or(default_map_layer(scales));
    write_maps(&response_maps(&net, cfg, &eval, &x, args.image)?, layer, args)
}

pub fn knn(cfg: &RunConfig, args: &CommonArgs) -> Result<(), CliError> {
    let net = load_network(&args.checkpoint_path())?;
    let splits = cfg.data.load(cfg.seed)?;
    let k = args.k.unwrap_or(cfg.analysis.k);
    if k == 0 || k > splits.train.len() {
        return Err(CliError::Config(format!(
            "k = {k} needs between 1 and {} training images",
            splits.train.len()
        )));
    }
    let train = embed(&net, &splits.train.images, cfg.seed, cfg.analysis.chunk)?;
    let test = embed(&net, &splits.test.images, cfg.seed, cfg.analysis.chunk)?;
    let pred = knn_predict(&train, &splits.train.labels, &test, k)?;
    let acc = accuracy(&pred, &splits.test.labels);
    let report = format!(
        "knn k={k} distance=euclidean ties=smallest_class\ntrain={} test={}\naccuracy={acc:.4}\n",
        splits.train.len(),
        splits.test.len()
    );
    print!("{report}");
    write_file(&args.out.join("knn.txt"), report)
}

fn table_from_rows(rows: &[Vec<f64>]) -> Result<JointTable, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config("oracle.joint rows differ in length".into()));
    }
    Ok(JointTable::new(n, m, rows.concat())?)
}

/// Drops symbols with zero marginal so the decomposition is defined.
fn support_table(m: &Matrix) -> Result<JointTable, CliError> {
    let rows: Vec<usize> = (0..m.rows()).filter(|&r| m.row(r).iter().sum::<f64>() > 0.0).collect();
    let cols: Vec<usize> = (0..m.cols()).filter(|&c| m.col(c).iter().sum::<f64>() > 0.0).collect();
    let p = rows.iter().flat_map(|&r| cols.iter().map(move |&c| m[(r, c)])).collect();
    Ok(JointTable::new(rows.len(), cols.len(), p)?)
}

fn sigma_line(sigma: &[f64]) -> String {
    sigma.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(" ")
}

pub fn oracle(cfg: &RunConfig, args: &CommonArgs) -> Result<(), CliError> {
    let input = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| CliError::Config("the oracle subcommand needs an `oracle` section".into()))?;
    let table = match input {
        OracleInput::JointCsv(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            Some(JointTable::parse_csv(&text).map_err(|e| CliError::from(e).context(path))?)
        }
        OracleInput::Joint(rows) => Some(table_from_rows(rows)?),
        OracleInput::Chain { .. } => None,
    };
    if let Some(t) = table {
        let d = exact_decompose(&t)?;
        println!("sigma: {}", sigma_line(&d.sigma));
        write_file(&args.out.join("oracle_sigma.csv"), spectrum_csv(&[("joint".into(), d.sigma.clone())]))?;
        write_file(&args.out.join("oracle_phi.csv"), basis_csv(&d.phi))?;
        return write_file(&args.out.join("oracle_psi.csv"), basis_csv(&d.psi));
    }
    let OracleInput::Chain { alphabets, per_symbol } = input else {
        unreachable!("tables returned above");
    };
    let mut rng = substream(cfg.seed, Stream::Data, &[]);
    let chain = random_component_chain(alphabets, *per_symbol, &mut rng)?;
    let joint = chain_joint(&chain)?;
    let defect = telescoping_check(&joint)?;
    let mut rows = Vec::new();
    for s in 0..alphabets.len() - 1 {
        let d = exact_decompose(&support_table(&joint.pair(s))?)?;
        println!("pair {}: sigma {}", s + 1, sigma_line(&d.sigma));
        rows.push((format!("pair_{}", s + 1), d.sigma));
    }
    println!("telescoping defect {defect:.6e}");
    write_file(&args.out.join("oracle_sigma.csv"), spectrum_csv(&rows))?;
    write_file(&args.out.join("oracle.txt"), format!("telescoping_defect={defect:.16e}\n"))
}
