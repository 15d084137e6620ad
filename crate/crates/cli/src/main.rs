//! Command-line workbench: dataset generation, GKN training and
//! evaluation, resolution-transfer and sweep experiments, the 1D
//! Green's-function recovery, the disk Green's-function check, the
//! kernel-operator rate study, and the non-GKN baselines.
//!
//! Conventions: long-form flags only; every source of randomness is an
//! explicit `--seed`; results go to stdout and files, diagnostics to
//! stderr; identical invocations produce byte-identical outputs.

mod formats;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gkn_core::baselines::{run_pca_nn, run_pointwise_nn, run_rbm};
use gkn_core::graph::SamplingPlan;
use gkn_core::model::{Activation, ModelConfig};
use gkn_core::nystrom::mc_rate_experiment;
use gkn_core::random_fields::GrfSpec;
use gkn_core::solvers::{downsample, green_disk};
use gkn_core::training::{
    compute_normalization, evaluate_relative_l2, evaluation_graphs, generate_darcy_dataset,
    green1d_experiment, resolution_transfer_experiment, sweep_experiment, train, DarcyPair,
    FeatureBundle, Green1dConfig, NormStats, SweepCell, TrainConfig, DARCY_KMAX,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use formats::{format_real, read_dataset, read_model, write_csv, write_dataset, write_model, Dataset};

#[derive(Parser)]
#[command(name = "gkn", version, about = "Graph kernel network workbench for elliptic PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample Darcy coefficient/solution pairs into a dataset file.
    Generate(GenerateArgs),
    /// Train a graph kernel network and save the model file.
    Train(TrainArgs),
    /// Score a saved model at one resolution; prints mean relative L2.
    Evaluate(EvaluateArgs),
    /// Train once, evaluate the same parameters across resolutions.
    Transfer(TransferArgs),
    /// Train and evaluate over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Recover the 1D Green's function with a one-step linear model.
    #[command(name = "green1d")]
    Green1d(Green1dArgs),
    /// Verify the analytic disk Green's function identities.
    GreenDiskCheck(GreenDiskCheckArgs),
    /// Measure the Monte Carlo rate of the empirical kernel operator.
    NystromRate(NystromRateArgs),
    /// Train and score a non-GKN baseline on the dataset.
    Baseline(BaselineArgs),
}

fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} entry {part:?}: {e}"))
        })
        .collect()
}

/// Hyperparameters shared by the commands that fit a GKN.
#[derive(Args)]
struct FitArgs {
    /// Training grid resolution s.
    #[arg(long, default_value_t = 16)]
    train_res: usize,
    /// Leading dataset pairs used for training.
    #[arg(long, default_value_t = 100)]
    train_count: usize,
    /// Neighborhood radius for graph construction.
    #[arg(long, default_value_t = 0.10)]
    r: f64,
    /// Nodes per sampled training subgraph.
    #[arg(long, default_value_t = 200)]
    m: usize,
    /// Sampled subgraphs per training pair.
    #[arg(long, default_value_t = 1)]
    l: usize,
    /// Width of the hidden node representation.
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Message-passing steps.
    #[arg(long = "T", default_value_t = 6)]
    t_steps: usize,
    /// Hidden widths of the kernel MLP; its input width is fixed at 6
    /// and its output at n².
    #[arg(long, default_value = "128,256")]
    kappa_hidden: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
}

impl FitArgs {
    fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let hidden: Vec<usize> = parse_list(&self.kappa_hidden, "--kappa-hidden")?;
        let mut kappa_widths = vec![6];
        kappa_widths.extend(hidden);
        kappa_widths.push(self.n * self.n);
        Ok(ModelConfig {
            n: self.n,
            t_steps: self.t_steps,
            d: 2,
            input_width: 6,
            kappa_widths,
            activation: Activation::Relu,
            seed,
        })
    }

    fn train_config(&self, n_test: usize, s_test: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            n_train: self.train_count,
            n_test,
            s_train: self.train_res,
            s_test,
            plan: SamplingPlan {
                m: self.m,
                l: self.l,
                m_eval: self.m,
                l_eval: 1,
                r: self.r,
                r_eval: self.r,
                seed,
            },
            epochs: self.epochs,
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid resolution s (the mesh has s x s nodes).
    #[arg(long)]
    resolution: usize,
    /// Number of coefficient/solution pairs.
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-epoch mean training loss.
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Resolution the test pairs are evaluated at.
    #[arg(long)]
    test_res: usize,
    /// Test pairs, taken from the dataset after the training pairs.
    #[arg(long, default_value_t = 40)]
    test_count: usize,
    /// Training split the normalization statistics are refit on; must
    /// match the flags the model was trained with.
    #[arg(long, default_value_t = 100)]
    train_count: usize,
    #[arg(long, default_value_t = 16)]
    train_res: usize,
    #[arg(long, default_value_t = 0.10)]
    r: f64,
    /// Nodes per evaluation subgraph when the grid is partitioned.
    #[arg(long, default_value_t = 256)]
    m_eval: usize,
    /// Used only when the grid is too large for one full-grid graph.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated evaluation resolutions.
    #[arg(long, default_value = "16,31,61")]
    test_res: String,
    #[arg(long, default_value_t = 40)]
    test_count: usize,
    #[arg(long)]
    seed: u64,
    /// CSV with one row per evaluation resolution.
    #[arg(long)]
    out: PathBuf,
    /// Optionally save the trained model.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    /// Hyperparameter to vary: train-count | l | m | r.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Optional per-value epoch counts, same length as --values.
    #[arg(long)]
    epochs_list: Option<String>,
    /// Evaluation resolution (defaults to the training resolution).
    #[arg(long)]
    test_res: Option<usize>,
    #[arg(long, default_value_t = 40)]
    test_count: usize,
    #[arg(long)]
    seed: u64,
    /// CSV with one row per cell.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Green1dArgs {
    /// Interval resolution for forcings and solutions.
    #[arg(long, default_value_t = 41)]
    s: usize,
    #[arg(long, default_value_t = 2048)]
    forcings: usize,
    /// Spectral truncation of the forcing field.
    #[arg(long, default_value_t = 20)]
    kmax: usize,
    /// Hidden widths of the kernel MLP.
    #[arg(long, default_value = "64,64")]
    hidden: String,
    #[arg(long, default_value_t = 24)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Side of the (x, y) grid used to compare kernel and Green's
    /// function.
    #[arg(long, default_value_t = 64)]
    eval_side: usize,
    #[arg(long)]
    seed: u64,
    /// CSV of (x, y, kappa, green) over the evaluation grid.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GreenDiskCheckArgs {
    /// Number of random argument pairs.
    #[arg(long, default_value_t = 10000)]
    pairs: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct NystromRateArgs {
    /// Comma-separated sample counts, strictly increasing.
    #[arg(long)]
    m: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Bandwidth of the Gaussian reference kernel.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long)]
    seed: u64,
    /// CSV of mean Hilbert-Schmidt distance per sample count.
    #[arg(long, default_value = "nystrom_rate.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// pointwise-nn | pca-nn | rbm
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 100)]
    train_count: usize,
    #[arg(long, default_value_t = 40)]
    test_count: usize,
    /// Resolution both splits are restricted to.
    #[arg(long, default_value_t = 31)]
    train_res: usize,
    /// Hidden widths for the neural baselines.
    #[arg(long, default_value = "128,128")]
    hidden: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Basis size for pca-nn and rbm.
    #[arg(long, default_value_t = 30)]
    rank: usize,
    /// Ignored by rbm, which is deterministic.
    #[arg(long)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Transfer(args) => run_transfer(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Green1d(args) => run_green1d(args),
        Command::GreenDiskCheck(args) => run_green_disk_check(args),
        Command::NystromRate(args) => run_nystrom_rate(args),
        Command::Baseline(args) => run_baseline(args),
    }
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let pairs = generate_darcy_dataset(args.samples, args.resolution, args.seed)?;
    let dataset = Dataset {
        d: 2,
        s: args.resolution,
        forcing: "constant:1".to_string(),
        grf: GrfSpec::darcy_coefficient(DARCY_KMAX.min(args.resolution - 1), args.seed),
        seed: args.seed,
        pairs,
    };
    write_dataset(&args.out, &dataset)?;
    eprintln!(
        "wrote {} pairs at {}x{} to {}",
        dataset.pairs.len(),
        dataset.s,
        dataset.s,
        args.out.display()
    );
    Ok(())
}

fn load_pairs(path: &Path) -> Result<Dataset> {
    let dataset = read_dataset(path)?;
    if dataset.d != 2 {
        bail!("dataset {} is {}-dimensional, expected 2", path.display(), dataset.d);
    }
    Ok(dataset)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let dataset = load_pairs(&args.data)?;
    let model_config = args.fit.model_config(args.seed)?;
    let config = args.fit.train_config(0, args.fit.train_res, args.seed);
    eprintln!(
        "training: {} pairs at s={}, {} epochs, kernel widths {:?}",
        config.n_train, config.s_train, config.epochs, model_config.kappa_widths
    );
    let trained = train(&model_config, &config, &dataset.pairs)?;
    write_model(&args.out, &trained.params)?;
    if let Some(loss_out) = &args.loss_out {
        let rows: Vec<Vec<String>> = trained
            .loss_history
            .iter()
            .enumerate()
            .map(|(epoch, loss)| vec![epoch.to_string(), format_real(*loss)])
            .collect();
        write_csv(loss_out, &["epoch", "mean_train_loss"], &rows)?;
    }
    eprintln!(
        "final mean train loss {}, mean subgraph edges {}, model at {}",
        trained.loss_history.last().map(|l| format_real(*l)).unwrap_or_default(),
        trained.mean_train_edges,
        args.out.display()
    );
    Ok(())
}

/// Refit normalization statistics from the dataset's training split,
/// reproducing what `train` computed with the same flags.
fn recompute_stats(pairs: &[DarcyPair], train_count: usize, train_res: usize) -> Result<NormStats> {
    if pairs.len() < train_count {
        bail!("dataset has {} pairs, normalization split needs {}", pairs.len(), train_count);
    }
    let mut bundles = Vec::with_capacity(train_count);
    for p in &pairs[..train_count] {
        bundles.push(FeatureBundle::from_pair(&p.a, Some(&p.u))?.restrict(train_res)?);
    }
    Ok(compute_normalization(&bundles)?)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let params = read_model(&args.model)?;
    if params.config.d != 2 {
        bail!("model {} is not a 2D Darcy model", args.model.display());
    }
    let dataset = load_pairs(&args.data)?;
    let stats = recompute_stats(&dataset.pairs, args.train_count, args.train_res)?;
    let end = args.train_count + args.test_count;
    if dataset.pairs.len() < end {
        bail!("dataset has {} pairs, split needs {}", dataset.pairs.len(), end);
    }
    let plan = SamplingPlan {
        m: args.m_eval,
        l: 1,
        m_eval: args.m_eval,
        l_eval: 1,
        r: args.r,
        r_eval: args.r,
        seed: args.seed,
    };
    let groups = dataset.pairs[args.train_count..end]
        .iter()
        .map(|p| evaluation_graphs(p, args.test_res, &stats, &plan))
        .collect::<gkn_core::Result<Vec<_>>>()?;
    let error = evaluate_relative_l2(&params, &groups, &stats)?;
    println!("{}", format_real(error));
    Ok(())
}

fn run_transfer(args: TransferArgs) -> Result<()> {
    let dataset = load_pairs(&args.data)?;
    let s_eval: Vec<usize> = parse_list(&args.test_res, "--test-res")?;
    let model_config = args.fit.model_config(args.seed)?;
    let config = args.fit.train_config(args.test_count, args.fit.train_res, args.seed);
    let (trained, report) =
        resolution_transfer_experiment(&model_config, &config, &s_eval, &dataset.pairs)?;
    let rows: Vec<Vec<String>> = report
        .s_eval
        .iter()
        .zip(&report.errors)
        .map(|(s, e)| vec![report.s_train.to_string(), s.to_string(), format_real(*e)])
        .collect();
    write_csv(&args.out, &["s_train", "s_eval", "relative_l2"], &rows)?;
    if let Some(model_out) = &args.model_out {
        write_model(model_out, &trained.params)?;
    }
    for (s, e) in report.s_eval.iter().zip(&report.errors) {
        println!("{s},{}", format_real(*e));
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let dataset = load_pairs(&args.data)?;
    let s_test = args.test_res.unwrap_or(args.fit.train_res);
    let epochs_list: Option<Vec<usize>> = match &args.epochs_list {
        Some(text) => Some(parse_list(text, "--epochs-list")?),
        None => None,
    };
    let value_texts: Vec<String> = args.values.split(',').map(|v| v.trim().to_string()).collect();
    if let Some(list) = &epochs_list {
        if list.len() != value_texts.len() {
            bail!("--epochs-list has {} entries for {} values", list.len(), value_texts.len());
        }
    }
    let mut cells = Vec::with_capacity(value_texts.len());
    for (i, text) in value_texts.iter().enumerate() {
        let model_config = args.fit.model_config(args.seed)?;
        let mut config = args.fit.train_config(args.test_count, s_test, args.seed);
        match args.axis.as_str() {
            "train-count" => config.n_train = text.parse().context("parsing --values")?,
            "l" => config.plan.l = text.parse().context("parsing --values")?,
            "m" => {
                let m = text.parse().context("parsing --values")?;
                config.plan.m = m;
                config.plan.m_eval = m;
            }
            "r" => {
                let r = text.parse().context("parsing --values")?;
                config.plan.r = r;
                config.plan.r_eval = r;
            }
            other => bail!("unknown sweep axis {other:?} (use train-count, l, m, or r)"),
        }
        if let Some(list) = &epochs_list {
            config.epochs = list[i];
        }
        cells.push(SweepCell {
            label: format!("{}={}", args.axis, text),
            model_config,
            config,
        });
    }
    let outcomes = sweep_experiment(&cells, &dataset.pairs);
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.label.clone(),
                o.error.map(format_real).unwrap_or_default(),
                o.final_train_loss.map(format_real).unwrap_or_default(),
                o.mean_train_edges.map(format_real).unwrap_or_default(),
                // Keep the table machine-readable even on failure.
                o.failure.clone().unwrap_or_default().replace(',', ";"),
            ]
        })
        .collect();
    write_csv(
        &args.out,
        &["label", "relative_l2", "final_train_loss", "mean_train_edges", "failure"],
        &rows,
    )?;
    for o in &outcomes {
        match (&o.error, &o.failure) {
            (Some(e), _) => println!("{},{}", o.label, format_real(*e)),
            (None, Some(f)) => eprintln!("cell {} failed: {f}", o.label),
            _ => {}
        }
    }
    Ok(())
}

fn run_green1d(args: Green1dArgs) -> Result<()> {
    let config = Green1dConfig {
        s: args.s,
        n_forcings: args.forcings,
        kmax: args.kmax,
        hidden: parse_list(&args.hidden, "--hidden")?,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        eval_side: args.eval_side,
    };
    let report = green1d_experiment(&config)?;
    let side = report.eval_side;
    let step = 1.0 / (side - 1) as f64;
    let mut rows = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let flat = i * side + j;
            rows.push(vec![
                format_real(i as f64 * step),
                format_real(j as f64 * step),
                format_real(report.kernel_values[flat]),
                format_real(report.green_values[flat]),
            ]);
        }
    }
    write_csv(&args.out, &["x", "y", "kappa", "green"], &rows)?;
    println!("{}", format_real(report.rel_l2));
    Ok(())
}

fn run_green_disk_check(args: GreenDiskCheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let tau = 2.0 * std::f64::consts::PI;
    let mut max_boundary: f64 = 0.0;
    let mut max_asymmetry: f64 = 0.0;
    for _ in 0..args.pairs {
        let (rho, theta) = (rng.gen::<f64>(), tau * rng.gen::<f64>());
        let (rho_t, theta_t) = (rng.gen::<f64>(), tau * rng.gen::<f64>());
        let boundary = green_disk(1.0, theta, rho_t, theta_t)?;
        max_boundary = max_boundary.max(boundary.abs());
        let forward = green_disk(rho, theta, rho_t, theta_t)?;
        let backward = green_disk(rho_t, theta_t, rho, theta)?;
        max_asymmetry = max_asymmetry.max((forward - backward).abs());
    }
    println!("max_boundary_value,{}", format_real(max_boundary));
    println!("max_asymmetry,{}", format_real(max_asymmetry));
    Ok(())
}

fn run_nystrom_rate(args: NystromRateArgs) -> Result<()> {
    let m_values: Vec<usize> = parse_list(&args.m, "--m")?;
    let report = mc_rate_experiment(&m_values, args.trials, args.sigma, args.seed)?;
    let rows: Vec<Vec<String>> = report
        .m_values
        .iter()
        .zip(&report.mean_distances)
        .map(|(m, d)| vec![m.to_string(), format_real(*d)])
        .collect();
    write_csv(&args.out, &["m", "mean_hs_distance"], &rows)?;
    println!("slope {} intercept {}", format_real(report.slope), format_real(report.intercept));
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<()> {
    let dataset = load_pairs(&args.data)?;
    let end = args.train_count + args.test_count;
    if dataset.pairs.len() < end {
        bail!("dataset has {} pairs, split needs {}", dataset.pairs.len(), end);
    }
    let restrict = |pairs: &[DarcyPair]| -> Result<Vec<DarcyPair>> {
        pairs
            .iter()
            .map(|p| {
                Ok(DarcyPair {
                    a: downsample(&p.a, args.train_res)?,
                    u: downsample(&p.u, args.train_res)?,
                })
            })
            .collect()
    };
    let train_pairs = restrict(&dataset.pairs[..args.train_count])?;
    let test_pairs = restrict(&dataset.pairs[args.train_count..end])?;
    let hidden: Vec<usize> = parse_list(&args.hidden, "--hidden")?;
    let error = match args.method.as_str() {
        "pointwise-nn" => {
            run_pointwise_nn(&train_pairs, &test_pairs, &hidden, args.epochs, args.lr, args.seed)?
        }
        "pca-nn" => run_pca_nn(
            &train_pairs,
            &test_pairs,
            args.rank,
            args.rank,
            &hidden,
            args.epochs,
            args.lr,
            args.seed,
        )?,
        "rbm" => run_rbm(&train_pairs, &test_pairs, args.rank)?,
        other => bail!("unknown baseline {other:?} (use pointwise-nn, pca-nn, or rbm)"),
    };
    println!("{}", format_real(error));
    Ok(())
}
