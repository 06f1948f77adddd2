use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use funclust::bspline::build_basis;
use funclust::dataio::{self, ModelFile, ReplicateWriter, TruthFile};
use funclust::em::PenaltyKind;
use funclust::fpca::{reduce_dataset, ComponentRule, CoefficientMatrix, FpcaBundle, FunctionalDataSet};
use funclust::select::{model_search, SearchOptions};
use funclust::simbench::{generate_dataset, run_scenario_with, BenchmarkConfig, BenchmarkRow, Scenario, SimulationDesign};

use crate::config::{BasisArgs, FileConfig, SearchArgs};
use crate::UsageError;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn check_reread(ok: bool, path: &Path) -> Result<()> {
    if !ok {
        bail!("{} does not read back as written", path.display());
    }
    Ok(())
}

fn reduce(data: &FunctionalDataSet, basis: &BasisArgs, file: &FileConfig) -> Result<(FpcaBundle, CoefficientMatrix)> {
    let times = data.times();
    let spec = build_basis(times[0], times[times.len() - 1], basis.n_basis(file), basis.order(file))?;
    Ok(reduce_dataset(data, &spec, basis.rule(file)?)?)
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Long-format CSV with columns obs_id,sensor_id,time,value.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub basis: BasisArgs,
}

pub fn transform(args: &TransformArgs, file: &FileConfig) -> Result<()> {
    let data = dataio::read_long_csv(&args.input)?;
    let (bundle, coeffs) = reduce(&data, &args.basis, file)?;
    create_dir(&args.out_dir)?;
    let coeff_path = args.out_dir.join("coefficients.csv");
    dataio::write_coefficients(&coeffs, data.obs_ids(), &coeff_path)?;
    let (back, ids) = dataio::read_coefficients(&coeff_path)?;
    check_reread(back == coeffs && ids == data.obs_ids(), &coeff_path)?;
    let fpca_path = args.out_dir.join("fpca.json");
    fs::write(&fpca_path, serde_json::to_string_pretty(&bundle)?)?;
    let reread: FpcaBundle = serde_json::from_str(&fs::read_to_string(&fpca_path)?)?;
    check_reread(reread == bundle, &fpca_path)?;

    println!("n={} p={} tau={} q_c={}", data.n(), data.p(), data.tau(), bundle.q_c);
    if let (Some(sel), ComponentRule::Proportion { alpha, .. }) = (bundle.selection, args.basis.rule(file)?) {
        println!(
            "{:.1}% of sensors reach {:.0}% explained variance with {} components",
            100.0 * sel.fraction,
            100.0 * alpha,
            sel.q_c
        );
    }
    let shown = bundle.q_c.max(bundle.selection.map_or(0, |s| s.q_c));
    print!("{:<16}", "sensor");
    for l in 1..=shown {
        print!(" {:>8}", format!("fpc1-{l}"));
    }
    println!();
    for model in &bundle.models {
        print!("{:<16}", model.sensor_name);
        for ve in model.variance_explained().iter().take(shown) {
            print!(" {:>7.1}%", 100.0 * ve);
        }
        println!();
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Raw long-format CSV; FPCA is fitted first.
    #[arg(long, required_unless_present = "coefficients", conflicts_with = "coefficients")]
    pub input: Option<PathBuf>,
    /// Coefficient CSV written by `transform`.
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[command(flatten)]
    pub search: SearchArgs,
}

/// Returns false when at least one penalty kind had no usable grid point.
pub fn fit(args: &FitArgs, file: &FileConfig) -> Result<bool> {
    let kinds = args.search.kinds(file, &[PenaltyKind::Group])?;
    let grid = args.search.grid(file)?;
    let options = SearchOptions {
        seed: args.search.seed(file, 1),
        em: args.search.em(file)?,
    };
    let (fpca, coeffs, ids) = match (&args.input, &args.coefficients) {
        (Some(input), None) => {
            let data = dataio::read_long_csv(input)?;
            let (bundle, coeffs) = reduce(&data, &args.basis, file)?;
            (Some(bundle), coeffs, data.obs_ids().to_vec())
        }
        (None, Some(path)) => {
            let (coeffs, ids) = dataio::read_coefficients(path)?;
            (None, coeffs, ids)
        }
        _ => return Err(UsageError("give exactly one of --input and --coefficients".into()).into()),
    };
    create_dir(&args.out_dir)?;
    let mut all_ok = true;
    for kind in kinds {
        let report = match model_search(&coeffs, &grid, kind, &options) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => {
                log::error!("{kind}: {e}");
                all_ok = false;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let model = ModelFile::new(&report, fpca.clone(), coeffs.sensor_names(), coeffs.q_c());
        let out = |name: &str| args.out_dir.join(format!("{name}_{kind}.{}", if name == "model" { "json" } else { "csv" }));

        let model_path = out("model");
        dataio::write_model(&model, &model_path)?;
        check_reread(dataio::read_model(&model_path)? == model, &model_path)?;

        let assign_path = out("assignments");
        dataio::write_assignments(&ids, &report.best.responsibilities, &assign_path)?;
        let assigned = dataio::read_assignments(&assign_path)?;
        check_reread(assigned.labels == report.best.hard_labels && assigned.obs_ids == ids, &assign_path)?;

        let table_path = out("selection");
        dataio::write_selection_table(&report.rows, &table_path)?;
        check_reread(dataio::read_selection_table(&table_path)?.len() == report.rows.len(), &table_path)?;

        let removed_path = out("removed");
        dataio::write_removed_sensors(&model.mixture.removed_sensors, &removed_path)?;
        check_reread(dataio::read_removed_sensors(&removed_path)? == model.mixture.removed_sensors, &removed_path)?;

        if model.fpca.is_some() {
            let curves_path = out("cluster_means");
            let points = dataio::cluster_mean_curves(&model)?;
            dataio::write_curve_points(&points, &curves_path)?;
        }

        let c = report.chosen;
        println!(
            "{kind}: m={} lambda={:.4} gamma={} bic={:.3} converged={}",
            c.m, c.lambda, c.gamma, c.bic, report.best.converged
        );
        let removed = &model.mixture.removed_sensors;
        println!("  removed {} sensor(s): {}", removed.len(), removed.join(" "));
        let mut sizes = vec![0usize; c.m];
        for &label in &report.best.hard_labels {
            sizes[label] += 1;
        }
        println!("  cluster sizes: {sizes:?}");
    }
    Ok(all_ok)
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required_unless_present = "coefficients", conflicts_with = "coefficients")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    /// Assignment CSV to write.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = dataio::read_model(&args.model)?;
    let (resp, ids) = match (&args.input, &args.coefficients) {
        (Some(input), None) => {
            let data = dataio::read_long_csv(input)?;
            (model.predict(&data)?.0, data.obs_ids().to_vec())
        }
        (None, Some(path)) => {
            let (coeffs, ids) = dataio::read_coefficients(path)?;
            (model.assign(&coeffs)?.0, ids)
        }
        _ => return Err(UsageError("give exactly one of --input and --coefficients".into()).into()),
    };
    dataio::write_assignments(&ids, &resp, &args.output)?;
    let back = dataio::read_assignments(&args.output)?;
    check_reread(back.labels == resp.hard_labels(), &args.output)?;
    println!("assigned {} observations to {} clusters", ids.len(), resp.matrix().ncols());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p_signal: Option<usize>,
    #[arg(long)]
    pub p_noise: Option<usize>,
    /// Signal strength; every coefficient variance is divided by it.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn design_from(
    n: Option<usize>,
    p_signal: Option<usize>,
    p_noise: Option<usize>,
    delta: Option<f64>,
    file: &FileConfig,
) -> Result<SimulationDesign, UsageError> {
    let mut design = SimulationDesign::default();
    design.n = n.or(file.n).unwrap_or(design.n);
    design.p_signal = p_signal.or(file.p_signal).unwrap_or(design.p_signal);
    design.p_noise = p_noise.or(file.p_noise).unwrap_or(design.p_noise);
    design.delta = delta.or(file.delta).unwrap_or(design.delta);
    design.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(design)
}

pub fn simulate(args: &SimulateArgs, file: &FileConfig) -> Result<()> {
    let mut design = design_from(args.n, args.p_signal, args.p_noise, args.delta, file)?;
    design.seed = args.seed.or(file.seed).unwrap_or(design.seed);
    let data = generate_dataset(&design)?;
    create_dir(&args.out_dir)?;
    let data_path = args.out_dir.join("data.csv");
    dataio::write_long_csv(&data, &data_path)?;
    let back = dataio::read_long_csv(&data_path)?;
    check_reread(
        back.values() == data.values() && back.obs_ids() == data.obs_ids() && back.times() == data.times(),
        &data_path,
    )?;
    let truth = TruthFile::new(&design, &data)?;
    let truth_path = args.out_dir.join("truth.json");
    dataio::write_truth(&truth, &truth_path)?;
    check_reread(dataio::read_truth(&truth_path)? == truth, &truth_path)?;
    println!(
        "n={} p={} ({} signal, {} noise) tau={} delta={} seed={}",
        data.n(),
        data.p(),
        design.p_signal,
        design.p_noise,
        data.tau(),
        design.delta,
        design.seed
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub scenario: Option<Scenario>,
    /// Levels of the swept factor, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Skip the no-penalty baseline.
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Components per sensor.
    #[arg(long)]
    pub qc: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p_signal: Option<usize>,
    #[arg(long)]
    pub p_noise: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub search: SearchArgs,
}

pub fn benchmark(args: &BenchmarkArgs, file: &FileConfig) -> Result<()> {
    let scenario = args
        .scenario
        .or(file.scenario)
        .ok_or_else(|| UsageError("--scenario is required".into()))?;
    let mut config = BenchmarkConfig::new(scenario);
    if let Some(levels) = args.levels.clone().or_else(|| file.levels.clone()) {
        config.levels = levels;
    }
    config.reps = args.reps.or(file.reps).unwrap_or(config.reps);
    if config.reps == 0 {
        return Err(UsageError("--reps must be at least 1".into()).into());
    }
    config.kinds = args.search.kinds(file, &PenaltyKind::PENALIZED)?;
    config.baseline = !args.no_baseline && file.baseline.unwrap_or(true);
    config.seed = args.search.seed(file, config.seed);
    config.q_c = args.qc.or(file.qc).unwrap_or(config.q_c);
    config.grid = args.search.grid(file)?;
    config.em = args.search.em(file)?;
    config.base = design_from(args.n, args.p_signal, args.p_noise, args.delta, file)?;
    for &level in &config.levels {
        scenario.apply(&config.base, level).map_err(|e| UsageError(e.to_string()))?;
    }

    create_dir(&args.out_dir)?;
    let rep_path = args.out_dir.join("replicates.csv");
    let writer = ReplicateWriter::create(&rep_path)?;
    let sink = |records: &[_]| {
        if let Err(e) = writer.append(records) {
            log::error!("cannot append to {}: {e}", rep_path.display());
        }
    };
    let result = run_scenario_with(&config, &sink)?;
    check_reread(dataio::read_replicates(&rep_path)?.len() == result.replicates.len(), &rep_path)?;
    let rows_path = args.out_dir.join("benchmark.csv");
    dataio::write_benchmark_rows(&result.rows, &rows_path)?;
    check_reread(dataio::read_benchmark_rows(&rows_path)?.len() == result.rows.len(), &rows_path)?;
    print_table(scenario, &result.rows);
    Ok(())
}

fn print_table(scenario: Scenario, rows: &[BenchmarkRow]) {
    println!(
        "{:>8} {:<10} {:>7} {:>9} {:>9} {:>9} {:>22} {:>6}",
        scenario.factor(),
        "penalty",
        "MAE(m)",
        "vars_rm",
        "correct",
        "falsely",
        "ARI q1/median/q3",
        "fails"
    );
    for r in rows {
        println!(
            "{:>8} {:<10} {:>7.2} {:>9.2} {:>9.2} {:>9.2} {:>22} {:>6}",
            r.level,
            r.kind.as_str(),
            r.mae_m,
            r.variables_removed,
            r.removed_correct,
            r.removed_falsely,
            format!("{:.2}/{:.2}/{:.2}", r.ari_q1, r.ari_median, r.ari_q3),
            r.failures
        );
    }
}
