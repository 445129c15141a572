//! Command-line front end: simulation, decomposition, stability selection,
//! source recovery, evaluation, the chained pipeline and the Monte-Carlo
//! study. Every output embeds the resolved config hash and master seed, and
//! files are written via a temp-then-rename step so failed stages never
//! leave truncated outputs behind.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use hemodeconv::btd::{multi_start, BtdDims, BtdSolution, BtdVariables};
use hemodeconv::io;
use hemodeconv::lagcorr::{autocorr_tensor, hankelize};
use hemodeconv::metrics::{binarize_global, fano_factor, fwhm_error, iou_seconds, pl_error, BinarySchedule};
use hemodeconv::pipeline::{
    monte_carlo, run_pipeline, GroundTruth, McIterationRecord, McSummaryRow, PipelineOutcome,
};
use hemodeconv::recovery::estimate_sources;
use hemodeconv::sim::{generate_ep, sample_random_hrf_params, synthesize, Experiment};
use hemodeconv::stability::ClusterReport;

use config::Config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "hemodeconv",
    version,
    about = "Blind deconvolution of multivariate hemodynamic time series"
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default "hemodeconv_out").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: time-series CSV plus ground-truth JSON.
    Simulate {
        /// Override the configured SNR (dB); `inf` disables the artifact.
        #[arg(long)]
        snr_db: Option<f64>,
        /// Write one dataset per Monte-Carlo SNR value instead.
        #[arg(long)]
        snr_sweep: bool,
    },
    /// Fit the decomposition with random restarts; write per-run results.
    Decompose {
        /// Time-series CSV (time column + one column per region).
        #[arg(long)]
        input: PathBuf,
        /// Also export the autocorrelation tensor slices for debugging.
        #[arg(long)]
        export_tensor: bool,
    },
    /// Stability selection over a decomposition run set.
    Select {
        /// runs.json written by `decompose`.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Estimate the task source from final kernels and observations.
    Recover {
        /// Kernel CSV (e.g. mean_hrfs.csv from `select`).
        #[arg(long)]
        hrfs: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Evaluate a source estimate and kernels against ground truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        hrfs: PathBuf,
        /// Observed series; enables the per-region Fano factors.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Full chain: normalize, decompose, select, recover, evaluate.
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Monte-Carlo study with the fixed-kernel baseline comparison.
    Montecarlo {
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        config.out_dir = Some(dir);
    }
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("hemodeconv_out"));

    match cli.command {
        Command::Simulate { snr_db, snr_sweep } => {
            cmd_simulate(&config, &out_dir, snr_db, snr_sweep).context("stage simulate")
        }
        Command::Decompose {
            input,
            export_tensor,
        } => cmd_decompose(&config, &out_dir, &input, export_tensor).context("stage decompose"),
        Command::Select { runs } => cmd_select(&config, &out_dir, &runs).context("stage select"),
        Command::Recover { hrfs, input } => {
            cmd_recover(&config, &out_dir, &hrfs, &input).context("stage recover")
        }
        Command::Evaluate {
            truth,
            source,
            hrfs,
            series,
        } => cmd_evaluate(&config, &out_dir, &truth, &source, &hrfs, series.as_deref())
            .context("stage evaluate"),
        Command::Pipeline { input, truth } => {
            cmd_pipeline(&config, &out_dir, &input, truth.as_deref()).context("stage pipeline")
        }
        Command::Montecarlo { iterations } => {
            cmd_montecarlo(&config, &out_dir, iterations).context("stage montecarlo")
        }
    }
}

// ---------------------------------------------------------------------------
// output helpers

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// JSON output with the provenance envelope.
fn write_json<T: Serialize>(path: &Path, config: &Config, payload: &T) -> Result<()> {
    let mut value = serde_json::to_value(payload).context("serializing payload")?;
    let object = value
        .as_object_mut()
        .ok_or_else(|| anyhow!("JSON payloads must be objects"))?;
    object.insert("config_hash".into(), json!(config.hash()));
    object.insert("master_seed".into(), json!(config.seed));
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv_with<F>(path: &Path, build: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> hemodeconv::Result<()>,
{
    let mut buf = Vec::new();
    build(&mut buf)?;
    write_atomic(path, &buf)
}

// ---------------------------------------------------------------------------
// simulate

fn draw_simulation(config: &Config, snr_db: f64) -> Result<(Experiment, GroundTruth)> {
    let sim = &config.simulate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = generate_ep(
        sim.n_reps,
        sim.stim_duration,
        sim.rest_range,
        config.pipeline.fs,
        &mut rng,
    )?;
    let hrf_params = (0..sim.m_regions)
        .map(|_| sample_random_hrf_params(&mut rng))
        .collect::<hemodeconv::Result<Vec<_>>>()?;
    let experiment = Experiment {
        schedule: schedule.clone(),
        hrf_params: hrf_params.clone(),
        artifact: sim.artifact,
        snr_db,
        filter_len: config.pipeline.filter_len,
        seed: config.seed,
    };
    let labels = (1..=sim.m_regions).map(|i| format!("roi{i}")).collect();
    let truth = GroundTruth {
        schedule,
        hrf_params,
        gains: Vec::new(),
        labels,
        seed: config.seed,
    };
    Ok((experiment, truth))
}

fn simulate_into(config: &Config, dir: &Path, snr_db: f64) -> Result<()> {
    let (experiment, mut truth) = draw_simulation(config, snr_db)?;
    let synthesis = synthesize(&experiment)?;
    truth.gains = synthesis.gains.clone();
    write_csv_with(&dir.join("series.csv"), |buf| {
        io::write_series_csv(buf, &synthesis.series, Some(&config.stamp()))
    })?;
    #[derive(Serialize)]
    struct TruthOut<'a> {
        snr_db: f64,
        #[serde(flatten)]
        truth: &'a GroundTruth,
    }
    write_json(
        &dir.join("truth.json"),
        config,
        &TruthOut {
            snr_db,
            truth: &truth,
        },
    )?;
    println!(
        "wrote {} ({} regions x {} samples) and truth.json",
        dir.join("series.csv").display(),
        synthesis.series.n_regions(),
        synthesis.series.n_samples()
    );
    Ok(())
}

fn cmd_simulate(config: &Config, out_dir: &Path, snr_db: Option<f64>, sweep: bool) -> Result<()> {
    if sweep {
        for &snr in &config.montecarlo.snr_db_list {
            simulate_into(config, &out_dir.join(format!("snr_{snr}")), snr)?;
        }
        Ok(())
    } else {
        simulate_into(config, out_dir, snr_db.unwrap_or(config.simulate.snr_db))
    }
}

// ---------------------------------------------------------------------------
// decompose

#[derive(Serialize, serde::Deserialize)]
struct RunRecord {
    index: usize,
    variables: BtdVariables,
    final_cost: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize, serde::Deserialize)]
struct RunSet {
    dims: BtdDims,
    labels: Vec<String>,
    runs: Vec<RunRecord>,
}

fn cmd_decompose(config: &Config, out_dir: &Path, input: &Path, export: bool) -> Result<()> {
    let series = io::read_series_csv_path(input)?;
    let mut params = config.pipeline.clone();
    params.solver.seed = config.seed;
    params.validate(series.n_regions())?;
    let normalized = series.normalized()?;
    let dims = params.dims(series.n_regions());
    let stack = hankelize(&normalized, params.stack_depth)?;
    let tensor = autocorr_tensor(&stack, params.n_lags)?;
    if export {
        io::export_tensor(&out_dir.join("tensor"), &tensor, Some(&config.stamp()))?;
    }
    let solutions = multi_start(&tensor, &dims, &params.solver)?;

    let runs: Vec<RunRecord> = solutions
        .iter()
        .enumerate()
        .map(|(index, s)| RunRecord {
            index,
            variables: s.variables.clone(),
            final_cost: s.final_cost,
            iterations: s.iterations,
            converged: s.converged,
        })
        .collect();
    let run_set = RunSet {
        dims,
        labels: series.labels.clone(),
        runs,
    };
    write_json(&out_dir.join("runs.json"), config, &run_set)?;
    for (index, solution) in solutions.iter().enumerate() {
        write_csv_with(&out_dir.join(format!("run_{index:02}_hrfs.csv")), |buf| {
            io::write_hrf_csv(buf, &solution.sampled_hrfs, &series.labels, Some(&config.stamp()))
        })?;
    }
    println!(
        "wrote {} with {} runs (best cost {:.6e})",
        out_dir.join("runs.json").display(),
        solutions.len(),
        solutions
            .iter()
            .map(|s| s.final_cost)
            .fold(f64::INFINITY, f64::min)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// select

fn load_run_set(path: &Path) -> Result<RunSet> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn solutions_from(run_set: &RunSet) -> Result<Vec<BtdSolution>> {
    run_set
        .runs
        .iter()
        .map(|r| {
            let sampled_hrfs = r.variables.sampled_hrfs(&run_set.dims)?;
            Ok(BtdSolution {
                variables: r.variables.clone(),
                final_cost: r.final_cost,
                iterations: r.iterations,
                converged: r.converged,
                sampled_hrfs,
            })
        })
        .collect::<hemodeconv::Result<Vec<_>>>()
        .map_err(Into::into)
}

fn write_selection_outputs(
    config: &Config,
    out_dir: &Path,
    labels: &[String],
    report: &ClusterReport,
    run_costs: &[f64],
) -> Result<()> {
    #[derive(Serialize)]
    struct SelectionOut<'a> {
        retained_runs: &'a [usize],
        selected_cluster: usize,
        clusters: &'a [hemodeconv::stability::ClusterSummary],
        run_costs: &'a [f64],
    }
    write_json(
        &out_dir.join("selection.json"),
        config,
        &SelectionOut {
            retained_runs: &report.retained,
            selected_cluster: report.selected,
            clusters: &report.clusters,
            run_costs,
        },
    )?;

    // Dendrogram merge list.
    let mut text = format!("# {}\nstep,left,right,distance,size\n", config.stamp());
    for (step, merge) in report.merges.iter().enumerate() {
        text.push_str(&format!(
            "{step},{},{},{},{}\n",
            merge.left, merge.right, merge.distance, merge.size
        ));
    }
    write_atomic(&out_dir.join("dendrogram.csv"), text.as_bytes())?;

    write_csv_with(&out_dir.join("mean_hrfs.csv"), |buf| {
        io::write_hrf_csv(buf, &report.mean_hrfs, labels, Some(&config.stamp()))
    })?;

    // Shape-free curve export.
    let dt = report.mean_hrfs[0].dt;
    let times: Vec<f64> = (0..report.mean_hrfs[0].len()).map(|k| k as f64 * dt).collect();
    let curves: Vec<serde_json::Value> = labels
        .iter()
        .zip(&report.mean_hrfs)
        .map(|(label, filter)| json!({"label": label, "values": filter.taps}))
        .collect();
    write_json(
        &out_dir.join("mean_hrfs.json"),
        config,
        &json!({"time": times, "curves": curves}),
    )?;
    Ok(())
}

fn cmd_select(config: &Config, out_dir: &Path, runs_path: &Path) -> Result<()> {
    let run_set = load_run_set(runs_path)?;
    let solutions = solutions_from(&run_set)?;
    let report = hemodeconv::stability::select_stable(&solutions, config.pipeline.cluster_cut)?;
    let costs: Vec<f64> = solutions.iter().map(|s| s.final_cost).collect();
    write_selection_outputs(config, out_dir, &run_set.labels, &report, &costs)?;
    println!(
        "selected cluster {} with {} members; mean kernels in {}",
        report.selected,
        report.selected_members().len(),
        out_dir.join("mean_hrfs.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// recover

fn cmd_recover(config: &Config, out_dir: &Path, hrfs: &Path, input: &Path) -> Result<()> {
    let (filters, _) = io::read_hrf_csv_path(hrfs)?;
    let series = io::read_series_csv_path(input)?.normalized()?;
    let estimate = estimate_sources(
        &filters,
        &series,
        config.pipeline.stack_depth,
        config.pipeline.truncation_fraction,
        config.pipeline.truncation_rule,
    )?;
    write_csv_with(&out_dir.join("source.csv"), |buf| {
        io::write_source_csv(buf, &estimate.collapsed, estimate.fs, Some(&config.stamp()))
    })?;
    println!("wrote {}", out_dir.join("source.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn load_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct EvaluateOut {
    iou_mean_seconds: f64,
    iou_per_rep_seconds: Vec<f64>,
    false_positives: usize,
    pl_error_per_region: Vec<f64>,
    pl_error_mean: f64,
    fwhm_error_per_region: Vec<f64>,
    fwhm_error_mean: f64,
    fano_factors: Option<Vec<f64>>,
}

fn evaluate_files(
    config: &Config,
    truth: &GroundTruth,
    source: &[f64],
    source_fs: f64,
    est_hrfs: &[hemodeconv::SampledFilter],
    series: Option<&hemodeconv::RoiTimeSeries>,
) -> Result<EvaluateOut> {
    let truth_schedule = BinarySchedule::from_ep(&truth.schedule);
    let binarized = binarize_global(source, source_fs)?;
    let iou = iou_seconds(&truth_schedule, &binarized, truth.schedule.duration)?;
    let dt = 1.0 / config.pipeline.fs;
    let true_hrfs = truth.sampled_hrfs(dt, config.pipeline.filter_len)?;
    let (pl_per, pl_mean) = pl_error(&true_hrfs, est_hrfs)?;
    let (fwhm_per, fwhm_mean) = fwhm_error(&true_hrfs, est_hrfs)?;
    let fano = series.and_then(|s| {
        s.data
            .rows()
            .into_iter()
            .map(|row| {
                fano_factor(
                    row.as_slice().expect("contiguous row"),
                    s.fs,
                    &truth_schedule,
                    config.pipeline.response_window,
                )
            })
            .collect::<hemodeconv::Result<Vec<_>>>()
            .ok()
    });
    Ok(EvaluateOut {
        iou_mean_seconds: iou.mean_seconds,
        iou_per_rep_seconds: iou.per_rep_seconds,
        false_positives: iou.false_positives,
        pl_error_per_region: pl_per,
        pl_error_mean: pl_mean,
        fwhm_error_per_region: fwhm_per,
        fwhm_error_mean: fwhm_mean,
        fano_factors: fano,
    })
}

fn write_report(config: &Config, out_dir: &Path, report: &EvaluateOut) -> Result<()> {
    write_json(&out_dir.join("report.json"), config, report)?;
    let row = format!(
        "config_hash,seed,iou_mean_seconds,pl_error_mean,fwhm_error_mean,false_positives\n{},{},{},{},{},{}\n",
        config.hash(),
        config.seed,
        report.iou_mean_seconds,
        report.pl_error_mean,
        report.fwhm_error_mean,
        report.false_positives
    );
    write_atomic(&out_dir.join("report_row.csv"), row.as_bytes())
}

fn cmd_evaluate(
    config: &Config,
    out_dir: &Path,
    truth: &Path,
    source: &Path,
    hrfs: &Path,
    series: Option<&Path>,
) -> Result<()> {
    let truth = load_truth(truth)?;
    let file = std::fs::File::open(source)
        .with_context(|| format!("reading {}", source.display()))?;
    let (source, source_fs) = io::read_source_csv(std::io::BufReader::new(file))?;
    let (est_hrfs, _) = io::read_hrf_csv_path(hrfs)?;
    let series = match series {
        Some(path) => Some(io::read_series_csv_path(path)?.normalized()?),
        None => None,
    };
    let report = evaluate_files(config, &truth, &source, source_fs, &est_hrfs, series.as_ref())?;
    write_report(config, out_dir, &report)?;
    println!(
        "IoU {:.3} s, peak-latency error {:.3} s (report in {})",
        report.iou_mean_seconds,
        report.pl_error_mean,
        out_dir.join("report.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline

fn cmd_pipeline(config: &Config, out_dir: &Path, input: &Path, truth: Option<&Path>) -> Result<()> {
    let series = io::read_series_csv_path(input)?;
    let truth = match truth {
        Some(path) => Some(load_truth(path)?),
        None => None,
    };
    let mut params = config.pipeline.clone();
    params.solver.seed = config.seed;
    let outcome: PipelineOutcome = run_pipeline(&series, &params, truth.as_ref())?;

    write_selection_outputs(
        config,
        out_dir,
        &series.labels,
        &outcome.selection,
        &outcome.run_costs,
    )?;
    write_csv_with(&out_dir.join("source.csv"), |buf| {
        io::write_source_csv(
            buf,
            &outcome.source.collapsed,
            outcome.source.fs,
            Some(&config.stamp()),
        )
    })?;
    write_json(
        &out_dir.join("binarized.json"),
        config,
        &json!({"intervals": outcome.binarized.intervals}),
    )?;
    if let Some(eval) = &outcome.eval {
        let report = EvaluateOut {
            iou_mean_seconds: eval.iou.mean_seconds,
            iou_per_rep_seconds: eval.iou.per_rep_seconds.clone(),
            false_positives: eval.iou.false_positives,
            pl_error_per_region: eval.pl_error_per_region.clone(),
            pl_error_mean: eval.pl_error_mean,
            fwhm_error_per_region: eval.fwhm_error_per_region.clone(),
            fwhm_error_mean: eval.fwhm_error_mean,
            fano_factors: eval.fano_factors.clone(),
        };
        write_report(config, out_dir, &report)?;
        println!(
            "pipeline done: IoU {:.3} s, peak-latency error {:.3} s",
            report.iou_mean_seconds, report.pl_error_mean
        );
    } else {
        println!("pipeline done (no ground truth supplied; skipping metrics)");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// montecarlo

fn cmd_montecarlo(config: &Config, out_dir: &Path, iterations: Option<usize>) -> Result<()> {
    let mut mc = config.monte_carlo_config();
    if let Some(n) = iterations {
        mc.iterations = n;
    }
    let (records, summary) = monte_carlo(&mc)?;
    write_mc_outputs(config, out_dir, &records, &summary)?;
    for row in &summary {
        println!(
            "snr {:>5} dB: median PL error {:.3} s, median IoU {:.3} s (fixed kernel {:.3} s), {} ok / {} failed",
            row.snr_db,
            row.median_pl_error,
            row.median_iou_adaptive,
            row.median_iou_fixed,
            row.n_ok,
            row.n_failed
        );
    }
    Ok(())
}

fn write_mc_outputs(
    config: &Config,
    out_dir: &Path,
    records: &[McIterationRecord],
    summary: &[McSummaryRow],
) -> Result<()> {
    let mut text = format!(
        "# {}\nsnr_db,iteration,seed,adaptive_iou_seconds,fixed_iou_seconds,pl_error_mean,fwhm_error_mean,failure\n",
        config.stamp()
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.snr_db,
            r.iteration,
            r.seed,
            opt(r.adaptive_iou_seconds),
            opt(r.fixed_iou_seconds),
            opt(r.pl_error_mean),
            opt(r.fwhm_error_mean),
            r.failure.clone().unwrap_or_default().replace(',', ";")
        ));
    }
    write_atomic(&out_dir.join("montecarlo.csv"), text.as_bytes())?;
    write_json(
        &out_dir.join("summary.json"),
        config,
        &json!({"per_snr": summary}),
    )?;
    Ok(())
}
