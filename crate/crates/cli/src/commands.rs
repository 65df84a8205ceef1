//! Subcommand implementations. Stages communicate through files in the
//! output directory so each one can be rerun in isolation.

use crate::report::ManifestWriter;
use crate::svg;
use crate::CliError;
use drip_core::config::ExperimentConfig;
use drip_core::dynamics::{benchmark_h, benchmark_system_with, fit_growth_constants};
use drip_core::l1drac::{inflated_delta_mu, L1Config};
use drip_core::metrics::{
    certify_contraction, decomposition_violation, delta_iss_check, gap_report_from_pairs,
    policy_gap, run_scenarios, theta_grid, total_gap, uncertainty_gap, DeltaIssParams, GapReport,
    JacobianMode, ScenarioPaths,
};
use drip_core::policy::{
    estimate_lipschitz, expert_policy, load_checkpoint, save_checkpoint, DiffPolicy, ExpertPolicy,
    MlpPolicy, PerturbationSignal, Policy,
};
use drip_core::simulate::{export_ensemble, Ensemble, Partition};
use drip_core::tasil::{generate_training_data, train_tasil, write_training_log, TrainMode};
use drip_core::{RngStream, Vector};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Probe settings for certification; fixed across runs so certificates are
/// comparable.
const CERT_PROBES: usize = 10_000;
const CERT_RADIUS: f64 = 3.0;
const GROWTH_RADIUS: f64 = 10.0;
const GROWTH_GRID: usize = 4000;
const LIPSCHITZ_SAMPLES: usize = 2000;

struct Setup {
    sys: drip_core::dynamics::SystemBundle,
    expert: ExpertPolicy,
    partition: Partition,
    l1: L1Config,
}

fn build_setup(config: &ExperimentConfig) -> Result<Setup, CliError> {
    let params = config.system.benchmark_params();
    let h = Arc::new(benchmark_h(&params, config.system.h_seed));
    let sys = benchmark_system_with(&params, Arc::clone(&h));
    let expert = expert_policy(config.system.k_gain, config.system.expert_sign, h);
    let partition = config
        .partition
        .partition()
        .map_err(|e| CliError::new(1, e.to_string()))?;
    Ok(Setup {
        sys,
        expert,
        partition,
        l1: config.l1.l1_config(),
    })
}

fn checkpoint_path(out: &Path, bc: bool) -> PathBuf {
    out.join(if bc { "policy_bc" } else { "policy" })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json"))
        .map_err(|e| CliError::new_io(path, &e.to_string()))
}

pub fn cmd_certify(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut manifest = ManifestWriter::start("certify", config, out)?;
    let setup = build_setup(config)?;
    let t0 = Instant::now();
    let growth = fit_growth_constants(
        &setup.sys,
        GROWTH_RADIUS,
        GROWTH_GRID,
        setup.partition.horizon,
    )
    .map_err(CliError::from)?;
    manifest.add_timing("growth_constants", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let lambda_fd = certify_contraction(
        &setup.sys,
        &setup.expert,
        CERT_RADIUS,
        CERT_PROBES,
        setup.partition.horizon,
        RngStream::new(config.master_seed, 0xCE),
        JacobianMode::FiniteDifference,
    )
    .map_err(CliError::from)?;
    let lambda_analytic = certify_contraction(
        &setup.sys,
        &setup.expert,
        CERT_RADIUS,
        CERT_PROBES,
        setup.partition.horizon,
        RngStream::new(config.master_seed, 0xCE),
        JacobianMode::Analytic,
    )
    .map_err(CliError::from)?;
    manifest.add_timing("contraction", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (l_pi, l_dpi) = estimate_lipschitz(
        &setup.expert,
        CERT_RADIUS,
        LIPSCHITZ_SAMPLES,
        RngStream::new(config.master_seed, 0x11),
    );
    manifest.add_timing("lipschitz", t0.elapsed().as_secs_f64());

    let report = serde_json::json!({
        "lambda": lambda_fd,
        "lambda_analytic_cross_check": lambda_analytic,
        "delta_mu": growth.delta_mu,
        "delta_sigma": growth.delta_sigma,
        "delta_g": growth.delta_g,
        "expert_l_pi": l_pi,
        "expert_l_dpi": l_dpi,
        "probes": CERT_PROBES,
        "probe_radius": CERT_RADIUS,
        "growth_radius": GROWTH_RADIUS,
        "growth_grid_points": GROWTH_GRID,
    });
    let path = out.join("certification.json");
    write_json(&path, &report)?;
    manifest.add_artifact(&path)?;
    manifest.set_certification(report);
    manifest.finish()?;
    println!(
        "certified: lambda = {lambda_fd:.6}, delta_mu = {:.4}, delta_sigma = {:.4}, delta_g = {:.4}",
        growth.delta_mu, growth.delta_sigma, growth.delta_g
    );
    Ok(())
}

pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    bc: bool,
    skip_certify: bool,
) -> Result<(), CliError> {
    if !skip_certify && !out.join("certification.json").exists() {
        return Err(CliError::new(
            3,
            "no certification artifacts; run `certify` first or pass --skip-certify",
        ));
    }
    let mut manifest = ManifestWriter::start("train", config, out)?;
    let setup = build_setup(config)?;

    let t0 = Instant::now();
    let set = generate_training_data(
        &setup.sys,
        &setup.expert,
        &config.training.initial_law,
        config.training.n_trajectories,
        &setup.partition,
        config.master_seed,
    )
    .map_err(CliError::from)?;
    manifest.add_timing("training_data", t0.elapsed().as_secs_f64());
    let data_dir = out.join("training_data");
    let ensemble = Ensemble {
        trajectories: set.trajectories.clone(),
        initial_law: set.initial_law.clone(),
        master_seed: set.master_seed,
    };
    export_ensemble(&ensemble, &data_dir, "expert").map_err(CliError::from)?;
    manifest.add_artifact(&data_dir.join("expert_manifest.json"))?;

    let mut modes = vec![(TrainMode::Full, false)];
    if bc {
        modes.push((TrainMode::ValueOnly, true));
    }
    for (mode, is_bc) in modes {
        let t0 = Instant::now();
        let opt = config.training.optimizer(mode);
        let init_stream = RngStream::new(config.master_seed, 0x90 + is_bc as u64);
        let outcome = train_tasil(
            &set,
            &setup.expert,
            &config.training.policy_widths,
            &opt,
            init_stream,
        )
        .map_err(CliError::from)?;
        manifest.add_timing(
            if is_bc { "train_bc" } else { "train" },
            t0.elapsed().as_secs_f64(),
        );
        let ckpt = checkpoint_path(out, is_bc);
        save_checkpoint(&outcome.policy, &ckpt, Some(config.master_seed))
            .map_err(CliError::from)?;
        manifest.add_artifact(&ckpt.with_extension("json"))?;
        manifest.add_artifact(&ckpt.with_extension("bin"))?;
        let log_path = out.join(if is_bc {
            "training_log_bc.csv"
        } else {
            "training_log.csv"
        });
        let f = std::fs::File::create(&log_path)
            .map_err(|e| CliError::new_io(&log_path, &e.to_string()))?;
        write_training_log(&outcome.log, std::io::BufWriter::new(f)).map_err(CliError::from)?;
        manifest.add_artifact(&log_path)?;
        println!(
            "trained {} policy: best loss {:.6} over {} steps",
            if is_bc { "bc" } else { "tasil" },
            outcome.best_loss,
            outcome.log.len()
        );
    }
    manifest.finish()
}

fn load_policy(out: &Path, bc: bool) -> Result<MlpPolicy, CliError> {
    let path = checkpoint_path(out, bc);
    if !path.with_extension("json").exists() {
        return Err(CliError::new(
            4,
            format!("missing checkpoint {}; run `train` first", path.display()),
        ));
    }
    load_checkpoint(&path).map_err(|e| CliError::new(4, e.to_string()))
}

fn write_gap_report(
    manifest: &mut ManifestWriter,
    report: &GapReport,
    out: &Path,
    stem: &str,
) -> Result<(), CliError> {
    let csv_path = out.join(format!("{stem}.csv"));
    let f = std::fs::File::create(&csv_path)
        .map_err(|e| CliError::new_io(&csv_path, &e.to_string()))?;
    report
        .to_csv(std::io::BufWriter::new(f))
        .map_err(CliError::from)?;
    manifest.add_artifact(&csv_path)?;
    let json_path = out.join(format!("{stem}.json"));
    write_json(&json_path, &report.summary_json())?;
    manifest.add_artifact(&json_path)?;
    Ok(())
}

/// Certification values needed downstream; recomputed when the certify
/// stage has not run.
fn certification_values(
    config: &ExperimentConfig,
    setup: &Setup,
    out: &Path,
) -> Result<(f64, f64, f64), CliError> {
    let path = out.join("certification.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if let (Some(lambda), Some(delta_g), Some(delta_mu)) = (
                v["lambda"].as_f64(),
                v["delta_g"].as_f64(),
                v["delta_mu"].as_f64(),
            ) {
                return Ok((lambda, delta_g, delta_mu));
            }
        }
    }
    let growth = fit_growth_constants(
        &setup.sys,
        GROWTH_RADIUS,
        GROWTH_GRID,
        setup.partition.horizon,
    )
    .map_err(CliError::from)?;
    let lambda = certify_contraction(
        &setup.sys,
        &setup.expert,
        CERT_RADIUS,
        CERT_PROBES,
        setup.partition.horizon,
        RngStream::new(config.master_seed, 0xCE),
        JacobianMode::FiniteDifference,
    )
    .map_err(CliError::from)?;
    Ok((lambda, growth.delta_g, growth.delta_mu))
}

pub fn cmd_evaluate(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut manifest = ManifestWriter::start("evaluate", config, out)?;
    let setup = build_setup(config)?;
    let policy = load_policy(out, false)?;
    let (lambda, delta_g, delta_mu) = certification_values(config, &setup, out)?;
    let coupling = config.evaluation.coupling_spec();

    // policy-shift gap over the training empirical draws
    let t0 = Instant::now();
    let xis: Vec<Vector> = (0..config.training.n_trajectories)
        .map(|i| config.training.initial_law.sample(config.master_seed, i as u64))
        .collect();
    let pol_gap = policy_gap(&policy, &setup.expert, &setup.sys, &xis, &setup.partition)
        .map_err(CliError::from)?;
    write_gap_report(&mut manifest, &pol_gap, out, "policy_gap")?;
    manifest.add_timing("policy_gap", t0.elapsed().as_secs_f64());

    // uncertainty and total gaps with the additive controller on
    let t0 = Instant::now();
    let unc_gap = uncertainty_gap(
        &policy,
        Some(&setup.l1),
        &setup.sys,
        &coupling,
        config.evaluation.ensemble_size,
        &setup.partition,
        config.master_seed,
    )
    .map_err(CliError::from)?;
    write_gap_report(&mut manifest, &unc_gap, out, "uncertainty_gap")?;
    let tot_gap = total_gap(
        &policy,
        &setup.expert,
        Some(&setup.l1),
        &setup.sys,
        &coupling,
        config.evaluation.ensemble_size,
        &setup.partition,
        config.master_seed,
    )
    .map_err(CliError::from)?;
    write_gap_report(&mut manifest, &tot_gap, out, "total_gap")?;
    manifest.add_timing("gaps", t0.elapsed().as_secs_f64());

    // decomposition check on shared samples
    let t0 = Instant::now();
    let paths = run_scenarios(
        &policy,
        &setup.expert,
        &setup.l1,
        &setup.sys,
        &coupling,
        config.evaluation.ensemble_size,
        &setup.partition,
        config.master_seed,
    )
    .map_err(CliError::from)?;
    let violation = decomposition_violation(&paths);
    manifest.add_timing("decomposition", t0.elapsed().as_secs_f64());

    // incremental-stability bound checks across the theta grid
    let t0 = Instant::now();
    let thetas = theta_grid(lambda, delta_g);
    let stream = RngStream::new(config.master_seed, 0xD1);
    let mut cursor = stream.cursor();
    let iss_csv = out.join("delta_iss.csv");
    {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&iss_csv)
                .map_err(|e| CliError::new_io(&iss_csv, &e.to_string()))?,
        );
        use std::io::Write;
        writeln!(w, "instance,theta,min_margin,falsified")
            .map_err(|e| CliError::new_io(&iss_csv, &e.to_string()))?;
        let n = setup.sys.state_dim;
        let m = setup.sys.input_dim;
        for (inst, &theta) in thetas.iter().enumerate() {
            let xi1 = Vector((0..n).map(|_| cursor.next()).collect());
            let xi2 = Vector((0..n).map(|_| cursor.next()).collect());
            let sig = PerturbationSignal {
                partition: setup.partition,
                values: (0..setup.partition.k)
                    .map(|_| Vector((0..m).map(|_| 0.5 * cursor.next()).collect()))
                    .collect(),
            };
            let params =
                DeltaIssParams::new(lambda, theta, delta_g).map_err(CliError::from)?;
            let rows = delta_iss_check(
                &setup.sys,
                &setup.expert,
                &sig,
                &xi1,
                &xi2,
                &params,
                &setup.partition,
            )
            .map_err(CliError::from)?;
            let min_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
            writeln!(w, "{inst},{theta},{min_margin},{}", min_margin < -1e-6)
                .map_err(|e| CliError::new_io(&iss_csv, &e.to_string()))?;
        }
    }
    manifest.add_artifact(&iss_csv)?;
    manifest.add_timing("delta_iss", t0.elapsed().as_secs_f64());

    // policy-shift inflation of the drift bound, for the robustness margin
    let diff = DiffPolicy {
        a: &policy,
        b: &setup.expert,
    };
    let psi0 = diff.evaluate(&Vector::zeros(setup.sys.state_dim)).norm();
    let (l_gap, _) = estimate_lipschitz(
        &diff,
        CERT_RADIUS,
        1000,
        RngStream::new(config.master_seed, 0x1F),
    );
    let summary = serde_json::json!({
        "lambda": lambda,
        "delta_g": delta_g,
        "delta_mu": delta_mu,
        "policy_gap_max": pol_gap.max_gap,
        "uncertainty_gap_max": unc_gap.max_gap,
        "total_gap_max": tot_gap.max_gap,
        "decomposition_max_violation": violation,
        "decomposition_holds": violation <= 1e-12,
        "inflated_delta_mu": inflated_delta_mu(delta_mu, delta_g, psi0, l_gap),
        "policy_shift_psi0": psi0,
        "policy_shift_l_gap": l_gap,
    });
    let summary_path = out.join("evaluation.json");
    write_json(&summary_path, &summary)?;
    manifest.add_artifact(&summary_path)?;
    manifest.finish()?;
    println!(
        "gaps: policy {:.4}, uncertainty {:.4}, total {:.4}; decomposition violation {:.2e}",
        pol_gap.max_gap, unc_gap.max_gap, tot_gap.max_gap, violation
    );
    Ok(())
}

/// Reports for the three comparison scenarios against the expert reference.
pub struct Figure5Reports {
    pub nominal: GapReport,
    pub uncertain_tasil: GapReport,
    pub uncertain_drip: GapReport,
}

pub fn figure5_reports(paths: &ScenarioPaths, partition: &Partition) -> Figure5Reports {
    Figure5Reports {
        nominal: gap_report_from_pairs(&paths.expert_nominal, &paths.tasil_nominal, partition),
        uncertain_tasil: gap_report_from_pairs(
            &paths.expert_nominal,
            &paths.uncertain_tasil,
            partition,
        ),
        uncertain_drip: gap_report_from_pairs(
            &paths.expert_nominal,
            &paths.uncertain_drip,
            partition,
        ),
    }
}

/// Combined CSV with one row per knot.
pub fn write_figure5_csv<W: std::io::Write>(
    reports: &Figure5Reports,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "t,gap_nominal,gap_uncertain_tasil,gap_uncertain_drip,\
         se_nominal,se_uncertain_tasil,se_uncertain_drip,\
         diverged_nominal,diverged_uncertain_tasil,diverged_uncertain_drip"
    )?;
    let n = reports.nominal.times.len();
    for j in 0..n {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            reports.nominal.times[j],
            reports.nominal.gap_mean[j],
            reports.uncertain_tasil.gap_mean[j],
            reports.uncertain_drip.gap_mean[j],
            reports.nominal.gap_se[j],
            reports.uncertain_tasil.gap_se[j],
            reports.uncertain_drip.gap_se[j],
            reports.nominal.diverged[j],
            reports.uncertain_tasil.diverged[j],
            reports.uncertain_drip.diverged[j],
        )?;
    }
    Ok(())
}

pub fn cmd_figure5(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut manifest = ManifestWriter::start("figure5", config, out)?;
    let setup = build_setup(config)?;
    let policy = load_policy(out, false)?;
    let coupling = config.evaluation.coupling_spec();
    let t0 = Instant::now();
    let paths = run_scenarios(
        &policy,
        &setup.expert,
        &setup.l1,
        &setup.sys,
        &coupling,
        config.evaluation.ensemble_size,
        &setup.partition,
        config.master_seed,
    )
    .map_err(CliError::from)?;
    manifest.add_timing("scenarios", t0.elapsed().as_secs_f64());
    let reports = figure5_reports(&paths, &setup.partition);

    let csv_path = out.join("figure5.csv");
    let f = std::fs::File::create(&csv_path)
        .map_err(|e| CliError::new_io(&csv_path, &e.to_string()))?;
    write_figure5_csv(&reports, std::io::BufWriter::new(f))
        .map_err(|e| CliError::new_io(&csv_path, &e.to_string()))?;
    manifest.add_artifact(&csv_path)?;

    write_gap_report(&mut manifest, &reports.nominal, out, "figure5_nominal")?;
    write_gap_report(
        &mut manifest,
        &reports.uncertain_tasil,
        out,
        "figure5_uncertain_tasil",
    )?;
    write_gap_report(
        &mut manifest,
        &reports.uncertain_drip,
        out,
        "figure5_uncertain_drip",
    )?;

    // per-scenario trajectory manifests (seeds + divergence flags)
    for (name, trajs) in [
        ("nominal_tasil", &paths.tasil_nominal),
        ("uncertain_tasil", &paths.uncertain_tasil),
        ("uncertain_drip", &paths.uncertain_drip),
    ] {
        let rows: Vec<serde_json::Value> = trajs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                serde_json::json!({
                    "index": i,
                    "provenance": t.provenance,
                    "diverged_at": t.diverged_at,
                })
            })
            .collect();
        let path = out.join(format!("figure5_{name}_trajectories.json"));
        write_json(
            &path,
            &serde_json::json!({
                "scenario": name,
                "count": rows.len(),
                "trajectories": rows,
            }),
        )?;
        manifest.add_artifact(&path)?;
    }

    // controller trace for the first drip sample, at knot resolution
    {
        let (_, xi_bar) = coupling.draw_pair(config.master_seed, 0);
        let mut ctrl = drip_core::l1drac::L1Controller::new(
            &policy,
            &setup.sys,
            setup.l1,
            setup.partition,
        )
        .map_err(CliError::from)?
        .with_trace(drip_core::l1drac::TraceMode::Knots);
        let mut cb = |t: f64, x: &Vector| ctrl.control(t, x);
        drip_core::simulate::integrate_sde(
            &setup.sys,
            &mut cb,
            &xi_bar,
            &setup.partition,
            RngStream::new(config.master_seed, 0),
        )
        .map_err(CliError::from)?;
        let trace_path = out.join("l1_trace.csv");
        let f = std::fs::File::create(&trace_path)
            .map_err(|e| CliError::new_io(&trace_path, &e.to_string()))?;
        ctrl.trace_csv(std::io::BufWriter::new(f))
            .map_err(CliError::from)?;
        manifest.add_artifact(&trace_path)?;
    }

    let chart = svg::line_chart(
        "Total imitation gap across scenarios",
        "t [s]",
        "mean gap",
        &[
            svg::Series {
                label: "nominal",
                color: "#2166ac",
                points: reports
                    .nominal
                    .times
                    .iter()
                    .zip(&reports.nominal.gap_mean)
                    .map(|(&t, &g)| (t, g))
                    .collect(),
            },
            svg::Series {
                label: "uncertain",
                color: "#b2182b",
                points: reports
                    .uncertain_tasil
                    .times
                    .iter()
                    .zip(&reports.uncertain_tasil.gap_mean)
                    .map(|(&t, &g)| (t, g))
                    .collect(),
            },
            svg::Series {
                label: "uncertain + additive controller",
                color: "#1b7837",
                points: reports
                    .uncertain_drip
                    .times
                    .iter()
                    .zip(&reports.uncertain_drip.gap_mean)
                    .map(|(&t, &g)| (t, g))
                    .collect(),
            },
        ],
    );
    let svg_path = out.join("figure5.svg");
    std::fs::write(&svg_path, chart).map_err(|e| CliError::new_io(&svg_path, &e.to_string()))?;
    manifest.add_artifact(&svg_path)?;
    manifest.finish()?;
    println!(
        "figure5: nominal {:.4}, uncertain {:.4} ({} diverged), drip {:.4} ({} diverged)",
        reports.nominal.max_gap,
        reports.uncertain_tasil.max_gap,
        reports.uncertain_tasil.total_diverged(),
        reports.uncertain_drip.max_gap,
        reports.uncertain_drip.total_diverged(),
    );
    Ok(())
}

pub fn cmd_sweep(
    config: &ExperimentConfig,
    out: &Path,
    omegas: &[f64],
    ts_values: &[f64],
    lambda_values: &[f64],
) -> Result<(), CliError> {
    let mut manifest = ManifestWriter::start("sweep", config, out)?;
    let setup = build_setup(config)?;
    let policy = load_policy(out, false)?;
    let coupling = config.evaluation.coupling_spec();
    let sweep_path = out.join("sweep.csv");
    {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&sweep_path)
                .map_err(|e| CliError::new_io(&sweep_path, &e.to_string()))?,
        );
        use std::io::Write;
        writeln!(w, "omega,ts,lambda_s,max_total_gap,diverged,status")
            .map_err(|e| CliError::new_io(&sweep_path, &e.to_string()))?;
        for &omega in omegas {
            for &ts in ts_values {
                for &lambda_s in lambda_values {
                    let l1 = L1Config {
                        omega,
                        ts,
                        lambda_s,
                        sign_variant: setup.l1.sign_variant,
                    };
                    if l1.validate(setup.partition.dt_sub()).is_err() {
                        writeln!(w, "{omega},{ts},{lambda_s},,,invalid_ts")
                            .map_err(|e| CliError::new_io(&sweep_path, &e.to_string()))?;
                        continue;
                    }
                    let report = total_gap(
                        &policy,
                        &setup.expert,
                        Some(&l1),
                        &setup.sys,
                        &coupling,
                        config.evaluation.ensemble_size,
                        &setup.partition,
                        config.master_seed,
                    )
                    .map_err(CliError::from)?;
                    writeln!(
                        w,
                        "{omega},{ts},{lambda_s},{},{},ok",
                        report.max_gap,
                        report.total_diverged()
                    )
                    .map_err(|e| CliError::new_io(&sweep_path, &e.to_string()))?;
                }
            }
        }
    }
    manifest.add_artifact(&sweep_path)?;
    manifest.finish()?;
    println!("sweep written to {}", sweep_path.display());
    Ok(())
}

