//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). Criteria 7, 8, and 10 share one
//! trained-policy fixture reproducing the frozen reference run
//! (master_seed 0, n = 20 expert trajectories, 5000 optimizer steps,
//! 100-path ensembles).
//!
//! Criterion 6 is expected to fail; the steady-state residual of the sampled
//! adaptation law at the pinned parameters is 1 - exp(-lambda_s Ts) = 4.9%,
//! which no parameter-free fix brings under the stated 2% tolerance. The
//! test asserts the criterion exactly as stated and documents the analysis
//! in its failure message.

use drip_core::dynamics::{
    benchmark_h, benchmark_system_with, fit_growth_constants, BenchmarkParams, DiffusionFn,
    DriftFn, InputOpFn, SystemBundle,
};
use drip_core::l1drac::{AdaptationSign, L1Config, L1Controller, TraceMode};
use drip_core::metrics::{
    certify_contraction, decomposition_violation, delta_iss_check, gap_report_from_pairs,
    per_path_max_gaps, policy_gap, run_scenarios, theta_grid, CouplingSpec, DeltaIssParams,
    GapReport, JacobianMode, ScenarioPaths,
};
use drip_core::policy::{
    expert_policy, mlp_policy, AffinePolicy, ExpertPolicy, PerturbationSignal,
    SignConvention,
};
use drip_core::simulate::{
    integrate_sde, simulate_ensemble, InitialLaw, Partition,
};
use drip_core::tasil::{
    generate_training_data, loss_and_gradient, tasil_loss, train_tasil, JacNorm, OptimizerConfig,
    Smoothing, TrainMode,
};
use drip_core::{Matrix, RngStream, Vector};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

/// Frozen regression fixtures from the first validated run (see the
/// repository history): nominal 0.0090, uncertain 0.5057, drip 0.0641.
const UNCERTAIN_VS_NOMINAL_FACTOR: f64 = 10.0;
const DRIP_VS_NOMINAL_FACTOR: f64 = 10.0;

const MASTER_SEED: u64 = 0;

struct Fixture {
    partition: Partition,
    paths: ScenarioPaths,
}

fn benchmark_setup() -> (SystemBundle, ExpertPolicy) {
    let params = BenchmarkParams::default();
    let h = Arc::new(benchmark_h(&params, 1));
    let sys = benchmark_system_with(&params, Arc::clone(&h));
    (sys, expert_policy(2.0, SignConvention::CancelH, h))
}

fn unit_box(n: usize) -> InitialLaw {
    InitialLaw::UniformBox {
        lo: vec![-1.0; n],
        hi: vec![1.0; n],
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (sys, expert) = benchmark_setup();
        let partition = Partition::new(10.0, 100, 10).unwrap();
        let set = generate_training_data(
            &sys,
            &expert,
            &unit_box(4),
            20,
            &partition,
            MASTER_SEED,
        )
        .expect("expert data generation");
        let config = OptimizerConfig::default(); // 5000 steps, lr 1e-3
        let outcome = train_tasil(
            &set,
            &expert,
            &[4, 16, 4],
            &config,
            RngStream::new(MASTER_SEED, 0x90),
        )
        .expect("training");
        let initial_loss = outcome.log.first().expect("log").loss;
        assert!(
            outcome.best_loss < 0.1 * initial_loss,
            "trainer did not converge: {initial_loss} -> {}",
            outcome.best_loss
        );
        let coupling = CouplingSpec::synchronous(unit_box(4));
        let paths = run_scenarios(
            &outcome.policy,
            &expert,
            &L1Config::default(),
            &sys,
            &coupling,
            100,
            &partition,
            MASTER_SEED,
        )
        .expect("scenario rollouts");
        Fixture { partition, paths }
    })
}

#[test]
fn criterion_01_contraction_certificate() {
    let t0 = Instant::now();
    let (sys, expert) = benchmark_setup();
    let lambda = certify_contraction(
        &sys,
        &expert,
        3.0,
        10_000,
        10.0,
        RngStream::new(MASTER_SEED, 0xCE),
        JacobianMode::FiniteDifference,
    )
    .expect("certification");
    let ok = (lambda - 0.55).abs() <= 1e-6;
    println!(
        "ACCEPTANCE 1: {} — certified lambda = {lambda:.9} (target 0.55 +- 1e-6, 1e4 probes) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "lambda = {lambda} outside 0.55 +- 1e-6");
}

#[test]
fn criterion_02_growth_bound_certificate() {
    let t0 = Instant::now();
    let (sys, _) = benchmark_setup();
    let growth = fit_growth_constants(&sys, 10.0, 4000, 10.0).expect("growth fit");
    let mu_ok = growth.delta_mu >= 0.223 && growth.delta_mu <= 0.236;
    let g_ok = growth.delta_g == 0.525;
    println!(
        "ACCEPTANCE 2: {} — delta_mu = {:.6} (in [0.223, 0.236]), delta_g = {} (== 0.525) [{:.1} s]",
        if mu_ok && g_ok { "PASS" } else { "FAIL" },
        growth.delta_mu,
        growth.delta_g,
        t0.elapsed().as_secs_f64()
    );
    assert!(mu_ok, "delta_mu = {}", growth.delta_mu);
    assert!(g_ok, "delta_g = {}", growth.delta_g);
}

#[test]
fn criterion_03_delta_iss_falsification_suite() {
    let t0 = Instant::now();
    let (sys, expert) = benchmark_setup();
    let partition = Partition::new(10.0, 100, 10).unwrap();
    let lambda = certify_contraction(
        &sys,
        &expert,
        3.0,
        10_000,
        10.0,
        RngStream::new(MASTER_SEED, 0xCE),
        JacobianMode::FiniteDifference,
    )
    .expect("certification");
    let delta_g = 0.525;
    let thetas = theta_grid(lambda, delta_g);
    let stream = RngStream::new(MASTER_SEED, 0xA3);
    let mut cursor = stream.cursor();
    let mut worst = f64::INFINITY;
    for instance in 0..100 {
        let xi1 = Vector((0..4).map(|_| cursor.next()).collect());
        let xi2 = Vector((0..4).map(|_| cursor.next()).collect());
        let sig = PerturbationSignal {
            partition,
            values: (0..partition.k)
                .map(|_| Vector((0..4).map(|_| 0.5 * cursor.next()).collect()))
                .collect(),
        };
        let theta = thetas[instance % thetas.len()];
        let params = DeltaIssParams::new(lambda, theta, delta_g).unwrap();
        let rows = delta_iss_check(&sys, &expert, &sig, &xi1, &xi2, &params, &partition)
            .expect("bound check");
        for row in rows {
            worst = worst.min(row.margin);
        }
    }
    let ok = worst >= -1e-6;
    println!(
        "ACCEPTANCE 3: {} — 100 random instances, min margin {worst:.3e} (tolerance -1e-6) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "bound falsified with margin {worst}");
}

#[test]
fn criterion_04_gradient_correctness() {
    let t0 = Instant::now();
    let (sys, expert) = benchmark_setup();
    let partition = Partition::new(0.5, 5, 4).unwrap();
    let set = generate_training_data(&sys, &expert, &unit_box(4), 2, &partition, 17)
        .expect("training data");
    let smoothing = Smoothing::LogSumExp { beta: 10.0 };
    let mut max_rel: f64 = 0.0;
    for point in 0..5 {
        let mut pi = mlp_policy(&[4, 8, 4], RngStream::new(100 + point, 0));
        let (_, grad) = loss_and_gradient(
            &pi,
            &expert,
            &set,
            smoothing,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .expect("gradient");
        let p0 = pi.net.params();
        let h = 1e-5;
        for idx in 0..p0.len() {
            let mut pp = p0.clone();
            pp[idx] += h;
            pi.net.set_params(&pp);
            let fp = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Operator2, TrainMode::Full)
                .unwrap()
                .mean_loss;
            pp[idx] -= 2.0 * h;
            pi.net.set_params(&pp);
            let fm = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Operator2, TrainMode::Full)
                .unwrap()
                .mean_loss;
            pi.net.set_params(&p0);
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((grad[idx] - fd).abs() / (1.0 + fd.abs()));
        }
    }
    let ok = max_rel < 1e-4;
    println!(
        "ACCEPTANCE 4: {} — 5 parameter points on a 4-8-4 net, max rel grad err {max_rel:.3e} (< 1e-4) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "gradient error {max_rel}");
}

#[test]
fn criterion_05_sde_integrator_calibration() {
    let t0 = Instant::now();
    let sigma = 1.0;
    let x0 = 1.0;
    let f: DriftFn = Arc::new(|_t, x: &Vector| x.scale(-1.0));
    let g: InputOpFn = Arc::new(|_t| Matrix::identity(1));
    let lmu: DriftFn = Arc::new(|_t, _x: &Vector| Vector::zeros(1));
    let lsig: DiffusionFn = Arc::new(move |_t, _x: &Vector| Matrix::identity(1).scale(sigma));
    let sys = SystemBundle::new(1, 1, 1, f, g, lmu, lsig);
    let partition = Partition::new(2.0, 100, 2).unwrap();
    let paths = 10_000;
    let make = |_i: usize| -> Box<dyn FnMut(f64, &Vector) -> Vector> {
        Box::new(|_t, _x| Vector::zeros(1))
    };
    let ens = simulate_ensemble(
        &sys,
        &make,
        &InitialLaw::PointMass { at: vec![x0] },
        paths,
        &partition,
        31415,
    )
    .expect("ensemble");
    let finals: Vec<f64> = ens
        .trajectories
        .iter()
        .map(|t| t.states.last().unwrap()[0])
        .collect();
    let nf = paths as f64;
    let mean = finals.iter().sum::<f64>() / nf;
    let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let exact_mean = x0 * (-2.0f64).exp();
    let exact_var = sigma * sigma * (1.0 - (-4.0f64).exp()) / 2.0;
    let se_mean = (exact_var / nf).sqrt();
    let se_var = exact_var * (2.0 / nf).sqrt();
    let mean_ok = (mean - exact_mean).abs() < 3.0 * se_mean;
    let var_ok = (var - exact_var).abs() < 3.0 * se_var;
    println!(
        "ACCEPTANCE 5: {} — OU terminal mean {mean:.5} (exact {exact_mean:.5}, 3se {:.5}), \
         var {var:.5} (exact {exact_var:.5}, 3se {:.5}) [{:.1} s]",
        if mean_ok && var_ok { "PASS" } else { "FAIL" },
        3.0 * se_mean,
        3.0 * se_var,
        t0.elapsed().as_secs_f64()
    );
    assert!(mean_ok, "mean {mean} vs {exact_mean}");
    assert!(var_ok, "var {var} vs {exact_var}");
}

#[test]
fn criterion_06_l1_disturbance_rejection_oracle() {
    let t0 = Instant::now();
    let c = 1.0;
    let f: DriftFn = Arc::new(|_t, _x: &Vector| Vector::zeros(1));
    let g: InputOpFn = Arc::new(|_t| Matrix::identity(1));
    let lmu: DriftFn = Arc::new(move |_t, _x: &Vector| Vector::from_slice(&[c]));
    let lsig: DiffusionFn = Arc::new(|_t, _x: &Vector| Matrix::zeros(1, 1));
    let sys = SystemBundle::new(1, 1, 1, f, g, lmu, lsig);
    let config = L1Config {
        omega: 20.0,
        ts: 0.005,
        lambda_s: 10.0,
        sign_variant: AdaptationSign::Verbatim,
    };
    let partition = Partition::new(0.3, 60, 5).unwrap(); // dt_sub = 1e-3
    let base = AffinePolicy::linear(Matrix::zeros(1, 1));
    let mut ctrl = L1Controller::new(&base, &sys, config, partition)
        .unwrap()
        .with_trace(TraceMode::EverySubstep);
    let mut cb = |t: f64, x: &Vector| ctrl.control(t, x);
    integrate_sde(
        &sys,
        &mut cb,
        &Vector::zeros(1),
        &partition,
        RngStream::new(0, 0),
    )
    .expect("rollout");
    let worst_rel = ctrl
        .trace
        .iter()
        .filter(|r| r.t >= 0.25)
        .map(|r| (r.u[0] + c).abs() / c)
        .fold(0.0, f64::max);
    let ok = worst_rel < 0.02;
    println!(
        "ACCEPTANCE 6: {} — filter output error {:.2}% of c after 0.25 s (tolerance 2%) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        100.0 * worst_rel,
        t0.elapsed().as_secs_f64()
    );
    assert!(
        ok,
        "rejection error {:.2}% exceeds 2%: the sampled adaptation law's stable fixed point is \
         exp(-lambda_s Ts) c, a structural {:.2}% steady residual at lambda_s Ts = 0.05, plus the \
         filter transient; the tolerance requires lambda_s Ts <= 0.0202 (see the decisions ledger)",
        100.0 * worst_rel,
        100.0 * (1.0 - (-0.05f64).exp())
    );
}

#[test]
fn criterion_07_decomposition_inequality() {
    let fx = fixture();
    let t0 = Instant::now();
    let violation = decomposition_violation(&fx.paths);
    // aggregated curves inherit the pathwise inequality on shared samples
    let total = gap_report_from_pairs(&fx.paths.expert_nominal, &fx.paths.uncertain_drip, &fx.partition);
    let pol = gap_report_from_pairs(&fx.paths.expert_nominal, &fx.paths.tasil_nominal, &fx.partition);
    let unc = gap_report_from_pairs(&fx.paths.tasil_nominal, &fx.paths.uncertain_drip, &fx.partition);
    let mut agg_violation = f64::NEG_INFINITY;
    for j in 0..total.times.len() {
        if total.gap_mean[j].is_finite() {
            agg_violation = agg_violation.max(total.gap_mean[j] - pol.gap_mean[j] - unc.gap_mean[j]);
        }
    }
    let ok = violation <= 1e-12 && agg_violation <= 1e-12;
    println!(
        "ACCEPTANCE 7: {} — pathwise violation {violation:.3e}, aggregated violation {agg_violation:.3e} \
         (tolerance 1e-12, 100 shared paths) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "decomposition violated: {violation} / {agg_violation}");
}

#[test]
fn criterion_08_scenario_ordinal_reproduction() {
    let fx = fixture();
    let t0 = Instant::now();
    let nominal = gap_report_from_pairs(&fx.paths.expert_nominal, &fx.paths.tasil_nominal, &fx.partition);
    let uncertain = gap_report_from_pairs(&fx.paths.expert_nominal, &fx.paths.uncertain_tasil, &fx.partition);
    let drip = gap_report_from_pairs(&fx.paths.expert_nominal, &fx.paths.uncertain_drip, &fx.partition);
    let order_ok = nominal.max_gap <= drip.max_gap;
    let uncertain_ok = uncertain.total_diverged() >= 1
        || uncertain.max_gap >= UNCERTAIN_VS_NOMINAL_FACTOR * nominal.max_gap;
    let drip_ok = drip.max_gap <= DRIP_VS_NOMINAL_FACTOR * nominal.max_gap;
    let ok = order_ok && uncertain_ok && drip_ok;
    println!(
        "ACCEPTANCE 8: {} — nominal {:.4}, uncertain {:.4} ({} diverged), drip {:.4}; \
         frozen thresholds: uncertain >= {:.0}x nominal or diverged, drip <= {:.0}x nominal [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        nominal.max_gap,
        uncertain.max_gap,
        uncertain.total_diverged(),
        drip.max_gap,
        UNCERTAIN_VS_NOMINAL_FACTOR,
        DRIP_VS_NOMINAL_FACTOR,
        t0.elapsed().as_secs_f64()
    );
    assert!(order_ok, "nominal gap exceeds drip gap");
    assert!(
        uncertain_ok,
        "uncertain scenario neither diverged nor exceeded {UNCERTAIN_VS_NOMINAL_FACTOR}x nominal"
    );
    assert!(
        drip_ok,
        "drip gap {} above {DRIP_VS_NOMINAL_FACTOR}x nominal {}",
        drip.max_gap, nominal.max_gap
    );
}

#[test]
fn criterion_09_sample_efficiency_trend() {
    let t0 = Instant::now();
    let (sys, expert) = benchmark_setup();
    let partition = Partition::new(10.0, 100, 10).unwrap();
    // common evaluation draws, independent of every training seed
    let eval_xis: Vec<Vector> = (0..50)
        .map(|i| unit_box(4).sample(777, i as u64))
        .collect();
    let config = OptimizerConfig {
        steps: 800,
        lr: 3e-3,
        ..Default::default()
    };
    let ns = [5usize, 10, 20];
    let mut medians = Vec::new();
    let mut med_ses = Vec::new();
    for &n in &ns {
        let mut gaps: Vec<(f64, f64)> = (0..5)
            .map(|seed| {
                // same master seed across n, so the sets are nested:
                // the n = 20 run sees a superset of the n = 5 draws
                let data_seed = 1000 + 17 * seed as u64;
                let set = generate_training_data(&sys, &expert, &unit_box(4), n, &partition, data_seed)
                    .expect("training data");
                let outcome = train_tasil(
                    &set,
                    &expert,
                    &[4, 16, 4],
                    &config,
                    RngStream::new(data_seed, 0x90),
                )
                .expect("training");
                let report = policy_gap(&outcome.policy, &expert, &sys, &eval_xis, &partition)
                    .expect("gap");
                (report.max_gap, report.gap_se[report.argmax_knot])
            })
            .collect();
        gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (median, med_se) = gaps[2];
        medians.push(median);
        med_ses.push(med_se);
    }
    // non-increasing within one combined Monte Carlo standard error
    let mut ok = true;
    for i in 1..medians.len() {
        let se = (med_ses[i - 1].powi(2) + med_ses[i].powi(2)).sqrt();
        if medians[i] > medians[i - 1] + se {
            ok = false;
        }
    }
    println!(
        "ACCEPTANCE 9: {} — median policy gap over 5 seeds: n=5 -> {:.4}, n=10 -> {:.4}, n=20 -> {:.4} \
         (non-increasing within 1 MC se) [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        medians[0],
        medians[1],
        medians[2],
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "medians increased beyond the MC band: {medians:?} (se {med_ses:?})");
}

#[test]
fn criterion_10_moment_tail_consistency() {
    let fx = fixture();
    let t0 = Instant::now();
    // uncertainty-gap process on the drip ensemble: X vs the nominal rollout
    let report: GapReport =
        gap_report_from_pairs(&fx.paths.tasil_nominal, &fx.paths.uncertain_drip, &fx.partition);
    let max_gaps = per_path_max_gaps(&fx.paths.tasil_nominal, &fx.paths.uncertain_drip);
    let alive: Vec<f64> = max_gaps.into_iter().flatten().collect();
    let n = alive.len();
    assert!(n >= 90, "too many diverged paths for a tail estimate");
    let mut all_ok = true;
    let mut detail = String::new();
    for &delta in &[0.1f64, 0.05] {
        let p = (1.0 / delta).sqrt().ln().ceil().max(1.0) as usize;
        let order_index = report
            .p_orders
            .iter()
            .position(|&q| q == p)
            .expect("moment order available");
        let threshold = std::f64::consts::E * report.max_moment(order_index);
        let exceed = alive.iter().filter(|&&g| g > threshold).count() as f64 / n as f64;
        let allowance = delta + 3.0 * (delta * (1.0 - delta) / n as f64).sqrt();
        let ok = exceed <= allowance;
        all_ok &= ok;
        detail.push_str(&format!(
            " delta={delta}: p={p}, tail {exceed:.3} <= {allowance:.3} ({});",
            if ok { "ok" } else { "violated" }
        ));
    }
    println!(
        "ACCEPTANCE 10: {} —{detail} [{:.1} s]",
        if all_ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(all_ok, "tail bound violated:{detail}");
}

#[test]
fn criterion_11_worker_count_determinism() {
    let t0 = Instant::now();
    let out = std::env::temp_dir().join("drip_acceptance_determinism");
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out).unwrap();
    let config_path = out.join("config.toml");
    std::fs::write(
        &config_path,
        "master_seed = 7\n\n[training]\nn_trajectories = 8\nsteps = 600\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_drip");
    let run = |args: &[&str]| {
        let status = std::process::Command::new(bin)
            .args(args)
            .status()
            .expect("spawn drip");
        assert!(status.success(), "drip {args:?} failed");
    };
    let out_s = out.to_str().unwrap();
    let cfg_s = config_path.to_str().unwrap();
    run(&["train", "--config", cfg_s, "--out", out_s, "--skip-certify", "--workers", "2"]);
    let artifacts = [
        "figure5.csv",
        "figure5_nominal.csv",
        "figure5_uncertain_tasil.csv",
        "figure5_uncertain_drip.csv",
    ];
    run(&["figure5", "--config", cfg_s, "--out", out_s, "--workers", "1"]);
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| std::fs::read(out.join(a)).expect("artifact"))
        .collect();
    run(&["figure5", "--config", cfg_s, "--out", out_s, "--workers", "3"]);
    let second: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| std::fs::read(out.join(a)).expect("artifact"))
        .collect();
    let ok = first == second;
    println!(
        "ACCEPTANCE 11: {} — figure5 outputs bit-identical across --workers 1 vs 3 [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    assert!(ok, "worker count changed the output bytes");
}
