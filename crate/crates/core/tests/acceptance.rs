//! Acceptance battery: one test per shipped claim, each at its stated
//! tolerance, each printing a single `[acceptance] ... PASS` line (visible
//! under `--nocapture`). Statistical claims run on small networks — 20 APs,
//! 4 users — sized so the whole battery stays well inside its runtime
//! budgets; the reporting anchor additionally runs one full-scale campaign.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellfree_sim::channel::synthesize_all;
use cellfree_sim::harness::{
    default_pmax_sweep_dbm, run_campaign, write_results, CampaignOptions, CampaignResults,
    CampaignRow, ModeTemplate, PowerAlg,
};
use cellfree_sim::optimizer::{
    interference_logdet_grad_ap, maximize_ase, maximize_gee, rate_split_terms,
};
use cellfree_sim::protocol::{
    associate, dft_analog_init, generate_pilots, hybrid_factorize, ms_combiner,
    norms_from_effective, random_analog_init, trace_error, true_effective, uplink_train,
    zf_precoders, Association, Beamforming, CsiFlavor,
};
use cellfree_sim::rate::{self, GainTensor, PowerAllocation, PowerModelKind};
use cellfree_sim::scenario::{realize_drop, DropStreams, Mode, ScenarioConfig};

/// 20 APs with 8 antennas, 4 users with 4 antennas, single stream each,
/// clusters of 2 — small enough that every claim below runs in seconds.
fn desk_config() -> ScenarioConfig {
    ScenarioConfig {
        num_aps: 20,
        num_ms: 4,
        n_ap: 8,
        n_ms: 4,
        mux_order: 1,
        uc_cluster_size: 2,
        n_rf: 4,
        drops: 10,
        ..ScenarioConfig::default()
    }
}

fn options(templates: &[&str], pmax_dbm: &[f64]) -> CampaignOptions {
    CampaignOptions {
        templates: templates.iter().map(|s| s.parse().unwrap()).collect(),
        pmax_dbm: pmax_dbm.to_vec(),
        threads: 1,
        record_traces: false,
        measure_time: false,
    }
}

/// Full perfect-CSI pipeline for one drop: channels, association, ZF,
/// effective gains.
fn desk_gains(cfg: &ScenarioConfig, drop: usize) -> (GainTensor, Association) {
    let geom = realize_drop(cfg, drop);
    let streams = DropStreams::new(cfg.master_seed, drop);
    let channels = synthesize_all(cfg, &geom, &streams).unwrap();
    let combiner = ms_combiner(cfg.n_ms, cfg.mux_order).unwrap();
    let eff = true_effective(&channels, &combiner);
    let assoc = associate(&norms_from_effective(&eff), cfg.mode, cfg.uc_cluster_size).unwrap();
    let prec =
        zf_precoders(&eff, &assoc, cfg.protocol.zf_ridge_rel, cfg.protocol.zf_scope).unwrap();
    let g = rate::effective_gains(&channels, &combiner, &prec, &assoc, cfg.noise_power_w())
        .unwrap();
    (g, assoc)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_stack(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    })
}

/// GEE per (drop, budget) for the rows matching `pred`.
fn gee_cells(
    results: &CampaignResults,
    pred: impl Fn(&CampaignRow) -> bool,
) -> BTreeMap<(usize, u64), f64> {
    results
        .rows
        .iter()
        .filter(|r| pred(r))
        .map(|r| ((r.drop, r.pmax_dbm.to_bits()), r.gee_mbit_per_joule))
        .collect()
}

#[test]
fn criterion_01_optimized_traces_are_monotone() {
    let started = Instant::now();
    let cfg = desk_config();
    let mut opt = options(&["uc-fd-perfect-opt_gee"], &default_pmax_sweep_dbm());
    opt.record_traces = true;
    let results = run_campaign(&cfg, &opt).unwrap();
    assert!(results.failures.is_empty(), "{:?}", results.failures);
    assert_eq!(results.rows.len(), 10 * 9);

    let mut steps = 0usize;
    for row in &results.rows {
        let trace = row.trace.as_ref().expect("optimized rows carry a trace");
        for w in trace.steps.windows(2) {
            assert!(
                w[1].true_objective >= w[0].true_objective,
                "objective dropped from {} to {} (drop {}, {} dBm)",
                w[0].true_objective,
                w[1].true_objective,
                row.drop,
                row.pmax_dbm
            );
            steps += 1;
        }
        if let Some(last) = trace.steps.last() {
            assert_eq!(trace.final_objective, last.true_objective);
        }
        assert_eq!(row.gee_mbit_per_joule, trace.final_objective);
    }
    assert!(steps > 0);

    // ascending-budget warm starts also keep the per-drop curve monotone
    for drop in 0..cfg.drops {
        let curve: Vec<f64> = results
            .rows
            .iter()
            .filter(|r| r.drop == drop)
            .map(|r| r.gee_mbit_per_joule)
            .collect();
        assert_eq!(curve.len(), 9);
        for w in curve.windows(2) {
            assert!(w[1] >= w[0], "GEE fell along the budget sweep: {curve:?}");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}");
    println!(
        "[acceptance] criterion 1 (monotone optimizer traces, {steps} steps checked in {elapsed:.1?}): PASS"
    );
}

#[test]
fn criterion_02_optimized_never_loses_to_uniform() {
    let cfg = desk_config();
    let results = run_campaign(
        &cfg,
        &options(
            &[
                "uc-fd-perfect-opt_gee",
                "uc-fd-perfect-uni",
                "uc-fd-estimated-opt_gee",
                "uc-fd-estimated-uni",
            ],
            &[0.0, 10.0, 20.0],
        ),
    )
    .unwrap();
    assert!(results.failures.is_empty(), "{:?}", results.failures);

    let is = |csi: CsiFlavor, alg: PowerAlg| {
        move |r: &CampaignRow| r.template.csi == csi && r.template.power_alg == alg
    };
    let perfect_opt = gee_cells(&results, is(CsiFlavor::True, PowerAlg::OptGee));
    let perfect_uni = gee_cells(&results, is(CsiFlavor::True, PowerAlg::Uni));
    assert_eq!(perfect_opt.len(), 30);
    for (cell, opt_gee) in &perfect_opt {
        let uni_gee = perfect_uni[cell];
        assert!(
            *opt_gee >= uni_gee,
            "perfect CSI: optimized {opt_gee} < uniform {uni_gee} at {cell:?}"
        );
    }

    // on estimated CSI the optimizer works off the wrong channels, so its
    // true GEE may lose to uniform; report the win rate, require nothing
    let est_opt = gee_cells(&results, is(CsiFlavor::Estimated, PowerAlg::OptGee));
    let est_uni = gee_cells(&results, is(CsiFlavor::Estimated, PowerAlg::Uni));
    let est_wins = est_opt
        .iter()
        .filter(|(cell, o)| **o >= est_uni[*cell])
        .count();
    println!(
        "[acceptance] criterion 2 (optimized ≥ uniform on all {} perfect-CSI cells; estimated-CSI wins {est_wins}/{}): PASS",
        perfect_opt.len(),
        est_opt.len()
    );
}

#[test]
fn criterion_03_single_link_matches_grid_search_oracles() {
    let started = Instant::now();
    let cfg = ScenarioConfig {
        num_aps: 1,
        num_ms: 1,
        n_ap: 8,
        n_ms: 4,
        mux_order: 1,
        uc_cluster_size: 1,
        mode: Mode::Cf,
        ..ScenarioConfig::default()
    };
    let model = cfg.power_model();
    let grid_points = 10_000usize;

    for drop in 0..20 {
        let (g, assoc) = desk_gains(&cfg, drop);

        let mut grid_gee = f64::NEG_INFINITY;
        let mut grid_ase = f64::NEG_INFINITY;
        for i in 0..=grid_points {
            let mut eta = PowerAllocation::zeros(1, 1);
            eta.set(0, 0, cfg.p_max_w * i as f64 / grid_points as f64);
            let (gee, ase) = rate::gee(&g, &eta, &model, cfg.bandwidth_hz).unwrap();
            grid_gee = grid_gee.max(gee);
            grid_ase = grid_ase.max(ase);
        }

        let (_, gee_trace) = maximize_gee(
            &g,
            &assoc,
            cfg.p_max_w,
            &model,
            cfg.bandwidth_hz,
            &cfg.optimizer,
            None,
        )
        .unwrap();
        let (_, ase_trace) = maximize_ase(
            &g,
            &assoc,
            cfg.p_max_w,
            &model,
            cfg.bandwidth_hz,
            &cfg.optimizer,
            None,
        )
        .unwrap();

        let gee_rel = (gee_trace.final_objective - grid_gee).abs() / grid_gee.abs().max(1e-12);
        let ase_rel = (ase_trace.final_objective - grid_ase).abs() / grid_ase.abs().max(1e-12);
        assert!(
            gee_rel <= 1e-2,
            "drop {drop}: GEE {} vs grid {grid_gee} (rel {gee_rel:.2e})",
            gee_trace.final_objective
        );
        assert!(
            ase_rel <= 1e-2,
            "drop {drop}: sum-SE {} vs grid {grid_ase} (rel {ase_rel:.2e})",
            ase_trace.final_objective
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:.1?}");
    println!(
        "[acceptance] criterion 3 (single-link optimizer vs 10^4-point grid oracles, 20 channels in {elapsed:.1?}): PASS"
    );
}

#[test]
fn criterion_04_interference_gradient_matches_finite_differences() {
    let cfg = desk_config();
    for drop in 0..5 {
        let (g, assoc) = desk_gains(&cfg, drop);
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + drop as u64);
        let served: Vec<(usize, usize)> = (0..cfg.num_aps)
            .flat_map(|m| (0..cfg.num_ms).map(move |l| (m, l)))
            .filter(|&(m, l)| assoc.serves(m, l))
            .collect();

        let mut checked = 0usize;
        while checked < 50 {
            // random interior allocation: jittered uniform shares, still
            // comfortably inside every AP budget
            let mut eta = PowerAllocation::uniform(&assoc, 0.8 * cfg.p_max_w);
            for &(m, l) in &served {
                let v = eta.get(m, l);
                eta.set(m, l, v * rng.gen_range(0.5..1.2));
            }
            let &(m, l) = served.choose(&mut rng).unwrap();
            let k = (l + rng.gen_range(1..cfg.num_ms)) % cfg.num_ms;

            let grad =
                interference_logdet_grad_ap(&g, &eta, m, k, cfg.bandwidth_hz, 1e-12).unwrap();
            let scale = grad.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            if scale == 0.0 {
                continue;
            }

            // central differences at the numerically stable step size
            let h = 1e-3 * eta.get(m, l).max(1e-3);
            let mut up = eta.clone();
            up.set(m, l, eta.get(m, l) + h);
            let mut down = eta.clone();
            down.set(m, l, eta.get(m, l) - h);
            let (_, g2_up) = rate_split_terms(&g, &up, k, cfg.bandwidth_hz).unwrap();
            let (_, g2_down) = rate_split_terms(&g, &down, k, cfg.bandwidth_hz).unwrap();
            let fd = (g2_up - g2_down) / (2.0 * h);

            let rel = (grad[l] - fd).abs() / fd.abs().max(1e-6 * scale);
            assert!(
                rel <= 1e-4,
                "drop {drop} ap {m} victim {k} user {l}: analytic {} vs fd {fd} (rel {rel:.2e})",
                grad[l]
            );
            checked += 1;
        }
    }
    println!(
        "[acceptance] criterion 4 (interference gradient vs central differences, 50 points x 5 drops, ≤ 1e-4): PASS"
    );
}

#[test]
fn criterion_05_rate_algebra_and_normalization() {
    let cfg = desk_config();
    let mut worst_route = 0.0f64;
    let mut worst_trace = 0.0f64;
    let mut worst_training = 0.0f64;

    for drop in 0..5 {
        let geom = realize_drop(&cfg, drop);
        let streams = DropStreams::new(cfg.master_seed, drop);
        let channels = synthesize_all(&cfg, &geom, &streams).unwrap();
        let combiner = ms_combiner(cfg.n_ms, cfg.mux_order).unwrap();
        let eff = true_effective(&channels, &combiner);
        let assoc =
            associate(&norms_from_effective(&eff), cfg.mode, cfg.uc_cluster_size).unwrap();
        let prec =
            zf_precoders(&eff, &assoc, cfg.protocol.zf_ridge_rel, cfg.protocol.zf_scope).unwrap();

        // the additive and ratio determinant forms agree to 1e-9
        let g = rate::effective_gains(&channels, &combiner, &prec, &assoc, cfg.noise_power_w())
            .unwrap();
        let eta = PowerAllocation::uniform(&assoc, cfg.p_max_w);
        for k in 0..cfg.num_ms {
            let a = rate::user_ase(&g, &eta, k).unwrap();
            let b = rate::user_ase_ratio_form(&g, &eta, k).unwrap();
            let rel = (a - b).abs() / b.abs().max(1e-12);
            assert!(rel <= 1e-9, "user {k}: {a} vs {b} (rel {rel:.2e})");
            worst_route = worst_route.max(rel);
        }

        // every precoder has unit trace to 1e-12
        for (k, per_user) in prec.per_ap.iter().enumerate() {
            for q in per_user {
                let err = trace_error(q);
                assert!(err <= 1e-12, "precoder for pair {k}: trace error {err:.2e}");
                worst_trace = worst_trace.max(err);
            }
        }

        // zero noise + mutually orthogonal pilots reproduce the projected
        // channels to 1e-10
        let mut rng = streams.rng(cellfree_sim::scenario::StreamKind::Pilot, 0, 0);
        let book =
            generate_pilots(cfg.num_ms, cfg.mux_order, cfg.tau_p, true, &mut rng).unwrap();
        let est = uplink_train(&channels, &combiner, &book, cfg.p_ul_w, 0.0, &streams).unwrap();
        for k in 0..cfg.num_ms {
            for m in 0..cfg.num_aps {
                let rel = (&est.s[k][m] - &eff.s[k][m]).norm() / eff.s[k][m].norm();
                assert!(rel <= 1e-10, "user {k} AP {m}: training error {rel:.2e}");
                worst_training = worst_training.max(rel);
            }
        }
    }
    println!(
        "[acceptance] criterion 5 (rate routes ≤ 1e-9 [worst {worst_route:.1e}], precoder traces ≤ 1e-12 [worst {worst_trace:.1e}], noiseless training ≤ 1e-10 [worst {worst_training:.1e}]): PASS"
    );
}

#[test]
fn criterion_06_hybrid_factorization_quality() {
    // residual histories never increase, across shapes and RF budgets
    let mut rng = ChaCha8Rng::seed_from_u64(6_000);
    for trial in 0..12 {
        let cols = 1 + trial % 6;
        let stack = random_stack(8, cols, &mut rng);
        for n_rf in [1, 2, 4] {
            let init = random_analog_init(8, n_rf, &mut rng);
            let f = hybrid_factorize(&stack, n_rf, 15, &init).unwrap();
            for w in f.residual_history.windows(2) {
                assert!(w[1] <= w[0], "residual rose: {:?}", f.residual_history);
            }
        }
        // as many RF chains as antennas: exact recovery
        let f = hybrid_factorize(&stack, 8, 3, &dft_analog_init(8, 8)).unwrap();
        let last = *f.residual_history.last().unwrap();
        assert!(
            last <= 1e-8 * stack.norm(),
            "full-budget residual {last} for stack norm {}",
            stack.norm()
        );
    }

    // architecture comparison: digital beamforming beats the 4-chain hybrid
    // on average over 25 paired drops
    let mut cfg = desk_config();
    cfg.drops = 25;
    let results = run_campaign(
        &cfg,
        &options(
            &["uc-fd-perfect-opt_gee", "uc-hybrid-perfect-opt_gee"],
            &[10.0],
        ),
    )
    .unwrap();
    assert!(results.failures.is_empty(), "{:?}", results.failures);
    let fd = gee_cells(&results, |r| r.template.beamforming == Beamforming::FullyDigital);
    let hy = gee_cells(&results, |r| r.template.beamforming == Beamforming::Hybrid);
    let fd_mean = mean(fd.values().copied());
    let hy_mean = mean(hy.values().copied());
    let wins = fd.iter().filter(|(cell, v)| **v >= hy[*cell]).count();
    assert!(
        fd_mean >= hy_mean,
        "digital mean {fd_mean} < hybrid mean {hy_mean}"
    );
    println!(
        "[acceptance] criterion 6 (hybrid residuals monotone, full-budget recovery ≤ 1e-8, digital {fd_mean:.2} ≥ hybrid {hy_mean:.2} Mbit/J over 25 drops [wins {wins}/25]): PASS"
    );
}

#[test]
fn criterion_07_user_centric_beats_cell_free_under_uniform_power() {
    let mut cfg = desk_config();
    cfg.drops = 25;
    let results = run_campaign(
        &cfg,
        &options(&["uc-fd-perfect-uni", "cf-fd-perfect-uni"], &[10.0]),
    )
    .unwrap();
    assert!(results.failures.is_empty(), "{:?}", results.failures);
    let uc = gee_cells(&results, |r| r.template.mode == Mode::Uc);
    let cf = gee_cells(&results, |r| r.template.mode == Mode::Cf);
    let uc_mean = mean(uc.values().copied());
    let cf_mean = mean(cf.values().copied());
    let wins = uc.iter().filter(|(cell, v)| **v >= cf[*cell]).count();
    assert!(
        uc_mean >= cf_mean,
        "user-centric mean {uc_mean} < cell-free mean {cf_mean}"
    );
    println!(
        "[acceptance] criterion 7 (user-centric {uc_mean:.2} ≥ cell-free {cf_mean:.2} Mbit/J over 25 uniform-power drops [wins {wins}/25]): PASS"
    );
}

#[test]
fn criterion_08_reporting_anchor_and_full_scale_run() {
    // 30 bit/s/Hz over 200 MHz split across 20 users is exactly 300 Mbit/s
    assert_eq!(30.0f64 * 200e6 / 20.0, 300e6);

    // and a report's throughput column is exactly spectral efficiency times
    // bandwidth, user by user
    let cfg = desk_config();
    let (g, assoc) = desk_gains(&cfg, 0);
    let eta = PowerAllocation::uniform(&assoc, cfg.p_max_w);
    let report = rate::evaluate(&g, &eta, &cfg.power_model(), cfg.bandwidth_hz).unwrap();
    for k in 0..cfg.num_ms {
        assert_eq!(report.per_user_bit_s[k], report.per_user_ase[k] * cfg.bandwidth_hz);
    }

    // full-scale campaign: 100 APs (16 antennas), 20 single-antenna-cluster
    // users, hybrid beamforming on estimated channels, 10 drops
    let full = ScenarioConfig {
        num_aps: 100,
        num_ms: 20,
        n_ap: 16,
        n_ms: 8,
        mux_order: 1,
        uc_cluster_size: 1,
        n_rf: 4,
        drops: 10,
        ..ScenarioConfig::default()
    };
    let results = run_campaign(
        &full,
        &options(&["uc-hybrid-estimated-opt_gee"], &[-5.0]),
    )
    .unwrap();
    assert!(results.failures.is_empty(), "{:?}", results.failures);
    assert_eq!(results.rows.len(), 10);
    let ase_mean = mean(results.rows.iter().map(|r| r.sum_ase_bit_s_hz));
    assert!(
        (10.0..=60.0).contains(&ase_mean),
        "full-scale mean sum spectral efficiency {ase_mean} outside 10..60 bit/s/Hz"
    );
    println!(
        "[acceptance] criterion 8 (300 Mbit/s anchor exact; full-scale run mean sum-SE {ase_mean:.1} bit/s/Hz in 10..60): PASS"
    );
}

#[test]
fn criterion_09_idle_power_accounting_under_optimization() {
    let mut cfg = desk_config();
    cfg.power_model = PowerModelKind::IdleAware;
    let model = cfg.power_model();
    let mut silent_seen = 0usize;

    for drop in 0..3 {
        let (g, assoc) = desk_gains(&cfg, drop);
        for p_max_w in [1e-5, 1e-4] {
            let (eta, trace) = maximize_gee(
                &g,
                &assoc,
                p_max_w,
                &model,
                cfg.bandwidth_hz,
                &cfg.optimizer,
                None,
            )
            .unwrap();
            for w in trace.steps.windows(2) {
                assert!(
                    w[1].true_objective >= w[0].true_objective,
                    "objective dropped under the idle-aware model"
                );
            }

            // replicate the power model term by term: silent APs burn the
            // idle fraction of their circuit power, exactly
            let mut expect = 0.0;
            for m in 0..assoc.num_aps() {
                let radiated = eta.ap_total(m);
                expect += model.delta * radiated;
                expect += if radiated > 0.0 {
                    model.circuit_w[m]
                } else {
                    silent_seen += 1;
                    model.idle_fraction * model.circuit_w[m]
                };
            }
            assert_eq!(rate::power_consumed(&eta, &model), expect);
        }
    }
    assert!(silent_seen > 0, "no AP ever fell silent at tiny budgets");
    println!(
        "[acceptance] criterion 9 (idle-aware traces monotone; {silent_seen} silent-AP terms accounted at half circuit power exactly): PASS"
    );
}

#[test]
fn criterion_10_serial_and_parallel_runs_are_byte_identical() {
    let mut cfg = desk_config();
    cfg.drops = 8;
    let templates = ["uc-hybrid-estimated-opt_gee", "uc-fd-perfect-uni"];
    let budgets = [0.0, 10.0];

    let mut serial_opt = options(&templates, &budgets);
    serial_opt.threads = 1;
    let mut parallel_opt = options(&templates, &budgets);
    parallel_opt.threads = 8;

    let serial = run_campaign(&cfg, &serial_opt).unwrap();
    let parallel = run_campaign(&cfg, &parallel_opt).unwrap();

    let dir_s = tempfile::tempdir().unwrap();
    let dir_p = tempfile::tempdir().unwrap();
    write_results(&serial, dir_s.path()).unwrap();
    write_results(&parallel, dir_p.path()).unwrap();

    for name in ["results.csv", "summary.csv"] {
        let a = std::fs::read(dir_s.path().join(name)).unwrap();
        let b = std::fs::read(dir_p.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between serial and 8-way runs");
    }

    // with timing on, everything except the wall-clock column still matches
    let mut timed_opt = options(&templates, &budgets);
    timed_opt.threads = 8;
    timed_opt.measure_time = true;
    let timed = run_campaign(&cfg, &timed_opt).unwrap();
    let dir_t = tempfile::tempdir().unwrap();
    write_results(&timed, dir_t.path()).unwrap();
    let strip = |path: std::path::PathBuf| -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(
        strip(dir_s.path().join("results.csv")),
        strip(dir_t.path().join("results.csv"))
    );

    println!(
        "[acceptance] criterion 10 (serial vs 8-way campaigns byte-identical over {} rows): PASS",
        serial.rows.len()
    );
}

/// `ModeTemplate` round-trips used by several tests above; kept here so the
/// parser stays honest about the strings this file feeds it.
#[test]
fn template_strings_used_here_parse() {
    for s in [
        "uc-fd-perfect-opt_gee",
        "uc-fd-perfect-uni",
        "uc-fd-estimated-opt_gee",
        "uc-fd-estimated-uni",
        "uc-hybrid-perfect-opt_gee",
        "uc-hybrid-estimated-opt_gee",
        "cf-fd-perfect-uni",
    ] {
        let t: ModeTemplate = s.parse().unwrap();
        assert_eq!(t.to_string(), s);
    }
}
