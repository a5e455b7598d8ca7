//! Fast built-in sanity checks, runnable from the CLI without any test
//! harness. Each check compares a small piece of the pipeline against an
//! independently computed reference — closed forms, hand arithmetic, grid
//! searches — and reports pass/fail. The whole battery runs in a few
//! seconds; it is meant as a smoke test of a build or an installation, not
//! as a replacement for the full test suite.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{array_response, los_probability, path_loss, synthesize_all, ChannelParams};
use crate::linalg::CMat;
use crate::optimizer::{self, OptimizerOptions};
use crate::protocol::{
    self, associate, dft_analog_init, generate_pilots, hybrid_factorize, ms_combiner,
    norms_from_effective, random_analog_init, true_effective, uplink_train, zf_precoders,
    Association, CsiFlavor, EffectiveChannelSet, ZfScope,
};
use crate::rate::{self, GainTensor, PowerAllocation, PowerModel, PowerModelKind};
use crate::scenario::{realize_drop, DropStreams, Mode, ScenarioConfig};

type CheckResult = std::result::Result<(), String>;

/// Runs every check and returns `(name, outcome)` pairs in execution order.
pub fn run_all() -> Vec<(&'static str, CheckResult)> {
    vec![
        ("noise_power_reference", noise_power_reference()),
        ("array_response_geometry", array_response_geometry()),
        ("los_probability_profile", los_probability_profile()),
        ("path_loss_reference", path_loss_reference()),
        ("combiner_identity", combiner_identity()),
        ("pilot_orthogonality", pilot_orthogonality()),
        ("noiseless_training_exact", noiseless_training_exact()),
        ("zf_single_user_matched_filter", zf_single_user_matched_filter()),
        ("rate_route_agreement", rate_route_agreement()),
        ("interference_gradient_fd", interference_gradient_fd()),
        ("budget_projection", budget_projection()),
        ("single_link_grid_oracle", single_link_grid_oracle()),
        ("hybrid_factorization", hybrid_factorization()),
        ("power_accounting", power_accounting()),
        ("throughput_reporting", throughput_reporting()),
    ]
}

fn check(ok: bool, message: String) -> CheckResult {
    if ok {
        Ok(())
    } else {
        Err(message)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn noise_power_reference() -> CheckResult {
    // -174 dBm/Hz + 10 log10(200 MHz) + 6 dB noise figure = -84.99 dBm
    let cfg = ScenarioConfig::default();
    let got = cfg.noise_power_w();
    let expect = 3.1697863849222284e-12;
    check(
        rel_err(got, expect) <= 1e-9,
        format!("noise power {got} W, expected {expect} W"),
    )
}

fn array_response_geometry() -> CheckResult {
    let n = 8;
    let a = array_response(0.3, n);
    let norm = a.norm();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(format!("steering vector norm {norm}, expected 1"));
    }
    // two angles whose sines differ by 2/n are exactly orthogonal
    let s1 = 0.1_f64;
    let s2 = s1 + 2.0 / n as f64;
    let b = array_response(s1.asin(), n);
    let c = array_response(s2.asin(), n);
    let ip = (b.adjoint() * &c)[(0, 0)].norm();
    check(
        ip <= 1e-12,
        format!("Fourier-spaced steering vectors have |<a,b>| = {ip}"),
    )
}

fn los_probability_profile() -> CheckResult {
    let p = ChannelParams::default();
    let close = los_probability(10.0, &p);
    let edge = los_probability(18.0, &p);
    let far = los_probability(500.0, &p);
    check(
        close == 1.0 && edge == 1.0 && far > 0.0 && far < 0.1,
        format!("los probabilities: 10 m -> {close}, 18 m -> {edge}, 500 m -> {far}"),
    )
}

fn path_loss_reference() -> CheckResult {
    // line-of-sight exponent 2 at 73 GHz: 69.666 dB at one meter
    let p = ChannelParams::default();
    let l = path_loss(1.0, true, 0.0, 73e9, &p).map_err(|e| e.to_string())?;
    let db = -10.0 * l.log10();
    check(
        (db - 69.6657).abs() <= 1e-2,
        format!("path loss at 1 m is {db} dB, expected 69.666 dB"),
    )
}

fn combiner_identity() -> CheckResult {
    let c = ms_combiner(8, 2).map_err(|e| e.to_string())?;
    let g = c.entries.adjoint() * &c.entries;
    let expect = CMat::identity(2, 2).scale(4.0);
    check(
        (g - expect).norm() == 0.0,
        "combiner Gram is not (n_ms / mux_order) * I".into(),
    )
}

fn pilot_orthogonality() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let book = generate_pilots(3, 2, 16, false, &mut rng).map_err(|e| e.to_string())?;
    for (k, phi) in book.sequences.iter().enumerate() {
        let g = phi * phi.adjoint();
        let err = (g - CMat::identity(2, 2)).norm();
        if err != 0.0 {
            return Err(format!("pilot Gram of user {k} off identity by {err}"));
        }
    }
    Ok(())
}

fn tiny_scenario() -> ScenarioConfig {
    ScenarioConfig {
        num_aps: 3,
        num_ms: 2,
        n_ap: 4,
        n_ms: 2,
        uc_cluster_size: 1,
        n_rf: 2,
        ..Default::default()
    }
}

fn noiseless_training_exact() -> CheckResult {
    let cfg = tiny_scenario();
    let geom = realize_drop(&cfg, 0);
    let streams = DropStreams::new(cfg.master_seed, 0);
    let channels = synthesize_all(&cfg, &geom, &streams).map_err(|e| e.to_string())?;
    let combiner = ms_combiner(cfg.n_ms, cfg.mux_order).map_err(|e| e.to_string())?;
    let truth = true_effective(&channels, &combiner);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let book = generate_pilots(cfg.num_ms, cfg.mux_order, cfg.tau_p, true, &mut rng)
        .map_err(|e| e.to_string())?;
    let est = uplink_train(&channels, &combiner, &book, cfg.p_ul_w, 0.0, &streams)
        .map_err(|e| e.to_string())?;
    for k in 0..cfg.num_ms {
        for m in 0..cfg.num_aps {
            let rel = (&est.s[k][m] - &truth.s[k][m]).norm() / truth.s[k][m].norm();
            if rel > 1e-10 {
                return Err(format!(
                    "noiseless estimate of user {k} at AP {m} off by {rel}"
                ));
            }
        }
    }
    Ok(())
}

fn zf_single_user_matched_filter() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = CMat::from_fn(8, 1, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    let eff = EffectiveChannelSet {
        s: vec![vec![s.clone()]],
        flavor: CsiFlavor::True,
        num_ms: 1,
        num_aps: 1,
    };
    let assoc = Association {
        served_by: vec![vec![0]],
        servers: vec![vec![0]],
    };
    let set = zf_precoders(&eff, &assoc, 1e-9, ZfScope::Global).map_err(|e| e.to_string())?;
    let q = &set.per_ap[0][0];
    let cosine = (q.adjoint() * &s)[(0, 0)].norm() / (q.norm() * s.norm());
    if (cosine - 1.0).abs() > 1e-10 {
        return Err(format!("single-user precoder cosine similarity {cosine}"));
    }
    check(
        protocol::trace_error(q) <= 1e-12,
        format!("precoder trace error {}", protocol::trace_error(q)),
    )
}

fn single_link_gains(seed: u64) -> (GainTensor, Association) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Complex64::new(rng.gen::<f64>() + 0.5, rng.gen::<f64>() - 0.5).scale(1e-4);
    let g = GainTensor {
        blocks: vec![vec![vec![CMat::from_element(1, 1, b)]]],
        noise: CMat::from_element(1, 1, Complex64::new(3.17e-12, 0.0)),
        servers: vec![vec![0]],
        num_users: 1,
        mux_order: 1,
    };
    let assoc = Association {
        served_by: vec![vec![0]],
        servers: vec![vec![0]],
    };
    (g, assoc)
}

fn rate_route_agreement() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blocks: Vec<Vec<Vec<CMat>>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| {
                    vec![CMat::from_fn(2, 2, |_, _| {
                        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                    })]
                })
                .collect()
        })
        .collect();
    let g = GainTensor {
        blocks,
        noise: CMat::identity(2, 2).scale(1e-4),
        servers: vec![vec![0], vec![1], vec![2]],
        num_users: 3,
        mux_order: 2,
    };
    let mut eta = PowerAllocation::zeros(3, 3);
    for (l, servers) in g.servers.iter().enumerate() {
        eta.set(servers[0], l, 0.3);
    }
    for k in 0..3 {
        let a = rate::user_ase(&g, &eta, k).map_err(|e| e.to_string())?;
        let b = rate::user_ase_ratio_form(&g, &eta, k).map_err(|e| e.to_string())?;
        if rel_err(a, b) > 1e-9 {
            return Err(format!("rate routes disagree for user {k}: {a} vs {b}"));
        }
    }
    Ok(())
}

fn interference_gradient_fd() -> CheckResult {
    let cfg = tiny_scenario();
    let geom = realize_drop(&cfg, 1);
    let streams = DropStreams::new(cfg.master_seed, 1);
    let channels = synthesize_all(&cfg, &geom, &streams).map_err(|e| e.to_string())?;
    let combiner = ms_combiner(cfg.n_ms, cfg.mux_order).map_err(|e| e.to_string())?;
    let eff = true_effective(&channels, &combiner);
    let assoc = associate(&norms_from_effective(&eff), Mode::Cf, 0).map_err(|e| e.to_string())?;
    let prec = zf_precoders(&eff, &assoc, 1e-9, ZfScope::Global).map_err(|e| e.to_string())?;
    let g = rate::effective_gains(&channels, &combiner, &prec, &assoc, cfg.noise_power_w())
        .map_err(|e| e.to_string())?;
    let eta = PowerAllocation::uniform(&assoc, 0.7);

    let (m, k) = (0, 0);
    let grad = optimizer::interference_logdet_grad_ap(&g, &eta, m, k, cfg.bandwidth_hz, 1e-12)
        .map_err(|e| e.to_string())?;
    let (l, &a) = grad
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
        .unwrap();
    if a == 0.0 {
        return Err("gradient is identically zero".into());
    }
    let h = 1e-3 * eta.get(m, l).max(1e-3);
    let mut up = eta.clone();
    up.set(m, l, eta.get(m, l) + h);
    let mut down = eta.clone();
    down.set(m, l, eta.get(m, l) - h);
    let (_, g2_up) =
        optimizer::rate_split_terms(&g, &up, k, cfg.bandwidth_hz).map_err(|e| e.to_string())?;
    let (_, g2_down) =
        optimizer::rate_split_terms(&g, &down, k, cfg.bandwidth_hz).map_err(|e| e.to_string())?;
    let fd = (g2_up - g2_down) / (2.0 * h);
    check(
        rel_err(a, fd) <= 1e-3,
        format!("gradient {a} vs central difference {fd}"),
    )
}

fn budget_projection() -> CheckResult {
    let mut v = [0.6, 0.6];
    optimizer::project_box_simplex(&mut v, 1.0);
    check(
        (v[0] - 0.5).abs() <= 1e-12 && (v[1] - 0.5).abs() <= 1e-12,
        format!("projection of [0.6, 0.6] gave {v:?}"),
    )
}

fn single_link_grid_oracle() -> CheckResult {
    // one user, one AP: sweep the scalar power on a fine grid and compare
    let (g, assoc) = single_link_gains(12);
    let model = PowerModel {
        kind: PowerModelKind::Basic,
        delta: 1.0,
        circuit_w: vec![1.0],
        idle_fraction: 0.5,
    };
    let bandwidth = 200e6;
    let p_max = 1.0;

    let mut best_grid = f64::NEG_INFINITY;
    for i in 0..=20_000 {
        let p = p_max * i as f64 / 20_000.0;
        let mut eta = PowerAllocation::zeros(1, 1);
        eta.set(0, 0, p);
        let (gee, _) = rate::gee(&g, &eta, &model, bandwidth).map_err(|e| e.to_string())?;
        best_grid = best_grid.max(gee);
    }
    let opts = OptimizerOptions::default();
    let (_, trace) =
        optimizer::maximize_gee(&g, &assoc, p_max, &model, bandwidth, &opts, None)
            .map_err(|e| e.to_string())?;
    check(
        trace.final_objective >= best_grid * (1.0 - 1e-2),
        format!(
            "optimizer {} Mbit/J vs grid {} Mbit/J",
            trace.final_objective, best_grid
        ),
    )
}

fn hybrid_factorization() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let stack = CMat::from_fn(8, 4, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    // full RF budget with a unitary init factorizes exactly
    let full = hybrid_factorize(&stack, 8, 3, &dft_analog_init(8, 8)).map_err(|e| e.to_string())?;
    if full.residual_history[0] > 1e-8 * stack.norm() {
        return Err(format!(
            "full-budget residual {} with stack norm {}",
            full.residual_history[0],
            stack.norm()
        ));
    }
    // constrained budget: residual must never increase over sweeps
    let init = random_analog_init(8, 2, &mut rng);
    let constrained = hybrid_factorize(&stack, 2, 15, &init).map_err(|e| e.to_string())?;
    for w in constrained.residual_history.windows(2) {
        if w[1] > w[0] {
            return Err(format!(
                "residual increased: {:?}",
                constrained.residual_history
            ));
        }
    }
    Ok(())
}

fn power_accounting() -> CheckResult {
    let basic = PowerModel {
        kind: PowerModelKind::Basic,
        delta: 1.0,
        circuit_w: vec![1.0; 100],
        idle_fraction: 0.5,
    };
    let idle = PowerModel {
        kind: PowerModelKind::IdleAware,
        ..basic.clone()
    };
    let silent = PowerAllocation::zeros(100, 4);
    let mut active = PowerAllocation::zeros(100, 4);
    active.set(0, 0, 2.0);
    active.set(1, 1, 2.0);
    let checks = [
        (rate::power_consumed(&silent, &basic), 100.0),
        (rate::power_consumed(&silent, &idle), 50.0),
        (rate::power_consumed(&active, &basic), 104.0),
        (rate::power_consumed(&active, &idle), 55.0),
    ];
    for (got, expect) in checks {
        if (got - expect).abs() > 1e-12 {
            return Err(format!("power accounting gave {got} W, expected {expect} W"));
        }
    }
    Ok(())
}

fn throughput_reporting() -> CheckResult {
    // 30 bit/s/Hz over 200 MHz shared by 20 users is exactly 300 Mbit/s each
    let per_user_ase = 30.0 / 20.0;
    let throughput = per_user_ase * 200e6;
    if throughput != 300e6 {
        return Err(format!("throughput arithmetic gave {throughput}"));
    }
    // and the report applies exactly that conversion
    let (g, _) = single_link_gains(14);
    let model = PowerModel {
        kind: PowerModelKind::Basic,
        delta: 1.0,
        circuit_w: vec![1.0],
        idle_fraction: 0.5,
    };
    let mut eta = PowerAllocation::zeros(1, 1);
    eta.set(0, 0, 0.5);
    let report = rate::evaluate(&g, &eta, &model, 200e6).map_err(|e| e.to_string())?;
    check(
        report.per_user_bit_s[0] == report.per_user_ase[0] * 200e6,
        "per-user throughput is not ase * bandwidth".into(),
    )
}
