//! Achievable rates, consumed power, and energy efficiency.
//!
//! Everything here is evaluated on the *true* channels: estimation quality
//! enters through the precoders and association, never through the metric.
//! The central object is the [`GainTensor`], which caches the small
//! combiner-level gain blocks `b[k][l][j] = L^H H_k,m^H q_l,m` for every
//! (victim user, transmitting user, serving-AP) triple. Given those blocks
//! and a power allocation, per-user spectral efficiencies come out of a pair
//! of Hermitian log-determinants, and the energy efficiency divides the sum
//! rate by the consumed power.

use num_complex::Complex64;

use crate::channel::ChannelSet;
use crate::error::{Result, SimError};
use crate::linalg::{accumulate_scaled, all_finite, logdet_hermitian, CMat};
use crate::protocol::{Association, CombinerMatrix, PrecoderSet};

/// How circuit power is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerModelKind {
    /// Every AP always burns its full circuit power.
    Basic,
    /// An AP that radiates nothing burns only `idle_fraction` of its circuit
    /// power.
    IdleAware,
}

impl PowerModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PowerModelKind::Basic => "BASIC",
            PowerModelKind::IdleAware => "IDLE_AWARE",
        }
    }
}

/// Network power model: amplifier slope, per-AP circuit power, idle behavior.
#[derive(Debug, Clone)]
pub struct PowerModel {
    pub kind: PowerModelKind,
    /// Amplifier inefficiency: consumed amplifier watts per radiated watt.
    pub delta: f64,
    /// Circuit power of each AP in watts.
    pub circuit_w: Vec<f64>,
    /// Fraction of circuit power a silent AP still burns (idle-aware only).
    pub idle_fraction: f64,
}

/// Downlink transmit powers `eta[m][k]` in watts, stored AP-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    eta: Vec<f64>,
    pub num_aps: usize,
    pub num_users: usize,
}

impl PowerAllocation {
    pub fn zeros(num_aps: usize, num_users: usize) -> Self {
        PowerAllocation {
            eta: vec![0.0; num_aps * num_users],
            num_aps,
            num_users,
        }
    }

    /// Splits each AP's budget evenly over the users it serves.
    pub fn uniform(assoc: &Association, p_max_w: f64) -> Self {
        let mut alloc = PowerAllocation::zeros(assoc.num_aps(), assoc.num_users());
        for (m, users) in assoc.served_by.iter().enumerate() {
            if users.is_empty() {
                continue;
            }
            let share = p_max_w / users.len() as f64;
            for &k in users {
                alloc.set(m, k, share);
            }
        }
        alloc
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.eta[m * self.num_users + k]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, value: f64) {
        self.eta[m * self.num_users + k] = value;
    }

    /// Total power AP `m` radiates.
    pub fn ap_total(&self, m: usize) -> f64 {
        self.eta[m * self.num_users..(m + 1) * self.num_users]
            .iter()
            .sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    /// Verifies non-negativity, the per-AP budget, and that power flows only
    /// over association links, all up to `tol` watts.
    pub fn assert_feasible(&self, assoc: &Association, p_max_w: f64, tol: f64) -> Result<()> {
        for m in 0..self.num_aps {
            let mut total = 0.0;
            for k in 0..self.num_users {
                let v = self.get(m, k);
                if !v.is_finite() {
                    return Err(SimError::NonFinite(format!("power of AP {m} user {k}")));
                }
                if v < -tol {
                    return Err(SimError::InvalidArgument(format!(
                        "negative power {v} at AP {m}, user {k}"
                    )));
                }
                if v > tol && !assoc.serves(m, k) {
                    return Err(SimError::InvalidArgument(format!(
                        "AP {m} sends {v} W to user {k} it does not serve"
                    )));
                }
                total += v;
            }
            if total > p_max_w + tol {
                return Err(SimError::InvalidArgument(format!(
                    "AP {m} radiates {total} W, budget is {p_max_w} W"
                )));
            }
        }
        Ok(())
    }
}

/// Combiner-level gain blocks of one network snapshot.
///
/// `blocks[k][l][j]` is the `mux_order` x `mux_order` gain from the `j`-th AP
/// serving user `l` into victim user `k`; `noise` is the combiner-output
/// noise covariance, diagonal because the combiner has orthogonal columns.
#[derive(Debug, Clone)]
pub struct GainTensor {
    pub blocks: Vec<Vec<Vec<CMat>>>,
    pub noise: CMat,
    pub servers: Vec<Vec<usize>>,
    pub num_users: usize,
    pub mux_order: usize,
}

/// Assembles the gain tensor from true channels, the shared combiner, a
/// precoder set, and the association it was built for.
pub fn effective_gains(
    channels: &ChannelSet,
    combiner: &CombinerMatrix,
    precoders: &PrecoderSet,
    assoc: &Association,
    noise_w: f64,
) -> Result<GainTensor> {
    let num_users = channels.num_ms;
    let num_aps = channels.num_aps;
    if assoc.num_users() != num_users || assoc.num_aps() != num_aps {
        return Err(SimError::InvalidArgument(
            "association does not match the channel set".into(),
        ));
    }
    if !(noise_w > 0.0) || !noise_w.is_finite() {
        return Err(SimError::InvalidArgument(format!(
            "noise power must be positive and finite, got {noise_w}"
        )));
    }
    let p = combiner.mux_order;
    let group = (combiner.n_ms / combiner.mux_order) as f64;
    let noise = CMat::identity(p, p).scale(noise_w * group);

    let mut blocks: Vec<Vec<Vec<CMat>>> = Vec::with_capacity(num_users);
    for k in 0..num_users {
        // t[m] = L^H H_k,m^H, shared by every transmitting user at AP m
        let t: Vec<CMat> = (0..num_aps)
            .map(|m| combiner.entries.adjoint() * channels.h[k][m].adjoint())
            .collect();
        let mut row = Vec::with_capacity(num_users);
        for l in 0..num_users {
            let mut per_server = Vec::with_capacity(assoc.servers[l].len());
            for &m in &assoc.servers[l] {
                let q = precoders.get(m, l).ok_or_else(|| {
                    SimError::InvalidArgument(format!(
                        "no precoder for user {l} at its serving AP {m}"
                    ))
                })?;
                let b = &t[m] * q;
                if !all_finite(&b) {
                    return Err(SimError::NonFinite(format!(
                        "gain block of users ({k}, {l}) at AP {m}"
                    )));
                }
                per_server.push(b);
            }
            row.push(per_server);
        }
        blocks.push(row);
    }
    Ok(GainTensor {
        blocks,
        noise,
        servers: assoc.servers.clone(),
        num_users,
        mux_order: p,
    })
}

/// Power-weighted aggregate gain of transmitting user `l` at victim `k`:
/// `A = sum_j sqrt(eta[m_j][l]) * blocks[k][l][j]`.
pub fn aggregate_gain(g: &GainTensor, eta: &PowerAllocation, k: usize, l: usize) -> CMat {
    let mut a = CMat::zeros(g.mux_order, g.mux_order);
    for (j, &m) in g.servers[l].iter().enumerate() {
        let w = eta.get(m, l).max(0.0).sqrt();
        if w > 0.0 {
            accumulate_scaled(&mut a, Complex64::new(w, 0.0), &g.blocks[k][l][j]);
        }
    }
    a
}

/// Noise-plus-interference covariance seen by user `k`:
/// `R = noise + sum_{l != k} A_k,l A_k,l^H`.
pub fn interference_covariance(g: &GainTensor, eta: &PowerAllocation, k: usize) -> CMat {
    let mut r = g.noise.clone();
    for l in 0..g.num_users {
        if l == k {
            continue;
        }
        let a = aggregate_gain(g, eta, k, l);
        r.gemm(
            Complex64::new(1.0, 0.0),
            &a,
            &a.adjoint(),
            Complex64::new(1.0, 0.0),
        );
    }
    r
}

/// Spectral efficiency of user `k` in bit/s/Hz, as the difference of two
/// Hermitian log-determinants:
/// `log2 det(R + A A^H) - log2 det(R)`, clamped at zero.
pub fn user_ase(g: &GainTensor, eta: &PowerAllocation, k: usize) -> Result<f64> {
    let r = interference_covariance(g, eta, k);
    let a = aggregate_gain(g, eta, k, k);
    let mut s = r.clone();
    s.gemm(
        Complex64::new(1.0, 0.0),
        &a,
        &a.adjoint(),
        Complex64::new(1.0, 0.0),
    );
    let ld_r = logdet_hermitian(&r, "noise-plus-interference covariance")?;
    let ld_s = logdet_hermitian(&s, "signal-plus-interference covariance")?;
    let ase = (ld_s - ld_r) / std::f64::consts::LN_2;
    if !ase.is_finite() {
        return Err(SimError::NonFinite(format!("spectral efficiency of user {k}")));
    }
    Ok(ase.max(0.0))
}

/// Same quantity through an independent route: `log2 det(I + R^-1 A A^H)`
/// with an LU solve and an LU determinant instead of Cholesky
/// log-determinants. Kept as a cross-check of the production path.
pub fn user_ase_ratio_form(g: &GainTensor, eta: &PowerAllocation, k: usize) -> Result<f64> {
    let r = interference_covariance(g, eta, k);
    let a = aggregate_gain(g, eta, k, k);
    let aah = &a * a.adjoint();
    let x = r.lu().solve(&aah).ok_or_else(|| {
        SimError::RankDeficient("noise-plus-interference covariance is singular".into())
    })?;
    let p = g.mux_order;
    let mut m = x;
    for i in 0..p {
        m[(i, i)] += Complex64::new(1.0, 0.0);
    }
    let det = m.lu().determinant();
    if !(det.re > 0.0) || !det.re.is_finite() {
        return Err(SimError::NonFinite(format!(
            "rate determinant of user {k} came out as {det}"
        )));
    }
    Ok((det.re.ln() / std::f64::consts::LN_2).max(0.0))
}

/// Network power consumption in watts for a given allocation.
pub fn power_consumed(eta: &PowerAllocation, model: &PowerModel) -> f64 {
    let mut total = 0.0;
    for m in 0..eta.num_aps {
        let radiated = eta.ap_total(m);
        total += model.delta * radiated;
        total += match model.kind {
            PowerModelKind::Basic => model.circuit_w[m],
            PowerModelKind::IdleAware => {
                if radiated > 0.0 {
                    model.circuit_w[m]
                } else {
                    model.idle_fraction * model.circuit_w[m]
                }
            }
        };
    }
    total
}

/// Everything a campaign row needs about one (gains, allocation) pair.
#[derive(Debug, Clone)]
pub struct RateReport {
    /// Per-user spectral efficiency, bit/s/Hz.
    pub per_user_ase: Vec<f64>,
    /// Per-user throughput, bit/s.
    pub per_user_bit_s: Vec<f64>,
    /// Network sum spectral efficiency, bit/s/Hz.
    pub sum_ase_bit_s_hz: f64,
    /// Global energy efficiency, Mbit per joule.
    pub gee_mbit_per_joule: f64,
    /// Consumed network power, watts.
    pub power_w: f64,
}

/// Evaluates rates, power, and energy efficiency of an allocation.
pub fn evaluate(
    g: &GainTensor,
    eta: &PowerAllocation,
    model: &PowerModel,
    bandwidth_hz: f64,
) -> Result<RateReport> {
    let mut per_user_ase = Vec::with_capacity(g.num_users);
    for k in 0..g.num_users {
        per_user_ase.push(user_ase(g, eta, k)?);
    }
    let sum_ase: f64 = per_user_ase.iter().sum();
    let per_user_bit_s = per_user_ase.iter().map(|a| a * bandwidth_hz).collect();
    let power_w = power_consumed(eta, model);
    if !(power_w > 0.0) || !power_w.is_finite() {
        return Err(SimError::NonFinite(format!(
            "consumed power came out as {power_w} W"
        )));
    }
    let gee_mbit_per_joule = sum_ase * bandwidth_hz / power_w / 1e6;
    Ok(RateReport {
        per_user_ase,
        per_user_bit_s,
        sum_ase_bit_s_hz: sum_ase,
        gee_mbit_per_joule,
        power_w,
    })
}

/// Convenience wrapper returning only `(gee_mbit_per_joule, sum_ase)`.
pub fn gee(
    g: &GainTensor,
    eta: &PowerAllocation,
    model: &PowerModel,
    bandwidth_hz: f64,
) -> Result<(f64, f64)> {
    let report = evaluate(g, eta, model, bandwidth_hz)?;
    Ok((report.gee_mbit_per_joule, report.sum_ase_bit_s_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::synthesize_all;
    use crate::linalg::hermitian_part;
    use crate::protocol::{
        associate, ms_combiner, norms_from_effective, true_effective, zf_precoders, ZfScope,
    };
    use crate::scenario::{realize_drop, DropStreams, Mode, ScenarioConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(p: usize, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(p, p, |_, _| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    /// Hand-built tensor: `num_users` users, each served by the APs listed in
    /// `servers`, with random gain blocks everywhere.
    fn synthetic_gains(
        num_users: usize,
        num_aps: usize,
        servers_per_user: usize,
        p: usize,
        noise_w: f64,
        seed: u64,
    ) -> GainTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let servers: Vec<Vec<usize>> = (0..num_users)
            .map(|k| (0..servers_per_user).map(|j| (k + j) % num_aps).collect())
            .collect();
        let blocks = (0..num_users)
            .map(|_| {
                servers
                    .iter()
                    .map(|s| s.iter().map(|_| random_block(p, &mut rng)).collect())
                    .collect()
            })
            .collect();
        GainTensor {
            blocks,
            noise: CMat::identity(p, p).scale(noise_w),
            servers,
            num_users,
            mux_order: p,
        }
    }

    fn full_alloc(g: &GainTensor, num_aps: usize, value: f64) -> PowerAllocation {
        let mut eta = PowerAllocation::zeros(num_aps, g.num_users);
        for (l, servers) in g.servers.iter().enumerate() {
            for &m in servers {
                eta.set(m, l, value);
            }
        }
        eta
    }

    #[test]
    fn covariance_with_zero_power_is_pure_noise() {
        let g = synthetic_gains(3, 4, 2, 2, 1e-3, 1);
        let eta = PowerAllocation::zeros(4, 3);
        let r = interference_covariance(&g, &eta, 0);
        assert_relative_eq!((r - &g.noise).norm(), 0.0, epsilon = 0.0);
    }

    #[test]
    fn covariance_matches_hand_built_single_interferer() {
        let g = synthetic_gains(2, 2, 1, 2, 1e-3, 2);
        let mut eta = PowerAllocation::zeros(2, 2);
        let m1 = g.servers[1][0];
        eta.set(m1, 1, 0.4);
        let r = interference_covariance(&g, &eta, 0);
        let a = g.blocks[0][1][0].scale(0.4_f64.sqrt());
        let expect = &g.noise + &a * a.adjoint();
        assert!((r - expect).norm() <= 1e-14);
    }

    #[test]
    fn covariance_is_hermitian_positive_definite() {
        let g = synthetic_gains(4, 5, 2, 2, 1e-4, 3);
        let eta = full_alloc(&g, 5, 0.05);
        for k in 0..4 {
            let r = interference_covariance(&g, &eta, k);
            assert!((&r - hermitian_part(&r)).norm() <= 1e-13 * r.norm());
            assert!(logdet_hermitian(&r, "test covariance").is_ok());
        }
    }

    #[test]
    fn single_stream_rate_reduces_to_scalar_snr_formula() {
        // One user, one AP, mux_order 1: ASE = log2(1 + eta |b|^2 / noise).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let noise_w = 3.2e-4;
        let g = GainTensor {
            blocks: vec![vec![vec![CMat::from_element(1, 1, b)]]],
            noise: CMat::from_element(1, 1, Complex64::new(noise_w, 0.0)),
            servers: vec![vec![0]],
            num_users: 1,
            mux_order: 1,
        };
        let mut eta = PowerAllocation::zeros(1, 1);
        eta.set(0, 0, 0.7);
        let expect = (1.0 + 0.7 * b.norm_sqr() / noise_w).log2();
        let got = user_ase(&g, &eta, 0).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        let ratio = user_ase_ratio_form(&g, &eta, 0).unwrap();
        assert_relative_eq!(ratio, expect, max_relative = 1e-12);
    }

    #[test]
    fn both_rate_routes_agree_on_synthetic_networks() {
        for seed in 0..5 {
            let g = synthetic_gains(4, 6, 2, 2, 1e-5, 100 + seed);
            let eta = full_alloc(&g, 6, 0.08);
            for k in 0..4 {
                let a = user_ase(&g, &eta, k).unwrap();
                let b = user_ase_ratio_form(&g, &eta, k).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn both_rate_routes_agree_on_a_real_snapshot() {
        let cfg = ScenarioConfig {
            num_aps: 6,
            num_ms: 3,
            n_ap: 8,
            n_ms: 4,
            mux_order: 2,
            uc_cluster_size: 2,
            ..Default::default()
        };
        cfg.validate().unwrap();
        let geom = realize_drop(&cfg, 0);
        let streams = DropStreams::new(cfg.master_seed, 0);
        let channels = synthesize_all(&cfg, &geom, &streams).unwrap();
        let combiner = ms_combiner(cfg.n_ms, cfg.mux_order).unwrap();
        let eff = true_effective(&channels, &combiner);
        let assoc = associate(&norms_from_effective(&eff), Mode::Uc, cfg.uc_cluster_size).unwrap();
        let prec = zf_precoders(&eff, &assoc, 1e-9, ZfScope::Global).unwrap();
        let g = effective_gains(&channels, &combiner, &prec, &assoc, cfg.noise_power_w()).unwrap();
        let eta = PowerAllocation::uniform(&assoc, cfg.p_max_w);
        eta.assert_feasible(&assoc, cfg.p_max_w, 1e-9).unwrap();
        for k in 0..cfg.num_ms {
            let a = user_ase(&g, &eta, k).unwrap();
            let b = user_ase_ratio_form(&g, &eta, k).unwrap();
            assert!(a > 0.0, "user {k} got zero rate under uniform power");
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn uniform_allocation_is_feasible_and_even() {
        let assoc = Association {
            served_by: vec![vec![0, 2], vec![1, 2]],
            servers: vec![vec![0], vec![1], vec![0, 1]],
        };
        let eta = PowerAllocation::uniform(&assoc, 1.0);
        eta.assert_feasible(&assoc, 1.0, 1e-12).unwrap();
        assert_eq!(eta.get(0, 0), 0.5);
        assert_eq!(eta.get(0, 2), 0.5);
        assert_eq!(eta.get(0, 1), 0.0);
        assert_relative_eq!(eta.ap_total(1), 1.0);
    }

    #[test]
    fn feasibility_rejects_budget_and_link_violations() {
        let assoc = Association {
            served_by: vec![vec![0]],
            servers: vec![vec![0], vec![]],
        };
        let mut eta = PowerAllocation::zeros(1, 2);
        eta.set(0, 0, 2.0);
        assert!(eta.assert_feasible(&assoc, 1.0, 1e-9).is_err());
        let mut eta = PowerAllocation::zeros(1, 2);
        eta.set(0, 1, 0.1);
        assert!(eta.assert_feasible(&assoc, 1.0, 1e-9).is_err());
    }

    #[test]
    fn power_model_arithmetic_matches_hand_examples() {
        let model_basic = PowerModel {
            kind: PowerModelKind::Basic,
            delta: 1.0,
            circuit_w: vec![1.0; 100],
            idle_fraction: 0.5,
        };
        let model_idle = PowerModel {
            kind: PowerModelKind::IdleAware,
            idle_fraction: 0.5,
            ..model_basic.clone()
        };

        // all APs silent: 100 W basic, 50 W idle-aware
        let silent = PowerAllocation::zeros(100, 4);
        assert_relative_eq!(power_consumed(&silent, &model_basic), 100.0);
        assert_relative_eq!(power_consumed(&silent, &model_idle), 50.0);

        // two APs radiate 2 W each: 104 W basic, 4 + 2 + 49 = 55 W idle-aware
        let mut active = PowerAllocation::zeros(100, 4);
        active.set(0, 0, 2.0);
        active.set(1, 1, 2.0);
        assert_relative_eq!(power_consumed(&active, &model_basic), 104.0);
        assert_relative_eq!(power_consumed(&active, &model_idle), 55.0);

        // the gap between the models is (1 - f) * circuit * (number silent)
        let gap = power_consumed(&active, &model_basic) - power_consumed(&active, &model_idle);
        assert_relative_eq!(gap, 0.5 * 1.0 * 98.0);
    }

    #[test]
    fn amplifier_slope_scales_radiated_power() {
        let model = PowerModel {
            kind: PowerModelKind::Basic,
            delta: 2.5,
            circuit_w: vec![0.3; 3],
            idle_fraction: 1.0,
        };
        let mut eta = PowerAllocation::zeros(3, 2);
        eta.set(0, 0, 0.4);
        eta.set(2, 1, 0.6);
        assert_relative_eq!(power_consumed(&eta, &model), 2.5 * 1.0 + 0.9);
    }

    #[test]
    fn gee_scales_linearly_with_bandwidth() {
        let g = synthetic_gains(3, 4, 2, 2, 1e-4, 7);
        let eta = full_alloc(&g, 4, 0.1);
        let model = PowerModel {
            kind: PowerModelKind::Basic,
            delta: 1.0,
            circuit_w: vec![1.0; 4],
            idle_fraction: 0.5,
        };
        let (gee_1, ase_1) = gee(&g, &eta, &model, 100e6).unwrap();
        let (gee_2, ase_2) = gee(&g, &eta, &model, 200e6).unwrap();
        assert_relative_eq!(ase_1, ase_2); // spectral efficiency is per hertz
        assert_relative_eq!(2.0 * gee_1, gee_2, max_relative = 1e-12);
    }

    #[test]
    fn report_units_are_consistent() {
        let g = synthetic_gains(2, 3, 1, 1, 1e-4, 9);
        let eta = full_alloc(&g, 3, 0.2);
        let model = PowerModel {
            kind: PowerModelKind::IdleAware,
            delta: 1.0,
            circuit_w: vec![1.0; 3],
            idle_fraction: 0.5,
        };
        let report = evaluate(&g, &eta, &model, 200e6).unwrap();
        assert_eq!(report.per_user_ase.len(), 2);
        assert_relative_eq!(
            report.sum_ase_bit_s_hz,
            report.per_user_ase.iter().sum::<f64>()
        );
        for (ase, bits) in report.per_user_ase.iter().zip(&report.per_user_bit_s) {
            assert_relative_eq!(bits, &(ase * 200e6));
        }
        assert_relative_eq!(
            report.gee_mbit_per_joule,
            report.sum_ase_bit_s_hz * 200e6 / report.power_w / 1e6,
            max_relative = 1e-12
        );
    }
}
