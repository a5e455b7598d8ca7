//! Training, association, and precoding: everything between raw channels and
//! the gain tensor the rate module consumes.
//!
//! The downlink protocol chain is:
//!
//! 1. every MS fixes an antenna-averaging combiner ([`ms_combiner`]),
//! 2. MSs sound the uplink with binary pilot books ([`generate_pilots`],
//!    [`uplink_train`]), giving each AP a least-squares estimate of the
//!    effective channels `S = H * L`,
//! 3. APs pick the users they serve ([`associate`]): all of them in
//!    cell-free mode, the `n` strongest in user-centric mode,
//! 4. the CPU builds zero-forcing precoders from the effective channels
//!    ([`zf_precoders`]), optionally refactored into constant-modulus analog
//!    and low-dimensional digital stages ([`hybrid_precoders`]).

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::ChannelSet;
use crate::error::{Result, SimError};
use crate::linalg::{hermitian_part, CMat};
use crate::scenario::{DropStreams, Mode, StreamKind};

/// Knobs of the training/precoding stage.
#[derive(Debug, Clone)]
pub struct ProtocolParams {
    /// Diagonal loading of the zero-forcing Gram matrix, relative to its
    /// mean diagonal entry. Zero disables loading (rank-deficient Grams then
    /// fail instead of being regularized).
    pub zf_ridge_rel: f64,
    /// Whether the ZF Gram aggregates every AP's effective channels or only
    /// the local AP's.
    pub zf_scope: ZfScope,
    /// Block-coordinate sweeps of the hybrid factorization.
    pub bcd_sweeps: usize,
    /// Draw one mutually orthogonal pilot row set across all users (requires
    /// `num_ms * mux_order <= tau_p`); otherwise rows are orthogonal within
    /// each user only.
    pub orthogonal_pilots: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            zf_ridge_rel: 1e-9,
            zf_scope: ZfScope::Global,
            bcd_sweeps: 20,
            orthogonal_pilots: false,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zf_ridge_rel >= 0.0) || !self.zf_ridge_rel.is_finite() {
            return Err(SimError::InvalidConfig {
                field: "zf_ridge_rel",
                message: format!("must be finite and >= 0, got {}", self.zf_ridge_rel),
            });
        }
        if self.bcd_sweeps < 1 {
            return Err(SimError::InvalidConfig {
                field: "bcd_sweeps",
                message: "at least one sweep is required".into(),
            });
        }
        Ok(())
    }
}

/// Scope of the effective channels entering the zero-forcing Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZfScope {
    /// One Gram over all users and APs, shared by every precoder.
    Global,
    /// A per-AP Gram over that AP's own effective channels.
    PerAp,
}

// ---------------------------------------------------------------------------
// MS combiner
// ---------------------------------------------------------------------------

/// The fixed 0/1 antenna-averaging combiner every MS applies: `mux_order`
/// groups of `n_ms / mux_order` adjacent antennas, one output stream per
/// group.
#[derive(Debug, Clone)]
pub struct CombinerMatrix {
    /// `n_ms` x `mux_order` matrix with a single 1 per row.
    pub entries: CMat,
    pub n_ms: usize,
    pub mux_order: usize,
}

/// Builds the combiner. `mux_order` must divide `n_ms`.
pub fn ms_combiner(n_ms: usize, mux_order: usize) -> Result<CombinerMatrix> {
    if n_ms == 0 || mux_order == 0 || n_ms % mux_order != 0 {
        return Err(SimError::InvalidArgument(format!(
            "combiner needs mux_order | n_ms, got n_ms = {n_ms}, mux_order = {mux_order}"
        )));
    }
    let group = n_ms / mux_order;
    let entries = CMat::from_fn(n_ms, mux_order, |i, j| {
        if i / group == j {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(CombinerMatrix {
        entries,
        n_ms,
        mux_order,
    })
}

// ---------------------------------------------------------------------------
// Pilots
// ---------------------------------------------------------------------------

/// Per-user binary pilot sequences, `mux_order` x `tau_p` each, with exactly
/// orthogonal rows within each user (`phi * phi^H = I`).
#[derive(Debug, Clone)]
pub struct PilotBook {
    pub sequences: Vec<CMat>,
    pub tau_p: usize,
    pub mux_order: usize,
    /// True when rows are mutually orthogonal across users too.
    pub orthogonal_across_users: bool,
}

/// Sylvester-Hadamard sign matrix of the given power-of-two order.
fn hadamard(order: usize) -> Vec<Vec<f64>> {
    debug_assert!(order.is_power_of_two());
    let mut h = vec![vec![1.0]];
    while h.len() < order {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// Builds `rows` mutually orthogonal random sign rows of length `tau_p`
/// (entries +-1), by tiling randomly chosen distinct Hadamard rows and
/// randomizing column signs and order. Requires `next_power_of_two(rows)` to
/// divide `tau_p`.
fn orthogonal_sign_rows(rows: usize, tau_p: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let block = rows.next_power_of_two();
    if tau_p % block != 0 {
        return Err(SimError::InvalidArgument(format!(
            "{rows} orthogonal binary rows of length {tau_p} require tau_p to be a multiple \
             of {block}"
        )));
    }
    let h = hadamard(block);
    let mut row_ids: Vec<usize> = (0..block).collect();
    row_ids.shuffle(rng);
    let col_signs: Vec<f64> = (0..tau_p)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut col_order: Vec<usize> = (0..tau_p).collect();
    col_order.shuffle(rng);
    let out = row_ids[..rows]
        .iter()
        .map(|&rid| {
            (0..tau_p)
                .map(|c| {
                    let src = col_order[c];
                    col_signs[src] * h[rid][src % block]
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// Draws the pilot book for `num_users` users.
///
/// Rows within a user are always exactly orthogonal. With
/// `orthogonal_across_users` set, one common orthogonal row set covers all
/// users (`num_users * mux_order` rows), which removes pilot contamination —
/// useful as a test aid, possible only when enough pilot samples exist.
pub fn generate_pilots(
    num_users: usize,
    mux_order: usize,
    tau_p: usize,
    orthogonal_across_users: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PilotBook> {
    if num_users == 0 || mux_order == 0 {
        return Err(SimError::InvalidArgument(
            "pilot book needs at least one user and one stream".into(),
        ));
    }
    if tau_p < mux_order {
        return Err(SimError::InvalidArgument(format!(
            "tau_p = {tau_p} is shorter than the {mux_order} orthogonal rows each user needs"
        )));
    }
    let scale = 1.0 / (tau_p as f64).sqrt();
    let mut sequences = Vec::with_capacity(num_users);
    if orthogonal_across_users {
        let total = num_users * mux_order;
        if total > tau_p {
            return Err(SimError::InvalidArgument(format!(
                "orthogonal pilots across users need num_users * mux_order <= tau_p, \
                 got {total} > {tau_p}"
            )));
        }
        let rows = orthogonal_sign_rows(total, tau_p, rng)?;
        for k in 0..num_users {
            let phi = CMat::from_fn(mux_order, tau_p, |i, j| {
                Complex64::new(rows[k * mux_order + i][j] * scale, 0.0)
            });
            sequences.push(phi);
        }
    } else {
        for _ in 0..num_users {
            let rows = orthogonal_sign_rows(mux_order, tau_p, rng)?;
            let phi = CMat::from_fn(mux_order, tau_p, |i, j| {
                Complex64::new(rows[i][j] * scale, 0.0)
            });
            sequences.push(phi);
        }
    }
    Ok(PilotBook {
        sequences,
        tau_p,
        mux_order,
        orthogonal_across_users,
    })
}

// ---------------------------------------------------------------------------
// Effective channels and uplink training
// ---------------------------------------------------------------------------

/// Which channel knowledge a set of effective channels represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsiFlavor {
    /// Exact effective channels `H * L`.
    True,
    /// Least-squares estimates from uplink training.
    Estimated,
}

impl CsiFlavor {
    pub fn as_str(self) -> &'static str {
        match self {
            CsiFlavor::True => "PERFECT",
            CsiFlavor::Estimated => "ESTIMATED",
        }
    }
}

/// Effective channels `S[k][m]` (`n_ap` x `mux_order`) for every link.
#[derive(Debug, Clone)]
pub struct EffectiveChannelSet {
    pub s: Vec<Vec<CMat>>,
    pub flavor: CsiFlavor,
    pub num_ms: usize,
    pub num_aps: usize,
}

/// Exact effective channels `S = H * L`.
pub fn true_effective(channels: &ChannelSet, combiner: &CombinerMatrix) -> EffectiveChannelSet {
    let s = channels
        .h
        .iter()
        .map(|row| row.iter().map(|h| h * &combiner.entries).collect())
        .collect();
    EffectiveChannelSet {
        s,
        flavor: CsiFlavor::True,
        num_ms: channels.num_ms,
        num_aps: channels.num_aps,
    }
}

/// Uplink training: every user transmits its pilot block at `p_ul_w`; each
/// AP correlates its received block with each user's pilot, giving the
/// least-squares effective-channel estimates
/// `S_hat = (1/sqrt(p)) * Y * phi^H`. Training noise is CN(0, `noise_w`) per
/// receive sample, drawn from the per-AP training-noise stream.
pub fn uplink_train(
    channels: &ChannelSet,
    combiner: &CombinerMatrix,
    pilots: &PilotBook,
    p_ul_w: f64,
    noise_w: f64,
    streams: &DropStreams,
) -> Result<EffectiveChannelSet> {
    if pilots.sequences.len() != channels.num_ms {
        return Err(SimError::InvalidArgument(format!(
            "pilot book covers {} users, channel set has {}",
            pilots.sequences.len(),
            channels.num_ms
        )));
    }
    if !(p_ul_w > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "uplink power must be positive, got {p_ul_w}"
        )));
    }
    if !(noise_w >= 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "noise power must be non-negative, got {noise_w}"
        )));
    }
    let n_ap = channels.h[0][0].nrows();
    let sqrt_p = p_ul_w.sqrt();
    let noise_std = (noise_w / 2.0).sqrt();
    let gauss = Normal::new(0.0, noise_std).expect("finite std");

    let mut estimates: Vec<Vec<CMat>> = vec![Vec::with_capacity(channels.num_aps); channels.num_ms];
    for m in 0..channels.num_aps {
        let mut rng = streams.rng(StreamKind::TrainingNoise, m, 0);
        let mut y = CMat::from_fn(n_ap, pilots.tau_p, |_, _| {
            Complex64::new(gauss.sample(&mut rng), gauss.sample(&mut rng))
        });
        for k in 0..channels.num_ms {
            let s_true = &channels.h[k][m] * &combiner.entries;
            y.gemm(
                Complex64::new(sqrt_p, 0.0),
                &s_true,
                &pilots.sequences[k],
                Complex64::new(1.0, 0.0),
            );
        }
        for (k, est_row) in estimates.iter_mut().enumerate() {
            let s_hat = (&y * pilots.sequences[k].adjoint()).scale(1.0 / sqrt_p);
            est_row.push(s_hat);
        }
    }
    Ok(EffectiveChannelSet {
        s: estimates,
        flavor: CsiFlavor::Estimated,
        num_ms: channels.num_ms,
        num_aps: channels.num_aps,
    })
}

// ---------------------------------------------------------------------------
// Association
// ---------------------------------------------------------------------------

/// Which APs serve which users, stored both ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    /// Users served by each AP, ascending user index.
    pub served_by: Vec<Vec<usize>>,
    /// APs serving each user, ascending AP index.
    pub servers: Vec<Vec<usize>>,
}

impl Association {
    pub fn num_aps(&self) -> usize {
        self.served_by.len()
    }

    pub fn num_users(&self) -> usize {
        self.servers.len()
    }

    pub fn serves(&self, m: usize, k: usize) -> bool {
        self.served_by[m].binary_search(&k).is_ok()
    }
}

/// Frobenius norms of every link's channel matrix, indexed `[k][m]`.
pub fn norms_from_channels(channels: &ChannelSet) -> Vec<Vec<f64>> {
    channels
        .h
        .iter()
        .map(|row| row.iter().map(|h| h.norm()).collect())
        .collect()
}

/// Frobenius norms of every link's effective channels, indexed `[k][m]`.
pub fn norms_from_effective(effective: &EffectiveChannelSet) -> Vec<Vec<f64>> {
    effective
        .s
        .iter()
        .map(|row| row.iter().map(|s| s.norm()).collect())
        .collect()
}

/// Builds the AP-user association from per-link channel strengths.
///
/// Cell-free mode ignores `n` and assigns every user to every AP. In
/// user-centric mode each AP serves the `n` users with the largest metric,
/// ties broken towards the lower user index.
pub fn associate(norms: &[Vec<f64>], mode: Mode, n: usize) -> Result<Association> {
    let num_ms = norms.len();
    if num_ms == 0 || norms[0].is_empty() {
        return Err(SimError::InvalidArgument(
            "association needs at least one user and one AP".into(),
        ));
    }
    let num_aps = norms[0].len();
    let mut served_by: Vec<Vec<usize>> = Vec::with_capacity(num_aps);
    match mode {
        Mode::Cf => {
            for _ in 0..num_aps {
                served_by.push((0..num_ms).collect());
            }
        }
        Mode::Uc => {
            if n == 0 || n > num_ms {
                return Err(SimError::InvalidArgument(format!(
                    "user-centric cluster size {n} must lie in 1..={num_ms}"
                )));
            }
            for m in 0..num_aps {
                let mut order: Vec<usize> = (0..num_ms).collect();
                order.sort_by(|&a, &b| {
                    norms[b][m]
                        .partial_cmp(&norms[a][m])
                        .expect("channel norms are finite")
                        .then(a.cmp(&b))
                });
                let mut chosen: Vec<usize> = order[..n].to_vec();
                chosen.sort_unstable();
                served_by.push(chosen);
            }
        }
    }
    let mut servers: Vec<Vec<usize>> = vec![Vec::new(); num_ms];
    for (m, users) in served_by.iter().enumerate() {
        for &k in users {
            servers[k].push(m);
        }
    }
    Ok(Association { served_by, servers })
}

// ---------------------------------------------------------------------------
// Zero-forcing precoders
// ---------------------------------------------------------------------------

/// Beamforming architecture of a precoder set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Beamforming {
    FullyDigital,
    Hybrid,
}

impl Beamforming {
    pub fn as_str(self) -> &'static str {
        match self {
            Beamforming::FullyDigital => "FD",
            Beamforming::Hybrid => "HYBRID",
        }
    }
}

/// Unit-trace downlink precoders `q[m][i]` (`n_ap` x `mux_order`), aligned
/// with `served_by[m]`. Hybrid sets also keep the per-AP analog and digital
/// factors they were built from.
#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub per_ap: Vec<Vec<CMat>>,
    pub served_by: Vec<Vec<usize>>,
    pub beamforming: Beamforming,
    /// Constant-modulus analog stages, one per AP (hybrid only).
    pub analog: Option<Vec<CMat>>,
    /// Baseband digital stages, one per AP (hybrid only).
    pub digital: Option<Vec<CMat>>,
}

impl PrecoderSet {
    /// Precoder of user `k` at AP `m`, if served.
    pub fn get(&self, m: usize, k: usize) -> Option<&CMat> {
        let idx = self.served_by[m].binary_search(&k).ok()?;
        Some(&self.per_ap[m][idx])
    }
}

/// Zero-forcing precoders with diagonal loading:
/// `q = (G + eps I)^-1 s`, normalized to unit trace `tr(q q^H) = 1`.
///
/// With global scope the Gram `G` sums `s s^H` over every (user, AP) pair;
/// with per-AP scope each AP uses only its own effective channels. The
/// loading is `eps = zf_ridge_rel * tr(G) / n_ap`; with `zf_ridge_rel = 0` a
/// singular Gram is an error rather than being silently regularized.
pub fn zf_precoders(
    effective: &EffectiveChannelSet,
    assoc: &Association,
    zf_ridge_rel: f64,
    scope: ZfScope,
) -> Result<PrecoderSet> {
    if assoc.num_users() != effective.num_ms || assoc.num_aps() != effective.num_aps {
        return Err(SimError::InvalidArgument(
            "association and effective channel set have mismatched dimensions".into(),
        ));
    }
    let n_ap = effective.s[0][0].nrows();

    let gram_factor = |gram: &CMat, what: &str| -> Result<nalgebra::Cholesky<Complex64, nalgebra::Dyn>> {
        let eps = zf_ridge_rel * gram.trace().re / n_ap as f64;
        let mut loaded = hermitian_part(gram);
        for i in 0..n_ap {
            loaded[(i, i)] += Complex64::new(eps, 0.0);
        }
        nalgebra::Cholesky::new(loaded).ok_or_else(|| {
            SimError::RankDeficient(format!(
                "{what} Gram matrix ({n_ap}x{n_ap}) is singular; \
                 set zf_ridge_rel > 0 to regularize"
            ))
        })
    };

    let global_chol = match scope {
        ZfScope::Global => {
            let mut gram = CMat::zeros(n_ap, n_ap);
            for row in &effective.s {
                for s in row {
                    gram.gemm(
                        Complex64::new(1.0, 0.0),
                        s,
                        &s.adjoint(),
                        Complex64::new(1.0, 0.0),
                    );
                }
            }
            Some(gram_factor(&gram, "network-wide effective-channel")?)
        }
        ZfScope::PerAp => None,
    };

    let mut per_ap = Vec::with_capacity(assoc.num_aps());
    for m in 0..assoc.num_aps() {
        let local_chol = match scope {
            ZfScope::Global => None,
            ZfScope::PerAp => {
                let mut gram = CMat::zeros(n_ap, n_ap);
                for k in 0..effective.num_ms {
                    let s = &effective.s[k][m];
                    gram.gemm(
                        Complex64::new(1.0, 0.0),
                        s,
                        &s.adjoint(),
                        Complex64::new(1.0, 0.0),
                    );
                }
                Some(gram_factor(&gram, &format!("AP {m} effective-channel"))?)
            }
        };
        let chol = local_chol.as_ref().or(global_chol.as_ref()).unwrap();

        let mut precoders = Vec::with_capacity(assoc.served_by[m].len());
        for &k in &assoc.served_by[m] {
            let mut q = chol.solve(&effective.s[k][m]);
            let norm = q.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(SimError::RankDeficient(format!(
                    "zero-forcing solution for user {k} at AP {m} has norm {norm}"
                )));
            }
            q /= Complex64::new(norm, 0.0);
            precoders.push(q);
        }
        per_ap.push(precoders);
    }
    Ok(PrecoderSet {
        per_ap,
        served_by: assoc.served_by.clone(),
        beamforming: Beamforming::FullyDigital,
        analog: None,
        digital: None,
    })
}

// ---------------------------------------------------------------------------
// Hybrid analog/digital factorization
// ---------------------------------------------------------------------------

/// Result of factorizing a fully digital precoder stack into constant-modulus
/// analog and baseband digital stages.
#[derive(Debug, Clone)]
pub struct HybridFactorization {
    /// `n_ap` x `n_rf`, all entries of modulus `1/sqrt(n_ap)`.
    pub analog: CMat,
    /// `n_rf` x (stack columns).
    pub digital: CMat,
    /// Frobenius residual `||stack - analog * digital||` after each sweep;
    /// non-increasing by construction.
    pub residual_history: Vec<f64>,
}

/// First `n_rf` columns of the scaled DFT matrix: a constant-modulus analog
/// stage that is unitary when `n_rf = n_ap`.
pub fn dft_analog_init(n_ap: usize, n_rf: usize) -> CMat {
    let scale = 1.0 / (n_ap as f64).sqrt();
    CMat::from_fn(n_ap, n_rf, |i, j| {
        Complex64::from_polar(
            scale,
            2.0 * std::f64::consts::PI * (i * j) as f64 / n_ap as f64,
        )
    })
}

/// Constant-modulus analog stage with i.i.d. uniform random phases.
pub fn random_analog_init(n_ap: usize, n_rf: usize, rng: &mut ChaCha8Rng) -> CMat {
    let scale = 1.0 / (n_ap as f64).sqrt();
    CMat::from_fn(n_ap, n_rf, |_, _| {
        Complex64::from_polar(scale, rng.gen::<f64>() * 2.0 * std::f64::consts::PI)
    })
}

/// Least-squares digital stage for a fixed analog stage, via the normal
/// equations (the analog Gram is tiny ridge-loaded only if singular).
fn ls_digital(analog: &CMat, stack: &CMat) -> Result<CMat> {
    let n_rf = analog.ncols();
    let gram = hermitian_part(&(analog.adjoint() * analog));
    let rhs = analog.adjoint() * stack;
    if let Some(chol) = nalgebra::Cholesky::new(gram.clone()) {
        return Ok(chol.solve(&rhs));
    }
    let mut loaded = gram;
    let eps = 1e-12 * loaded.trace().re.max(1e-300) / n_rf as f64;
    for i in 0..n_rf {
        loaded[(i, i)] += Complex64::new(eps, 0.0);
    }
    nalgebra::Cholesky::new(loaded)
        .map(|chol| chol.solve(&rhs))
        .ok_or_else(|| {
            SimError::RankDeficient("analog stage Gram is singular even after loading".into())
        })
}

fn factor_residual(stack: &CMat, analog: &CMat, digital: &CMat) -> f64 {
    (stack - analog * digital).norm()
}

/// Snaps every entry to modulus `1/sqrt(n_ap)`, keeping its phase.
fn project_constant_modulus(analog: &mut CMat) {
    let scale = 1.0 / (analog.nrows() as f64).sqrt();
    for z in analog.iter_mut() {
        let n = z.norm();
        *z = if n > 0.0 {
            *z * Complex64::new(scale / n, 0.0)
        } else {
            Complex64::new(scale, 0.0)
        };
    }
}

/// One pass of exact coordinate minimization over the analog entries: each
/// entry's phase is set to the minimizer of the residual with every other
/// entry and the digital stage held fixed. Never increases the residual.
fn analog_pass(analog: &mut CMat, digital: &CMat, stack: &CMat) {
    let n_ap = analog.nrows();
    let n_rf = analog.ncols();
    let cols = stack.ncols();
    let scale = 1.0 / (n_ap as f64).sqrt();

    // squared norms of the digital rows, fixed during the pass
    let row_norm2: Vec<f64> = (0..n_rf)
        .map(|j| (0..cols).map(|c| digital[(j, c)].norm_sqr()).sum())
        .collect();

    // residual rows r_i = stack_i - sum_j analog[i][j] * digital_j,
    // updated incrementally as entries move
    let mut resid = stack.clone();
    resid.gemm(
        Complex64::new(-1.0, 0.0),
        analog,
        digital,
        Complex64::new(1.0, 0.0),
    );

    for i in 0..n_ap {
        for j in 0..n_rf {
            // correlation of the row residual (with entry (i, j) removed)
            // against digital row j
            let mut corr = Complex64::new(0.0, 0.0);
            for c in 0..cols {
                corr += resid[(i, c)] * digital[(j, c)].conj();
            }
            corr += analog[(i, j)] * Complex64::new(row_norm2[j], 0.0);
            if corr.norm() == 0.0 {
                continue; // this entry does not matter; keep it
            }
            let updated = corr * Complex64::new(scale / corr.norm(), 0.0);
            let delta = analog[(i, j)] - updated;
            if delta.norm() > 0.0 {
                for c in 0..cols {
                    resid[(i, c)] += delta * digital[(j, c)];
                }
            }
            analog[(i, j)] = updated;
        }
    }
}

/// Factorizes a per-AP precoder stack into `n_rf` constant-modulus analog
/// columns and a digital stage, by block-coordinate descent: a least-squares
/// digital update alternating with exact per-entry phase updates of the
/// analog stage. Both steps are exact coordinate minimizers, so the recorded
/// per-sweep residual never increases (a final guard also discards any sweep
/// whose recomputed residual drifts up in the last floating-point digits).
pub fn hybrid_factorize(
    stack: &CMat,
    n_rf: usize,
    sweeps: usize,
    analog_init: &CMat,
) -> Result<HybridFactorization> {
    let n_ap = stack.nrows();
    if n_rf < 1 || n_rf > n_ap {
        return Err(SimError::InvalidArgument(format!(
            "n_rf = {n_rf} must lie in 1..={n_ap}"
        )));
    }
    if sweeps < 1 {
        return Err(SimError::InvalidArgument(
            "hybrid factorization needs at least one sweep".into(),
        ));
    }
    if analog_init.nrows() != n_ap || analog_init.ncols() != n_rf {
        return Err(SimError::InvalidArgument(format!(
            "analog init is {}x{}, expected {}x{}",
            analog_init.nrows(),
            analog_init.ncols(),
            n_ap,
            n_rf
        )));
    }

    let mut analog = analog_init.clone();
    project_constant_modulus(&mut analog);
    let mut digital = CMat::zeros(n_rf, stack.ncols());
    let mut history = Vec::with_capacity(sweeps);
    let floor = 1e-15 * stack.norm();

    for _ in 0..sweeps {
        let cand_digital = ls_digital(&analog, stack)?;
        let mut cand_analog = analog.clone();
        analog_pass(&mut cand_analog, &cand_digital, stack);
        let r = factor_residual(stack, &cand_analog, &cand_digital);
        if let Some(&prev) = history.last() {
            if r > prev {
                break; // floating-point drift; keep the previous factors
            }
        }
        analog = cand_analog;
        digital = cand_digital;
        history.push(r);
        if r <= floor {
            break;
        }
    }
    Ok(HybridFactorization {
        analog,
        digital,
        residual_history: history,
    })
}

/// Re-expresses a fully digital precoder set through per-AP hybrid stages.
///
/// Each AP's precoders are stacked column-wise, factorized with a random
/// phase initialization from the AP's hybrid stream, and the per-user blocks
/// of the product are re-normalized to unit trace.
pub fn hybrid_precoders(
    fd: &PrecoderSet,
    n_rf: usize,
    sweeps: usize,
    streams: &DropStreams,
) -> Result<PrecoderSet> {
    let mut per_ap = Vec::with_capacity(fd.per_ap.len());
    let mut analogs = Vec::with_capacity(fd.per_ap.len());
    let mut digitals = Vec::with_capacity(fd.per_ap.len());
    for (m, precoders) in fd.per_ap.iter().enumerate() {
        if precoders.is_empty() {
            per_ap.push(Vec::new());
            analogs.push(CMat::zeros(0, 0));
            digitals.push(CMat::zeros(0, 0));
            continue;
        }
        let n_ap = precoders[0].nrows();
        let p = precoders[0].ncols();
        let mut stack = CMat::zeros(n_ap, precoders.len() * p);
        for (i, q) in precoders.iter().enumerate() {
            stack.view_mut((0, i * p), (n_ap, p)).copy_from(q);
        }
        let mut rng = streams.rng(StreamKind::HybridInit, m, 0);
        let init = random_analog_init(n_ap, n_rf, &mut rng);
        let fac = hybrid_factorize(&stack, n_rf, sweeps, &init)?;
        let product = &fac.analog * &fac.digital;
        let mut blocks = Vec::with_capacity(precoders.len());
        for i in 0..precoders.len() {
            let block = product.view((0, i * p), (n_ap, p)).clone_owned();
            let norm = block.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(SimError::RankDeficient(format!(
                    "hybrid precoder block {i} at AP {m} has norm {norm}"
                )));
            }
            blocks.push(block / Complex64::new(norm, 0.0));
        }
        per_ap.push(blocks);
        analogs.push(fac.analog);
        digitals.push(fac.digital);
    }
    Ok(PrecoderSet {
        per_ap,
        served_by: fd.served_by.clone(),
        beamforming: Beamforming::Hybrid,
        analog: Some(analogs),
        digital: Some(digitals),
    })
}

/// `|tr(q q^H) - 1|` of a precoder: distance from unit trace.
pub fn trace_error(q: &CMat) -> f64 {
    (q.norm().powi(2) - 1.0).abs()
}
