//! Scenario configuration, network geometry drops, and the deterministic
//! randomness contract.
//!
//! A scenario is a square service area with `num_aps` access points (each
//! with `n_ap` antennas and `n_rf` RF chains) and `num_ms` mobile stations
//! (each with `n_ms` antennas receiving `mux_order` parallel streams). All
//! positions are drawn uniformly over the area, independently per Monte Carlo
//! drop.
//!
//! # Randomness contract
//!
//! Every random draw in the simulator comes from a [`ChaCha8Rng`] keyed by
//! `(master_seed, drop_index, stream kind, entity indices)` via SHA-256, see
//! [`DropStreams`]. Streams for geometry, channel rays, pilots, training
//! noise, and hybrid initialization are therefore independent of each other,
//! of evaluation order, and of thread count: the same seed always reproduces
//! the same campaign bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::channel::{self, ChannelParams};
use crate::error::{Result, SimError};
use crate::optimizer::OptimizerOptions;
use crate::protocol::{ProtocolParams, ZfScope};
use crate::rate::{PowerModel, PowerModelKind};

/// AP-MS association discipline: cell-free (every AP serves every user) or
/// user-centric (every AP serves its `uc_cluster_size` best users).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Cf,
    Uc,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cf => "CF",
            Mode::Uc => "UC",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cf" => Ok(Mode::Cf),
            "uc" => Ok(Mode::Uc),
            other => Err(SimError::InvalidArgument(format!(
                "unknown mode `{other}` (expected cf or uc)"
            ))),
        }
    }
}

/// Full simulation configuration.
///
/// `Default` is the reference deployment the output campaigns are calibrated
/// against: a 250 m x 250 m area at 73 GHz with 200 MHz of bandwidth, 100
/// APs with 16 antennas and 4 RF chains, 5 single-stream users with 8
/// antennas, -174 dBm/Hz noise PSD with a 6 dB noise figure, 64-sample
/// pilots at 1 mW uplink power, and unit circuit power per AP.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Carrier frequency [Hz].
    pub f0_hz: f64,
    /// System bandwidth [Hz].
    pub bandwidth_hz: f64,
    /// Side of the square deployment area [m].
    pub area_side_m: f64,
    /// Number of access points (M).
    pub num_aps: usize,
    /// Number of mobile stations (K).
    pub num_ms: usize,
    /// Antennas per AP.
    pub n_ap: usize,
    /// Antennas per MS.
    pub n_ms: usize,
    /// Multiplexed streams per user (P); must divide `n_ms`.
    pub mux_order: usize,
    /// Users served per AP in user-centric mode (N).
    pub uc_cluster_size: usize,
    /// Association discipline used by single-run helpers; campaigns override
    /// it per run descriptor.
    pub mode: Mode,
    /// Pilot sequence length [samples]; must be shorter than the coherence
    /// interval `tau_c`.
    pub tau_p: usize,
    /// Coherence interval length [samples].
    pub tau_c: usize,
    /// Uplink pilot transmit power [W].
    pub p_ul_w: f64,
    /// Noise power spectral density [dBm/Hz].
    pub noise_psd_dbm_hz: f64,
    /// Receiver noise figure [dB].
    pub noise_figure_db: f64,
    /// Per-AP downlink power budget [W].
    pub p_max_w: f64,
    /// Power amplifier inefficiency (>= 1) multiplying radiated power.
    pub delta: f64,
    /// Per-AP hardware circuit power [W].
    pub p_circuit_w: f64,
    /// Circuit power accounting model.
    pub power_model: PowerModelKind,
    /// Fraction of circuit power burned by an AP that radiates nothing
    /// (idle-aware model only).
    pub idle_fraction: f64,
    /// RF chains per AP for hybrid beamforming.
    pub n_rf: usize,
    /// Monte Carlo drops per campaign.
    pub drops: usize,
    /// Master seed of the randomness contract.
    pub master_seed: u64,
    /// Propagation / ray-geometry parameters.
    pub channel: ChannelParams,
    /// Training and precoding parameters.
    pub protocol: ProtocolParams,
    /// Power-control solver parameters.
    pub optimizer: OptimizerOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            f0_hz: 73e9,
            bandwidth_hz: 200e6,
            area_side_m: 250.0,
            num_aps: 100,
            num_ms: 5,
            n_ap: 16,
            n_ms: 8,
            mux_order: 1,
            uc_cluster_size: 2,
            mode: Mode::Uc,
            tau_p: 64,
            tau_c: 200,
            p_ul_w: 1e-3,
            noise_psd_dbm_hz: -174.0,
            noise_figure_db: 6.0,
            p_max_w: 1.0,
            delta: 1.0,
            p_circuit_w: 1.0,
            power_model: PowerModelKind::IdleAware,
            idle_fraction: 0.5,
            n_rf: 4,
            drops: 50,
            master_seed: 1,
            channel: ChannelParams::default(),
            protocol: ProtocolParams::default(),
            optimizer: OptimizerOptions::default(),
        }
    }
}

impl ScenarioConfig {
    /// Thermal noise power over the configured bandwidth, including the
    /// noise figure [W].
    pub fn noise_power_w(&self) -> f64 {
        derive_noise_power(self)
    }

    /// Per-AP power budget replicated over all APs [W].
    pub fn pmax_vec(&self) -> Vec<f64> {
        vec![self.p_max_w; self.num_aps]
    }

    /// Power consumption model instance for this deployment.
    pub fn power_model(&self) -> PowerModel {
        PowerModel {
            kind: self.power_model,
            delta: self.delta,
            circuit_w: vec![self.p_circuit_w; self.num_aps],
            idle_fraction: self.idle_fraction,
        }
    }

    /// Checks every cross-field invariant, with errors naming the offending
    /// field.
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SimError::InvalidConfig {
                    field,
                    message: format!("must be strictly positive and finite, got {v}"),
                })
            }
        }
        fn count(field: &'static str, v: usize) -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(SimError::InvalidConfig {
                    field,
                    message: "must be at least 1".into(),
                })
            }
        }

        positive("f0_hz", self.f0_hz)?;
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("area_side_m", self.area_side_m)?;
        count("num_aps", self.num_aps)?;
        count("num_ms", self.num_ms)?;
        count("n_ap", self.n_ap)?;
        count("n_ms", self.n_ms)?;
        count("mux_order", self.mux_order)?;
        count("uc_cluster_size", self.uc_cluster_size)?;
        count("tau_p", self.tau_p)?;
        count("tau_c", self.tau_c)?;
        count("drops", self.drops)?;
        positive("p_ul_w", self.p_ul_w)?;
        positive("p_max_w", self.p_max_w)?;
        positive("p_circuit_w", self.p_circuit_w)?;
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(SimError::InvalidConfig {
                field: "noise_psd_dbm_hz",
                message: "must be finite".into(),
            });
        }
        if !self.noise_figure_db.is_finite() || self.noise_figure_db < 0.0 {
            return Err(SimError::InvalidConfig {
                field: "noise_figure_db",
                message: format!("must be finite and >= 0, got {}", self.noise_figure_db),
            });
        }
        if self.n_ms % self.mux_order != 0 {
            return Err(SimError::InvalidConfig {
                field: "mux_order",
                message: format!(
                    "mux_order ({}) must divide n_ms ({})",
                    self.mux_order, self.n_ms
                ),
            });
        }
        if self.mux_order > 1 {
            let block = self.mux_order.next_power_of_two();
            if self.tau_p % block != 0 {
                return Err(SimError::InvalidConfig {
                    field: "tau_p",
                    message: format!(
                        "tau_p ({}) must be a multiple of {} so that {} orthogonal binary \
                         pilot rows exist per user",
                        self.tau_p, block, self.mux_order
                    ),
                });
            }
        }
        if self.tau_p >= self.tau_c {
            return Err(SimError::InvalidConfig {
                field: "tau_p",
                message: format!(
                    "tau_p ({}) must be smaller than tau_c ({})",
                    self.tau_p, self.tau_c
                ),
            });
        }
        if self.mode == Mode::Uc && self.uc_cluster_size > self.num_ms {
            return Err(SimError::InvalidConfig {
                field: "uc_cluster_size",
                message: format!(
                    "uc_cluster_size ({}) cannot exceed num_ms ({})",
                    self.uc_cluster_size, self.num_ms
                ),
            });
        }
        if self.n_rf < 1 || self.n_rf > self.n_ap {
            return Err(SimError::InvalidConfig {
                field: "n_rf",
                message: format!("n_rf ({}) must be in 1..=n_ap ({})", self.n_rf, self.n_ap),
            });
        }
        if !(self.delta >= 1.0) || !self.delta.is_finite() {
            return Err(SimError::InvalidConfig {
                field: "delta",
                message: format!("amplifier inefficiency must be >= 1, got {}", self.delta),
            });
        }
        if !(self.idle_fraction > 0.0 && self.idle_fraction <= 1.0) {
            return Err(SimError::InvalidConfig {
                field: "idle_fraction",
                message: format!("must lie in (0, 1], got {}", self.idle_fraction),
            });
        }
        self.channel.validate()?;
        self.protocol.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Noise power over bandwidth `B` [W]:
/// `10^((noise_psd_dbm_hz + 10 log10 B + noise_figure_db - 30) / 10)`.
pub fn derive_noise_power(cfg: &ScenarioConfig) -> f64 {
    let dbm = cfg.noise_psd_dbm_hz + 10.0 * cfg.bandwidth_hz.log10() + cfg.noise_figure_db;
    10f64.powf((dbm - 30.0) / 10.0)
}

// ---------------------------------------------------------------------------
// Config document parsing
// ---------------------------------------------------------------------------

/// Parses a flat `key = value` document (one pair per line, `#` comments)
/// into a validated config. Unknown keys are an error, not a warning; every
/// omitted key keeps its default value.
pub fn load_config(text: &str) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| SimError::ConfigParse {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(SimError::ConfigParse {
                line: line_no,
                message: format!("key `{key}` has an empty value"),
            });
        }
        apply_key(&mut cfg, key, value, line_no)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_f64(key: &str, value: &str, line: usize) -> Result<f64> {
    value.parse::<f64>().map_err(|_| SimError::ConfigParse {
        line,
        message: format!("key `{key}`: `{value}` is not a number"),
    })
}

fn parse_usize(key: &str, value: &str, line: usize) -> Result<usize> {
    value.parse::<usize>().map_err(|_| SimError::ConfigParse {
        line,
        message: format!("key `{key}`: `{value}` is not a non-negative integer"),
    })
}

fn parse_u64(key: &str, value: &str, line: usize) -> Result<u64> {
    value.parse::<u64>().map_err(|_| SimError::ConfigParse {
        line,
        message: format!("key `{key}`: `{value}` is not a non-negative integer"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SimError::ConfigParse {
            line,
            message: format!("key `{key}`: `{value}` is not a boolean"),
        }),
    }
}

fn apply_key(cfg: &mut ScenarioConfig, key: &str, value: &str, line: usize) -> Result<()> {
    match key {
        "f0_hz" => cfg.f0_hz = parse_f64(key, value, line)?,
        "bandwidth_hz" => cfg.bandwidth_hz = parse_f64(key, value, line)?,
        "area_side_m" => cfg.area_side_m = parse_f64(key, value, line)?,
        "num_aps" => cfg.num_aps = parse_usize(key, value, line)?,
        "num_ms" => cfg.num_ms = parse_usize(key, value, line)?,
        "n_ap" => cfg.n_ap = parse_usize(key, value, line)?,
        "n_ms" => cfg.n_ms = parse_usize(key, value, line)?,
        "mux_order" => cfg.mux_order = parse_usize(key, value, line)?,
        "uc_cluster_size" => cfg.uc_cluster_size = parse_usize(key, value, line)?,
        "mode" => {
            cfg.mode = value.parse().map_err(|_| SimError::ConfigParse {
                line,
                message: format!("key `mode`: `{value}` is neither `cf` nor `uc`"),
            })?
        }
        "tau_p" => cfg.tau_p = parse_usize(key, value, line)?,
        "tau_c" => cfg.tau_c = parse_usize(key, value, line)?,
        "p_ul_w" => cfg.p_ul_w = parse_f64(key, value, line)?,
        "noise_psd_dbm_hz" => cfg.noise_psd_dbm_hz = parse_f64(key, value, line)?,
        "noise_figure_db" => cfg.noise_figure_db = parse_f64(key, value, line)?,
        "p_max_w" => cfg.p_max_w = parse_f64(key, value, line)?,
        "delta" => cfg.delta = parse_f64(key, value, line)?,
        "p_circuit_w" => cfg.p_circuit_w = parse_f64(key, value, line)?,
        "power_model" => {
            cfg.power_model = match value.to_ascii_lowercase().as_str() {
                "basic" => PowerModelKind::Basic,
                "idle_aware" => PowerModelKind::IdleAware,
                _ => {
                    return Err(SimError::ConfigParse {
                        line,
                        message: format!(
                            "key `power_model`: `{value}` is neither `basic` nor `idle_aware`"
                        ),
                    })
                }
            }
        }
        "idle_fraction" => cfg.idle_fraction = parse_f64(key, value, line)?,
        "n_cl" => cfg.channel.n_cl = parse_usize(key, value, line)?,
        "n_ray" => cfg.channel.n_ray = parse_usize(key, value, line)?,
        "n_rf" => cfg.n_rf = parse_usize(key, value, line)?,
        "drops" => cfg.drops = parse_usize(key, value, line)?,
        "master_seed" => cfg.master_seed = parse_u64(key, value, line)?,
        "pl0_db_offset" => cfg.channel.pl0_db_offset = parse_f64(key, value, line)?,
        "pl_exp_los" => cfg.channel.pl_exp_los = parse_f64(key, value, line)?,
        "pl_exp_nlos" => cfg.channel.pl_exp_nlos = parse_f64(key, value, line)?,
        "shadow_sigma_db" => cfg.channel.shadow_sigma_db = parse_f64(key, value, line)?,
        "los_d0_m" => cfg.channel.los_d0_m = parse_f64(key, value, line)?,
        "los_d1_m" => cfg.channel.los_d1_m = parse_f64(key, value, line)?,
        "ray_spread_deg" => cfg.channel.ray_spread_deg = parse_f64(key, value, line)?,
        "zf_ridge_rel" => cfg.protocol.zf_ridge_rel = parse_f64(key, value, line)?,
        "zf_scope" => {
            cfg.protocol.zf_scope = match value.to_ascii_lowercase().as_str() {
                "global" => ZfScope::Global,
                "per_ap" => ZfScope::PerAp,
                _ => {
                    return Err(SimError::ConfigParse {
                        line,
                        message: format!(
                            "key `zf_scope`: `{value}` is neither `global` nor `per_ap`"
                        ),
                    })
                }
            }
        }
        "bcd_sweeps" => cfg.protocol.bcd_sweeps = parse_usize(key, value, line)?,
        "orthogonal_pilots" => cfg.protocol.orthogonal_pilots = parse_bool(key, value, line)?,
        "opt_tol_outer" => cfg.optimizer.tol_outer = parse_f64(key, value, line)?,
        "opt_max_sweeps" => cfg.optimizer.max_sweeps = parse_usize(key, value, line)?,
        "sca_iters_per_ap" => cfg.optimizer.sca_iters_per_ap = parse_usize(key, value, line)?,
        "dinkelbach_tol" => cfg.optimizer.dinkelbach_tol = parse_f64(key, value, line)?,
        "dinkelbach_max" => cfg.optimizer.dinkelbach_max = parse_usize(key, value, line)?,
        "pg_max_iters" => cfg.optimizer.pg_max_iters = parse_usize(key, value, line)?,
        "sqrt_floor" => cfg.optimizer.sqrt_floor = parse_f64(key, value, line)?,
        "warm_start" => cfg.optimizer.warm_start = parse_bool(key, value, line)?,
        _ => {
            return Err(SimError::UnknownConfigKey {
                key: key.to_string(),
                line,
            })
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Randomness contract
// ---------------------------------------------------------------------------

/// The independent random streams a drop consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Positions, LOS flags, shadowing.
    Geometry,
    /// Ray geometry and small-scale gains, keyed per (user, AP).
    Channel,
    /// Pilot books, keyed per drop.
    Pilot,
    /// Uplink training noise, keyed per AP.
    TrainingNoise,
    /// Hybrid analog initialization phases, keyed per AP.
    HybridInit,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Geometry => 1,
            StreamKind::Channel => 2,
            StreamKind::Pilot => 3,
            StreamKind::TrainingNoise => 4,
            StreamKind::HybridInit => 5,
        }
    }
}

/// Factory for the random streams of one Monte Carlo drop.
///
/// Each `(kind, a, b)` triple yields an independent ChaCha8 generator whose
/// 256-bit key is the SHA-256 digest of the full stream coordinates, so
/// streams can be opened in any order, from any thread, with identical
/// results.
#[derive(Debug, Clone, Copy)]
pub struct DropStreams {
    master_seed: u64,
    drop_index: u64,
}

impl DropStreams {
    pub fn new(master_seed: u64, drop_index: usize) -> Self {
        DropStreams {
            master_seed,
            drop_index: drop_index as u64,
        }
    }

    pub fn drop_index(&self) -> usize {
        self.drop_index as usize
    }

    /// Opens the `(kind, a, b)` stream. `a` and `b` identify the entity the
    /// stream belongs to (user/AP indices); unused coordinates are 0.
    pub fn rng(&self, kind: StreamKind, a: usize, b: usize) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"cellfree-sim/stream/v1");
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update(self.drop_index.to_le_bytes());
        hasher.update(kind.tag().to_le_bytes());
        hasher.update((a as u64).to_le_bytes());
        hasher.update((b as u64).to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

// ---------------------------------------------------------------------------
// Geometry drops
// ---------------------------------------------------------------------------

/// One realization of AP/MS placement and large-scale propagation state.
///
/// Link-level quantities are stored AP-major: index `(m, k)` refers to the
/// link between AP `m` and user `k`.
#[derive(Debug, Clone)]
pub struct NetworkGeometry {
    pub drop_index: usize,
    pub num_aps: usize,
    pub num_ms: usize,
    /// AP coordinates [m], one `[x, y]` per AP.
    pub ap_positions: Vec<[f64; 2]>,
    /// MS coordinates [m].
    pub ms_positions: Vec<[f64; 2]>,
    distances_m: Vec<f64>,
    los: Vec<bool>,
    shadowing_db: Vec<f64>,
}

impl NetworkGeometry {
    #[inline]
    fn idx(&self, m: usize, k: usize) -> usize {
        debug_assert!(m < self.num_aps && k < self.num_ms);
        m * self.num_ms + k
    }

    /// AP-to-user distance [m].
    pub fn distance_m(&self, m: usize, k: usize) -> f64 {
        self.distances_m[self.idx(m, k)]
    }

    /// Whether the link has a line-of-sight component.
    pub fn has_los(&self, m: usize, k: usize) -> bool {
        self.los[self.idx(m, k)]
    }

    /// Log-normal shadowing realization for the link [dB].
    pub fn shadowing_db(&self, m: usize, k: usize) -> f64 {
        self.shadowing_db[self.idx(m, k)]
    }
}

/// Draws the geometry of one drop from the geometry stream: AP and MS
/// positions uniform over the area, then per-link LOS flags (Bernoulli with
/// distance-dependent probability) and shadowing (normal, `shadow_sigma_db`).
///
/// The draw order is fixed — AP positions, MS positions, LOS flags (AP-major),
/// shadowing (AP-major) — so the geometry is a pure function of
/// `(master_seed, drop_index)`.
pub fn realize_drop(cfg: &ScenarioConfig, drop_index: usize) -> NetworkGeometry {
    let streams = DropStreams::new(cfg.master_seed, drop_index);
    let mut rng = streams.rng(StreamKind::Geometry, 0, 0);
    let side = cfg.area_side_m;

    let ap_positions: Vec<[f64; 2]> = (0..cfg.num_aps)
        .map(|_| [rng.gen::<f64>() * side, rng.gen::<f64>() * side])
        .collect();
    let ms_positions: Vec<[f64; 2]> = (0..cfg.num_ms)
        .map(|_| [rng.gen::<f64>() * side, rng.gen::<f64>() * side])
        .collect();

    let mut distances_m = Vec::with_capacity(cfg.num_aps * cfg.num_ms);
    for ap in &ap_positions {
        for ms in &ms_positions {
            distances_m.push((ap[0] - ms[0]).hypot(ap[1] - ms[1]));
        }
    }

    let los: Vec<bool> = distances_m
        .iter()
        .map(|&d| rng.gen::<f64>() < channel::los_probability(d, &cfg.channel))
        .collect();

    let shadow = Normal::new(0.0, cfg.channel.shadow_sigma_db).expect("validated sigma");
    let shadowing_db: Vec<f64> = (0..distances_m.len())
        .map(|_| shadow.sample(&mut rng))
        .collect();

    NetworkGeometry {
        drop_index,
        num_aps: cfg.num_aps,
        num_ms: cfg.num_ms,
        ap_positions,
        ms_positions,
        distances_m,
        los,
        shadowing_db,
    }
}
