//! Clustered mmWave MIMO channel synthesis.
//!
//! Each AP-user link is a sum of `n_cl` scattering clusters with `n_ray`
//! rays apiece plus an optional line-of-sight component:
//!
//! ```text
//! H = gamma * sum_{i,l} alpha_il * sqrt(L(r_il)) * a_ap(t_il) a_ms(r_il)^H  +  H_los
//! ```
//!
//! with `gamma = sqrt(n_ap * n_ms / (n_cl * n_ray))`, complex normal ray
//! gains `alpha_il`, linear path attenuation `L`, and unit-norm uniform
//! linear array responses on both ends. The LOS part, present with a
//! distance-dependent probability decided at geometry time, is
//! `sqrt(n_ap * n_ms) * exp(j phase) * sqrt(L_los(d)) * a_ap a_ms^H`.
//!
//! Scattered rays are attenuated with the NLOS path-loss exponent regardless
//! of the link's LOS state (scattered propagation is non-line-of-sight by
//! nature); the LOS term uses the LOS exponent. All rays of a link share the
//! link distance as their path length, and a common per-link shadowing term
//! applies to every component.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SimError};
use crate::linalg::all_finite;
use crate::scenario::{DropStreams, NetworkGeometry, ScenarioConfig, StreamKind};

/// Complex channel matrix of one AP-user link, `n_ap` x `n_ms`.
pub type ChannelMatrix = DMatrix<Complex64>;

/// Propagation and ray-geometry parameters.
#[derive(Debug, Clone)]
pub struct ChannelParams {
    /// Scattering clusters per link.
    pub n_cl: usize,
    /// Rays per cluster.
    pub n_ray: usize,
    /// Path-loss intercept offset [dB]; the intercept at distance 1 m is
    /// `pl0_db_offset + 20 log10(f0 / 1 GHz)`.
    pub pl0_db_offset: f64,
    /// Path-loss exponent for the LOS component.
    pub pl_exp_los: f64,
    /// Path-loss exponent for scattered (NLOS) propagation.
    pub pl_exp_nlos: f64,
    /// Log-normal shadowing standard deviation [dB].
    pub shadow_sigma_db: f64,
    /// Distance below which a link is always LOS [m].
    pub los_d0_m: f64,
    /// Exponential decay scale of the LOS probability [m].
    pub los_d1_m: f64,
    /// Laplacian scale of per-ray angle offsets around the cluster center
    /// [degrees].
    pub ray_spread_deg: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            n_cl: 3,
            n_ray: 10,
            pl0_db_offset: 32.4,
            pl_exp_los: 2.0,
            pl_exp_nlos: 3.2,
            shadow_sigma_db: 4.0,
            los_d0_m: 18.0,
            los_d1_m: 36.0,
            ray_spread_deg: 5.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_cl < 1 {
            return Err(SimError::InvalidConfig {
                field: "n_cl",
                message: "at least one cluster is required".into(),
            });
        }
        if self.n_ray < 1 {
            return Err(SimError::InvalidConfig {
                field: "n_ray",
                message: "at least one ray per cluster is required".into(),
            });
        }
        for (field, v) in [
            ("pl_exp_los", self.pl_exp_los),
            ("pl_exp_nlos", self.pl_exp_nlos),
            ("shadow_sigma_db", self.shadow_sigma_db),
            ("ray_spread_deg", self.ray_spread_deg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::InvalidConfig {
                    field,
                    message: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !self.pl0_db_offset.is_finite() {
            return Err(SimError::InvalidConfig {
                field: "pl0_db_offset",
                message: "must be finite".into(),
            });
        }
        for (field, v) in [("los_d0_m", self.los_d0_m), ("los_d1_m", self.los_d1_m)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::InvalidConfig {
                    field,
                    message: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Unit-norm uniform linear array response at half-wavelength spacing:
/// `(1/sqrt(n)) [1, e^{j pi sin t}, ..., e^{j pi (n-1) sin t}]`.
pub fn array_response(angle_rad: f64, n: usize) -> DVector<Complex64> {
    assert!(n >= 1, "array needs at least one element");
    let scale = 1.0 / (n as f64).sqrt();
    let s = angle_rad.sin();
    DVector::from_fn(n, |i, _| {
        Complex64::from_polar(scale, std::f64::consts::PI * i as f64 * s)
    })
}

/// Probability that a link of length `d` has a line-of-sight component:
/// `min(d0/d, 1) * (1 - e^{-d/d1}) + e^{-d/d1}`.
///
/// Equal to 1 for `d <= d0`, monotone non-increasing, and vanishing as
/// `d -> inf`.
pub fn los_probability(d_m: f64, p: &ChannelParams) -> f64 {
    if d_m <= p.los_d0_m {
        return 1.0;
    }
    let decay = (-d_m / p.los_d1_m).exp();
    (p.los_d0_m / d_m) * (1.0 - decay) + decay
}

/// Linear path attenuation at distance `d`:
/// `10^(-(PL0 + 10 n log10 d + shadow_db) / 10)` with
/// `PL0 = pl0_db_offset + 20 log10(f0 / 1 GHz)` and exponent `n` selected by
/// the LOS class. Errors at non-positive distance, where the log-distance
/// law is undefined.
pub fn path_loss(d_m: f64, los: bool, shadow_db: f64, f0_hz: f64, p: &ChannelParams) -> Result<f64> {
    if !(d_m > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "path loss is undefined at distance {d_m} m"
        )));
    }
    let pl0 = p.pl0_db_offset + 20.0 * (f0_hz / 1e9).log10();
    let exp = if los { p.pl_exp_los } else { p.pl_exp_nlos };
    let pl_db = pl0 + 10.0 * exp * d_m.log10() + shadow_db;
    Ok(10f64.powf(-pl_db / 10.0))
}

/// One scattered ray: departure/arrival angles, complex small-scale gain,
/// and path length.
#[derive(Debug, Clone)]
pub struct Ray {
    /// Angle seen from the AP array [rad].
    pub angle_ap: f64,
    /// Angle seen from the MS array [rad].
    pub angle_ms: f64,
    /// Small-scale complex gain, CN(0, 1).
    pub gain: Complex64,
    /// Propagation path length [m].
    pub path_length_m: f64,
}

/// Ray-level geometry of one link: `n_cl * n_ray` scattered rays plus the
/// LOS angles and phase (used only when the link's LOS flag is set).
#[derive(Debug, Clone)]
pub struct ClusterGeometry {
    pub n_cl: usize,
    pub n_ray: usize,
    /// Scattered rays, cluster-major: ray `l` of cluster `i` sits at
    /// `i * n_ray + l`.
    pub rays: Vec<Ray>,
    /// LOS phase [rad].
    pub los_phase: f64,
    /// LOS angle at the AP [rad].
    pub los_angle_ap: f64,
    /// LOS angle at the MS [rad].
    pub los_angle_ms: f64,
}

/// Laplacian sample with the given scale, via inverse CDF.
fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // keep u strictly inside (-1/2, 1/2) so the log stays finite
    let mut v: f64 = rng.gen();
    while v <= 0.0 {
        v = rng.gen();
    }
    let u = v - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws the ray geometry of one link.
///
/// Cluster central angles are i.i.d. uniform over (-pi/2, pi/2) on both
/// ends; per-ray offsets are Laplacian with scale `ray_spread_deg`; ray
/// gains are CN(0, 1); all rays share the link distance as path length. The
/// LOS angles and phase are always drawn (whether or not the link is LOS) so
/// the stream layout does not depend on geometry flags.
pub fn draw_cluster_geometry(
    distance_m: f64,
    p: &ChannelParams,
    rng: &mut ChaCha8Rng,
) -> ClusterGeometry {
    use std::f64::consts::PI;
    let half = PI / 2.0;
    let spread_rad = p.ray_spread_deg.to_radians();

    let central_ap: Vec<f64> = (0..p.n_cl).map(|_| rng.gen::<f64>() * PI - half).collect();
    let central_ms: Vec<f64> = (0..p.n_cl).map(|_| rng.gen::<f64>() * PI - half).collect();

    let mut offsets_ap = Vec::with_capacity(p.n_cl * p.n_ray);
    for _ in 0..p.n_cl * p.n_ray {
        offsets_ap.push(laplace(rng, spread_rad));
    }
    let mut offsets_ms = Vec::with_capacity(p.n_cl * p.n_ray);
    for _ in 0..p.n_cl * p.n_ray {
        offsets_ms.push(laplace(rng, spread_rad));
    }

    let gauss = Normal::new(0.0, (0.5f64).sqrt()).expect("fixed sigma");
    let mut rays = Vec::with_capacity(p.n_cl * p.n_ray);
    for i in 0..p.n_cl {
        for l in 0..p.n_ray {
            let j = i * p.n_ray + l;
            rays.push(Ray {
                angle_ap: central_ap[i] + offsets_ap[j],
                angle_ms: central_ms[i] + offsets_ms[j],
                gain: Complex64::new(gauss.sample(rng), gauss.sample(rng)),
                path_length_m: distance_m,
            });
        }
    }

    let los_phase = rng.gen::<f64>() * 2.0 * PI;
    let los_angle_ap = rng.gen::<f64>() * PI - half;
    let los_angle_ms = rng.gen::<f64>() * PI - half;

    ClusterGeometry {
        n_cl: p.n_cl,
        n_ray: p.n_ray,
        rays,
        los_phase,
        los_angle_ap,
        los_angle_ms,
    }
}

/// Assembles the channel matrix of one link from its ray geometry.
///
/// `los_flag` and `shadow_db` come from the geometry drop; `distance_m` is
/// the link distance used by the LOS attenuation.
#[allow(clippy::too_many_arguments)]
pub fn assemble_channel(
    cluster: &ClusterGeometry,
    los_flag: bool,
    shadow_db: f64,
    distance_m: f64,
    n_ap: usize,
    n_ms: usize,
    f0_hz: f64,
    p: &ChannelParams,
) -> Result<ChannelMatrix> {
    if cluster.rays.len() != cluster.n_cl * cluster.n_ray {
        return Err(SimError::InvalidArgument(format!(
            "cluster geometry holds {} rays, expected {} * {}",
            cluster.rays.len(),
            cluster.n_cl,
            cluster.n_ray
        )));
    }
    let gamma = ((n_ap * n_ms) as f64 / (cluster.n_cl * cluster.n_ray) as f64).sqrt();
    let mut h = ChannelMatrix::zeros(n_ap, n_ms);
    for ray in &cluster.rays {
        let att = path_loss(ray.path_length_m, false, shadow_db, f0_hz, p)?;
        let weight = ray.gain * Complex64::new(gamma * att.sqrt(), 0.0);
        let a_ap = array_response(ray.angle_ap, n_ap);
        let a_ms = array_response(ray.angle_ms, n_ms);
        // h += weight * a_ap * a_ms^H
        h.gerc(weight, &a_ap, &a_ms, Complex64::new(1.0, 0.0));
    }
    if los_flag {
        let att = path_loss(distance_m, true, shadow_db, f0_hz, p)?;
        let weight = Complex64::from_polar(((n_ap * n_ms) as f64).sqrt() * att.sqrt(), cluster.los_phase);
        let a_ap = array_response(cluster.los_angle_ap, n_ap);
        let a_ms = array_response(cluster.los_angle_ms, n_ms);
        h.gerc(weight, &a_ap, &a_ms, Complex64::new(1.0, 0.0));
    }
    if !all_finite(&h) {
        return Err(SimError::NonFinite(
            "channel matrix contains non-finite entries".into(),
        ));
    }
    Ok(h)
}

/// Synthesizes the channel of link `(k, m)` from its dedicated stream.
pub fn synthesize_link(
    cfg: &ScenarioConfig,
    geom: &NetworkGeometry,
    k: usize,
    m: usize,
    streams: &DropStreams,
) -> Result<ChannelMatrix> {
    let mut rng = streams.rng(StreamKind::Channel, k, m);
    let d = geom.distance_m(m, k);
    let cluster = draw_cluster_geometry(d, &cfg.channel, &mut rng);
    assemble_channel(
        &cluster,
        geom.has_los(m, k),
        geom.shadowing_db(m, k),
        d,
        cfg.n_ap,
        cfg.n_ms,
        cfg.f0_hz,
        &cfg.channel,
    )
}

/// All channel matrices of one drop, indexed `[user][ap]`.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub h: Vec<Vec<ChannelMatrix>>,
    pub num_ms: usize,
    pub num_aps: usize,
}

/// Synthesizes every link of the drop.
pub fn synthesize_all(
    cfg: &ScenarioConfig,
    geom: &NetworkGeometry,
    streams: &DropStreams,
) -> Result<ChannelSet> {
    let mut h = Vec::with_capacity(cfg.num_ms);
    for k in 0..cfg.num_ms {
        let mut row = Vec::with_capacity(cfg.num_aps);
        for m in 0..cfg.num_aps {
            row.push(synthesize_link(cfg, geom, k, m, streams)?);
        }
        h.push(row);
    }
    Ok(ChannelSet {
        h,
        num_ms: cfg.num_ms,
        num_aps: cfg.num_aps,
    })
}
