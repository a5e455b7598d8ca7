//! Monte Carlo campaign driver and CSV reporting.
//!
//! A campaign runs `drops` independent network realizations. Within a drop,
//! geometry, channels, and uplink training happen exactly once and are shared
//! by every evaluated configuration, so comparisons across modes isolate the
//! protocol differences rather than the randomness. Each configuration
//! template (mode x beamforming x CSI x power algorithm) is then swept over
//! an ascending list of per-AP power budgets, warm-starting each optimized
//! run from the previous budget's solution.
//!
//! Results are written as flat CSV: one `results.csv` row per
//! (drop, template, budget), an aggregated `summary.csv`, an `errors.csv`
//! with any rows that failed, and optional per-row convergence traces.
//!
//! Every random draw is keyed by (master seed, drop index, stream purpose),
//! so row values are independent of thread count and rows always appear in
//! canonical (drop, template, budget) order: serial and parallel runs of the
//! same campaign produce byte-identical `results.csv` files as long as wall
//! clock measurement is disabled.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::channel::synthesize_all;
use crate::error::{Result, SimError};
use crate::optimizer::{maximize_ase, maximize_gee, ConvergenceTrace};
use crate::protocol::{
    associate, generate_pilots, hybrid_precoders, ms_combiner, norms_from_effective,
    true_effective, uplink_train, Beamforming, CsiFlavor,
};
use crate::rate::{self, PowerAllocation, PowerModelKind};
use crate::scenario::{realize_drop, DropStreams, Mode, ScenarioConfig, StreamKind};

/// Power-allocation algorithm of a campaign row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerAlg {
    /// Energy-efficiency search.
    OptGee,
    /// Sum-rate search.
    OptAse,
    /// Uniform split of each AP's budget over its served users.
    Uni,
}

impl PowerAlg {
    pub fn as_str(self) -> &'static str {
        match self {
            PowerAlg::OptGee => "OPT_GEE",
            PowerAlg::OptAse => "OPT_ASE",
            PowerAlg::Uni => "UNI",
        }
    }
}

/// One evaluated configuration: association mode, beamforming architecture,
/// channel knowledge, and power algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeTemplate {
    pub mode: Mode,
    pub beamforming: Beamforming,
    pub csi: CsiFlavor,
    pub power_alg: PowerAlg,
}

impl fmt::Display for ModeTemplate {
    /// Lowercase dash-joined form, e.g. `uc-fd-perfect-opt_gee`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}-{}",
            self.mode.as_str().to_ascii_lowercase(),
            self.beamforming.as_str().to_ascii_lowercase(),
            self.csi.as_str().to_ascii_lowercase(),
            self.power_alg.as_str().to_ascii_lowercase()
        )
    }
}

impl FromStr for ModeTemplate {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 4 {
            return Err(SimError::InvalidArgument(format!(
                "template `{s}` must have four dash-separated parts, \
                 like `uc-fd-perfect-opt_gee`"
            )));
        }
        let mode = match parts[0] {
            "cf" => Mode::Cf,
            "uc" => Mode::Uc,
            other => {
                return Err(SimError::InvalidArgument(format!(
                    "template mode `{other}` is neither `cf` nor `uc`"
                )))
            }
        };
        let beamforming = match parts[1] {
            "fd" => Beamforming::FullyDigital,
            "hybrid" => Beamforming::Hybrid,
            other => {
                return Err(SimError::InvalidArgument(format!(
                    "template beamforming `{other}` is neither `fd` nor `hybrid`"
                )))
            }
        };
        let csi = match parts[2] {
            "perfect" => CsiFlavor::True,
            "estimated" => CsiFlavor::Estimated,
            other => {
                return Err(SimError::InvalidArgument(format!(
                    "template CSI `{other}` is neither `perfect` nor `estimated`"
                )))
            }
        };
        let power_alg = match parts[3] {
            "opt_gee" => PowerAlg::OptGee,
            "opt_ase" => PowerAlg::OptAse,
            "uni" => PowerAlg::Uni,
            other => {
                return Err(SimError::InvalidArgument(format!(
                    "template power algorithm `{other}` is none of `opt_gee`, \
                     `opt_ase`, `uni`"
                )))
            }
        };
        Ok(ModeTemplate {
            mode,
            beamforming,
            csi,
            power_alg,
        })
    }
}

/// The full comparison grid: both association modes, both beamforming
/// architectures, both CSI flavors, optimized and uniform power (16
/// templates).
pub fn default_templates() -> Vec<ModeTemplate> {
    let mut out = Vec::with_capacity(16);
    for mode in [Mode::Uc, Mode::Cf] {
        for beamforming in [Beamforming::FullyDigital, Beamforming::Hybrid] {
            for csi in [CsiFlavor::True, CsiFlavor::Estimated] {
                for power_alg in [PowerAlg::OptGee, PowerAlg::Uni] {
                    out.push(ModeTemplate {
                        mode,
                        beamforming,
                        csi,
                        power_alg,
                    });
                }
            }
        }
    }
    out
}

/// Default per-AP budget sweep: -10 dBm to 30 dBm in 5 dB steps.
pub fn default_pmax_sweep_dbm() -> Vec<f64> {
    (0..9).map(|i| -10.0 + 5.0 * i as f64).collect()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    30.0 + 10.0 * watts.log10()
}

/// Campaign execution knobs, orthogonal to the scenario itself.
#[derive(Debug, Clone)]
pub struct CampaignOptions {
    /// Configuration templates to evaluate, in reporting order.
    pub templates: Vec<ModeTemplate>,
    /// Per-AP budgets in dBm; evaluated ascending with warm starts.
    pub pmax_dbm: Vec<f64>,
    /// Worker threads; 0 uses the process-wide default pool.
    pub threads: usize,
    /// Keep per-row convergence traces (optimized rows only).
    pub record_traces: bool,
    /// Measure per-row wall time. Off, every row reports 0 ms and repeated
    /// campaigns are byte-identical.
    pub measure_time: bool,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            templates: default_templates(),
            pmax_dbm: default_pmax_sweep_dbm(),
            threads: 0,
            record_traces: false,
            measure_time: true,
        }
    }
}

/// One successfully evaluated (drop, template, budget) cell.
#[derive(Debug, Clone)]
pub struct CampaignRow {
    pub drop: usize,
    pub template_idx: usize,
    pub template: ModeTemplate,
    pub power_model: PowerModelKind,
    pub pmax_dbm: f64,
    pub gee_mbit_per_joule: f64,
    pub sum_ase_bit_s_hz: f64,
    /// Per-user spectral efficiencies, bit/s/Hz, user order.
    pub per_user_ase: Vec<f64>,
    pub wall_ms: f64,
    pub trace: Option<ConvergenceTrace>,
}

/// A cell that failed, with the error it failed with.
#[derive(Debug, Clone)]
pub struct FailureRecord {
    pub drop: usize,
    pub template_idx: usize,
    pub template: ModeTemplate,
    pub pmax_dbm: f64,
    pub message: String,
}

/// Outcome of a campaign: evaluated rows plus any failed cells, both in
/// canonical (drop, template, budget) order.
#[derive(Debug, Clone)]
pub struct CampaignResults {
    pub rows: Vec<CampaignRow>,
    pub failures: Vec<FailureRecord>,
}

/// Runs the Monte Carlo campaign described by `cfg` and `options`.
pub fn run_campaign(cfg: &ScenarioConfig, options: &CampaignOptions) -> Result<CampaignResults> {
    cfg.validate()?;
    if options.templates.is_empty() {
        return Err(SimError::InvalidArgument(
            "campaign needs at least one template".into(),
        ));
    }
    if options.pmax_dbm.is_empty() {
        return Err(SimError::InvalidArgument(
            "campaign needs at least one power budget".into(),
        ));
    }
    let mut pmax_dbm = options.pmax_dbm.clone();
    if pmax_dbm.iter().any(|p| !p.is_finite()) {
        return Err(SimError::InvalidArgument(
            "power budgets must be finite".into(),
        ));
    }
    // ascending order is what makes warm starts meaningful
    pmax_dbm.sort_unstable_by(|a, b| a.partial_cmp(b).expect("budgets are finite"));
    pmax_dbm.dedup();

    let drops: Vec<usize> = (0..cfg.drops).collect();
    let per_drop: Vec<(Vec<CampaignRow>, Vec<FailureRecord>)> = if options.threads == 0 {
        drops
            .par_iter()
            .map(|&drop| run_drop(cfg, options, &pmax_dbm, drop))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| SimError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            drops
                .par_iter()
                .map(|&drop| run_drop(cfg, options, &pmax_dbm, drop))
                .collect()
        })
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mut drop_rows, mut drop_failures) in per_drop {
        rows.append(&mut drop_rows);
        failures.append(&mut drop_failures);
    }
    // the per-drop generation order is already canonical; make it explicit
    rows.sort_by(|a, b| {
        (a.drop, a.template_idx)
            .cmp(&(b.drop, b.template_idx))
            .then(a.pmax_dbm.partial_cmp(&b.pmax_dbm).expect("finite"))
    });
    failures.sort_by(|a, b| {
        (a.drop, a.template_idx)
            .cmp(&(b.drop, b.template_idx))
            .then(a.pmax_dbm.partial_cmp(&b.pmax_dbm).expect("finite"))
    });
    Ok(CampaignResults { rows, failures })
}

/// Evaluates every (template, budget) cell of one drop.
fn run_drop(
    cfg: &ScenarioConfig,
    options: &CampaignOptions,
    pmax_dbm: &[f64],
    drop: usize,
) -> (Vec<CampaignRow>, Vec<FailureRecord>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let fail_everything = |failures: &mut Vec<FailureRecord>, message: String| {
        for (template_idx, &template) in options.templates.iter().enumerate() {
            for &p in pmax_dbm {
                failures.push(FailureRecord {
                    drop,
                    template_idx,
                    template,
                    pmax_dbm: p,
                    message: message.clone(),
                });
            }
        }
    };

    let streams = DropStreams::new(cfg.master_seed, drop);
    let geometry = realize_drop(cfg, drop);
    let channels = match synthesize_all(cfg, &geometry, &streams) {
        Ok(c) => c,
        Err(e) => {
            fail_everything(&mut failures, e.to_string());
            return (rows, failures);
        }
    };
    let combiner = match ms_combiner(cfg.n_ms, cfg.mux_order) {
        Ok(c) => c,
        Err(e) => {
            fail_everything(&mut failures, e.to_string());
            return (rows, failures);
        }
    };
    let s_true = true_effective(&channels, &combiner);

    // train once per drop, only when some template consumes estimates
    let s_estimated = if options
        .templates
        .iter()
        .any(|t| t.csi == CsiFlavor::Estimated)
    {
        let mut pilot_rng = streams.rng(StreamKind::Pilot, 0, 0);
        let trained = generate_pilots(
            cfg.num_ms,
            cfg.mux_order,
            cfg.tau_p,
            cfg.protocol.orthogonal_pilots,
            &mut pilot_rng,
        )
        .and_then(|book| {
            uplink_train(
                &channels,
                &combiner,
                &book,
                cfg.p_ul_w,
                cfg.noise_power_w(),
                &streams,
            )
        });
        match trained {
            Ok(s) => Some(s),
            Err(e) => {
                fail_everything(&mut failures, e.to_string());
                return (rows, failures);
            }
        }
    } else {
        None
    };

    let model = cfg.power_model();
    let noise_w = cfg.noise_power_w();

    for (template_idx, &template) in options.templates.iter().enumerate() {
        let fail_template = |failures: &mut Vec<FailureRecord>, message: String| {
            for &p in pmax_dbm {
                failures.push(FailureRecord {
                    drop,
                    template_idx,
                    template,
                    pmax_dbm: p,
                    message: message.clone(),
                });
            }
        };
        let effective = match template.csi {
            CsiFlavor::True => &s_true,
            CsiFlavor::Estimated => s_estimated.as_ref().expect("trained above"),
        };
        let setup = associate(
            &norms_from_effective(effective),
            template.mode,
            cfg.uc_cluster_size,
        )
        .and_then(|assoc| {
            let fd = zf(effective, &assoc, cfg)?;
            let precoders = match template.beamforming {
                Beamforming::FullyDigital => fd,
                Beamforming::Hybrid => {
                    hybrid_precoders(&fd, cfg.n_rf, cfg.protocol.bcd_sweeps, &streams)?
                }
            };
            let gains = rate::effective_gains(&channels, &combiner, &precoders, &assoc, noise_w)?;
            Ok((assoc, gains))
        });
        let (assoc, gains) = match setup {
            Ok(v) => v,
            Err(e) => {
                fail_template(&mut failures, e.to_string());
                continue;
            }
        };

        let mut warm: Option<PowerAllocation> = None;
        for &p_dbm in pmax_dbm {
            let p_max_w = dbm_to_watts(p_dbm);
            let started = options.measure_time.then(Instant::now);
            let solved = match template.power_alg {
                PowerAlg::Uni => Ok((PowerAllocation::uniform(&assoc, p_max_w), None)),
                PowerAlg::OptGee => maximize_gee(
                    &gains,
                    &assoc,
                    p_max_w,
                    &model,
                    cfg.bandwidth_hz,
                    &cfg.optimizer,
                    warm.as_ref(),
                )
                .map(|(eta, trace)| (eta, Some(trace))),
                PowerAlg::OptAse => maximize_ase(
                    &gains,
                    &assoc,
                    p_max_w,
                    &model,
                    cfg.bandwidth_hz,
                    &cfg.optimizer,
                    warm.as_ref(),
                )
                .map(|(eta, trace)| (eta, Some(trace))),
            };
            let (eta, trace) = match solved {
                Ok(v) => v,
                Err(e) => {
                    failures.push(FailureRecord {
                        drop,
                        template_idx,
                        template,
                        pmax_dbm: p_dbm,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            if template.power_alg != PowerAlg::Uni {
                warm = Some(eta.clone());
            }
            let report = match rate::evaluate(&gains, &eta, &model, cfg.bandwidth_hz) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(FailureRecord {
                        drop,
                        template_idx,
                        template,
                        pmax_dbm: p_dbm,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let wall_ms = started.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
            rows.push(CampaignRow {
                drop,
                template_idx,
                template,
                power_model: cfg.power_model,
                pmax_dbm: p_dbm,
                gee_mbit_per_joule: report.gee_mbit_per_joule,
                sum_ase_bit_s_hz: report.sum_ase_bit_s_hz,
                per_user_ase: report.per_user_ase,
                wall_ms,
                trace: if options.record_traces {
                    trace
                } else {
                    None
                },
            });
        }
    }
    (rows, failures)
}

fn zf(
    effective: &crate::protocol::EffectiveChannelSet,
    assoc: &crate::protocol::Association,
    cfg: &ScenarioConfig,
) -> Result<crate::protocol::PrecoderSet> {
    crate::protocol::zf_precoders(
        effective,
        assoc,
        cfg.protocol.zf_ridge_rel,
        cfg.protocol.zf_scope,
    )
}

pub const RESULTS_HEADER: &str = "drop,mode,beamforming,csi,power_alg,power_model,pmax_dbm,\
gee_mbit_per_joule,sum_ase_bit_s_hz,per_user_ase,wall_ms";

const SUMMARY_HEADER: &str = "mode,beamforming,csi,power_alg,power_model,pmax_dbm,n_drops,\
gee_mean,gee_std,sum_ase_mean,sum_ase_std";

const ERRORS_HEADER: &str = "drop,mode,beamforming,csi,power_alg,pmax_dbm,error";

const TRACE_HEADER: &str = "sweep,ap,true_gee,surrogate,lambda";

/// Serializes a campaign into `results.csv`, `summary.csv`, `errors.csv`
/// (only when something failed), and `trace_<row>.csv` files for rows that
/// carry traces. Returns the number of data rows written.
pub fn write_results(results: &CampaignResults, out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| SimError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    for row in &results.rows {
        let per_user = row
            .per_user_ase
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.drop,
            row.template.mode.as_str(),
            row.template.beamforming.as_str(),
            row.template.csi.as_str(),
            row.template.power_alg.as_str(),
            row.power_model.as_str(),
            row.pmax_dbm,
            row.gee_mbit_per_joule,
            row.sum_ase_bit_s_hz,
            per_user,
            row.wall_ms,
        ));
    }
    write_file(&out_dir.join("results.csv"), &csv)?;

    write_file(&out_dir.join("summary.csv"), &summarize(results))?;

    if !results.failures.is_empty() {
        let mut csv = String::from(ERRORS_HEADER);
        csv.push('\n');
        for f in &results.failures {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.drop,
                f.template.mode.as_str(),
                f.template.beamforming.as_str(),
                f.template.csi.as_str(),
                f.template.power_alg.as_str(),
                f.pmax_dbm,
                csv_quote(&f.message),
            ));
        }
        write_file(&out_dir.join("errors.csv"), &csv)?;
    }

    for (row_idx, row) in results.rows.iter().enumerate() {
        let Some(trace) = &row.trace else { continue };
        let mut csv = String::from(TRACE_HEADER);
        csv.push('\n');
        for step in &trace.steps {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                step.sweep,
                step.ap,
                step.true_objective,
                step.surrogate,
                step.lambda.map(|l| l.to_string()).unwrap_or_default(),
            ));
        }
        write_file(&out_dir.join(format!("trace_{row_idx}.csv")), &csv)?;
    }
    Ok(results.rows.len())
}

/// Per (template, budget) mean and sample standard deviation over drops.
fn summarize(results: &CampaignResults) -> String {
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    // rows are sorted (drop, template, budget); group by (template, budget)
    let mut groups: Vec<((usize, u64), Vec<&CampaignRow>)> = Vec::new();
    for row in &results.rows {
        let key = (row.template_idx, row.pmax_dbm.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    // order groups by template then ascending budget
    groups.sort_by(|a, b| {
        a.0 .0
            .cmp(&b.0 .0)
            .then(f64::from_bits(a.0 .1).partial_cmp(&f64::from_bits(b.0 .1)).expect("finite"))
    });
    for ((_, bits), rows) in groups {
        let first = rows[0];
        let gee: Vec<f64> = rows.iter().map(|r| r.gee_mbit_per_joule).collect();
        let ase: Vec<f64> = rows.iter().map(|r| r.sum_ase_bit_s_hz).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            first.template.mode.as_str(),
            first.template.beamforming.as_str(),
            first.template.csi.as_str(),
            first.template.power_alg.as_str(),
            first.power_model.as_str(),
            f64::from_bits(bits),
            rows.len(),
            mean(&gee),
            sample_std(&gee),
            mean(&ase),
            sample_std(&ase),
        ));
    }
    csv
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| SimError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
