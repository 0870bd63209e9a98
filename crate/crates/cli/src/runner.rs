//! Executes the run matrix of a config and writes the result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use heatlearn::augment::windowed_error_means;
use heatlearn::baselines::mpc_gain;
use heatlearn::deepo::{DeepoOptions, Optimizer};
use heatlearn::par;
use heatlearn::presets::*;
use heatlearn::simlab::*;
use heatlearn::Vector;

use crate::config::{Algo, CovMode, ExperimentConfig, Preset};
use crate::CliError;

/// One mismatch or coupling setting of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub label: String,
    pub level: Option<u8>,
    pub delta_e: f64,
    pub drift_amp: f64,
}

#[derive(Debug, Clone)]
pub struct Job {
    pub algo: Algo,
    pub case: Case,
    pub cov: Option<CovMode>,
    pub seed: u64,
}

impl Job {
    fn cov_name(&self) -> &'static str {
        self.cov.map_or("none", CovMode::name)
    }

    fn file_stem(&self) -> String {
        format!("{}_{}_{}_seed{}", self.algo.name(), self.case.label, self.cov_name(), self.seed)
    }
}

/// Outcome of one job; `traj` is `None` when the run could not start.
pub struct Outcome {
    pub job: Job,
    pub traj: Option<Trajectory>,
    pub error: Option<String>,
}

impl Outcome {
    fn failed(&self) -> bool {
        self.traj.as_ref().is_none_or(|t| t.is_failed())
    }
}

pub fn cases(cfg: &ExperimentConfig) -> Vec<Case> {
    match cfg.preset {
        Preset::Bench3d => cfg
            .bench3d
            .as_ref()
            .map(|b| {
                b.levels
                    .iter()
                    .map(|&l| Case {
                        label: format!("bw{l}"),
                        level: Some(l),
                        delta_e: b.design_mismatch,
                        drift_amp: 0.0,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        Preset::DhsIndustrial => {
            let s = cfg.industrial.as_ref().expect("validated");
            let statics = s.static_mismatch.iter().map(|&d| (d, 0.0));
            let drifts = s.drift_amplitudes.iter().map(|&a| (s.drift_delta, a));
            statics
                .chain(drifts)
                .map(|(d, a)| Case {
                    label: format!("de{d:+.2}_amp{a:.2}"),
                    level: None,
                    delta_e: d,
                    drift_amp: a,
                })
                .collect()
        }
    }
}

pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let modes = match cfg.preset {
        Preset::Bench3d => cfg.bench3d.as_ref().map(|b| b.cov_modes.clone()),
        Preset::DhsIndustrial => cfg.industrial.as_ref().map(|s| s.cov_modes.clone()),
    }
    .unwrap_or_default();
    let mut out = Vec::new();
    for &algo in &cfg.algorithms {
        for case in cases(cfg) {
            let covs: Vec<Option<CovMode>> = if algo.uses_cov_mode() {
                modes.iter().map(|&m| Some(m)).collect()
            } else {
                vec![None]
            };
            for cov in covs {
                for &seed in &cfg.seeds {
                    out.push(Job {
                        algo,
                        case: case.clone(),
                        cov,
                        seed,
                    });
                }
            }
        }
    }
    out
}

fn controller(cfg: &ExperimentConfig, job: &Job, scn: &Scenario, ind: Option<&Industrial>) -> Result<Controller, CliError> {
    let identity_cov = job.cov == Some(CovMode::Identity);
    Ok(match job.algo {
        Algo::Gd => Controller::Deepo(DeepoOptions {
            optimizer: Optimizer::Gd { eta: cfg.gd.eta },
            identity_cov,
            ..Default::default()
        }),
        Algo::Adam => Controller::Deepo(DeepoOptions {
            optimizer: Optimizer::Adam(cfg.adam),
            identity_cov,
            ..Default::default()
        }),
        Algo::Ce => Controller::Ce,
        Algo::Zopo => Controller::Zopo(cfg.zopo),
        Algo::Fixed => Controller::Fixed(scn.k0.clone()),
        Algo::Mpc => match ind {
            Some(ind) => Controller::Mpc(ind.mpc_law(&cfg.mpc)?),
            None => {
                // receding horizon on the design model of the benchmark
                let b = cfg.bench3d.as_ref().expect("validated");
                let a_design = bench3d_a() * (1.0 + b.design_mismatch);
                Controller::Fixed(mpc_gain(&a_design, &scn.plant.b, &scn.weights, &cfg.mpc)?)
            }
        },
    })
}

fn run_job(cfg: &ExperimentConfig, ind: Option<&Industrial>, job: &Job) -> Result<Trajectory, CliError> {
    let scn = match cfg.preset {
        Preset::Bench3d => {
            let b = cfg.bench3d.as_ref().expect("validated");
            let level = job.case.level.expect("bench3d case has a level");
            bench3d_scenario(level, b.design_mismatch, NoiseSpec::gaussian(b.sigma_w, b.sigma_s))?
        }
        Preset::DhsIndustrial => {
            let s = cfg.industrial.as_ref().expect("validated");
            let ind = ind.expect("industrial model built");
            let spec = MismatchSpec {
                delta_e: job.case.delta_e,
                delta_c_amp: job.case.drift_amp,
                waveform: s.waveform,
            };
            ind.scenario(spec, ind.noise(), cfg.warm_start + cfg.steps + 1, job.seed)?
        }
    };
    let ctl = controller(cfg, job, &scn, ind)?;
    let opts = RunOptions {
        steps: cfg.steps,
        warm_start: cfg.warm_start,
        cost_stride: cfg.cost_stride.max(1),
        snapshot_stride: 0,
        snr_stride: cfg.snr_stride,
    };
    Ok(run_closed_loop(&scn, &ctl, &opts, job.seed)?)
}

pub fn execute(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<Outcome>, CliError> {
    let ind = match cfg.preset {
        Preset::DhsIndustrial => Some(Industrial::new(cfg.industrial.as_ref().expect("validated").params.clone())?),
        Preset::Bench3d => None,
    };
    let list = jobs(cfg);
    log::info!("running {} jobs", list.len());
    let outcomes = par::with_workers(workers, || {
        par::map(list, |job| match run_job(cfg, ind.as_ref(), &job) {
            Ok(traj) => Outcome { job, traj: Some(traj), error: None },
            Err(e) => {
                log::warn!("run {} failed: {e}", job.file_stem());
                Outcome { job, traj: None, error: Some(e.to_string()) }
            }
        })
    });
    Ok(outcomes)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn median(v: &mut [f64]) -> f64 {
    quantile(v, 0.5)
}

/// Linear-interpolated quantile; NaN for an empty slice.
fn quantile(v: &mut [f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Samples logged by the run at `t`, if any.
fn per_step_rows(cfg: &ExperimentConfig, traj: &Trajectory) -> Vec<[String; 6]> {
    let stride = cfg.cost_stride.max(1);
    let costs: BTreeMap<usize, &CostSample> = traj.costs.iter().map(|c| (c.t, c)).collect();
    let mut ts: Vec<usize> = (0..traj.xs.len()).step_by(stride).collect();
    ts.extend(costs.keys().copied());
    ts.sort_unstable();
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let c = costs.get(&t);
            let snr = traj.snr.iter().take_while(|(s, _)| *s <= t).last().map(|&(_, v)| v);
            [
                t.to_string(),
                c.map_or(String::new(), |c| num(c.cost)),
                c.map_or(String::new(), |c| num((c.cost - traj.c_star).abs() / traj.c_star)),
                traj.es.get(t).map_or(String::new(), |e| num(e.norm())),
                c.map_or(String::new(), |c| num(c.rho)),
                snr.map_or(String::new(), num),
            ]
        })
        .collect()
}

struct SummaryRow {
    algo: Algo,
    case: Case,
    cov: &'static str,
    seeds: usize,
    failed: usize,
    median: f64,
    q1: f64,
    q3: f64,
    window_e: f64,
    imp: f64,
}

fn summarize(cfg: &ExperimentConfig, outcomes: &[Outcome]) -> Vec<SummaryRow> {
    let window = cfg.industrial.as_ref().map_or(cfg.steps, |s| s.window);
    let mut groups: BTreeMap<(Algo, usize, &'static str), Vec<&Outcome>> = BTreeMap::new();
    let case_list = cases(cfg);
    for o in outcomes {
        let ci = case_list.iter().position(|c| *c == o.job.case).expect("known case");
        groups.entry((o.job.algo, ci, o.job.cov_name())).or_default().push(o);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((algo, ci, cov), os)| {
            let mut errs: Vec<f64> = os
                .iter()
                .filter(|o| !o.failed())
                .filter_map(|o| o.traj.as_ref())
                .map(|t| t.final_relative_error())
                .filter(|e| e.is_finite())
                .collect();
            let mut windows: Vec<f64> = os
                .iter()
                .filter_map(|o| o.traj.as_ref())
                .filter(|t| !t.es.is_empty())
                .map(|t| windowed_error_means(&t.es, window).amax())
                .collect();
            SummaryRow {
                algo,
                case: case_list[ci].clone(),
                cov,
                seeds: os.len(),
                failed: os.iter().filter(|o| o.failed()).count(),
                median: median(&mut errs),
                q1: quantile(&mut errs, 0.25),
                q3: quantile(&mut errs, 0.75),
                window_e: median(&mut windows),
                imp: f64::NAN,
            }
        })
        .collect();
    // IMP = (GD − ADAM) / GD on the ADAM row of each (case, cov)
    let gd: Vec<(String, &'static str, f64)> = rows
        .iter()
        .filter(|r| r.algo == Algo::Gd)
        .map(|r| (r.case.label.clone(), r.cov, r.median))
        .collect();
    for r in rows.iter_mut().filter(|r| r.algo == Algo::Adam) {
        if let Some((_, _, g)) = gd.iter().find(|(l, c, _)| *l == r.case.label && *c == r.cov) {
            r.imp = (g - r.median) / g;
        }
    }
    rows
}

/// Long-format plot data: median relative error over seeds per logged step
/// and, for heating runs, the windowed-mean optimality error of the first
/// seed.
fn plot_rows(cfg: &ExperimentConfig, outcomes: &[Outcome]) -> Vec<[String; 6]> {
    let mut series: BTreeMap<(Algo, String, &'static str), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut out = Vec::new();
    for o in outcomes {
        let Some(t) = &o.traj else { continue };
        let key = (o.job.algo, o.job.case.label.clone(), o.job.cov_name());
        let s = series.entry(key).or_default();
        for c in &t.costs {
            s.entry(c.t).or_default().push((c.cost - t.c_star).abs() / t.c_star);
        }
    }
    for ((algo, case, cov), s) in series {
        for (t, mut v) in s {
            let m = median(&mut v);
            out.push([algo.name().into(), case.clone(), cov.into(), t.to_string(), "rel_err_median".into(), num(m)]);
        }
    }
    if let Some(s) = &cfg.industrial {
        let first = cfg.seeds[0];
        for o in outcomes.iter().filter(|o| o.job.seed == first) {
            let Some(t) = &o.traj else { continue };
            let stride = cfg.cost_stride.max(1);
            for (k, e) in trailing_means(&t.es, s.window, stride) {
                for (i, v) in e.iter().enumerate() {
                    out.push([
                        o.job.algo.name().into(),
                        o.job.case.label.clone(),
                        o.job.cov_name().into(),
                        k.to_string(),
                        format!("e{i}_window_mean"),
                        num(*v),
                    ]);
                }
            }
        }
    }
    out
}

/// Trailing-window means of `es` at every `stride`-th step.
fn trailing_means(es: &[Vector], window: usize, stride: usize) -> Vec<(usize, Vector)> {
    let Some(first) = es.first() else { return Vec::new() };
    let mut prefix = vec![Vector::zeros(first.len())];
    for e in es {
        let next = prefix.last().expect("nonempty") + e;
        prefix.push(next);
    }
    (0..es.len())
        .step_by(stride)
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            (k, (&prefix[k + 1] - &prefix[lo]) / (k + 1 - lo) as f64)
        })
        .collect()
}

pub fn write_outputs(cfg: &ExperimentConfig, outcomes: &[Outcome], dir: &Path) -> Result<(), CliError> {
    let runs = dir.join("runs");
    fs::create_dir_all(&runs)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    for o in outcomes {
        let mut w = csv::Writer::from_path(runs.join(format!("{}.csv", o.job.file_stem())))?;
        w.write_record(["t", "cost", "rel_err", "e_norm", "rho", "snr"])?;
        if let Some(t) = &o.traj {
            for row in per_step_rows(cfg, t) {
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "algo", "case", "level", "delta_e", "drift_amp", "cov", "seeds", "failed", "median_rel_err", "q1_rel_err",
        "q3_rel_err", "median_window_e_max", "imp",
    ])?;
    for r in summarize(cfg, outcomes) {
        w.write_record([
            r.algo.name().to_string(),
            r.case.label.clone(),
            r.case.level.map_or(String::new(), |l| l.to_string()),
            num(r.case.delta_e),
            num(r.case.drift_amp),
            r.cov.to_string(),
            r.seeds.to_string(),
            r.failed.to_string(),
            num(r.median),
            num(r.q1),
            num(r.q3),
            num(r.window_e),
            num(r.imp),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("plot.csv"))?;
    w.write_record(["algo", "case", "cov", "t", "metric", "value"])?;
    for row in plot_rows(cfg, outcomes) {
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["run", "reason"])?;
    for o in outcomes.iter().filter(|o| o.failed()) {
        let reason = match (&o.error, &o.traj) {
            (Some(e), _) => e.clone(),
            (None, Some(t)) => format!("diverged at step {}", t.diverged.unwrap_or(0)),
            (None, None) => "unknown".into(),
        };
        w.write_record([o.job.file_stem(), reason])?;
    }
    w.flush()?;
    Ok(())
}
