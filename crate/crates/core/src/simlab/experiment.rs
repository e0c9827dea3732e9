//! Monte Carlo experiment driver.
//!
//! Trial `(sweep index i, rep r)` draws all of its randomness from
//! `seed / "simulation" / i / r`, so the output table does not depend on the
//! number of worker threads or the order in which trials finish.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{analytic_dgp_ratio, DgpParams};
use crate::engine::{run_test, TargetMean, TestError, TestInputs};
use crate::model::{DensityRatio, Method, Population, ProductStatistic, TestConfig};
use crate::ratio::{fit_factorized_ratio, ElasticNetOptions, RatioError, XzFactor};
use crate::rng::{streams, SeedTree};

/// How the density ratio of a trial is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// The exact ratio of the design.
    Analytic,
    /// Known `Z_r` factor times an elastic-net `V | X, Z` factor fitted on pools.
    Estimated,
}

impl FromStr for RatioMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(RatioMode::Analytic),
            "estimated" => Ok(RatioMode::Estimated),
            other => Err(format!("unknown ratio mode `{other}` (expected analytic or estimated)")),
        }
    }
}

/// Source of `E_T[V]` for the power-enhanced test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMeanMode {
    Exact,
    Pool,
}

impl FromStr for TargetMeanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(TargetMeanMode::Exact),
            "pool" => Ok(TargetMeanMode::Pool),
            other => Err(format!("unknown target mean mode `{other}` (expected exact or pool)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    ASource,
    ATarget,
    ThetaNl,
    BetaIndirect,
    GammaDirect,
    NLabeled,
    NPool,
    K,
    L,
}

impl SweepParam {
    pub const ALL: [SweepParam; 9] = [
        SweepParam::ASource,
        SweepParam::ATarget,
        SweepParam::ThetaNl,
        SweepParam::BetaIndirect,
        SweepParam::GammaDirect,
        SweepParam::NLabeled,
        SweepParam::NPool,
        SweepParam::K,
        SweepParam::L,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::ASource => "a_s",
            SweepParam::ATarget => "a_t",
            SweepParam::ThetaNl => "theta_nl",
            SweepParam::BetaIndirect => "beta_indirect",
            SweepParam::GammaDirect => "gamma_direct",
            SweepParam::NLabeled => "n_labeled",
            SweepParam::NPool => "n_pool",
            SweepParam::K => "k",
            SweepParam::L => "l",
        }
    }

    fn apply(self, value: f64, params: &mut DgpParams, config: &mut TestConfig) {
        let count = value.round().max(1.0) as usize;
        match self {
            SweepParam::ASource => params.a_s = value,
            SweepParam::ATarget => params.a_t = value,
            SweepParam::ThetaNl => params.theta_nl = value,
            SweepParam::BetaIndirect => params.beta_indirect = value,
            SweepParam::GammaDirect => params.gamma_direct = value,
            SweepParam::NLabeled => params.n_labeled = count,
            SweepParam::NPool => params.n_pool = count,
            SweepParam::K => config.k = count,
            SweepParam::L => config.l = count,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown sweep parameter `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub base: DgpParams,
    pub sweep: Sweep,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub ratio_mode: RatioMode,
    pub target_mean: TargetMeanMode,
    /// `method` is ignored; `seed` is the master seed of the experiment.
    pub config: TestConfig,
    pub elastic_net: ElasticNetOptions,
}

impl ExperimentGrid {
    pub fn new(base: DgpParams, sweep: Sweep, methods: Vec<Method>, reps: usize, ratio_mode: RatioMode) -> Self {
        ExperimentGrid {
            base,
            sweep,
            methods,
            reps,
            ratio_mode,
            target_mean: TargetMeanMode::Exact,
            config: TestConfig::new(Method::Cspcr),
            elastic_net: ElasticNetOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.reps == 0 {
            return Err("reps must be at least 1".into());
        }
        if self.methods.is_empty() {
            return Err("no methods requested".into());
        }
        if self.sweep.values.is_empty() || self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err("sweep values must be nonempty and finite".into());
        }
        for &value in &self.sweep.values {
            let (params, config) = self.cell(value);
            params.validate()?;
            config.validate(params.n_labeled).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn cell(&self, value: f64) -> (DgpParams, TestConfig) {
        let mut params = self.base.clone();
        let mut config = self.config.clone();
        self.sweep.param.apply(value, &mut params, &mut config);
        (params, config)
    }
}

/// Decisions of one trial, in the order of the requested methods.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub decisions: Vec<(Method, Result<bool, TestError>)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrialError {
    #[error(transparent)]
    Ratio(#[from] RatioError),
}

/// One simulated data set tested by every requested method.
///
/// All methods share the same data and the same labeling streams.
pub fn run_trial(
    params: &DgpParams,
    grid: &ExperimentGrid,
    config: &TestConfig,
    trial: SeedTree,
) -> Result<TrialOutcome, TrialError> {
    let data = params.gen_labeled(Population::Source, params.n_labeled, &mut trial.child("labeled").rng());
    let needs_pools = grid.ratio_mode == RatioMode::Estimated;
    let needs_target = needs_pools
        || (grid.target_mean == TargetMeanMode::Pool && grid.methods.contains(&Method::CspcrPe));
    let source_pool = needs_pools.then(|| params.gen_pool(Population::Source, params.n_pool, &mut trial.child("pool-source").rng()));
    let target_pool = needs_target.then(|| params.gen_pool(Population::Target, params.n_pool, &mut trial.child("pool-target").rng()));

    let analytic;
    let estimated;
    let ratio: &dyn DensityRatio = match grid.ratio_mode {
        RatioMode::Analytic => {
            analytic = analytic_dgp_ratio(params);
            &analytic
        }
        RatioMode::Estimated => {
            estimated = fit_factorized_ratio(
                source_pool.as_ref().expect("pools generated"),
                target_pool.as_ref().expect("pools generated"),
                XzFactor::MeanShift(params.z_shift()),
                &grid.elastic_net,
                trial.child("ratio-fit").seed(),
            )?;
            &estimated
        }
    };

    let sampler = params.sampler();
    let target_mean = match (grid.target_mean, &target_pool) {
        (TargetMeanMode::Pool, Some(pool)) => TargetMean::Pool(pool),
        _ => TargetMean::Exact(params.target_mean_v()),
    };
    let inputs = TestInputs::new(&data, &sampler, &ProductStatistic)
        .with_ratio(ratio)
        .with_target_mean(target_mean);
    let seed = trial.child("test").seed();
    let decisions = grid
        .methods
        .iter()
        .map(|&method| {
            let cfg = TestConfig { method, seed, ..config.clone() };
            (method, run_test(&inputs, &cfg).map(|r| r.reject))
        })
        .collect();
    Ok(TrialOutcome { decisions })
}

/// Aggregate of one (sweep value, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub sweep_param: SweepParam,
    pub sweep_value: f64,
    pub method: Method,
    pub reps: usize,
    pub rejections: usize,
    pub errors: usize,
}

impl CellResult {
    /// Rejection rate over the trials that produced a decision.
    pub fn reject_rate(&self) -> f64 {
        let valid = self.reps - self.errors;
        if valid == 0 {
            f64::NAN
        } else {
            self.rejections as f64 / valid as f64
        }
    }

    pub fn mc_se(&self) -> f64 {
        let r = self.reject_rate();
        (r * (1.0 - r) / (self.reps - self.errors) as f64).sqrt()
    }
}

/// Runs every trial of the grid on `threads` worker threads.
pub fn run_experiment(grid: &ExperimentGrid, threads: usize) -> Result<Vec<CellResult>, String> {
    grid.validate()?;
    let root = SeedTree::new(grid.config.seed).child(streams::SIMULATION);
    let cells: Vec<(DgpParams, TestConfig)> = grid.sweep.values.iter().map(|&v| grid.cell(v)).collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|i| (0..grid.reps).map(move |r| (i, r))).collect();

    let work = || -> Vec<Result<TrialOutcome, TrialError>> {
        jobs.par_iter()
            .map(|&(i, r)| {
                let (params, config) = &cells[i];
                run_trial(params, grid, config, root.index(i as u64).index(r as u64))
            })
            .collect()
    };
    let outcomes = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| e.to_string())?
        .install(work);

    let mut table = Vec::with_capacity(cells.len() * grid.methods.len());
    for (i, &value) in grid.sweep.values.iter().enumerate() {
        for (m, &method) in grid.methods.iter().enumerate() {
            let mut cell = CellResult { sweep_param: grid.sweep.param, sweep_value: value, method, reps: grid.reps, rejections: 0, errors: 0 };
            for outcome in &outcomes[i * grid.reps..(i + 1) * grid.reps] {
                match outcome {
                    Ok(t) => match &t.decisions[m].1 {
                        Ok(true) => cell.rejections += 1,
                        Ok(false) => {}
                        Err(_) => cell.errors += 1,
                    },
                    Err(_) => cell.errors += 1,
                }
            }
            table.push(cell);
        }
    }
    Ok(table)
}

pub fn write_csv(cells: &[CellResult], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "sweep_param,sweep_value,method,reps,reject_rate,mc_se,errors_count")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.sweep_param,
            c.sweep_value,
            c.method,
            c.reps,
            c.reject_rate(),
            c.mc_se(),
            c.errors
        )?;
    }
    Ok(())
}

pub const PRESETS: [&str; 6] = ["typei-vs-ne", "typei-vs-beta", "power-vs-beta", "power-vs-gamma", "power-vs-theta", "l-sweep"];

/// Named experiment settings with `reps` repetitions.
pub fn preset(name: &str, reps: usize) -> Option<ExperimentGrid> {
    use Method::*;
    let all = vec![Cspcr, CspcrPe, Is];
    let grid = match name {
        "typei-vs-ne" => ExperimentGrid::new(
            DgpParams::null_shift(),
            Sweep { param: SweepParam::NPool, values: vec![100.0, 200.0, 500.0, 1000.0, 2000.0] },
            vec![Cspcr, CspcrPe, Pcr, Is],
            reps,
            RatioMode::Estimated,
        ),
        "typei-vs-beta" => ExperimentGrid::new(
            DgpParams::null_shift(),
            Sweep { param: SweepParam::BetaIndirect, values: vec![0.0, 0.5, 1.0, 1.5, 2.0] },
            vec![Cspcr, CspcrPe, Pcr, Is],
            reps,
            RatioMode::Estimated,
        ),
        "power-vs-beta" => ExperimentGrid::new(
            DgpParams::alternative(1.0),
            Sweep { param: SweepParam::BetaIndirect, values: vec![0.0, 0.4, 0.8, 1.0, 1.4, 1.6, 2.0] },
            all,
            reps,
            RatioMode::Estimated,
        ),
        "power-vs-gamma" => ExperimentGrid::new(
            DgpParams::alternative(2.0),
            Sweep { param: SweepParam::GammaDirect, values: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5] },
            all,
            reps,
            RatioMode::Estimated,
        ),
        "power-vs-theta" => ExperimentGrid::new(
            DgpParams::alternative(2.0),
            Sweep { param: SweepParam::ThetaNl, values: vec![0.0, 0.25, 0.5, 0.75, 1.0] },
            all,
            reps,
            RatioMode::Estimated,
        ),
        "l-sweep" => ExperimentGrid::new(
            DgpParams::null_shift(),
            Sweep { param: SweepParam::L, values: vec![2.0, 3.0, 5.0, 10.0, 15.0, 20.0] },
            vec![Cspcr],
            reps,
            RatioMode::Analytic,
        ),
        _ => return None,
    };
    Some(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid(reps: usize) -> ExperimentGrid {
        let base = DgpParams { n_labeled: 60, n_pool: 80, ..DgpParams::default() };
        let mut grid = ExperimentGrid::new(
            base,
            Sweep { param: SweepParam::BetaIndirect, values: vec![0.5, 1.5] },
            vec![Method::Cspcr, Method::Pcr],
            reps,
            RatioMode::Analytic,
        );
        grid.config.k = 5;
        grid.config.seed = 17;
        grid
    }

    #[test]
    fn single_rep_gives_zero_one_rates() {
        let grid = small_grid(1);
        let table = run_experiment(&grid, 1).unwrap();
        assert_eq!(table.len(), 4);
        for cell in &table {
            let r = cell.reject_rate();
            assert!(r == 0.0 || r == 1.0);
        }
        let root = SeedTree::new(17).child(streams::SIMULATION);
        let (params, config) = grid.cell(0.5);
        let trial = run_trial(&params, &grid, &config, root.index(0).index(0)).unwrap();
        assert_eq!(table[0].rejections, usize::from(*trial.decisions[0].1.as_ref().unwrap()));
    }

    #[test]
    fn thread_count_does_not_change_the_table() {
        let grid = small_grid(6);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&run_experiment(&grid, 1).unwrap(), &mut a).unwrap();
        write_csv(&run_experiment(&grid, 3).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn estimated_mode_runs_every_method() {
        let mut grid = small_grid(2);
        grid.ratio_mode = RatioMode::Estimated;
        grid.methods = Method::ALL.to_vec();
        let table = run_experiment(&grid, 1).unwrap();
        assert!(table.iter().all(|c| c.errors == 0));
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            preset(name, 3).unwrap().validate().unwrap();
        }
        assert!(preset("nope", 3).is_none());
    }

    #[test]
    fn csv_layout() {
        let cells = vec![CellResult {
            sweep_param: SweepParam::L,
            sweep_value: 3.0,
            method: Method::CspcrPe,
            reps: 4,
            rejections: 1,
            errors: 0,
        }];
        let mut out = Vec::new();
        write_csv(&cells, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let expected_se = (0.25f64 * 0.75 / 4.0).sqrt();
        assert_eq!(
            text,
            format!("sweep_param,sweep_value,method,reps,reject_rate,mc_se,errors_count\nl,3,cspcr-pe,4,0.25,{expected_se},0\n")
        );
    }
}
