//! Experiment plans: sweeps over algorithms, dimensions, particle counts and
//! seeds, with per-cell result files and aggregate tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run, Algo, DynamicsConfig, InitRegion, UpdateOrder};
use crate::ensemble::AveragingConfig;
use crate::error::{Error, Result};
use crate::games::GameConfig;
use crate::io::write_json;
use crate::metrics::{NiEstimatorConfig, NiEvaluator};
use crate::scalar::Scalar;

pub const LONG_HEADER: [&str; 7] = ["algo", "dim", "n", "seed", "iter", "ni", "wall_ms"];
pub const AGG_HEADER: [&str; 6] = ["algo", "dim", "n", "count", "mean_ni", "std_ni"];

/// Dynamics parameters shared by every cell of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellParams {
    pub eta: f64,
    pub eta_w: f64,
    pub beta: f64,
    pub ni_eval_every: usize,
    pub averaging: AveragingConfig,
    pub init: InitRegion,
    pub order: UpdateOrder,
    pub geodesic_steps: bool,
}

impl Default for CellParams {
    fn default() -> Self {
        let d = DynamicsConfig::new(Algo::Wfr);
        Self {
            eta: d.eta,
            eta_w: d.eta_w,
            beta: d.beta,
            ni_eval_every: d.ni_eval_every,
            averaging: d.averaging,
            init: d.init,
            order: d.order,
            geodesic_steps: d.geodesic_steps,
        }
    }
}

impl CellParams {
    pub fn config(&self, algo: Algo, n: usize, iters: usize, seed: u64) -> DynamicsConfig {
        DynamicsConfig {
            algo,
            eta: self.eta,
            eta_w: self.eta_w,
            beta: self.beta,
            iters,
            n,
            seed,
            averaging: self.averaging,
            ni_eval_every: self.ni_eval_every,
            order: self.order,
            init: self.init,
            geodesic_steps: self.geodesic_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    /// Template; `dim` and `seed` are replaced per cell where the kind has them.
    pub game: GameConfig,
    pub dims: Vec<usize>,
    pub algos: Vec<Algo>,
    pub n: Vec<usize>,
    pub iters: usize,
    /// Seeds `seed_offset .. seed_offset + repeats`.
    pub repeats: usize,
    #[serde(default)]
    pub seed_offset: u64,
    #[serde(default)]
    pub params: CellParams,
    /// Per-algorithm overrides of `params`.
    #[serde(default)]
    pub overrides: BTreeMap<Algo, CellParams>,
    #[serde(default)]
    pub estimator: NiEstimatorConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |what: &str| Error::Config(format!("plan `{}`: `{what}` must be nonempty", self.name));
        if self.dims.is_empty() {
            return Err(empty("dims"));
        }
        if self.algos.is_empty() {
            return Err(empty("algos"));
        }
        if self.n.is_empty() {
            return Err(empty("n"));
        }
        if self.repeats < 1 {
            return Err(Error::Config(format!("plan `{}`: `repeats` must be at least 1", self.name)));
        }
        self.estimator.validate()
    }

    pub fn params_for(&self, algo: Algo) -> &CellParams {
        self.overrides.get(&algo).unwrap_or(&self.params)
    }

    /// Cells in a fixed order: algo, dim, n, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &algo in &self.algos {
            for &dim in &self.dims {
                for &n in &self.n {
                    for r in 0..self.repeats as u64 {
                        let seed = self.seed_offset + r;
                        out.push(Cell {
                            algo,
                            dim,
                            n,
                            seed,
                            game: self.game.instantiate(dim, seed),
                            dynamics: self.params_for(algo).config(algo, n, self.iters, seed),
                            estimator: NiEstimatorConfig {
                                seed,
                                ..self.estimator
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

/// One `(algo, dim, n, seed)` run with its full configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub algo: Algo,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub game: GameConfig,
    pub dynamics: DynamicsConfig,
    pub estimator: NiEstimatorConfig,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Cell {
    /// Stable identifier; the suffix hashes the full cell configuration so a
    /// changed parameter never reuses stale results.
    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("cell serializes");
        format!(
            "{}_d{}_n{}_s{}_{:016x}",
            self.algo,
            self.dim,
            self.n,
            self.seed,
            fnv1a(json.as_bytes())
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub algo: Algo,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub iter: usize,
    pub ni: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub algo: Algo,
    pub dim: usize,
    pub n: usize,
    pub count: usize,
    pub mean_ni: f64,
    /// Sample standard deviation (zero for a single value).
    pub std_ni: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub long: Vec<LongRow>,
    pub aggregate: Vec<AggRow>,
    pub failures: Vec<CellFailure>,
}

impl SweepResult {
    /// Final-checkpoint NI of every seed of one `(algo, dim, n)` group.
    pub fn finals(&self, algo: Algo, dim: usize, n: usize) -> Vec<f64> {
        final_rows(&self.long)
            .into_iter()
            .filter(|r| r.algo == algo && r.dim == dim && r.n == n)
            .map(|r| r.ni)
            .collect()
    }

    pub fn agg(&self, algo: Algo, dim: usize, n: usize) -> Option<&AggRow> {
        self.aggregate
            .iter()
            .find(|r| r.algo == algo && r.dim == dim && r.n == n)
    }
}

/// Last row of every `(algo, dim, n, seed)` run.
pub fn final_rows(long: &[LongRow]) -> Vec<&LongRow> {
    let mut last: BTreeMap<(Algo, usize, usize, u64), &LongRow> = BTreeMap::new();
    for r in long {
        let e = last.entry((r.algo, r.dim, r.n, r.seed)).or_insert(r);
        if r.iter >= e.iter {
            *e = r;
        }
    }
    last.into_values().collect()
}

/// Sample mean and standard deviation (`ddof = 1`).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates final-checkpoint NI per `(algo, dim, n)`.
pub fn aggregate(long: &[LongRow]) -> Vec<AggRow> {
    let mut groups: BTreeMap<(Algo, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in final_rows(long) {
        groups.entry((r.algo, r.dim, r.n)).or_default().push(r.ni);
    }
    groups
        .into_iter()
        .map(|((algo, dim, n), v)| {
            let (mean_ni, std_ni) = mean_std(&v);
            AggRow {
                algo,
                dim,
                n,
                count: v.len(),
                mean_ni,
                std_ni,
            }
        })
        .collect()
}

/// Runs one cell and returns its long rows.
pub fn run_cell<F: Scalar>(cell: &Cell) -> Result<Vec<LongRow>> {
    let game = cell.game.build::<F>()?;
    let evaluator = NiEvaluator::new(cell.estimator);
    let record = run(&game, &cell.dynamics, |cp| evaluator.evaluate(cp))?;
    Ok(record
        .rows
        .iter()
        .map(|r| LongRow {
            algo: cell.algo,
            dim: cell.dim,
            n: cell.n,
            seed: cell.seed,
            iter: r.iter,
            ni: r.ni(),
            wall_ms: r.wall_ms,
        })
        .collect())
}

fn write_long(path: &Path, rows: &[LongRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LONG_HEADER)?;
    for r in rows {
        w.write_record([
            r.algo.to_string(),
            r.dim.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.iter.to_string(),
            r.ni.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_long(path: &Path) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |k: usize| Error::Config(format!("{}: bad `{}` value `{}`", path.display(), LONG_HEADER[k], &rec[k]));
        rows.push(LongRow {
            algo: rec[0].parse()?,
            dim: rec[1].parse().map_err(|_| bad(1))?,
            n: rec[2].parse().map_err(|_| bad(2))?,
            seed: rec[3].parse().map_err(|_| bad(3))?,
            iter: rec[4].parse().map_err(|_| bad(4))?,
            ni: rec[5].parse().map_err(|_| bad(5))?,
            wall_ms: rec[6].parse().map_err(|_| bad(6))?,
        });
    }
    Ok(rows)
}

fn write_agg(path: &Path, rows: &[AggRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGG_HEADER)?;
    for r in rows {
        w.write_record([
            r.algo.to_string(),
            r.dim.to_string(),
            r.n.to_string(),
            r.count.to_string(),
            r.mean_ni.to_string(),
            r.std_ni.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Summary<'a> {
    plan: &'a ExperimentPlan,
    cells: usize,
    failures: &'a [CellFailure],
    aggregate: &'a [AggRow],
}

/// Executes every cell of `plan`, in parallel. With an output directory,
/// each finished cell is stored as `cells/<id>.csv` and reused on later runs,
/// and `sweep_long.csv`, `sweep_agg.csv` and `summary.json` are written.
///
/// Failed cells are recorded and skipped; the plan fails only when every
/// cell fails.
pub fn run_plan<F: Scalar>(plan: &ExperimentPlan, output_dir: Option<&Path>) -> Result<SweepResult> {
    plan.validate()?;
    let out = output_dir.or(plan.output_dir.as_deref());
    let cells = plan.cells();
    let results: Vec<(String, Result<Vec<LongRow>>)> = cells
        .par_iter()
        .map(|cell| {
            let id = cell.id();
            let cached = out.map(|d| d.join("cells").join(format!("{id}.csv")));
            if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
                return (id, read_long(p));
            }
            let res = run_cell::<F>(cell).and_then(|rows| {
                if let Some(p) = &cached {
                    write_long(p, &rows)?;
                }
                Ok(rows)
            });
            (id, res)
        })
        .collect();
    let mut long = Vec::new();
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(rows) => long.extend(rows),
            Err(e) => failures.push(CellFailure {
                cell: id,
                error: e.to_string(),
            }),
        }
    }
    if long.is_empty() && !failures.is_empty() {
        return Err(Error::Config(format!(
            "every cell of plan `{}` failed; first error: {}",
            plan.name, failures[0].error
        )));
    }
    let aggregate = aggregate(&long);
    if let Some(dir) = out {
        write_long(&dir.join("sweep_long.csv"), &long)?;
        write_agg(&dir.join("sweep_agg.csv"), &aggregate)?;
        write_json(
            &dir.join("summary.json"),
            &Summary {
                plan,
                cells: cells.len(),
                failures: &failures,
                aggregate: &aggregate,
            },
        )?;
    }
    Ok(SweepResult {
        long,
        aggregate,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldCurve {
    pub n: usize,
    /// `(iter, mean NI over seeds)`.
    pub points: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldDim {
    pub dim: usize,
    pub curves: Vec<MeanFieldCurve>,
    /// `(iter, mean over seeds of |NI(n_first) − NI(n_last)|)`.
    pub gaps: Vec<(usize, f64)>,
    pub final_gap: f64,
    pub max_gap: f64,
    /// Final NI per seed for each `n`, in `n_list` order.
    pub finals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldReport {
    pub algo: Algo,
    pub n_list: Vec<usize>,
    pub dims: Vec<MeanFieldDim>,
}

/// Runs matched seeds for every `n` in `n_list` and compares NI curves of
/// the first and last entry checkpoint by checkpoint.
pub fn meanfield_check<F: Scalar>(
    game: &GameConfig,
    algo: Algo,
    dims: &[usize],
    n_list: &[usize],
    seeds: &[u64],
    iters: usize,
    params: &CellParams,
    estimator: &NiEstimatorConfig,
) -> Result<MeanFieldReport> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("n_list", "must be nonempty and ascending"));
    }
    if seeds.is_empty() || dims.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed and one dimension"));
    }
    let plan = ExperimentPlan {
        name: "meanfield".into(),
        game: game.clone(),
        dims: dims.to_vec(),
        algos: vec![algo],
        n: n_list.to_vec(),
        iters,
        repeats: 1,
        seed_offset: 0,
        params: params.clone(),
        overrides: BTreeMap::new(),
        estimator: *estimator,
        output_dir: None,
    };
    let mut cells = Vec::new();
    for &dim in dims {
        for (k, &n) in n_list.iter().enumerate() {
            for &seed in seeds {
                cells.push((dim, k, seed, Cell {
                    algo,
                    dim,
                    n,
                    seed,
                    game: plan.game.instantiate(dim, seed),
                    dynamics: params.config(algo, n, iters, seed),
                    estimator: NiEstimatorConfig { seed, ..*estimator },
                }));
            }
        }
    }
    let runs: Vec<Vec<LongRow>> = cells
        .par_iter()
        .map(|(_, _, _, c)| run_cell::<F>(c))
        .collect::<Result<_>>()?;
    let mut report = Vec::new();
    for &dim in dims {
        let rows_for = |k: usize, seed: u64| -> &Vec<LongRow> {
            let idx = cells
                .iter()
                .position(|(d, kk, s, _)| *d == dim && *kk == k && *s == seed)
                .expect("cell exists");
            &runs[idx]
        };
        let curves = (0..n_list.len())
            .map(|k| {
                let first = rows_for(k, seeds[0]);
                let points = first
                    .iter()
                    .enumerate()
                    .map(|(c, r)| {
                        let vals: Vec<f64> = seeds.iter().map(|&s| rows_for(k, s)[c].ni).collect();
                        (r.iter, mean_std(&vals).0)
                    })
                    .collect();
                MeanFieldCurve { n: n_list[k], points }
            })
            .collect();
        let last = n_list.len() - 1;
        let gaps: Vec<(usize, f64)> = rows_for(0, seeds[0])
            .iter()
            .enumerate()
            .map(|(c, r)| {
                let diffs: Vec<f64> = seeds
                    .iter()
                    .map(|&s| (rows_for(0, s)[c].ni - rows_for(last, s)[c].ni).abs())
                    .collect();
                (r.iter, mean_std(&diffs).0)
            })
            .collect();
        let finals = (0..n_list.len())
            .map(|k| seeds.iter().map(|&s| rows_for(k, s).last().unwrap().ni).collect())
            .collect();
        report.push(MeanFieldDim {
            dim,
            curves,
            final_gap: gaps.last().map_or(0.0, |g| g.1),
            max_gap: gaps.iter().map(|g| g.1).fold(0.0, f64::max),
            gaps,
            finals,
        });
    }
    Ok(MeanFieldReport {
        algo,
        n_list: n_list.to_vec(),
        dims: report,
    })
}
