//! Particle update rules and the run loop.
//!
//! * `iwgf`: transport descent-ascent on uniformly weighted particles;
//! * `lda`: `iwgf` plus tangent-projected Gaussian noise at inverse
//!   temperature `β`;
//! * `wfr`: transport plus multiplicative weight updates against the
//!   opponent-averaged potential;
//! * `md`: `wfr` with frozen positions (mirror descent on the weights).
//!
//! Position steps follow the tangent-projected gradient of the
//! opponent-averaged potential and are mapped back with the manifold
//! retraction. With simultaneous ordering both players read iterate `t`.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{AveragedMeasure, AveragingConfig, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::games::{Field, Game, Player};
use crate::linalg::{all_finite, axpy, scale};
use crate::manifold::Manifold;
use crate::rng::{ParticleStreams, StreamRng};
use crate::scalar::Scalar;

/// Below this many coordinates per player a step runs on the calling thread.
const PARALLEL_MIN_COORDS: usize = 1024;

/// Tolerance for the uniform-weight precondition of `iwgf` and `lda`.
const UNIFORM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Iwgf,
    Lda,
    Wfr,
    Md,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Iwgf, Algo::Lda, Algo::Wfr, Algo::Md];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Iwgf => "iwgf",
            Algo::Lda => "lda",
            Algo::Wfr => "wfr",
            Algo::Md => "md",
        }
    }

    /// Whether NI is evaluated on the time-averaged weights.
    pub fn uses_time_average(self) -> bool {
        matches!(self, Algo::Wfr | Algo::Md)
    }

    fn moves_positions(self) -> bool {
        !matches!(self, Algo::Md)
    }

    fn updates_weights(self) -> bool {
        matches!(self, Algo::Wfr | Algo::Md)
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}` (expected iwgf, lda, wfr or md)")))
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    /// Both players read iterate `t` (Jacobi).
    #[default]
    Simultaneous,
    /// X moves first, Y reads the updated X (Gauss-Seidel).
    Alternating,
}

/// Where initial positions are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitRegion {
    /// Uniform on the whole manifold.
    #[default]
    Uniform,
    /// Uniform on `[lo, hi]` in every coordinate (tori and boxes).
    Interval { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub algo: Algo,
    /// Position step `η`; unused by `md`.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Weight step `η'`; unused by `iwgf` and `lda`.
    #[serde(default = "default_eta")]
    pub eta_w: f64,
    /// Inverse temperature of `lda`; `+∞` switches the noise off.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub iters: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub averaging: AveragingConfig,
    /// Checkpoint period; `0` records only the first and last iterate.
    #[serde(default)]
    pub ni_eval_every: usize,
    #[serde(default)]
    pub order: UpdateOrder,
    #[serde(default)]
    pub init: InitRegion,
    /// Exact exponential map instead of the retraction on spheres.
    #[serde(default)]
    pub geodesic_steps: bool,
}

fn default_eta() -> f64 {
    0.05
}

fn default_beta() -> f64 {
    20.0
}

fn default_n() -> usize {
    50
}

impl DynamicsConfig {
    pub fn new(algo: Algo) -> Self {
        Self {
            algo,
            eta: default_eta(),
            eta_w: default_eta(),
            beta: default_beta(),
            iters: 0,
            n: default_n(),
            seed: 0,
            averaging: AveragingConfig::default(),
            ni_eval_every: 0,
            order: UpdateOrder::default(),
            init: InitRegion::default(),
            geodesic_steps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.eta) {
            return Err(Error::invalid("eta", format!("must be finite and nonnegative, got {}", self.eta)));
        }
        if !finite_nonneg(self.eta_w) {
            return Err(Error::invalid(
                "eta_w",
                format!("must be finite and nonnegative, got {}", self.eta_w),
            ));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta", format!("must be positive, got {}", self.beta)));
        }
        if self.n < 1 {
            return Err(Error::invalid("n", "need at least one particle"));
        }
        if self.averaging.stride == 0 {
            return Err(Error::invalid("averaging.stride", "must be positive"));
        }
        if let InitRegion::Interval { lo, hi } = self.init {
            if !(lo < hi) {
                return Err(Error::invalid("init", format!("empty interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// `γ/α` of the continuous-time flow, realized as `η/η'`.
    pub fn gamma_over_alpha(&self) -> Option<f64> {
        (self.eta_w > 0.0).then(|| self.eta / self.eta_w)
    }
}

/// One discrete update rule with its step sizes.
#[derive(Clone, Copy, Debug)]
pub struct StepRule<F> {
    pub algo: Algo,
    pub eta: F,
    pub eta_w: F,
    pub beta: F,
    pub order: UpdateOrder,
    pub geodesic: bool,
}

impl<F: Scalar> StepRule<F> {
    pub fn from_config(cfg: &DynamicsConfig) -> Self {
        Self {
            algo: cfg.algo,
            eta: F::lit(cfg.eta),
            eta_w: F::lit(cfg.eta_w),
            beta: F::lit(cfg.beta),
            order: cfg.order,
            geodesic: cfg.geodesic_steps,
        }
    }

    fn simple(algo: Algo, eta: F, eta_w: F, beta: F) -> Self {
        Self {
            algo,
            eta,
            eta_w,
            beta,
            order: UpdateOrder::Simultaneous,
            geodesic: false,
        }
    }

    /// `√(2η/β)` for `lda`, zero otherwise.
    pub fn noise_coefficient(&self) -> F {
        match self.algo {
            Algo::Lda if self.beta.is_finite() => (F::lit(2.0) * self.eta / self.beta).sqrt(),
            _ => F::zero(),
        }
    }

    /// Advances both ensembles by one step in place. `streams` supplies the
    /// per-particle noise and is only consulted when the noise is on.
    pub fn step(
        &self,
        ex: &mut WeightedEnsemble<F>,
        ey: &mut WeightedEnsemble<F>,
        game: &Game<F>,
        mut streams: Option<&mut ParticleStreams>,
    ) -> Result<()> {
        if matches!(self.algo, Algo::Iwgf | Algo::Lda) {
            for (p, e) in [(Player::X, &*ex), (Player::Y, &*ey)] {
                if !e.is_uniform(F::lit(UNIFORM_TOL)) {
                    return Err(Error::invalid(
                        "weights",
                        format!("{} requires uniform weights, player {p:?} has non-uniform weights", self.algo),
                    ));
                }
            }
        }
        let noise = self.noise_coefficient();
        if noise > F::zero() && streams.is_none() {
            return Err(Error::invalid("rng", "lda with finite beta needs particle streams"));
        }
        let on = noise > F::zero();
        match self.order {
            UpdateOrder::Simultaneous => {
                let x0 = ex.clone();
                self.update_player(Player::X, ex, &game.field(Player::X, ey), noise, player_streams(&mut streams, Player::X, on))?;
                self.update_player(Player::Y, ey, &game.field(Player::Y, &x0), noise, player_streams(&mut streams, Player::Y, on))?;
            }
            UpdateOrder::Alternating => {
                self.update_player(Player::X, ex, &game.field(Player::X, ey), noise, player_streams(&mut streams, Player::X, on))?;
                self.update_player(Player::Y, ey, &game.field(Player::Y, ex), noise, player_streams(&mut streams, Player::Y, on))?;
            }
        }
        Ok(())
    }

    fn update_player(
        &self,
        player: Player,
        e: &mut WeightedEnsemble<F>,
        field: &Field<'_, F>,
        noise: F,
        streams: Option<&mut [StreamRng]>,
    ) -> Result<()> {
        let sign = match player {
            Player::X => -F::one(),
            Player::Y => F::one(),
        };
        let scores: Option<Vec<F>> = (self.algo.updates_weights() && self.eta_w != F::zero())
            .then(|| e.positions().map(|p| field.value(p)).collect());
        let eta = if self.algo.moves_positions() { self.eta } else { F::zero() };
        transport(e, field, sign * eta, noise, streams, self.geodesic)?;
        if let Some(s) = scores {
            if !all_finite(&s) {
                return Err(Error::NonFinite(format!("loss of player {player:?}")));
            }
            e.multiplicative_update(&s, -sign * self.eta_w)?;
        }
        Ok(())
    }
}

fn player_streams<'s>(
    streams: &'s mut Option<&mut ParticleStreams>,
    player: Player,
    on: bool,
) -> Option<&'s mut [StreamRng]> {
    match streams {
        Some(s) if on => Some(s.for_player(player)),
        _ => None,
    }
}

/// Moves every particle by `signed_eta·grad` (projected) plus projected noise.
fn transport<F: Scalar>(
    e: &mut WeightedEnsemble<F>,
    field: &Field<'_, F>,
    signed_eta: F,
    noise: F,
    streams: Option<&mut [StreamRng]>,
    geodesic: bool,
) -> Result<()> {
    if signed_eta == F::zero() && noise == F::zero() {
        return Ok(());
    }
    let manifold: Manifold<F> = e.manifold().clone();
    let dim = e.dim();
    let parallel = e.coords().len() >= PARALLEL_MIN_COORDS;
    let move_one = |x: &mut [F], rng: Option<&mut StreamRng>| -> Result<()> {
        let mut step = field.gradient(x);
        manifold.project_tangent_in_place(x, &mut step);
        scale(signed_eta, &mut step);
        if let Some(rng) = rng {
            let mut xi: Vec<F> = (0..dim)
                .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            manifold.project_tangent_in_place(x, &mut xi);
            axpy(noise, &xi, &mut step);
        }
        if !all_finite(&step) {
            return Err(Error::NonFinite("position step".into()));
        }
        if geodesic {
            manifold.exp_map_in_place(x, &step)
        } else {
            manifold.retract_in_place(x, &step)
        }
    };
    let coords = e.coords_mut();
    match (streams, noise > F::zero()) {
        (Some(streams), true) => {
            if parallel {
                coords
                    .par_chunks_mut(dim)
                    .zip(streams.par_iter_mut())
                    .try_for_each(|(x, r)| move_one(x, Some(r)))
            } else {
                coords
                    .chunks_mut(dim)
                    .zip(streams.iter_mut())
                    .try_for_each(|(x, r)| move_one(x, Some(r)))
            }
        }
        _ => {
            if parallel {
                coords.par_chunks_mut(dim).try_for_each(|x| move_one(x, None))
            } else {
                coords.chunks_mut(dim).try_for_each(|x| move_one(x, None))
            }
        }
    }
}

/// Langevin descent-ascent step on uniformly weighted ensembles.
pub fn lda_step<F: Scalar>(
    ex: &mut WeightedEnsemble<F>,
    ey: &mut WeightedEnsemble<F>,
    game: &Game<F>,
    eta: F,
    beta: F,
    streams: &mut ParticleStreams,
) -> Result<()> {
    StepRule::simple(Algo::Lda, eta, F::zero(), beta).step(ex, ey, game, Some(streams))
}

/// Noise-free descent-ascent on uniformly weighted ensembles.
pub fn iwgf_step<F: Scalar>(
    ex: &mut WeightedEnsemble<F>,
    ey: &mut WeightedEnsemble<F>,
    game: &Game<F>,
    eta: F,
) -> Result<()> {
    StepRule::simple(Algo::Iwgf, eta, F::zero(), F::infinity()).step(ex, ey, game, None)
}

/// Joint transport and multiplicative reweighting.
pub fn wfr_step<F: Scalar>(
    ex: &mut WeightedEnsemble<F>,
    ey: &mut WeightedEnsemble<F>,
    game: &Game<F>,
    eta: F,
    eta_w: F,
) -> Result<()> {
    StepRule::simple(Algo::Wfr, eta, eta_w, F::infinity()).step(ex, ey, game, None)
}

/// Multiplicative weights on frozen positions.
pub fn md_step<F: Scalar>(
    ex: &mut WeightedEnsemble<F>,
    ey: &mut WeightedEnsemble<F>,
    game: &Game<F>,
    eta_w: F,
) -> Result<()> {
    StepRule::simple(Algo::Md, F::zero(), eta_w, F::infinity()).step(ex, ey, game, None)
}

/// Initial ensembles for `game` under `cfg`, plus the particle streams that
/// keep supplying Langevin noise afterwards. Finite games start from their
/// atoms with uniform weights and ignore `cfg.n`.
pub fn initialize<F: Scalar>(
    game: &Game<F>,
    cfg: &DynamicsConfig,
) -> Result<(WeightedEnsemble<F>, WeightedEnsemble<F>, ParticleStreams)> {
    if let (Some(ax), Some(ay)) = (game.atoms(Player::X), game.atoms(Player::Y)) {
        let streams = ParticleStreams::new(cfg.seed, ax.len(), ay.len());
        let ux = vec![F::one(); ax.len()];
        let uy = vec![F::one(); ay.len()];
        let ex = WeightedEnsemble::from_parts(game.space_x.clone(), ax, &ux)?;
        let ey = WeightedEnsemble::from_parts(game.space_y.clone(), ay, &uy)?;
        return Ok((ex, ey, streams));
    }
    let mut streams = ParticleStreams::new(cfg.seed, cfg.n, cfg.n);
    let mut init = |player: Player| -> Result<WeightedEnsemble<F>> {
        let space = game.space(player).clone();
        let s = streams.for_player(player);
        match cfg.init {
            InitRegion::Uniform => WeightedEnsemble::init_from_streams(space, s),
            InitRegion::Interval { lo, hi } => {
                let positions = s
                    .iter_mut()
                    .map(|rng| {
                        (0..space.coord_dim())
                            .map(|_| F::lit(lo + rng.random::<f64>() * (hi - lo)))
                            .collect()
                    })
                    .collect();
                WeightedEnsemble::from_parts(space, positions, &vec![F::one(); s.len()])
                    .map_err(|e| Error::Config(format!("init interval [{lo}, {hi}]: {e}")))
            }
        }
    };
    let ex = init(Player::X)?;
    let ey = init(Player::Y)?;
    Ok((ex, ey, streams))
}

/// State handed to the metrics hook.
pub struct Checkpoint<'a, F> {
    pub iter: usize,
    pub is_final: bool,
    pub game: &'a Game<F>,
    pub current_x: &'a WeightedEnsemble<F>,
    pub current_y: &'a WeightedEnsemble<F>,
    /// Measure on which NI is reported: time-averaged for `wfr`/`md`,
    /// current for `iwgf`/`lda`.
    pub eval_x: &'a WeightedEnsemble<F>,
    pub eval_y: &'a WeightedEnsemble<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NiValues {
    pub estimate: f64,
    pub exact: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub iter: usize,
    pub ni_estimate: f64,
    pub ni_exact: Option<f64>,
    pub wall_ms: f64,
    pub weight_entropy_x: f64,
    pub weight_entropy_y: f64,
}

impl CheckpointRow {
    /// Exact NI when available, otherwise the estimate.
    pub fn ni(&self) -> f64 {
        self.ni_exact.unwrap_or(self.ni_estimate)
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord<F> {
    pub rows: Vec<CheckpointRow>,
    pub final_x: WeightedEnsemble<F>,
    pub final_y: WeightedEnsemble<F>,
    pub averaged_x: WeightedEnsemble<F>,
    pub averaged_y: WeightedEnsemble<F>,
    pub config: DynamicsConfig,
}

impl<F: Scalar> RunRecord<F> {
    pub fn last(&self) -> &CheckpointRow {
        self.rows.last().expect("a record always holds the initial checkpoint")
    }

    /// The measure NI is reported on at the end of the run.
    pub fn eval_measures(&self) -> (&WeightedEnsemble<F>, &WeightedEnsemble<F>) {
        if self.config.algo.uses_time_average() {
            (&self.averaged_x, &self.averaged_y)
        } else {
            (&self.final_x, &self.final_y)
        }
    }
}

fn abort(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::WeightUnderflow(_) | Error::DegenerateRetraction => Error::NumericalAbort {
            iteration,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Runs `cfg.iters` steps of `cfg.algo` on `game`, calling `hook` at every
/// checkpoint (iteration 0, every `ni_eval_every` iterations and the last).
pub fn run<F, H>(game: &Game<F>, cfg: &DynamicsConfig, mut hook: H) -> Result<RunRecord<F>>
where
    F: Scalar,
    H: FnMut(&Checkpoint<'_, F>) -> Result<NiValues>,
{
    cfg.validate()?;
    let start = Instant::now();
    let (mut ex, mut ey, mut streams) = initialize(game, cfg)?;
    let rule = StepRule::<F>::from_config(cfg);
    let mut avg_x = AveragedMeasure::new(cfg.averaging)?;
    let mut avg_y = AveragedMeasure::new(cfg.averaging)?;
    avg_x.update(&ex, 0)?;
    avg_y.update(&ey, 0)?;
    let mut rows = Vec::new();

    let mut record = |t: usize,
                      ex: &WeightedEnsemble<F>,
                      ey: &WeightedEnsemble<F>,
                      avg_x: &AveragedMeasure<F>,
                      avg_y: &AveragedMeasure<F>|
     -> Result<()> {
        let averaged;
        let (eval_x, eval_y) = if cfg.algo.uses_time_average() {
            averaged = (avg_x.measure()?, avg_y.measure()?);
            (&averaged.0, &averaged.1)
        } else {
            (ex, ey)
        };
        let cp = Checkpoint {
            iter: t,
            is_final: t == cfg.iters,
            game,
            current_x: ex,
            current_y: ey,
            eval_x,
            eval_y,
        };
        let ni = hook(&cp)?;
        rows.push(CheckpointRow {
            iter: t,
            ni_estimate: ni.estimate,
            ni_exact: ni.exact,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            weight_entropy_x: ex.weight_entropy().as_f64(),
            weight_entropy_y: ey.weight_entropy().as_f64(),
        });
        Ok(())
    };

    record(0, &ex, &ey, &avg_x, &avg_y)?;
    for t in 1..=cfg.iters {
        rule.step(&mut ex, &mut ey, game, Some(&mut streams))
            .map_err(|e| abort(t, e))?;
        avg_x.update(&ex, t)?;
        avg_y.update(&ey, t)?;
        if t == cfg.iters || (cfg.ni_eval_every > 0 && t % cfg.ni_eval_every == 0) {
            record(t, &ex, &ey, &avg_x, &avg_y)?;
        }
    }
    Ok(RunRecord {
        rows,
        averaged_x: avg_x.measure()?,
        averaged_y: avg_y.measure()?,
        final_x: ex,
        final_y: ey,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{doublewell_df, doublewell_left_min, GameConfig, PolyParams, PolyVariant};
    use crate::linalg::norm;
    use crate::rng::{substream, Purpose};
    use proptest::prelude::*;

    fn pt(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn single(m: &Manifold<f64>, p: Vec<f64>) -> WeightedEnsemble<f64> {
        WeightedEnsemble::from_parts(m.clone(), vec![p], &[1.0]).unwrap()
    }

    fn normalized(v: [f64; 3]) -> Vec<f64> {
        let n = norm(&v);
        v.iter().map(|c| c / n).collect()
    }

    fn no_ni(_: &Checkpoint<'_, f64>) -> Result<NiValues> {
        Ok(NiValues::default())
    }

    #[test]
    fn cold_lda_and_iwgf_hand_step() {
        let g = Game::<f64>::bilinear(3).unwrap();
        let ex0 = single(&g.space_x, pt(&[1.0, 0.0, 0.0]));
        let ey0 = single(&g.space_y, pt(&[0.0, 1.0, 0.0]));
        let want_x = normalized([1.0, -0.1, 0.0]);
        let want_y = normalized([0.1, 1.0, 0.0]);

        let (mut ex, mut ey) = (ex0.clone(), ey0.clone());
        let mut streams = ParticleStreams::new(0, 1, 1);
        lda_step(&mut ex, &mut ey, &g, 0.1, f64::INFINITY, &mut streams).unwrap();
        let (mut ix, mut iy) = (ex0.clone(), ey0.clone());
        iwgf_step(&mut ix, &mut iy, &g, 0.1).unwrap();
        for (a, b) in ex.position(0).iter().zip(&want_x) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in ey.position(0).iter().zip(&want_y) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ex, ix);
        assert_eq!(ey, iy);
    }

    #[test]
    fn zero_steps_change_nothing() {
        let g = Game::<f64>::poly_a(4, 3).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Lda);
        cfg.n = 8;
        let (ex0, ey0, mut streams) = initialize(&g, &cfg).unwrap();
        let (mut ex, mut ey) = (ex0.clone(), ey0.clone());
        lda_step(&mut ex, &mut ey, &g, 0.0, 5.0, &mut streams).unwrap();
        assert_eq!((&ex, &ey), (&ex0, &ey0));
        iwgf_step(&mut ex, &mut ey, &g, 0.0).unwrap();
        wfr_step(&mut ex, &mut ey, &g, 0.0, 0.0).unwrap();
        assert_eq!((&ex, &ey), (&ex0, &ey0));
    }

    #[test]
    fn zero_game_lda_is_unbiased_brownian_motion() {
        let g = Game::poly_from_params(PolyVariant::B, PolyParams::<f64>::zeros(3, false)).unwrap();
        let n = 10_000;
        let mut cfg = DynamicsConfig::new(Algo::Lda);
        cfg.n = n;
        let (mut ex, mut ey, mut streams) = initialize(&g, &cfg).unwrap();
        let before = ex.clone();
        let (eta, beta) = (0.01, 1.0);
        lda_step(&mut ex, &mut ey, &g, eta, beta, &mut streams).unwrap();
        let mut mean = [0.0; 3];
        for i in 0..n {
            for k in 0..3 {
                mean[k] += (ex.position(i)[k] - before.position(i)[k]) / n as f64;
            }
        }
        // per-coordinate displacement has variance at most 2η/β
        let sigma = (2.0 * eta / beta / n as f64).sqrt();
        for m in mean {
            assert!(m.abs() <= 3.0 * sigma, "{m} vs {sigma}");
        }
        ex.validate().unwrap();
    }

    #[test]
    fn lda_rejects_weighted_ensembles() {
        let g = Game::<f64>::bilinear(3).unwrap();
        let ex = WeightedEnsemble::from_parts(
            g.space_x.clone(),
            vec![pt(&[1.0, 0.0, 0.0]), pt(&[0.0, 1.0, 0.0])],
            &[0.3, 0.7],
        )
        .unwrap();
        let mut ey = single(&g.space_y, pt(&[0.0, 0.0, 1.0]));
        let mut streams = ParticleStreams::new(0, 2, 1);
        assert!(lda_step(&mut ex.clone(), &mut ey, &g, 0.1, 1.0, &mut streams).is_err());
        assert!(iwgf_step(&mut ex.clone(), &mut ey, &g, 0.1).is_err());
    }

    fn pennies() -> (Game<f64>, WeightedEnsemble<f64>, WeightedEnsemble<f64>) {
        let g = GameConfig::matching_pennies().build::<f64>().unwrap();
        let (ex, ey, _) = initialize(&g, &DynamicsConfig::new(Algo::Md)).unwrap();
        (g, ex, ey)
    }

    #[test]
    fn wfr_weight_hand_example() {
        let (g, ex, ey) = pennies();
        let ey = ey.with_weights(&[1.0, 0.0]).unwrap();
        for eta in [0.0, 0.3] {
            let (mut x, mut y) = (ex.clone(), ey.clone());
            wfr_step(&mut x, &mut y, &g, eta, std::f64::consts::LN_2).unwrap();
            assert!((x.weights()[0] - 0.2).abs() < 1e-12);
            assert!((x.weights()[1] - 0.8).abs() < 1e-12);
            // atoms carry no gradient
            assert_eq!(x.coords(), ex.coords());
        }
    }

    #[test]
    fn uniform_opponent_is_fixed_point() {
        let (g, ex, ey) = pennies();
        let ex = ex.with_weights(&[0.9, 0.1]).unwrap();
        let (mut x, mut y) = (ex.clone(), ey.clone());
        md_step(&mut x, &mut y, &g, 0.7).unwrap();
        for (a, b) in x.weights().iter().zip(ex.weights()) {
            assert!((a - b).abs() < 1e-15);
        }

        let rps = GameConfig::rock_paper_scissors().build::<f64>().unwrap();
        let (mut x, mut y, _) = initialize(&rps, &DynamicsConfig::new(Algo::Md)).unwrap();
        let (x0, y0) = (x.clone(), y.clone());
        for _ in 0..10 {
            md_step(&mut x, &mut y, &rps, 0.5).unwrap();
        }
        for (a, b) in x.weights().iter().zip(x0.weights()).chain(y.weights().iter().zip(y0.weights())) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn md_equals_wfr_without_transport() {
        let g = Game::<f64>::poly_a(4, 9).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Wfr);
        cfg.n = 12;
        let (ex, ey, _) = initialize(&g, &cfg).unwrap();
        let (mut a, mut b) = (ex.clone(), ey.clone());
        let (mut c, mut d) = (ex.clone(), ey.clone());
        for _ in 0..20 {
            md_step(&mut a, &mut b, &g, 0.1).unwrap();
            wfr_step(&mut c, &mut d, &g, 0.0, 0.1).unwrap();
        }
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.coords(), ex.coords());
    }

    #[test]
    fn weight_update_ignores_constant_shift() {
        let mut rng = substream(1, Purpose::Auxiliary, Player::X, 0);
        let m = Manifold::<f64>::sphere(3).unwrap();
        let base = WeightedEnsemble::init_uniform(m, 6, &mut rng).unwrap();
        let scores: Vec<f64> = (0..6).map(|i| (i as f64).sin() * 3.0).collect();
        for c in [1.0, -40.0, 1e3] {
            let (mut a, mut b) = (base.clone(), base.clone());
            a.multiplicative_update(&scores, 0.5).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            b.multiplicative_update(&shifted, 0.5).unwrap();
            for (u, v) in a.weights().iter().zip(b.weights()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn iwgf_doublewell_hand_step_and_trapping() {
        let g = Game::<f64>::doublewell(1.5).unwrap();
        let mut ex = single(&g.space_x, vec![-1.0]);
        let mut ey = single(&g.space_y, vec![-1.0]);
        iwgf_step(&mut ex, &mut ey, &g, 0.01).unwrap();
        assert!((ex.position(0)[0] - (-1.0 + 0.02)).abs() < 1e-15);

        let mut ex = single(&g.space_x, vec![-1.2]);
        let mut ey = single(&g.space_y, vec![-1.2]);
        for _ in 0..20_000 {
            iwgf_step(&mut ex, &mut ey, &g, 0.01).unwrap();
            assert!(ex.position(0)[0] < 0.0);
        }
        let x = ex.position(0)[0];
        assert!(doublewell_df(x).abs() <= 1e-6);
        assert!((x - doublewell_left_min::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_records_only_the_start() {
        let g = Game::<f64>::bilinear(3).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Wfr);
        cfg.n = 5;
        let rec = run(&g, &cfg, no_ni).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].iter, 0);
    }

    #[test]
    fn checkpoints_are_strictly_increasing() {
        let g = Game::<f64>::bilinear(3).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Lda);
        cfg.n = 5;
        cfg.iters = 25;
        cfg.ni_eval_every = 10;
        let rec = run(&g, &cfg, no_ni).unwrap();
        let iters: Vec<usize> = rec.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 10, 20, 25]);
    }

    #[test]
    fn runs_are_deterministic() {
        let g = Game::<f64>::poly_a(5, 2).unwrap();
        for algo in Algo::ALL {
            let mut cfg = DynamicsConfig::new(algo);
            cfg.n = 300;
            cfg.iters = 30;
            cfg.ni_eval_every = 10;
            cfg.beta = 5.0;
            let hook = |cp: &Checkpoint<'_, f64>| {
                Ok(NiValues {
                    estimate: cp.eval_x.mean_embedding()[0] + cp.eval_y.weight_entropy(),
                    exact: None,
                })
            };
            let a = run(&g, &cfg, hook).unwrap();
            let b = run(&g, &cfg, hook).unwrap();
            let strip = |r: &RunRecord<f64>| {
                r.rows
                    .iter()
                    .map(|c| (c.iter, c.ni_estimate.to_bits(), c.weight_entropy_x.to_bits()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&a), strip(&b));
            assert_eq!(a.final_x, b.final_x);
            assert_eq!(a.final_y, b.final_y);
            assert_eq!(a.averaged_x, b.averaged_x);
        }
    }

    #[test]
    fn particle_paths_do_not_depend_on_scheduling() {
        // n*dim above the parallel threshold versus a small run: the first
        // particles of a zero game see identical noise.
        let g = Game::poly_from_params(PolyVariant::B, PolyParams::<f64>::zeros(3, false)).unwrap();
        let mut small = DynamicsConfig::new(Algo::Lda);
        small.n = 4;
        small.iters = 5;
        small.beta = 2.0;
        let mut large = small.clone();
        large.n = 2000;
        let a = run(&g, &small, no_ni).unwrap();
        let b = run(&g, &large, no_ni).unwrap();
        for i in 0..4 {
            assert_eq!(a.final_x.position(i), b.final_x.position(i));
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let g = Game::<f64>::poly_a(4, 0).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Iwgf);
        cfg.n = 3;
        cfg.iters = 5;
        cfg.eta = 1e308;
        let err = run(&g, &cfg, no_ni).unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn alternating_order_reads_updated_opponent() {
        let g = Game::<f64>::bilinear(3).unwrap();
        let ex0 = single(&g.space_x, pt(&[1.0, 0.0, 0.0]));
        let ey0 = single(&g.space_y, pt(&[0.0, 1.0, 0.0]));
        let mut rule = StepRule::simple(Algo::Iwgf, 0.1, 0.0, f64::INFINITY);
        let (mut a, mut b) = (ex0.clone(), ey0.clone());
        rule.step(&mut a, &mut b, &g, None).unwrap();
        rule.order = UpdateOrder::Alternating;
        let (mut c, mut d) = (ex0.clone(), ey0.clone());
        rule.step(&mut c, &mut d, &g, None).unwrap();
        assert_eq!(a, c);
        assert_ne!(b, d);
    }

    #[test]
    fn interval_init_places_particles() {
        let g = Game::<f64>::doublewell(1.5).unwrap();
        let mut cfg = DynamicsConfig::new(Algo::Iwgf);
        cfg.n = 100;
        cfg.init = InitRegion::Interval { lo: -1.5, hi: -0.2 };
        let (ex, ey, _) = initialize(&g, &cfg).unwrap();
        assert!(ex.coords().iter().chain(ey.coords()).all(|&c| (-1.5..=-0.2).contains(&c)));
        cfg.init = InitRegion::Interval { lo: 2.0, hi: 3.0 };
        assert!(initialize(&g, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn steps_preserve_invariants(seed in 0u64..1000, algo_idx in 0usize..4, game_idx in 0usize..4) {
            let games = [
                Game::<f64>::poly_a(3, seed).unwrap(),
                Game::bilinear(4).unwrap(),
                Game::doublewell(1.5).unwrap(),
                Game::torus_trig(1.0, 0.5, 0.2).unwrap(),
            ];
            let g = &games[game_idx];
            let mut cfg = DynamicsConfig::new(Algo::ALL[algo_idx]);
            cfg.n = 10;
            cfg.seed = seed;
            cfg.iters = 20;
            cfg.eta = 0.01;
            cfg.eta_w = 0.1;
            cfg.beta = 10.0;
            let rec = run(g, &cfg, |_: &Checkpoint<'_, f64>| Ok(NiValues::default())).unwrap();
            rec.final_x.validate().unwrap();
            rec.final_y.validate().unwrap();
            rec.averaged_x.validate().unwrap();
            rec.averaged_y.validate().unwrap();
        }
    }
}
