//! Exploitability and the exact oracles.
//!
//! The NI error of a pair of measures is
//! `sup_y V_y(μ_x, y) − inf_x V_x(μ_y, x)`; both extrema are attained at
//! Diracs because the payoff is linear in each measure. [`ni_estimate`]
//! approximates them by multi-start projected gradient ascent and descent,
//! which can only under-estimate the true value.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Checkpoint, NiValues};
use crate::ensemble::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::games::{Field, Game, GameKind, Player};
use crate::linalg::{norm, solve_linear, DenseMatrix};
use crate::manifold::Manifold;
use crate::rng::{substream, Purpose};
use crate::scalar::Scalar;

/// Largest matrix handled by [`matrix_game_solve`].
pub const MAX_ORACLE_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiEstimatorConfig {
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_ascent_iters")]
    pub ascent_iters: usize,
    /// Initial step; iteration `t` uses `step/√t`.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_starts() -> usize {
    200
}

fn default_ascent_iters() -> usize {
    500
}

fn default_step() -> f64 {
    0.1
}

impl Default for NiEstimatorConfig {
    fn default() -> Self {
        Self {
            starts: default_starts(),
            ascent_iters: default_ascent_iters(),
            step: default_step(),
            seed: 0,
        }
    }
}

impl NiEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts < 1 {
            return Err(Error::invalid("starts", "need at least one start"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NiReport {
    pub estimate: f64,
    /// Best value found for `sup_y V_y`.
    pub sup: f64,
    /// Best value found for `inf_x V_x`.
    pub inf: f64,
    /// Final value of every ascent start (`y` player).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ascent_finals: Vec<f64>,
    /// Final value of every descent start (`x` player).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub descent_finals: Vec<f64>,
    pub wall_ms: f64,
}

/// Final values of `starts` projected gradient runs on `field`, ascending
/// when `sign > 0`.
fn optimize_field<F: Scalar>(
    field: &Field<'_, F>,
    space: &Manifold<F>,
    sign: F,
    player: Player,
    cfg: &NiEstimatorConfig,
) -> Result<Vec<F>> {
    let step0 = F::lit(cfg.step);
    (0..cfg.starts as u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = substream(cfg.seed, Purpose::Estimator, player, s);
            let mut z = space.sample_uniform(&mut rng).into_coords();
            let mut g = vec![F::zero(); z.len()];
            for t in 1..=cfg.ascent_iters {
                field.gradient_into(&z, &mut g);
                space.project_tangent_in_place(&z, &mut g);
                let lr = sign * step0 / F::from_count(t).sqrt();
                for gi in g.iter_mut() {
                    *gi = *gi * lr;
                }
                if space.retract_in_place(&mut z, &g).is_err() {
                    // antipodal cancellation on a sphere: keep the iterate
                    continue;
                }
            }
            let v = field.value(&z);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("estimator value for player {player:?}")))
            }
        })
        .collect()
}

/// Multi-start lower bound on the NI error of `(mx, my)`.
///
/// Finite games are evaluated exactly over their atoms.
pub fn ni_estimate<F: Scalar>(
    game: &Game<F>,
    mx: &WeightedEnsemble<F>,
    my: &WeightedEnsemble<F>,
    cfg: &NiEstimatorConfig,
) -> Result<NiReport> {
    cfg.validate()?;
    let start = Instant::now();
    let fy = game.field(Player::Y, mx);
    let fx = game.field(Player::X, my);
    let (ascent, descent) = match (&fy, &fx) {
        (Field::Atoms { values: vy }, Field::Atoms { values: vx }) => (vy.clone(), vx.clone()),
        _ => (
            optimize_field(&fy, &game.space_y, F::one(), Player::Y, cfg)?,
            optimize_field(&fx, &game.space_x, -F::one(), Player::X, cfg)?,
        ),
    };
    let sup = ascent.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
    let inf = descent.iter().copied().fold(F::infinity(), F::min).as_f64();
    Ok(NiReport {
        estimate: (sup - inf).max(0.0),
        sup,
        inf,
        ascent_finals: ascent.iter().map(|v| v.as_f64()).collect(),
        descent_finals: descent.iter().map(|v| v.as_f64()).collect(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// `‖Σ w_i x_i‖ + ‖Σ w_j y_j‖`, the NI error of `⟨x, y⟩` on spheres.
pub fn ni_exact_bilinear<F: Scalar>(
    game: &Game<F>,
    ex: &WeightedEnsemble<F>,
    ey: &WeightedEnsemble<F>,
) -> Result<F> {
    if !matches!(game.kind, GameKind::Bilinear { .. }) {
        return Err(Error::UnsupportedGame(format!(
            "closed-form NI needs the bilinear game, got {}",
            game.kind_name()
        )));
    }
    Ok(norm(&ex.mean_embedding()) + norm(&ey.mean_embedding()))
}

/// `max_j (w_xᵀA)_j − min_i (A w_y)_i`.
pub fn ni_exact_finite<F: Scalar>(wx: &[F], wy: &[F], a: &DenseMatrix<F>) -> Result<F> {
    if wx.len() != a.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            actual: wx.len(),
        });
    }
    if wy.len() != a.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.cols(),
            actual: wy.len(),
        });
    }
    let best_y = a.matvec_transposed(wx).into_iter().fold(F::neg_infinity(), F::max);
    let best_x = a.matvec(wy).into_iter().fold(F::infinity(), F::min);
    Ok(best_y - best_x)
}

/// Exact NI where a closed form exists (bilinear and finite games).
pub fn ni_exact<F: Scalar>(
    game: &Game<F>,
    ex: &WeightedEnsemble<F>,
    ey: &WeightedEnsemble<F>,
) -> Option<F> {
    match &game.kind {
        GameKind::Bilinear { .. } => ni_exact_bilinear(game, ex, ey).ok(),
        GameKind::Matrix(_) => {
            let (vy, vx) = (game.field(Player::Y, ex), game.field(Player::X, ey));
            match (vy, vx) {
                (Field::Atoms { values: vy }, Field::Atoms { values: vx }) => {
                    let sup = vy.into_iter().fold(F::neg_infinity(), F::max);
                    let inf = vx.into_iter().fold(F::infinity(), F::min);
                    Some(sup - inf)
                }
                _ => None,
            }
        }
        _ => None,
    }
}

/// Atom weights of an ensemble on a finite game: mass per atom index.
pub fn atom_weights<F: Scalar>(game: &Game<F>, player: Player, e: &WeightedEnsemble<F>) -> Result<Vec<F>> {
    let atoms = game
        .atoms(player)
        .ok_or_else(|| Error::UnsupportedGame(format!("{} has no atoms", game.kind_name())))?;
    let mut w = vec![F::zero(); atoms.len()];
    for (p, &wi) in e.positions().zip(e.weights()) {
        let k = p[0].round().max(F::zero()).to_usize().unwrap_or(0).min(atoms.len() - 1);
        w[k] = w[k] + wi;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixSolution<F> {
    pub x: Vec<F>,
    pub y: Vec<F>,
    pub value: F,
}

/// Exact equilibrium of the finite game in which the row player minimizes
/// `xᵀAy`, by vertex enumeration of each player's linear program.
pub fn matrix_game_solve<F: Scalar>(a: &DenseMatrix<F>) -> Result<MatrixSolution<F>> {
    let (p, q) = (a.rows(), a.cols());
    if p == 0 || q == 0 {
        return Err(Error::invalid("matrix", "payoff matrix is empty"));
    }
    if p > MAX_ORACLE_SIZE || q > MAX_ORACLE_SIZE {
        return Err(Error::invalid(
            "matrix",
            format!("oracle supports up to {MAX_ORACLE_SIZE}x{MAX_ORACLE_SIZE}, got {p}x{q}"),
        ));
    }
    let (x, value) = minimize_max(a)?;
    let neg_t = {
        let mut t = a.transpose();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                t.set(r, c, -t.get(r, c));
            }
        }
        t
    };
    let (y, _) = minimize_max(&neg_t)?;
    Ok(MatrixSolution { x, y, value })
}

/// `min_{x ∈ Δ_p} max_j (xᵀM)_j` by enumerating vertices of
/// `{(x, v) : Mᵀx ≤ v·1, x ≥ 0, Σx = 1}`.
fn minimize_max<F: Scalar>(m: &DenseMatrix<F>) -> Result<(Vec<F>, F)> {
    let (p, q) = (m.rows(), m.cols());
    let feas_tol = F::lit(1e-9);
    // inequality k < q: (Mᵀx)_k − v ≤ 0; k ≥ q: −x_{k−q} ≤ 0
    let total = q + p;
    let mut best: Option<(Vec<F>, F)> = None;
    let mut subset: Vec<usize> = (0..p).collect();
    loop {
        // tight set `subset` plus Σx = 1 gives a (p+1)×(p+1) system in (x, v)
        let mut sys = DenseMatrix::zeros(p + 1, p + 1);
        let mut rhs = vec![F::zero(); p + 1];
        for (r, &k) in subset.iter().enumerate() {
            if k < q {
                for i in 0..p {
                    sys.set(r, i, m.get(i, k));
                }
                sys.set(r, p, -F::one());
            } else {
                sys.set(r, k - q, F::one());
            }
        }
        for i in 0..p {
            sys.set(p, i, F::one());
        }
        rhs[p] = F::one();
        if let Some(sol) = solve_linear(&sys, &rhs, F::lit(1e-12)) {
            let (x, v) = (&sol[..p], sol[p]);
            let feasible = x.iter().all(|&xi| xi >= -feas_tol)
                && m.matvec_transposed(x).iter().all(|&c| c <= v + feas_tol);
            if feasible && best.as_ref().is_none_or(|(_, bv)| v < *bv - feas_tol) {
                best = Some((x.to_vec(), v));
            }
        }
        if !next_combination(&mut subset, total) {
            break;
        }
    }
    let (mut x, _) = best.ok_or_else(|| Error::NonFinite("no feasible vertex found".into()))?;
    for xi in x.iter_mut() {
        *xi = xi.max(F::zero());
    }
    let s: F = x.iter().copied().sum();
    for xi in x.iter_mut() {
        *xi = *xi / s;
    }
    let v = m.matvec_transposed(&x).into_iter().fold(F::neg_infinity(), F::max);
    Ok((x, v))
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub beta: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_gibbs_iters")]
    pub max_iters: usize,
    #[serde(default = "default_gibbs_tol")]
    pub tol: f64,
}

fn default_bins() -> usize {
    64
}

fn default_damping() -> f64 {
    0.5
}

fn default_gibbs_iters() -> usize {
    2000
}

fn default_gibbs_tol() -> f64 {
    1e-8
}

impl GibbsConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            bins: default_bins(),
            damping: default_damping(),
            max_iters: default_gibbs_iters(),
            tol: default_gibbs_tol(),
        }
    }
}

/// Discretized coupled Gibbs densities on `T¹ × T¹`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GibbsGrid<F> {
    pub centers_x: Vec<F>,
    pub centers_y: Vec<F>,
    pub rho_x: Vec<F>,
    pub rho_y: Vec<F>,
    pub beta: F,
    pub damping: F,
    /// `max(‖T_x(ρ) − ρ_x‖₁, ‖T_y(ρ) − ρ_y‖₁)` at the returned densities.
    pub residual: F,
    /// Damped updates performed.
    pub iterations: usize,
    pub converged: bool,
}

fn softmax_scaled<F: Scalar>(v: &[F], scale: F) -> Vec<F> {
    let scaled: Vec<F> = v.iter().map(|&a| scale * a).collect();
    let m = scaled.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = scaled.iter().map(|&a| (a - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|a| a / s).collect()
}

fn l1<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&u, &v)| (u - v).abs()).sum()
}

fn torus_period<F: Scalar>(m: &Manifold<F>) -> Option<F> {
    match m {
        Manifold::Torus { dim: 1, period } => Some(*period),
        _ => None,
    }
}

/// Damped iteration of `ρ_x ∝ e^{−β R ρ_y}`, `ρ_y ∝ e^{β Rᵀ ρ_x}` on bin
/// centers, from uniform densities.
pub fn gibbs_fixed_point<F: Scalar>(game: &Game<F>, cfg: &GibbsConfig) -> Result<GibbsGrid<F>> {
    gibbs_fixed_point_from(game, cfg, None)
}

/// As [`gibbs_fixed_point`], starting from the given densities.
pub fn gibbs_fixed_point_from<F: Scalar>(
    game: &Game<F>,
    cfg: &GibbsConfig,
    start: Option<(Vec<F>, Vec<F>)>,
) -> Result<GibbsGrid<F>> {
    let (px, py) = match (torus_period(&game.space_x), torus_period(&game.space_y)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::UnsupportedGame(format!(
                "Gibbs grid needs a game on the 1-D torus, got {}",
                game.kind_name()
            )))
        }
    };
    let n = cfg.bins;
    if n < 8 {
        return Err(Error::invalid("bins", format!("need at least 8 bins, got {n}")));
    }
    if !(cfg.beta >= 0.0 && cfg.beta.is_finite()) {
        return Err(Error::invalid("beta", "must be finite and nonnegative"));
    }
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::invalid("damping", "must lie in (0, 1]"));
    }
    let centers = |p: F| -> Vec<F> {
        (0..n)
            .map(|k| (F::from_count(k) + F::lit(0.5)) * p / F::from_count(n))
            .collect()
    };
    let (cx, cy) = (centers(px), centers(py));
    let mut r = DenseMatrix::zeros(n, n);
    for (a, xa) in cx.iter().enumerate() {
        for (b, yb) in cy.iter().enumerate() {
            r.set(a, b, game.eval(&[*xa], &[*yb]));
        }
    }
    let beta = F::lit(cfg.beta);
    let lambda = F::lit(cfg.damping);
    let uniform = vec![F::one() / F::from_count(n); n];
    let (mut rho_x, mut rho_y) = match start {
        Some((a, b)) => {
            if a.len() != n || b.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: a.len().min(b.len()),
                });
            }
            (
                crate::ensemble::normalize_weights(&a)?,
                crate::ensemble::normalize_weights(&b)?,
            )
        }
        None => (uniform.clone(), uniform),
    };
    let map = |rx: &[F], ry: &[F]| -> (Vec<F>, Vec<F>) {
        (
            softmax_scaled(&r.matvec(ry), -beta),
            softmax_scaled(&r.matvec_transposed(rx), beta),
        )
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut residual;
    loop {
        let (tx, ty) = map(&rho_x, &rho_y);
        residual = l1(&tx, &rho_x).max(l1(&ty, &rho_y));
        if residual <= F::lit(cfg.tol) {
            converged = true;
            break;
        }
        if iterations == cfg.max_iters {
            break;
        }
        for (v, t) in rho_x.iter_mut().zip(&tx) {
            *v = (F::one() - lambda) * *v + lambda * *t;
        }
        for (v, t) in rho_y.iter_mut().zip(&ty) {
            *v = (F::one() - lambda) * *v + lambda * *t;
        }
        iterations += 1;
    }
    Ok(GibbsGrid {
        centers_x: cx,
        centers_y: cy,
        rho_x,
        rho_y,
        beta,
        damping: lambda,
        residual,
        iterations,
        converged,
    })
}

/// Total variation `½ Σ |a − b|` between two histograms on the same bins.
pub fn tv_distance<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(F::lit(0.5) * l1(a, b))
}

/// Weighted mass per bin of `[lo, hi)` split into `bins` equal cells, for a
/// 1-D ensemble. Points on the upper edge fall into the last bin.
pub fn histogram<F: Scalar>(e: &WeightedEnsemble<F>, lo: F, hi: F, bins: usize) -> Result<Vec<F>> {
    if e.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: e.dim(),
        });
    }
    if bins == 0 || !(lo < hi) {
        return Err(Error::invalid("grid", "need a nonempty range and at least one bin"));
    }
    let mut h = vec![F::zero(); bins];
    let width = (hi - lo) / F::from_count(bins);
    for (p, &w) in e.positions().zip(e.weights()) {
        let k = ((p[0] - lo) / width).floor();
        if k < F::zero() || p[0] > hi {
            return Err(Error::invalid("grid", format!("point {} outside [{lo}, {hi}]", p[0])));
        }
        let k = k.to_usize().unwrap_or(bins).min(bins - 1);
        h[k] = h[k] + w;
    }
    Ok(h)
}

/// Smallest `β` for which the Gibbs fixed point is an `ε`-equilibrium,
/// `(4/ε)·ln(2·(1−V_δ)/V_δ·(2K/ε − 1))` with `δ = ε/(2·lip)` and `V_δ` the
/// ball-volume lower bound of `manifold`. Negative values clamp to zero.
pub fn required_beta<F: Scalar>(epsilon: F, k_range: F, lip: F, manifold: &Manifold<F>) -> Result<F> {
    if !(lip > F::zero()) {
        return Err(Error::invalid("lip", "Lipschitz constant must be positive"));
    }
    if !(epsilon > F::zero()) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    let delta = epsilon / (F::lit(2.0) * lip);
    let v = manifold.ball_volume_fraction_lower_bound(delta)?;
    required_beta_from_volume(epsilon, k_range, v)
}

/// The `β(ε)` formula for a given ball-volume fraction `v ∈ (0, 1)`.
pub fn required_beta_from_volume<F: Scalar>(epsilon: F, k_range: F, v: F) -> Result<F> {
    if !(epsilon > F::zero()) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !(k_range > F::zero()) {
        return Err(Error::invalid("kl", "range length must be positive"));
    }
    let ratio = F::lit(2.0) * k_range / epsilon;
    if !(ratio > F::one()) {
        return Err(Error::invalid(
            "epsilon",
            format!("2·K/ε = {ratio} must exceed 1; epsilon is too large for the bound"),
        ));
    }
    if !(v > F::zero() && v < F::one()) {
        return Err(Error::invalid(
            "volume",
            format!("ball-volume fraction {v} must lie in (0, 1) for a positive log argument"),
        ));
    }
    let arg = F::lit(2.0) * (F::one() - v) / v * (ratio - F::one());
    let beta = F::lit(4.0) / epsilon * arg.ln();
    Ok(beta.max(F::zero()))
}

/// NI evaluation used as the run hook: exact values where available, a
/// cheap estimator at intermediate checkpoints and the full one at the end.
#[derive(Clone, Copy, Debug)]
pub struct NiEvaluator {
    pub full: NiEstimatorConfig,
    pub cheap: NiEstimatorConfig,
    /// Skip the estimator entirely when an exact oracle exists.
    pub skip_estimate_when_exact: bool,
}

impl NiEvaluator {
    pub fn new(full: NiEstimatorConfig) -> Self {
        Self {
            full,
            cheap: NiEstimatorConfig {
                starts: (full.starts / 10).max(1),
                ascent_iters: (full.ascent_iters / 5).max(1),
                ..full
            },
            skip_estimate_when_exact: false,
        }
    }

    pub fn evaluate<F: Scalar>(&self, cp: &Checkpoint<'_, F>) -> Result<NiValues> {
        let exact = ni_exact(cp.game, cp.eval_x, cp.eval_y).map(|v| v.as_f64());
        let estimate = match exact {
            Some(v) if self.skip_estimate_when_exact => v,
            _ => {
                let cfg = if cp.is_final { &self.full } else { &self.cheap };
                ni_estimate(cp.game, cp.eval_x, cp.eval_y, cfg)?.estimate
            }
        };
        Ok(NiValues { estimate, exact })
    }
}
