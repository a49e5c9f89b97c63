//! Closed-form zero-sum games with analytic ambient gradients.
//!
//! Player X minimizes `ℓ(x, y)` and player Y maximizes it. Gradients are
//! taken in ambient coordinates; projecting them onto the tangent space is
//! left to the caller.
//!
//! Besides pointwise evaluation every game can build a [`Field`]: the
//! opponent-averaged potential `V_x(x) = Σ_j w_j ℓ(x, y_j)` (or its Y
//! counterpart). For the polynomial, bilinear, trigonometric and decoupled
//! games the field depends on the opponent only through a few moments, so it
//! is reduced once per step instead of summing over particles at every query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, DenseMatrix};
use crate::manifold::{Manifold, Point};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    X,
    Y,
}

impl Player {
    pub fn opponent(self) -> Player {
        match self {
            Player::X => Player::Y,
            Player::Y => Player::X,
        }
    }
}

/// Raw parameters of the polynomial sphere games.
///
/// Generated from `seed` by a ChaCha8 stream (`ChaCha8Rng::seed_from_u64`,
/// stream 0) of standard normals drawn with the ziggurat sampler of
/// `rand_distr`, filled row-major in the order `A0, A1, A2, A3, a0, a1`.
/// `A3` is skipped for `ℓ_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyParams<F> {
    pub dim: usize,
    pub a0: DenseMatrix<F>,
    pub a1: DenseMatrix<F>,
    pub a2: DenseMatrix<F>,
    pub a3: Option<DenseMatrix<F>>,
    pub b0: Vec<F>,
    pub b1: Vec<F>,
}

impl<F: Scalar> PolyParams<F> {
    pub fn generate(dim: usize, seed: u64, with_cubic: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<F> {
            (0..len)
                .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect()
        };
        let mut mat = || DenseMatrix::from_row_major(dim, dim, draw(dim * dim)).expect("square");
        let a0 = mat();
        let a1 = mat();
        let a2 = mat();
        let a3 = with_cubic.then(&mut mat);
        let b0 = draw(dim);
        let b1 = draw(dim);
        Self {
            dim,
            a0,
            a1,
            a2,
            a3,
            b0,
            b1,
        }
    }

    pub fn zeros(dim: usize, with_cubic: bool) -> Self {
        Self {
            dim,
            a0: DenseMatrix::zeros(dim, dim),
            a1: DenseMatrix::zeros(dim, dim),
            a2: DenseMatrix::zeros(dim, dim),
            a3: with_cubic.then(|| DenseMatrix::zeros(dim, dim)),
            b0: vec![F::zero(); dim],
            b1: vec![F::zero(); dim],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolyVariant {
    /// `xᵀA0x + xᵀA1y + yᵀA2y + yᵀA3(x∘x) + a0ᵀx + a1ᵀy`
    A,
    /// `xᵀA0ᵀA0x + xᵀA1y + yᵀA2ᵀA2y + a0ᵀx + a1ᵀy`
    B,
}

/// Polynomial game in the common form
/// `xᵀQx x + xᵀA1y + yᵀQy y + yᵀA3(x∘x) + a0ᵀx + a1ᵀy`.
#[derive(Clone, Debug)]
pub struct PolyGame<F> {
    pub variant: PolyVariant,
    pub seed: Option<u64>,
    pub params: PolyParams<F>,
    qx: DenseMatrix<F>,
    qy: DenseMatrix<F>,
    qx_sym: DenseMatrix<F>,
    qy_sym: DenseMatrix<F>,
}

impl<F: Scalar> PolyGame<F> {
    fn new(variant: PolyVariant, params: PolyParams<F>, seed: Option<u64>) -> Self {
        let (qx, qy) = match variant {
            PolyVariant::A => (params.a0.clone(), params.a2.clone()),
            PolyVariant::B => (
                params.a0.transpose().matmul(&params.a0),
                params.a2.transpose().matmul(&params.a2),
            ),
        };
        let qx_sym = qx.add(&qx.transpose());
        let qy_sym = qy.add(&qy.transpose());
        Self {
            variant,
            seed,
            params,
            qx,
            qy,
            qx_sym,
            qy_sym,
        }
    }

    fn eval(&self, x: &[F], y: &[F]) -> F {
        let p = &self.params;
        let mut v = self.qx.quadratic_form(x)
            + dot(x, &p.a1.matvec(y))
            + self.qy.quadratic_form(y)
            + dot(&p.b0, x)
            + dot(&p.b1, y);
        if let Some(a3) = &p.a3 {
            let x2: Vec<F> = x.iter().map(|&c| c * c).collect();
            v = v + dot(y, &a3.matvec(&x2));
        }
        v
    }

    fn grad_x_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        let p = &self.params;
        self.qx_sym.matvec_into(x, out);
        axpy(F::one(), &p.a1.matvec(y), out);
        axpy(F::one(), &p.b0, out);
        if let Some(a3) = &p.a3 {
            let q = a3.matvec_transposed(y);
            for ((o, &xi), &qi) in out.iter_mut().zip(x).zip(&q) {
                *o = *o + F::lit(2.0) * xi * qi;
            }
        }
    }

    fn grad_y_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        let p = &self.params;
        self.qy_sym.matvec_into(y, out);
        axpy(F::one(), &p.a1.matvec_transposed(x), out);
        axpy(F::one(), &p.b1, out);
        if let Some(a3) = &p.a3 {
            let x2: Vec<F> = x.iter().map(|&c| c * c).collect();
            axpy(F::one(), &a3.matvec(&x2), out);
        }
    }

    /// `2(‖Qx‖+‖A1‖+‖Qy‖+2‖A3‖) + ‖a0‖ + ‖a1‖` with spectral norms. `Qx`,
    /// `Qy` are the quadratic-form matrices (`A0`, `A2` for `ℓ_a`; `A0ᵀA0`,
    /// `A2ᵀA2` for `ℓ_b`). On unit spheres it bounds both the gradient norm
    /// and the gradient's Lipschitz constant in either argument.
    fn lipschitz_estimate(&self) -> F {
        let p = &self.params;
        let a3 = p.a3.as_ref().map_or(F::zero(), |m| m.spectral_norm());
        F::lit(2.0)
            * (self.qx.spectral_norm()
                + p.a1.spectral_norm()
                + self.qy.spectral_norm()
                + F::lit(2.0) * a3)
            + norm(&p.b0)
            + norm(&p.b1)
    }

    /// Twice the bound on `|ℓ|` over the product of unit spheres.
    fn range_bound(&self) -> F {
        let p = &self.params;
        let a3 = p.a3.as_ref().map_or(F::zero(), |m| m.spectral_norm());
        F::lit(2.0)
            * (self.qx.spectral_norm()
                + p.a1.spectral_norm()
                + self.qy.spectral_norm()
                + a3
                + norm(&p.b0)
                + norm(&p.b1))
    }
}

/// Finite game embedded as atoms `0..p` and `0..q` on 1-D boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGame<F> {
    pub payoff: DenseMatrix<F>,
}

impl<F: Scalar> MatrixGame<F> {
    fn atom_index(coord: F, count: usize) -> usize {
        let r = coord.round().max(F::zero()).to_usize().unwrap_or(0);
        r.min(count - 1)
    }
}

/// `f(x) = 5x⁴ − 10x² − 2x`, an asymmetric double well.
pub fn doublewell_f<F: Scalar>(x: F) -> F {
    let x2 = x * x;
    F::lit(5.0) * x2 * x2 - F::lit(10.0) * x2 - F::lit(2.0) * x
}

/// `f'(x) = 20x³ − 20x − 2`.
pub fn doublewell_df<F: Scalar>(x: F) -> F {
    F::lit(20.0) * x * x * x - F::lit(20.0) * x - F::lit(2.0)
}

/// Global minimizer of the double well (right well), by Newton's method.
pub fn doublewell_global_min<F: Scalar>() -> F {
    let mut x = F::one();
    for _ in 0..50 {
        let d2 = F::lit(60.0) * x * x - F::lit(20.0);
        x = x - doublewell_df(x) / d2;
    }
    x
}

/// Local minimizer of the double well in the left well.
pub fn doublewell_left_min<F: Scalar>() -> F {
    let mut x = -F::one();
    for _ in 0..50 {
        let d2 = F::lit(60.0) * x * x - F::lit(20.0);
        x = x - doublewell_df(x) / d2;
    }
    x
}

#[derive(Clone, Debug)]
pub enum GameKind<F> {
    PolyA(PolyGame<F>),
    PolyB(PolyGame<F>),
    /// `⟨x, y⟩` on `S^{D-1} × S^{D-1}`.
    Bilinear { dim: usize },
    /// `f(x) − f(y)` on `[−h, h]²`.
    DoubleWell { halfwidth: F },
    Matrix(MatrixGame<F>),
    /// `c·cos(θx − θy) + a·cos θx − b·cos θy` with `θ = 2π·coord/P` on the
    /// 1-D torus of period `P`.
    TorusTrig {
        coupling: F,
        x_amp: F,
        y_amp: F,
        period: F,
    },
}

#[derive(Clone, Debug)]
pub struct Game<F> {
    pub space_x: Manifold<F>,
    pub space_y: Manifold<F>,
    pub kind: GameKind<F>,
    pub lipschitz_estimate: Option<F>,
    /// Upper bound on `max ℓ − min ℓ`.
    pub range_length: Option<F>,
}

impl<F: Scalar> Game<F> {
    pub fn poly_a(dim: usize, seed: u64) -> Result<Self> {
        check_poly_dim(dim)?;
        Ok(Self::from_poly(PolyGame::new(
            PolyVariant::A,
            PolyParams::generate(dim, seed, true),
            Some(seed),
        )))
    }

    pub fn poly_b(dim: usize, seed: u64) -> Result<Self> {
        check_poly_dim(dim)?;
        Ok(Self::from_poly(PolyGame::new(
            PolyVariant::B,
            PolyParams::generate(dim, seed, false),
            Some(seed),
        )))
    }

    /// Polynomial game with explicit parameters. The variant is `A` when
    /// `params.a3` is present.
    pub fn poly_from_params(variant: PolyVariant, mut params: PolyParams<F>) -> Result<Self> {
        check_poly_dim(params.dim)?;
        match variant {
            PolyVariant::A => {
                params.a3.get_or_insert_with(|| DenseMatrix::zeros(params.dim, params.dim));
            }
            PolyVariant::B => params.a3 = None,
        }
        Ok(Self::from_poly(PolyGame::new(variant, params, None)))
    }

    fn from_poly(pg: PolyGame<F>) -> Self {
        let d = pg.params.dim;
        let lip = pg.lipschitz_estimate();
        let range = pg.range_bound();
        let kind = match pg.variant {
            PolyVariant::A => GameKind::PolyA(pg),
            PolyVariant::B => GameKind::PolyB(pg),
        };
        Self {
            space_x: Manifold::Sphere { ambient_dim: d },
            space_y: Manifold::Sphere { ambient_dim: d },
            kind,
            lipschitz_estimate: Some(lip),
            range_length: Some(range),
        }
    }

    pub fn bilinear(dim: usize) -> Result<Self> {
        let space = Manifold::sphere(dim)?;
        Ok(Self {
            space_x: space.clone(),
            space_y: space,
            kind: GameKind::Bilinear { dim },
            lipschitz_estimate: Some(F::one()),
            range_length: Some(F::lit(2.0)),
        })
    }

    pub fn doublewell(halfwidth: F) -> Result<Self> {
        if !(halfwidth >= F::lit(1.5)) || !halfwidth.is_finite() {
            return Err(Error::invalid(
                "halfwidth",
                "must be at least 1.5 so both wells lie inside the box",
            ));
        }
        let space = Manifold::boxed(vec![(-halfwidth, halfwidth)])?;
        let crit = F::one() / F::lit(3.0).sqrt();
        let lip = [-halfwidth, halfwidth, -crit, crit]
            .iter()
            .map(|&x| doublewell_df(x).abs())
            .fold(F::zero(), F::max);
        let fmax = doublewell_f(-halfwidth).max(doublewell_f(halfwidth));
        let fmin = doublewell_f(doublewell_global_min::<F>());
        Ok(Self {
            space_x: space.clone(),
            space_y: space,
            kind: GameKind::DoubleWell { halfwidth },
            lipschitz_estimate: Some(lip),
            range_length: Some(F::lit(2.0) * (fmax - fmin)),
        })
    }

    pub fn matrix(payoff: DenseMatrix<F>) -> Result<Self> {
        let (p, q) = (payoff.rows(), payoff.cols());
        if p == 0 || q == 0 {
            return Err(Error::invalid("matrix", "payoff matrix is empty"));
        }
        if !payoff.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("matrix", "payoff entries must be finite"));
        }
        let half = F::lit(0.5);
        let space = |k: usize| Manifold::boxed(vec![(-half, F::from_count(k - 1) + half)]);
        let (lo, hi) = payoff
            .as_slice()
            .iter()
            .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self {
            space_x: space(p)?,
            space_y: space(q)?,
            kind: GameKind::Matrix(MatrixGame { payoff }),
            lipschitz_estimate: Some(F::zero()),
            range_length: Some(hi - lo),
        })
    }

    pub fn torus_trig(coupling: F, x_amp: F, y_amp: F) -> Result<Self> {
        let period = F::one();
        if ![coupling, x_amp, y_amp].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("coefficients", "must be finite"));
        }
        let space = Manifold::torus(1, period)?;
        let total = coupling.abs() + x_amp.abs() + y_amp.abs();
        Ok(Self {
            space_x: space.clone(),
            space_y: space,
            kind: GameKind::TorusTrig {
                coupling,
                x_amp,
                y_amp,
                period,
            },
            lipschitz_estimate: Some(F::lit(2.0) * F::PI() / period * total),
            range_length: Some(F::lit(2.0) * total),
        })
    }

    pub fn space(&self, player: Player) -> &Manifold<F> {
        match player {
            Player::X => &self.space_x,
            Player::Y => &self.space_y,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            GameKind::PolyA(_) => "poly_a",
            GameKind::PolyB(_) => "poly_b",
            GameKind::Bilinear { .. } => "bilinear",
            GameKind::DoubleWell { .. } => "doublewell",
            GameKind::Matrix(_) => "matrix",
            GameKind::TorusTrig { .. } => "torus_trig",
        }
    }

    pub fn matrix_payoff(&self) -> Option<&DenseMatrix<F>> {
        match &self.kind {
            GameKind::Matrix(m) => Some(&m.payoff),
            _ => None,
        }
    }

    /// Atom positions of a finite game, `None` for continuous games.
    pub fn atoms(&self, player: Player) -> Option<Vec<Vec<F>>> {
        let m = self.matrix_payoff()?;
        let count = match player {
            Player::X => m.rows(),
            Player::Y => m.cols(),
        };
        Some((0..count).map(|i| vec![F::from_count(i)]).collect())
    }

    /// `ℓ(x, y)` without membership checks.
    pub fn eval(&self, x: &[F], y: &[F]) -> F {
        match &self.kind {
            GameKind::PolyA(pg) | GameKind::PolyB(pg) => pg.eval(x, y),
            GameKind::Bilinear { .. } => dot(x, y),
            GameKind::DoubleWell { .. } => doublewell_f(x[0]) - doublewell_f(y[0]),
            GameKind::Matrix(m) => {
                let i = MatrixGame::<F>::atom_index(x[0], m.payoff.rows());
                let j = MatrixGame::<F>::atom_index(y[0], m.payoff.cols());
                m.payoff.get(i, j)
            }
            GameKind::TorusTrig {
                coupling,
                x_amp,
                y_amp,
                period,
            } => {
                let w = F::lit(2.0) * F::PI() / *period;
                let (tx, ty) = (w * x[0], w * y[0]);
                *coupling * (tx - ty).cos() + *x_amp * tx.cos() - *y_amp * ty.cos()
            }
        }
    }

    /// `∇_x ℓ(x, y)` in ambient coordinates, written to `out`.
    pub fn grad_x_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        match &self.kind {
            GameKind::PolyA(pg) | GameKind::PolyB(pg) => pg.grad_x_into(x, y, out),
            GameKind::Bilinear { .. } => out.copy_from_slice(y),
            GameKind::DoubleWell { .. } => out[0] = doublewell_df(x[0]),
            GameKind::Matrix(_) => out.fill(F::zero()),
            GameKind::TorusTrig {
                coupling,
                x_amp,
                period,
                ..
            } => {
                let w = F::lit(2.0) * F::PI() / *period;
                let (tx, ty) = (w * x[0], w * y[0]);
                out[0] = -w * (*coupling * (tx - ty).sin() + *x_amp * tx.sin());
            }
        }
    }

    /// `∇_y ℓ(x, y)` in ambient coordinates, written to `out`.
    pub fn grad_y_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        match &self.kind {
            GameKind::PolyA(pg) | GameKind::PolyB(pg) => pg.grad_y_into(x, y, out),
            GameKind::Bilinear { .. } => out.copy_from_slice(x),
            GameKind::DoubleWell { .. } => out[0] = -doublewell_df(y[0]),
            GameKind::Matrix(_) => out.fill(F::zero()),
            GameKind::TorusTrig {
                coupling,
                y_amp,
                period,
                ..
            } => {
                let w = F::lit(2.0) * F::PI() / *period;
                let (tx, ty) = (w * x[0], w * y[0]);
                out[0] = w * (*coupling * (tx - ty).sin() + *y_amp * ty.sin());
            }
        }
    }

    fn check_pair(&self, x: &Point<F>, y: &Point<F>) -> Result<()> {
        self.space_x.check(x.coords())?;
        self.space_y.check(y.coords())
    }

    /// `ℓ(x, y)` for validated points.
    pub fn eval_loss(&self, x: &Point<F>, y: &Point<F>) -> Result<F> {
        self.check_pair(x, y)?;
        Ok(self.eval(x.coords(), y.coords()))
    }

    pub fn grad_x(&self, x: &Point<F>, y: &Point<F>) -> Result<Vec<F>> {
        self.check_pair(x, y)?;
        let mut out = vec![F::zero(); self.space_x.coord_dim()];
        self.grad_x_into(x.coords(), y.coords(), &mut out);
        Ok(out)
    }

    pub fn grad_y(&self, x: &Point<F>, y: &Point<F>) -> Result<Vec<F>> {
        self.check_pair(x, y)?;
        let mut out = vec![F::zero(); self.space_y.coord_dim()];
        self.grad_y_into(x.coords(), y.coords(), &mut out);
        Ok(out)
    }

    /// Potential seen by `player` against the opponent's weighted ensemble:
    /// `V_x(x) = Σ_j w_j ℓ(x, y_j)` or `V_y(y) = Σ_i w_i ℓ(x_i, y)`.
    pub fn field<'a>(&'a self, player: Player, opponent: &'a WeightedEnsemble<F>) -> Field<'a, F> {
        let w = opponent.weights();
        let n = opponent.len();
        let pos = |i: usize| opponent.position(i);
        match &self.kind {
            GameKind::Bilinear { .. } => Field::Quadratic {
                quad: None,
                linear: opponent.mean_embedding(),
                diag: None,
                constant: F::zero(),
            },
            GameKind::PolyA(pg) | GameKind::PolyB(pg) => {
                let p = &pg.params;
                let d = p.dim;
                let mean = opponent.mean_embedding();
                match player {
                    Player::X => {
                        // V_x(x) = xᵀQx x + xᵀA1ȳ + (A3ᵀȳ)·(x∘x) + a0ᵀx + E[yᵀQy y] + a1ᵀȳ
                        let mut linear = p.a1.matvec(&mean);
                        axpy(F::one(), &p.b0, &mut linear);
                        let diag = p.a3.as_ref().map(|a3| a3.matvec_transposed(&mean));
                        let constant = (0..n)
                            .map(|j| w[j] * pg.qy.quadratic_form(pos(j)))
                            .sum::<F>()
                            + dot(&p.b1, &mean);
                        Field::Quadratic {
                            quad: Some((&pg.qx, &pg.qx_sym)),
                            linear,
                            diag,
                            constant,
                        }
                    }
                    Player::Y => {
                        // V_y(y) = yᵀQy y + yᵀ(A1ᵀx̄ + A3 E[x∘x] + a1) + E[xᵀQx x] + a0ᵀx̄
                        let mut linear = p.a1.matvec_transposed(&mean);
                        axpy(F::one(), &p.b1, &mut linear);
                        if let Some(a3) = &p.a3 {
                            let mut sq = vec![F::zero(); d];
                            for j in 0..n {
                                for (s, &c) in sq.iter_mut().zip(pos(j)) {
                                    *s = *s + w[j] * c * c;
                                }
                            }
                            axpy(F::one(), &a3.matvec(&sq), &mut linear);
                        }
                        let constant = (0..n)
                            .map(|j| w[j] * pg.qx.quadratic_form(pos(j)))
                            .sum::<F>()
                            + dot(&p.b0, &mean);
                        Field::Quadratic {
                            quad: Some((&pg.qy, &pg.qy_sym)),
                            linear,
                            diag: None,
                            constant,
                        }
                    }
                }
            }
            GameKind::DoubleWell { .. } => {
                let mean_f = (0..n).map(|j| w[j] * doublewell_f(pos(j)[0])).sum::<F>();
                match player {
                    Player::X => Field::DoubleWell {
                        sign: F::one(),
                        constant: -mean_f,
                    },
                    Player::Y => Field::DoubleWell {
                        sign: -F::one(),
                        constant: mean_f,
                    },
                }
            }
            GameKind::TorusTrig {
                coupling,
                x_amp,
                y_amp,
                period,
            } => {
                let omega = F::lit(2.0) * F::PI() / *period;
                let (mut c, mut s) = (F::zero(), F::zero());
                for j in 0..n {
                    let (sj, cj) = (omega * pos(j)[0]).sin_cos();
                    c = c + w[j] * cj;
                    s = s + w[j] * sj;
                }
                match player {
                    Player::X => Field::Trig {
                        omega,
                        cos_coef: *coupling * c + *x_amp,
                        sin_coef: *coupling * s,
                        constant: -*y_amp * c,
                    },
                    Player::Y => Field::Trig {
                        omega,
                        cos_coef: *coupling * c - *y_amp,
                        sin_coef: *coupling * s,
                        constant: *x_amp * c,
                    },
                }
            }
            GameKind::Matrix(m) => {
                let count = match player {
                    Player::X => m.payoff.rows(),
                    Player::Y => m.payoff.cols(),
                };
                let mut opp = vec![
                    F::zero();
                    match player {
                        Player::X => m.payoff.cols(),
                        Player::Y => m.payoff.rows(),
                    }
                ];
                for j in 0..n {
                    let k = MatrixGame::<F>::atom_index(pos(j)[0], opp.len());
                    opp[k] = opp[k] + w[j];
                }
                let values = match player {
                    Player::X => m.payoff.matvec(&opp),
                    Player::Y => m.payoff.matvec_transposed(&opp),
                };
                debug_assert_eq!(values.len(), count);
                Field::Atoms { values }
            }
        }
    }

    /// The same potential as [`Game::field`] computed by explicit summation
    /// over opponent particles.
    pub fn field_direct<'a>(
        &'a self,
        player: Player,
        opponent: &'a WeightedEnsemble<F>,
    ) -> Field<'a, F> {
        Field::Direct {
            game: self,
            player,
            opponent,
        }
    }
}

fn check_poly_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::invalid("dim", "polynomial sphere games need D >= 2"));
    }
    Ok(())
}

/// Opponent-averaged potential of one player.
#[derive(Clone, Debug)]
pub enum Field<'a, F> {
    /// `zᵀQz + b·z + c·(z∘z) + k`, gradient `(Q+Qᵀ)z + b + 2c∘z`.
    Quadratic {
        quad: Option<(&'a DenseMatrix<F>, &'a DenseMatrix<F>)>,
        linear: Vec<F>,
        diag: Option<Vec<F>>,
        constant: F,
    },
    /// `sign·f(z) + k` for the double well `f`.
    DoubleWell { sign: F, constant: F },
    /// `a cos(ωz) + b sin(ωz) + k`.
    Trig {
        omega: F,
        cos_coef: F,
        sin_coef: F,
        constant: F,
    },
    /// Value per atom of a finite game; gradients vanish.
    Atoms { values: Vec<F> },
    Direct {
        game: &'a Game<F>,
        player: Player,
        opponent: &'a WeightedEnsemble<F>,
    },
}

impl<F: Scalar> Field<'_, F> {
    pub fn value(&self, z: &[F]) -> F {
        match self {
            Field::Quadratic {
                quad,
                linear,
                diag,
                constant,
            } => {
                let mut v = dot(linear, z) + *constant;
                if let Some((q, _)) = quad {
                    v = v + q.quadratic_form(z);
                }
                if let Some(c) = diag {
                    v = v + z.iter().zip(c).map(|(&zi, &ci)| ci * zi * zi).sum::<F>();
                }
                v
            }
            Field::DoubleWell { sign, constant } => *sign * doublewell_f(z[0]) + *constant,
            Field::Trig {
                omega,
                cos_coef,
                sin_coef,
                constant,
            } => {
                let (s, c) = (*omega * z[0]).sin_cos();
                *cos_coef * c + *sin_coef * s + *constant
            }
            Field::Atoms { values } => {
                values[MatrixGame::<F>::atom_index(z[0], values.len())]
            }
            Field::Direct {
                game,
                player,
                opponent,
            } => {
                let w = opponent.weights();
                (0..opponent.len())
                    .map(|j| {
                        let o = opponent.position(j);
                        w[j] * match player {
                            Player::X => game.eval(z, o),
                            Player::Y => game.eval(o, z),
                        }
                    })
                    .sum()
            }
        }
    }

    pub fn gradient_into(&self, z: &[F], out: &mut [F]) {
        match self {
            Field::Quadratic {
                quad, linear, diag, ..
            } => {
                match quad {
                    Some((_, qs)) => qs.matvec_into(z, out),
                    None => out.fill(F::zero()),
                }
                axpy(F::one(), linear, out);
                if let Some(c) = diag {
                    for ((o, &zi), &ci) in out.iter_mut().zip(z).zip(c) {
                        *o = *o + F::lit(2.0) * ci * zi;
                    }
                }
            }
            Field::DoubleWell { sign, .. } => out[0] = *sign * doublewell_df(z[0]),
            Field::Trig {
                omega,
                cos_coef,
                sin_coef,
                ..
            } => {
                let (s, c) = (*omega * z[0]).sin_cos();
                out[0] = *omega * (*sin_coef * c - *cos_coef * s);
            }
            Field::Atoms { .. } => out.fill(F::zero()),
            Field::Direct {
                game,
                player,
                opponent,
            } => {
                out.fill(F::zero());
                let w = opponent.weights();
                let mut g = vec![F::zero(); out.len()];
                for j in 0..opponent.len() {
                    let o = opponent.position(j);
                    match player {
                        Player::X => game.grad_x_into(z, o, &mut g),
                        Player::Y => game.grad_y_into(o, z, &mut g),
                    }
                    axpy(w[j], &g, out);
                }
            }
        }
    }

    pub fn gradient(&self, z: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); z.len()];
        self.gradient_into(z, &mut out);
        out
    }
}

/// Largest finite-difference discrepancy found by [`gradient_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub game: String,
    pub points: usize,
    pub step: f64,
    pub max_rel_err_x: f64,
    pub max_rel_err_y: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_x.max(self.max_rel_err_y)
    }
}

/// Compares analytic gradients with central differences of step `h` at
/// `points` uniform random pairs. The error at a point is
/// `‖g − g_fd‖∞ / max(1, ‖g_fd‖∞)`.
pub fn gradient_check<F: Scalar>(game: &Game<F>, points: usize, h: F, seed: u64) -> GradCheckReport {
    use crate::rng::{substream, Purpose};
    let mut rng = substream(seed, Purpose::Auxiliary, Player::X, 0);
    let (dx, dy) = (game.space_x.coord_dim(), game.space_y.coord_dim());
    let mut worst = (0.0f64, 0.0f64);
    let rel = |g: &[F], fd: &[F]| {
        let diff = g
            .iter()
            .zip(fd)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max);
        let scale = fd.iter().map(|v| v.abs()).fold(F::one(), F::max);
        (diff / scale).as_f64()
    };
    for _ in 0..points {
        let x = game.space_x.sample_uniform(&mut rng).into_coords();
        let y = game.space_y.sample_uniform(&mut rng).into_coords();
        let mut gx = vec![F::zero(); dx];
        let mut gy = vec![F::zero(); dy];
        game.grad_x_into(&x, &y, &mut gx);
        game.grad_y_into(&x, &y, &mut gy);
        let two_h = F::lit(2.0) * h;
        let fdx: Vec<F> = (0..dx)
            .map(|k| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[k] = p[k] + h;
                m[k] = m[k] - h;
                (game.eval(&p, &y) - game.eval(&m, &y)) / two_h
            })
            .collect();
        let fdy: Vec<F> = (0..dy)
            .map(|k| {
                let (mut p, mut m) = (y.clone(), y.clone());
                p[k] = p[k] + h;
                m[k] = m[k] - h;
                (game.eval(&x, &p) - game.eval(&x, &m)) / two_h
            })
            .collect();
        worst.0 = worst.0.max(rel(&gx, &fdx));
        worst.1 = worst.1.max(rel(&gy, &fdy));
    }
    GradCheckReport {
        game: game.kind_name().to_string(),
        points,
        step: h.as_f64(),
        max_rel_err_x: worst.0,
        max_rel_err_y: worst.1,
    }
}

/// Serializable game description:
/// `{"kind": "poly_a"|"poly_b"|"bilinear"|"doublewell"|"matrix"|"torus_trig", ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameConfig {
    PolyA {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    PolyB {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Bilinear {
        dim: usize,
    },
    Doublewell {
        #[serde(default = "default_halfwidth")]
        halfwidth: f64,
    },
    /// Row-major payoff of the minimizing row player.
    Matrix {
        payoff: Vec<Vec<f64>>,
    },
    TorusTrig {
        coupling: f64,
        #[serde(default)]
        x_amp: f64,
        #[serde(default)]
        y_amp: f64,
    },
}

fn default_halfwidth() -> f64 {
    1.5
}

impl GameConfig {
    pub fn build<F: Scalar>(&self) -> Result<Game<F>> {
        match self {
            GameConfig::PolyA { dim, seed } => Game::poly_a(*dim, *seed),
            GameConfig::PolyB { dim, seed } => Game::poly_b(*dim, *seed),
            GameConfig::Bilinear { dim } => Game::bilinear(*dim),
            GameConfig::Doublewell { halfwidth } => Game::doublewell(F::lit(*halfwidth)),
            GameConfig::Matrix { payoff } => {
                let rows: Vec<Vec<F>> = payoff
                    .iter()
                    .map(|r| r.iter().map(|&v| F::lit(v)).collect())
                    .collect();
                Game::matrix(DenseMatrix::from_rows(&rows)?)
            }
            GameConfig::TorusTrig {
                coupling,
                x_amp,
                y_amp,
            } => Game::torus_trig(F::lit(*coupling), F::lit(*x_amp), F::lit(*y_amp)),
        }
    }

    /// Copy with the dimension and seed replaced where the kind has them.
    pub fn instantiate(&self, dim: usize, seed: u64) -> GameConfig {
        match self {
            GameConfig::PolyA { .. } => GameConfig::PolyA { dim, seed },
            GameConfig::PolyB { .. } => GameConfig::PolyB { dim, seed },
            GameConfig::Bilinear { .. } => GameConfig::Bilinear { dim },
            other => other.clone(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GameConfig::PolyA { .. } => "poly_a",
            GameConfig::PolyB { .. } => "poly_b",
            GameConfig::Bilinear { .. } => "bilinear",
            GameConfig::Doublewell { .. } => "doublewell",
            GameConfig::Matrix { .. } => "matrix",
            GameConfig::TorusTrig { .. } => "torus_trig",
        }
    }

    pub fn matching_pennies() -> Self {
        GameConfig::Matrix {
            payoff: vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
        }
    }

    pub fn rock_paper_scissors() -> Self {
        GameConfig::Matrix {
            payoff: vec![
                vec![0.0, -1.0, 1.0],
                vec![1.0, 0.0, -1.0],
                vec![-1.0, 1.0, 0.0],
            ],
        }
    }
}
