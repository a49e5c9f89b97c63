//! Weighted particle ensembles and their time averages.
//!
//! Weights are kept normalized and mirrored by log-weights; multiplicative
//! updates act on the log-weights and renormalize with log-sum-exp, so large
//! `η'·ℓ` never overflows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::rng::StreamRng;
use crate::scalar::Scalar;

/// Tolerance on `Σ w = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// `n` points on one manifold with simplex weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedEnsemble<F> {
    manifold: Manifold<F>,
    dim: usize,
    /// Row-major `n × dim` coordinates.
    coords: Vec<F>,
    weights: Vec<F>,
    log_weights: Vec<F>,
}

/// Normalizes nonnegative raw weights onto the simplex.
///
/// Fails when any weight is negative or non-finite, or when the total mass
/// is zero.
pub fn normalize_weights<F: Scalar>(raw: &[F]) -> Result<Vec<F>> {
    if raw.is_empty() {
        return Err(Error::invalid("weights", "empty weight vector"));
    }
    if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < F::zero()) {
        return Err(Error::WeightUnderflow(format!("invalid raw weight {w}")));
    }
    let total: F = raw.iter().copied().sum();
    if !(total > F::zero()) {
        return Err(Error::WeightUnderflow("total weight mass is zero".into()));
    }
    Ok(raw.iter().map(|&w| w / total).collect())
}

/// Normalizes log-weights in place with log-sum-exp and returns the weights.
fn normalize_log<F: Scalar>(log_w: &mut [F]) -> Result<Vec<F>> {
    let max = log_w.iter().copied().fold(F::neg_infinity(), F::max);
    if max.is_nan() || log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN log-weight".into()));
    }
    if max == F::infinity() {
        return Err(Error::NonFinite("infinite log-weight".into()));
    }
    if max == F::neg_infinity() {
        return Err(Error::WeightUnderflow("all log-weights are -inf".into()));
    }
    let lse = max + log_w.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    for v in log_w.iter_mut() {
        *v = *v - lse;
    }
    Ok(log_w.iter().map(|&v| v.exp()).collect())
}

impl<F: Scalar> WeightedEnsemble<F> {
    /// `n` i.i.d. uniform positions drawn in order from `rng`, weights `1/n`.
    pub fn init_uniform<R: Rng + ?Sized>(manifold: Manifold<F>, n: usize, rng: &mut R) -> Result<Self> {
        check_count(n)?;
        let dim = manifold.coord_dim();
        let mut coords = vec![F::zero(); n * dim];
        for row in coords.chunks_mut(dim) {
            manifold.sample_into(rng, row);
        }
        Ok(Self::uniform_from_coords(manifold, coords, n))
    }

    /// One position per stream, so particle `i` depends only on `streams[i]`.
    pub fn init_from_streams(manifold: Manifold<F>, streams: &mut [StreamRng]) -> Result<Self> {
        let n = streams.len();
        check_count(n)?;
        let dim = manifold.coord_dim();
        let mut coords = vec![F::zero(); n * dim];
        for (row, rng) in coords.chunks_mut(dim).zip(streams.iter_mut()) {
            manifold.sample_into(rng, row);
        }
        Ok(Self::uniform_from_coords(manifold, coords, n))
    }

    fn uniform_from_coords(manifold: Manifold<F>, coords: Vec<F>, n: usize) -> Self {
        let w = F::one() / F::from_count(n);
        Self {
            dim: manifold.coord_dim(),
            manifold,
            coords,
            weights: vec![w; n],
            log_weights: vec![w.ln(); n],
        }
    }

    /// Builds an ensemble from explicit positions and raw nonnegative weights.
    pub fn from_parts(manifold: Manifold<F>, positions: Vec<Vec<F>>, raw_weights: &[F]) -> Result<Self> {
        check_count(positions.len())?;
        if raw_weights.len() != positions.len() {
            return Err(Error::DimensionMismatch {
                expected: positions.len(),
                actual: raw_weights.len(),
            });
        }
        let dim = manifold.coord_dim();
        let mut coords = Vec::with_capacity(positions.len() * dim);
        for p in &positions {
            manifold.check(p)?;
            coords.extend_from_slice(p);
        }
        let weights = normalize_weights(raw_weights)?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            manifold,
            dim,
            coords,
            weights,
            log_weights,
        })
    }

    /// Same positions, weights replaced by `raw` after normalization.
    pub fn with_weights(mut self, raw: &[F]) -> Result<Self> {
        if raw.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: raw.len(),
            });
        }
        self.weights = normalize_weights(raw)?;
        self.log_weights = self.weights.iter().map(|w| w.ln()).collect();
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn manifold(&self) -> &Manifold<F> {
        &self.manifold
    }

    pub fn position(&self, i: usize) -> &[F] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> impl Iterator<Item = &[F]> {
        self.coords.chunks(self.dim)
    }

    /// Flat row-major coordinates.
    pub fn coords(&self) -> &[F] {
        &self.coords
    }

    /// Mutable flat coordinates; callers must keep every row on the manifold.
    pub(crate) fn coords_mut(&mut self) -> &mut [F] {
        &mut self.coords
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[F] {
        &self.log_weights
    }

    /// `log w_i ← log w_i − rate·score_i`, then log-sum-exp normalization.
    pub fn multiplicative_update(&mut self, scores: &[F], rate: F) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: scores.len(),
            });
        }
        let mut log_w = self.log_weights.clone();
        for (lw, &s) in log_w.iter_mut().zip(scores) {
            *lw = *lw - rate * s;
        }
        self.weights = normalize_log(&mut log_w)?;
        self.log_weights = log_w;
        Ok(())
    }

    /// `Σ_i w_i x_i` in ambient coordinates.
    pub fn mean_embedding(&self) -> Vec<F> {
        let mut m = vec![F::zero(); self.dim];
        for (p, &w) in self.positions().zip(&self.weights) {
            for (mi, &c) in m.iter_mut().zip(p) {
                *mi = *mi + w * c;
            }
        }
        m
    }

    /// Shannon entropy of the weights in nats.
    pub fn weight_entropy(&self) -> F {
        -self
            .weights
            .iter()
            .filter(|&&w| w > F::zero())
            .map(|&w| w * w.ln())
            .sum::<F>()
    }

    /// True when every weight is within `tol` of `1/n`.
    pub fn is_uniform(&self, tol: F) -> bool {
        let u = F::one() / F::from_count(self.len());
        self.weights.iter().all(|&w| (w - u).abs() <= tol)
    }

    /// Checks the simplex and membership invariants.
    pub fn validate(&self) -> Result<()> {
        let total: F = self.weights.iter().copied().sum();
        if (total - F::one()).abs() > F::lit(SIMPLEX_TOL) || self.weights.iter().any(|&w| w < F::zero()) {
            return Err(Error::WeightUnderflow(format!("weights sum to {total}")));
        }
        for p in self.positions() {
            self.manifold.check(p)?;
        }
        Ok(())
    }

    /// Convex mixture `Σ_k c_k μ_k` of ensembles on one manifold, with raw
    /// nonnegative coefficients `c_k`.
    pub fn mixture(parts: &[(&WeightedEnsemble<F>, F)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("mixture", "no components"))?
            .0;
        let coeff = normalize_weights(&parts.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let mut coords = Vec::new();
        let mut raw = Vec::new();
        for ((e, _), c) in parts.iter().zip(coeff) {
            if e.manifold != first.manifold {
                return Err(Error::invalid("mixture", "components live on different manifolds"));
            }
            coords.extend_from_slice(&e.coords);
            raw.extend(e.weights.iter().map(|&w| w * c));
        }
        let weights = normalize_weights(&raw)?;
        Ok(Self {
            manifold: first.manifold.clone(),
            dim: first.dim,
            coords,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
        })
    }
}

fn check_count(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::invalid("n", "an ensemble needs at least one particle"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Running mean of weights over the current positions.
    #[default]
    WeightsOnly,
    /// Mixture of ensemble copies taken every `stride` steps.
    Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AveragingConfig {
    #[serde(default)]
    pub mode: AveragingMode,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    100
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            mode: AveragingMode::WeightsOnly,
            stride: default_stride(),
        }
    }
}

/// Time average of an ensemble trajectory.
///
/// In snapshot mode each stored copy carries the number of steps it stands
/// for: a new copy is taken whenever `step_index % stride == 0`, and
/// intermediate steps are credited to the latest copy.
#[derive(Clone, Debug)]
pub struct AveragedMeasure<F> {
    config: AveragingConfig,
    count: usize,
    mean_weights: Vec<F>,
    current: Option<WeightedEnsemble<F>>,
    snapshots: Vec<(WeightedEnsemble<F>, usize)>,
}

impl<F: Scalar> AveragedMeasure<F> {
    pub fn new(config: AveragingConfig) -> Result<Self> {
        if config.stride == 0 {
            return Err(Error::invalid("stride", "averaging stride must be positive"));
        }
        Ok(Self {
            config,
            count: 0,
            mean_weights: Vec::new(),
            current: None,
            snapshots: Vec::new(),
        })
    }

    pub fn mode(&self) -> AveragingMode {
        self.config.mode
    }

    /// Number of updates folded in so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn snapshots(&self) -> &[(WeightedEnsemble<F>, usize)] {
        &self.snapshots
    }

    /// Averaged weights of weights-only mode.
    pub fn mean_weights(&self) -> &[F] {
        &self.mean_weights
    }

    pub fn update(&mut self, e: &WeightedEnsemble<F>, step_index: usize) -> Result<()> {
        match self.config.mode {
            AveragingMode::WeightsOnly => {
                if self.count > 0 && e.len() != self.mean_weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.mean_weights.len(),
                        actual: e.len(),
                    });
                }
                self.count += 1;
                if self.count == 1 {
                    self.mean_weights = e.weights().to_vec();
                } else {
                    let k = F::from_count(self.count);
                    for (m, &w) in self.mean_weights.iter_mut().zip(e.weights()) {
                        *m = *m + (w - *m) / k;
                    }
                }
                match &mut self.current {
                    Some(cur) => cur.coords.copy_from_slice(&e.coords),
                    None => self.current = Some(e.clone()),
                }
            }
            AveragingMode::Snapshot => {
                self.count += 1;
                match self.snapshots.last_mut() {
                    Some((_, c)) if step_index % self.config.stride != 0 => *c += 1,
                    _ => self.snapshots.push((e.clone(), 1)),
                }
            }
        }
        Ok(())
    }

    /// The averaged measure as one weighted ensemble.
    pub fn measure(&self) -> Result<WeightedEnsemble<F>> {
        if self.count == 0 {
            return Err(Error::invalid("average", "no updates recorded"));
        }
        match self.config.mode {
            AveragingMode::WeightsOnly => {
                let cur = self.current.clone().expect("set on first update");
                cur.with_weights(&self.mean_weights)
            }
            AveragingMode::Snapshot => {
                let parts: Vec<_> = self
                    .snapshots
                    .iter()
                    .map(|(e, c)| (e, F::from_count(*c)))
                    .collect();
                WeightedEnsemble::mixture(&parts)
            }
        }
    }
}
