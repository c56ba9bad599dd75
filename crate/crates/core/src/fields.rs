//! Stationary random fields with finitely supported covariance.
//!
//! Two families: i.i.d. innovations, and finite moving averages
//! `X_j = sum_u a_u Z_{j-u}` of i.i.d. unit-variance innovations `Z`. Both have exact
//! covariance, `sigma^2` and Cox–Grimmett coefficients.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, Block, MultiIndex};
use crate::rng::{cell_counter, Stream, Tag};
use crate::stats;
use crate::sums::SampleGrid;

/// Centred, unit-variance innovation laws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Innovation {
    Normal,
    /// `Exp(1) - 1`.
    Exponential,
    Rademacher,
}

impl Innovation {
    #[inline]
    pub fn draw(self, stream: &Stream, cell: u64) -> f64 {
        match self {
            Innovation::Normal => stream.normal_at(cell),
            Innovation::Exponential => -stream.uniform_at(cell, 0).ln() - 1.0,
            Innovation::Rademacher => {
                if stream.bits(cell) >> 63 == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// Exact CDF of the innovation.
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Innovation::Normal => stats::phi(x),
            Innovation::Exponential => {
                if x <= -1.0 {
                    0.0
                } else {
                    1.0 - (-(x + 1.0)).exp()
                }
            }
            Innovation::Rademacher => {
                if x < -1.0 {
                    0.0
                } else if x < 1.0 {
                    0.5
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Iid,
    LinearMa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficient {
    pub offset: Vec<i64>,
    pub value: f64,
}

/// Serialised model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<Coefficient>,
    pub innovation: Innovation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub struct FieldModel {
    d: usize,
    kind: ModelKind,
    innovation: Innovation,
    /// `(u, a_u)`, sorted by `u`, no zeros. For i.i.d. models this is `{0: 1}`.
    coefficients: Vec<(Vec<i64>, f64)>,
    /// Nonzero covariances by lag, sorted by lag.
    lags: Vec<(Vec<i64>, f64)>,
}

impl FieldModel {
    pub fn iid(d: usize, innovation: Innovation) -> Self {
        assert!(d >= 1, "dimension must be at least 1");
        FieldModel {
            d,
            kind: ModelKind::Iid,
            innovation,
            coefficients: vec![(vec![0; d], 1.0)],
            lags: vec![(vec![0; d], 1.0)],
        }
    }

    pub fn linear_ma(d: usize, coefficients: Vec<(Vec<i64>, f64)>, innovation: Innovation) -> Result<Self> {
        if d == 0 {
            return Err(Error::Model("dimension 0".into()));
        }
        let mut map: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        for (u, a) in coefficients {
            lattice::check_dim(d, u.len())?;
            if !a.is_finite() {
                return Err(Error::Model(format!("coefficient {a} at {u:?}")));
            }
            if map.insert(u.clone(), a).is_some() {
                return Err(Error::Model(format!("duplicate offset {u:?}")));
            }
        }
        map.retain(|_, a| *a != 0.0);
        if map.is_empty() {
            return Err(Error::Model("empty coefficient support".into()));
        }
        let coefficients: Vec<(Vec<i64>, f64)> = map.into_iter().collect();
        let mut lags: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        for (u, au) in &coefficients {
            for (v, av) in &coefficients {
                // cov(X_0, X_h) = sum_u a_u a_{u+h}; the pair (u, v = u + h) contributes
                let h: Vec<i64> = v.iter().zip(u).map(|(x, y)| x - y).collect();
                *lags.entry(h).or_insert(0.0) += au * av;
            }
        }
        lags.retain(|_, c| *c != 0.0);
        Ok(FieldModel { d, kind: ModelKind::LinearMa, innovation, coefficients, lags: lags.into_iter().collect() })
    }

    /// Geometric moving average `a_u = q^{|u|_1}` on `{0..=radius}^d`, together with the
    /// dropped coefficient mass `sum_{u not kept} q^{|u|_1}` over `N^d`.
    pub fn truncated_geometric(d: usize, q: f64, radius: i64, innovation: Innovation) -> Result<(Self, f64)> {
        if !(q > 0.0 && q < 1.0) || radius < 0 {
            return Err(Error::Model(format!("geometric rate {q}, radius {radius}")));
        }
        let corner = Block::from_coords(&vec![-1; d], &vec![radius; d])?;
        let coefficients = corner
            .points()
            .map(|u| {
                let l1: i64 = u.iter().sum();
                (u, q.powi(l1 as i32))
            })
            .collect();
        let full = (1.0 / (1.0 - q)).powi(d as i32);
        let kept = ((1.0 - q.powi(radius as i32 + 1)) / (1.0 - q)).powi(d as i32);
        Ok((FieldModel::linear_ma(d, coefficients, innovation)?, full - kept))
    }

    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        match spec.kind {
            ModelKind::Iid => {
                if spec.dimension == 0 {
                    return Err(Error::Model("dimension 0".into()));
                }
                if !spec.coefficients.is_empty() {
                    return Err(Error::Model("iid model takes no coefficients".into()));
                }
                Ok(FieldModel::iid(spec.dimension, spec.innovation))
            }
            ModelKind::LinearMa => FieldModel::linear_ma(
                spec.dimension,
                spec.coefficients.into_iter().map(|c| (c.offset, c.value)).collect(),
                spec.innovation,
            ),
        }
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            dimension: self.d,
            coefficients: match self.kind {
                ModelKind::Iid => Vec::new(),
                ModelKind::LinearMa => self
                    .coefficients
                    .iter()
                    .map(|(u, a)| Coefficient { offset: u.clone(), value: *a })
                    .collect(),
            },
            innovation: self.innovation,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn innovation(&self) -> Innovation {
        self.innovation
    }

    pub fn coefficients(&self) -> &[(Vec<i64>, f64)] {
        &self.coefficients
    }

    /// Nonzero covariances `(h, cov(X_0, X_h))`.
    pub fn lags(&self) -> &[(Vec<i64>, f64)] {
        &self.lags
    }

    /// Largest sup-norm of a lag with nonzero covariance.
    pub fn covariance_range(&self) -> u64 {
        self.lags.iter().map(|(h, _)| h.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0)).max().unwrap_or(0)
    }

    /// All coefficients nonnegative.
    pub fn is_associated(&self) -> bool {
        self.coefficients.iter().all(|(_, a)| *a >= 0.0)
    }

    /// Gaussian innovations and no positive off-diagonal covariance.
    pub fn is_negatively_associated(&self) -> bool {
        self.innovation == Innovation::Normal
            && self.lags.iter().all(|(h, c)| h.iter().all(|&x| x == 0) || *c <= 0.0)
    }

    /// Per-axis `(min u_s, max u_s)` over the coefficient support.
    fn support_box(&self) -> (Vec<i64>, Vec<i64>) {
        let mut lo = vec![i64::MAX; self.d];
        let mut hi = vec![i64::MIN; self.d];
        for (u, _) in &self.coefficients {
            for s in 0..self.d {
                lo[s] = lo[s].min(u[s]);
                hi[s] = hi[s].max(u[s]);
            }
        }
        (lo, hi)
    }
}

impl TryFrom<ModelSpec> for FieldModel {
    type Error = Error;
    fn try_from(spec: ModelSpec) -> Result<Self> {
        FieldModel::from_spec(spec)
    }
}

impl From<FieldModel> for ModelSpec {
    fn from(m: FieldModel) -> Self {
        m.to_spec()
    }
}

/// Exact `cov(X_0, X_lag)`.
pub fn covariance(model: &FieldModel, lag: &MultiIndex) -> f64 {
    match model.lags.binary_search_by(|(h, _)| h.as_slice().cmp(lag.coords())) {
        Ok(i) => model.lags[i].1,
        Err(_) => 0.0,
    }
}

/// `sigma^2 = sum_j cov(X_0, X_j)`; equals `(sum_u a_u)^2`.
pub fn sigma2(model: &FieldModel) -> f64 {
    let s: f64 = model.coefficients.iter().map(|(_, a)| a).sum();
    s * s
}

/// `sum_{||u|| >= r} |cov(X_0, X_u)|`.
pub fn cox_grimmett(model: &FieldModel, r: u64) -> f64 {
    model
        .lags
        .iter()
        .filter(|(h, _)| h.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0) >= r)
        .map(|(_, c)| c.abs())
        .sum()
}

/// `cov(S(A), S(B))` for unions of blocks `A = cup A_q`, `B = cup B_q'`.
pub fn covariance_of_sums(model: &FieldModel, a: &[Block], b: &[Block]) -> Result<f64> {
    let mut total = 0.0;
    for p in a.iter().chain(b) {
        lattice::check_dim(model.d, p.dim())?;
    }
    for (h, c) in &model.lags {
        // pairs (j in A, k in B) with k - j = h: |A_q ∩ (B_q' - h)|
        let neg: Vec<i64> = h.iter().map(|x| -x).collect();
        let count: u64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (x, y)))
            .map(|(x, y)| lattice::shifted_overlap(x, y, &neg))
            .sum();
        total += c * count as f64;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSequence {
    /// `values[r - 1] = theta_r`.
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl ThetaSequence {
    pub fn analytic(model: &FieldModel, r_max: u64) -> Self {
        ThetaSequence { values: (1..=r_max).map(|r| cox_grimmett(model, r)).collect(), provenance: Provenance::Analytic }
    }

    pub fn get(&self, r: u64) -> Option<f64> {
        (r >= 1).then(|| self.values.get(r as usize - 1).copied()).flatten()
    }
}

/// Empirical `theta_r` from singleton pairs `I = {0}`, `J = {r e_1}`: the largest
/// `|cov(f, g)| / (Lip f Lip g)` over the test functions.
pub fn empirical_theta(model: &FieldModel, r_max: u64, trials: usize, replicates: usize, seed: u64) -> Result<ThetaSequence> {
    let mut values = Vec::new();
    for r in 1..=r_max {
        let i = vec![MultiIndex::splat(model.d, 0)];
        let mut jc = vec![0i64; model.d];
        jc[0] = r as i64;
        let j = vec![MultiIndex::new(jc)?];
        let rep = empirical_dependence_test(model, &i, &j, trials, replicates, Stream::derive_seed(seed, r))?;
        values.push(rep.trials.iter().map(|t| t.cov.abs() / (t.lip_f * t.lip_g)).fold(0.0, f64::max));
    }
    Ok(ThetaSequence { values, provenance: Provenance::Empirical })
}

/// A realisation of the field on `V`. Innovations are keyed by global coordinates, so the
/// restriction of a sample on `V` to `W ⊂ V` equals the sample on `W`.
pub fn sample(model: &FieldModel, v: &Block, seed: u64, replicate: u64) -> Result<SampleGrid> {
    lattice::check_dim(model.d, v.dim())?;
    let stream = Stream::new(seed, Tag::Field, replicate);
    let innovation = model.innovation;
    if model.kind == ModelKind::Iid {
        return SampleGrid::from_fn(v.clone(), |p| innovation.draw(&stream, cell_counter(p)));
    }

    // innovations on V dilated by the support: (a - max u, b - min u]
    let d = model.d;
    let (ulo, uhi) = model.support_box();
    let za: Vec<i64> = (0..d).map(|s| v.lower().coords()[s] - uhi[s]).collect();
    let zb: Vec<i64> = (0..d).map(|s| v.upper().coords()[s] - ulo[s]).collect();
    let zblock = Block::from_coords(&za, &zb)?;
    let zext: Vec<usize> = zblock.edges().iter().map(|&l| l as usize).collect();
    let mut zstr = vec![1usize; d];
    for s in (0..d - 1).rev() {
        zstr[s] = zstr[s + 1] * zext[s + 1];
    }
    let z: Vec<f64> = zblock.points().map(|p| innovation.draw(&stream, cell_counter(&p))).collect();

    // X_j = sum_u a_u Z_{j-u}; Z index of j - u = idx(j) - off(u)
    let taps: Vec<(isize, f64)> = model
        .coefficients
        .iter()
        .map(|(u, a)| ((0..d).map(|s| u[s] as isize * zstr[s] as isize).sum(), *a))
        .collect();
    let values: Vec<f64> = v
        .points()
        .map(|p| {
            let base: isize = (0..d).map(|s| ((p[s] - za[s] - 1) as usize * zstr[s]) as isize).sum();
            taps.iter().map(|&(off, a)| a * z[(base - off) as usize]).sum()
        })
        .collect();
    SampleGrid::from_values(v.clone(), values)
}

/// Field values at arbitrary points, consistent with [`sample`].
pub fn sample_points(model: &FieldModel, points: &[MultiIndex], seed: u64, replicate: u64) -> Result<Vec<f64>> {
    let stream = Stream::new(seed, Tag::Field, replicate);
    let mut buf = vec![0i64; model.d];
    points
        .iter()
        .map(|p| {
            lattice::check_dim(model.d, p.dim())?;
            Ok(model
                .coefficients
                .iter()
                .map(|(u, a)| {
                    for s in 0..model.d {
                        buf[s] = p.coords()[s] - u[s];
                    }
                    a * model.innovation.draw(&stream, cell_counter(&buf))
                })
                .sum())
        })
        .collect()
}

/// Independent additive noise `Y = scale * Z'` with i.i.d. innovations `Z'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub innovation: Innovation,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub cov: f64,
    pub se: f64,
    pub lip_f: f64,
    pub lip_g: f64,
    pub bound: f64,
}

impl TrialResult {
    /// `|cov| <= bound + 3 SE`, i.e. ratio `<= 1 + 3 SE` on the ratio scale.
    pub fn passes(&self) -> bool {
        self.cov.abs() <= self.bound + 3.0 * self.se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub r: u64,
    pub size_i: usize,
    pub size_j: usize,
    pub theta_r: f64,
    pub trials: Vec<TrialResult>,
    /// Largest `|cov| / bound` over trials with a positive bound, and its standard error.
    pub max_ratio: Option<f64>,
    pub max_ratio_se: Option<f64>,
    pub pass: bool,
}

fn clamped_linear(c: &[f64], x: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
}

/// Coefficients uniform on `[-1, 1]`, normalised to `sum |c_i| = 1`.
fn draw_direction(stream: &Stream, len: usize, salt: u64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|i| 2.0 * stream.uniform(salt * 1_000_003 + i as u64) - 1.0).collect();
    let norm: f64 = raw.iter().map(|c| c.abs()).sum();
    raw.iter().map(|c| c / norm).collect()
}

/// Randomised check of `|cov(f(X_I), g(X_J))| <= Lip f Lip g (|I| ∧ |J|) theta_r`.
///
/// Test functions are `x -> clamp(c . x, -1, 1)` with `sum |c_i| = 1`. Their Lipschitz
/// constant with respect to `sum_i |x_i - y_i|` is exactly `max |c_i|`.
pub fn empirical_dependence_test(
    model: &FieldModel,
    set_i: &[MultiIndex],
    set_j: &[MultiIndex],
    trials: usize,
    replicates: usize,
    seed: u64,
) -> Result<DependenceReport> {
    dependence_test_impl(model, None, set_i, set_j, trials, replicates, seed)
}

/// As [`empirical_dependence_test`] for `X + Y`, measured against the `theta` of `X`.
pub fn noise_stability_test(
    model: &FieldModel,
    noise: Noise,
    set_i: &[MultiIndex],
    set_j: &[MultiIndex],
    trials: usize,
    replicates: usize,
    seed: u64,
) -> Result<DependenceReport> {
    dependence_test_impl(model, Some(noise), set_i, set_j, trials, replicates, seed)
}

fn dependence_test_impl(
    model: &FieldModel,
    noise: Option<Noise>,
    set_i: &[MultiIndex],
    set_j: &[MultiIndex],
    trials: usize,
    replicates: usize,
    seed: u64,
) -> Result<DependenceReport> {
    if set_i.iter().any(|p| set_j.contains(p)) {
        return Err(Error::Domain("I and J overlap".into()));
    }
    let r = lattice::dist(set_i, set_j)?;
    lattice::check_dim(model.d, set_i[0].dim())?;
    if trials == 0 || replicates < 2 {
        return Err(Error::Domain(format!("{trials} trials, {replicates} replicates")));
    }
    let theta_r = cox_grimmett(model, r);
    let points: Vec<MultiIndex> = set_i.iter().chain(set_j).cloned().collect();
    let ni = set_i.len();

    let rows: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut x = sample_points(model, &points, seed, rep as u64)?;
            if let Some(nz) = noise {
                let ys = Stream::new(seed, Tag::Noise, rep as u64);
                for (xv, p) in x.iter_mut().zip(&points) {
                    *xv += nz.scale * nz.innovation.draw(&ys, cell_counter(p.coords()));
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;

    let dirs = Stream::new(seed, Tag::Lipschitz, 0);
    let results: Vec<TrialResult> = (0..trials)
        .map(|t| {
            let cf = draw_direction(&dirs, ni, 2 * t as u64);
            let cg = draw_direction(&dirs, set_j.len(), 2 * t as u64 + 1);
            let lip_f = cf.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            let lip_g = cg.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            let fg: Vec<(f64, f64)> =
                rows.iter().map(|x| (clamped_linear(&cf, &x[..ni]), clamped_linear(&cg, &x[ni..]))).collect();
            let n = fg.len() as f64;
            let mf = fg.iter().map(|v| v.0).sum::<f64>() / n;
            let mg = fg.iter().map(|v| v.1).sum::<f64>() / n;
            let prods: Vec<f64> = fg.iter().map(|(f, g)| (f - mf) * (g - mg)).collect();
            let (m, se) = stats::mean_se(&prods);
            TrialResult {
                cov: m * n / (n - 1.0),
                se,
                lip_f,
                lip_g,
                bound: lip_f * lip_g * ni.min(set_j.len()) as f64 * theta_r,
            }
        })
        .collect();

    let worst = results
        .iter()
        .filter(|t| t.bound > 0.0)
        .map(|t| (t.cov.abs() / t.bound, t.se / t.bound))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    Ok(DependenceReport {
        r,
        size_i: ni,
        size_j: set_j.len(),
        theta_r,
        pass: results.iter().all(TrialResult::passes),
        max_ratio: worst.map(|w| w.0),
        max_ratio_se: worst.map(|w| w.1),
        trials: results,
    })
}
