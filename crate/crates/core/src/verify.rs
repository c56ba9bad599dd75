//! Finite-sample verifiers. Each returns a [`VerificationReport`] holding its inputs, the
//! measured statistics, the oracle values, every threshold that decides `pass`, and a
//! per-rung table for CSV export.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coupling::{self, BlockScheme, CdfMode, CouplingSetup};
use crate::error::{Error, Result};
use crate::fields::{self, FieldModel, Noise};
use crate::lattice::{self, Block, MultiIndex};
use crate::stats;
use crate::sums;
use crate::theory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Named {
    pub name: String,
    /// `None` for non-finite values.
    pub value: Option<f64>,
}

impl Named {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Named { name: name.into(), value: value.is_finite().then_some(value) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub rung: String,
    pub statistic: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub claim_id: String,
    pub formula: String,
    pub inputs: Value,
    pub statistics: Vec<Named>,
    pub oracle: Vec<Named>,
    pub tolerance: Vec<Named>,
    pub pass: bool,
    /// Wall time; kept out of the report JSON so that re-runs are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
    pub table: Vec<Row>,
}

impl VerificationReport {
    fn new(claim_id: &str, formula: &str, inputs: Value) -> Self {
        VerificationReport {
            claim_id: claim_id.into(),
            formula: formula.into(),
            inputs,
            statistics: Vec::new(),
            oracle: Vec::new(),
            tolerance: Vec::new(),
            pass: false,
            seconds: 0.0,
            table: Vec::new(),
        }
    }

    fn stat(&mut self, name: &str, v: f64) {
        self.statistics.push(Named::new(name, v));
    }

    fn oracle(&mut self, name: &str, v: f64) {
        self.oracle.push(Named::new(name, v));
    }

    fn tol(&mut self, name: &str, v: f64) {
        self.tolerance.push(Named::new(name, v));
    }

    fn row(&mut self, rung: impl ToString, statistic: &str, v: f64) {
        self.table.push(Row { rung: rung.to_string(), statistic: statistic.into(), value: v.is_finite().then_some(v) });
    }

    /// Looks up a statistic by name.
    pub fn statistic(&self, name: &str) -> Option<f64> {
        self.statistics.iter().find(|s| s.name == name).and_then(|s| s.value)
    }

    fn finish(mut self, start: Instant) -> Self {
        self.seconds = start.elapsed().as_secs_f64();
        self
    }
}

/// Claim ids.
pub mod claims {
    pub const DEPENDENCE: &str = "dependence_inequality";
    pub const NOISE_STABILITY: &str = "noise_stability";
    pub const MOMENT: &str = "moment_inequality";
    pub const MAXIMAL: &str = "maximal_inequality";
    pub const VARIANCE_ASYMPTOTICS: &str = "variance_asymptotics";
    pub const SECOND_MOMENT: &str = "second_moment_bound";
    pub const NEIGHBOR_SUM: &str = "neighbor_sum_bound";
    pub const VARIANCE_DEFECT: &str = "variance_defect";
    pub const CLT_DISTANCE: &str = "clt_distance";
    pub const COUPLING_ERROR: &str = "coupling_error_decay";
    pub const TAIL: &str = "tail_bound";
    pub const APPROXIMATION: &str = "approximation_error";
    pub const LIL: &str = "lil";
}

/// Every threshold that decides a `pass`, with the defaults used throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Slack on fitted moment slopes.
    pub slope_slack: f64,
    /// Allowed growth of normalised moments up the ladder.
    pub ratio_growth_max: f64,
    /// Slack on the fitted tail exponent.
    pub tail_slack: f64,
    /// Level of the DKW noise floor.
    pub dkw_alpha: f64,
    /// Allowed increase of the Kolmogorov distance between rungs, in noise floors.
    pub clt_floor_mult: f64,
    pub clt_top_max: f64,
    pub lil_max_band: (f64, f64),
    pub lil_min_band: (f64, f64),
    pub lil_exceed_level: f64,
    pub lil_exceed_max: f64,
    /// Standard errors of slack in Monte Carlo comparisons.
    pub se_mult: f64,
    /// Allowed max/first ratio of scaled variance defects and of neighbour-sum ratios.
    pub defect_ratio_max: f64,
    pub identity_residual_max: f64,
    pub wiener_deviation_max: f64,
    /// `eta_k` Kolmogorov distance limit, in DKW half-widths.
    pub eta_ks_mult: f64,
    /// Upper limit for the approximation-error slope interval.
    pub approximation_slope_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            slope_slack: 0.1,
            ratio_growth_max: 10.0,
            tail_slack: 0.3,
            dkw_alpha: 0.01,
            clt_floor_mult: 2.0,
            clt_top_max: 0.05,
            lil_max_band: (0.5, 1.4),
            lil_min_band: (-1.4, -0.5),
            lil_exceed_level: 1.5,
            lil_exceed_max: 0.05,
            se_mult: 3.0,
            defect_ratio_max: 2.0,
            identity_residual_max: coupling::IDENTITY_TOL,
            wiener_deviation_max: 1e-12,
            eta_ks_mult: 2.0,
            approximation_slope_max: 0.5,
        }
    }
}

fn model_json(model: &FieldModel) -> Value {
    serde_json::to_value(model.to_spec()).expect("model spec serialises")
}

fn block_json(blocks: &[Block]) -> Value {
    serde_json::to_value(blocks).expect("blocks serialise")
}

fn require_decay(model: &FieldModel) -> Result<()> {
    // finite-range covariance: theta_r vanishes past the range, so any power or exponential
    // envelope holds with a large enough prefactor
    let r = model.covariance_range() + 1;
    if fields::cox_grimmett(model, r) != 0.0 {
        return Err(Error::Model("Cox-Grimmett coefficients do not vanish".into()));
    }
    Ok(())
}

fn require_sigma(model: &FieldModel) -> Result<f64> {
    let s2 = fields::sigma2(model);
    if !(s2 > 0.0) {
        return Err(Error::Degenerate(format!("sigma^2 = {s2}")));
    }
    Ok(s2)
}

/// Largest `later / earlier` over pairs of rungs.
fn max_growth(xs: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            best = best.max(xs[j] / xs[i]);
        }
    }
    best
}

struct LadderRung {
    card: f64,
    s_mean: f64,
    s_se: f64,
    m_mean: f64,
    m_se: f64,
    dominated: usize,
}

fn moment_ladder(model: &FieldModel, delta: f64, ladder: &[Block], replicates: usize, seed: u64) -> Result<Vec<LadderRung>> {
    if ladder.len() < 2 {
        return Err(Error::Domain("ladder needs at least two rungs".into()));
    }
    let q = 2.0 + delta;
    ladder
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let pairs = sums::block_sums_and_maxima(model, u, replicates, crate::rng::Stream::derive_seed(seed, i as u64))?;
            let s: Vec<f64> = pairs.iter().map(|(s, _)| s.abs().powf(q)).collect();
            let m: Vec<f64> = pairs.iter().map(|(_, m)| m.powf(q)).collect();
            let (s_mean, s_se) = stats::mean_se(&s);
            let (m_mean, m_se) = stats::mean_se(&m);
            Ok(LadderRung {
                card: u.cardinality()? as f64,
                s_mean,
                s_se,
                m_mean,
                m_se,
                dominated: pairs.iter().filter(|(s, m)| *m >= s.abs()).count(),
            })
        })
        .collect()
}

fn ladder_inputs(model: &FieldModel, delta: f64, ladder: &[Block], replicates: usize, seed: u64) -> Value {
    json!({"model": model_json(model), "delta": delta, "ladder": block_json(ladder), "replicates": replicates, "seed": seed})
}

/// `E|S(U)|^{2+delta} <= C |U|^{1+delta/2}` on a ladder of blocks.
pub fn check_moment_inequality(model: &FieldModel, delta: f64, ladder: &[Block], replicates: usize, seed: u64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    require_decay(model)?;
    let rungs = moment_ladder(model, delta, ladder, replicates, seed)?;
    let mut rep = VerificationReport::new(claims::MOMENT, "E|S(U)|^{2+δ} ≤ C|U|^{1+δ/2}", ladder_inputs(model, delta, ladder, replicates, seed));
    finish_moment(&mut rep, delta, &rungs, false, tol)?;
    Ok(rep.finish(start))
}

/// `E M(U)^{2+delta} <= A C |U|^{1+delta/2}` on a ladder of blocks.
pub fn check_maximal_inequality(model: &FieldModel, delta: f64, ladder: &[Block], replicates: usize, seed: u64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    require_decay(model)?;
    let rungs = moment_ladder(model, delta, ladder, replicates, seed)?;
    let mut rep = VerificationReport::new(claims::MAXIMAL, "E M(U)^{2+δ} ≤ A C|U|^{1+δ/2}", ladder_inputs(model, delta, ladder, replicates, seed));
    finish_moment(&mut rep, delta, &rungs, true, tol)?;
    Ok(rep.finish(start))
}

fn finish_moment(rep: &mut VerificationReport, delta: f64, rungs: &[LadderRung], maximal: bool, tol: &Tolerances) -> Result<()> {
    let cards: Vec<f64> = rungs.iter().map(|r| r.card).collect();
    let means: Vec<f64> = rungs.iter().map(|r| if maximal { r.m_mean } else { r.s_mean }).collect();
    let ratios: Vec<f64> = means.iter().zip(&cards).map(|(m, c)| m / c.powf(1.0 + delta / 2.0)).collect();
    let slope_cap = 1.0 + delta / 2.0 + tol.slope_slack;
    let positive = means.iter().all(|m| *m > 0.0);
    let slope = if positive { stats::loglog_slope(&cards, &means) } else { f64::NAN };
    let growth = max_growth(&ratios);
    for (r, ratio) in rungs.iter().zip(&ratios) {
        rep.row(r.card, "mean_abs_s_pow", r.s_mean);
        rep.row(r.card, "se_abs_s_pow", r.s_se);
        rep.row(r.card, "mean_m_pow", r.m_mean);
        rep.row(r.card, "se_m_pow", r.m_se);
        rep.row(r.card, "normalised", *ratio);
    }
    rep.stat("slope", slope);
    rep.stat("ratio_growth", growth);
    rep.tol("slope_max", slope_cap);
    rep.tol("ratio_growth_max", tol.ratio_growth_max);
    let mut pass = positive && slope <= slope_cap && growth <= tol.ratio_growth_max;
    if maximal {
        let a = theory::moricz_a(rep.inputs["model"]["dimension"].as_u64().unwrap_or(1) as usize, delta.min(1.0))?;
        let worst = rungs.iter().map(|r| r.m_mean / r.s_mean).fold(0.0, f64::max);
        let total: usize = rungs.iter().map(|r| r.dominated).sum();
        let reps = rep.inputs["replicates"].as_u64().unwrap_or(0) as f64 * rungs.len() as f64;
        rep.stat("max_m_over_s", worst);
        rep.stat("dominated_fraction", total as f64 / reps);
        rep.oracle("moricz_a", a);
        rep.tol("dominated_fraction_min", 1.0);
        pass &= worst <= a && total as f64 == reps;
    }
    rep.pass = pass;
    Ok(())
}

/// `P(M(V) >= x sqrt|V|) <= C x^{-2-delta}` on a grid of `x`.
pub fn check_tail_bound(model: &FieldModel, delta: f64, v: &Block, xs: &[f64], replicates: usize, seed: u64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    require_decay(model)?;
    if xs.len() < 2 || xs.windows(2).any(|w| !(w[1] > w[0])) || xs[0] <= 0.0 {
        return Err(Error::Domain("x grid must be positive and increasing".into()));
    }
    let root = (v.cardinality()? as f64).sqrt();
    let maxima: Vec<f64> = sums::block_sums_and_maxima(model, v, replicates, seed)?.into_iter().map(|p| p.1 / root).collect();
    let tails: Vec<f64> = xs.iter().map(|&x| maxima.iter().filter(|&&m| m >= x).count() as f64 / replicates as f64).collect();
    let mut rep = VerificationReport::new(
        claims::TAIL,
        "P(M(V) ≥ x√|V|) ≤ C x^{-2-δ}",
        json!({"model": model_json(model), "delta": delta, "block": v, "x": xs, "replicates": replicates, "seed": seed}),
    );
    for (x, t) in xs.iter().zip(&tails) {
        rep.row(x, "tail", *t);
    }
    let nonzero: Vec<usize> = (0..xs.len()).filter(|&i| tails[i] > 0.0).collect();
    let exponent = if nonzero.len() >= 2 {
        let (i, j) = (nonzero[nonzero.len() - 2], nonzero[nonzero.len() - 1]);
        (tails[j] / tails[i]).ln() / (xs[j] / xs[i]).ln()
    } else {
        f64::NAN
    };
    let cap = -(2.0 + delta) + tol.tail_slack;
    let last_zero = *tails.last().unwrap() == 0.0;
    let monotone = tails.windows(2).all(|w| w[1] <= w[0]);
    rep.stat("tail_exponent", exponent);
    rep.stat("tail_at_largest_x", *tails.last().unwrap());
    rep.stat("monotone", monotone as u8 as f64);
    rep.tol("tail_exponent_max", cap);
    rep.pass = monotone && (last_zero || exponent <= cap);
    Ok(rep.finish(start))
}

/// Kolmogorov distance of `S_N / sqrt(var S_N)` to `Phi` along a ladder.
pub fn check_clt_distance(model: &FieldModel, ladder: &[MultiIndex], replicates: usize, seed: u64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    require_sigma(model)?;
    if ladder.len() < 2 {
        return Err(Error::Domain("ladder needs at least two rungs".into()));
    }
    let floor = stats::dkw_bound(replicates, tol.dkw_alpha);
    let mut sizes = Vec::new();
    let mut dists = Vec::new();
    for (i, n) in ladder.iter().enumerate() {
        let u = Block::origin(n.coords())?;
        let sd = sums::exact_variance(model, std::slice::from_ref(&u))?.sqrt();
        let s = sums::block_sums(model, &u, replicates, crate::rng::Stream::derive_seed(seed, i as u64))?;
        let z: Vec<f64> = s.iter().map(|x| x / sd).collect();
        sizes.push(u.cardinality()? as f64);
        dists.push(stats::ks_distance(&z, stats::phi));
    }
    let mut rep = VerificationReport::new(
        claims::CLT_DISTANCE,
        "sup_x |F_k(x) − Φ(x)| ≤ C[k]^{−αμ}",
        json!({"model": model_json(model), "ladder": ladder, "replicates": replicates, "seed": seed}),
    );
    for (n, dk) in sizes.iter().zip(&dists) {
        rep.row(n, "ks_distance", *dk);
    }
    let decreasing = dists.windows(2).all(|w| w[1] <= w[0] + tol.clt_floor_mult * floor);
    let top = *dists.last().unwrap();
    let mu_hat = if dists.iter().all(|x| *x > 0.0) { -stats::loglog_slope(&sizes, &dists) } else { f64::NAN };
    rep.stat("top_distance", top);
    rep.stat("decreasing", decreasing as u8 as f64);
    rep.stat("mu_hat", mu_hat);
    rep.oracle("noise_floor", floor);
    rep.tol("top_distance_max", tol.clt_top_max);
    rep.tol("increase_allowance", tol.clt_floor_mult * floor);
    rep.pass = decreasing && top <= tol.clt_top_max;
    Ok(rep.finish(start))
}

/// `Log x = ln(max(x, e))`.
pub fn log_e(x: f64) -> f64 {
    x.max(std::f64::consts::E).ln()
}

/// Dyadic points `N = (2^{j_1}, ..., 2^{j_d})` in `G_tau` with `[N] <= 2^depth`.
pub fn dyadic_net(d: usize, depth: u32, tau: f64) -> Result<Vec<MultiIndex>> {
    let mut out = Vec::new();
    let mut j = vec![0u32; d];
    loop {
        if j.iter().sum::<u32>() <= depth {
            let n = MultiIndex::new(j.iter().map(|&e| 1i64 << e).collect())?;
            if lattice::in_g_tau(&n, tau)? {
                out.push(n);
            }
        }
        let mut s = d;
        loop {
            if s == 0 {
                out.sort_by_key(|n| (n.product().unwrap_or(i64::MAX), n.clone()));
                return Ok(out);
            }
            s -= 1;
            if j[s] < depth {
                j[s] += 1;
                break;
            }
            j[s] = 0;
        }
    }
}

fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0usize, 0usize, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / sa.len() as f64 - j as f64 / sb.len() as f64).abs());
    }
    best
}

/// `R_N = S_N / sqrt(2 d sigma^2 [N] LogLog[N])` along a dyadic net in `G_tau`.
pub fn check_lil(model: &FieldModel, depth: u32, replicates: usize, seed: u64, tau: f64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    let s2 = require_sigma(model)?;
    let d = model.dim();
    let net = dyadic_net(d, depth, tau)?;
    if net.is_empty() {
        return Err(Error::Domain("empty dyadic net".into()));
    }
    let hull: Vec<i64> = (0..d).map(|s| net.iter().map(|n| n.coords()[s]).max().unwrap()).collect();
    let hull = Block::origin(&hull)?;
    let scale: Vec<f64> = net
        .iter()
        .map(|n| {
            let card = n.product().unwrap() as f64;
            (2.0 * d as f64 * s2 * card * log_e(log_e(card))).sqrt()
        })
        .collect();
    let per_rep: Vec<(f64, f64, f64)> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let g = fields::sample(model, &hull, seed, r)?;
            let rs: Vec<f64> = net.iter().zip(&scale).map(|(n, sc)| Ok(g.prefix_at(n.coords())? / sc)).collect::<Result<_>>()?;
            Ok((rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max), rs.iter().cloned().fold(f64::INFINITY, f64::min), *rs.last().unwrap()))
        })
        .collect::<Result<_>>()?;
    let maxs: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let mins: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
    let neg_mins: Vec<f64> = mins.iter().map(|x| -x).collect();
    let tops: Vec<f64> = per_rep.iter().map(|p| p.2).collect();
    let med_max = stats::median(&maxs);
    let med_min = stats::median(&mins);
    let exceed = tops.iter().filter(|x| x.abs() > tol.lil_exceed_level).count() as f64 / replicates as f64;
    let top_card = net.last().unwrap().product()? as f64;
    let mut rep = VerificationReport::new(
        claims::LIL,
        "limsup S_N/√(2dσ²[N]LogLog[N]) = 1, liminf = −1, N ∈ G_τ",
        json!({"model": model_json(model), "depth": depth, "tau": tau, "net_size": net.len(), "replicates": replicates, "seed": seed}),
    );
    rep.stat("median_max_r", med_max);
    rep.stat("median_min_r", med_min);
    rep.stat("exceedance_top", exceed);
    rep.stat("max_vs_neg_min_ks", two_sample_ks(&maxs, &neg_mins));
    rep.stat("var_r_top", stats::sample_variance(&tops));
    rep.oracle("var_r_top_clt", 1.0 / (2.0 * d as f64 * log_e(log_e(top_card))));
    rep.tol("max_band_lo", tol.lil_max_band.0);
    rep.tol("max_band_hi", tol.lil_max_band.1);
    rep.tol("min_band_lo", tol.lil_min_band.0);
    rep.tol("min_band_hi", tol.lil_min_band.1);
    rep.tol("exceedance_level", tol.lil_exceed_level);
    rep.tol("exceedance_max", tol.lil_exceed_max);
    for (n, sc) in net.iter().zip(&scale) {
        rep.row(n, "scale", *sc);
    }
    rep.pass = (tol.lil_max_band.0..=tol.lil_max_band.1).contains(&med_max)
        && (tol.lil_min_band.0..=tol.lil_min_band.1).contains(&med_min)
        && exceed <= tol.lil_exceed_max;
    Ok(rep.finish(start))
}

pub type Geometry = (Vec<MultiIndex>, Vec<MultiIndex>);

/// Randomised Lipschitz-pair check over several geometries; with `noise`, the field is
/// `X + Y` and the bound keeps the `theta` of `X`.
pub fn check_dependence(
    model: &FieldModel,
    geometries: &[Geometry],
    noise: Option<Noise>,
    trials: usize,
    replicates: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<VerificationReport> {
    let start = Instant::now();
    if geometries.is_empty() {
        return Err(Error::EmptySet);
    }
    let (id, formula) = match noise {
        None => (claims::DEPENDENCE, "|cov(f(X_I), g(X_J))| ≤ Lip(f)Lip(g)(|I|∧|J|)θ_r"),
        Some(_) => (claims::NOISE_STABILITY, "|cov(f(X_I+Y_I), g(X_J+Y_J))| ≤ Lip(f)Lip(g)(|I|∧|J|)θ_r(X)"),
    };
    let mut rep = VerificationReport::new(
        id,
        formula,
        json!({"model": model_json(model), "geometries": geometries, "noise": noise, "trials": trials, "replicates": replicates, "seed": seed}),
    );
    let mut pass = true;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for (g, (i, j)) in geometries.iter().enumerate() {
        let gseed = crate::rng::Stream::derive_seed(seed, g as u64);
        let r = match noise {
            None => fields::empirical_dependence_test(model, i, j, trials, replicates, gseed)?,
            Some(nz) => fields::noise_stability_test(model, nz, i, j, trials, replicates, gseed)?,
        };
        rep.row(g, "r", r.r as f64);
        rep.row(g, "theta_r", r.theta_r);
        rep.row(g, "max_ratio", r.max_ratio.unwrap_or(f64::NAN));
        rep.row(g, "max_ratio_se", r.max_ratio_se.unwrap_or(f64::NAN));
        let mut geometry_pass = true;
        for t in &r.trials {
            worst_excess = worst_excess.max((t.cov.abs() - t.bound) / t.se);
            geometry_pass &= t.cov.abs() <= t.bound + tol.se_mult * t.se;
        }
        rep.row(g, "pass", geometry_pass as u8 as f64);
        if let Some(m) = r.max_ratio {
            worst_ratio = worst_ratio.max(m);
        }
        pass &= geometry_pass;
    }
    rep.stat("max_ratio", worst_ratio);
    rep.stat("max_excess_in_se", worst_excess);
    rep.tol("excess_in_se_max", tol.se_mult);
    rep.pass = pass;
    Ok(rep.finish(start))
}

/// Monte Carlo `var(S_N)/[N]` against the exact value, and the exact approach to `sigma^2`.
pub fn check_variance_asymptotics(model: &FieldModel, ladder: &[MultiIndex], replicates: usize, seed: u64, tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    let s2 = fields::sigma2(model);
    let mut rep = VerificationReport::new(
        claims::VARIANCE_ASYMPTOTICS,
        "var(S_N) ∼ σ²[N]",
        json!({"model": model_json(model), "ladder": ladder, "replicates": replicates, "seed": seed}),
    );
    let mut pass = true;
    let mut gaps = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, n) in ladder.iter().enumerate() {
        let u = Block::origin(n.coords())?;
        let exact = sums::exact_variance(model, std::slice::from_ref(&u))? / u.cardinality()? as f64;
        let (est, se) = sums::variance_ratio(model, n, replicates, crate::rng::Stream::derive_seed(seed, i as u64))?;
        rep.row(n, "estimate", est);
        rep.row(n, "se", se);
        rep.row(n, "exact", exact);
        worst = worst.max((est - exact).abs() / se);
        pass &= (est - exact).abs() <= tol.se_mult * se;
        gaps.push((exact - s2).abs());
    }
    let approach = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    rep.stat("max_deviation_in_se", worst);
    rep.stat("exact_gap_nonincreasing", approach as u8 as f64);
    rep.oracle("sigma2", s2);
    rep.tol("deviation_in_se_max", tol.se_mult);
    rep.pass = pass && approach;
    Ok(rep.finish(start))
}

/// Exact `E S(U)^2 <= (D_2 + c_0)|U|` with `c_0 = max_r theta_r r^lambda`.
pub fn check_second_moment_bound(model: &FieldModel, lambda: f64, blocks: &[Block]) -> Result<VerificationReport> {
    let start = Instant::now();
    let d2 = fields::covariance(model, &MultiIndex::splat(model.dim(), 0));
    let c0 = (1..=model.covariance_range().max(1))
        .map(|r| fields::cox_grimmett(model, r) * (r as f64).powf(lambda))
        .fold(0.0, f64::max);
    let mut rep = VerificationReport::new(
        claims::SECOND_MOMENT,
        "E S²(U) ≤ (D₂ + c₀)|U|",
        json!({"model": model_json(model), "lambda": lambda, "blocks": blocks}),
    );
    let mut worst: f64 = 0.0;
    for (i, u) in blocks.iter().enumerate() {
        let v = sums::exact_variance(model, std::slice::from_ref(u))?;
        let ratio = v / ((d2 + c0) * u.cardinality()? as f64);
        rep.row(i, "ratio", ratio);
        worst = worst.max(ratio);
    }
    rep.stat("max_ratio", worst);
    rep.oracle("d2", d2);
    rep.oracle("c0", c0);
    rep.tol("max_ratio_max", 1.0 + 1e-12);
    rep.pass = worst <= 1.0 + 1e-12;
    Ok(rep.finish(start))
}

/// Exact neighbour sums `sum_{j != i} ||i - j||^{-nu}` over cubes against `f(|U|, d, nu)`:
/// their ratio must stay bounded as the cube grows.
pub fn check_neighbor_sum_bound(d: usize, nus: &[f64], sides: &[i64], tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    if sides.len() < 2 {
        return Err(Error::Domain("need at least two cube sides".into()));
    }
    let mut rep = VerificationReport::new(
        claims::NEIGHBOR_SUM,
        "Σ_{j∈U, j≠i} ‖i−j‖^{−ν} ≤ C f(|U|, d, ν)",
        json!({"d": d, "nu": nus, "sides": sides}),
    );
    let mut pass = true;
    let mut worst_growth: f64 = 0.0;
    for &nu in nus {
        let mut ratios = Vec::new();
        for &side in sides {
            let u = Block::cube(d, side)?;
            // worst site over the corner and the centre
            let corner = MultiIndex::splat(d, 1);
            let centre = MultiIndex::splat(d, (side + 1) / 2);
            let sum = lattice::neighbor_sum_oracle(&u, &corner, nu)?.max(lattice::neighbor_sum_oracle(&u, &centre, nu)?);
            let ratio = sum / lattice::neighbor_bound(u.cardinality()?, d, nu)?;
            rep.row(format!("nu={nu},side={side}"), "ratio", ratio);
            ratios.push(ratio);
        }
        let half = ratios.len() / 2;
        let small = ratios[..half.max(1)].iter().cloned().fold(0.0, f64::max);
        let large = ratios[half.max(1)..].iter().cloned().fold(0.0, f64::max);
        let growth = large / small;
        worst_growth = worst_growth.max(growth);
        pass &= growth <= tol.defect_ratio_max;
    }
    rep.stat("max_ratio_growth", worst_growth);
    rep.tol("ratio_growth_max", tol.defect_ratio_max);
    rep.pass = pass;
    Ok(rep.finish(start))
}

/// Exact `|sigma^2 - var(S(V))/|V|| sqrt(l(V))` over a growing family of unions.
pub fn check_variance_defect(model: &FieldModel, family: &[Vec<Block>], tol: &Tolerances) -> Result<VerificationReport> {
    let start = Instant::now();
    if family.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut rep = VerificationReport::new(
        claims::VARIANCE_DEFECT,
        "σ² − var(S(V))/|V| = O(l(V)^{−1/2})",
        json!({"model": model_json(model), "family": family}),
    );
    let mut scaled = Vec::new();
    for v in family {
        let l = sums::min_edge(v);
        let defect = sums::variance_defect(model, v)?;
        let s = defect.abs() * (l as f64).sqrt();
        rep.row(l, "defect", defect);
        rep.row(l, "scaled", s);
        scaled.push(s);
    }
    let first = scaled[0];
    let peak = scaled.iter().cloned().fold(0.0, f64::max);
    rep.stat("max_scaled", peak);
    rep.stat("first_scaled", first);
    rep.tol("max_over_first_max", tol.defect_ratio_max);
    rep.pass = peak <= tol.defect_ratio_max * first || peak == 0.0;
    Ok(rep.finish(start))
}

/// Coupling pipeline on one scheme: identity residual, Wiener exactness, normality of
/// `eta_k`, and decay of `E e_k^2 / |B_k|` across the blocks `(K, .., K)` for `K` in `depths`.
pub fn check_coupling_error_decay(
    model: &FieldModel,
    scheme: &BlockScheme,
    depths: &[u64],
    calibration: usize,
    replicates: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<VerificationReport> {
    let start = Instant::now();
    let setup = CouplingSetup::new(model, scheme, CdfMode::Empirical { replicates: calibration }, seed)?;
    let study = coupling::block_study(&setup, replicates, seed)?;
    let dkw = stats::dkw_bound(calibration.min(replicates), tol.dkw_alpha);
    let mut rep = VerificationReport::new(
        claims::COUPLING_ERROR,
        "E e_k² ≤ C[k]^{α−ε₀}, S(R_k) = Σe_i + Σ√|B_i|(√((σ_i²+τ_i²)/|B_i|) − σ)η_i + Σσ√|B_i|η_i − Σw_i + Σv_i",
        json!({"model": model_json(model), "scheme": {"alpha": scheme.params.alpha, "beta": scheme.params.beta, "tau": scheme.params.tau, "depth": scheme.depth, "d": scheme.d}, "depths": depths, "calibration": calibration, "replicates": replicates, "seed": seed}),
    );
    let mut worst_ks: f64 = 0.0;
    for s in &study.summaries {
        let key: Vec<String> = s.k.iter().map(u64::to_string).collect();
        let key = key.join(":");
        rep.row(&key, "size", s.size as f64);
        rep.row(&key, "mean_e2_per_size", s.mean_e2 / s.size as f64);
        rep.row(&key, "se_e2_per_size", s.se_e2 / s.size as f64);
        rep.row(&key, "eta_ks", s.eta_ks);
        worst_ks = worst_ks.max(s.eta_ks);
    }
    let d = scheme.d;
    let mut per_size = Vec::new();
    let mut sizes = Vec::new();
    let mut e2 = Vec::new();
    for &k in depths {
        let kk = vec![k; d];
        let s = study
            .summaries
            .iter()
            .find(|s| s.k == kk)
            .ok_or_else(|| Error::Domain(format!("block {kk:?} is not good at depth {}", scheme.depth)))?;
        per_size.push(s.mean_e2 / s.size as f64);
        sizes.push(s.size as f64);
        e2.push(s.mean_e2);
    }
    let strictly = per_size.windows(2).all(|w| w[1] < w[0]);
    let exponent = if e2.iter().all(|x| *x > 0.0) { stats::loglog_slope(&sizes, &e2) } else { f64::NAN };
    rep.stat("max_identity_residual", study.max_identity_residual);
    rep.stat("max_wiener_deviation", study.max_wiener_deviation);
    rep.stat("max_eta_ks", worst_ks);
    rep.stat("e2_per_size_strictly_decreasing", strictly as u8 as f64);
    rep.stat("e2_size_exponent", exponent);
    rep.stat("regions_checked", study.regions_checked as f64);
    rep.stat("regions_skipped", study.regions_skipped as f64);
    rep.oracle("dkw", dkw);
    rep.tol("identity_residual_max", tol.identity_residual_max);
    rep.tol("wiener_deviation_max", tol.wiener_deviation_max);
    rep.tol("eta_ks_max", tol.eta_ks_mult * dkw);
    rep.pass = study.max_identity_residual <= tol.identity_residual_max
        && study.max_wiener_deviation <= tol.wiener_deviation_max
        && worst_ks <= tol.eta_ks_mult * dkw
        && strictly;
    Ok(rep.finish(start))
}

/// Slope of `log median |S_N - sigma W_N|` against `log [N]` with a bootstrap interval;
/// passes when the upper end of the interval is below `1/2`.
pub fn check_approximation_error(
    model: &FieldModel,
    scheme: &BlockScheme,
    mode: CdfMode,
    depths: &[u64],
    replicates: usize,
    seed: u64,
    ci_level: f64,
    tol: &Tolerances,
) -> Result<VerificationReport> {
    let start = Instant::now();
    let setup = CouplingSetup::new(model, scheme, mode, seed)?;
    let a = coupling::approximation_error_study(&setup, depths, replicates, seed, ci_level)?;
    let mut rep = VerificationReport::new(
        claims::APPROXIMATION,
        "S_N − σW_N = O([N]^{1/2−ε}), N ∈ G_τ",
        json!({"model": model_json(model), "scheme": {"alpha": scheme.params.alpha, "beta": scheme.params.beta, "tau": scheme.params.tau, "depth": scheme.depth, "d": scheme.d}, "cdf": mode, "depths": depths, "replicates": replicates, "seed": seed, "ci_level": ci_level}),
    );
    for ((k, n), m) in a.depths.iter().zip(&a.sizes).zip(&a.medians) {
        rep.row(k, "size", *n);
        rep.row(k, "median_abs_error", *m);
    }
    rep.stat("slope", a.slope);
    rep.stat("ci_lo", a.ci.0);
    rep.stat("ci_hi", a.ci.1);
    rep.tol("ci_hi_max", tol.approximation_slope_max);
    rep.pass = a.ci.1 < tol.approximation_slope_max;
    Ok(rep.finish(start))
}

#[derive(Serialize, Deserialize)]
struct Timing {
    claim_id: String,
    seconds: f64,
}

fn csv_name(claim: &str, seen: &mut BTreeMap<String, usize>) -> String {
    let n = seen.entry(claim.to_string()).or_insert(0);
    *n += 1;
    if *n == 1 {
        format!("{claim}.csv")
    } else {
        format!("{claim}_{n}.csv")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, one CSV per report and `timings.json` into `dir`.
pub fn emit_report(reports: &[VerificationReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut sorted: Vec<&VerificationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
    let mut json = serde_json::to_string_pretty(&sorted)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    let mut seen = BTreeMap::new();
    for r in &sorted {
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(csv_name(&r.claim_id, &mut seen)))?);
        writeln!(out, "rung,statistic,value")?;
        for row in &r.table {
            writeln!(out, "\"{}\",{},{}", row.rung.replace('"', "\"\""), row.statistic, fmt_opt(row.value))?;
        }
        out.flush()?;
    }
    let timings: Vec<Timing> = sorted.iter().map(|r| Timing { claim_id: r.claim_id.clone(), seconds: r.seconds }).collect();
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(())
}

/// Reads back `report.json` (and wall times from `timings.json` when present).
pub fn load_reports(dir: &Path) -> Result<Vec<VerificationReport>> {
    let mut reports: Vec<VerificationReport> = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
    if let Ok(text) = std::fs::read_to_string(dir.join("timings.json")) {
        let timings: Vec<Timing> = serde_json::from_str(&text)?;
        for (r, t) in reports.iter_mut().zip(timings) {
            if r.claim_id == t.claim_id {
                r.seconds = t.seconds;
            }
        }
    }
    Ok(reports)
}
