//! Block scheme, Gaussian companions, quantile transform and an explicit Wiener grid.
//!
//! Boundaries `n_l = sum_{i<=l} (i^alpha + i^beta)` cut `(0, N_K]^d` into blocks
//! `B_k = (N_{k-1}, N_k]`. Each block holds a leading sub-block `H_k` of volume `[k]^alpha`;
//! the rest is `I_k`. With `u_k = S(H_k)`, `v_k = S(I_k)` and an independent companion
//! `w_k ~ N(0, tau_k^2)`, the standardised `xi_k` is pushed through its own CDF to an
//! (approximately) standard normal `eta_k`, and a Wiener grid is filled so that
//! `W(B_k) = sqrt|B_k| eta_k` on every good block.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{self, FieldModel, Innovation};
use crate::lattice::{self, Block, MultiIndex};
use crate::rng::{cell_counter, Stream, Tag};
use crate::stats;
use crate::sums::{self, SampleGrid};
use crate::theory::{self, SchemeParams};

/// Relative tolerance for the five-term identity.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Minimum number of values for an empirical CDF.
pub const MIN_CDF_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeBlock {
    /// 1-based block index.
    pub k: Vec<u64>,
    pub b: Block,
    pub h: Block,
    /// `I_k = B_k \ H_k` as disjoint blocks (empty when `H_k = B_k`).
    pub i_parts: Vec<Block>,
    pub good: bool,
}

/// `R_k = (M_k, N_k]` for a good block `k`, with `L_k` the block indices tiling it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Exclusive lower corner of `R_k`.
    pub m: Vec<i64>,
    /// Lowest point of `H` on the axis-`s` line through `N_k`, for each `s`.
    pub n_s: Vec<Vec<i64>>,
    pub r: Block,
    /// Flat indices of the blocks in `L_k`.
    pub members: Vec<usize>,
    /// Every member is good.
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScheme {
    pub params: SchemeParams,
    pub d: usize,
    pub depth: u64,
    /// `n_0, ..., n_K`.
    pub boundaries: Vec<i64>,
    /// Row-major over `{1..K}^d`, last axis fastest.
    pub blocks: Vec<SchemeBlock>,
    /// Indexed like `blocks`; `None` for blocks that are not good.
    pub regions: Vec<Option<Region>>,
}

/// Membership of the block in `G_rho`: all `2^d` extreme lattice points of `B` must lie in it.
fn block_in_g(b: &Block, rho: f64) -> Result<bool> {
    let d = b.dim();
    for mask in 0..(1usize << d) {
        let corner: Vec<i64> = (0..d)
            .map(|s| if mask >> s & 1 == 1 { b.upper().coords()[s] } else { b.lower().coords()[s] + 1 })
            .collect();
        if !lattice::in_g_tau(&MultiIndex::new(corner)?, rho)? {
            return Ok(false);
        }
    }
    Ok(true)
}

impl BlockScheme {
    pub fn build(params: &SchemeParams, depth: u64, d: usize) -> Result<Self> {
        SchemeParams::new(params.alpha, params.beta, params.tau, params.gamma0)?;
        if depth == 0 || d == 0 {
            return Err(Error::Domain(format!("depth {depth}, dimension {d}")));
        }
        let boundaries: Vec<i64> =
            (0..=depth).map(|l| theory::block_boundary(params.alpha, params.beta, l)).collect::<Result<_>>()?;
        let count = (depth as usize).checked_pow(d as u32).ok_or(Error::Overflow("block count"))?;
        let mut blocks = Vec::with_capacity(count);
        let mut k = vec![1u64; d];
        for _ in 0..count {
            let a: Vec<i64> = k.iter().map(|&ks| boundaries[ks as usize - 1]).collect();
            let b: Vec<i64> = k.iter().map(|&ks| boundaries[ks as usize]).collect();
            let hb: Vec<i64> = k
                .iter()
                .zip(&a)
                .map(|(&ks, &lo)| {
                    (ks as i64)
                        .checked_pow(params.alpha)
                        .and_then(|x| x.checked_add(lo))
                        .ok_or(Error::Overflow("H_k corner"))
                })
                .collect::<Result<_>>()?;
            let bb = Block::from_coords(&a, &b)?;
            let h = Block::from_coords(&a, &hb)?;
            let i_parts = bb.difference(&h)?;
            let good = block_in_g(&bb, params.rho)?;
            blocks.push(SchemeBlock { k: k.clone(), b: bb, h, i_parts, good });
            for s in (0..d).rev() {
                k[s] += 1;
                if k[s] <= depth {
                    break;
                }
                k[s] = 1;
            }
        }
        let mut scheme = BlockScheme { params: params.clone(), d, depth, boundaries, blocks, regions: Vec::new() };
        scheme.regions = (0..count).map(|i| scheme.region_of(i)).collect::<Result<_>>()?;
        Ok(scheme)
    }

    pub fn flat_index(&self, k: &[u64]) -> Result<usize> {
        lattice::check_dim(self.d, k.len())?;
        let mut idx = 0usize;
        for &ks in k {
            if ks < 1 || ks > self.depth {
                return Err(Error::Domain(format!("block index {k:?} at depth {}", self.depth)));
            }
            idx = idx * self.depth as usize + (ks as usize - 1);
        }
        Ok(idx)
    }

    /// The cube `(0, N_K]^d`.
    pub fn extent(&self) -> Block {
        Block::cube(self.d, self.boundaries[self.depth as usize]).expect("positive boundary")
    }

    /// `N_k` for a 1-based index.
    pub fn corner(&self, k: &[u64]) -> Vec<i64> {
        k.iter().map(|&ks| self.boundaries[ks as usize]).collect()
    }

    pub fn good_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.good).count()
    }

    /// Good blocks whose region contains a block that is not good.
    pub fn skipped_regions(&self) -> usize {
        self.regions.iter().flatten().filter(|r| !r.complete).count()
    }

    fn region_of(&self, idx: usize) -> Result<Option<Region>> {
        let blk = &self.blocks[idx];
        if !blk.good {
            return Ok(None);
        }
        let d = self.d;
        let mut lowest = vec![0u64; d];
        for s in 0..d {
            // smallest good index on the axis-s line of blocks through k
            let mut probe = blk.k.clone();
            let mut best = blk.k[s];
            for i in 1..=blk.k[s] {
                probe[s] = i;
                if self.blocks[self.flat_index(&probe)?].good {
                    best = i;
                    break;
                }
            }
            lowest[s] = best;
        }
        let n_k = self.corner(&blk.k);
        let m: Vec<i64> = lowest.iter().map(|&l| self.boundaries[l as usize - 1]).collect();
        let n_s: Vec<Vec<i64>> = (0..d)
            .map(|s| {
                let mut p = n_k.clone();
                p[s] = m[s] + 1;
                p
            })
            .collect();
        let r = Block::from_coords(&m, &n_k)?;
        let mut members = Vec::new();
        let mut complete = true;
        for (j, b) in self.blocks.iter().enumerate() {
            if (0..d).all(|s| b.k[s] >= lowest[s] && b.k[s] <= blk.k[s]) {
                members.push(j);
                complete &= self.blocks[j].good;
            }
        }
        Ok(Some(Region { m, n_s, r, members, complete }))
    }
}

/// Builds the scheme of depth `depth` in dimension `d`. `tau` overrides `params.tau`
/// (and hence `rho = tau / 8`).
pub fn build_scheme(params: &SchemeParams, depth: u64, d: usize, tau: f64) -> Result<BlockScheme> {
    let p = SchemeParams::new(params.alpha, params.beta, tau, params.gamma0)?;
    BlockScheme::build(&p, depth, d)
}

/// `(u_k, v_k)` for every block: `u_k = S(H_k)`, `v_k = S(B_k) - u_k`.
pub fn block_sums(grid: &SampleGrid, scheme: &BlockScheme) -> Result<Vec<(f64, f64)>> {
    scheme
        .blocks
        .iter()
        .map(|b| {
            let u = grid.partial_sum(&b.h)?;
            Ok((u, grid.partial_sum(&b.b)? - u))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockVariance {
    pub sigma2: f64,
    pub tau2: f64,
}

impl BlockVariance {
    pub fn usable(&self) -> bool {
        self.sigma2 > 0.0 && self.tau2 > 0.0
    }
}

/// Exact `sigma_k^2 = var(u_k)` and `tau_k^2 = var(v_k)` for every block.
pub fn variances(model: &FieldModel, scheme: &BlockScheme) -> Result<Vec<BlockVariance>> {
    lattice::check_dim(model.dim(), scheme.d)?;
    scheme
        .blocks
        .iter()
        .map(|b| {
            let sigma2 = sums::exact_variance(model, std::slice::from_ref(&b.h))?;
            if !(sigma2 > 0.0) {
                return Err(Error::Degenerate(format!("var(S(H_k)) = {sigma2} at k = {:?}", b.k)));
            }
            let tau2 = if b.i_parts.is_empty() { 0.0 } else { sums::exact_variance(model, &b.i_parts)? };
            Ok(BlockVariance { sigma2, tau2 })
        })
        .collect()
}

/// `xi = (u + w) / sqrt(sigma^2 + tau^2)`.
pub fn xi(u: f64, w: f64, sigma2: f64, tau2: f64) -> Result<f64> {
    let total = sigma2 + tau2;
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("sigma^2 + tau^2 = {total}")));
    }
    Ok((u + w) / total.sqrt())
}

/// Piecewise-linear empirical CDF through `(x_(i), (i - 1/2)/m)`, flat at
/// `1/(2m)` and `1 - 1/(2m)` outside the sample range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn estimate(values: &[f64]) -> Result<Self> {
        if values.len() < MIN_CDF_SAMPLES {
            return Err(Error::Domain(format!("{} values, need at least {MIN_CDF_SAMPLES}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite calibration value".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let m = self.sorted.len();
        let mf = m as f64;
        let lo = 0.5 / mf;
        if x <= self.sorted[0] {
            return lo;
        }
        if x >= self.sorted[m - 1] {
            return 1.0 - lo;
        }
        // first index with sorted[i] > x; then sorted[i-1] <= x < sorted[i]
        let i = self.sorted.partition_point(|&v| v <= x);
        let (x0, x1) = (self.sorted[i - 1], self.sorted[i]);
        let (p0, p1) = ((i as f64 - 0.5) / mf, (i as f64 + 0.5) / mf);
        p0 + (p1 - p0) * (x - x0) / (x1 - x0)
    }
}

/// CDF of `xi_k`: exactly standard normal, or estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cdf {
    StandardNormal,
    Empirical(EmpiricalCdf),
}

impl Cdf {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Cdf::StandardNormal => stats::phi(x),
            Cdf::Empirical(f) => f.eval(x),
        }
    }
}

/// `eta = Phi^{-1}(F(xi))`; the identity when `F = Phi`.
pub fn quantile_transform(xi: f64, cdf: &Cdf) -> f64 {
    match cdf {
        Cdf::StandardNormal => xi,
        Cdf::Empirical(f) => stats::phi_inv(f.eval(xi)),
    }
}

/// `e = sqrt(sigma^2 + tau^2) (xi - eta)`.
pub fn coupling_error(xi: f64, eta: f64, sigma2: f64, tau2: f64) -> f64 {
    (sigma2 + tau2).sqrt() * (xi - eta)
}

/// `(|t| ∧ y) sign(t)`.
pub fn truncate(t: f64, y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!("truncation level {y}")));
    }
    Ok(t.clamp(-y, y))
}

/// Unit-cell increments on `(0, N_K]^d`: i.i.d. `N(0,1)` outside good blocks and
/// `eta_i / sqrt|B_i| + zeta_j - mean(zeta)` inside good block `i`.
pub fn build_wiener(scheme: &BlockScheme, etas: &[Option<f64>], seed: u64, replicate: u64) -> Result<SampleGrid> {
    if etas.len() != scheme.blocks.len() {
        return Err(Error::Domain(format!("{} eta values for {} blocks", etas.len(), scheme.blocks.len())));
    }
    let stream = Stream::new(seed, Tag::Wiener, replicate);
    let extent = scheme.extent();
    let mut z: Vec<f64> = extent.points().map(|p| stream.normal_at(cell_counter(&p))).collect();
    let edges = extent.edges();
    let d = scheme.d;
    let offset = |p: &[i64]| -> usize {
        let mut o = 0usize;
        for s in 0..d {
            o = o * edges[s] as usize + (p[s] - 1) as usize;
        }
        o
    };
    for (b, eta) in scheme.blocks.iter().zip(etas) {
        if !b.good {
            continue;
        }
        let eta = eta.ok_or_else(|| Error::Domain(format!("missing eta for good block {:?}", b.k)))?;
        let card = b.b.cardinality()? as f64;
        let cells: Vec<usize> = b.b.points().map(|p| offset(&p)).collect();
        let mean = cells.iter().map(|&c| z[c]).sum::<f64>() / card;
        let level = eta / card.sqrt();
        for c in cells {
            z[c] = level + (z[c] - mean);
        }
    }
    SampleGrid::from_values(extent, z)
}

/// Per-block outcome of one coupling run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDraw {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub xi: f64,
    pub eta: f64,
    pub e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingRun {
    pub field: SampleGrid,
    pub wiener: SampleGrid,
    /// Indexed like the scheme's blocks; `Some` exactly for good blocks.
    pub draws: Vec<Option<BlockDraw>>,
    pub sigma: f64,
}

/// How `F_k` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMode {
    /// `F_k = Phi`; valid only for Gaussian models.
    Exact,
    /// Estimated per block from this many calibration replicates.
    Empirical { replicates: usize },
}

/// Everything in a coupling run that does not depend on the replicate.
#[derive(Clone, Debug)]
pub struct CouplingSetup {
    pub model: FieldModel,
    pub scheme: BlockScheme,
    pub variances: Vec<BlockVariance>,
    /// Indexed like blocks; `Some` for good blocks.
    pub cdfs: Vec<Option<Cdf>>,
    pub sigma: f64,
}

fn companion(seed: u64, replicate: u64, k: &[u64], tau2: f64) -> f64 {
    let key: Vec<i64> = k.iter().map(|&x| x as i64).collect();
    tau2.max(0.0).sqrt() * Stream::new(seed, Tag::Companion, replicate).normal_at(cell_counter(&key))
}

impl CouplingSetup {
    pub fn new(model: &FieldModel, scheme: &BlockScheme, mode: CdfMode, seed: u64) -> Result<Self> {
        let s2 = fields::sigma2(model);
        if !(s2 > 0.0) {
            return Err(Error::Degenerate(format!("sigma^2 = {s2}")));
        }
        let variances = variances(model, scheme)?;
        if let Some(b) = scheme.blocks.iter().zip(&variances).find(|(b, v)| b.good && !v.usable()) {
            return Err(Error::Degenerate(format!(
                "tau_k^2 = {} at good block {:?}; start the scheme above k0",
                b.1.tau2, b.0.k
            )));
        }
        let mut setup = CouplingSetup {
            model: model.clone(),
            scheme: scheme.clone(),
            variances,
            cdfs: vec![None; scheme.blocks.len()],
            sigma: s2.sqrt(),
        };
        match mode {
            CdfMode::Exact => {
                if model.innovation() != Innovation::Normal {
                    return Err(Error::Model("exact CDF needs Gaussian innovations".into()));
                }
                for (c, b) in setup.cdfs.iter_mut().zip(&scheme.blocks) {
                    if b.good {
                        *c = Some(Cdf::StandardNormal);
                    }
                }
            }
            CdfMode::Empirical { replicates } => {
                if replicates < MIN_CDF_SAMPLES {
                    return Err(Error::Domain(format!("{replicates} calibration replicates")));
                }
                let cal_seed = Stream::derive_seed(seed, Tag::Calibration as u64);
                let rows: Vec<Vec<f64>> = (0..replicates as u64)
                    .into_par_iter()
                    .map(|r| setup.xis(cal_seed, r))
                    .collect::<Result<_>>()?;
                for (j, b) in scheme.blocks.iter().enumerate() {
                    if b.good {
                        let col: Vec<f64> = rows.iter().map(|row| row[j]).collect();
                        setup.cdfs[j] = Some(Cdf::Empirical(EmpiricalCdf::estimate(&col)?));
                    }
                }
            }
        }
        Ok(setup)
    }

    /// `xi_k` for each block (NaN for blocks that are not good).
    fn xis(&self, seed: u64, replicate: u64) -> Result<Vec<f64>> {
        let grid = fields::sample(&self.model, &self.scheme.extent(), seed, replicate)?;
        let uv = block_sums(&grid, &self.scheme)?;
        self.scheme
            .blocks
            .iter()
            .zip(&self.variances)
            .zip(&uv)
            .map(|((b, var), (u, _))| {
                if !b.good {
                    return Ok(f64::NAN);
                }
                xi(*u, companion(seed, replicate, &b.k, var.tau2), var.sigma2, var.tau2)
            })
            .collect()
    }

    pub fn run(&self, seed: u64, replicate: u64) -> Result<CouplingRun> {
        let field = fields::sample(&self.model, &self.scheme.extent(), seed, replicate)?;
        let uv = block_sums(&field, &self.scheme)?;
        let mut draws = Vec::with_capacity(uv.len());
        for (j, b) in self.scheme.blocks.iter().enumerate() {
            if !b.good {
                draws.push(None);
                continue;
            }
            let var = self.variances[j];
            let (u, v) = uv[j];
            let w = companion(seed, replicate, &b.k, var.tau2);
            let x = xi(u, w, var.sigma2, var.tau2)?;
            let eta = quantile_transform(x, self.cdfs[j].as_ref().expect("cdf for good block"));
            draws.push(Some(BlockDraw { u, v, w, xi: x, eta, e: coupling_error(x, eta, var.sigma2, var.tau2) }));
        }
        let etas: Vec<Option<f64>> = draws.iter().map(|d| d.map(|x| x.eta)).collect();
        let wiener = build_wiener(&self.scheme, &etas, seed, replicate)?;
        Ok(CouplingRun { field, wiener, draws, sigma: self.sigma })
    }

    /// `S_N - sigma W_N` at `N = N_k`.
    pub fn approximation_error(&self, run: &CouplingRun, k: &[u64]) -> Result<f64> {
        let n = self.scheme.corner(k);
        Ok(run.field.prefix_at(&n)? - self.sigma * run.wiener.prefix_at(&n)?)
    }
}

/// The five sums of the decomposition of `S(R_k)` and the identity residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub terms: [f64; 5],
    pub s_r: f64,
    /// `|S(R_k) - sum terms| / max(|S(R_k)|, sum |terms|, 1)`.
    pub residual: f64,
}

pub fn decomposition_terms(setup: &CouplingSetup, run: &CouplingRun, k: &[u64]) -> Result<Decomposition> {
    let scheme = &setup.scheme;
    let idx = scheme.flat_index(k)?;
    let region = scheme.regions[idx]
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("block {k:?} is not good")))?;
    if !region.complete {
        return Err(Error::Domain(format!("region of {k:?} contains blocks that are not good")));
    }
    let mut t = [0.0; 5];
    for &i in &region.members {
        let d = run.draws[i].expect("good member");
        let var = setup.variances[i];
        let root = scheme.blocks[i].b.cardinality()? as f64;
        let root = root.sqrt();
        t[0] += d.e;
        t[1] += root * (((var.sigma2 + var.tau2) / (root * root)).sqrt() - run.sigma) * d.eta;
        t[2] += run.sigma * root * d.eta;
        t[3] -= d.w;
        t[4] += d.v;
    }
    let s_r = run.field.partial_sum(&region.r)?;
    let total: f64 = t.iter().sum();
    let scale = s_r.abs().max(t.iter().map(|x| x.abs()).sum()).max(1.0);
    let residual = (s_r - total).abs() / scale;
    if residual > IDENTITY_TOL {
        return Err(Error::Domain(format!("decomposition residual {residual:e} at {k:?}")));
    }
    Ok(Decomposition { terms: t, s_r, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMaxima {
    /// `S((0, c])` for the `2^d` corners `c` of `R_k` (bit `s` of the position selects `N_k`).
    pub corner_sums: Vec<f64>,
    /// `M_s(N_k) = max_{n <= N_k^{(s)}} |S_n|`, `s = 1..d`.
    pub m_s: Vec<f64>,
    /// `(J, M_k^{(J)})` for every nonempty `J`, as a bit mask over axes.
    pub m_j: Vec<(u32, f64)>,
}

/// Boundary maxima for good block `k`; `M_k^{(J)}` needs `k_s < K` on every axis.
pub fn boundary_maxima(grid: &SampleGrid, scheme: &BlockScheme, k: &[u64]) -> Result<BoundaryMaxima> {
    let idx = scheme.flat_index(k)?;
    let region = scheme.regions[idx]
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("block {k:?} is not good")))?;
    let d = scheme.d;
    let n_k = scheme.corner(k);
    let corner_sums = (0..(1u32 << d))
        .map(|mask| {
            let c: Vec<i64> = (0..d).map(|s| if mask >> s & 1 == 1 { n_k[s] } else { region.m[s] }).collect();
            if c.iter().any(|&x| x == 0) {
                Ok(sums::empty_sum())
            } else {
                grid.partial_sum(&Block::origin(&c)?)
            }
        })
        .collect::<Result<_>>()?;
    let m_s = region.n_s.iter().map(|p| grid.anchored_max(p)).collect::<Result<_>>()?;

    let mut m_j = Vec::new();
    if k.iter().all(|&ks| ks < scheme.depth) {
        for mask in 1u32..(1 << d) {
            // I^(J) = prod_{s in J} (n_{k_s}, N_s] x prod_{s not in J} (0, n_{k_s}]
            let lo: Vec<i64> = (0..d).map(|s| if mask >> s & 1 == 1 { n_k[s] } else { 0 }).collect();
            let ranges: Vec<(i64, i64)> = (0..d)
                .map(|s| {
                    if mask >> s & 1 == 1 {
                        (n_k[s] + 1, scheme.boundaries[k[s] as usize + 1])
                    } else {
                        (n_k[s], n_k[s])
                    }
                })
                .collect();
            let lo_pts: Vec<i64> = ranges.iter().map(|r| r.0 - 1).collect();
            let hi_pts: Vec<i64> = ranges.iter().map(|r| r.1).collect();
            let mut best: f64 = 0.0;
            for upper in Block::from_coords(&lo_pts, &hi_pts)?.points() {
                best = best.max(grid.partial_sum(&Block::from_coords(&lo, &upper)?)?.abs());
            }
            m_j.push((mask, best));
        }
    }
    Ok(BoundaryMaxima { corner_sums, m_s, m_j })
}

/// Per-block aggregates over many coupling runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub k: Vec<u64>,
    pub size: u64,
    pub sigma2: f64,
    pub tau2: f64,
    pub mean_e: f64,
    pub mean_e2: f64,
    pub se_e2: f64,
    /// Kolmogorov distance of the `eta_k` sample to `Phi`.
    pub eta_ks: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStudy {
    pub replicates: usize,
    pub summaries: Vec<BlockSummary>,
    /// Largest relative residual of the five-term identity over all runs and regions.
    pub max_identity_residual: f64,
    /// Largest `|W(B_i)/sqrt|B_i| - eta_i|` over all runs and good blocks.
    pub max_wiener_deviation: f64,
    pub regions_checked: usize,
    pub regions_skipped: usize,
}

/// Runs `replicates` fresh couplings and summarises each good block.
pub fn block_study(setup: &CouplingSetup, replicates: usize, seed: u64) -> Result<BlockStudy> {
    let scheme = &setup.scheme;
    let good: Vec<usize> = (0..scheme.blocks.len()).filter(|&j| scheme.blocks[j].good).collect();
    let complete: Vec<usize> = good.iter().copied().filter(|&j| scheme.regions[j].as_ref().unwrap().complete).collect();
    struct Rep {
        draws: Vec<BlockDraw>,
        residual: f64,
        deviation: f64,
    }
    let reps: Vec<Rep> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let run = setup.run(seed, r)?;
            let mut residual: f64 = 0.0;
            for &j in &complete {
                residual = residual.max(decomposition_terms(setup, &run, &scheme.blocks[j].k)?.residual);
            }
            let mut deviation: f64 = 0.0;
            let mut draws = Vec::with_capacity(good.len());
            for &j in &good {
                let b = &scheme.blocks[j].b;
                let d = run.draws[j].expect("good block");
                let w = run.wiener.partial_sum(b)? / (b.cardinality()? as f64).sqrt();
                deviation = deviation.max((w - d.eta).abs());
                draws.push(d);
            }
            Ok(Rep { draws, residual, deviation })
        })
        .collect::<Result<_>>()?;

    let summaries = good
        .iter()
        .enumerate()
        .map(|(g, &j)| {
            let es: Vec<f64> = reps.iter().map(|r| r.draws[g].e).collect();
            let e2: Vec<f64> = es.iter().map(|e| e * e).collect();
            let etas: Vec<f64> = reps.iter().map(|r| r.draws[g].eta).collect();
            let (mean_e2, se_e2) = stats::mean_se(&e2);
            Ok(BlockSummary {
                k: scheme.blocks[j].k.clone(),
                size: scheme.blocks[j].b.cardinality()?,
                sigma2: setup.variances[j].sigma2,
                tau2: setup.variances[j].tau2,
                mean_e: stats::mean_se(&es).0,
                mean_e2,
                se_e2,
                eta_ks: stats::ks_distance(&etas, stats::phi),
            })
        })
        .collect::<Result<_>>()?;
    Ok(BlockStudy {
        replicates,
        summaries,
        max_identity_residual: reps.iter().map(|r| r.residual).fold(0.0, f64::max),
        max_wiener_deviation: reps.iter().map(|r| r.deviation).fold(0.0, f64::max),
        regions_checked: complete.len(),
        regions_skipped: scheme.skipped_regions(),
    })
}

/// One CSV row per good block.
pub fn write_summary_csv(study: &BlockStudy, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "k,size,sigma2,tau2,mean_e,mean_e2,se_e2,eta_ks")?;
    for s in &study.summaries {
        let k: Vec<String> = s.k.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            k.join(":"),
            s.size,
            s.sigma2,
            s.tau2,
            s.mean_e,
            s.mean_e2,
            s.se_e2,
            s.eta_ks
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub depths: Vec<u64>,
    /// `[N_K]` for each depth.
    pub sizes: Vec<f64>,
    /// Median `|S_N - sigma W_N|` at `N = N_K`.
    pub medians: Vec<f64>,
    pub slope: f64,
    pub ci_level: f64,
    pub ci: (f64, f64),
    pub replicates: usize,
}

/// Bootstrap resamples used for the slope interval.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Errors `S_N - sigma W_N` at the diagonal corners `N_K`, `K` in `depths`, from one
/// coupling of the deepest scheme per replicate; `result[r][i]` belongs to `depths[i]`.
pub fn approximation_errors(setup: &CouplingSetup, depths: &[u64], replicates: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = setup.scheme.d;
    for &k in depths {
        if k == 0 || k > setup.scheme.depth {
            return Err(Error::Domain(format!("depth {k} outside 1..={}", setup.scheme.depth)));
        }
    }
    (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let run = setup.run(seed, r)?;
            depths.iter().map(|&k| setup.approximation_error(&run, &vec![k; d])).collect()
        })
        .collect()
}

/// Regression of `log median |S_N - sigma W_N|` on `log [N]` over the diagonal corners
/// `N_K` in `G_tau`, with a percentile bootstrap interval over replicates.
pub fn approximation_error_study(
    setup: &CouplingSetup,
    depths: &[u64],
    replicates: usize,
    seed: u64,
    ci_level: f64,
) -> Result<ApproximationReport> {
    let d = setup.scheme.d;
    let tau = setup.scheme.params.tau;
    let mut kept = Vec::new();
    for &k in depths {
        let corner = MultiIndex::new(setup.scheme.corner(&vec![k; d]))?;
        if lattice::in_g_tau(&corner, tau)? {
            kept.push(k);
        }
    }
    if kept.len() < 2 {
        return Err(Error::Domain("fewer than two depths with N_K in G_tau".into()));
    }
    if replicates < 2 {
        return Err(Error::Domain(format!("{replicates} replicates")));
    }
    let errors = approximation_errors(setup, &kept, replicates, seed)?;
    let sizes: Vec<f64> = kept
        .iter()
        .map(|&k| (setup.scheme.boundaries[k as usize] as f64).powi(d as i32))
        .collect();
    let medians_of = |rows: &[usize]| -> Vec<f64> {
        (0..kept.len())
            .map(|i| stats::median(&rows.iter().map(|&r| errors[r][i].abs()).collect::<Vec<_>>()))
            .collect()
    };
    let all: Vec<usize> = (0..replicates).collect();
    let medians = medians_of(&all);
    let slope = stats::loglog_slope(&sizes, &medians);
    let ci = stats::bootstrap_interval(replicates, BOOTSTRAP_RESAMPLES, ci_level, Stream::derive_seed(seed, 0xB007), |idx| {
        stats::loglog_slope(&sizes, &medians_of(idx))
    });
    Ok(ApproximationReport { depths: kept, sizes, medians, slope, ci_level, ci, replicates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(tau: f64) -> SchemeParams {
        SchemeParams::new(3, 2, tau, 1.0).unwrap()
    }

    fn ma_half() -> FieldModel {
        FieldModel::linear_ma(1, vec![(vec![0], 1.0), (vec![1], -0.5)], Innovation::Normal).unwrap()
    }

    #[test]
    fn scheme_geometry_d1() {
        let s = build_scheme(&params(1.0), 4, 1, 1.0).unwrap();
        assert_eq!(s.boundaries, vec![0, 2, 14, 50, 130]);
        assert_eq!(s.good_count(), 4);
        for b in &s.blocks {
            let k = b.k[0] as u64;
            assert_eq!(b.h.cardinality().unwrap(), k.pow(3));
            let i_card: u64 = b.i_parts.iter().map(|p| p.cardinality().unwrap()).sum();
            assert_eq!(i_card + k.pow(3), b.b.cardinality().unwrap());
        }
        let r = s.regions[3].as_ref().unwrap();
        assert_eq!(r.r, Block::from_coords(&[0], &[130]).unwrap());
        assert_eq!(r.members, vec![0, 1, 2, 3]);
        assert!(r.complete);
        assert_eq!(s.skipped_regions(), 0);
    }

    #[test]
    fn scheme_geometry_d2_partitions_and_goodness() {
        let s = build_scheme(&params(1.0), 5, 2, 1.0).unwrap();
        let total: u64 = s.blocks.iter().map(|b| b.b.cardinality().unwrap()).sum();
        assert_eq!(total, s.extent().cardinality().unwrap());
        for (i, a) in s.blocks.iter().enumerate() {
            for b in &s.blocks[i + 1..] {
                assert!(a.b.is_disjoint(&b.b));
            }
            assert_eq!(a.h.cardinality().unwrap(), (a.k[0] * a.k[1]).pow(3));
            // goodness by all corners
            let all_in = a.b.points().all(|p| lattice::in_g_tau(&MultiIndex::from(p), 1.0 / 8.0).unwrap());
            if all_in {
                assert!(a.good);
            }
        }
        // far off the diagonal the cone condition fails
        assert!(!s.blocks[s.flat_index(&[1, 5]).unwrap()].good);
        assert!(s.blocks[s.flat_index(&[5, 5]).unwrap()].good);
        for (j, r) in s.regions.iter().enumerate() {
            let Some(r) = r else { continue };
            // members tile R_k exactly
            let vol: u64 = r.members.iter().map(|&m| s.blocks[m].b.cardinality().unwrap()).sum();
            assert_eq!(vol, r.r.cardinality().unwrap());
            assert!(r.members.contains(&j));
        }
    }

    #[test]
    fn variance_examples() {
        let s = build_scheme(&params(1.0), 5, 1, 1.0).unwrap();
        let iid = FieldModel::iid(1, Innovation::Normal);
        for (b, v) in s.blocks.iter().zip(variances(&iid, &s).unwrap()) {
            assert_eq!(v.sigma2, b.h.cardinality().unwrap() as f64);
            let ic: u64 = b.i_parts.iter().map(|p| p.cardinality().unwrap()).sum();
            assert_eq!(v.tau2, ic as f64);
        }
        // H-type interval of length 10: 0.25 * 10 + 1
        let m = ma_half();
        let h = Block::from_coords(&[0], &[10]).unwrap();
        assert!((sums::exact_variance(&m, &[h]).unwrap() - 3.5).abs() < 1e-12);
        let ratios: Vec<f64> = [10i64, 100, 1000]
            .iter()
            .map(|&l| sums::exact_variance(&m, &[Block::from_coords(&[0], &[l]).unwrap()]).unwrap() / l as f64 - 0.25)
            .collect();
        assert!(ratios.windows(2).all(|w| w[1].abs() < w[0].abs()));
    }

    #[test]
    fn xi_and_truncation() {
        assert_eq!(xi(0.0, 0.0, 1.0, 2.0).unwrap(), 0.0);
        assert!(xi(1.0, 0.0, 0.0, 0.0).is_err());
        assert_eq!(truncate(-3.0, 2.0).unwrap(), -2.0);
        assert_eq!(truncate(1.5, 2.0).unwrap(), 1.5);
        assert_eq!(truncate(0.0, 0.1).unwrap(), 0.0);
        assert!(truncate(1.0, 0.0).is_err());
    }

    #[test]
    fn empirical_cdf_properties() {
        assert!(EmpiricalCdf::estimate(&[0.0; 99]).is_err());
        let m = 1000;
        let s = Stream::new(2, Tag::Calibration, 0);
        let xs: Vec<f64> = (0..m).map(|i| s.normal_at(i)).collect();
        let f = EmpiricalCdf::estimate(&xs).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((f.eval(sorted[m as usize / 2 - 1]) - 0.5).abs() <= 1.0 / m as f64);
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 / 100.0).collect();
        assert!(grid.windows(2).all(|w| f.eval(w[0]) <= f.eval(w[1])));
        assert_eq!(f.eval(-100.0), 0.5 / m as f64);
        assert_eq!(f.eval(100.0), 1.0 - 0.5 / m as f64);
        let sup = grid.iter().map(|&x| (f.eval(x) - stats::phi(x)).abs()).fold(0.0, f64::max);
        assert!(sup <= stats::dkw_bound(m as usize, 0.01) + 1.0 / m as f64);
        assert!(quantile_transform(100.0, &Cdf::Empirical(f)).is_finite());
        assert_eq!(quantile_transform(0.7, &Cdf::StandardNormal), 0.7);
        assert_eq!(coupling_error(0.7, 0.7, 2.0, 3.0), 0.0);
    }

    #[test]
    fn wiener_bridge_fill() {
        let s = build_scheme(&params(1.0), 4, 1, 1.0).unwrap();
        let etas: Vec<Option<f64>> = vec![Some(0.3), Some(-1.2), Some(2.0), Some(0.0)];
        let w = build_wiener(&s, &etas, 5, 0).unwrap();
        for (b, eta) in s.blocks.iter().zip(&etas) {
            let val = w.partial_sum(&b.b).unwrap() / (b.b.cardinality().unwrap() as f64).sqrt();
            assert!((val - eta.unwrap()).abs() < 1e-12);
        }
        assert!(build_wiener(&s, &[Some(0.0), None, Some(0.0), Some(0.0)], 5, 0).is_err());
        assert!(build_wiener(&s, &etas[..3], 5, 0).is_err());
    }

    #[test]
    fn wiener_cells_are_white_with_normal_eta() {
        // eta ~ N(0,1): cell variance 1/|B| + (1 - 1/|B|) = 1, within-block covariance 0
        let s = build_scheme(&params(1.0), 2, 1, 1.0).unwrap();
        let reps = 40_000u64;
        let rows: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let eta = Stream::new(77, Tag::Calibration, r).normal_at(0);
                let w = build_wiener(&s, &[Some(eta), Some(-eta)], 77, r).unwrap();
                w.values().to_vec()
            })
            .collect();
        for (a, b) in [(2, 2), (3, 9), (0, 1), (5, 13)] {
            let prods: Vec<f64> = rows.iter().map(|x| x[a] * x[b]).collect();
            let (m, se) = stats::mean_se(&prods);
            let target = if a == b { 1.0 } else { 0.0 };
            assert!((m - target).abs() < 4.0 * se, "cells {a},{b}: {m}");
        }
    }

    #[test]
    fn wiener_outside_good_blocks_is_white() {
        let s = build_scheme(&params(1.0), 3, 2, 1.0).unwrap();
        let bad = s.blocks.iter().position(|b| !b.good).expect("a block outside the cone");
        let cells: Vec<Vec<i64>> = s.blocks[bad].b.points().take(2).collect();
        let etas: Vec<Option<f64>> = s.blocks.iter().map(|b| b.good.then_some(0.5)).collect();
        let prods: Vec<f64> = (0..10_000u64)
            .into_par_iter()
            .map(|r| {
                let w = build_wiener(&s, &etas, 3, r).unwrap();
                w.value(&cells[0]).unwrap() * w.value(&cells[1]).unwrap()
            })
            .collect();
        let (m, se) = stats::mean_se(&prods);
        assert!(m.abs() < 3.0 * se);
    }

    #[test]
    fn decomposition_identity_and_exact_cdf() {
        let s = build_scheme(&params(1.0), 4, 1, 1.0).unwrap();
        let iid = FieldModel::iid(1, Innovation::Normal);
        let setup = CouplingSetup::new(&iid, &s, CdfMode::Exact, 9).unwrap();
        let run = setup.run(9, 0).unwrap();
        for k in 1..=4u64 {
            let dec = decomposition_terms(&setup, &run, &[k]).unwrap();
            assert!(dec.residual <= IDENTITY_TOL);
            assert!(dec.terms[0].abs() < 1e-9);
        }
        // single-block region
        let one = decomposition_terms(&setup, &run, &[1]).unwrap();
        let d = run.draws[0].unwrap();
        assert!((one.s_r - (d.u + d.v)).abs() < 1e-12);

        let m = FieldModel::linear_ma(1, vec![(vec![0], 1.0), (vec![1], 0.5)], Innovation::Exponential).unwrap();
        assert!(CouplingSetup::new(&m, &s, CdfMode::Exact, 1).is_err());
        let setup = CouplingSetup::new(&m, &s, CdfMode::Empirical { replicates: 500 }, 1).unwrap();
        let run = setup.run(1, 3).unwrap();
        for k in 1..=4u64 {
            assert!(decomposition_terms(&setup, &run, &[k]).unwrap().residual <= IDENTITY_TOL);
        }
        let zero = FieldModel::linear_ma(1, vec![(vec![0], 1.0), (vec![1], -1.0)], Innovation::Normal).unwrap();
        assert!(matches!(CouplingSetup::new(&zero, &s, CdfMode::Exact, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn decomposition_in_two_dimensions() {
        let s = build_scheme(&params(1.0), 3, 2, 1.0).unwrap();
        let m = FieldModel::linear_ma(2, vec![(vec![0, 0], 1.0), (vec![1, 0], 0.4)], Innovation::Normal).unwrap();
        let setup = CouplingSetup::new(&m, &s, CdfMode::Exact, 4).unwrap();
        let run = setup.run(4, 1).unwrap();
        let mut checked = 0;
        for b in &s.blocks {
            if let Some(r) = &s.regions[s.flat_index(&b.k).unwrap()] {
                if r.complete {
                    assert!(decomposition_terms(&setup, &run, &b.k).unwrap().residual <= IDENTITY_TOL);
                    checked += 1;
                } else {
                    assert!(decomposition_terms(&setup, &run, &b.k).is_err());
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn block_sums_partition() {
        let s = build_scheme(&params(1.0), 3, 2, 1.0).unwrap();
        let g = fields::sample(&FieldModel::iid(2, Innovation::Normal), &s.extent(), 1, 0).unwrap();
        let uv = block_sums(&g, &s).unwrap();
        let total: f64 = uv.iter().map(|(u, v)| u + v).sum();
        assert!((total - g.partial_sum(g.base()).unwrap()).abs() < 1e-9);
        for ((u, v), b) in uv.iter().zip(&s.blocks) {
            assert!((u + v - g.partial_sum(&b.b).unwrap()).abs() < 1e-12);
        }
        let small = fields::sample(&FieldModel::iid(2, Innovation::Normal), &Block::cube(2, 3).unwrap(), 1, 0).unwrap();
        assert!(block_sums(&small, &s).is_err());
    }

    #[test]
    fn iid_head_sums_have_head_variance() {
        let s = build_scheme(&params(1.0), 3, 1, 1.0).unwrap();
        let iid = FieldModel::iid(1, Innovation::Rademacher);
        let us: Vec<f64> = (0..20_000u64)
            .into_par_iter()
            .map(|r| block_sums(&fields::sample(&iid, &s.extent(), 2, r).unwrap(), &s).unwrap()[2].0)
            .collect();
        let (v, se) = stats::variance_jackknife(&us);
        assert!((v - 27.0).abs() < 3.0 * se);
    }

    #[test]
    fn xi_is_standardised_and_normal_for_gaussian_models() {
        let s = build_scheme(&params(1.0), 3, 1, 1.0).unwrap();
        let m = ma_half();
        let setup = CouplingSetup::new(&m, &s, CdfMode::Exact, 6).unwrap();
        let xs: Vec<f64> = (0..10_000u64).into_par_iter().map(|r| setup.run(6, r).unwrap().draws[2].unwrap().xi).collect();
        let (v, se) = stats::variance_jackknife(&xs);
        assert!((v - 1.0).abs() < 3.0 * se);
        assert!(stats::ks_distance(&xs, stats::phi) <= stats::dkw_bound(xs.len(), 0.01));
    }

    #[test]
    fn boundary_maxima_examples() {
        let s = build_scheme(&params(1.0), 4, 1, 1.0).unwrap();
        let pos = SampleGrid::from_fn(s.extent(), |p| 0.1 + (p[0] % 3) as f64).unwrap();
        let bm = boundary_maxima(&pos, &s, &[2]).unwrap();
        // R_2 = (0, 14]: M_1 looks at n <= 1
        assert_eq!(bm.m_s, vec![pos.anchored_max(&[1]).unwrap()]);
        assert_eq!(bm.corner_sums, vec![0.0, pos.prefix_at(&[14]).unwrap()]);
        // nonnegative values: the anchored max is the corner sum, and M^(J) is the full tail
        assert_eq!(bm.m_j.len(), 1);
        assert!((bm.m_j[0].1 - pos.partial_sum(&Block::from_coords(&[14], &[50]).unwrap()).unwrap()).abs() < 1e-9);
        assert!((pos.anchored_max(&[50]).unwrap() - pos.prefix_at(&[50]).unwrap()).abs() < 1e-12);
        assert!(boundary_maxima(&pos, &s, &[4]).unwrap().m_j.is_empty());

        let s2 = build_scheme(&params(1.0), 4, 2, 1.0).unwrap();
        let g = fields::sample(&FieldModel::iid(2, Innovation::Normal), &s2.extent(), 3, 0).unwrap();
        let k = [3u64, 3];
        let bm = boundary_maxima(&g, &s2, &k).unwrap();
        assert_eq!(bm.m_j.len(), 3);
        let cap = g.max_sub_block(&Block::cube(2, s2.boundaries[4]).unwrap());
        let cap = cap.unwrap();
        assert!(bm.m_j.iter().all(|(_, m)| *m <= cap + 1e-9));
    }

    #[test]
    fn block_study_iid_exact() {
        let s = build_scheme(&params(1.0), 4, 1, 1.0).unwrap();
        let setup = CouplingSetup::new(&FieldModel::iid(1, Innovation::Normal), &s, CdfMode::Exact, 2).unwrap();
        let st = block_study(&setup, 300, 2).unwrap();
        assert!(st.max_identity_residual <= IDENTITY_TOL);
        assert!(st.max_wiener_deviation < 1e-12);
        assert!(st.summaries.iter().all(|b| b.mean_e2 == 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blocks.csv");
        write_summary_csv(&st, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn approximation_study_is_reproducible() {
        let s = build_scheme(&params(1.0), 8, 1, 1.0).unwrap();
        let setup = CouplingSetup::new(&FieldModel::iid(1, Innovation::Normal), &s, CdfMode::Exact, 5).unwrap();
        let a = approximation_error_study(&setup, &[2, 4, 6, 8], 60, 5, 0.9).unwrap();
        let b = approximation_error_study(&setup, &[2, 4, 6, 8], 60, 5, 0.9).unwrap();
        assert_eq!(a, b);
        assert!(a.medians.iter().all(|m| m.is_finite() && *m > 0.0));
        assert!(a.ci.0 <= a.slope && a.slope <= a.ci.1);
        let wide = approximation_error_study(&setup, &[2, 4, 6, 8], 240, 5, 0.9).unwrap();
        assert!(wide.ci.1 - wide.ci.0 < a.ci.1 - a.ci.0);
        // e = 0, so the error is the sum of v_i - w_i
        let errs = approximation_errors(&setup, &[3], 1, 5).unwrap();
        let run = setup.run(5, 0).unwrap();
        let direct: f64 = run.draws[..3].iter().map(|d| d.unwrap().v - d.unwrap().w).sum();
        assert!((errs[0][0] - direct).abs() < 1e-9);
    }
}
