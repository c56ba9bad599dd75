//! Partial-sum engine over realised fields.
//!
//! A [`SampleGrid`] stores the values of one realisation on a base block together with
//! a `d`-dimensional prefix array `P(n) = S((a, n])`, `a <= n <= b`, which is zero on the
//! lower boundary. Rectangle sums then cost `2^d` lookups.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{self, FieldModel};
use crate::lattice::{self, Block, MultiIndex};
use crate::stats;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    base: Block,
    extents: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
    pstrides: Vec<usize>,
    prefix: Vec<f64>,
}

fn row_major_strides(extents: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; extents.len()];
    for s in (0..extents.len().saturating_sub(1)).rev() {
        strides[s] = strides[s + 1] * extents[s + 1];
    }
    strides
}

impl SampleGrid {
    /// Builds a grid from row-major values (last axis fastest).
    pub fn from_values(base: Block, values: Vec<f64>) -> Result<Self> {
        let extents: Vec<usize> = base.edges().iter().map(|&l| l as usize).collect();
        let card = base.cardinality()? as usize;
        if values.len() != card {
            return Err(Error::InvalidBlock(format!(
                "{} values for a block of {card} cells",
                values.len()
            )));
        }
        let strides = row_major_strides(&extents);
        let pext: Vec<usize> = extents.iter().map(|l| l + 1).collect();
        let pstrides = row_major_strides(&pext);
        let mut prefix = vec![0.0; pext.iter().product()];

        // scatter values to offset +1 on every axis
        let d = extents.len();
        let mut idx = vec![0usize; d];
        for &v in &values {
            let p: usize = idx.iter().zip(&pstrides).map(|(i, st)| (i + 1) * st).sum();
            prefix[p] = v;
            for s in (0..d).rev() {
                idx[s] += 1;
                if idx[s] < extents[s] {
                    break;
                }
                idx[s] = 0;
            }
        }

        // compensated running sums along each axis in turn
        for axis in 0..d {
            let len = pext[axis];
            let step = pstrides[axis];
            let lines = prefix.len() / len;
            for line in 0..lines {
                // decompose the line index into the start offset with coordinate 0 on `axis`
                let outer = line / step;
                let inner = line % step;
                let start = outer * step * len + inner;
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for k in 1..len {
                    let x = prefix[start + k * step];
                    let t = sum + x;
                    if sum.abs() >= x.abs() {
                        comp += (sum - t) + x;
                    } else {
                        comp += (x - t) + sum;
                    }
                    sum = t;
                    prefix[start + k * step] = sum + comp;
                }
            }
        }

        Ok(SampleGrid { base, extents, strides, values, pstrides, prefix })
    }

    /// Builds a grid by evaluating `f` at every lattice point of `base`.
    pub fn from_fn<F: FnMut(&[i64]) -> f64>(base: Block, mut f: F) -> Result<Self> {
        let values: Vec<f64> = base.points().map(|p| f(&p)).collect();
        SampleGrid::from_values(base, values)
    }

    pub fn base(&self) -> &Block {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, j: &[i64]) -> Result<f64> {
        if !self.base.contains_point(j) {
            return Err(Error::NotContained(format!("{j:?}")));
        }
        let a = self.base.lower().coords();
        Ok(self.values[(0..j.len()).map(|s| (j[s] - a[s] - 1) as usize * self.strides[s]).sum::<usize>()])
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    /// `P(n) = S((a, n])` for a corner `a <= n <= b` given in array coordinates `n - a`.
    #[inline]
    fn prefix_rel(&self, rel: &[usize]) -> f64 {
        self.prefix[rel.iter().zip(&self.pstrides).map(|(r, st)| r * st).sum::<usize>()]
    }

    /// `S((a, n])` for `a <= n <= b` (zero when some `n_s = a_s`).
    pub fn prefix_at(&self, n: &[i64]) -> Result<f64> {
        let a = self.base.lower().coords();
        let b = self.base.upper().coords();
        if n.len() != a.len() || (0..n.len()).any(|s| n[s] < a[s] || n[s] > b[s]) {
            return Err(Error::NotContained(format!("corner {n:?}")));
        }
        let rel: Vec<usize> = (0..n.len()).map(|s| (n[s] - a[s]) as usize).collect();
        Ok(self.prefix_rel(&rel))
    }

    fn check_inside(&self, w: &Block) -> Result<()> {
        if self.base.contains_block(w) {
            Ok(())
        } else {
            Err(Error::NotContained(format!("{w} in {}", self.base)))
        }
    }

    /// `S(W)` by signed `2^d`-corner inclusion–exclusion.
    pub fn partial_sum(&self, w: &Block) -> Result<f64> {
        self.check_inside(w)?;
        let d = self.dim();
        let a = self.base.lower().coords();
        let lo: Vec<usize> = (0..d).map(|s| (w.lower().coords()[s] - a[s]) as usize).collect();
        let hi: Vec<usize> = (0..d).map(|s| (w.upper().coords()[s] - a[s]) as usize).collect();
        let mut total = 0.0;
        for mask in 0..(1usize << d) {
            let mut off = 0;
            let mut lows = 0;
            for s in 0..d {
                if mask >> s & 1 == 1 {
                    off += hi[s] * self.pstrides[s];
                } else {
                    off += lo[s] * self.pstrides[s];
                    lows += 1;
                }
            }
            let v = self.prefix[off];
            total += if lows % 2 == 0 { v } else { -v };
        }
        Ok(total)
    }

    /// `S` over a finite union of disjoint blocks.
    pub fn union_sum(&self, parts: &[Block]) -> Result<f64> {
        parts.iter().map(|p| self.partial_sum(p)).sum()
    }

    /// `S(W)` by direct summation of the stored values.
    pub fn direct_sum(&self, w: &Block) -> Result<f64> {
        self.check_inside(w)?;
        let mut total = 0.0;
        for p in w.points() {
            total += self.value(&p)?;
        }
        Ok(total)
    }

    /// `M(V) = max |S(W)|` over all sub-blocks `W` of `V`.
    ///
    /// Pairs of cut positions are enumerated on the first `d - 1` axes; along the last
    /// axis the best interval is `max Q - min Q` of the reduced prefix sequence `Q`.
    /// Cost: `O(prod_{s<d} l_s^2 * l_d * 2^{d-1})`.
    pub fn max_sub_block(&self, v: &Block) -> Result<f64> {
        self.check_inside(v)?;
        let d = self.dim();
        let a = self.base.lower().coords();
        let lo: Vec<usize> = (0..d).map(|s| (v.lower().coords()[s] - a[s]) as usize).collect();
        let hi: Vec<usize> = (0..d).map(|s| (v.upper().coords()[s] - a[s]) as usize).collect();
        let last = d - 1;
        let outer_masks = 1usize << last;

        // current pair (p_s < q_s) on each outer axis
        let mut cuts: Vec<(usize, usize)> = (0..last).map(|s| (lo[s], lo[s] + 1)).collect();
        let mut best: f64 = 0.0;
        let mut offsets = vec![(0usize, false); outer_masks];
        loop {
            for (mask, slot) in offsets.iter_mut().enumerate() {
                let mut off = 0;
                let mut lows = 0;
                for (s, &(p, q)) in cuts.iter().enumerate() {
                    if mask >> s & 1 == 1 {
                        off += q * self.pstrides[s];
                    } else {
                        off += p * self.pstrides[s];
                        lows += 1;
                    }
                }
                *slot = (off, lows % 2 == 1);
            }
            let (mut qmax, mut qmin) = (f64::NEG_INFINITY, f64::INFINITY);
            let step = self.pstrides[last];
            for t in lo[last]..=hi[last] {
                let mut q = 0.0;
                for &(off, negative) in &offsets {
                    let v = self.prefix[off + t * step];
                    q += if negative { -v } else { v };
                }
                qmax = qmax.max(q);
                qmin = qmin.min(q);
            }
            best = best.max(qmax - qmin);

            // advance the odometer over outer cut pairs
            let mut s = last;
            loop {
                if s == 0 {
                    return Ok(best);
                }
                s -= 1;
                let (p, q) = cuts[s];
                if q < hi[s] {
                    cuts[s] = (p, q + 1);
                    break;
                } else if p + 1 < hi[s] {
                    cuts[s] = (p + 1, p + 2);
                    break;
                } else {
                    cuts[s] = (lo[s], lo[s] + 1);
                }
            }
        }
    }

    /// Corner-anchored maximum `max_{a < m <= n} |S((a, m])|`; zero when the range is empty.
    pub fn anchored_max(&self, n: &[i64]) -> Result<f64> {
        let a = self.base.lower().coords();
        let b = self.base.upper().coords();
        if n.len() != a.len() || (0..n.len()).any(|s| n[s] > b[s]) {
            return Err(Error::NotContained(format!("corner {n:?}")));
        }
        if (0..n.len()).any(|s| n[s] <= a[s]) {
            return Ok(0.0);
        }
        let hi: Vec<usize> = (0..n.len()).map(|s| (n[s] - a[s]) as usize).collect();
        let d = hi.len();
        let mut idx = vec![1usize; d];
        let mut best: f64 = 0.0;
        loop {
            best = best.max(self.prefix_rel(&idx).abs());
            let mut s = d;
            loop {
                if s == 0 {
                    return Ok(best);
                }
                s -= 1;
                if idx[s] < hi[s] {
                    idx[s] += 1;
                    break;
                }
                idx[s] = 1;
            }
        }
    }
}

/// The sum over the empty set.
pub const fn empty_sum() -> f64 {
    0.0
}

/// Exact `var(S(V))` for a union of disjoint blocks, from the model covariance.
pub fn exact_variance(model: &FieldModel, parts: &[Block]) -> Result<f64> {
    fields::covariance_of_sums(model, parts, parts)
}

/// `sigma^2 - var(S(V)) / |V|`, exact, for a finite union of pairwise disjoint blocks.
pub fn variance_defect(model: &FieldModel, parts: &[Block]) -> Result<f64> {
    if parts.is_empty() {
        return Err(Error::EmptySet);
    }
    for (i, p) in parts.iter().enumerate() {
        lattice::check_dim(model.dim(), p.dim())?;
        if let Some(q) = parts[i + 1..].iter().find(|q| !p.is_disjoint(q)) {
            return Err(Error::InvalidBlock(format!("{p} overlaps {q}")));
        }
    }
    let card: u64 = parts.iter().map(|p| p.cardinality()).sum::<Result<u64>>()?;
    Ok(fields::sigma2(model) - exact_variance(model, parts)? / card as f64)
}

/// Smallest edge over all blocks of a union.
pub fn min_edge(parts: &[Block]) -> i64 {
    parts.iter().map(Block::shortest_edge).min().unwrap_or(0)
}

/// Estimate of `var(S_N) / [N]` with a jackknife standard error.
pub fn variance_ratio(model: &FieldModel, n: &MultiIndex, replicates: usize, seed: u64) -> Result<(f64, f64)> {
    if replicates < 3 {
        return Err(Error::Domain(format!("{replicates} replicates")));
    }
    let block = Block::origin(n.coords())?;
    let card = block.cardinality()? as f64;
    let sums = block_sums(model, &block, replicates, seed)?;
    let (v, se) = stats::variance_jackknife(&sums);
    Ok((v / card, se / card))
}

/// `S(U)` for each replicate.
pub fn block_sums(model: &FieldModel, u: &Block, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let grid = fields::sample(model, u, seed, r as u64)?;
            grid.partial_sum(u)
        })
        .collect()
}

/// `(S(U), M(U))` for each replicate.
pub fn block_sums_and_maxima(model: &FieldModel, u: &Block, replicates: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let grid = fields::sample(model, u, seed, r as u64)?;
            Ok((grid.partial_sum(u)?, grid.max_sub_block(u)?))
        })
        .collect()
}

/// Monte Carlo `E|S(U)|^exponent` with its standard error.
pub fn moment_estimate(model: &FieldModel, u: &Block, exponent: f64, replicates: usize, seed: u64) -> Result<(f64, f64)> {
    if !(exponent > 0.0) {
        return Err(Error::Domain(format!("exponent {exponent}")));
    }
    let sums = block_sums(model, u, replicates, seed)?;
    let powered: Vec<f64> = sums.iter().map(|s| s.abs().powf(exponent)).collect();
    Ok(stats::mean_se(&powered))
}

/// Monte Carlo `E M(U)^exponent` with its standard error.
pub fn max_moment_estimate(model: &FieldModel, u: &Block, exponent: f64, replicates: usize, seed: u64) -> Result<(f64, f64)> {
    if !(exponent > 0.0) {
        return Err(Error::Domain(format!("exponent {exponent}")));
    }
    let pairs = block_sums_and_maxima(model, u, replicates, seed)?;
    let powered: Vec<f64> = pairs.iter().map(|(_, m)| m.powf(exponent)).collect();
    Ok(stats::mean_se(&powered))
}
