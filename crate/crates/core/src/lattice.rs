//! Multi-index geometry on `Z^d`.
//!
//! Blocks are half-open integer rectangles `(a, b] = (a_1, b_1] x ... x (a_d, b_d]`.
//! Conversions to array offsets shift by `a + 1`, so the lattice point `a_s + 1`
//! lives at offset `0` along axis `s`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lattice point (or lattice vector) in `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<i64>);

impl MultiIndex {
    pub fn new(coords: Vec<i64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Domain("zero-dimensional multi-index".into()));
        }
        Ok(MultiIndex(coords))
    }

    /// The all-`value` point in dimension `d`.
    pub fn splat(d: usize, value: i64) -> Self {
        assert!(d >= 1, "dimension must be at least 1");
        MultiIndex(vec![value; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn checked_sub(&self, other: &MultiIndex) -> Result<MultiIndex> {
        self.zip_checked(other, i64::checked_sub)
    }

    pub fn checked_add(&self, other: &MultiIndex) -> Result<MultiIndex> {
        self.zip_checked(other, i64::checked_add)
    }

    fn zip_checked(&self, other: &MultiIndex, op: fn(i64, i64) -> Option<i64>) -> Result<MultiIndex> {
        check_dim(self.dim(), other.dim())?;
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&x, &y)| op(x, y).ok_or(Error::Overflow("multi-index arithmetic")))
            .collect::<Result<Vec<_>>>()
            .map(MultiIndex)
    }

    /// Sup-norm `max_s |z_s|`.
    pub fn sup_norm(&self) -> Result<u64> {
        Ok(self.0.iter().map(|z| z.unsigned_abs()).max().unwrap_or(0))
    }

    /// `[N] = N_1 ... N_d`, overflow-checked.
    pub fn product(&self) -> Result<i64> {
        self.0
            .iter()
            .try_fold(1i64, |acc, &x| acc.checked_mul(x))
            .ok_or(Error::Overflow("coordinate product"))
    }

    pub fn negate(&self) -> Result<MultiIndex> {
        self.0
            .iter()
            .map(|&x| x.checked_neg().ok_or(Error::Overflow("negation")))
            .collect::<Result<Vec<_>>>()
            .map(MultiIndex)
    }
}

impl From<Vec<i64>> for MultiIndex {
    fn from(v: Vec<i64>) -> Self {
        MultiIndex::new(v).expect("non-empty coordinate vector")
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

/// Sup-norm distance between two points of equal dimension.
pub fn sup_distance(x: &[i64], y: &[i64]) -> u64 {
    x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0)
}

/// Half-open block `(a, b]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BlockRepr", into = "BlockRepr")]
pub struct Block {
    a: MultiIndex,
    b: MultiIndex,
}

#[derive(Serialize, Deserialize)]
struct BlockRepr {
    a: Vec<i64>,
    b: Vec<i64>,
}

impl TryFrom<BlockRepr> for Block {
    type Error = Error;
    fn try_from(r: BlockRepr) -> Result<Self> {
        Block::new(MultiIndex::new(r.a)?, MultiIndex::new(r.b)?)
    }
}

impl From<Block> for BlockRepr {
    fn from(b: Block) -> Self {
        BlockRepr { a: b.a.0, b: b.b.0 }
    }
}

impl Block {
    pub fn new(a: MultiIndex, b: MultiIndex) -> Result<Self> {
        check_dim(a.dim(), b.dim())?;
        if let Some(s) = (0..a.dim()).find(|&s| a.0[s] >= b.0[s]) {
            return Err(Error::InvalidBlock(format!(
                "edge {s} is empty: a = {a}, b = {b}"
            )));
        }
        // every edge length must be representable
        for s in 0..a.dim() {
            b.0[s]
                .checked_sub(a.0[s])
                .ok_or(Error::Overflow("block edge length"))?;
        }
        Ok(Block { a, b })
    }

    pub fn from_coords(a: &[i64], b: &[i64]) -> Result<Self> {
        Block::new(MultiIndex::new(a.to_vec())?, MultiIndex::new(b.to_vec())?)
    }

    /// The block `(0, n]` anchored at the origin.
    pub fn origin(n: &[i64]) -> Result<Self> {
        Block::from_coords(&vec![0; n.len()], n)
    }

    /// The cube `(0, side]^d`.
    pub fn cube(d: usize, side: i64) -> Result<Self> {
        Block::origin(&vec![side; d])
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn lower(&self) -> &MultiIndex {
        &self.a
    }

    pub fn upper(&self) -> &MultiIndex {
        &self.b
    }

    pub fn edge(&self, s: usize) -> i64 {
        self.b.0[s] - self.a.0[s]
    }

    pub fn edges(&self) -> Vec<i64> {
        (0..self.dim()).map(|s| self.edge(s)).collect()
    }

    /// `|V| = prod_s (b_s - a_s)`.
    pub fn cardinality(&self) -> Result<u64> {
        (0..self.dim())
            .try_fold(1u64, |acc, s| acc.checked_mul(self.edge(s) as u64))
            .ok_or(Error::Overflow("block cardinality"))
    }

    /// Longest edge `l(U)`.
    pub fn longest_edge(&self) -> i64 {
        (0..self.dim()).map(|s| self.edge(s)).max().unwrap_or(0)
    }

    /// Shortest edge.
    pub fn shortest_edge(&self) -> i64 {
        (0..self.dim()).map(|s| self.edge(s)).min().unwrap_or(0)
    }

    pub fn contains_point(&self, j: &[i64]) -> bool {
        j.len() == self.dim() && (0..self.dim()).all(|s| self.a.0[s] < j[s] && j[s] <= self.b.0[s])
    }

    pub fn contains_block(&self, w: &Block) -> bool {
        w.dim() == self.dim()
            && (0..self.dim()).all(|s| self.a.0[s] <= w.a.0[s] && w.b.0[s] <= self.b.0[s])
    }

    pub fn intersect(&self, other: &Block) -> Option<Block> {
        if other.dim() != self.dim() {
            return None;
        }
        let lo: Vec<i64> = (0..self.dim()).map(|s| self.a.0[s].max(other.a.0[s])).collect();
        let hi: Vec<i64> = (0..self.dim()).map(|s| self.b.0[s].min(other.b.0[s])).collect();
        Block::from_coords(&lo, &hi).ok()
    }

    pub fn is_disjoint(&self, other: &Block) -> bool {
        self.intersect(other).is_none()
    }

    pub fn translate(&self, shift: &[i64]) -> Result<Block> {
        let shift = MultiIndex::new(shift.to_vec())?;
        Block::new(self.a.checked_add(&shift)?, self.b.checked_add(&shift)?)
    }

    /// Iterates the lattice points of the block in row-major order (last axis fastest).
    pub fn points(&self) -> Points<'_> {
        Points {
            block: self,
            next: Some(self.a.0.iter().map(|x| x + 1).collect()),
        }
    }

    /// Splits along the lowest-indexed longest edge; the lower piece gets `floor(l/2)`.
    pub fn bisect(&self) -> Result<(Block, Block)> {
        if self.cardinality()? <= 1 {
            return Err(Error::Domain("bisection of a single-cell block".into()));
        }
        let l = self.longest_edge();
        let axis = (0..self.dim()).find(|&s| self.edge(s) == l).expect("d >= 1");
        let cut = self.a.0[axis] + l / 2;
        let mut upper_lo = self.a.clone();
        upper_lo.0[axis] = cut;
        let mut lower_hi = self.b.clone();
        lower_hi.0[axis] = cut;
        Ok((Block::new(self.a.clone(), lower_hi)?, Block::new(upper_lo, self.b.clone())?))
    }

    /// `h(V) = h(l_1) + ... + h(l_d)`.
    pub fn h(&self) -> u32 {
        (0..self.dim()).map(|s| h(self.edge(s) as u64).expect("edges are positive")).sum()
    }

    /// Disjoint blocks whose union is `self \ inner`; `inner` must lie inside `self`.
    pub fn difference(&self, inner: &Block) -> Result<Vec<Block>> {
        if !self.contains_block(inner) {
            return Err(Error::NotContained(format!("{inner:?}")));
        }
        let d = self.dim();
        let mut parts = Vec::new();
        // axis `s` slabs: inner range on axes < s, outside it on axis s, full on axes > s
        for s in 0..d {
            let mut lo = self.a.0.clone();
            let mut hi = self.b.0.clone();
            for t in 0..s {
                lo[t] = inner.a.0[t];
                hi[t] = inner.b.0[t];
            }
            let below = (self.a.0[s], inner.a.0[s]);
            let above = (inner.b.0[s], self.b.0[s]);
            for (from, to) in [below, above] {
                if from < to {
                    let mut l = lo.clone();
                    let mut h = hi.clone();
                    l[s] = from;
                    h[s] = to;
                    parts.push(Block::from_coords(&l, &h)?);
                }
            }
        }
        Ok(parts)
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}]", self.a, self.b)
    }
}

pub struct Points<'a> {
    block: &'a Block,
    next: Option<Vec<i64>>,
}

impl Iterator for Points<'_> {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let lo = &self.block.a.0;
        let hi = &self.block.b.0;
        let mut s = succ.len();
        loop {
            if s == 0 {
                break;
            }
            s -= 1;
            if succ[s] < hi[s] {
                succ[s] += 1;
                self.next = Some(succ);
                break;
            }
            succ[s] = lo[s] + 1;
        }
        Some(current)
    }
}

/// `|A ∩ (B + shift)|` without materialising either block.
pub fn shifted_overlap(a: &Block, b: &Block, shift: &[i64]) -> u64 {
    let mut count = 1u64;
    for s in 0..a.dim() {
        let lo = a.a.0[s].max(b.a.0[s] + shift[s]);
        let hi = a.b.0[s].min(b.b.0[s] + shift[s]);
        if hi <= lo {
            return 0;
        }
        count *= (hi - lo) as u64;
    }
    count
}

/// `r = min { ||i - j|| : i in I, j in J }` in the sup-norm.
pub fn dist(set_i: &[MultiIndex], set_j: &[MultiIndex]) -> Result<u64> {
    if set_i.is_empty() || set_j.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = set_i[0].dim();
    let mut best = u64::MAX;
    for i in set_i {
        check_dim(d, i.dim())?;
        for j in set_j {
            check_dim(d, j.dim())?;
            best = best.min(sup_distance(i.coords(), j.coords()));
        }
    }
    Ok(best)
}

/// `h(n) = min { k >= 0 : 2^k >= n }`.
pub fn h(n: u64) -> Result<u32> {
    if n < 1 {
        return Err(Error::Domain(format!("h({n})")));
    }
    Ok(if n == 1 { 0 } else { 64 - (n - 1).leading_zeros() })
}

/// Membership in `G_tau`: every coordinate dominates the `tau`-th power of the product
/// of the others. The comparison carries a `1e-12` relative slack so that exact
/// equalities such as `2 >= 4^(1/2)` are not lost to rounding.
pub fn in_g_tau(j: &MultiIndex, tau: f64) -> Result<bool> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau = {tau}")));
    }
    if let Some(bad) = j.coords().iter().find(|&&x| x < 1) {
        return Err(Error::Domain(format!("coordinate {bad} of {j} is not positive")));
    }
    let logs: Vec<f64> = j.coords().iter().map(|&x| (x as f64).ln()).collect();
    let total: f64 = logs.iter().sum();
    Ok(logs.iter().enumerate().all(|(s, &ls)| {
        let others = total - ls;
        let rhs = (tau * others).exp();
        (j.coords()[s] as f64) >= rhs * (1.0 - 1e-12)
    }))
}

/// Majorant `f(|U|, d, nu)` for `sum_{j in U, j != i} ||i - j||^{-nu}`.
pub fn neighbor_bound(cardinality: u64, d: usize, nu: f64) -> Result<f64> {
    if !(nu > 0.0) || d == 0 || cardinality == 0 {
        return Err(Error::Domain(format!("f({cardinality}, {d}, {nu})")));
    }
    let dd = d as f64;
    let card = cardinality as f64;
    Ok(if nu > dd {
        1.0
    } else if nu.fract() == 0.0 {
        (1.0 + card.ln()) * card.powf(1.0 - nu / dd)
    } else {
        card.powf(1.0 - nu / dd)
    })
}

/// Exact `sum_{j in U, j != i} ||i - j||^{-nu}` by enumeration.
pub fn neighbor_sum_oracle(u: &Block, i: &MultiIndex, nu: f64) -> Result<f64> {
    if !u.contains_point(i.coords()) {
        return Err(Error::NotContained(format!("point {i} in {u}")));
    }
    Ok(u.points()
        .filter(|j| j.as_slice() != i.coords())
        .map(|j| (sup_distance(&j, i.coords()) as f64).powf(-nu))
        .sum())
}
