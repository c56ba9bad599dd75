//! Acceptance suite: one line per criterion.
//!
//! Criteria whose stated numbers are unattainable are still computed as stated; they are
//! listed in `KNOWN_RED` and may fail without failing the harness. Any other failure does.

use std::fmt::Write as _;
use std::io::Write as _;
use std::time::Instant;

use fieldlab::coupling::{self, CdfMode};
use fieldlab::fields::{self, Noise};
use fieldlab::rng::{Stream, Tag};
use fieldlab::sums::{self, SampleGrid};
use fieldlab::theory::{self, DecayKind, MomentParams, SchemeParams};
use fieldlab::verify::{self, Geometry, Tolerances, VerificationReport};
use fieldlab::{Block, FieldModel, Innovation, MultiIndex};

/// Criteria that cannot pass as stated (see the accompanying analysis notes).
const KNOWN_RED: &[(u32, &str)] = &[
    (1, "lambda1 != lambda2 at the optimal delta for 4 < p <= t0^2"),
    (3, "var(S_N)/N = 0.25 + 1/N, and the finite-range defect is O(1/l) so defect*sqrt(l) spans a factor 8"),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mi(c: &[i64]) -> MultiIndex {
    MultiIndex::new(c.to_vec()).unwrap()
}

fn ma(coeffs: &[(i64, f64)], innovation: Innovation) -> FieldModel {
    FieldModel::linear_ma(1, coeffs.iter().map(|&(o, a)| (vec![o], a)).collect(), innovation).unwrap()
}

fn ma_half() -> FieldModel {
    ma(&[(0, 1.0), (1, -0.5)], Innovation::Normal)
}

// 1 --------------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let mut detail = String::new();
    let t0 = theory::t0();
    let t0_ok = (t0 - 2.1413).abs() <= 5e-5;
    write!(detail, "t0={t0:.6}").unwrap();

    let h = 1e-12;
    let gap = |c: f64| (theory::psi(c + h).unwrap() - theory::psi(c - h).unwrap()).abs();
    let (g4, gt) = (gap(4.0), gap(t0 * t0));
    let cont_ok = g4 < 1e-9 && gt < 1e-9;
    write!(detail, " gap4={g4:.1e} gapt0sq={gt:.1e}").unwrap();

    let mut bound_ok = true;
    for k in 1..=9800 {
        let p = 2.0 + k as f64 * 0.01;
        bound_ok &= theory::psi(p).unwrap() <= (p - 1.0) / (p - 2.0) + 1e-12;
    }
    write!(detail, " psi<=(p-1)/(p-2):{bound_ok}").unwrap();

    let mut eq_ok = true;
    let mut max_ok = true;
    for d in [1usize, 2] {
        for p in [4.2, 4.5, 5.0, 6.0, 10.0] {
            let threshold = d as f64 * theory::psi(p).unwrap();
            let params = MomentParams::new(d, p, 1.0, 2.0, threshold + 1.0, DecayKind::Power).unwrap();
            let delta = theory::choose_delta(&params).unwrap();
            let l1 = theory::lambda1(d, delta, p).unwrap();
            let l2 = theory::lambda2(d, delta, p).unwrap();
            let e = (l1 - l2).abs() < 1e-6;
            let m = (l1.max(l2) - threshold).abs() < 1e-6;
            if !e || !m {
                write!(detail, " [d={d} p={p}: l1={l1:.6} l2={l2:.6} d*psi={threshold:.6}]").unwrap();
            }
            eq_ok &= e;
            max_ok &= m;
        }
    }
    write!(detail, " |l1-l2|<1e-6:{eq_ok} max=d*psi:{max_ok}").unwrap();
    ok(t0_ok && cont_ok && bound_ok && eq_ok && max_ok, detail)
}

// 2 --------------------------------------------------------------------------------

/// Plain (uncompensated) prefix table and brute-force sub-block maximum.
fn naive_max(values: &[f64], edges: &[usize]) -> f64 {
    let d = edges.len();
    let ext: Vec<usize> = edges.iter().map(|e| e + 1).collect();
    let total: usize = ext.iter().product();
    let mut strides = vec![1usize; d];
    for s in (0..d.saturating_sub(1)).rev() {
        strides[s] = strides[s + 1] * ext[s + 1];
    }
    let mut vstrides = vec![1usize; d];
    for s in (0..d.saturating_sub(1)).rev() {
        vstrides[s] = vstrides[s + 1] * edges[s + 1];
    }
    // P[i] = sum over cells j <= i (1-based), P = 0 on the lower faces
    let mut p = vec![0.0f64; total];
    for flat in 0..total {
        let idx: Vec<usize> = (0..d).map(|s| flat / strides[s] % ext[s]).collect();
        if idx.iter().any(|&i| i == 0) {
            continue;
        }
        let mut acc = values[(0..d).map(|s| (idx[s] - 1) * vstrides[s]).sum::<usize>()];
        for mask in 1u32..(1 << d) {
            let mut off = 0usize;
            for s in 0..d {
                if mask >> s & 1 == 1 {
                    off += strides[s];
                }
            }
            let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
            acc += sign * p[flat - off];
        }
        p[flat] = acc;
    }
    let rect = |lo: &[usize], hi: &[usize]| -> f64 {
        let mut s = 0.0;
        for mask in 0u32..(1 << d) {
            let mut off = 0usize;
            for t in 0..d {
                off += if mask >> t & 1 == 1 { lo[t] } else { hi[t] } * strides[t];
            }
            s += if mask.count_ones() % 2 == 0 { p[off] } else { -p[off] };
        }
        s
    };
    let mut best: f64 = 0.0;
    let mut lo = vec![0usize; d];
    loop {
        let mut hi: Vec<usize> = lo.iter().map(|x| x + 1).collect();
        loop {
            best = best.max(rect(&lo, &hi).abs());
            let mut s = d;
            let mut done = true;
            while s > 0 {
                s -= 1;
                if hi[s] < edges[s] {
                    hi[s] += 1;
                    done = false;
                    break;
                }
                hi[s] = lo[s] + 1;
            }
            if done {
                break;
            }
        }
        let mut s = d;
        let mut done = true;
        while s > 0 {
            s -= 1;
            if lo[s] + 1 < edges[s] {
                lo[s] += 1;
                done = false;
                break;
            }
            lo[s] = 0;
        }
        if done {
            return best;
        }
    }
}

fn criterion_2() -> Outcome {
    let model = FieldModel::linear_ma(3, vec![(vec![0, 0, 0], 1.0), (vec![1, 0, 0], 0.7), (vec![0, 1, 1], -0.4)], Innovation::Normal).unwrap();
    let base = Block::from_coords(&[-5, -5, -5], &[15, 15, 15]).unwrap();
    let grid = fields::sample(&model, &base, 2024, 0).unwrap();
    let geo = Stream::new(2024, Tag::Geometry, 0);
    let mut worst: f64 = 0.0;
    for t in 0..1000u64 {
        let mut a = [0i64; 3];
        let mut b = [0i64; 3];
        for s in 0..3 {
            let x = geo.below(6 * t + 2 * s as u64, 20) as i64 - 5;
            let y = geo.below(6 * t + 2 * s as u64 + 1, 20) as i64 - 5;
            let (x, y) = (x.min(y), x.max(y) + 1);
            a[s] = x;
            b[s] = y;
        }
        let w = Block::from_coords(&a, &b).unwrap();
        let fast = grid.partial_sum(&w).unwrap();
        let slow = grid.direct_sum(&w).unwrap();
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    let sums_ok = worst <= 1e-9;

    // every shape with |V| <= 400 in d = 1, 2, 3 (edges capped at 400, 40, 8)
    let mut shapes: Vec<Vec<usize>> = (1..=400).map(|a| vec![a]).collect();
    for a in 1..=40usize {
        for b in 1..=40usize {
            if a * b <= 400 {
                shapes.push(vec![a, b]);
            }
        }
    }
    for a in 1..=8usize {
        for b in 1..=8usize {
            for c in 1..=8usize {
                if a * b * c <= 400 {
                    shapes.push(vec![a, b, c]);
                }
            }
        }
    }
    let mut max_dev: f64 = 0.0;
    let mut checked = 0usize;
    for (i, e) in shapes.iter().enumerate() {
        let d = e.len();
        let lo: Vec<i64> = (0..d).map(|s| (i as i64 * 7 + s as i64 * 3) % 11 - 5).collect();
        let hi: Vec<i64> = lo.iter().zip(e).map(|(l, &x)| l + x as i64).collect();
        let v = Block::from_coords(&lo, &hi).unwrap();
        let m = FieldModel::iid(d, Innovation::Exponential);
        let g = fields::sample(&m, &v, i as u64, 1).unwrap();
        let fast = g.max_sub_block(&v).unwrap();
        let naive = naive_max(g.values(), e);
        max_dev = max_dev.max((fast - naive).abs() / naive.max(1.0));
        checked += 1;
    }
    let max_ok = max_dev <= 1e-9;
    ok(
        sums_ok && max_ok,
        format!("partial_sum rel err {worst:.2e} over 1000 blocks; max_sub_block rel dev {max_dev:.2e} over {checked} blocks"),
    )
}

// 3 --------------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let m = ma_half();
    let mut analytic_dev: f64 = 0.0;
    let mut observed = (0usize, 0.0f64);
    for n in 1..=1000i64 {
        let v = sums::exact_variance(&m, &[Block::cube(1, n).unwrap()]).unwrap() / n as f64;
        let dev = (v - (0.25 + 0.5 / n as f64)).abs();
        if dev > analytic_dev {
            analytic_dev = dev;
            observed = (n as usize, v);
        }
    }
    let analytic_ok = analytic_dev < 1e-12;

    let (est, se) = sums::variance_ratio(&m, &MultiIndex::splat(1, 200), 10_000, 31).unwrap();
    let mc_ok = (est - 0.2525).abs() <= 3.0 * se;

    let scaled: Vec<f64> = [10i64, 40, 160, 640]
        .iter()
        .map(|&l| sums::variance_defect(&m, &[Block::cube(1, l).unwrap()]).unwrap().abs() * (l as f64).sqrt())
        .collect();
    let max = scaled.iter().cloned().fold(0.0, f64::max);
    let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio_ok = max / min <= 2.0;
    ok(
        analytic_ok && mc_ok && ratio_ok,
        format!(
            "analytic max dev {analytic_dev:.3e} (N={}: {:.6} vs {:.6}); MC {est:.5} +/- {se:.5} vs 0.2525 (ok={mc_ok}); defect*sqrt(l) max/min = {:.3} (ok={ratio_ok})",
            observed.0,
            observed.1,
            0.25 + 0.5 / observed.0 as f64,
            max / min
        ),
    )
}

// 4 --------------------------------------------------------------------------------

fn criterion_4(tol: &Tolerances) -> Outcome {
    let delta = theory::choose_delta(&MomentParams::new(1, 4.0, 1.0, 2.0, 50.0, DecayKind::Power).unwrap()).unwrap();
    let ladder: Vec<Block> = [16i64, 64, 256, 1024, 4096, 16384].iter().map(|&n| Block::cube(1, n).unwrap()).collect();
    let cap = 1.0 + delta / 2.0 + tol.slope_slack;
    let models = [
        ("iid", FieldModel::iid(1, Innovation::Normal)),
        ("associated", ma(&[(0, 1.0), (1, 0.5), (2, 0.25)], Innovation::Normal)),
        ("NA", ma(&[(0, 1.0), (1, -0.5)], Innovation::Normal)),
    ];
    let mut pass = true;
    let mut detail = format!("delta={delta:.4} cap={cap:.4}");
    for (i, (name, m)) in models.iter().enumerate() {
        if *name == "NA" {
            assert!(m.is_negatively_associated());
        }
        let s = verify::check_moment_inequality(m, delta, &ladder, 2000, 400 + i as u64, tol).unwrap();
        let mm = verify::check_maximal_inequality(m, delta, &ladder, 2000, 400 + i as u64, tol).unwrap();
        let (ss, ms) = (s.statistic("slope").unwrap(), mm.statistic("slope").unwrap());
        let dom = mm.statistic("dominated_fraction").unwrap();
        pass &= ss <= cap && ms <= cap && dom == 1.0;
        write!(detail, "; {name}: slope S {ss:.3} M {ms:.3} M>=|S| {:.1}%", 100.0 * dom).unwrap();
    }
    ok(pass, detail)
}

// 5 --------------------------------------------------------------------------------

fn geometries() -> Vec<Geometry> {
    vec![
        (vec![mi(&[0, 0])], vec![mi(&[1, 0])]),
        (vec![mi(&[0, 0])], vec![mi(&[1, 1])]),
        (vec![mi(&[0, 0]), mi(&[0, 1])], vec![mi(&[1, 0]), mi(&[1, 1])]),
        (vec![mi(&[0, 0]), mi(&[2, 0]), mi(&[4, 0])], vec![mi(&[1, 0]), mi(&[3, 0])]),
        (vec![mi(&[0, 0]), mi(&[1, 0]), mi(&[2, 0])], vec![mi(&[0, 1]), mi(&[1, 1]), mi(&[2, 1])]),
    ]
}

fn criterion_5(tol: &Tolerances) -> Outcome {
    let m = FieldModel::linear_ma(
        2,
        vec![(vec![0, 0], 1.0), (vec![1, 0], 0.5), (vec![0, 1], 0.5), (vec![1, 1], 0.25)],
        Innovation::Normal,
    )
    .unwrap();
    let g = geometries();
    let mut pass = true;
    let mut detail = String::new();
    for (name, noise) in [("raw", None), ("noise", Some(Noise { innovation: Innovation::Exponential, scale: 0.7 }))] {
        let r = verify::check_dependence(&m, &g, noise, 50, 100_000, 55, tol).unwrap();
        for row in r.table.iter().filter(|row| row.statistic == "theta_r") {
            assert!(row.value.unwrap() > 0.0, "geometry with theta_r = 0");
        }
        pass &= r.pass;
        write!(
            detail,
            "{name}: max ratio {:.4}, max (|cov|-bound)/SE {:.2}, pass={}; ",
            r.statistic("max_ratio").unwrap(),
            r.statistic("max_excess_in_se").unwrap(),
            r.pass
        )
        .unwrap();
    }
    ok(pass, detail)
}

// 6 --------------------------------------------------------------------------------

fn criterion_6(tol: &Tolerances) -> Outcome {
    let ladder: Vec<MultiIndex> = [10i64, 100, 1000, 10_000].iter().map(|&n| MultiIndex::splat(1, n)).collect();
    let mut pass = true;
    let mut detail = String::new();
    // Gaussian innovations make S_N exactly normal; exponential ones give a real CLT signal
    for (name, inn) in [("normal", Innovation::Normal), ("exponential", Innovation::Exponential)] {
        let r = verify::check_clt_distance(&ma(&[(0, 1.0), (1, -0.5)], inn), &ladder, 10_000, 66, tol).unwrap();
        let dists: Vec<String> = r.table.iter().map(|row| format!("{:.4}", row.value.unwrap())).collect();
        pass &= r.pass;
        write!(
            detail,
            "{name}: KS [{}], top {:.4} <= {}, mu_hat {:.3}; ",
            dists.join(", "),
            r.statistic("top_distance").unwrap(),
            tol.clt_top_max,
            r.statistic("mu_hat").unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    ok(pass, detail)
}

// 7 --------------------------------------------------------------------------------

fn criterion_7(tol: &Tolerances) -> Outcome {
    let m = ma(&[(0, 1.0), (1, 0.5)], Innovation::Exponential);
    let p = SchemeParams::new(3, 2, 1.0, 1.0).unwrap();
    let scheme = coupling::build_scheme(&p, 8, 1, 1.0).unwrap();
    let r = verify::check_coupling_error_decay(&m, &scheme, &[2, 4, 8], 10_000, 10_000, 77, tol).unwrap();
    let per: Vec<String> = [2u64, 4, 8]
        .iter()
        .map(|k| {
            let v = r.table.iter().find(|row| row.rung == k.to_string() && row.statistic == "mean_e2_per_size").unwrap().value.unwrap();
            format!("k={k}: {v:.4e}")
        })
        .collect();
    ok(
        r.pass,
        format!(
            "residual {:.2e}, wiener dev {:.2e}, max eta KS {:.4} (limit {:.4}), E e^2/|B| {} (regions {} checked, {} skipped)",
            r.statistic("max_identity_residual").unwrap(),
            r.statistic("max_wiener_deviation").unwrap(),
            r.statistic("max_eta_ks").unwrap(),
            r.tolerance.iter().find(|t| t.name == "eta_ks_max").unwrap().value.unwrap(),
            per.join(", "),
            r.statistic("regions_checked").unwrap(),
            r.statistic("regions_skipped").unwrap(),
        ),
    )
}

// 8 --------------------------------------------------------------------------------

fn criterion_8(tol: &Tolerances) -> Outcome {
    let p = SchemeParams::new(3, 2, 1.0, 1.0).unwrap();
    let scheme = coupling::build_scheme(&p, 25, 1, 1.0).unwrap();
    let depths: Vec<u64> = (2..=25).collect();
    let r = verify::check_approximation_error(&FieldModel::iid(1, Innovation::Normal), &scheme, CdfMode::Exact, &depths, 200, 88, 0.9, tol).unwrap();
    let top = scheme.boundaries[25];
    ok(
        r.pass && (5e4..=2e5).contains(&(top as f64)),
        format!(
            "[N] up to {top}; slope {:.3}, 90% CI ({:.3}, {:.3})",
            r.statistic("slope").unwrap(),
            r.statistic("ci_lo").unwrap(),
            r.statistic("ci_hi").unwrap()
        ),
    )
}

// 9 --------------------------------------------------------------------------------

fn criterion_9(tol: &Tolerances) -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for (name, m) in [("iid", FieldModel::iid(1, Innovation::Normal)), ("linear_ma", ma_half())] {
        let r = verify::check_lil(&m, 20, 100, 99, 1.0, tol).unwrap();
        pass &= r.pass;
        write!(
            detail,
            "{name}: median max R {:.3}, median min R {:.3}, exceed {:.2}; ",
            r.statistic("median_max_r").unwrap(),
            r.statistic("median_min_r").unwrap(),
            r.statistic("exceedance_top").unwrap()
        )
        .unwrap();
    }
    ok(pass, detail)
}

// 10 -------------------------------------------------------------------------------

fn suite(tol: &Tolerances) -> Vec<VerificationReport> {
    let m = ma_half();
    let ladder: Vec<Block> = [16i64, 64, 256].iter().map(|&n| Block::cube(1, n).unwrap()).collect();
    let diag: Vec<MultiIndex> = [10i64, 100, 1000].iter().map(|&n| MultiIndex::splat(1, n)).collect();
    let g1: Vec<Geometry> = vec![(vec![mi(&[0])], vec![mi(&[1])]), (vec![mi(&[0]), mi(&[1])], vec![mi(&[2])])];
    let scheme = coupling::build_scheme(&SchemeParams::new(3, 2, 1.0, 1.0).unwrap(), 8, 1, 1.0).unwrap();
    let exp = ma(&[(0, 1.0), (1, 0.5)], Innovation::Exponential);
    vec![
        verify::check_moment_inequality(&m, 1.0, &ladder, 300, 1, tol).unwrap(),
        verify::check_maximal_inequality(&m, 1.0, &ladder, 300, 2, tol).unwrap(),
        verify::check_tail_bound(&m, 1.0, &ladder[2], &[1.0, 2.0, 4.0, 8.0], 300, 3, tol).unwrap(),
        verify::check_clt_distance(&m, &diag, 500, 4, tol).unwrap(),
        verify::check_lil(&m, 10, 50, 5, 1.0, tol).unwrap(),
        verify::check_dependence(&m, &g1, None, 5, 2000, 6, tol).unwrap(),
        verify::check_dependence(&m, &g1, Some(Noise { innovation: Innovation::Rademacher, scale: 0.5 }), 5, 2000, 7, tol).unwrap(),
        verify::check_variance_asymptotics(&m, &diag, 500, 8, tol).unwrap(),
        verify::check_second_moment_bound(&m, 2.0, &ladder).unwrap(),
        verify::check_neighbor_sum_bound(2, &[1.0, 2.0], &[4, 8, 16], tol).unwrap(),
        verify::check_variance_defect(&m, &[vec![ladder[0].clone()], vec![ladder[1].clone()]], tol).unwrap(),
        verify::check_coupling_error_decay(&exp, &scheme, &[2, 4, 8], 300, 300, 9, tol).unwrap(),
        verify::check_approximation_error(&FieldModel::iid(1, Innovation::Normal), &scheme, CdfMode::Exact, &[2, 4, 6, 8], 50, 10, 0.9, tol).unwrap(),
    ]
}

fn criterion_10(tol: &Tolerances) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, workers) in [1usize, 4, 1].iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(*workers).build().unwrap();
        let reports = pool.install(|| suite(tol));
        let out = dir.path().join(i.to_string());
        verify::emit_report(&reports, &out).unwrap();
        bytes.push((std::fs::read(out.join("report.json")).unwrap(), reports.len()));
    }
    let same = bytes.windows(2).all(|w| w[0].0 == w[1].0);
    // also the raw field draws on nested blocks
    let m = ma_half();
    let big: SampleGrid = fields::sample(&m, &Block::cube(1, 64).unwrap(), 3, 4).unwrap();
    let small = fields::sample(&m, &Block::from_coords(&[10], &[20]).unwrap(), 3, 4).unwrap();
    let consistent = (11..=20).all(|j| big.value(&[j]).unwrap() == small.value(&[j]).unwrap());
    ok(
        same && consistent,
        format!("{} verifiers x 3 runs (workers 1, 4, 1): identical report.json = {same}; sub-block draws consistent = {consistent}", bytes[0].1),
    )
}

// -----------------------------------------------------------------------------------

#[test]
fn acceptance() {
    let tol = Tolerances::default();
    type Crit<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, f64, Crit)> = vec![
        (1, "constant calculus", 1.0, Box::new(criterion_1)),
        (2, "exact-oracle sums", 30.0, Box::new(criterion_2)),
        (3, "variance asymptotics", 60.0, Box::new(criterion_3)),
        (4, "moment/maximal inequalities", 600.0, Box::new(|| criterion_4(&tol))),
        (5, "dependence inequality", 600.0, Box::new(|| criterion_5(&tol))),
        (6, "CLT distance", 600.0, Box::new(|| criterion_6(&tol))),
        (7, "coupling pipeline", 900.0, Box::new(|| criterion_7(&tol))),
        (8, "approximation-error exponent", 1200.0, Box::new(|| criterion_8(&tol))),
        (9, "LIL", 1200.0, Box::new(|| criterion_9(&tol))),
        (10, "determinism", f64::INFINITY, Box::new(|| criterion_10(&tol))),
    ];
    let mut unexpected = Vec::new();
    for (id, name, budget, f) in &criteria {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let pass = o.pass && secs < *budget;
        let budget_txt = if budget.is_finite() { format!(" / {budget:.0} s") } else { String::new() };
        // straight to the handle so the lines show without --nocapture
        let mut err = std::io::stderr();
        writeln!(err, "[{}] {id:>2} {name} ({secs:.1} s{budget_txt}): {}", if pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
        if !pass {
            match KNOWN_RED.iter().find(|(k, _)| k == id) {
                Some((_, why)) => writeln!(err, "     known red: {why}").unwrap(),
                None => unexpected.push(*id),
            }
        }
    }
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
