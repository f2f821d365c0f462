//! Wall-time and workspace benchmarking of the deformable attention layer
//! against the quadratic full-attention baseline, plus the log-log scaling
//! fit used to verify how each mechanism grows with sequence length.

use std::time::Instant;

use crate::dmsa::{msdmsa_forward, DmsaParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::seq::{reference_points, LevelLayout, TokenSequence};
use crate::vanilla::{vanilla_forward, vanilla_workspace_elems, VanillaParams};

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub mechanism: &'static str,
    pub n: usize,
    pub c: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    /// Median wall time over the repeats, nanoseconds.
    pub time_ns: u128,
    pub repeats: usize,
    /// Analytic workspace bytes (elements retained for backward x 8).
    pub workspace_bytes: usize,
}

pub const CSV_HEADER: &str = "# deft3d bench v1\nmechanism,n,c,heads,levels,points,time_ns,repeats,workspace_bytes";

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.mechanism, r.n, r.c, r.heads, r.levels, r.points, r.time_ns, r.repeats, r.workspace_bytes
        ));
    }
    s
}

/// Times `f` `repeats` times (after one warm-up run) and returns the median
/// in nanoseconds. If the median is too close to timer resolution, doubles
/// the repeat count (up to a bound) and warns.
fn median_time_ns(mut f: impl FnMut(), mut repeats: usize) -> (u128, usize) {
    assert!(repeats >= 3);
    f(); // warm-up
    loop {
        let mut times: Vec<u128> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_nanos()
            })
            .collect();
        times.sort_unstable();
        let med = times[times.len() / 2];
        if med >= 1_000 || repeats >= 96 {
            return (med.max(1), repeats);
        }
        eprintln!("warning: median {med} ns is near timer resolution; doubling repeats to {}", repeats * 2);
        repeats *= 2;
    }
}

/// Splits N tokens over L levels (first level gets the remainder); the
/// volumes are laid out along one axis, which is irrelevant for timing.
fn bench_layout(n: usize, levels: usize) -> LevelLayout {
    let per = n / levels;
    let mut dims = vec![[per + n % levels, 1, 1]];
    for _ in 1..levels {
        dims.push([per, 1, 1]);
    }
    LevelLayout::new(dims)
}

pub fn bench_msdmsa(
    n: usize,
    c: usize,
    heads: usize,
    levels: usize,
    points: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRecord> {
    let layout = bench_layout(n, levels);
    let mut r = rng::seeded(seed);
    let seq = TokenSequence {
        tokens: rng::random_matrix::<f64>(&mut r, layout.total, c),
        layout,
    };
    let refs = reference_points(&seq.layout);
    let mut params = DmsaParams::new(c, heads, levels, points)?;
    params.randomize(&mut r, 0.1);
    let mut workspace = 0usize;
    let (time_ns, repeats) = median_time_ns(
        || {
            let (_, tape) = msdmsa_forward(&seq, &refs, &params).unwrap();
            workspace = tape.workspace_elems();
        },
        repeats,
    );
    Ok(BenchRecord {
        mechanism: "msdmsa",
        n,
        c,
        heads,
        levels,
        points,
        time_ns,
        repeats,
        workspace_bytes: workspace * 8,
    })
}

pub fn bench_vanilla(n: usize, c: usize, heads: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    let mut r = rng::seeded(seed);
    let tokens = rng::random_matrix::<f64>(&mut r, n, c);
    let mut params = VanillaParams::new(c, heads)?;
    params.randomize(&mut r, 0.1);
    let (time_ns, repeats) = median_time_ns(
        || {
            vanilla_forward(&tokens, &params).unwrap();
        },
        repeats,
    );
    Ok(BenchRecord {
        mechanism: "vanilla",
        n,
        c,
        heads,
        levels: 1,
        points: n,
        time_ns,
        repeats,
        workspace_bytes: vanilla_workspace_elems(n, c, heads) * 8,
    })
}

/// Least-squares slope of ln(time) against ln(n).
pub fn fit_loglog_slope(points: &[(usize, u128)]) -> Result<f64> {
    let distinct: std::collections::BTreeSet<usize> = points.iter().map(|(n, _)| *n).collect();
    if distinct.len() < 2 {
        return Err(Error::Input("slope fit needs >= 2 distinct sizes".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| (*t as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    Ok(cov / var)
}

pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    pub slope_msdmsa: f64,
    pub slope_vanilla: f64,
    /// vanilla workspace / deformable workspace at the largest N.
    pub workspace_ratio: f64,
}

/// Runs both mechanisms over the size list and fits both scaling exponents.
pub fn bench_suite(
    ns: &[usize],
    c: usize,
    heads: usize,
    levels: usize,
    points: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchSummary> {
    let mut records = Vec::new();
    for &n in ns {
        records.push(bench_msdmsa(n, c, heads, levels, points, repeats, seed)?);
    }
    for &n in ns {
        records.push(bench_vanilla(n, c, heads, repeats, seed)?);
    }
    let msd: Vec<(usize, u128)> = records
        .iter()
        .filter(|r| r.mechanism == "msdmsa")
        .map(|r| (r.n, r.time_ns))
        .collect();
    let van: Vec<(usize, u128)> = records
        .iter()
        .filter(|r| r.mechanism == "vanilla")
        .map(|r| (r.n, r.time_ns))
        .collect();
    let slope_msdmsa = fit_loglog_slope(&msd)?;
    let slope_vanilla = fit_loglog_slope(&van)?;
    let max_n = *ns.iter().max().unwrap();
    let w_msd = records
        .iter()
        .find(|r| r.mechanism == "msdmsa" && r.n == max_n)
        .unwrap()
        .workspace_bytes;
    let w_van = records
        .iter()
        .find(|r| r.mechanism == "vanilla" && r.n == max_n)
        .unwrap()
        .workspace_bytes;
    Ok(BenchSummary {
        records,
        slope_msdmsa,
        slope_vanilla,
        workspace_ratio: w_van as f64 / w_msd as f64,
    })
}
