//! Self-checks of the library against independent oracles.
//!
//! Each suite returns a [`SuiteReport`] of named checks, each with the worst
//! error seen and its tolerance. The CLI `selftest`, the acceptance harness
//! and the integration tests all run these same suites.

mod attention;
mod geometry;
mod gradient;
mod labels;
pub mod oracle;

pub use attention::attention_suite;
pub use geometry::geometry_suite;
pub use gradient::gradient_suite;
pub use labels::{loss_suite, voxel_metric_suite};

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};
use crate::tpv::{init_queries, query_count};

/// Worst error of one family of comparisons.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    /// NaN once any comparison was NaN.
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, tol: f64) -> Self {
        Check { name: name.into(), cases: 0, max_err: 0.0, tol }
    }

    /// Records one comparison.
    pub fn see(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_err {
            self.max_err = err;
        }
    }

    /// Records a comparison that must hold exactly.
    pub fn expect(&mut self, ok: bool) {
        self.see(if ok { 0.0 } else { f64::INFINITY });
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.max_err <= self.tol
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{status} {} ({:.2} s)", self.name, self.elapsed.as_secs_f64())?;
        for c in &self.checks {
            let mark = if c.passed() { "ok" } else { "FAILED" };
            writeln!(
                f,
                "  {:<40} {:>7} cases  max err {:.3e} (tol {:.0e})  {mark}",
                c.name, c.cases, c.max_err, c.tol
            )?;
        }
        Ok(())
    }
}

/// Times `body` and wraps its checks.
pub(crate) fn timed(name: &'static str, body: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = body()?;
    Ok(SuiteReport { name, checks, elapsed: start.elapsed() })
}

/// Uniform values in `[-scale, scale]`.
pub(crate) fn rand_tensor<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).expect("shape")
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub(crate) fn randomize<R: Rng>(store: &mut ParamStore<f64>, scale: f64, rng: &mut R) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..=scale));
    }
}

pub(crate) fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, |m, e| if e.is_nan() || e > m { e } else { m })
}

/// Grid shapes whose plane query count is checked, including every preset.
pub fn query_count_matrix() -> Vec<[usize; 3]> {
    let mut dims: Vec<[usize; 3]> =
        ["base", "small", "desk", "bench"].iter().map(|n| EncoderConfig::by_name(n).expect("preset").dims()).collect();
    dims.extend([[1, 1, 1], [4, 4, 2], [3, 5, 7], [200, 200, 16], [64, 32, 1]]);
    dims
}

/// Plane query counts against `H*W + D*H + W*D` and against the sizes of
/// the registered query tensors, plus the dense voxel count of the largest
/// preset.
pub fn query_count_suite() -> Result<SuiteReport> {
    timed("representation size", || {
        let mut formula = Check::new("query_count = HW + DH + WD", 0.0);
        let mut registered = Check::new("registered query rows", 0.0);
        for dims in query_count_matrix() {
            let [h, w, d] = dims;
            formula.expect(query_count(dims) == h * w + d * h + w * d);
            let mut store: ParamStore<f64> = ParamStore::new();
            let q = init_queries(&mut store, "q", dims, 1, 0)?;
            let rows: usize = q.queries.iter().map(|&id| store.value(id).numel()).sum();
            registered.expect(rows == query_count(dims));
        }
        let base = EncoderConfig::base();
        let mut paper = Check::new("100x100x8: 11600 queries, 80000 voxels", 0.0);
        paper.expect(
            base.dims() == [100, 100, 8] && query_count(base.dims()) == 11_600 && base.grid.n_voxels() == 80_000,
        );
        Ok(vec![formula, registered, paper])
    })
}

/// Every suite at its acceptance size.
pub fn run_all() -> Result<Vec<SuiteReport>> {
    Ok(vec![
        geometry_suite(200)?,
        attention_suite(50)?,
        gradient_suite()?,
        query_count_suite()?,
        loss_suite()?,
        voxel_metric_suite(10_000)?,
    ])
}
