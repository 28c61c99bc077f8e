//! Piecewise-smooth maps between boxes with numeric k-dilation
//! certification.
//!
//! A map's k-dilation is the supremum over points of the product of the k
//! largest singular values of its Jacobian — the factor by which it can
//! stretch k-dimensional area. Maps here are [`EvaluableMap`]s: an
//! evaluation kernel plus piece bookkeeping so Jacobians are exact on each
//! smoothness cell and finite differences never straddle a crease
//! silently. Certificates are sampled lower estimates of the sup with
//! crease-stratified sampling; they are reported as such, never as proofs.

pub mod fold;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::qmc;
use crate::rect::Rectangle;
use crate::threads;

/// Identifier of a smoothness cell. Composition concatenates the inner and
/// outer ids, so the path through nested constructions stays visible.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PieceId(pub Vec<i64>);

impl PieceId {
    pub fn leaf(id: i64) -> PieceId {
        PieceId(vec![id])
    }

    fn concat(&self, other: &PieceId) -> PieceId {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        PieceId(v)
    }
}

/// How Jacobians are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianMode {
    /// The kernel returns an exact derivative on each piece.
    ExactPiecewise,
    /// Central finite differences with the given absolute step.
    FiniteDifference { h: f64 },
}

/// Evaluation kernel behind an [`EvaluableMap`].
///
/// `eval` must be defined on the whole domain box. Kernels with internal
/// creases should implement `piece_id` (so stencils can detect straddling)
/// and `jacobian` (exact per-piece derivative). `near_crease` turns a
/// unit-cube parameter into a domain point close to a piece boundary; the
/// default spreads points over the domain, which is the right thing for
/// crease-free kernels.
pub trait MapKernel: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;

    fn piece_id(&self, _x: &[f64]) -> Option<PieceId> {
        Some(PieceId::leaf(0))
    }

    /// Exact Jacobian at `x`, if the kernel can provide one. `None` means
    /// "fall back to finite differences" (or, on a crease, "reject").
    fn jacobian(&self, _x: &[f64]) -> Option<Mat> {
        None
    }

    /// Maps a unit-cube parameter to a domain point near a piece boundary.
    fn near_crease(&self, u: &[f64], domain: &Rectangle) -> Vec<f64> {
        u.iter()
            .zip(domain.dims())
            .map(|(ui, d)| ui * d)
            .collect()
    }

    /// Exact preimage enumeration for `y`, as (point, Jacobian sign)
    /// pairs, when the kernel's piece structure supports it. Used by the
    /// degree checker; `None` means "use the generic numeric search".
    fn preimages(&self, _y: &[f64], _tol: f64) -> Option<Vec<(Vec<f64>, i32)>> {
        None
    }
}

/// A piecewise-smooth map from a box to (a neighborhood of) a box.
#[derive(Clone)]
pub struct EvaluableMap {
    pub domain: Rectangle,
    pub codomain_hint: Rectangle,
    pub jacobian_mode: JacobianMode,
    /// Outputs may exceed the codomain box by this relative slack before
    /// certification flags the map as broken.
    pub codomain_slack: f64,
    kernel: Arc<dyn MapKernel>,
}

/// Relative finite-difference step, scaled by the smallest domain side.
const FD_STEP_REL: f64 = 1e-5;
/// Relative disagreement between the h and h/2 stencils that flags a
/// hidden crease under finite differences.
const FD_CREASE_TOL: f64 = 1e-3;

impl EvaluableMap {
    pub fn new(
        domain: Rectangle,
        codomain_hint: Rectangle,
        jacobian_mode: JacobianMode,
        kernel: Arc<dyn MapKernel>,
    ) -> EvaluableMap {
        debug_assert_eq!(kernel.dim_in(), domain.n());
        debug_assert_eq!(kernel.dim_out(), codomain_hint.n());
        EvaluableMap {
            domain,
            codomain_hint,
            jacobian_mode,
            codomain_slack: 1.01,
            kernel,
        }
    }

    /// Exact-Jacobian map with the default finite-difference fallback step.
    pub fn exact(domain: Rectangle, codomain_hint: Rectangle, kernel: Arc<dyn MapKernel>) -> Self {
        EvaluableMap::new(domain, codomain_hint, JacobianMode::ExactPiecewise, kernel)
    }

    pub fn kernel(&self) -> &Arc<dyn MapKernel> {
        &self.kernel
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.kernel.eval(x)
    }

    pub fn piece_id(&self, x: &[f64]) -> Option<PieceId> {
        self.kernel.piece_id(x)
    }

    fn fd_step(&self) -> f64 {
        FD_STEP_REL * self.domain.side(0)
    }

    /// Jacobian at `x`; `Err(Crease)` when `x` is too close to a piece
    /// boundary for the answer to be trustworthy (the caller resamples).
    pub fn jacobian_at(&self, x: &[f64]) -> Result<Mat> {
        match self.jacobian_mode {
            JacobianMode::ExactPiecewise => match self.kernel.jacobian(x) {
                Some(j) => Ok(j),
                None => Err(Error::Crease(x.to_vec())),
            },
            JacobianMode::FiniteDifference { h } => self.fd_jacobian(x, h),
        }
    }

    fn fd_jacobian(&self, x: &[f64], h: f64) -> Result<Mat> {
        // All stencil points must sit in one piece; otherwise the
        // difference quotient mixes two linear regimes.
        if let Some(base) = self.kernel.piece_id(x) {
            for i in 0..x.len() {
                for s in [-1.0, 1.0] {
                    let mut p = x.to_vec();
                    p[i] += s * h;
                    match self.kernel.piece_id(&p) {
                        Some(id) if id == base => {}
                        _ => return Err(Error::Crease(x.to_vec())),
                    }
                }
            }
        }
        let j1 = self.fd_jacobian_raw(x, h);
        let j2 = self.fd_jacobian_raw(x, h / 2.0);
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (a, b) in j1.a.iter().zip(&j2.a) {
            diff += (a - b) * (a - b);
            scale += b * b;
        }
        if diff.sqrt() > FD_CREASE_TOL * (1.0 + scale.sqrt()) {
            return Err(Error::Crease(x.to_vec()));
        }
        Ok(j2)
    }

    fn fd_jacobian_raw(&self, x: &[f64], h: f64) -> Mat {
        let n_in = x.len();
        let n_out = self.codomain_hint.n();
        let mut j = Mat::zeros(n_out, n_in);
        for i in 0..n_in {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fp = self.kernel.eval(&xp);
            let fm = self.kernel.eval(&xm);
            for r in 0..n_out {
                j.set(r, i, (fp[r] - fm[r]) / (2.0 * h));
            }
        }
        j
    }

    /// Product of the k largest singular values of the Jacobian at `x`.
    pub fn k_dilation_at(&self, x: &[f64], k: usize) -> Result<f64> {
        let j = self.jacobian_at(x)?;
        Ok(linalg::top_k_sv_product(&j, k))
    }

    /// Samples the k-dilation over the domain and returns the observed
    /// supremum with quantiles. Deterministic under a fixed seed; at least
    /// a tenth of the samples are placed near piece boundaries, where
    /// dilation extremes of piecewise maps concentrate.
    pub fn certify_k_dilation(
        &self,
        k: usize,
        samples: usize,
        seed: u64,
    ) -> Result<DilationCertificate> {
        if samples < 1 {
            return Err(Error::precondition("need at least one sample".to_string()));
        }
        let n = self.domain.n();
        let strat = samples.div_ceil(10);
        let bulk = samples - strat;
        use rand::Rng;
        let mut shift_rng = qmc::rng_for(seed, "dilation-cert-shift");
        let shift: Vec<f64> = (0..n).map(|_| shift_rng.gen::<f64>()).collect();

        let results: Vec<(Option<(f64, Vec<f64>)>, bool, bool)> = threads::par_map(samples, |i| {
            let u: Vec<f64> = qmc::halton(i as u64, n)
                .iter()
                .zip(&shift)
                .map(|(h, s)| (h + s).fract())
                .collect();
            let near = i >= bulk;
            let mut x = if near {
                let mut p = self.kernel.near_crease(&u, &self.domain);
                // Stay strictly inside the domain so stencils fit.
                for (d, v) in p.iter_mut().enumerate() {
                    let side = self.domain.side(d);
                    *v = v.clamp(1e-9 * side, (1.0 - 1e-9) * side);
                }
                p
            } else {
                u.iter()
                    .zip(self.domain.dims())
                    .map(|(ui, d)| ui * d)
                    .collect()
            };
            let mut jitter = qmc::rng_for(seed ^ (i as u64), "dilation-cert-jitter");
            let mut out_of_codomain = false;
            for _attempt in 0..4 {
                let y = self.kernel.eval(&x);
                for (d, v) in y.iter().enumerate() {
                    let lim = self.codomain_slack * self.codomain_hint.side(d)
                        + 1e-9 * self.codomain_hint.side(d);
                    if *v < -(self.codomain_slack - 1.0) * self.codomain_hint.side(d) - 1e-9
                        || *v > lim
                    {
                        out_of_codomain = true;
                    }
                }
                match self.k_dilation_at(&x, k) {
                    Ok(v) => return (Some((v, x)), near, out_of_codomain),
                    Err(Error::Crease(_)) => {
                        for (d, v) in x.iter_mut().enumerate() {
                            let side = self.domain.side(d);
                            *v = (*v + jitter.gen_range(-1e-3..1e-3) * side)
                                .clamp(1e-9 * side, (1.0 - 1e-9) * side);
                        }
                    }
                    Err(_) => break,
                }
            }
            (None, near, out_of_codomain)
        });

        let mut values: Vec<f64> = Vec::with_capacity(samples);
        let mut rejected = 0usize;
        let mut near_crease = 0usize;
        let mut sup = f64::NEG_INFINITY;
        let mut max_location = Vec::new();
        let mut out_count = 0usize;
        for (r, near, out) in results {
            if near {
                near_crease += 1;
            }
            if out {
                out_count += 1;
            }
            match r {
                Some((v, x)) => {
                    if v > sup {
                        sup = v;
                        max_location = x;
                    }
                    values.push(v);
                }
                None => rejected += 1,
            }
        }
        if out_count > 0 {
            return Err(Error::Geometry(format!(
                "{out_count} of {samples} samples mapped outside the codomain box \
                 (slack {})",
                self.codomain_slack
            )));
        }
        if rejected * 2 > samples {
            return Err(Error::Geometry(format!(
                "{rejected} of {samples} samples rejected as crease-straddling; \
                 piece structure is inconsistent with evaluation"
            )));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
        Ok(DilationCertificate {
            k,
            sup_estimate: sup,
            sample_count: values.len(),
            rejected_samples: rejected,
            near_crease_count: near_crease,
            quantiles: vec![(0.5, q(0.5)), (0.9, q(0.9)), (0.99, q(0.99))],
            max_location,
            seed,
        })
    }
}

/// Sampled k-dilation summary. `sup_estimate` is a max over retained
/// samples, i.e. a lower estimate of the true supremum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DilationCertificate {
    pub k: usize,
    pub sup_estimate: f64,
    pub sample_count: usize,
    pub rejected_samples: usize,
    pub near_crease_count: usize,
    /// (probability, value) pairs over retained samples.
    pub quantiles: Vec<(f64, f64)>,
    pub max_location: Vec<f64>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Affine kernels and composition
// ---------------------------------------------------------------------------

/// `x -> mat x + shift` with exact constant Jacobian.
pub struct AffineKernel {
    pub mat: Mat,
    pub shift: Vec<f64>,
}

impl MapKernel for AffineKernel {
    fn dim_in(&self) -> usize {
        self.mat.cols
    }
    fn dim_out(&self) -> usize {
        self.mat.rows
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.mat.matvec(x);
        for (yi, s) in y.iter_mut().zip(&self.shift) {
            *yi += s;
        }
        y
    }
    fn jacobian(&self, _x: &[f64]) -> Option<Mat> {
        Some(self.mat.clone())
    }
    fn preimages(&self, y: &[f64], _tol: f64) -> Option<Vec<(Vec<f64>, i32)>> {
        if self.mat.rows != self.mat.cols {
            return None;
        }
        let d = linalg::det(&self.mat);
        if d == 0.0 {
            return None;
        }
        let rhs: Vec<f64> = y.iter().zip(&self.shift).map(|(yi, s)| yi - s).collect();
        let x = linalg::solve(&self.mat, &rhs)?;
        Some(vec![(x, if d > 0.0 { 1 } else { -1 })])
    }
}

/// The identity map on a box.
pub fn identity(r: &Rectangle) -> EvaluableMap {
    let n = r.n();
    EvaluableMap::exact(
        r.clone(),
        r.clone(),
        Arc::new(AffineKernel {
            mat: Mat::identity(n),
            shift: vec![0.0; n],
        }),
    )
}

/// Homothety by `t` on a box.
pub fn scale_map(r: &Rectangle, t: f64) -> Result<EvaluableMap> {
    let n = r.n();
    let mut mat = Mat::zeros(n, n);
    for i in 0..n {
        mat.set(i, i, t);
    }
    Ok(EvaluableMap::exact(
        r.clone(),
        r.scaled(t)?,
        Arc::new(AffineKernel {
            mat,
            shift: vec![0.0; n],
        }),
    ))
}

/// The diagonal linear map sending axis `i` of R onto axis `perm[i]` of S,
/// scaling `[0, R_i]` onto `[0, S_perm[i]]`. Its k-dilation is the product
/// of the k largest axis ratios, constant over the domain.
pub fn linear_between(r: &Rectangle, s: &Rectangle, perm: &[usize]) -> Result<EvaluableMap> {
    let n = r.n();
    if s.n() != n || perm.len() != n {
        return Err(Error::precondition(
            "linear step needs matching dimensions".to_string(),
        ));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::precondition(format!(
                "invalid axis bijection {perm:?}"
            )));
        }
        seen[p] = true;
    }
    let mut mat = Mat::zeros(n, n);
    for i in 0..n {
        mat.set(perm[i], i, s.side(perm[i]) / r.side(i));
    }
    Ok(EvaluableMap::exact(
        r.clone(),
        s.clone(),
        Arc::new(AffineKernel {
            mat,
            shift: vec![0.0; n],
        }),
    ))
}

struct ComposeKernel {
    outer: EvaluableMap,
    inner: EvaluableMap,
}

impl MapKernel for ComposeKernel {
    fn dim_in(&self) -> usize {
        self.inner.domain.n()
    }
    fn dim_out(&self) -> usize {
        self.outer.codomain_hint.n()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.outer.eval(&self.inner.eval(x))
    }
    fn piece_id(&self, x: &[f64]) -> Option<PieceId> {
        let a = self.inner.piece_id(x)?;
        let b = self.outer.piece_id(&self.inner.eval(x))?;
        Some(a.concat(&b))
    }
    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        let ji = self.inner.kernel.jacobian(x)?;
        let jo = self.outer.kernel.jacobian(&self.inner.eval(x))?;
        Some(jo.matmul(&ji))
    }
    fn near_crease(&self, u: &[f64], domain: &Rectangle) -> Vec<f64> {
        // Inner creases are creases of the composite; outer creases pull
        // back through inner and are covered by the bulk samples.
        self.inner.kernel.near_crease(u, domain)
    }
    fn preimages(&self, y: &[f64], tol: f64) -> Option<Vec<(Vec<f64>, i32)>> {
        let mids = self.outer.kernel.preimages(y, tol)?;
        let mut out = Vec::new();
        for (mid, so) in mids {
            for (x, si) in self.inner.kernel.preimages(&mid, tol)? {
                out.push((x, so * si));
            }
        }
        Some(out)
    }
}

/// `outer . inner`. The inner codomain must fit inside the outer domain up
/// to the outer map's slack factor.
pub fn compose(outer: &EvaluableMap, inner: &EvaluableMap) -> Result<EvaluableMap> {
    let mid = inner.codomain_hint.n();
    if outer.domain.n() != mid {
        return Err(Error::precondition(format!(
            "composition dimension mismatch: inner lands in {mid}, outer expects {}",
            outer.domain.n()
        )));
    }
    for i in 0..mid {
        if inner.codomain_hint.side(i) > outer.domain.side(i) * outer.codomain_slack {
            return Err(Error::precondition(format!(
                "inner codomain side {i} ({}) exceeds outer domain side ({})",
                inner.codomain_hint.side(i),
                outer.domain.side(i)
            )));
        }
    }
    let mode = match (outer.jacobian_mode, inner.jacobian_mode) {
        (JacobianMode::ExactPiecewise, JacobianMode::ExactPiecewise) => {
            JacobianMode::ExactPiecewise
        }
        _ => JacobianMode::FiniteDifference {
            h: FD_STEP_REL * inner.domain.side(0),
        },
    };
    Ok(EvaluableMap::new(
        inner.domain.clone(),
        outer.codomain_hint.clone(),
        mode,
        Arc::new(ComposeKernel {
            outer: outer.clone(),
            inner: inner.clone(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// Degree checking
// ---------------------------------------------------------------------------

/// Outcome of sign-counted preimage probing: `probe_degrees[i]` is the sum
/// of Jacobian signs over the preimages found for probe i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegreeReport {
    pub probes: usize,
    pub probe_degrees: Vec<i64>,
    /// Probes that landed too close to a crease image and were redrawn.
    pub resampled: usize,
    pub pass: bool,
    pub seed: u64,
}

/// Estimates the topological degree of `m` by counting sign-weighted
/// preimages of generic interior points of the codomain.
///
/// Kernels with exact piece structure enumerate preimages directly;
/// otherwise preimages are found by dense grid seeding plus a few damped
/// Newton steps per seed, deduplicated. `pass` means every probe summed to
/// +1.
pub fn check_degree(m: &EvaluableMap, probes: usize, seed: u64) -> Result<DegreeReport> {
    use rand::Rng;
    let nc = m.codomain_hint.n();
    let tol = 1e-7 * m.codomain_hint.side(nc - 1).max(1.0);
    let mut rng = qmc::rng_for(seed, "degree-probes");
    let mut degrees = Vec::with_capacity(probes);
    let mut resampled = 0usize;
    for _ in 0..probes {
        let mut deg = None;
        for _attempt in 0..8 {
            // Interior probe, away from the codomain faces where clamping
            // creates non-generic fibers.
            let y: Vec<f64> = (0..nc)
                .map(|d| m.codomain_hint.side(d) * rng.gen_range(0.05..0.95))
                .collect();
            match probe_degree(m, &y, tol) {
                Ok(d) => {
                    deg = Some(d);
                    break;
                }
                Err(Error::Crease(_)) => {
                    resampled += 1;
                }
                Err(e) => return Err(e),
            }
        }
        match deg {
            Some(d) => degrees.push(d),
            None => {
                return Err(Error::Geometry(
                    "degree probe kept landing on crease images".to_string(),
                ))
            }
        }
    }
    let pass = degrees.iter().all(|&d| d == 1);
    Ok(DegreeReport {
        probes,
        probe_degrees: degrees,
        resampled,
        pass,
        seed,
    })
}

fn probe_degree(m: &EvaluableMap, y: &[f64], tol: f64) -> Result<i64> {
    if let Some(pre) = m.kernel.preimages(y, tol) {
        let mut sum = 0i64;
        for (x, sign) in pre {
            // Trust but verify: the claimed preimage must round-trip.
            let fy = m.eval(&x);
            let err: f64 = fy
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if err > 10.0 * tol {
                return Err(Error::Geometry(format!(
                    "kernel-reported preimage misses its probe by {err:.3e}"
                )));
            }
            sum += sign as i64;
        }
        return Ok(sum);
    }
    numeric_probe_degree(m, y, tol)
}

/// Grid seeding + damped Newton. Only square maps are supported (degree
/// needs equal dimensions).
fn numeric_probe_degree(m: &EvaluableMap, y: &[f64], tol: f64) -> Result<i64> {
    let n = m.domain.n();
    if m.codomain_hint.n() != n {
        return Err(Error::Unsupported(
            "degree counting needs equal domain and codomain dimension".to_string(),
        ));
    }
    // Seed density: 9^n seeds would explode for large n; scale the Newton
    // basin radius instead and use a fixed per-axis count.
    let per_axis: usize = match n {
        1 => 33,
        2 => 17,
        3 => 9,
        4 => 6,
        _ => 4,
    };
    let mut roots: Vec<(Vec<f64>, i32)> = Vec::new();
    let mut strides = vec![0usize; n];
    let total = per_axis.pow(n as u32);
    for (d, s) in strides.iter_mut().enumerate() {
        *s = per_axis.pow(d as u32);
    }
    for idx in 0..total {
        let x0: Vec<f64> = (0..n)
            .map(|d| {
                let i = (idx / strides[d]) % per_axis;
                m.domain.side(d) * (i as f64 + 0.5) / per_axis as f64
            })
            .collect();
        if let Some((root, sign)) = newton_root(m, y, &x0, tol) {
            let dup = roots.iter().any(|(r, _)| {
                r.iter()
                    .zip(&root)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    < 1e-6 * m.domain.side(n - 1)
            });
            if !dup {
                roots.push((root, sign));
            }
        }
    }
    // A root squarely on a piece boundary makes the sign ambiguous; treat
    // as a bad probe so the caller redraws.
    for (r, _) in &roots {
        if m.jacobian_at(r).is_err() {
            return Err(Error::Crease(r.clone()));
        }
    }
    Ok(roots.iter().map(|(_, s)| *s as i64).sum())
}

fn newton_root(m: &EvaluableMap, y: &[f64], x0: &[f64], tol: f64) -> Option<(Vec<f64>, i32)> {
    let n = x0.len();
    let mut x = x0.to_vec();
    for _it in 0..12 {
        let f = m.eval(&x);
        let r: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
        let err = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if err < tol {
            let j = m.jacobian_at(&x).ok()?;
            let d = linalg::det(&j);
            if d == 0.0 {
                return None;
            }
            // Containment: roots must lie in the (closed) domain box.
            for (d_i, xi) in x.iter().enumerate() {
                let side = m.domain.side(d_i);
                if *xi < -1e-9 * side || *xi > side * (1.0 + 1e-9) {
                    return None;
                }
            }
            return Some((x, if d > 0.0 { 1 } else { -1 }));
        }
        let j = m.jacobian_at(&x).ok()?;
        let step = linalg::solve(&j, &r)?;
        // Damped update, clamped into a mild inflation of the domain so
        // the iteration cannot wander off.
        for i in 0..n {
            let side = m.domain.side(i);
            x[i] = (x[i] - step[i]).clamp(-0.05 * side, 1.05 * side);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rect(dims: &[f64]) -> Rectangle {
        Rectangle::new(dims).unwrap()
    }

    fn assert_rel(a: f64, b: f64, tol: f64, msg: &str) {
        assert!(
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())),
            "{msg}: {a} vs {b}"
        );
    }

    #[test]
    fn diagonal_map_dilations() {
        let r = rect(&[1.0, 1.0, 1.0]);
        let s = rect(&[1.0, 2.0, 3.0]);
        let m = linear_between(&r, &s, &[0, 1, 2]).unwrap();
        let x = [0.3, 0.4, 0.5];
        assert_rel(m.k_dilation_at(&x, 2).unwrap(), 6.0, 1e-12, "top-2");
        assert_rel(m.k_dilation_at(&x, 3).unwrap(), 6.0, 1e-12, "top-3");
        let id = identity(&r);
        for k in 1..=3 {
            assert_rel(id.k_dilation_at(&x, k).unwrap(), 1.0, 1e-12, "identity");
        }
    }

    #[test]
    fn linear_dilation_is_position_independent() {
        let mut rng = qmc::rng_for(4, "linear-pos");
        let r = rect(&[1.0, 2.0, 3.0, 4.0]);
        let s = rect(&[0.5, 1.0, 6.0, 9.0]);
        let m = linear_between(&r, &s, &[2, 0, 3, 1]).unwrap();
        let base = m.k_dilation_at(&[0.1, 0.1, 0.1, 0.1], 2).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|d| rng.gen::<f64>() * r.side(d)).collect();
            assert_rel(m.k_dilation_at(&x, 2).unwrap(), base, 1e-12, "const");
        }
    }

    // Independent check of the top-k singular value product: maximize
    // sqrt(det (JF)^T (JF)) over orthonormal k-frames F, by random frames
    // plus subspace iteration (which uses only matmul and Gram-Schmidt,
    // not the Jacobi SVD path).
    pub(crate) fn frame_oracle(j: &Mat, k: usize, trials: usize, seed: u64) -> f64 {
        let n = j.cols;
        let mut rng = qmc::rng_for(seed, "frame-oracle");
        let gram = j.transpose().matmul(j);
        let mut best: f64 = 0.0;
        let value = |f: &Mat| -> f64 {
            let jf = j.matmul(f);
            linalg::det(&jf.transpose().matmul(&jf)).max(0.0).sqrt()
        };
        for t in 0..trials {
            let mut f = linalg::random_frame(&mut rng, n, k);
            if t % 2 == 0 {
                // Subspace iteration drives the frame toward the dominant
                // invariant subspace; every iterate is a valid lower bound.
                for _ in 0..40 {
                    let g = gram.matmul(&f);
                    match linalg::orthonormalize_columns(&g) {
                        Some(q) => f = q,
                        None => break,
                    }
                    best = best.max(value(&f));
                }
            }
            best = best.max(value(&f));
        }
        best
    }

    #[test]
    fn top_k_product_matches_frame_maximization() {
        let mut rng = qmc::rng_for(9, "frame-vs-svd");
        for _ in 0..20 {
            let n = rng.gen_range(2..=5);
            let k = rng.gen_range(1..=n);
            let j = linalg::gaussian_matrix(&mut rng, n, n);
            let direct = linalg::top_k_sv_product(&j, k);
            let oracle = frame_oracle(&j, k, 200, 31);
            assert!(
                oracle <= direct * (1.0 + 1e-9),
                "oracle overshoots: {oracle} > {direct}"
            );
            assert!(
                oracle >= direct * 0.995,
                "oracle too far below: {oracle} < {direct}"
            );
        }
    }

    #[test]
    fn top_products_log_convexity_inequality() {
        // For singular values s1 >= s2 >= ..., the product of the top k+i
        // is at most (product of top k)^{(k+i)/k}.
        let mut rng = qmc::rng_for(10, "log-convexity");
        for _ in 0..100 {
            let n = rng.gen_range(2..=7);
            let j = linalg::gaussian_matrix(&mut rng, n, n);
            let sv = linalg::singular_values(&j);
            for k in 1..n {
                let pk: f64 = sv[..k].iter().product();
                for i in 1..=(n - k) {
                    let pki: f64 = sv[..k + i].iter().product();
                    let bound = pk.powf((k + i) as f64 / k as f64);
                    assert!(
                        pki <= bound * (1.0 + 1e-9),
                        "n={n} k={k} i={i}: {pki} > {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn certificates_on_simple_maps() {
        let cube = rect(&[1.0, 1.0, 1.0]);
        let id = identity(&cube);
        let c = id.certify_k_dilation(2, 500, 7).unwrap();
        assert_rel(c.sup_estimate, 1.0, 1e-12, "identity sup");
        assert_eq!(c.rejected_samples, 0);
        assert!(c.near_crease_count >= 50);

        let m = linear_between(&cube, &rect(&[1.0, 2.0, 3.0]), &[0, 1, 2]).unwrap();
        let c = m.certify_k_dilation(3, 200, 7).unwrap();
        assert_rel(c.sup_estimate, 6.0, 1e-12, "diag sup");
    }

    #[test]
    fn certificates_are_deterministic_and_monotone() {
        let r = rect(&[1.0, 2.0, 3.0]);
        let m = linear_between(&r, &rect(&[0.5, 2.0, 9.0]), &[1, 0, 2]).unwrap();
        let a = m.certify_k_dilation(2, 400, 99).unwrap();
        let b = m.certify_k_dilation(2, 400, 99).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let big = m.certify_k_dilation(2, 800, 99).unwrap();
        assert!(big.sup_estimate >= a.sup_estimate - 1e-15);
    }

    #[test]
    fn composition_chains_scaling() {
        let cube = rect(&[1.0, 1.0, 1.0]);
        let s3 = scale_map(&cube, 3.0).unwrap();
        let s2 = scale_map(&rect(&[3.0, 3.0, 3.0]), 2.0).unwrap();
        let m = compose(&s2, &s3).unwrap();
        let c = m.certify_k_dilation(2, 100, 1).unwrap();
        assert_rel(c.sup_estimate, 36.0, 1e-12, "scale(2).scale(3) 2-dilation");
        let y = m.eval(&[0.5, 0.5, 0.5]);
        assert_rel(y[0], 3.0, 1e-12, "pointwise");

        // Identity is neutral.
        let idm = compose(&identity(&rect(&[6.0, 6.0, 6.0])), &m).unwrap();
        let y2 = idm.eval(&[0.5, 0.5, 0.5]);
        assert_rel(y2[2], y[2], 1e-12, "identity neutral");

        // Incompatible middle boxes are refused.
        assert!(compose(&s3, &s3).is_err());
    }

    #[test]
    fn composition_submultiplicative_on_linear_pairs() {
        let mut rng = qmc::rng_for(21, "submult");
        let cube = rect(&[1.0, 1.0, 1.0]);
        for _ in 0..10 {
            let dims: Vec<f64> = (0..3).map(|_| rng.gen_range(1.0..4.0)).collect();
            let mid = rect(&dims);
            let dims2: Vec<f64> = (0..3).map(|_| rng.gen_range(1.0..4.0)).collect();
            let out = rect(&dims2);
            let a = linear_between(&mid, &out, &[2, 1, 0]).unwrap();
            let b = linear_between(&cube, &mid, &[0, 2, 1]).unwrap();
            let ab = compose(&a, &b).unwrap();
            let k = 2;
            let ca = a.certify_k_dilation(k, 50, 5).unwrap().sup_estimate;
            let cb = b.certify_k_dilation(k, 50, 5).unwrap().sup_estimate;
            let cab = ab.certify_k_dilation(k, 50, 5).unwrap().sup_estimate;
            assert!(
                cab <= 1.02 * ca * cb,
                "submultiplicativity violated: {cab} vs {ca}*{cb}"
            );
        }
    }

    #[test]
    fn degree_of_identity_and_reflection() {
        let cube = rect(&[1.0, 1.0]);
        let id = identity(&cube);
        let rep = check_degree(&id, 20, 3).unwrap();
        assert!(rep.pass);
        assert!(rep.probe_degrees.iter().all(|&d| d == 1));

        // Reflection across the first axis: orientation-reversing, every
        // probe counts -1.
        let mut mat = Mat::identity(2);
        mat.set(0, 0, -1.0);
        let refl = EvaluableMap::exact(
            cube.clone(),
            cube.clone(),
            Arc::new(AffineKernel {
                mat,
                shift: vec![1.0, 0.0],
            }),
        );
        let rep = check_degree(&refl, 20, 3).unwrap();
        assert!(!rep.pass);
        assert!(rep.probe_degrees.iter().all(|&d| d == -1));
    }

    #[test]
    fn fd_jacobian_matches_exact_on_affine() {
        let r = rect(&[1.0, 2.0]);
        let s = rect(&[2.0, 3.0]);
        let exact = linear_between(&r, &s, &[1, 0]).unwrap();
        let fd = EvaluableMap::new(
            r.clone(),
            s.clone(),
            JacobianMode::FiniteDifference { h: 1e-5 },
            exact.kernel().clone(),
        );
        let je = exact.jacobian_at(&[0.5, 0.7]).unwrap();
        let jf = fd.jacobian_at(&[0.5, 0.7]).unwrap();
        for (a, b) in je.a.iter().zip(&jf.a) {
            assert_rel(*a, *b, 1e-6, "fd vs exact");
        }
    }
}
