//! Planning degree-one maps between boxes with bounded top-dimension
//! contraction cost.
//!
//! A plan carries the source box onto the target through a short chain of
//! steps: diagonal linear steps whose (n-1)-dilation is exact arithmetic,
//! snake steps (collapse onto the last k axes) carrying the frozen
//! certification budget, and at most one final homothety. Planning works
//! on the normalized problem — scale the target so the degree-one lower
//! bound equals one, which makes every tail-weighted side product of the
//! source dominate the target's — then routes on which source axis falls
//! short and pays the lower bound in the closing scale step. The total
//! bound of a plan is the product of the per-step bounds, so it never
//! exceeds the snake budget times the lower bound for the pair.

use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::error::{Error, Result};
use crate::map::{self, EvaluableMap};
use crate::rect::Rectangle;
use crate::snake::{self, build_snake, SNAKE_DILATION_BUDGET};

/// Relative tolerance for routing ties (equal axes, unit scale factors).
const TIE_TOL: f64 = 1e-12;
/// Relative tolerance for the inequality lists the construction relies
/// on. Once the target is normalized these hold by algebra; a violation
/// here is a planner bug, not a bad input.
const CHECK_TOL: f64 = 1e-9;

/// One step of a plan.
///
/// Linear steps record the axis bijection and the exact product of the
/// n-1 largest scaling factors. Snake steps collapse onto the last `k`
/// axes and are charged the frozen dilation budget; only `k = 2` steps
/// can be realized as evaluable maps. Scale steps are homotheties.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanStep {
    Linear {
        #[serde(rename = "in")]
        input: Vec<f64>,
        out: Vec<f64>,
        perm: Vec<usize>,
        dilation: f64,
    },
    Snake {
        #[serde(rename = "in")]
        input: Vec<f64>,
        out: Vec<f64>,
        k: usize,
        budget: f64,
    },
    Scale {
        factor: f64,
        dilation: f64,
    },
}

impl PlanStep {
    /// The (n-1)-dilation bound this step contributes to the total.
    pub fn dilation_bound(&self) -> f64 {
        match self {
            PlanStep::Linear { dilation, .. } => *dilation,
            PlanStep::Snake { budget, .. } => *budget,
            PlanStep::Scale { dilation, .. } => *dilation,
        }
    }
}

/// A chain of steps from a source box to a target box together with the
/// product of the per-step (n-1)-dilation bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapPlan {
    pub steps: Vec<PlanStep>,
    pub total_bound: f64,
    /// Whether every step can be realized as an evaluable map. Snake
    /// steps with k >= 3 stay symbolic: the plan is still valid as
    /// certified arithmetic but cannot be evaluated pointwise.
    pub evaluable: bool,
}

impl MapPlan {
    /// Re-checks the plan from its recorded data alone: step chaining,
    /// sortedness of every intermediate box, per-step dilation
    /// arithmetic, the contracting-or-expanding shape of linear steps,
    /// snake hypotheses, and the total bound.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::verification("plan has no steps"));
        }
        let mut dims: Option<Vec<f64>> = None;
        for (idx, step) in self.steps.iter().enumerate() {
            match step {
                PlanStep::Linear {
                    input,
                    out,
                    perm,
                    dilation,
                } => {
                    let n = input.len();
                    if out.len() != n || perm.len() != n {
                        return Err(Error::verification(format!(
                            "step {idx}: linear dims and permutation must agree on length"
                        )));
                    }
                    let mut seen = vec![false; n];
                    for &p in perm {
                        if p >= n || seen[p] {
                            return Err(Error::verification(format!(
                                "step {idx}: {perm:?} is not an axis bijection"
                            )));
                        }
                        seen[p] = true;
                    }
                    check_chain(idx, dims.as_deref(), input)?;
                    check_ascending_step(idx, input)?;
                    check_ascending_step(idx, out)?;
                    let mut f: Vec<f64> = (0..n).map(|i| out[perm[i]] / input[i]).collect();
                    f.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    let top: f64 = f[..n - 1].iter().product();
                    if !close(top, *dilation, CHECK_TOL) {
                        return Err(Error::verification(format!(
                            "step {idx}: recorded dilation {dilation} differs from the \
                             factor product {top}"
                        )));
                    }
                    let prod: f64 = f.iter().product();
                    let min_sub = prod / f[0];
                    if *dilation > 1.0 + TIE_TOL && min_sub < 1.0 - TIE_TOL {
                        return Err(Error::verification(format!(
                            "step {idx}: linear step is neither contracting nor expanding \
                             (dilation {dilation}, smallest subproduct {min_sub})"
                        )));
                    }
                    dims = Some(out.clone());
                }
                PlanStep::Snake {
                    input,
                    out,
                    k,
                    budget,
                } => {
                    let n = input.len();
                    if out.len() != n {
                        return Err(Error::verification(format!(
                            "step {idx}: snake dims must agree on length"
                        )));
                    }
                    if *k < 2 || *k > n.saturating_sub(1) {
                        return Err(Error::verification(format!(
                            "step {idx}: snake k = {k} outside 2..={}",
                            n - 1
                        )));
                    }
                    if !(*budget > 0.0) {
                        return Err(Error::verification(format!(
                            "step {idx}: snake budget must be positive"
                        )));
                    }
                    check_chain(idx, dims.as_deref(), input)?;
                    check_ascending_step(idx, input)?;
                    check_ascending_step(idx, out)?;
                    let fr = Rectangle::new(input)?;
                    let to = Rectangle::new(out)?;
                    if let Err(e) = snake::check_hypotheses(&fr, &to, *k) {
                        return Err(Error::verification(format!(
                            "step {idx}: snake hypotheses fail: {e}"
                        )));
                    }
                    dims = Some(out.clone());
                }
                PlanStep::Scale { factor, dilation } => {
                    let Some(cur) = dims.as_ref() else {
                        return Err(Error::verification(format!(
                            "step {idx}: scale step needs a predecessor to fix its dimension"
                        )));
                    };
                    if !(*factor > 0.0) {
                        return Err(Error::verification(format!(
                            "step {idx}: scale factor must be positive"
                        )));
                    }
                    let expect = factor.powi(cur.len() as i32 - 1);
                    if !close(expect, *dilation, CHECK_TOL) {
                        return Err(Error::verification(format!(
                            "step {idx}: scale dilation {dilation} differs from \
                             factor^(n-1) = {expect}"
                        )));
                    }
                    dims = Some(cur.iter().map(|d| d * factor).collect());
                }
            }
        }
        let prod: f64 = self.steps.iter().map(PlanStep::dilation_bound).product();
        if !close(prod, self.total_bound, CHECK_TOL) {
            return Err(Error::verification(format!(
                "total bound {} differs from the step product {prod}",
                self.total_bound
            )));
        }
        Ok(())
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

fn check_chain(idx: usize, prev: Option<&[f64]>, input: &[f64]) -> Result<()> {
    let Some(prev) = prev else {
        return Ok(());
    };
    if prev.len() != input.len() || prev.iter().zip(input).any(|(a, b)| !close(*a, *b, CHECK_TOL)) {
        return Err(Error::verification(format!(
            "step {idx}: input dims {input:?} do not chain from {prev:?}"
        )));
    }
    Ok(())
}

fn check_ascending_step(idx: usize, dims: &[f64]) -> Result<()> {
    if ensure_ascending(dims).is_err() {
        return Err(Error::verification(format!(
            "step {idx}: dims {dims:?} are not sorted ascending"
        )));
    }
    Ok(())
}

fn ensure_ascending(dims: &[f64]) -> Result<()> {
    for w in dims.windows(2) {
        if w[1] < w[0] * (1.0 - CHECK_TOL) {
            return Err(Error::verification(format!(
                "intermediate dims left ascending order: {dims:?}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Step constructors
// ---------------------------------------------------------------------------

fn linear_step(from: &[f64], to: &[f64]) -> PlanStep {
    let n = from.len();
    let mut f: Vec<f64> = from.iter().zip(to).map(|(a, b)| b / a).collect();
    f.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let dilation: f64 = f[..n - 1].iter().product();
    PlanStep::Linear {
        input: from.to_vec(),
        out: to.to_vec(),
        perm: (0..n).collect(),
        dilation,
    }
}

fn identity_step(dims: &[f64]) -> PlanStep {
    PlanStep::Linear {
        input: dims.to_vec(),
        out: dims.to_vec(),
        perm: (0..dims.len()).collect(),
        dilation: 1.0,
    }
}

/// A linear step that the construction promises is (n-1)-contracting;
/// anything else is a planner bug.
fn contracting_step(from: &[f64], to: &[f64]) -> Result<PlanStep> {
    let st = linear_step(from, to);
    if let PlanStep::Linear { dilation, .. } = &st {
        if *dilation > 1.0 + TIE_TOL {
            return Err(Error::verification(format!(
                "planned linear step is not contracting: dilation {dilation} \
                 for {from:?} -> {to:?}"
            )));
        }
    }
    Ok(st)
}

fn snake_step(from: &[f64], to: &[f64], k: usize) -> Result<PlanStep> {
    let fr = Rectangle::new(from)?;
    let to_r = Rectangle::new(to)?;
    if let Err(e) = snake::check_hypotheses(&fr, &to_r, k) {
        return Err(Error::verification(format!(
            "planned snake step unusable: {e}"
        )));
    }
    Ok(PlanStep::Snake {
        input: from.to_vec(),
        out: to.to_vec(),
        k,
        budget: SNAKE_DILATION_BUDGET,
    })
}

fn finish(steps: Vec<PlanStep>) -> MapPlan {
    let total_bound = steps.iter().map(PlanStep::dilation_bound).product();
    let evaluable = steps
        .iter()
        .all(|s| !matches!(s, PlanStep::Snake { k, .. } if *k != 2));
    MapPlan {
        steps,
        total_bound,
        evaluable,
    }
}

// ---------------------------------------------------------------------------
// Domination checks
// ---------------------------------------------------------------------------

/// head(1..=l) * tail(l+1..=n)^((n-l-1)/(n-l)) over all axes.
fn star(dims: &[f64], l: usize) -> f64 {
    let n = dims.len();
    let head: f64 = dims[..l].iter().product();
    let tail: f64 = dims[l..].iter().product();
    head * tail.powf((n - l - 1) as f64 / (n - l) as f64)
}

/// Same shape with the first axis dropped from the head.
fn star2(dims: &[f64], l: usize) -> f64 {
    let n = dims.len();
    let head: f64 = dims[1..l].iter().product();
    let tail: f64 = dims[l..].iter().product();
    head * tail.powf((n - l - 1) as f64 / (n - l) as f64)
}

/// The full domination list a normalized pair satisfies: every
/// tail-weighted product of the source at least the target's, plus the
/// product over all axes but the first.
fn star_violation(r: &[f64], s: &[f64]) -> Option<String> {
    let n = r.len();
    for l in 1..n {
        let (a, b) = (star(r, l), star(s, l));
        if a < b * (1.0 - CHECK_TOL) {
            return Some(format!(
                "tail-weighted product at depth {l}: source {a} < target {b}"
            ));
        }
    }
    let (a, b): (f64, f64) = (r[1..].iter().product(), s[1..].iter().product());
    if a < b * (1.0 - CHECK_TOL) {
        return Some(format!("tail product: source {a} < target {b}"));
    }
    None
}

/// The depth-p descent invariant: first axes equal, prefix products of
/// the folded axes dominate through depth p, tail-weighted products
/// dominate from depth p on, and the full folded product dominates.
fn cp_violation(r: &[f64], s: &[f64], p: usize) -> Option<String> {
    let n = r.len();
    if !close(r[0], s[0], CHECK_TOL) {
        return Some(format!("first axes differ: {} vs {}", r[0], s[0]));
    }
    let mut pr = 1.0;
    let mut ps = 1.0;
    for a in 2..=p {
        pr *= r[a - 1];
        ps *= s[a - 1];
        if pr < ps * (1.0 - CHECK_TOL) {
            return Some(format!(
                "prefix product at depth {a}: source {pr} < target {ps}"
            ));
        }
    }
    for l in p.max(1)..n {
        let (a, b) = (star2(r, l), star2(s, l));
        if a < b * (1.0 - CHECK_TOL) {
            return Some(format!(
                "tail-weighted product at depth {l}: source {a} < target {b}"
            ));
        }
    }
    let (a, b): (f64, f64) = (r[1..].iter().product(), s[1..].iter().product());
    if a < b * (1.0 - CHECK_TOL) {
        return Some(format!("tail product: source {a} < target {b}"));
    }
    None
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

/// Plans a degree-one map from R onto S.
///
/// The total bound is the product of the per-step bounds and is at most
/// the snake budget times the degree-one lower bound for the pair. Needs
/// n >= 3; both boxes must share a dimension.
pub fn plan_map(r: &Rectangle, s: &Rectangle) -> Result<MapPlan> {
    let n = r.n();
    if s.n() != n {
        return Err(Error::precondition(format!(
            "source and target must share a dimension; got {n} and {}",
            s.n()
        )));
    }
    if n < 3 {
        return Err(Error::Unsupported(format!(
            "planning needs n >= 3; got n = {n}"
        )));
    }
    let lower = bounds::thm2_lower_bound(r, s)?;
    let t = lower.value.powf(-1.0 / (n as f64 - 1.0));
    let (target, scale) = if close(t, 1.0, TIE_TOL) {
        (s.clone(), None)
    } else {
        (
            s.scaled(t)?,
            Some(PlanStep::Scale {
                factor: 1.0 / t,
                dilation: lower.value,
            }),
        )
    };
    // Normalizing divides every lower-bound monomial by the lower bound
    // itself, so every monomial is now at most one — which is exactly
    // the domination list the constructions below need.
    if let Some(msg) = star_violation(r.dims(), target.dims()) {
        return Err(Error::verification(format!(
            "normalized target escapes domination: {msg}"
        )));
    }
    let mut steps = plan_normalized(r, &target)?;
    if let Some(sc) = scale {
        steps.push(sc);
    }
    Ok(finish(steps))
}

fn plan_normalized(r: &Rectangle, s: &Rectangle) -> Result<Vec<PlanStep>> {
    if r.approx_eq(s, TIE_TOL) {
        return Ok(vec![identity_step(r.dims())]);
    }
    if r.n() == 3 {
        plan3(r, s)
    } else {
        plan_high(r, s)
    }
}

fn plan3(r: &Rectangle, s: &Rectangle) -> Result<Vec<PlanStep>> {
    let (r1, r2, r3) = (r.side(0), r.side(1), r.side(2));
    let (s1, s2) = (s.side(0), s.side(1));
    if r1 < s1 * (1.0 - TIE_TOL) {
        // Deficient first axis: trade the long axes down to lift it to
        // the target's, then snake.
        let t = vec![s1, r2 * r1 / s1, r3 * r1 / s1];
        ensure_ascending(&t)?;
        Ok(vec![
            contracting_step(r.dims(), &t)?,
            snake_step(&t, s.dims(), 2)?,
        ])
    } else if r2 < s2 * (1.0 - TIE_TOL) {
        // Deficient middle axis: lift it to the target's the same way;
        // what remains is a plain contraction.
        let t = vec![r1 * r2 / s2, s2, r3 * r2 / s2];
        ensure_ascending(&t)?;
        Ok(vec![
            contracting_step(r.dims(), &t)?,
            contracting_step(&t, s.dims())?,
        ])
    } else if r1 > s1 * (1.0 + TIE_TOL) {
        // Source dominates axis by axis: spend the spare first axis so
        // the snake's kept axis matches exactly.
        let t = vec![s1, r2, r3];
        ensure_ascending(&t)?;
        Ok(vec![
            contracting_step(r.dims(), &t)?,
            snake_step(&t, s.dims(), 2)?,
        ])
    } else {
        Ok(vec![snake_step(r.dims(), s.dims(), 2)?])
    }
}

fn plan_high(r: &Rectangle, s: &Rectangle) -> Result<Vec<PlanStep>> {
    let n = r.n();
    let r1 = r.side(0);
    let s1 = s.side(0);
    if r1 < s1 * (1.0 - TIE_TOL) {
        // Match the first axis and raise every other target axis
        // uniformly; the raise undoes into a contracting final step and
        // the raised target keeps every tail-weighted product unchanged.
        let blow = (s1 / r1).powf(1.0 / (n as f64 - 2.0));
        let mut t = vec![r1];
        t.extend((1..n).map(|i| s.side(i) * blow));
        ensure_ascending(&t)?;
        if let Some(msg) = star_violation(r.dims(), &t) {
            return Err(Error::verification(format!(
                "matched-axis intermediate escapes domination: {msg}"
            )));
        }
        let tr = Rectangle::new(&t)?;
        let mut steps = descend(r, &tr, 1)?;
        steps.push(contracting_step(&t, s.dims())?);
        Ok(steps)
    } else if r1 > s1 * (1.0 + TIE_TOL) {
        // Raise the target's head: each stage lifts every axis but one,
        // lowering that one just enough to keep the stage expanding,
        // until the first axis reaches the source's or everything ties.
        let mut v: Vec<f64> = s.dims().to_vec();
        let mut j = 1usize;
        let reached = loop {
            if j == n {
                break false;
            }
            let mu_r = r1 / v[0];
            let mu_tie = (v[j] / v[0]).powf(1.0 / (n as f64 - 1.0));
            if mu_r <= mu_tie * (1.0 + TIE_TOL) {
                raise_stage(&mut v, j, mu_r);
                break true;
            }
            raise_stage(&mut v, j, mu_tie);
            j += 1;
        };
        if !reached {
            // The target tied into a cube below the source's smallest
            // side, so the whole move is one contraction.
            return Ok(vec![contracting_step(r.dims(), s.dims())?]);
        }
        ensure_ascending(&v)?;
        if let Some(msg) = star_violation(r.dims(), &v) {
            return Err(Error::verification(format!(
                "raised intermediate escapes domination: {msg}"
            )));
        }
        let tr = Rectangle::new(&v)?;
        let mut steps = descend(r, &tr, 1)?;
        steps.push(contracting_step(&v, s.dims())?);
        Ok(steps)
    } else {
        descend(r, s, 1)
    }
}

/// One stage of the head-raising chain: axis `j` (0-based) comes down by
/// `mu^(n-2)` while every other axis goes up by `mu`, keeping each
/// (n-1)-subproduct at least one.
fn raise_stage(v: &mut [f64], j: usize, mu: f64) {
    let n = v.len();
    let down = mu.powi(-(n as i32 - 2));
    for (i, vi) in v.iter_mut().enumerate() {
        *vi *= if i == j { down } else { mu };
    }
}

/// Plans under the matched-first-axis domination list: both boxes share
/// their smallest side, prefix products of the remaining axes dominate
/// through every depth, and every tail-weighted product dominates. The
/// resulting plan ends in at most one snake step.
pub fn lemma41_plan(r: &Rectangle, s: &Rectangle) -> Result<MapPlan> {
    let n = r.n();
    if s.n() != n {
        return Err(Error::precondition(format!(
            "source and target must share a dimension; got {n} and {}",
            s.n()
        )));
    }
    if n < 3 {
        return Err(Error::Unsupported(format!(
            "planning needs n >= 3; got n = {n}"
        )));
    }
    if !close(r.side(0), s.side(0), TIE_TOL) {
        return Err(Error::precondition(format!(
            "first axes must match: {} vs {}",
            r.side(0),
            s.side(0)
        )));
    }
    if let Some(msg) = cp_violation(r.dims(), s.dims(), 1) {
        return Err(Error::precondition(format!("domination list fails: {msg}")));
    }
    Ok(finish(descend(r, s, 1)?))
}

/// The descent: find the smallest prefix of folded axes where the source
/// stops dominating, fix it with one expanding move of the target, and
/// recurse at that depth; no violation means the pair snakes directly.
fn descend(r: &Rectangle, s: &Rectangle, p: usize) -> Result<Vec<PlanStep>> {
    let n = r.n();
    if let Some(msg) = cp_violation(r.dims(), s.dims(), p) {
        return Err(Error::verification(format!(
            "descent invariant failed at depth {p}: {msg} (source {:?}, target {:?})",
            r.dims(),
            s.dims()
        )));
    }
    if r.approx_eq(s, TIE_TOL) {
        return Ok(vec![identity_step(r.dims())]);
    }
    let mut b = 0usize;
    let mut pr = 1.0;
    let mut ps = 1.0;
    for a in 2..=n {
        pr *= r.side(a - 1);
        ps *= s.side(a - 1);
        if pr < ps * (1.0 - TIE_TOL) {
            b = a;
            break;
        }
    }
    if b == 0 {
        return Ok(vec![snake_step(r.dims(), s.dims(), n - 1)?]);
    }
    if b <= p || b > n - 2 {
        return Err(Error::verification(format!(
            "prefix violation depth {b} outside ({p}, {}] for source {:?}, target {:?}",
            n - 2,
            r.dims(),
            s.dims()
        )));
    }
    if b == 2 {
        // Lower the target's second axis to the source's and raise the
        // rest to compensate; every tail-weighted product from depth two
        // on is unchanged, so the recursion enters at depth two.
        let pull = (s.side(1) / r.side(1)).powf(1.0 / (n as f64 - 3.0));
        let mut t = vec![s.side(0), r.side(1)];
        t.extend((2..n).map(|i| s.side(i) * pull));
        ensure_ascending(&t)?;
        let tr = Rectangle::new(&t)?;
        let mut steps = descend(r, &tr, 2)?;
        steps.push(contracting_step(&t, s.dims())?);
        return Ok(steps);
    }
    // b > 2: lower a tie block ending at b, raising everything past b,
    // until the folded prefix products match at depth b.
    let mut v: Vec<f64> = s.dims().to_vec();
    let mut a = b;
    let target: f64 = r.dims()[1..b].iter().product();
    loop {
        let m = (b - a + 1) as f64;
        let cur: f64 = v[1..b].iter().product();
        let lam_eq = (cur / target).powf(1.0 / m);
        let lam_tie = if a > 2 {
            v[a - 1] / v[a - 2]
        } else {
            f64::INFINITY
        };
        if lam_eq <= lam_tie * (1.0 + TIE_TOL) {
            lower_block(&mut v, a, b, lam_eq);
            break;
        }
        lower_block(&mut v, a, b, lam_tie);
        a -= 1;
        if a < 2 {
            return Err(Error::verification(format!(
                "expanding chain exhausted the axes for source {:?}, target {:?}",
                r.dims(),
                s.dims()
            )));
        }
    }
    ensure_ascending(&v)?;
    // The chain leaves every tail-weighted product from depth b up
    // untouched; drift here means the stage exponents are wrong.
    for l in b..n {
        let (av, bs) = (star2(&v, l), star2(s.dims(), l));
        if !close(av, bs, CHECK_TOL) {
            return Err(Error::verification(format!(
                "expanding chain drifted at depth {l}: {av} vs {bs}"
            )));
        }
    }
    let tv = Rectangle::new(&v)?;
    let mut steps = descend(r, &tv, b)?;
    steps.push(contracting_step(&v, s.dims())?);
    Ok(steps)
}

/// One chain stage: the 1-based block a..=b comes down by `lam` while
/// every axis past b goes up by `lam^(m/(n-b-1))`, keeping each
/// (n-1)-subproduct at least one.
fn lower_block(v: &mut [f64], a: usize, b: usize, lam: f64) {
    let n = v.len();
    let m = (b - a + 1) as f64;
    let up = lam.powf(m / (n as f64 - b as f64 - 1.0));
    for vi in &mut v[(a - 1)..b] {
        *vi /= lam;
    }
    for vi in &mut v[b..] {
        *vi *= up;
    }
}

// ---------------------------------------------------------------------------
// Realization
// ---------------------------------------------------------------------------

/// Realizes an evaluable plan as a composed map from the source box to
/// the final box. Plans containing symbolic snake steps (k >= 3) are
/// rejected with a list of the offending steps.
pub fn realize_plan(plan: &MapPlan) -> Result<EvaluableMap> {
    plan.validate()?;
    if !plan.evaluable {
        let symbolic: Vec<String> = plan
            .steps
            .iter()
            .filter_map(|st| match st {
                PlanStep::Snake { k, input, out, .. } if *k != 2 => {
                    Some(format!("snake k={k} {input:?} -> {out:?}"))
                }
                _ => None,
            })
            .collect();
        return Err(Error::precondition(format!(
            "plan contains symbolic steps: {}",
            symbolic.join("; ")
        )));
    }
    let mut dims: Vec<f64> = Vec::new();
    let mut running: Option<EvaluableMap> = None;
    for step in &plan.steps {
        let next = match step {
            PlanStep::Linear {
                input, out, perm, ..
            } => {
                dims = out.clone();
                map::linear_between(&Rectangle::new(input)?, &Rectangle::new(out)?, perm)?
            }
            PlanStep::Snake { input, out, k, .. } => {
                dims = out.clone();
                let build = build_snake(&Rectangle::new(input)?, &Rectangle::new(out)?, *k)?;
                build.evaluable_map()?.clone()
            }
            PlanStep::Scale { factor, .. } => {
                let domain = Rectangle::new(&dims)?;
                dims = dims.iter().map(|d| d * factor).collect();
                map::scale_map(&domain, *factor)?
            }
        };
        running = Some(match running.take() {
            None => next,
            Some(prev) => map::compose(&next, &prev)?,
        });
    }
    running.ok_or_else(|| Error::precondition("plan has no steps"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(d: &[f64]) -> Rectangle {
        Rectangle::new(d).unwrap()
    }

    #[test]
    fn equal_boxes_plan_to_the_identity() {
        let r = rect(&[1.0, 2.0, 3.0]);
        let plan = plan_map(&r, &r).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 1);
        assert!(matches!(&plan.steps[0], PlanStep::Linear { dilation, .. } if *dilation == 1.0));
        assert!((plan.total_bound - 1.0).abs() < 1e-12);
        assert!(plan.evaluable);
    }

    #[test]
    fn homothety_plans_to_identity_plus_scale() {
        let plan = plan_map(&rect(&[1.0, 1.0, 1.0]), &rect(&[2.0, 2.0, 2.0])).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 2);
        assert!(matches!(plan.steps[0], PlanStep::Linear { .. }));
        match &plan.steps[1] {
            PlanStep::Scale { factor, dilation } => {
                assert!((factor - 2.0).abs() < 1e-12);
                assert!((dilation - 4.0).abs() < 1e-9);
            }
            other => panic!("expected a scale step, got {other:?}"),
        }
        assert!((plan.total_bound - 4.0).abs() < 1e-9);
        assert!(plan.evaluable);
    }

    #[test]
    fn eccentric_pair_plans_to_a_single_snake() {
        let plan = plan_map(&rect(&[0.1, 1.0, 1.0]), &rect(&[0.1, 0.1, 10.0])).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 1);
        match &plan.steps[0] {
            PlanStep::Snake { k, budget, .. } => {
                assert_eq!(*k, 2);
                assert_eq!(*budget, SNAKE_DILATION_BUDGET);
            }
            other => panic!("expected a snake step, got {other:?}"),
        }
        assert!((plan.total_bound - SNAKE_DILATION_BUDGET).abs() < 1e-9);
        assert!(plan.evaluable);
    }

    #[test]
    fn mid_axis_deficit_plans_to_two_contractions() {
        let r = rect(&[1.0, 1.0, 4.0]);
        let s = rect(&[0.9, 2.0, 2.0]);
        let plan = plan_map(&r, &s).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 3);
        assert!(matches!(plan.steps[0], PlanStep::Linear { .. }));
        assert!(matches!(plan.steps[1], PlanStep::Linear { .. }));
        assert!(matches!(plan.steps[2], PlanStep::Scale { .. }));
        let lower = bounds::thm2_lower_bound(&r, &s).unwrap().value;
        assert!((plan.total_bound - lower).abs() <= 1e-6 * lower);
        assert!(plan.evaluable);
    }

    #[test]
    fn realized_contraction_chain_has_degree_one() {
        let r = rect(&[1.0, 1.0, 4.0]);
        let s = rect(&[0.9, 2.0, 2.0]);
        let plan = plan_map(&r, &s).unwrap();
        let m = realize_plan(&plan).unwrap();
        let deg = map::check_degree(&m, 10, 7).unwrap();
        assert!(deg.probe_degrees.iter().all(|&d| d == 1));
        let cert = m.certify_k_dilation(2, 200, 11).unwrap();
        assert!(cert.sup_estimate <= 1.1 * plan.total_bound);
    }

    #[test]
    fn matched_axis_prefix_violation_expands_then_snakes() {
        // First prefix violation at depth three: one chain stage fixes
        // the depth-three product, then the leftover pair snakes whole.
        let r = rect(&[1.0, 1.2, 1.3, 4.0, 4.0]);
        let s = rect(&[1.0, 1.1, 1.7, 1.8, 4.0]);
        let plan = lemma41_plan(&r, &s).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 2);
        match &plan.steps[0] {
            PlanStep::Snake { k, out, .. } => {
                assert_eq!(*k, 4);
                // the chained target matches the depth-three products
                let t23: f64 = out[1] * out[2];
                assert!((t23 - 1.2 * 1.3).abs() < 1e-9);
            }
            other => panic!("expected a snake step, got {other:?}"),
        }
        match &plan.steps[1] {
            PlanStep::Linear { dilation, out, .. } => {
                assert!(*dilation <= 1.0 + 1e-9);
                assert_eq!(out.as_slice(), s.dims());
            }
            other => panic!("expected a linear step, got {other:?}"),
        }
        let b = SNAKE_DILATION_BUDGET;
        assert!((plan.total_bound - b).abs() <= 1e-6 * b);
        assert!(!plan.evaluable);
        match realize_plan(&plan) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("symbolic")),
            Err(other) => panic!("expected a precondition error, got {other}"),
            Ok(_) => panic!("symbolic plan should not realize"),
        }
    }

    #[test]
    fn dominant_first_axis_raises_the_target_head() {
        let r = rect(&[2.0, 2.1, 2.2, 50.0]);
        let s = rect(&[0.5, 2.0, 2.0, 2.0]);
        let plan = plan_map(&r, &s).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.steps.len(), 3);
        match &plan.steps[0] {
            PlanStep::Snake { k, input, .. } => {
                assert_eq!(*k, 3);
                assert_eq!(input.as_slice(), r.dims());
            }
            other => panic!("expected a snake step, got {other:?}"),
        }
        assert!(matches!(plan.steps[1], PlanStep::Linear { .. }));
        assert!(matches!(plan.steps[2], PlanStep::Scale { .. }));
        let lower = bounds::thm2_lower_bound(&r, &s).unwrap().value;
        let expect = SNAKE_DILATION_BUDGET * lower;
        assert!((plan.total_bound - expect).abs() <= 1e-6 * expect);
        assert!(!plan.evaluable);
    }

    #[test]
    fn mismatched_first_axes_are_rejected() {
        let r = rect(&[1.0, 2.0, 3.0]);
        let s = rect(&[2.0, 2.0, 3.0]);
        assert!(matches!(
            lemma41_plan(&r, &s),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn two_dimensional_pairs_are_unsupported() {
        let r = rect(&[1.0, 2.0]);
        let s = rect(&[1.0, 3.0]);
        assert!(matches!(plan_map(&r, &s), Err(Error::Unsupported(_))));
    }

    #[test]
    fn plans_serialize_with_step_kinds() {
        let plan = plan_map(&rect(&[0.1, 1.0, 1.0]), &rect(&[0.1, 0.1, 10.0])).unwrap();
        let js = serde_json::to_string(&plan).unwrap();
        assert!(js.contains("\"kind\":\"snake\""));
        let back: MapPlan = serde_json::from_str(&js).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), js);
    }

    #[test]
    fn random_pairs_plan_validate_and_stay_under_budget() {
        use rand::Rng;
        let mut rng = crate::qmc::rng_for(0xA11CE, "planner-smoke");
        for trial in 0..200usize {
            let n = 3 + trial % 3;
            let dr: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
            let ds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
            let r = rect(&dr);
            let s = rect(&ds);
            let plan = plan_map(&r, &s)
                .unwrap_or_else(|e| panic!("trial {trial} {dr:?} -> {ds:?}: {e}"));
            plan.validate()
                .unwrap_or_else(|e| panic!("trial {trial} {dr:?} -> {ds:?}: {e}"));
            let snakes = plan
                .steps
                .iter()
                .filter(|st| matches!(st, PlanStep::Snake { .. }))
                .count();
            assert!(snakes <= 1);
            let lower = bounds::thm2_lower_bound(&r, &s).unwrap().value;
            let ratio = plan.total_bound / lower;
            assert!(
                ratio <= SNAKE_DILATION_BUDGET * (1.0 + 1e-9),
                "trial {trial}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn validate_rejects_tampered_plans() {
        let base = plan_map(&rect(&[1.0, 1.0, 4.0]), &rect(&[0.9, 2.0, 2.0])).unwrap();

        let mut bad_total = base.clone();
        bad_total.total_bound *= 1.01;
        assert!(matches!(bad_total.validate(), Err(Error::Verification(_))));

        let mut broken_chain = base.clone();
        if let PlanStep::Linear { input, .. } = &mut broken_chain.steps[1] {
            input[0] *= 2.0;
        }
        assert!(matches!(broken_chain.validate(), Err(Error::Verification(_))));

        let mut wrong_dilation = base;
        if let PlanStep::Linear { dilation, .. } = &mut wrong_dilation.steps[0] {
            *dilation *= 1.5;
        }
        assert!(matches!(
            wrong_dilation.validate(),
            Err(Error::Verification(_))
        ));
    }
}
