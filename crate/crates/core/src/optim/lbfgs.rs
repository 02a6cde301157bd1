//! Limited-memory BFGS with a strong-Wolfe line search and an optional box projection.

use std::collections::VecDeque;

use crate::error::Result;

/// A differentiable objective. `Aux` carries whatever breakdown the caller
/// wants reported alongside the loss.
pub trait Objective {
    type Aux: Clone;
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>, Self::Aux)>;
}

/// Adapts a closure returning `(loss, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for FnObjective<F> {
    type Aux = ();
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>, ())> {
        let (f, g) = (self.0)(x);
        Ok((f, g, ()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the (projected) gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop once the loss decreased by less than this fraction over `rel_window` iterations.
    pub rel_tol: f64,
    pub rel_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Box constraint applied by projection after each step.
    pub bounds: Option<(f64, f64)>,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 300,
            grad_tol: 1e-6,
            rel_tol: 1e-8,
            rel_window: 5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// No step along the search direction decreased the loss.
    LineSearchFailed,
    /// An evaluation produced NaN or infinity; the last finite iterate is returned.
    NonFinite,
}

/// An accepted iterate, handed to the observer.
#[derive(Debug)]
pub struct Iterate<'a, A> {
    pub iteration: usize,
    pub loss: f64,
    pub x: &'a [f64],
    pub aux: &'a A,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport<A> {
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub aux: A,
    pub iterations: usize,
    pub evaluations: usize,
    /// Loss at the start point followed by the loss of every accepted iterate.
    pub history: Vec<f64>,
    pub stop: StopReason,
}

struct Point<A> {
    t: f64,
    f: f64,
    dphi: f64,
    x: Vec<f64>,
    g: Vec<f64>,
    aux: A,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn finite(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

fn project(x: &mut [f64], bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        for v in x {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Max-norm of `P(x - g) - x`; equals `|g|_inf` without bounds.
fn projected_grad_norm(x: &[f64], g: &[f64], bounds: Option<(f64, f64)>) -> f64 {
    match bounds {
        None => inf_norm(g),
        Some((lo, hi)) => x.iter().zip(g).fold(0.0, |m, (&xi, &gi)| {
            m.max(((xi - gi).clamp(lo, hi) - xi).abs())
        }),
    }
}

/// Minimizer of the cubic through two points with derivatives, kept inside
/// the middle 80% of the bracket; bisection when the cubic is degenerate.
fn cubic_step(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (ta, fa, da) = a;
    let (tb, fb, db) = b;
    let (lo, hi) = (ta.min(tb), ta.max(tb));
    let margin = 0.1 * (hi - lo);
    let d1 = da + db - 3.0 * (fa - fb) / (ta - tb);
    let disc = d1 * d1 - da * db;
    let t = if disc >= 0.0 {
        let d2 = (tb - ta).signum() * disc.sqrt();
        tb - (tb - ta) * (db + d2 - d1) / (db - da + 2.0 * d2)
    } else {
        f64::NAN
    };
    if t.is_finite() && t >= lo + margin && t <= hi - margin {
        t
    } else {
        0.5 * (lo + hi)
    }
}

enum Search<A> {
    Found(Point<A>),
    /// No acceptable step; the best decreasing point seen, if any.
    Failed(Option<Point<A>>),
    NonFinite,
}

struct Minimizer<'o, O: Objective> {
    obj: &'o mut O,
    opts: LbfgsOptions,
    evaluations: usize,
}

impl<O: Objective> Minimizer<'_, O> {
    fn eval_at(&mut self, x: &[f64], d: &[f64], t: f64) -> Result<Point<O::Aux>> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let (f, g, aux) = self.obj.evaluate(&xt)?;
        self.evaluations += 1;
        let dphi = dot(&g, d);
        Ok(Point {
            t,
            f,
            dphi,
            x: xt,
            g,
            aux,
        })
    }

    /// Bracketing phase followed by zoom, with cubic interpolation.
    fn strong_wolfe(
        &mut self,
        x: &[f64],
        f0: f64,
        d: &[f64],
        dphi0: f64,
        t_init: f64,
    ) -> Result<Search<O::Aux>> {
        let (c1, c2) = (self.opts.c1, self.opts.c2);
        let armijo = |p: &Point<O::Aux>| p.f <= f0 + c1 * p.t * dphi0;
        let curvature = |p: &Point<O::Aux>| p.dphi.abs() <= -c2 * dphi0;
        // (t, f, dphi) of the previous trial; t = 0 is the current iterate.
        let mut prev: Option<Point<O::Aux>> = None;
        let mut t = t_init;
        let mut budget = self.opts.max_line_search;
        let (lo, hi) = loop {
            if budget == 0 {
                return Ok(Search::Failed(prev));
            }
            budget -= 1;
            let cur = self.eval_at(x, d, t)?;
            if !finite(cur.f, &cur.g) {
                return Ok(Search::NonFinite);
            }
            let prev_f = prev.as_ref().map_or(f0, |p| p.f);
            if !armijo(&cur) || (prev.is_some() && cur.f >= prev_f) {
                break (prev, cur);
            }
            if curvature(&cur) {
                return Ok(Search::Found(cur));
            }
            if cur.dphi >= 0.0 {
                // Minimum lies between the previous trial and this one; `cur` is the low end.
                let other = prev.map_or((0.0, f0, dphi0), |p| (p.t, p.f, p.dphi));
                return self.zoom(x, f0, d, dphi0, cur, other, budget);
            }
            t *= 2.0;
            prev = Some(cur);
        };
        // `lo` is the previous trial (or the origin), `hi` the one that overshot.
        match lo {
            Some(lo) => self.zoom(x, f0, d, dphi0, lo, (hi.t, hi.f, hi.dphi), budget),
            None => self.zoom_from_origin(x, f0, d, dphi0, hi, budget),
        }
    }

    /// Zoom when the low end of the bracket is still the origin.
    fn zoom_from_origin(
        &mut self,
        x: &[f64],
        f0: f64,
        d: &[f64],
        dphi0: f64,
        hi: Point<O::Aux>,
        mut budget: usize,
    ) -> Result<Search<O::Aux>> {
        let (c1, c2) = (self.opts.c1, self.opts.c2);
        let mut hi = (hi.t, hi.f, hi.dphi);
        while budget > 0 {
            budget -= 1;
            let t = cubic_step((0.0, f0, dphi0), hi);
            let cur = self.eval_at(x, d, t)?;
            if !finite(cur.f, &cur.g) {
                return Ok(Search::NonFinite);
            }
            if cur.f > f0 + c1 * t * dphi0 || cur.f >= f0 {
                hi = (cur.t, cur.f, cur.dphi);
                continue;
            }
            if cur.dphi.abs() <= -c2 * dphi0 {
                return Ok(Search::Found(cur));
            }
            let other = if cur.dphi * (hi.0 - cur.t) >= 0.0 {
                hi
            } else {
                (0.0, f0, dphi0)
            };
            return self.zoom(x, f0, d, dphi0, cur, other, budget);
        }
        Ok(Search::Failed(None))
    }

    /// Zoom with a low end that satisfies sufficient decrease.
    #[allow(clippy::too_many_arguments)]
    fn zoom(
        &mut self,
        x: &[f64],
        f0: f64,
        d: &[f64],
        dphi0: f64,
        mut lo: Point<O::Aux>,
        mut hi: (f64, f64, f64),
        mut budget: usize,
    ) -> Result<Search<O::Aux>> {
        let (c1, c2) = (self.opts.c1, self.opts.c2);
        while budget > 0 {
            budget -= 1;
            let t = cubic_step((lo.t, lo.f, lo.dphi), hi);
            let cur = self.eval_at(x, d, t)?;
            if !finite(cur.f, &cur.g) {
                return Ok(Search::NonFinite);
            }
            if cur.f > f0 + c1 * t * dphi0 || cur.f >= lo.f {
                hi = (cur.t, cur.f, cur.dphi);
                continue;
            }
            if cur.dphi.abs() <= -c2 * dphi0 {
                return Ok(Search::Found(cur));
            }
            if cur.dphi * (hi.0 - lo.t) >= 0.0 {
                hi = (lo.t, lo.f, lo.dphi);
            }
            lo = cur;
        }
        Ok(Search::Failed(Some(lo)))
    }

    /// Projects an accepted point into the box, backtracking along the
    /// projected path until the loss does not increase.
    fn project_point(
        &mut self,
        x: &[f64],
        f0: f64,
        g0: &[f64],
        d: &[f64],
        p: Point<O::Aux>,
    ) -> Result<Option<Point<O::Aux>>> {
        let bounds = self.opts.bounds;
        let mut projected = p.x.clone();
        project(&mut projected, bounds);
        if projected == p.x {
            return Ok(Some(p));
        }
        let mut t = p.t;
        for _ in 0..self.opts.max_line_search {
            let mut xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
            project(&mut xt, bounds);
            let (f, g, aux) = self.obj.evaluate(&xt)?;
            self.evaluations += 1;
            if !finite(f, &g) {
                return Ok(None);
            }
            let step: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
            let slope = dot(g0, &step).min(0.0);
            if f <= f0 + self.opts.c1 * slope {
                let dphi = dot(&g, d);
                return Ok(Some(Point {
                    t,
                    f,
                    dphi,
                    x: xt,
                    g,
                    aux,
                }));
            }
            t *= 0.5;
        }
        Ok(None)
    }
}

/// Two-loop recursion: `-H g` for the inverse-Hessian estimate held in `pairs`.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}

/// Minimizes `obj` from `x0`. Every accepted iterate has loss no greater than its predecessor.
pub fn minimize<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    opts: &LbfgsOptions,
    mut observer: impl FnMut(&Iterate<'_, O::Aux>),
) -> Result<LbfgsReport<O::Aux>> {
    let mut x = x0.to_vec();
    project(&mut x, opts.bounds);
    let (f, g, aux) = obj.evaluate(&x)?;
    let mut m = Minimizer {
        obj,
        opts: *opts,
        evaluations: 1,
    };
    let mut report = LbfgsReport {
        x,
        loss: f,
        grad: g,
        aux,
        iterations: 0,
        evaluations: 1,
        history: vec![f],
        stop: StopReason::MaxIterations,
    };
    if !finite(f, &report.grad) {
        report.stop = StopReason::NonFinite;
        return Ok(report);
    }
    observer(&Iterate {
        iteration: 0,
        loss: f,
        x: &report.x,
        aux: &report.aux,
    });
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    loop {
        if projected_grad_norm(&report.x, &report.grad, opts.bounds) < opts.grad_tol {
            report.stop = StopReason::GradientTolerance;
            break;
        }
        if report.iterations >= opts.max_iters {
            report.stop = StopReason::MaxIterations;
            break;
        }
        let mut d = direction(&report.grad, &pairs);
        let mut dphi0 = dot(&report.grad, &d);
        if dphi0.is_nan() || dphi0 >= 0.0 {
            // Not a descent direction: restart from steepest descent.
            pairs.clear();
            d = report.grad.iter().map(|v| -v).collect();
            dphi0 = dot(&report.grad, &d);
        }
        let t_init = if pairs.is_empty() {
            1.0 / inf_norm(&report.grad)
        } else {
            1.0
        };
        let found = match m.strong_wolfe(&report.x, report.loss, &d, dphi0, t_init)? {
            Search::Found(p) => Some(p),
            Search::Failed(p) => p.filter(|p| p.f < report.loss),
            Search::NonFinite => {
                report.stop = StopReason::NonFinite;
                break;
            }
        };
        let accepted = match found {
            Some(p) if opts.bounds.is_some() => {
                m.project_point(&report.x, report.loss, &report.grad, &d, p)?
            }
            other => other,
        };
        let Some(p) = accepted else {
            if pairs.is_empty() {
                report.stop = StopReason::LineSearchFailed;
                break;
            }
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = p.x.iter().zip(&report.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&report.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y) && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        report.x = p.x;
        report.loss = p.f;
        report.grad = p.g;
        report.aux = p.aux;
        report.iterations += 1;
        report.history.push(p.f);
        observer(&Iterate {
            iteration: report.iterations,
            loss: report.loss,
            x: &report.x,
            aux: &report.aux,
        });
        let k = report.history.len();
        if k > opts.rel_window {
            let old = report.history[k - 1 - opts.rel_window];
            let scale = old.abs().max(report.loss.abs());
            if old - report.loss <= opts.rel_tol * scale {
                report.stop = StopReason::RelativeDecrease;
                break;
            }
        }
    }
    report.evaluations = m.evaluations;
    Ok(report)
}
