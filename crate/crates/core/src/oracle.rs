//! Reference solutions and the Monte Carlo check of the expected equality
//! violation of a perturbed optimum.
//!
//! Both solvers work in the free coordinates `x`: the completion map
//! eliminates the equalities, leaving only `G y(x) <= h`.
//!
//! * Quadratic: `y(x) = y0 + N x` is affine, so the problem is an
//!   inequality-constrained QP in `x`, solved with a Mehrotra
//!   predictor-corrector interior-point method.
//! * Other kinds: augmented Lagrangian over `x` with BFGS inner solves,
//!   restarted from several points; the best stationary feasible point wins.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::completion::Completer;
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::numerics::{dot, norm_inf, symmetric_eigenvalues, Lu, Matrix};
use crate::problems::{Dataset, ObjectiveKind, ProblemInstance};

pub const IPM_TOL: f64 = 1e-10;
/// Residual below which the best iterate is returned when the target is out of reach.
pub const IPM_ACCEPT: f64 = 1e-7;
pub const IPM_MAX_ITER: usize = 200;
pub const MULTI_STARTS: usize = 16;
/// Stationarity a multi-start run must reach to count as a solution.
pub const STATIONARITY_ACCEPT: f64 = 1e-4;
const START_SEED: u64 = 0x5eed;
const START_SPREAD: f64 = 0.5;
const MC_CHUNKS: u64 = 16;
const AL_OUTER: usize = 60;
/// Larger penalties make the inner problems too ill-conditioned for BFGS.
const AL_RHO_MAX: f64 = 1e5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub y_star: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub solver_iterations: usize,
}

/// Inequality-only QP `min 1/2 x^T H x + c^T x  s.t.  C x <= b`.
struct ReducedQp {
    h: Matrix,
    c: Vec<f64>,
    cm: Matrix,
    b: Vec<f64>,
}

struct IpmResult {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

/// `H + C^T diag(z / s) C`
fn normal_matrix(h: &Matrix, cm: &Matrix, z: &[f64], s: &[f64]) -> Matrix {
    let m = h.rows();
    let mut out = h.clone();
    let data = out.as_mut_slice();
    for r in 0..cm.rows() {
        let w = z[r] / s[r];
        let row = cm.row(r);
        for i in 0..m {
            let wi = w * row[i];
            for j in 0..m {
                data[i * m + j] += wi * row[j];
            }
        }
    }
    out
}

impl ReducedQp {
    fn solve(&self) -> Result<IpmResult> {
        let m = self.c.len();
        let k = self.b.len();
        if k == 0 {
            let neg: Vec<f64> = self.c.iter().map(|v| -v).collect();
            let x = if m == 0 { Vec::new() } else { Lu::factor(&self.h)?.solve(&neg) };
            let mut rd = self.h.matvec(&x);
            rd.iter_mut().zip(&self.c).for_each(|(r, c)| *r += c);
            return Ok(IpmResult { residual: norm_inf(&rd), x, iterations: 1 });
        }
        let mut x = vec![0.0; m];
        let mut s: Vec<f64> = self.b.iter().map(|b| b.max(1.0)).collect();
        let mut z = vec![1.0; k];
        let scale_d = 1.0 + norm_inf(&self.c);
        let scale_p = 1.0 + norm_inf(&self.b);
        let mut best: Option<IpmResult> = None;
        for iter in 0..IPM_MAX_ITER {
            let mut rd = self.h.matvec(&x);
            let ctz = self.cm.matvec_t(&z);
            for i in 0..m {
                rd[i] += self.c[i] + ctz[i];
            }
            let cx = self.cm.matvec(&x);
            let rp: Vec<f64> = (0..k).map(|i| cx[i] + s[i] - self.b[i]).collect();
            let mu = dot(&s, &z) / k as f64;
            let residual = (norm_inf(&rd) / scale_d).max(norm_inf(&rp) / scale_p).max(mu);
            if residual <= IPM_TOL {
                return Ok(IpmResult { x, residual, iterations: iter });
            }
            if best.as_ref().is_none_or(|b: &IpmResult| residual < b.residual) {
                best = Some(IpmResult { x: x.clone(), residual, iterations: iter });
            }
            // Near the solution the reduced system becomes badly conditioned;
            // once progress reverses, keep the best iterate seen.
            if let Some(b) = &best {
                if b.residual <= IPM_ACCEPT && residual > 1e3 * b.residual {
                    break;
                }
            }
            let Ok(lu) = Lu::factor(&normal_matrix(&self.h, &self.cm, &z, &s)) else { break };
            let direction = |rc: &[f64]| {
                let t: Vec<f64> = (0..k).map(|i| (-rc[i] + z[i] * rp[i]) / s[i]).collect();
                let ct = self.cm.matvec_t(&t);
                let rhs: Vec<f64> = (0..m).map(|i| -rd[i] - ct[i]).collect();
                let dx = lu.solve(&rhs);
                let cdx = self.cm.matvec(&dx);
                let ds: Vec<f64> = (0..k).map(|i| -rp[i] - cdx[i]).collect();
                let dz: Vec<f64> = (0..k).map(|i| (-rc[i] - z[i] * ds[i]) / s[i]).collect();
                (dx, ds, dz)
            };
            let rc_aff: Vec<f64> = (0..k).map(|i| s[i] * z[i]).collect();
            let (_, ds_a, dz_a) = direction(&rc_aff);
            let alpha_a = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
            let mu_aff = (0..k)
                .map(|i| (s[i] + alpha_a * ds_a[i]) * (z[i] + alpha_a * dz_a[i]))
                .sum::<f64>()
                / k as f64;
            let sigma = (mu_aff / mu).powi(3);
            let rc: Vec<f64> = (0..k).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu).collect();
            let (dx, ds, dz) = direction(&rc);
            let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            for i in 0..m {
                x[i] += alpha * dx[i];
            }
            for i in 0..k {
                s[i] += alpha * ds[i];
                z[i] += alpha * dz[i];
            }
            if !(x.iter().chain(&s).chain(&z).all(|v| v.is_finite())) {
                break;
            }
        }
        match best {
            Some(b) if b.residual <= IPM_ACCEPT => Ok(b),
            _ => Err(Error::OracleFailed("interior point did not converge".into())),
        }
    }
}

/// `y(x) = y0 + N x` for linear equalities.
fn affine_parametrization(instance: &ProblemInstance, completer: &Completer, d: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let m = completer.n_free();
    let base = completer.complete(d, &vec![0.0; m], None)?;
    let dz = completer.dz_dx(&base)?;
    let mut nmat = Matrix::zeros(instance.n, m);
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        let col_z: Vec<f64> = (0..dz.rows()).map(|i| dz[(i, k)]).collect();
        let col = completer.scatter(&e, &col_z);
        for (i, v) in col.into_iter().enumerate() {
            nmat.as_mut_slice()[i * m + k] = v;
        }
    }
    Ok((base.y, nmat))
}

fn solve_qp(instance: &ProblemInstance, d: &[f64]) -> Result<OracleSolution> {
    let completer = Completer::new(instance)?;
    let (y0, nmat) = affine_parametrization(instance, &completer, d)?;
    let nt = nmat.transpose();
    let h = nt.matmul(&instance.q.matmul(&nmat)?)?;
    let mut gy0 = instance.q.matvec(&y0);
    gy0.iter_mut().zip(&instance.p).for_each(|(g, p)| *g += p);
    let c = nt.matvec(&gy0);
    let g = instance.g_matrix();
    let cm = g.matmul(&nmat)?;
    let gy = g.matvec(&y0);
    let b: Vec<f64> = instance.h_ub.iter().zip(&gy).map(|(h, v)| h - v).collect();
    let qp = ReducedQp { h, c, cm, b };
    let res = qp.solve()?;
    let mut y = y0;
    let nx = nmat.matvec(&res.x);
    y.iter_mut().zip(&nx).for_each(|(a, b)| *a += b);
    Ok(OracleSolution {
        objective_value: instance.objective(&y)?,
        y_star: y,
        kkt_residual: res.residual,
        solver_iterations: res.iterations,
    })
}

/// Objective and inequality slack of `y(x)` plus the completion warm start.
struct Reduced<'a> {
    instance: &'a ProblemInstance,
    completer: Completer,
    d: &'a [f64],
}

struct Point {
    y: Vec<f64>,
    f: f64,
    slack: Vec<f64>,
    z: Vec<f64>,
}

impl Reduced<'_> {
    fn eval(&self, x: &[f64], z_init: Option<&[f64]>) -> Option<Point> {
        let comp = self.completer.complete(self.d, x, z_init).ok()?;
        let f = self.instance.objective(&comp.y).ok()?;
        let slack = self.instance.ineq_slack(&comp.y).ok()?;
        Some(Point { f, slack, z: comp.z, y: comp.y })
    }

    /// Gradient over `x` of `f(y(x)) + w^T (G y(x) - h)`.
    fn grad(&self, x: &[f64], z: &[f64], w: &[f64]) -> Option<Vec<f64>> {
        let comp = self.completer.complete(self.d, x, Some(z)).ok()?;
        let mut gy = self.instance.objective_grad(&comp.y).ok()?;
        if w.iter().any(|&v| v != 0.0) {
            let gt = self.instance.g.matvec_t(w);
            gy.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
        }
        let (gx, gz) = self.completer.gather(&gy);
        self.completer.chain(&comp, &gx, &gz).ok()
    }

    fn al_value(&self, p: &Point, lambda: &[f64], rho: f64) -> f64 {
        p.f + p
            .slack
            .iter()
            .zip(lambda)
            .map(|(c, l)| ((l + rho * c).max(0.0).powi(2) - l * l) / (2.0 * rho))
            .sum::<f64>()
    }

    fn al_weights(p: &Point, lambda: &[f64], rho: f64) -> Vec<f64> {
        p.slack.iter().zip(lambda).map(|(c, l)| (l + rho * c).max(0.0)).collect()
    }

    /// BFGS with Armijo backtracking on the augmented Lagrangian.
    fn minimize_al(&self, x0: Vec<f64>, z0: Vec<f64>, lambda: &[f64], rho: f64, iters: &mut usize) -> Option<(Vec<f64>, Point)> {
        let m = x0.len();
        let mut x = x0;
        let mut p = self.eval(&x, Some(&z0))?;
        let mut val = self.al_value(&p, lambda, rho);
        let mut g = self.grad(&x, &p.z, &Self::al_weights(&p, lambda, rho))?;
        let mut hinv = Matrix::identity(m);
        for _ in 0..500 {
            if norm_inf(&g) <= 1e-11 * (1.0 + val.abs()) {
                break;
            }
            *iters += 1;
            let mut dir: Vec<f64> = hinv.matvec(&g).iter().map(|v| -v).collect();
            let mut slope = dot(&g, &dir);
            if slope >= 0.0 {
                hinv = Matrix::identity(m);
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
                if let Some(pn) = self.eval(&xn, Some(&p.z)) {
                    let vn = self.al_value(&pn, lambda, rho);
                    if vn.is_finite() && vn <= val + 1e-4 * step * slope {
                        accepted = Some((xn, pn, vn));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((xn, pn, vn)) = accepted else { break };
            let gn = self.grad(&xn, &pn.z, &Self::al_weights(&pn, lambda, rho))?;
            let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&sv, &yv);
            if sy > 1e-14 * norm_inf(&sv) * norm_inf(&yv) && sy > 0.0 {
                let hy = hinv.matvec(&yv);
                let yhy = dot(&yv, &hy);
                let r = 1.0 / sy;
                let hd = hinv.as_mut_slice();
                for i in 0..m {
                    for j in 0..m {
                        hd[i * m + j] += (1.0 + yhy * r) * r * sv[i] * sv[j] - r * (hy[i] * sv[j] + sv[i] * hy[j]);
                    }
                }
            }
            let done = (val - vn).abs() <= 1e-16 * (1.0 + val.abs());
            x = xn;
            p = pn;
            val = vn;
            g = gn;
            if done {
                break;
            }
        }
        Some((x, p))
    }

    /// Augmented Lagrangian from one start; returns the point, its
    /// multipliers' KKT residual and the iteration count.
    fn solve_from(&self, x0: Vec<f64>) -> Option<(Point, f64, usize)> {
        let k = self.instance.n_ineq;
        let mut lambda = vec![0.0; k];
        let mut rho = 10.0;
        let mut iters = 0;
        let mut x = x0;
        let mut z = vec![0.0; self.completer.n_dep()];
        let mut prev_viol = f64::INFINITY;
        let mut best: Option<(Point, f64)> = None;
        for _ in 0..AL_OUTER {
            let (xn, p) = self.minimize_al(x, z.clone(), &lambda, rho, &mut iters)?;
            x = xn;
            z = p.z.clone();
            lambda = Self::al_weights(&p, &lambda, rho);
            let viol = p.slack.iter().fold(0.0f64, |a, &c| a.max(c));
            let stat = norm_inf(&self.grad(&x, &p.z, &lambda)?);
            let compl = p.slack.iter().zip(&lambda).fold(0.0f64, |a, (c, l)| a.max((c * l).abs()));
            let kkt = stat.max(viol).max(compl);
            let done = viol <= 1e-10 && stat <= 1e-9 && compl <= 1e-10;
            if viol <= 1e-7 && best.as_ref().is_none_or(|b| kkt < b.1) {
                best = Some((p, kkt));
            }
            if done {
                break;
            }
            if viol > 1e-10 && viol > 0.25 * prev_viol {
                rho = (rho * 10.0).min(AL_RHO_MAX);
            }
            prev_viol = viol;
        }
        best.map(|(p, kkt)| (p, kkt, iters))
    }
}

fn solve_multistart(instance: &ProblemInstance, d: &[f64]) -> Result<OracleSolution> {
    let reduced = Reduced {
        instance,
        completer: Completer::new(instance)?,
        d,
    };
    let witness = instance.feasible_witness(d)?;
    let (x_w, _) = reduced.completer.gather(&witness);
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let spread = Normal::new(0.0, START_SPREAD).expect("valid normal");
    let starts: Vec<Vec<f64>> = (0..MULTI_STARTS)
        .map(|s| {
            if s == 0 {
                x_w.clone()
            } else {
                x_w.iter().map(|v| v + spread.sample(&mut rng)).collect()
            }
        })
        .collect();
    let mut best: Option<OracleSolution> = None;
    let mut total_iters = 0;
    for x0 in starts {
        let Some((p, kkt, iters)) = reduced.solve_from(x0) else { continue };
        total_iters += iters;
        let viol = p.slack.iter().fold(0.0f64, |a, &c| a.max(c));
        if kkt > STATIONARITY_ACCEPT || viol > 1e-7 {
            continue;
        }
        if best.as_ref().is_none_or(|b| p.f < b.objective_value) {
            best = Some(OracleSolution {
                y_star: p.y,
                objective_value: p.f,
                kkt_residual: kkt,
                solver_iterations: 0,
            });
        }
    }
    let mut sol = best.ok_or_else(|| Error::OracleFailed("no start reached a stationary feasible point".into()))?;
    sol.solver_iterations = total_iters;
    Ok(sol)
}

/// Reference optimum for one input `d`.
pub fn solve_reference(instance: &ProblemInstance, d: &[f64]) -> Result<OracleSolution> {
    check_dim("oracle d", instance.n_eq, d.len())?;
    match instance.objective_kind {
        ObjectiveKind::Quadratic => solve_qp(instance, d),
        ObjectiveKind::SinNonconvex | ObjectiveKind::NonlinearEq => solve_multistart(instance, d),
    }
}

/// Reference solutions for every sample of a dataset, in sample order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub y_star: Vec<Vec<f64>>,
    pub objective: Vec<f64>,
    pub kkt_residual: Vec<f64>,
}

impl OracleLabels {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        check_dim("labels y_star", dataset.samples.len(), self.y_star.len())?;
        check_dim("labels objective", dataset.samples.len(), self.objective.len())?;
        check_dim("labels kkt_residual", dataset.samples.len(), self.kkt_residual.len())?;
        for y in &self.y_star {
            check_dim("label length", dataset.instance.n, y.len())?;
        }
        Ok(())
    }

    /// Mean reference objective over `range`.
    pub fn objective_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len().max(1) as f64;
        self.objective[range].iter().sum::<f64>() / n
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn solve_dataset(dataset: &Dataset) -> Result<OracleLabels> {
    let sols = exec::map_indexed(dataset.samples.len(), |i| solve_reference(&dataset.instance, &dataset.samples[i]));
    let mut labels = OracleLabels::default();
    for (i, s) in sols.into_iter().enumerate() {
        let s = s.map_err(|e| Error::OracleFailed(format!("sample {i}: {e}")))?;
        labels.y_star.push(s.y_star);
        labels.objective.push(s.objective_value);
        labels.kkt_residual.push(s.kkt_residual);
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub sigma: f64,
    pub mc_estimate: f64,
    pub closed_form_diag: f64,
    pub closed_form_nuclear: f64,
    pub relative_gap: f64,
    pub sample_count: usize,
    /// Standard error of `mc_estimate`.
    #[serde(skip)]
    pub standard_error: f64,
}

/// `sqrt(2/pi) sigma sum_i sqrt((J J^T)_ii)` and
/// `sqrt(2/pi) sigma trace(sqrt(J J^T))`.
pub fn closed_forms(j: &Matrix, sigma: f64) -> Result<(f64, f64)> {
    let k = (2.0 / std::f64::consts::PI).sqrt() * sigma;
    if j.rows() == 0 {
        return Ok((0.0, 0.0));
    }
    let jjt = j.gram_rows();
    let diag: f64 = (0..jjt.rows()).map(|i| jjt[(i, i)].max(0.0).sqrt()).sum();
    let nuclear: f64 = symmetric_eigenvalues(&jjt)?.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((k * diag, k * nuclear))
}

/// Monte Carlo mean of `1^T |h_d(y* + eps)|`, `eps ~ N(0, sigma^2 I)`, at a given point.
pub fn verify_prop2_at(
    instance: &ProblemInstance,
    d: &[f64],
    y_star: &[f64],
    sigma: f64,
    sample_count: usize,
    seed: u64,
) -> Result<Prop2Report> {
    check_dim("prop2 y_star", instance.n, y_star.len())?;
    if !(sigma > 0.0) || sample_count == 0 {
        return Err(Error::InvalidConfig("sigma must be positive and sample_count non-zero".into()));
    }
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    let chunks = MC_CHUNKS.min(sample_count as u64) as usize;
    let parts = exec::map_indexed(chunks, |c| -> Result<(f64, f64)> {
        let count = sample_count / chunks + usize::from(c < sample_count % chunks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut y = vec![0.0; y_star.len()];
        for _ in 0..count {
            for (yi, ys) in y.iter_mut().zip(y_star) {
                *yi = ys + noise.sample(&mut rng);
            }
            let v: f64 = instance.eq_residual(d, &y)?.iter().map(|r| r.abs()).sum();
            sum += v;
            sum_sq += v * v;
        }
        Ok((sum, sum_sq))
    });
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        sum += a;
        sum_sq += b;
    }
    let n = sample_count as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let (diag, nuclear) = closed_forms(&instance.eq_jacobian(y_star)?, sigma)?;
    let relative_gap = if diag > 0.0 { (mean - diag).abs() / diag } else { mean.abs() };
    Ok(Prop2Report {
        sigma,
        mc_estimate: mean,
        closed_form_diag: diag,
        closed_form_nuclear: nuclear,
        relative_gap,
        sample_count,
        standard_error: (var / n).sqrt(),
    })
}

/// Solves for `y*` and runs [`verify_prop2_at`] there.
pub fn verify_prop2(instance: &ProblemInstance, d: &[f64], sigma: f64, sample_count: usize, seed: u64) -> Result<Prop2Report> {
    let sol = solve_reference(instance, d)?;
    verify_prop2_at(instance, d, &sol.y_star, sigma, sample_count, seed)
}
