//! Equality completion: given the predicted free coordinates `x`, solve
//! `h_d([x; z]) = 0` for the dependent coordinates `z`, and differentiate
//! `z` with respect to `x` through the implicit function theorem,
//!
//! ```text
//! dz/dx = -(dh/dz)^{-1} dh/dx
//! ```
//!
//! For linear equalities that is `-A_z^{-1} A_x` and is computed once per
//! instance. For the nonlinear family `h(y) = A (y + c sin y) - d` the
//! completion runs Newton's method and the Jacobian `A_z diag(1 + c_z cos z)`
//! is factored at the converged point.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{newton_solve, Lu, Matrix, NewtonReport, NEWTON_MAX_ITER};
use crate::problems::ProblemInstance;

/// Residual tolerance of the Newton completion, relative to `max(1, |d|_inf)`.
pub const COMPLETION_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CompletionOutput {
    pub z: Vec<f64>,
    /// `x` and `z` scattered back to the instance's coordinate order.
    pub y_full: Vec<f64>,
    /// `n_eq x (n - n_eq)`.
    pub dz_dx: Matrix,
    /// `None` for linear completion.
    pub newton: Option<NewtonReport>,
}

/// Result of [`Completer::complete`]; the implicit Jacobian is kept
/// factored rather than formed.
#[derive(Clone, Debug)]
pub struct Completion {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub newton: Option<NewtonReport>,
    /// Factored `dh/dz` at the solution (nonlinear family only).
    jac_z: Option<Lu>,
}

/// Per-instance completion state: the partition, the blocks of `A` and
/// the factorization of `A_z`.
#[derive(Clone, Debug)]
pub struct Completer {
    n: usize,
    part_x: Vec<usize>,
    part_z: Vec<usize>,
    a_x: Matrix,
    a_z: Matrix,
    a_z_lu: Lu,
    /// `-A_z^{-1} A_x`
    linear_dz_dx: Matrix,
    /// Nonlinear coefficients split by partition; `None` for linear families.
    c_x: Option<Vec<f64>>,
    c_z: Option<Vec<f64>>,
    max_iter: usize,
}

fn sine_shift(v: &[f64], c: &[f64]) -> Vec<f64> {
    v.iter().zip(c).map(|(vi, ci)| vi + ci * vi.sin()).collect()
}

fn sine_shift_slope(v: &[f64], c: &[f64]) -> Vec<f64> {
    v.iter().zip(c).map(|(vi, ci)| 1.0 + ci * vi.cos()).collect()
}

impl Completer {
    pub fn new(instance: &ProblemInstance) -> Result<Self> {
        Self::build(instance, instance.equality_c().map(<[f64]>::to_vec))
    }

    /// Completer that always runs Newton, treating a missing coefficient
    /// vector as all zeros.
    pub fn newton(instance: &ProblemInstance) -> Result<Self> {
        let c = instance.equality_c().map_or_else(|| vec![0.0; instance.n], <[f64]>::to_vec);
        Self::build(instance, Some(c))
    }

    fn build(instance: &ProblemInstance, c: Option<Vec<f64>>) -> Result<Self> {
        let part_x = instance.partition_x();
        let part_z = instance.partition_z.clone();
        let a = instance.a_matrix();
        let a_x = a.select_columns(&part_x);
        let a_z = a.select_columns(&part_z);
        let a_z_lu = Lu::factor(&a_z)?;
        let mut linear_dz_dx = a_z_lu.solve_matrix(&a_x)?;
        linear_dz_dx.scale(-1.0);
        let (c_x, c_z) = match c {
            Some(c) => {
                check_dim("nonlinear_c", instance.n, c.len())?;
                (
                    Some(part_x.iter().map(|&j| c[j]).collect()),
                    Some(part_z.iter().map(|&j| c[j]).collect()),
                )
            }
            None => (None, None),
        };
        Ok(Self {
            n: instance.n,
            part_x,
            part_z,
            a_x,
            a_z,
            a_z_lu,
            linear_dz_dx,
            c_x,
            c_z,
            max_iter: NEWTON_MAX_ITER,
        })
    }

    pub fn is_linear(&self) -> bool {
        self.c_z.is_none()
    }

    pub fn n_free(&self) -> usize {
        self.part_x.len()
    }

    pub fn n_dep(&self) -> usize {
        self.part_z.len()
    }

    pub fn partition_x(&self) -> &[usize] {
        &self.part_x
    }

    pub fn partition_z(&self) -> &[usize] {
        &self.part_z
    }

    pub fn scatter(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.part_x.iter().zip(x).for_each(|(&j, &v)| y[j] = v);
        self.part_z.iter().zip(z).for_each(|(&j, &v)| y[j] = v);
        y
    }

    /// Splits a vector over all coordinates into its `x` and `z` blocks.
    pub fn gather(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.part_x.iter().map(|&j| y[j]).collect(),
            self.part_z.iter().map(|&j| y[j]).collect(),
        )
    }

    /// Solves for `z`. `z_init` seeds Newton (zeros when absent) and is
    /// ignored for linear families.
    pub fn complete(&self, d: &[f64], x: &[f64], z_init: Option<&[f64]>) -> Result<Completion> {
        check_dim("completion d", self.n_dep(), d.len())?;
        check_dim("completion x", self.n_free(), x.len())?;
        match (&self.c_x, &self.c_z) {
            (Some(c_x), Some(c_z)) => self.complete_nonlinear(d, x, z_init, c_x, c_z),
            _ => {
                let mut rhs = d.to_vec();
                let ax = self.a_x.matvec(x);
                rhs.iter_mut().zip(&ax).for_each(|(r, v)| *r -= v);
                let z = self.a_z_lu.solve(&rhs);
                let y = self.scatter(x, &z);
                Ok(Completion { z, y, newton: None, jac_z: None })
            }
        }
    }

    fn complete_nonlinear(
        &self,
        d: &[f64],
        x: &[f64],
        z_init: Option<&[f64]>,
        c_x: &[f64],
        c_z: &[f64],
    ) -> Result<Completion> {
        let z0 = match z_init {
            Some(z) => {
                check_dim("completion z_init", self.n_dep(), z.len())?;
                z.to_vec()
            }
            None => vec![0.0; self.n_dep()],
        };
        // Residual in z: A_z s(z) - (d - A_x s(x)).
        let mut target = d.to_vec();
        let ax = self.a_x.matvec(&sine_shift(x, c_x));
        target.iter_mut().zip(&ax).for_each(|(t, v)| *t -= v);
        let residual = |z: &[f64]| {
            let mut r = self.a_z.matvec(&sine_shift(z, c_z));
            r.iter_mut().zip(&target).for_each(|(ri, ti)| *ri -= ti);
            r
        };
        let tol = COMPLETION_TOL * crate::numerics::norm_inf(d).max(1.0);
        let (z, report) = newton_solve(residual, |z| self.jacobian_z(z, c_z), &z0, tol, self.max_iter);
        if !report.converged {
            return Err(Error::NewtonDiverged {
                iterations: report.iterations,
                residual: report.final_residual_inf_norm,
            });
        }
        let jac_z = Lu::factor(&self.jacobian_z(&z, c_z))?;
        let y = self.scatter(x, &z);
        Ok(Completion { z, y, newton: Some(report), jac_z: Some(jac_z) })
    }

    fn jacobian_z(&self, z: &[f64], c_z: &[f64]) -> Matrix {
        let slope = sine_shift_slope(z, c_z);
        let mut j = self.a_z.clone();
        for i in 0..j.rows() {
            j.row_mut(i).iter_mut().zip(&slope).for_each(|(v, s)| *v *= s);
        }
        j
    }

    /// `(dz/dx)^T g` without forming `dz/dx`.
    pub fn vjp(&self, comp: &Completion, g: &[f64]) -> Result<Vec<f64>> {
        check_dim("completion vjp", self.n_dep(), g.len())?;
        match (&comp.jac_z, &self.c_x) {
            (Some(jz), Some(c_x)) => {
                // -(J_z^{-1} A_x D_x)^T g = -D_x A_x^T J_z^{-T} g
                let w = jz.solve_transpose(g);
                let (x, _) = self.gather(&comp.y);
                let slope = sine_shift_slope(&x, c_x);
                Ok(self
                    .a_x
                    .matvec_t(&w)
                    .iter()
                    .zip(&slope)
                    .map(|(v, s)| -v * s)
                    .collect())
            }
            _ => Ok(self.linear_dz_dx.matvec_t(g)),
        }
    }

    /// Forms `dz/dx` explicitly.
    pub fn dz_dx(&self, comp: &Completion) -> Result<Matrix> {
        match (&comp.jac_z, &self.c_x) {
            (Some(jz), Some(c_x)) => {
                let (x, _) = self.gather(&comp.y);
                let slope = sine_shift_slope(&x, c_x);
                let mut jx = self.a_x.clone();
                for i in 0..jx.rows() {
                    jx.row_mut(i).iter_mut().zip(&slope).for_each(|(v, s)| *v *= s);
                }
                let mut m = jz.solve_matrix(&jx)?;
                m.scale(-1.0);
                Ok(m)
            }
            _ => Ok(self.linear_dz_dx.clone()),
        }
    }

    /// Total derivative over `x` of a loss with partials `dl_dx`, `dl_dz`.
    pub fn chain(&self, comp: &Completion, dl_dx: &[f64], dl_dz: &[f64]) -> Result<Vec<f64>> {
        check_dim("chain dl_dx", self.n_free(), dl_dx.len())?;
        let mut total = self.vjp(comp, dl_dz)?;
        total.iter_mut().zip(dl_dx).for_each(|(t, v)| *t += v);
        Ok(total)
    }

    pub fn output(&self, comp: Completion) -> Result<CompletionOutput> {
        let dz_dx = self.dz_dx(&comp)?;
        Ok(CompletionOutput {
            z: comp.z,
            y_full: comp.y,
            dz_dx,
            newton: comp.newton,
        })
    }
}

/// Linear completion `z = A_z^{-1}(d - A_x x)` with `dz/dx = -A_z^{-1} A_x`.
pub fn complete_linear(instance: &ProblemInstance, d: &[f64], x: &[f64]) -> Result<CompletionOutput> {
    let c = Completer::build(instance, None)?;
    let comp = c.complete(d, x, None)?;
    c.output(comp)
}

/// Newton completion of `A (y + c sin y) = d`, a missing `c` read as zero.
pub fn complete_newton(
    instance: &ProblemInstance,
    d: &[f64],
    x: &[f64],
    z_init: &[f64],
) -> Result<CompletionOutput> {
    let c = Completer::newton(instance)?;
    let comp = c.complete(d, x, Some(z_init))?;
    c.output(comp)
}

/// `dl_dx + (dz/dx)^T dl_dz`.
pub fn chain_gradient(dl_dx_direct: &[f64], dl_dz: &[f64], comp: &CompletionOutput) -> Result<Vec<f64>> {
    check_dim("chain_gradient dl_dx", comp.dz_dx.cols(), dl_dx_direct.len())?;
    check_dim("chain_gradient dl_dz", comp.dz_dx.rows(), dl_dz.len())?;
    let mut total = comp.dz_dx.matvec_t(dl_dz);
    total.iter_mut().zip(dl_dx_direct).for_each(|(t, v)| *t += v);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate_instance, ObjectiveKind};

    fn handmade(a: &[f64], partition_z: usize, c: Option<Vec<f64>>) -> ProblemInstance {
        let n = a.len();
        let mut inst = generate_instance(n, 1, 0, ObjectiveKind::Quadratic, 0).unwrap();
        inst.a = Matrix::new(1, n, a.to_vec()).unwrap();
        inst.partition_z = vec![partition_z];
        if c.is_some() {
            inst.objective_kind = ObjectiveKind::NonlinearEq;
        }
        inst.nonlinear_c = c;
        inst
    }

    #[test]
    fn linear_examples() {
        let inst = handmade(&[1.0, 2.0], 1, None);
        let out = complete_linear(&inst, &[1.0], &[1.0]).unwrap();
        assert_close!(out.z[0], 0.0, 1e-15);
        assert_close!(out.dz_dx[(0, 0)], -0.5, 1e-15);
        assert!(out.newton.is_none());

        let inst = handmade(&[1.0, 1.0], 1, None);
        let out = complete_linear(&inst, &[1.0], &[0.3]).unwrap();
        assert_close!(out.z[0], 0.7, 1e-15);
        assert_eq!(out.y_full, vec![0.3, out.z[0]]);
    }

    #[test]
    fn newton_scalar_example() {
        let inst = handmade(&[0.0, 1.0], 1, Some(vec![0.0, 0.5]));
        for x in [-3.0, 0.0, 10.0] {
            let out = complete_newton(&inst, &[1.0], &[x], &[0.0]).unwrap();
            // bisection on [0, 1]
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if mid + 0.5 * mid.sin() < 1.0 { lo = mid } else { hi = mid }
            }
            assert_close!(out.z[0], lo, 1e-10);
            assert!(out.newton.unwrap().converged);
        }
    }

    #[test]
    fn newton_with_zero_c_matches_linear() {
        let inst = generate_instance(7, 3, 2, ObjectiveKind::Quadratic, 4).unwrap();
        let d = [0.5, -0.2, 0.9];
        let x = [0.1, 0.4, -1.0, 2.0];
        let lin = complete_linear(&inst, &d, &x).unwrap();
        let newt = complete_newton(&inst, &d, &x, &[0.0; 3]).unwrap();
        for (a, b) in lin.z.iter().zip(&newt.z) {
            assert_close!(*a, *b, 1e-12);
        }
    }

    #[test]
    fn dimension_errors() {
        let inst = generate_instance(5, 2, 1, ObjectiveKind::Quadratic, 4).unwrap();
        assert!(matches!(
            complete_linear(&inst, &[0.0], &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        let out = complete_linear(&inst, &[0.0; 2], &[0.0; 3]).unwrap();
        assert!(chain_gradient(&[0.0; 2], &[0.0; 2], &out).is_err());
    }

    #[test]
    fn singular_block_reported() {
        let inst = handmade(&[1.0, 0.0], 1, None);
        assert!(matches!(
            complete_linear(&inst, &[1.0], &[1.0]),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn chain_trivial_cases() {
        let inst = generate_instance(5, 2, 1, ObjectiveKind::Quadratic, 4).unwrap();
        let out = complete_linear(&inst, &[0.1, 0.2], &[0.0; 3]).unwrap();
        let dl_dx = [1.0, -2.0, 3.0];
        assert_eq!(chain_gradient(&dl_dx, &[0.0, 0.0], &out).unwrap(), dl_dx.to_vec());
        let mut zeroed = out.clone();
        zeroed.dz_dx = Matrix::zeros(2, 3);
        assert_eq!(chain_gradient(&dl_dx, &[5.0, 1.0], &zeroed).unwrap(), dl_dx.to_vec());
    }

    #[test]
    fn adjoint_matches_explicit_jacobian() {
        let inst = generate_instance(9, 4, 2, ObjectiveKind::NonlinearEq, 8).unwrap();
        let c = Completer::new(&inst).unwrap();
        let d = [0.3, -0.7, 0.2, 0.9];
        let x = [0.5, -0.1, 0.8, 0.0, -0.6];
        let comp = c.complete(&d, &x, None).unwrap();
        let g = [1.0, -0.5, 0.25, 2.0];
        let dl_dx = [0.1, 0.2, 0.3, 0.4, 0.5];
        let fast = c.chain(&comp, &dl_dx, &g).unwrap();
        let out = c.output(comp).unwrap();
        let slow = chain_gradient(&dl_dx, &g, &out).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert_close!(*a, *b, 1e-12);
        }
    }
}
