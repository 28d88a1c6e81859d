//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use deeplde::numerics::Matrix;
use deeplde::problems::{generate_dataset, generate_instance, Dataset, ObjectiveKind, ProblemInstance};
use nalgebra::{DMatrix, DVector};

pub const PRESET_N: usize = 50;
pub const PRESET_N_EQ: usize = 30;
pub const PRESET_N_INEQ: usize = 20;
pub const PRESET_COUNT: usize = 2400;
pub const PRESET_WIDTH: usize = 64;

pub fn small_preset(kind: ObjectiveKind, seed: u64) -> Dataset {
    let inst = generate_instance(PRESET_N, PRESET_N_EQ, PRESET_N_INEQ, kind, seed).unwrap();
    generate_dataset(inst, PRESET_COUNT, seed + 1).unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Central differences of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a vector function, one column per input.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            f(&xp).iter().zip(f(&xm)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

/// `|a - b|_inf / max(|b|_inf, floor)`
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    diff / scale
}

/// Feasible set `{A y = d}` as `y0 + N t` with orthonormal `N`, built from
/// nalgebra's SVD and symmetric eigen-decomposition.
pub fn null_space_parametrization(inst: &ProblemInstance, d: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = inst.n;
    if inst.n_eq == 0 {
        return (DVector::zeros(n), DMatrix::identity(n, n));
    }
    let a = to_na(&inst.a);
    let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
    let y0 = &pinv * DVector::from_column_slice(d);
    let proj = DMatrix::identity(n, n) - &pinv * &a;
    let eig = proj.symmetric_eigen();
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    (y0, DMatrix::from_columns(&cols))
}

fn grid_points(center: &[f64], radius: f64, step: f64) -> Vec<Vec<f64>> {
    let per_axis = (2.0 * radius / step).round() as i64;
    let mut pts = vec![Vec::new()];
    for c in center {
        let mut next = Vec::with_capacity(pts.len() * (per_axis as usize + 1));
        for p in &pts {
            for k in 0..=per_axis {
                let mut q = p.clone();
                q.push(c - radius + k as f64 * step);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Brute-force minimum of the objective over `{A y = d, G y <= h}` by a
/// step-`1e-2` grid on the null-space coordinates, followed by successive
/// tenfold refinements around the incumbent. `radius` is the half-width
/// of the coarse window.
pub fn grid_minimum(inst: &ProblemInstance, d: &[f64], radius: f64) -> f64 {
    let (y0, nmat) = null_space_parametrization(inst, d);
    let k = nmat.ncols();
    assert!(k <= 2, "grid oracle is meant for at most two free coordinates");
    let g = if inst.n_ineq > 0 { Some(to_na(&inst.g)) } else { None };
    let h = DVector::from_column_slice(&inst.h_ub);
    let eval = |t: &[f64]| -> Option<f64> {
        let y = &y0 + &nmat * DVector::from_column_slice(t);
        if let Some(g) = &g {
            if (g * &y - &h).iter().any(|&v| v > 0.0) {
                return None;
            }
        }
        Some(inst.objective(y.as_slice()).unwrap())
    };
    let mut step = 1e-2;
    // Slide the coarse window toward the incumbent until it is interior;
    // the objective is convex, so this terminates at the minimizer.
    let mut center = vec![0.0; k];
    let (mut val, mut arg) = (f64::INFINITY, center.clone());
    for _ in 0..50 {
        for t in grid_points(&center, radius, step) {
            if let Some(v) = eval(&t) {
                if v < val {
                    val = v;
                    arg = t;
                }
            }
        }
        assert!(val.is_finite(), "grid found no feasible point");
        if arg.iter().zip(&center).all(|(a, c)| (a - c).abs() < radius - 2.0 * step) {
            break;
        }
        center = arg.clone();
    }
    for _ in 0..5 {
        let window = 2.0 * step;
        step /= 10.0;
        for t in grid_points(&arg.clone(), window, step) {
            if let Some(v) = eval(&t) {
                if v < val {
                    val = v;
                    arg = t;
                }
            }
        }
    }
    val
}

/// Small QP shapes with at most two free coordinates.
pub fn small_qp(i: u64) -> ProblemInstance {
    let n = 3 + (i % 4) as usize;
    let n_free = 1 + (i % 2) as usize;
    let n_ineq = 1 + (i % 4) as usize;
    generate_instance(n, n - n_free, n_ineq, ObjectiveKind::Quadratic, 100 + i).unwrap()
}
