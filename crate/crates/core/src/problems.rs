//! Program instances, the feasible-by-construction generator and datasets.
//!
//! Every instance has the form
//!
//! ```text
//! minimize    f(y)
//! subject to  h_d(y) = 0,   G y <= h_ub
//! ```
//!
//! with `f(y) = 1/2 y^T Q y + p^T y` (quadratic) or `1/2 y^T Q y + p^T sin(y)`
//! (sin-nonconvex). The equality map is `A y - d`, or for the nonlinear
//! family `A (y + c * sin(y)) - d` with `0 <= c_j <= 1/2`.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot, pivot_columns, pseudo_inverse, Matrix};

/// Ridge added to `L L^T` when drawing `Q`.
pub const Q_RIDGE: f64 = 0.1;
/// Upper end of the uniform draw for the nonlinear coefficients.
pub const NONLINEAR_C_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    SinNonconvex,
    NonlinearEq,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::SinNonconvex => "sin_nonconvex",
            Self::NonlinearEq => "nonlinear_eq",
        }
    }

    pub fn has_linear_equalities(self) -> bool {
        self != Self::NonlinearEq
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub objective_kind: ObjectiveKind,
    #[serde(rename = "Q")]
    pub q: Matrix,
    pub p: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "G")]
    pub g: Matrix,
    pub h_ub: Vec<f64>,
    /// Coordinates solved for by the completion map, ascending.
    pub partition_z: Vec<usize>,
    pub nonlinear_c: Option<Vec<f64>>,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Row bounds `h_i = sum_j |(G A^+)_ij|`, plus `sum_j |G_ij| c_j` when a
/// nonlinear coefficient vector is given. With these bounds the witness
/// point of [`ProblemInstance::feasible_witness`] satisfies `G y <= h` for
/// every `d` in `[-1, 1]^{n_eq}`.
pub fn feasibility_bound(g: &Matrix, a: &Matrix, c: Option<&[f64]>) -> Result<Vec<f64>> {
    let ga = g.matmul(&pseudo_inverse(a)?)?;
    Ok((0..g.rows())
        .map(|i| {
            let mut h: f64 = ga.row(i).iter().map(|v| v.abs()).sum();
            if let Some(c) = c {
                h += g.row(i).iter().zip(c).map(|(gij, cj)| gij.abs() * cj).sum::<f64>();
            }
            h
        })
        .collect())
}

/// Solves `y + c sin(y) = u` for scalar `y`, `0 <= c < 1`. The left side is
/// strictly increasing, so bisection on `[u - c, u + c]` brackets the root.
fn invert_sine_shift(u: f64, c: f64) -> f64 {
    if c == 0.0 {
        return u;
    }
    let (mut lo, mut hi) = (u - c, u + c);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + c * mid.sin() < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + u.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Draws a random instance.
///
/// `A` and `G` have standard normal entries, `Q = L L^T + 0.1 I` with
/// `L_ij ~ N(0, 1/n)`, `p ~ N(0, I)`, and for the nonlinear family
/// `c_j ~ U[0, 0.5]`. The completion coordinates are picked by column
/// pivoting on `A`.
pub fn generate_instance(
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<ProblemInstance> {
    if n_eq > n {
        return Err(Error::InvalidConfig(format!(
            "equalities must not outnumber variables (n = {n}, n_eq = {n_eq})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = normal_matrix(n_eq, n, 1.0, &mut rng);
    let g = normal_matrix(n_ineq, n, 1.0, &mut rng);
    let l = normal_matrix(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
    let mut q = l.matmul(&l.transpose())?;
    for i in 0..n {
        q[(i, i)] += Q_RIDGE;
    }
    let p: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let nonlinear_c = (kind == ObjectiveKind::NonlinearEq)
        .then(|| (0..n).map(|_| rng.random_range(0.0..=NONLINEAR_C_MAX)).collect::<Vec<f64>>());
    let h_ub = feasibility_bound(&g, &a, nonlinear_c.as_deref())?;
    let partition_z = pivot_columns(&a).map_err(|_| Error::PartitionNotFound { n_eq })?;
    Ok(ProblemInstance {
        n,
        n_eq,
        n_ineq,
        objective_kind: kind,
        q,
        p,
        a,
        g,
        h_ub,
        partition_z,
        nonlinear_c,
    })
}

impl ProblemInstance {
    /// Checks shapes and the structural invariants a loaded instance must satisfy.
    pub fn validate(&self) -> Result<()> {
        let (n, n_eq, n_ineq) = (self.n, self.n_eq, self.n_ineq);
        if n_eq > n {
            return Err(Error::InvalidConfig(format!("n_eq = {n_eq} exceeds n = {n}")));
        }
        check_dim("Q rows", n, self.q.rows())?;
        check_dim("Q cols", n, self.q.cols())?;
        check_dim("p", n, self.p.len())?;
        if n_eq > 0 {
            check_dim("A rows", n_eq, self.a.rows())?;
            check_dim("A cols", n, self.a.cols())?;
        }
        if n_ineq > 0 {
            check_dim("G rows", n_ineq, self.g.rows())?;
            check_dim("G cols", n, self.g.cols())?;
        }
        check_dim("h_ub", n_ineq, self.h_ub.len())?;
        check_dim("partition_z", n_eq, self.partition_z.len())?;
        let mut seen = vec![false; n];
        for &j in &self.partition_z {
            if j >= n || seen[j] {
                return Err(Error::InvalidConfig(format!(
                    "partition_z must hold distinct indices below {n}"
                )));
            }
            seen[j] = true;
        }
        match (&self.nonlinear_c, self.objective_kind) {
            (Some(c), ObjectiveKind::NonlinearEq) => {
                check_dim("nonlinear_c", n, c.len())?;
                if c.iter().any(|&v| !(0.0..1.0).contains(&v)) {
                    return Err(Error::InvalidConfig("nonlinear_c entries must lie in [0, 1)".into()));
                }
            }
            (None, ObjectiveKind::NonlinearEq) => {
                return Err(Error::InvalidConfig("nonlinear_eq instance without nonlinear_c".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// `A` with shape `n_eq x n` even when `n_eq == 0` (JSON loses the column count).
    pub(crate) fn a_matrix(&self) -> Matrix {
        if self.a.rows() == self.n_eq && self.a.cols() == self.n {
            self.a.clone()
        } else {
            Matrix::zeros(self.n_eq, self.n)
        }
    }

    pub(crate) fn g_matrix(&self) -> Matrix {
        if self.g.rows() == self.n_ineq && self.g.cols() == self.n {
            self.g.clone()
        } else {
            Matrix::zeros(self.n_ineq, self.n)
        }
    }

    /// Indices of the coordinates the network predicts (complement of `partition_z`), ascending.
    pub fn partition_x(&self) -> Vec<usize> {
        let mut is_z = vec![false; self.n];
        self.partition_z.iter().for_each(|&j| is_z[j] = true);
        (0..self.n).filter(|&j| !is_z[j]).collect()
    }

    pub fn n_free(&self) -> usize {
        self.n - self.n_eq
    }

    /// Active nonlinear coefficients, `None` for linear equality families.
    pub fn equality_c(&self) -> Option<&[f64]> {
        match self.objective_kind {
            ObjectiveKind::NonlinearEq => self.nonlinear_c.as_deref(),
            _ => None,
        }
    }

    pub fn objective(&self, y: &[f64]) -> Result<f64> {
        check_dim("objective", self.n, y.len())?;
        let quad = 0.5 * dot(y, &self.q.matvec(y));
        Ok(match self.objective_kind {
            ObjectiveKind::SinNonconvex => quad + self.p.iter().zip(y).map(|(p, v)| p * v.sin()).sum::<f64>(),
            ObjectiveKind::Quadratic | ObjectiveKind::NonlinearEq => quad + dot(&self.p, y),
        })
    }

    pub fn objective_grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("objective_grad", self.n, y.len())?;
        let mut grad = self.q.matvec(y);
        match self.objective_kind {
            ObjectiveKind::SinNonconvex => {
                for ((gi, pi), yi) in grad.iter_mut().zip(&self.p).zip(y) {
                    *gi += pi * yi.cos();
                }
            }
            _ => grad.iter_mut().zip(&self.p).for_each(|(gi, pi)| *gi += pi),
        }
        Ok(grad)
    }

    /// `G y - h_ub`.
    pub fn ineq_slack(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("ineq_slack", self.n, y.len())?;
        if self.n_ineq == 0 {
            return Ok(Vec::new());
        }
        Ok(self.g.matvec(y).iter().zip(&self.h_ub).map(|(gy, h)| gy - h).collect())
    }

    /// `max(G y - h_ub, 0)` elementwise.
    pub fn ineq_violation(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.ineq_slack(y)?.into_iter().map(|v| v.max(0.0)).collect())
    }

    /// Signed equality residual `h_d(y)`.
    pub fn eq_residual(&self, d: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dim("eq_residual y", self.n, y.len())?;
        check_dim("eq_residual d", self.n_eq, d.len())?;
        if self.n_eq == 0 {
            return Ok(Vec::new());
        }
        let ay = match self.equality_c() {
            Some(c) => {
                let shifted: Vec<f64> = y.iter().zip(c).map(|(v, cj)| v + cj * v.sin()).collect();
                self.a.matvec(&shifted)
            }
            None => self.a.matvec(y),
        };
        Ok(ay.iter().zip(d).map(|(a, b)| a - b).collect())
    }

    /// Jacobian of `h_d` at `y` (`n_eq x n`).
    pub fn eq_jacobian(&self, y: &[f64]) -> Result<Matrix> {
        check_dim("eq_jacobian", self.n, y.len())?;
        let mut j = self.a_matrix();
        if let Some(c) = self.equality_c() {
            for i in 0..self.n_eq {
                for (k, v) in j.row_mut(i).iter_mut().enumerate() {
                    *v *= 1.0 + c[k] * y[k].cos();
                }
            }
        }
        Ok(j)
    }

    /// A point satisfying every constraint for `d` in `[-1, 1]^{n_eq}`:
    /// `A^+ d`, pushed through the inverse sine shift for the nonlinear family.
    pub fn feasible_witness(&self, d: &[f64]) -> Result<Vec<f64>> {
        check_dim("feasible_witness", self.n_eq, d.len())?;
        if self.n_eq == 0 {
            return Ok(vec![0.0; self.n]);
        }
        let u = pseudo_inverse(&self.a)?.matvec(d);
        Ok(match self.equality_c() {
            Some(c) => u.iter().zip(c).map(|(&ui, &cj)| invert_sine_shift(ui, cj)).collect(),
            None => u,
        })
    }
}

/// Index ranges of the train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// 10:1:1 by count, rounding the two small parts to the nearest integer.
    pub fn ten_one_one(count: usize) -> Self {
        let small = (count as f64 / 12.0).round() as usize;
        let train = count - 2 * small;
        Self {
            train: 0..train,
            validation: train..train + small,
            test: train + small..count,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: [usize; 2],
    validation: [usize; 2],
    test: [usize; 2],
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SplitFile {
            train: [self.train.start, self.train.end],
            validation: [self.validation.start, self.validation.end],
            test: [self.test.start, self.test.end],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = SplitFile::deserialize(d)?;
        Ok(Self {
            train: f.train[0]..f.train[1],
            validation: f.validation[0]..f.validation[1],
            test: f.test[0]..f.test[1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(flatten)]
    pub instance: ProblemInstance,
    pub samples: Vec<Vec<f64>>,
    pub split: Split,
}

/// `count` inputs drawn uniformly from `[-1, 1]^{n_eq}`, split 10:1:1.
pub fn generate_dataset(instance: ProblemInstance, count: usize, seed: u64) -> Result<Dataset> {
    if count < 12 {
        return Err(Error::InvalidConfig(format!("need at least 12 samples, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| (0..instance.n_eq).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    Ok(Dataset {
        instance,
        samples,
        split: Split::ten_one_one(count),
    })
}

impl Dataset {
    pub fn indices(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.split.train.clone(),
            SplitKind::Validation => self.split.validation.clone(),
            SplitKind::Test => self.split.test.clone(),
        }
    }

    pub fn part(&self, kind: SplitKind) -> &[Vec<f64>] {
        &self.samples[self.indices(kind)]
    }

    pub fn validate(&self) -> Result<()> {
        self.instance.validate()?;
        for s in &self.samples {
            check_dim("sample", self.instance.n_eq, s.len())?;
        }
        let total = self.samples.len();
        let Split { train, validation, test } = &self.split;
        if train.start != 0 || train.end != validation.start || validation.end != test.start || test.end != total {
            return Err(Error::InvalidConfig(format!(
                "split ranges must tile 0..{total} in order"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
