//! Linear finite elements for `λ u'' = f` on an interval with Dirichlet ends,
//! and a Monte Carlo ensemble of such solves.

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{derive_seed, sample_measurements, Layout, Measurement, NoiseSpec, Quantity, ReplicaDataset};
use crate::error::{Error, Result};
use crate::pde::{linspace, Pde, PdeKind};
use crate::posterior::PosteriorField;

/// Sorted node coordinates of a 1D mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    nodes: Vec<f64>,
}

impl Mesh1D {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config(format!("a mesh needs at least 2 nodes, got {}", nodes.len())));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("mesh nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn uniform(lo: f64, hi: f64, n_nodes: usize) -> Result<Self> {
        Self::new(linspace(lo, hi, n_nodes))
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn element_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Evaluate the piecewise-linear function with `nodal` values at `x`.
    pub fn interpolate(&self, nodal: &[f64], x: f64) -> Result<f64> {
        if nodal.len() != self.nodes.len() {
            return Err(Error::dim("nodal values", self.nodes.len(), nodal.len()));
        }
        PiecewiseLinear::new(self.nodes.clone(), nodal.to_vec())?.eval(x)
    }
}

/// Tridiagonal system `sub[i] x[i-1] + main[i] x[i] + sup[i] x[i+1] = rhs[i]`;
/// `sub[0]` and `sup[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n],
            main: vec![0.0; n],
            sup: vec![0.0; n],
            rhs: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Thomas algorithm (no pivoting).
    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("tridiagonal system"));
        }
        for (what, v) in [("sub", &self.sub), ("sup", &self.sup), ("rhs", &self.rhs)] {
            if v.len() != n {
                return Err(Error::dim(what, n, v.len()));
            }
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.main[0];
        for i in 0..n {
            if i > 0 {
                denom = self.main[i] - self.sub[i] * c[i - 1];
            }
            if denom == 0.0 || !denom.is_finite() {
                return Err(Error::Singular(i));
            }
            c[i] = if i + 1 < n { self.sup[i] / denom } else { 0.0 };
            let prev = if i > 0 { self.sub[i] * d[i - 1] } else { 0.0 };
            d[i] = (self.rhs[i] - prev) / denom;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    }
}

/// Piecewise-linear interpolant through `(xs, ys)`, defined on `[xs[0], xs[n-1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("interpolation nodes"));
        }
        if xs.len() != ys.len() {
            return Err(Error::dim("interpolation values", xs.len(), ys.len()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("interpolation nodes must be strictly increasing".into()));
        }
        Ok(Self { xs, ys })
    }

    /// Through 1D measurements, sorted by location.
    pub fn from_measurements(meas: &[Measurement]) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = meas
            .iter()
            .map(|m| match m.location.as_slice() {
                [x] => Ok((*x, m.value)),
                other => Err(Error::dim("measurement location", 1, other.len())),
            })
            .collect::<Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (xs, ys) = pts.into_iter().unzip();
        Self::new(xs, ys)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let n = self.xs.len();
        if !(x >= self.xs[0] && x <= self.xs[n - 1]) {
            return Err(Error::OutsideDomain(vec![x]));
        }
        let i = self.xs.partition_point(|&v| v <= x);
        if i == 0 || i == n {
            // x equals the first or last node
            return Ok(if i == 0 { self.ys[0] } else { self.ys[n - 1] });
        }
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        if x == x0 {
            return Ok(self.ys[i - 1]);
        }
        let t = (x - x0) / (x1 - x0);
        Ok(self.ys[i - 1] + t * (self.ys[i] - self.ys[i - 1]))
    }
}

/// Piecewise-linear interpolation through noisy f measurements.
pub fn interpolate_f_linear(f_measurements: &[Measurement], x: f64) -> Result<f64> {
    PiecewiseLinear::from_measurements(f_measurements)?.eval(x)
}

/// Galerkin linear-element solution of `λ u'' = f`, `u(x_0) = u_left`,
/// `u(x_n) = u_right`. Returns nodal values.
pub fn fem_solve<F>(mesh: &Mesh1D, lambda: f64, f: F, u_left: f64, u_right: f64) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let x = mesh.nodes();
    let n = x.len();
    let mut sys = TridiagonalSystem::zeros(n);
    let g = 0.5 / 3f64.sqrt();
    for e in 0..n - 1 {
        let (xl, xr) = (x[e], x[e + 1]);
        let h = xr - xl;
        // -λ ∫ u' v' = ∫ f v, so K u = -F with K_e = (λ/h) [[1, -1], [-1, 1]]
        let k = lambda / h;
        sys.main[e] += k;
        sys.sup[e] -= k;
        sys.sub[e + 1] -= k;
        sys.main[e + 1] += k;
        let mid = 0.5 * (xl + xr);
        for q in [mid - g * h, mid + g * h] {
            let fq = f(q)?;
            let phi_r = (q - xl) / h;
            sys.rhs[e] -= 0.5 * h * fq * (1.0 - phi_r);
            sys.rhs[e + 1] -= 0.5 * h * fq * phi_r;
        }
    }
    for (i, value) in [(0, u_left), (n - 1, u_right)] {
        sys.sub[i] = 0.0;
        sys.sup[i] = 0.0;
        sys.main[i] = 1.0;
        sys.rhs[i] = value;
    }
    sys.solve()
}

fn dirichlet_values(u_meas: &[Measurement], mesh: &Mesh1D) -> Result<(usize, usize)> {
    let x = mesh.nodes();
    let (lo, hi) = (x[0], x[x.len() - 1]);
    let tol = 1e-12 * (hi - lo);
    let find = |end: f64| {
        u_meas
            .iter()
            .position(|m| m.location.len() == 1 && (m.location[0] - end).abs() <= tol)
            .ok_or_else(|| Error::Config(format!("no u measurement at mesh end {end}")))
    };
    Ok((find(lo)?, find(hi)?))
}

fn check_linear(pde: &Pde) -> Result<()> {
    if pde.kind != PdeKind::Linear1D {
        return Err(Error::Config(format!("finite elements support the linear 1D problem only, got {:?}", pde.kind)));
    }
    Ok(())
}

/// Solve once per member, each with fresh measurement noise around the exact
/// solution (member `i` uses seed `derive_seed(seed, i)`). u measurements
/// must include both mesh ends; they become the Dirichlet values.
pub fn fem_mc_ensemble(
    pde: &Pde,
    u_layout: &Layout,
    f_layout: &Layout,
    noise: NoiseSpec,
    ensemble_size: usize,
    mesh: &Mesh1D,
    seed: u64,
) -> Result<PosteriorField> {
    check_linear(pde)?;
    if ensemble_size < 1 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let members: Vec<Vec<f64>> = (0..ensemble_size)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let u = sample_measurements(pde, Quantity::U, u_layout, noise.sigma_u, derive_seed(s, 1))?;
            let f = sample_measurements(pde, Quantity::F, f_layout, noise.sigma_f, derive_seed(s, 2))?;
            let (l, r) = dirichlet_values(&u, mesh)?;
            let interp = PiecewiseLinear::from_measurements(&f)?;
            fem_solve(mesh, pde.lambda, |x| interp.eval(x), u[l].value, u[r].value)
        })
        .collect::<Result<_>>()?;
    stack(mesh, members)
}

/// One solve per replica of `data`: member `j` takes the `j`-th replica
/// targets as its u end values and f measurements.
pub fn fem_replica_ensemble(pde: &Pde, data: &ReplicaDataset, mesh: &Mesh1D) -> Result<PosteriorField> {
    check_linear(pde)?;
    let (l, r) = dirichlet_values(&data.u.measurements, mesh)?;
    let members: Vec<Vec<f64>> = (0..data.replicas())
        .into_par_iter()
        .map(|j| {
            let f: Vec<Measurement> = data
                .f
                .measurements
                .iter()
                .enumerate()
                .map(|(i, m)| Measurement {
                    value: data.f.targets[[i, j]],
                    ..m.clone()
                })
                .collect();
            let interp = PiecewiseLinear::from_measurements(&f)?;
            fem_solve(
                mesh,
                pde.lambda,
                |x| interp.eval(x),
                data.u.targets[[l, j]],
                data.u.targets[[r, j]],
            )
        })
        .collect::<Result<_>>()?;
    stack(mesh, members)
}

fn stack(mesh: &Mesh1D, members: Vec<Vec<f64>>) -> Result<PosteriorField> {
    let n = mesh.nodes().len();
    let m = members.len();
    let mut ens = Array2::zeros((n, m));
    for (j, col) in members.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            ens[[i, j]] = *v;
        }
    }
    PosteriorField::from_ensemble(mesh.nodes().iter().map(|&x| vec![x]).collect(), ens)
}
