//! Strong-form residuals evaluated with finite-difference stencils.
//!
//! Supported operators, all with diffusion coefficient `lambda`:
//!
//! | kind                  | operator                         | domain      |
//! |-----------------------|----------------------------------|-------------|
//! | `Linear1D`            | `lambda u''`                     | [-0.7, 0.7] |
//! | `NonlinearTanh1D`     | `lambda u'' + k tanh(u)`         | [-0.7, 0.7] |
//! | `AllenCahn2D`         | `lambda Δu + u (u² - 1)`         | [-1, 1]²    |
//! | `QuadraticReaction2D` | `lambda Δu + k u²`               | [-1, 1]²    |
//!
//! Every residual is a vector with one entry per replica.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PdeKind {
    Linear1D,
    NonlinearTanh1D,
    AllenCahn2D,
    QuadraticReaction2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    Fixed(f64),
    /// One trainable coefficient per replica.
    Trainable,
}

/// A PDE with its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pde {
    pub kind: PdeKind,
    pub lambda: f64,
    pub k_mode: KMode,
}

/// Reaction term value and its partial derivatives.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Reaction {
    pub value: f64,
    pub d_u: f64,
    pub d_k: f64,
}

impl Pde {
    pub fn new(kind: PdeKind, lambda: f64, k_mode: KMode) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if k_mode == KMode::Trainable
            && matches!(kind, PdeKind::Linear1D | PdeKind::AllenCahn2D)
        {
            return Err(Error::Config(format!("{kind:?} has no trainable reaction coefficient")));
        }
        Ok(Self {
            kind,
            lambda,
            k_mode,
        })
    }

    pub fn linear_1d() -> Self {
        Self::new(PdeKind::Linear1D, 0.01, KMode::Fixed(0.0)).unwrap()
    }

    pub fn nonlinear_1d(k_mode: KMode) -> Self {
        Self::new(PdeKind::NonlinearTanh1D, 0.01, k_mode).unwrap()
    }

    pub fn allen_cahn_2d() -> Self {
        Self::new(PdeKind::AllenCahn2D, 0.01, KMode::Fixed(1.0)).unwrap()
    }

    pub fn quadratic_2d(k_mode: KMode) -> Self {
        Self::new(PdeKind::QuadraticReaction2D, 0.01, k_mode).unwrap()
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            PdeKind::Linear1D | PdeKind::NonlinearTanh1D => 1,
            PdeKind::AllenCahn2D | PdeKind::QuadraticReaction2D => 2,
        }
    }

    pub fn domain(&self) -> Domain {
        match self.dim() {
            1 => Domain::interval(-0.7, 0.7),
            _ => Domain::square(-1.0, 1.0),
        }
    }

    /// The reaction coefficient used to manufacture data (the inverse-problem truth).
    pub fn true_k(&self) -> f64 {
        match self.kind {
            PdeKind::Linear1D => 0.0,
            PdeKind::NonlinearTanh1D => 0.7,
            PdeKind::AllenCahn2D | PdeKind::QuadraticReaction2D => 1.0,
        }
    }

    pub fn has_reaction(&self) -> bool {
        self.kind != PdeKind::Linear1D
    }

    pub fn is_inverse(&self) -> bool {
        self.k_mode == KMode::Trainable
    }

    /// Coefficient for replica `j`.
    pub fn k_for(&self, k_values: Option<&[f64]>, j: usize) -> f64 {
        match self.k_mode {
            KMode::Fixed(k) => k,
            KMode::Trainable => k_values.expect("validated k array")[j],
        }
    }

    pub(crate) fn check_k(&self, k_values: Option<&[f64]>, replicas: usize) -> Result<()> {
        if self.k_mode == KMode::Trainable {
            let got = k_values.map_or(0, <[f64]>::len);
            if got != replicas {
                return Err(Error::MissingK {
                    expected: replicas,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn reaction(&self, u: f64, k: f64) -> Reaction {
        match self.kind {
            PdeKind::Linear1D => Reaction {
                value: 0.0,
                d_u: 0.0,
                d_k: 0.0,
            },
            PdeKind::NonlinearTanh1D => {
                let t = u.tanh();
                Reaction {
                    value: k * t,
                    d_u: k * (1.0 - t * t),
                    d_k: t,
                }
            }
            PdeKind::AllenCahn2D => Reaction {
                value: u * (u * u - 1.0),
                d_u: 3.0 * u * u - 1.0,
                d_k: 0.0,
            },
            PdeKind::QuadraticReaction2D => Reaction {
                value: k * u * u,
                d_u: 2.0 * k * u,
                d_k: u * u,
            },
        }
    }
}

/// Axis-aligned box `[lo, hi]^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { dim: 1, lo, hi }
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        Self { dim: 2, lo, hi }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        // absorbs round-off in computed grid and stencil coordinates
        let tol = 1e-12 * (self.hi - self.lo);
        p.len() == self.dim && p.iter().all(|&c| c >= self.lo - tol && c <= self.hi + tol)
    }

    pub fn check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::dim("point", self.dim, p.len()));
        }
        if !self.contains(p) {
            return Err(Error::OutsideDomain(p.to_vec()));
        }
        Ok(())
    }

    /// Endpoint-inclusive uniform grid with `n` points per axis.
    pub fn grid(&self, n: usize) -> Vec<Vec<f64>> {
        self.grid_inset(n, 0.0)
    }

    /// Uniform grid on `[lo + inset, hi - inset]^dim`.
    pub fn grid_inset(&self, n: usize, inset: f64) -> Vec<Vec<f64>> {
        let axis = linspace(self.lo + inset, self.hi - inset, n);
        match self.dim {
            1 => axis.into_iter().map(|x| vec![x]).collect(),
            _ => {
                let mut pts = Vec::with_capacity(n * n);
                for &y in &axis {
                    for &x in &axis {
                        pts.push(vec![x, y]);
                    }
                }
                pts
            }
        }
    }
}

/// Endpoint-inclusive evenly spaced values.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => {
            let step = (b - a) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { b } else { a + step * i as f64 })
                .collect()
        }
    }
}

/// Finite-difference step and spatial dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stencil {
    pub h: f64,
    pub dim: usize,
}

impl Stencil {
    pub fn new(h: f64, dim: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("stencil step must be positive, got {h}")));
        }
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("stencil dimension must be 1 or 2, got {dim}")));
        }
        Ok(Self { h, dim })
    }

    /// Default steps: 1e-3 in 1D, 1e-2 in 2D.
    pub fn default_for(dim: usize) -> Self {
        let h = if dim == 1 { 1e-3 } else { 1e-2 };
        Self { h, dim }
    }

    /// Points and weights of the central second difference (1D) or the
    /// 5-point Laplacian (2D); the centre comes first.
    pub fn laplacian_terms(&self, p: &[f64]) -> Vec<(Vec<f64>, f64)> {
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut terms = vec![(p.to_vec(), -2.0 * self.dim as f64 * inv_h2)];
        for axis in 0..self.dim {
            for s in [-1.0, 1.0] {
                let mut q = p.to_vec();
                q[axis] += s * self.h;
                terms.push((q, inv_h2));
            }
        }
        terms
    }

    /// Second-order one-sided first derivative along `axis`, stepping into
    /// the domain in direction `inward` (+1 or -1):
    /// `inward * (-3 u(p) + 4 u(p + inward h) - u(p + 2 inward h)) / (2h)`.
    pub fn one_sided_terms(&self, p: &[f64], axis: usize, inward: f64) -> Vec<(Vec<f64>, f64)> {
        let scale = inward / (2.0 * self.h);
        [(0.0, -3.0), (1.0, 4.0), (2.0, -1.0)]
            .into_iter()
            .map(|(steps, c)| {
                let mut q = p.to_vec();
                q[axis] += inward * steps * self.h;
                (q, c * scale)
            })
            .collect()
    }

    fn check_support(&self, domain: &Domain, terms: &[(Vec<f64>, f64)], centre: &[f64]) -> Result<()> {
        if terms.iter().any(|(q, _)| !domain.contains(q)) {
            return Err(Error::StencilOutsideDomain(centre.to_vec()));
        }
        Ok(())
    }
}

/// Replica-valued field: anything that returns `M` values at a point.
pub trait ReplicaField {
    fn input_dim(&self) -> usize;
    fn replicas(&self) -> usize;
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>>;
}

impl ReplicaField for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn replicas(&self) -> usize {
        self.output_dim()
    }

    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.forward(p)
    }
}

/// Field defined by a closure; handy for forcing exact values at stencil points.
pub struct FnField<F> {
    dim: usize,
    replicas: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, replicas: usize, f: F) -> Self {
        Self { dim, replicas, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> ReplicaField for FnField<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn replicas(&self) -> usize {
        self.replicas
    }

    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.dim {
            return Err(Error::dim("input point", self.dim, p.len()));
        }
        let v = (self.f)(p);
        if v.len() != self.replicas {
            return Err(Error::dim("field replicas", self.replicas, v.len()));
        }
        Ok(v)
    }
}

fn apply_terms<U: ReplicaField + ?Sized>(u: &U, terms: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; u.replicas()];
    for (q, c) in terms {
        for (a, v) in acc.iter_mut().zip(u.eval(q)?) {
            *a += c * v;
        }
    }
    Ok(acc)
}

/// `lambda D²u^j + reaction(u^j, k_j) - f^j` at an interior point.
pub fn residual_pde<U, F>(
    u: &U,
    f: &F,
    k_values: Option<&[f64]>,
    pde: &Pde,
    stencil: &Stencil,
    point: &[f64],
) -> Result<Vec<f64>>
where
    U: ReplicaField + ?Sized,
    F: ReplicaField + ?Sized,
{
    let m = u.replicas();
    if f.replicas() != m {
        return Err(Error::dim("f replicas", m, f.replicas()));
    }
    if stencil.dim != pde.dim() {
        return Err(Error::dim("stencil dimension", pde.dim(), stencil.dim));
    }
    pde.check_k(k_values, m)?;
    let domain = pde.domain();
    domain.check(point)?;
    let terms = stencil.laplacian_terms(point);
    stencil.check_support(&domain, &terms, point)?;
    let lap = apply_terms(u, &terms)?;
    let centre = if pde.has_reaction() {
        u.eval(point)?
    } else {
        vec![0.0; m]
    };
    let fv = f.eval(point)?;
    Ok((0..m)
        .map(|j| {
            let react = pde.reaction(centre[j], pde.k_for(k_values, j)).value;
            pde.lambda * lap[j] + react - fv[j]
        })
        .collect())
}

/// `u^j(point) - target`.
pub fn residual_essential<U: ReplicaField + ?Sized>(u: &U, point: &[f64], target: f64) -> Result<Vec<f64>> {
    Ok(u.eval(point)?.into_iter().map(|v| v - target).collect())
}

/// One-sided derivative along `axis` minus `target`; `inward` gives the
/// direction pointing into the domain.
pub fn residual_natural<U: ReplicaField + ?Sized>(
    u: &U,
    domain: &Domain,
    stencil: &Stencil,
    point: &NaturalPoint,
) -> Result<Vec<f64>> {
    let terms = stencil.one_sided_terms(&point.point, point.axis, point.inward);
    stencil.check_support(domain, &terms, &point.point)?;
    Ok(apply_terms(u, &terms)?
        .into_iter()
        .map(|d| d - point.target)
        .collect())
}

/// `net^j(point) - replica_targets[j]`.
pub fn residual_measurement<U: ReplicaField + ?Sized>(
    net: &U,
    point: &[f64],
    replica_targets: &[f64],
) -> Result<Vec<f64>> {
    if replica_targets.len() != net.replicas() {
        return Err(Error::dim("replica targets", net.replicas(), replica_targets.len()));
    }
    Ok(net
        .eval(point)?
        .into_iter()
        .zip(replica_targets)
        .map(|(v, t)| v - t)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssentialPoint {
    pub point: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalPoint {
    pub point: Vec<f64>,
    pub axis: usize,
    /// +1 if the domain lies in the positive `axis` direction from `point`.
    pub inward: f64,
    pub target: f64,
}

/// Collocation points for the PDE and boundary residual families.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollocationSet {
    pub interior: Vec<Vec<f64>>,
    pub essential: Vec<EssentialPoint>,
    pub natural: Vec<NaturalPoint>,
}

impl CollocationSet {
    /// Uniform interior grid inset by the stencil step; no boundary points.
    pub fn uniform(domain: &Domain, stencil: &Stencil, per_axis: usize) -> Result<Self> {
        if per_axis < 1 {
            return Err(Error::Config("collocation count must be >= 1".into()));
        }
        let set = Self {
            interior: domain.grid_inset(per_axis, stencil.h),
            ..Self::default()
        };
        set.validate(domain, stencil)?;
        Ok(set)
    }

    pub fn validate(&self, domain: &Domain, stencil: &Stencil) -> Result<()> {
        for p in &self.interior {
            domain.check(p)?;
            stencil.check_support(domain, &stencil.laplacian_terms(p), p)?;
        }
        for e in &self.essential {
            domain.check(&e.point)?;
        }
        for n in &self.natural {
            domain.check(&n.point)?;
            stencil.check_support(domain, &stencil.one_sided_terms(&n.point, n.axis, n.inward), &n.point)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_field(dim: usize, m: usize, v: f64) -> FnField<impl Fn(&[f64]) -> Vec<f64>> {
        FnField::new(dim, m, move |_| vec![v; m])
    }

    #[test]
    fn zero_fields_zero_residual() {
        let pde = Pde::linear_1d();
        let st = Stencil::default_for(1);
        let z = Mlp::zeros(&[1, 4, 3]).unwrap();
        let r = residual_pde(&z, &z, None, &pde, &st, &[0.2]).unwrap();
        assert_eq!(r, vec![0.0; 3]);
    }

    #[test]
    fn manufactured_sin_cubed_is_second_order() {
        let pde = Pde::linear_1d();
        let u = |x: f64| (6.0 * x).sin().powi(3);
        // symbolic second derivative of sin^3(6x)
        let u_xx = |x: f64| {
            let (s, c) = (6.0 * x).sin_cos();
            216.0 * s * c * c - 108.0 * s * s * s
        };
        // truncation error of the central difference is h²/12 · u''''
        let u4 = |x: f64| {
            let e = 1e-3;
            (u_xx(x + e) - 2.0 * u_xx(x) + u_xx(x - e)) / (e * e)
        };
        for h in [1e-3, 2e-3] {
            let st = Stencil::new(h, 1).unwrap();
            for &x in &[-0.5, -0.1, 0.05, 0.33, 0.6] {
                let uf = FnField::new(1, 2, move |p: &[f64]| vec![u(p[0]); 2]);
                let ff = FnField::new(1, 2, move |p: &[f64]| vec![0.01 * u_xx(p[0]); 2]);
                let r = residual_pde(&uf, &ff, None, &pde, &st, &[x]).unwrap();
                let bound = 0.01 * h * h / 12.0 * u4(x).abs() * 1.5 + 1e-9;
                assert!(r[0].abs() <= bound, "x={x} h={h}: {} > {bound}", r[0]);
            }
        }
    }

    #[test]
    fn allen_cahn_constant_one_root() {
        let pde = Pde::allen_cahn_2d();
        let st = Stencil::default_for(2);
        let r = residual_pde(&const_field(2, 4, 1.0), &const_field(2, 4, 0.0), None, &pde, &st, &[0.1, -0.3])
            .unwrap();
        assert_eq!(r, vec![0.0; 4]);
    }

    #[test]
    fn stencil_outside_domain_is_error() {
        let pde = Pde::linear_1d();
        let st = Stencil::default_for(1);
        let z = const_field(1, 2, 0.0);
        assert!(matches!(
            residual_pde(&z, &z, None, &pde, &st, &[0.7]),
            Err(Error::StencilOutsideDomain(_))
        ));
        assert!(matches!(residual_pde(&z, &z, None, &pde, &st, &[0.9]), Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn trainable_k_requires_array() {
        let pde = Pde::nonlinear_1d(KMode::Trainable);
        let st = Stencil::default_for(1);
        let z = const_field(1, 3, 0.0);
        assert!(matches!(
            residual_pde(&z, &z, None, &pde, &st, &[0.0]),
            Err(Error::MissingK { .. })
        ));
        assert!(residual_pde(&z, &z, Some(&[0.1, 0.2, 0.3]), &pde, &st, &[0.0]).is_ok());
    }

    #[test]
    fn reaction_kinds() {
        assert!(Pde::new(PdeKind::Linear1D, 0.01, KMode::Trainable).is_err());
        assert!(Pde::new(PdeKind::AllenCahn2D, 0.01, KMode::Trainable).is_err());
        assert!(Pde::new(PdeKind::QuadraticReaction2D, 0.0, KMode::Trainable).is_err());
        let r = Pde::quadratic_2d(KMode::Trainable).reaction(2.0, 0.5);
        assert_eq!((r.value, r.d_u, r.d_k), (2.0, 2.0, 4.0));
    }

    #[test]
    fn essential_residuals() {
        let z = Mlp::zeros(&[1, 3, 4]).unwrap();
        assert_eq!(residual_essential(&z, &[-0.7], 0.0).unwrap(), vec![0.0; 4]);
        assert_eq!(residual_essential(&z, &[-0.7], 1.0).unwrap(), vec![-1.0; 4]);
        let net = Mlp::xavier_normal(&[1, 3, 4], 1).unwrap();
        let r = residual_essential(&net, &[0.3], 0.25).unwrap();
        let y = net.forward(&[0.3]).unwrap();
        for (ri, yi) in r.iter().zip(&y) {
            // equal up to the rounding of one subtraction and one addition
            assert!((ri + 0.25 - yi).abs() <= 4.0 * f64::EPSILON * yi.abs().max(0.25));
        }
    }

    #[test]
    fn natural_residuals() {
        let domain = Domain::interval(-0.7, 0.7);
        let st = Stencil::default_for(1);
        let left = NaturalPoint {
            point: vec![-0.7],
            axis: 0,
            inward: 1.0,
            target: 0.0,
        };
        let z = Mlp::zeros(&[1, 2]).unwrap();
        assert_eq!(residual_natural(&z, &domain, &st, &left).unwrap(), vec![0.0, 0.0]);

        // affine net with slope 1.7
        let affine = Mlp::from_params(&[1, 1], vec![1.7, 0.3]).unwrap();
        for (x, inward) in [(-0.7, 1.0), (0.7, -1.0)] {
            let p = NaturalPoint {
                point: vec![x],
                axis: 0,
                inward,
                target: 1.7,
            };
            assert!(residual_natural(&affine, &domain, &st, &p).unwrap()[0].abs() < 1e-10);
        }

        // u = x², analytic derivative 0 at the origin
        let dom = Domain::interval(-1.0, 1.0);
        let sq = FnField::new(1, 1, |p: &[f64]| vec![p[0] * p[0]]);
        let at0 = NaturalPoint {
            point: vec![0.0],
            axis: 0,
            inward: 1.0,
            target: 0.0,
        };
        assert!(residual_natural(&sq, &dom, &st, &at0).unwrap()[0].abs() <= st.h * st.h);
        // cubic: truncation error is -h²/3 · u''', so halving h divides it by 4
        let cube = FnField::new(1, 1, |p: &[f64]| vec![p[0].powi(3)]);
        let e1 = residual_natural(&cube, &dom, &Stencil::new(1e-2, 1).unwrap(), &at0).unwrap()[0];
        let e2 = residual_natural(&cube, &dom, &Stencil::new(5e-3, 1).unwrap(), &at0).unwrap()[0];
        assert!((e1 / e2 - 4.0).abs() < 1e-6, "ratio {}", e1 / e2);

        let outside = NaturalPoint {
            point: vec![0.7],
            axis: 0,
            inward: 1.0,
            target: 0.0,
        };
        assert!(residual_natural(&z, &domain, &st, &outside).is_err());
    }

    #[test]
    fn measurement_residuals() {
        let z = Mlp::zeros(&[1, 2, 3]).unwrap();
        assert_eq!(residual_measurement(&z, &[0.0], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let t = [0.1, -0.2, 0.05];
        assert_eq!(residual_measurement(&z, &[0.0], &t).unwrap(), vec![-0.1, 0.2, -0.05]);
        assert!(residual_measurement(&z, &[0.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn stencil_exact_on_quadratics() {
        let pde = Pde::allen_cahn_2d();
        let st = Stencil::default_for(2);
        // u = 3x² - xy + 2y² + x - 1, Δu = 6 + 4 = 10
        let u = FnField::new(2, 1, |p: &[f64]| {
            vec![3.0 * p[0] * p[0] - p[0] * p[1] + 2.0 * p[1] * p[1] + p[0] - 1.0]
        });
        let zero = const_field(2, 1, 0.0);
        let p = [0.31, -0.42];
        let r = residual_pde(&u, &zero, None, &pde, &st, &p).unwrap()[0];
        let uv = u.eval(&p).unwrap()[0];
        let expected = 0.01 * 10.0 + uv * (uv * uv - 1.0);
        assert!((r - expected).abs() < 1e-9, "{r} vs {expected}");
    }

    #[test]
    fn replica_independence() {
        let pde = Pde::nonlinear_1d(KMode::Trainable);
        let st = Stencil::default_for(1);
        let net = Mlp::xavier_normal(&[1, 5, 3], 4).unwrap();
        let f = Mlp::xavier_normal(&[1, 5, 3], 5).unwrap();
        let k = [0.2, 0.4, 0.6];
        let base = residual_pde(&net, &f, Some(&k), &pde, &st, &[0.1]).unwrap();
        let k2 = [0.2, 0.9, 0.6];
        let moved = residual_pde(&net, &f, Some(&k2), &pde, &st, &[0.1]).unwrap();
        assert_eq!(base[0], moved[0]);
        assert_ne!(base[1], moved[1]);
        assert_eq!(base[2], moved[2]);

        let t = [0.0, 0.0, 0.0];
        let t2 = [0.0, 0.0, 0.5];
        let a = residual_measurement(&net, &[0.1], &t).unwrap();
        let b = residual_measurement(&net, &[0.1], &t2).unwrap();
        assert_eq!(&a[..2], &b[..2]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn collocation_layout() {
        let d1 = Domain::interval(-0.7, 0.7);
        let st = Stencil::default_for(1);
        let c = CollocationSet::uniform(&d1, &st, 201).unwrap();
        assert_eq!(c.interior.len(), 201);
        assert!((c.interior[0][0] - (-0.699)).abs() < 1e-15);
        let d2 = Domain::square(-1.0, 1.0);
        let c2 = CollocationSet::uniform(&d2, &Stencil::default_for(2), 41).unwrap();
        assert_eq!(c2.interior.len(), 41 * 41);
    }
}
