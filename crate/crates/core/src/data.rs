//! Manufactured solutions, noisy measurements and their replica expansion.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::{linspace, Pde, PdeKind};

/// SplitMix64 mix of `(seed, stream)`; gives independent seeds per purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact `(u, f)` at `point` for the sin³(6x) (1D) and sin(πx)sin(πy) (2D)
/// manufactured solutions; `f` is the operator applied to `u` with the
/// true reaction coefficient.
pub fn manufactured_solution(pde: &Pde, point: &[f64]) -> Result<(f64, f64)> {
    pde.domain().check(point)?;
    let k = pde.true_k();
    let (u, lap) = match pde.dim() {
        1 => {
            let (s, c) = (6.0 * point[0]).sin_cos();
            (s * s * s, 216.0 * s * c * c - 108.0 * s * s * s)
        }
        _ => {
            use std::f64::consts::PI;
            let u = (PI * point[0]).sin() * (PI * point[1]).sin();
            (u, -2.0 * PI * PI * u)
        }
    };
    let reaction = match pde.kind {
        PdeKind::Linear1D => 0.0,
        PdeKind::NonlinearTanh1D => k * u.tanh(),
        PdeKind::AllenCahn2D => u * (u * u - 1.0),
        PdeKind::QuadraticReaction2D => k * u * u,
    };
    Ok((u, pde.lambda * lap + reaction))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    U,
    F,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::U => "u",
            Quantity::F => "f",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub location: Vec<f64>,
    pub value: f64,
    pub quantity: Quantity,
}

/// Zero-mean Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_u: f64,
    pub sigma_f: f64,
}

impl NoiseSpec {
    pub fn new(sigma_u: f64, sigma_f: f64) -> Result<Self> {
        if !(sigma_u >= 0.0 && sigma_f >= 0.0 && sigma_u.is_finite() && sigma_f.is_finite()) {
            return Err(Error::Config(format!("noise std must be >= 0, got {sigma_u}, {sigma_f}")));
        }
        Ok(Self { sigma_u, sigma_f })
    }

    pub fn uniform(sigma: f64) -> Result<Self> {
        Self::new(sigma, sigma)
    }

    pub fn sigma(&self, q: Quantity) -> f64 {
        match q {
            Quantity::U => self.sigma_u,
            Quantity::F => self.sigma_f,
        }
    }
}

/// Where measurements are taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Endpoint-inclusive evenly spaced points on `[lo, hi]` (1D).
    EquallySpaced { count: usize, lo: f64, hi: f64 },
    /// Independent uniform locations over the whole domain.
    UniformRandom { count: usize },
    /// `count_per_edge` evenly spaced points on each edge of the square,
    /// walking counter-clockwise; each edge starts at its first corner and
    /// stops one spacing short of the next, so corners appear once.
    BoundaryEqual { count_per_edge: usize },
    /// Explicit locations.
    Points { points: Vec<Vec<f64>> },
}

impl Layout {
    pub fn count(&self) -> usize {
        match self {
            Layout::EquallySpaced { count, .. } | Layout::UniformRandom { count } => *count,
            Layout::BoundaryEqual { count_per_edge } => 4 * count_per_edge,
            Layout::Points { points } => points.len(),
        }
    }

    /// Resolve to concrete locations; `seed` only matters for random layouts.
    pub fn locations(&self, pde: &Pde, seed: u64) -> Result<Vec<Vec<f64>>> {
        if self.count() < 1 {
            return Err(Error::Config("measurement count must be >= 1".into()));
        }
        let domain = pde.domain();
        let pts = match self {
            Layout::EquallySpaced { count, lo, hi } => {
                if domain.dim != 1 {
                    return Err(Error::Config("equally spaced layout is one-dimensional".into()));
                }
                linspace(*lo, *hi, *count).into_iter().map(|x| vec![x]).collect()
            }
            Layout::UniformRandom { count } => {
                let mut rng = rng_from(seed);
                (0..*count)
                    .map(|_| {
                        (0..domain.dim)
                            .map(|_| rng.random_range(domain.lo..=domain.hi))
                            .collect()
                    })
                    .collect()
            }
            Layout::BoundaryEqual { count_per_edge } => {
                if domain.dim != 2 {
                    return Err(Error::Config("boundary layout is two-dimensional".into()));
                }
                let (lo, hi) = (domain.lo, domain.hi);
                let n = *count_per_edge;
                let step = (hi - lo) / n as f64;
                let mut pts = Vec::with_capacity(4 * n);
                for i in 0..n {
                    pts.push(vec![lo + step * i as f64, lo]);
                }
                for i in 0..n {
                    pts.push(vec![hi, lo + step * i as f64]);
                }
                for i in 0..n {
                    pts.push(vec![hi - step * i as f64, hi]);
                }
                for i in 0..n {
                    pts.push(vec![lo, hi - step * i as f64]);
                }
                pts
            }
            Layout::Points { points } => points.clone(),
        };
        for p in &pts {
            domain.check(p)?;
        }
        Ok(pts)
    }
}

/// Noisy measurements: exact value plus one Gaussian draw per location.
pub fn sample_measurements(
    pde: &Pde,
    quantity: Quantity,
    layout: &Layout,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Measurement>> {
    let locations = layout.locations(pde, derive_seed(seed, 1))?;
    let mut rng = rng_from(derive_seed(seed, 2));
    locations
        .into_iter()
        .map(|location| {
            let (u, f) = manufactured_solution(pde, &location)?;
            let exact = match quantity {
                Quantity::U => u,
                Quantity::F => f,
            };
            let eps: f64 = rng.sample(StandardNormal);
            Ok(Measurement {
                location,
                value: exact + sigma * eps,
                quantity,
            })
        })
        .collect()
}

/// Measurements of one quantity together with their `(n, M)` replica targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSet {
    pub measurements: Vec<Measurement>,
    pub targets: Array2<f64>,
}

impl ReplicaSet {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn replicas(&self) -> usize {
        self.targets.ncols()
    }
}

/// `target[i][j] = value_i + sigma * z_ij` with independent standard normals.
///
/// Draws are replica-major, so replica `j` gets the same targets for any `replicas > j`.
pub fn expand_to_replicas(measurements: &[Measurement], sigma: f64, replicas: usize, seed: u64) -> Result<ReplicaSet> {
    if replicas < 1 {
        return Err(Error::Config("number of replicas must be >= 1".into()));
    }
    let mut rng = rng_from(seed);
    let mut targets = Array2::zeros((measurements.len(), replicas));
    for mut col in targets.columns_mut() {
        for (t, m) in col.iter_mut().zip(measurements) {
            let eps: f64 = rng.sample(StandardNormal);
            *t = m.value + sigma * eps;
        }
    }
    Ok(ReplicaSet {
        measurements: measurements.to_vec(),
        targets,
    })
}

/// The full training data: u and f measurements expanded to `M` replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaDataset {
    pub dim: usize,
    pub noise: NoiseSpec,
    pub u: ReplicaSet,
    pub f: ReplicaSet,
}

impl ReplicaDataset {
    pub fn new(
        dim: usize,
        noise: NoiseSpec,
        u_meas: &[Measurement],
        f_meas: &[Measurement],
        replicas: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            dim,
            noise,
            u: expand_to_replicas(u_meas, noise.sigma_u, replicas, derive_seed(seed, 11))?,
            f: expand_to_replicas(f_meas, noise.sigma_f, replicas, derive_seed(seed, 12))?,
        })
    }

    pub fn replicas(&self) -> usize {
        self.u.replicas()
    }

    /// Delimited text export. Layout:
    ///
    /// ```text
    /// dim=1,replicas=3,sigma_u=0.1,sigma_f=0.1
    /// quantity,x,value
    /// u,-0.7,0.012
    /// ...
    /// targets
    /// quantity,index,r0,r1,r2
    /// u,0,0.02,-0.1,0.05
    /// ...
    /// ```
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.replicas();
        writeln!(
            w,
            "dim={},replicas={},sigma_u={},sigma_f={}",
            self.dim, m, self.noise.sigma_u, self.noise.sigma_f
        )?;
        let coords = if self.dim == 1 { "x" } else { "x,y" };
        writeln!(w, "quantity,{coords},value")?;
        for set in [&self.u, &self.f] {
            for meas in &set.measurements {
                write!(w, "{}", meas.quantity.as_str())?;
                for c in &meas.location {
                    write!(w, ",{c}")?;
                }
                writeln!(w, ",{}", meas.value)?;
            }
        }
        writeln!(w, "targets")?;
        write!(w, "quantity,index")?;
        for j in 0..m {
            write!(w, ",r{j}")?;
        }
        writeln!(w)?;
        for set in [&self.u, &self.f] {
            for (i, (meas, row)) in set.measurements.iter().zip(set.targets.outer_iter()).enumerate() {
                write!(w, "{},{i}", meas.quantity.as_str())?;
                for t in row {
                    write!(w, ",{t}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of dataset".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        let mut dim = 0;
        let mut m = 0;
        let (mut su, mut sf) = (f64::NAN, f64::NAN);
        for kv in header.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{kv}`")))?;
            match k {
                "dim" => dim = parse(v)?,
                "replicas" => m = parse(v)?,
                "sigma_u" => su = parse(v)?,
                "sigma_f" => sf = parse(v)?,
                _ => return Err(Error::Parse(format!("unknown header key `{k}`"))),
            }
        }
        if !(1..=2).contains(&dim) || m == 0 {
            return Err(Error::Parse(format!("bad dataset header `{header}`")));
        }
        let noise = NoiseSpec::new(su, sf)?;
        next()?; // column names
        let mut u_meas = Vec::new();
        let mut f_meas = Vec::new();
        loop {
            let line = next()?;
            if line == "targets" {
                break;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!("bad measurement row `{line}`")));
            }
            let location = fields[1..=dim].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
            let value = parse(fields[dim + 1])?;
            match fields[0] {
                "u" => u_meas.push(Measurement {
                    location,
                    value,
                    quantity: Quantity::U,
                }),
                "f" => f_meas.push(Measurement {
                    location,
                    value,
                    quantity: Quantity::F,
                }),
                q => return Err(Error::Parse(format!("unknown quantity `{q}`"))),
            }
        }
        next()?; // column names
        let mut u_t = Array2::zeros((u_meas.len(), m));
        let mut f_t = Array2::zeros((f_meas.len(), m));
        for _ in 0..u_meas.len() + f_meas.len() {
            let line = next()?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != m + 2 {
                return Err(Error::Parse(format!("bad target row with {} fields", fields.len())));
            }
            let i: usize = parse(fields[1])?;
            let dst = match fields[0] {
                "u" => &mut u_t,
                "f" => &mut f_t,
                q => return Err(Error::Parse(format!("unknown quantity `{q}`"))),
            };
            if i >= dst.nrows() {
                return Err(Error::Parse(format!("target index {i} out of range")));
            }
            for (j, s) in fields[2..].iter().enumerate() {
                dst[[i, j]] = parse(s)?;
            }
        }
        Ok(Self {
            dim,
            noise,
            u: ReplicaSet {
                measurements: u_meas,
                targets: u_t,
            },
            f: ReplicaSet {
                measurements: f_meas,
                targets: f_t,
            },
        })
    }
}

pub(crate) fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::KMode;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn mean_std(v: impl Iterator<Item = f64>) -> (f64, f64) {
        let v: Vec<f64> = v.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn manufactured_values_at_origin() {
        let (u, f) = manufactured_solution(&Pde::linear_1d(), &[0.0]).unwrap();
        assert_eq!((u, f), (0.0, 0.0));
        let (u, f) = manufactured_solution(&Pde::nonlinear_1d(KMode::Fixed(0.7)), &[0.0]).unwrap();
        assert_eq!((u, f), (0.0, 0.0));
    }

    #[test]
    fn allen_cahn_at_half() {
        let (u, f) = manufactured_solution(&Pde::allen_cahn_2d(), &[0.5, 0.5]).unwrap();
        assert!((u - 1.0).abs() < 1e-15);
        assert!((f - (-0.02 * PI * PI)).abs() < 1e-12, "{f}");
    }

    #[test]
    fn manufactured_rejects_outside() {
        assert!(manufactured_solution(&Pde::linear_1d(), &[0.8]).is_err());
        assert!(manufactured_solution(&Pde::allen_cahn_2d(), &[0.0, 1.5]).is_err());
    }

    #[test]
    fn manufactured_closure_with_analytic_derivatives() {
        // independent symbolic differentiation of sin^3(6x):
        // u' = 18 sin² cos, u'' = 216 sin cos² - 108 sin³
        let pde = Pde::nonlinear_1d(KMode::Fixed(0.7));
        for i in 0..=20 {
            let x = -0.7 + 0.07 * i as f64;
            let (u, f) = manufactured_solution(&pde, &[x]).unwrap();
            let s = (6.0 * x).sin();
            let c = (6.0 * x).cos();
            let uxx = 108.0 * s * (2.0 * c * c - s * s);
            let r = 0.01 * uxx + 0.7 * u.tanh() - f;
            assert!(r.abs() < 1e-12);
        }
        let pde = Pde::quadratic_2d(KMode::Trainable);
        let (x, y) = (0.3, -0.8);
        let (u, f) = manufactured_solution(&pde, &[x, y]).unwrap();
        let lap = -2.0 * PI * PI * (PI * x).sin() * (PI * y).sin();
        assert!((0.01 * lap + u * u - f).abs() < 1e-12);
    }

    #[test]
    fn equally_spaced_layout() {
        let layout = Layout::EquallySpaced {
            count: 16,
            lo: -0.7,
            hi: 0.7,
        };
        let pts = layout.locations(&Pde::linear_1d(), 0).unwrap();
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0][0], -0.7);
        assert_eq!(pts[15][0], 0.7);
        assert!((pts[1][0] - (-0.7 + 1.4 / 15.0)).abs() < 1e-15);
    }

    #[test]
    fn boundary_layout_covers_edges_once() {
        let pts = Layout::BoundaryEqual { count_per_edge: 25 }
            .locations(&Pde::allen_cahn_2d(), 0)
            .unwrap();
        assert_eq!(pts.len(), 100);
        for p in &pts {
            assert!(p.iter().any(|c| (c.abs() - 1.0).abs() < 1e-15));
        }
        let mut keys: Vec<_> = pts.iter().map(|p| ((p[0] * 1e6) as i64, (p[1] * 1e6) as i64)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn zero_count_is_error() {
        let layout = Layout::UniformRandom { count: 0 };
        assert!(sample_measurements(&Pde::allen_cahn_2d(), Quantity::F, &layout, 0.1, 1).is_err());
    }

    #[test]
    fn zero_noise_gives_exact_values() {
        let pde = Pde::linear_1d();
        let layout = Layout::EquallySpaced {
            count: 16,
            lo: -0.7,
            hi: 0.7,
        };
        for m in sample_measurements(&pde, Quantity::F, &layout, 0.0, 5).unwrap() {
            assert_eq!(m.value, manufactured_solution(&pde, &m.location).unwrap().1);
        }
    }

    #[test]
    fn measurement_noise_std() {
        let pde = Pde::linear_1d();
        let layout = Layout::Points {
            points: vec![vec![0.2]; 10_000],
        };
        let ms = sample_measurements(&pde, Quantity::U, &layout, 0.1, 9).unwrap();
        let exact = manufactured_solution(&pde, &[0.2]).unwrap().0;
        let (_, std) = mean_std(ms.iter().map(|m| m.value - exact));
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn measurements_reproducible() {
        let pde = Pde::allen_cahn_2d();
        let layout = Layout::UniformRandom { count: 20 };
        let a = sample_measurements(&pde, Quantity::F, &layout, 0.1, 3).unwrap();
        let b = sample_measurements(&pde, Quantity::F, &layout, 0.1, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replica_expansion() {
        let meas = vec![Measurement {
            location: vec![0.0],
            value: 0.3,
            quantity: Quantity::U,
        }];
        let one = expand_to_replicas(&meas, 0.0, 1, 1).unwrap();
        assert_eq!(one.targets[[0, 0]], 0.3);

        let many = expand_to_replicas(&meas, 0.1, 500, 2).unwrap();
        let (mean, std) = mean_std(many.targets.row(0).iter().copied());
        assert!((std - 0.1).abs() < 0.01, "{std}");
        assert!((mean - 0.3).abs() < 4.0 * 0.1 / (500f64).sqrt());

        let other = expand_to_replicas(&meas, 0.1, 500, 3).unwrap();
        assert_eq!(other.targets.dim(), many.targets.dim());
        assert_ne!(other.targets, many.targets);
        assert!(expand_to_replicas(&meas, 0.1, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn replicas_are_nested_across_m(n in 1usize..6, small in 1usize..20, extra in 0usize..30, seed in any::<u64>()) {
            let meas: Vec<Measurement> = (0..n)
                .map(|i| Measurement { location: vec![i as f64], value: i as f64, quantity: Quantity::F })
                .collect();
            let a = expand_to_replicas(&meas, 0.1, small, seed).unwrap();
            let b = expand_to_replicas(&meas, 0.1, small + extra, seed).unwrap();
            prop_assert_eq!(a.targets.view(), b.targets.slice(ndarray::s![.., ..small]));
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let pde = Pde::allen_cahn_2d();
        let u = sample_measurements(&pde, Quantity::U, &Layout::BoundaryEqual { count_per_edge: 2 }, 0.1, 1).unwrap();
        let f = sample_measurements(&pde, Quantity::F, &Layout::UniformRandom { count: 3 }, 0.1, 2).unwrap();
        let ds = ReplicaDataset::new(2, NoiseSpec::uniform(0.1).unwrap(), &u, &f, 4, 7).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = ReplicaDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(ReplicaDataset::read_csv(&buf[..buf.len() / 2]).is_err());
    }
}
