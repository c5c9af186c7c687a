//! Ensemble summaries: mean/std fields, 2σ coverage, k histograms, QQ pairs
//! and the convergence-in-M study.

use std::io::{BufRead, Write};

use ndarray::{s, Array2};

use crate::data::{derive_seed, parse, Measurement, NoiseSpec, ReplicaDataset};
use crate::error::{Error, Result};
use crate::nn::{LinearProbes, Mlp, ProbeTape};
use crate::pde::ReplicaField;
use crate::train::{train, PriorStats, TrainConfig};

const SUMMARY_CHUNK: usize = 2048;

/// Population mean and standard deviation (shifted by the first value, so a
/// constant sample gives exactly that value and zero spread).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let c = values.first().copied().unwrap_or(f64::NAN);
    let mean = c + values.iter().map(|v| v - c).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-point ensemble of `M` predictions with its mean and (population) std.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    pub points: Vec<Vec<f64>>,
    /// `(points, M)`.
    pub ensemble: Array2<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PosteriorField {
    pub fn from_ensemble(points: Vec<Vec<f64>>, ensemble: Array2<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("evaluation grid"));
        }
        if ensemble.nrows() != points.len() {
            return Err(Error::dim("ensemble rows", points.len(), ensemble.nrows()));
        }
        if ensemble.ncols() == 0 {
            return Err(Error::Empty("ensemble"));
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::dim("grid point", dim, p.len()));
        }
        let (mean, std) = ensemble
            .outer_iter()
            .map(|row| mean_std(row.as_slice().expect("standard layout")))
            .unzip();
        Ok(Self {
            points,
            ensemble,
            mean,
            std,
        })
    }

    /// Evaluate every replica of `net` at every grid point.
    pub fn summarize<N: ReplicaField + ?Sized>(net: &N, grid: &[Vec<f64>]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("evaluation grid"));
        }
        let m = net.replicas();
        let mut ens = Array2::zeros((grid.len(), m));
        for (mut row, p) in ens.outer_iter_mut().zip(grid) {
            let v = net.eval(p)?;
            row.assign(&ndarray::ArrayView1::from(&v[..]));
        }
        Self::from_ensemble(grid.to_vec(), ens)
    }

    /// Batched version of [`PosteriorField::summarize`] for a network.
    pub fn summarize_net(net: &Mlp, grid: &[Vec<f64>]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("evaluation grid"));
        }
        let mut ens = Array2::zeros((grid.len(), net.output_dim()));
        let mut tape = ProbeTape::default();
        for (c, chunk) in grid.chunks(SUMMARY_CHUNK).enumerate() {
            let mut probes = LinearProbes::new(net.input_dim());
            for p in chunk {
                if p.len() != net.input_dim() {
                    return Err(Error::dim("grid point", net.input_dim(), p.len()));
                }
                probes.add_value(p);
            }
            net.eval_probes_into(&probes, &mut tape)?;
            let start = c * SUMMARY_CHUNK;
            ens.slice_mut(s![start..start + chunk.len(), ..]).assign(&tape.outputs);
        }
        Self::from_ensemble(grid.to_vec(), ens)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn replicas(&self) -> usize {
        self.ensemble.ncols()
    }

    pub fn mean_of_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.len() as f64
    }

    pub fn max_std(&self) -> f64 {
        self.std.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Root-mean-square of `mean - exact` over the grid.
    pub fn rmse(&self, exact: &[f64]) -> Result<f64> {
        self.check_exact(exact)?;
        let s = self.mean.iter().zip(exact).map(|(m, e)| (m - e) * (m - e)).sum::<f64>();
        Ok((s / self.len() as f64).sqrt())
    }

    fn check_exact(&self, exact: &[f64]) -> Result<()> {
        if exact.len() != self.len() {
            return Err(Error::dim("exact values", self.len(), exact.len()));
        }
        Ok(())
    }

    fn coord_header(&self) -> &'static str {
        if self.dim() == 1 {
            "x"
        } else {
            "x,y"
        }
    }

    /// Summary rows `x[,y],exact,mean,std,covered`.
    pub fn write_csv<W: Write>(&self, mut w: W, exact: &[f64]) -> Result<()> {
        let cov = coverage(self, exact)?;
        writeln!(w, "{},exact,mean,std,covered", self.coord_header())?;
        for i in 0..self.len() {
            for c in &self.points[i] {
                write!(w, "{c},")?;
            }
            writeln!(
                w,
                "{},{},{},{}",
                exact[i],
                self.mean[i],
                self.std[i],
                u8::from(cov.covered[i])
            )?;
        }
        Ok(())
    }

    /// Raw ensemble rows `x[,y],r0,..,r{M-1}`.
    pub fn write_ensemble_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "{}", self.coord_header())?;
        for j in 0..self.replicas() {
            write!(w, ",r{j}")?;
        }
        writeln!(w)?;
        for (p, row) in self.points.iter().zip(self.ensemble.outer_iter()) {
            let mut first = true;
            for v in p.iter().chain(row.iter()) {
                if !first {
                    write!(w, ",")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_ensemble_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Empty("ensemble file"))??;
        let cols: Vec<&str> = header.split(',').collect();
        let dim = cols.iter().take_while(|c| !c.starts_with('r')).count();
        if !(1..=2).contains(&dim) || cols.len() <= dim {
            return Err(Error::Parse(format!("bad ensemble header `{header}`")));
        }
        let m = cols.len() - dim;
        let mut points = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = line.split(',').map(parse).collect::<Result<Vec<f64>>>()?;
            if fields.len() != dim + m {
                return Err(Error::Parse(format!("ensemble row has {} fields, expected {}", fields.len(), dim + m)));
            }
            points.push(fields[..dim].to_vec());
            values.extend_from_slice(&fields[dim..]);
        }
        let n = points.len();
        let ens = Array2::from_shape_vec((n, m), values).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_ensemble(points, ens)
    }
}

/// Which grid points have the exact value inside mean ± 2·std.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    pub covered: Vec<bool>,
    pub fraction: f64,
}

pub fn coverage(field: &PosteriorField, exact: &[f64]) -> Result<CoverageMap> {
    field.check_exact(exact)?;
    let covered: Vec<bool> = exact
        .iter()
        .zip(field.mean.iter().zip(&field.std))
        .map(|(e, (m, s))| (e - m).abs() <= 2.0 * s)
        .collect();
    let fraction = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
    Ok(CoverageMap { covered, fraction })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` plus summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct KHistogram {
    pub bins: Vec<HistogramBin>,
    pub mean: f64,
    pub std: f64,
}

impl KHistogram {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_left,bin_right,count")?;
        for b in &self.bins {
            writeln!(w, "{},{},{}", b.left, b.right, b.count)?;
        }
        Ok(())
    }
}

pub fn k_histogram(k: &[f64], bin_count: usize) -> Result<KHistogram> {
    if k.is_empty() {
        return Err(Error::Empty("k values"));
    }
    if bin_count == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("k values must be finite".into()));
    }
    let (mean, std) = mean_std(k);
    let lo = k.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bin_count as f64;
    let mut bins: Vec<HistogramBin> = (0..bin_count)
        .map(|i| HistogramBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bin_count { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in k {
        let idx = if width > 0.0 {
            (((v - lo) / width) as usize).min(bin_count - 1)
        } else {
            0
        };
        bins[idx].count += 1;
    }
    Ok(KHistogram { bins, mean, std })
}

/// Nearest-rank empirical quantile of an ascending slice, `p` in (0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// The fractions 0.1, 0.2, ..., 1.0.
pub fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QqPair {
    pub fraction: f64,
    pub q_a: f64,
    pub q_b: f64,
}

pub fn qq_points(a: &[f64], b: &[f64], fractions: &[f64]) -> Result<Vec<QqPair>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    if let Some(p) = fractions.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Config(format!("quantile fraction {p} outside (0, 1]")));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sort(a), sort(b));
    Ok(fractions
        .iter()
        .map(|&p| QqPair {
            fraction: p,
            q_a: quantile_sorted(&sa, p),
            q_b: quantile_sorted(&sb, p),
        })
        .collect())
}

/// QQ rows for several locations: `location,x,fraction,q_a,q_b`.
pub fn write_qq_csv<W: Write>(mut w: W, rows: &[(Vec<f64>, Vec<QqPair>)]) -> Result<()> {
    let dim = rows.first().map(|r| r.0.len()).unwrap_or(1);
    writeln!(w, "location,{},fraction,q_a,q_b", if dim == 1 { "x" } else { "x,y" })?;
    for (i, (p, pairs)) in rows.iter().enumerate() {
        for q in pairs {
            write!(w, "{i}")?;
            for c in p {
                write!(w, ",{c}")?;
            }
            writeln!(w, ",{},{},{}", q.fraction, q.q_a, q.q_b)?;
        }
    }
    Ok(())
}

/// One line of the convergence-in-M table.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub replicas: usize,
    pub field: PosteriorField,
    /// Max pointwise change of the mean / std field against the previous row.
    pub delta_mean: Option<f64>,
    pub delta_std: Option<f64>,
}

/// Train once per entry of `m_list` on the same measurements (fresh replica
/// noise per `M`, seeded from `replica_seed` and `M`) and compare the u
/// posterior fields of consecutive entries on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_in_m(
    config: &TrainConfig,
    noise: NoiseSpec,
    u_meas: &[Measurement],
    f_meas: &[Measurement],
    m_list: &[usize],
    replica_seed: u64,
    grid: &[Vec<f64>],
    prior: Option<&PriorStats>,
) -> Result<Vec<ConvergenceRow>> {
    if m_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(format!("M list must be nondecreasing, got {m_list:?}")));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let cfg = TrainConfig {
            replicas: m,
            ..config.clone()
        };
        let data = ReplicaDataset::new(
            config.pde.dim(),
            noise,
            u_meas,
            f_meas,
            m,
            derive_seed(replica_seed, m as u64),
        )?;
        let out = train(&cfg, &data, prior)?;
        let field = PosteriorField::summarize_net(&out.state.u_net, grid)?;
        let (delta_mean, delta_std) = match rows.last() {
            Some(prev) => (
                Some(max_abs_diff(&prev.field.mean, &field.mean)),
                Some(max_abs_diff(&prev.field.std, &field.std)),
            ),
            None => (None, None),
        };
        rows.push(ConvergenceRow {
            replicas: m,
            field,
            delta_mean,
            delta_std,
        });
    }
    Ok(rows)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_measurements, Layout, Quantity};
    use crate::nn::Mlp;
    use crate::pde::{linspace, FnField, Pde, Stencil};
    use crate::train::LossWeights;
    use proptest::prelude::*;

    fn field(rows: Vec<Vec<f64>>) -> PosteriorField {
        let n = rows.len();
        let m = rows[0].len();
        let pts = (0..n).map(|i| vec![i as f64]).collect();
        PosteriorField::from_ensemble(pts, Array2::from_shape_vec((n, m), rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn batched_summary_matches_pointwise() {
        let mut net = Mlp::xavier_normal(&[2, 5, 4], 3).unwrap();
        net.normalize_inputs(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let grid: Vec<Vec<f64>> = (0..2100).map(|i| vec![(i % 37) as f64 / 40.0, -(i as f64) / 2100.0]).collect();
        let a = PosteriorField::summarize(&net, &grid).unwrap();
        let b = PosteriorField::summarize_net(&net, &grid).unwrap();
        assert!(max_abs_diff(a.ensemble.as_slice().unwrap(), b.ensemble.as_slice().unwrap()) < 1e-13);
    }

    #[test]
    fn hand_computed_mean_and_std() {
        let f = field(vec![vec![1.0, 2.0, 3.0]]);
        assert_eq!(f.mean[0], 2.0);
        assert!((f.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_replicas_have_zero_std() {
        let net = FnField::new(1, 4, |p: &[f64]| vec![p[0].sin(); 4]);
        let f = PosteriorField::summarize(&net, &[vec![0.1], vec![0.5]]).unwrap();
        assert!(f.std.iter().all(|&s| s == 0.0));
        let mlp = Mlp::xavier_normal(&[1, 3, 1], 4).unwrap();
        let f = PosteriorField::summarize(&mlp, &[vec![0.2]]).unwrap();
        assert_eq!(f.std, vec![0.0]);
    }

    #[test]
    fn empty_grid_is_error() {
        let net = FnField::new(1, 2, |_: &[f64]| vec![0.0; 2]);
        assert!(PosteriorField::summarize(&net, &[]).is_err());
    }

    #[test]
    fn coverage_of_exact_mean_is_full() {
        let f = field(vec![vec![1.0, 1.0], vec![2.0, 2.0]]);
        let c = coverage(&f, &[1.0, 2.0]).unwrap();
        assert_eq!(c.fraction, 1.0);
    }

    #[test]
    fn zero_std_counts_only_exact_matches() {
        let f = field(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        let c = coverage(&f, &[1.0, 2.5, 3.0]).unwrap();
        assert_eq!(c.covered, vec![true, false, true]);
        assert!((c.fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(coverage(&f, &[1.0]).is_err());
    }

    #[test]
    fn constant_k_single_bin() {
        let h = k_histogram(&[0.7; 10], 5).unwrap();
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h.std, 0.0);
        assert_eq!(h.mean, 0.7);
        assert!(k_histogram(&[], 3).is_err());
        assert!(k_histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn histogram_bins_span_range() {
        let k = [0.0, 0.1, 0.5, 0.9, 1.0];
        let h = k_histogram(&k, 4).unwrap();
        assert_eq!(h.bins[0].left, 0.0);
        assert_eq!(h.bins[3].right, 1.0);
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h.bins[3].count, 2);
    }

    #[test]
    fn nearest_rank_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.0);
        assert_eq!(quantile_sorted(&s, 0.26), 2.0);
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_eq!(default_fractions().len(), 10);
    }

    #[test]
    fn qq_rejects_bad_input() {
        assert!(qq_points(&[], &[1.0], &[0.5]).is_err());
        assert!(qq_points(&[1.0], &[1.0], &[0.0]).is_err());
        assert!(qq_points(&[1.0], &[1.0], &[1.5]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let f = field(vec![vec![1.0, 2.5, -3.0], vec![0.125, 2.0, 7.0]]);
        let mut buf = Vec::new();
        f.write_ensemble_csv(&mut buf).unwrap();
        let back = PosteriorField::read_ensemble_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);

        let mut buf = Vec::new();
        f.write_csv(&mut buf, &[0.0, 3.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,exact,mean,std,covered");
        assert_eq!(lines.len(), 3);
        let cols: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(&cols[..2], &[0.0, 0.0]);
        assert!((cols[2] - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(cols[4], 1.0);
    }

    #[test]
    fn convergence_single_entry_and_repeat() {
        let pde = Pde::linear_1d();
        let u = sample_measurements(&pde, Quantity::U, &Layout::EquallySpaced { count: 2, lo: -0.7, hi: 0.7 }, 0.1, 1)
            .unwrap();
        let f = sample_measurements(&pde, Quantity::F, &Layout::EquallySpaced { count: 5, lo: -0.7, hi: 0.7 }, 0.1, 2)
            .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e-3,
            replicas: 1,
            u_hidden: vec![4],
            f_hidden: vec![4],
            pde,
            stencil: Stencil::default_for(1),
            collocation_per_axis: 9,
            weights: LossWeights::default(),
            input_scale: 1.0,
            seed: 3,
        };
        let grid: Vec<Vec<f64>> = linspace(-0.7, 0.7, 11).into_iter().map(|x| vec![x]).collect();
        let noise = NoiseSpec::uniform(0.1).unwrap();
        let one = convergence_in_m(&cfg, noise, &u, &f, &[3], 9, &grid, None).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].delta_std.is_none());
        let twice = convergence_in_m(&cfg, noise, &u, &f, &[3, 3], 9, &grid, None).unwrap();
        assert_eq!(twice[1].delta_mean, Some(0.0));
        assert_eq!(twice[1].delta_std, Some(0.0));
        assert!(convergence_in_m(&cfg, noise, &u, &f, &[5, 3], 9, &grid, None).is_err());
    }

    proptest! {
        #[test]
        fn mean_std_recompute_exactly(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6)) {
            let f = field(rows.clone());
            for (i, r) in rows.iter().enumerate() {
                let (m, s) = mean_std(r);
                prop_assert_eq!(f.mean[i], m);
                prop_assert_eq!(f.std[i], s);
                prop_assert!(s >= 0.0);
            }
        }

        #[test]
        fn quantiles_monotone(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let fr = default_fractions();
            let q = qq_points(&v, &v, &fr).unwrap();
            for w in q.windows(2) {
                prop_assert!(w[0].q_a <= w[1].q_a);
            }
            for p in &q {
                prop_assert_eq!(p.q_a, p.q_b);
            }
        }

        #[test]
        fn qq_shift_equivariance(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
            for p in qq_points(&v, &shifted, &default_fractions()).unwrap() {
                prop_assert_eq!(p.q_b, p.q_a + 1.0);
            }
        }

        #[test]
        fn coverage_invariant_under_rescaling(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..8),
            scale in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0]),
        ) {
            // exact = 0 keeps mean - exact free of rounding under scaling
            let f = field(rows);
            let exact = vec![0.0; f.len()];
            let base = coverage(&f, &exact).unwrap();
            let mut g = f.clone();
            for i in 0..g.len() {
                g.std[i] *= scale;
                g.mean[i] *= scale;
            }
            let scaled = coverage(&g, &exact).unwrap();
            prop_assert_eq!(base.covered, scaled.covered);
        }
    }
}
