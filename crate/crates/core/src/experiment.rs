//! Named experiments: configuration, data generation, training or FEM solves,
//! and the files each run leaves in its output directory.
//!
//! Every run writes `manifest.json` last (via a temporary file and a rename).
//! A run that fails after the output directory exists still writes a manifest,
//! with `status = "failed"` and the error text as diagnostic.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, manufactured_solution, sample_measurements, Layout, Measurement, NoiseSpec, Quantity, ReplicaDataset};
use crate::error::{Error, Result};
use crate::fem::{fem_replica_ensemble, Mesh1D};
use crate::pde::{KMode, Pde, Stencil};
use crate::posterior::{coverage, default_fractions, k_histogram, mean_std, qq_points, write_qq_csv, PosteriorField};
use crate::train::{train, LossWeights, PriorStats, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "linear1d_forward")]
    Linear1dForward,
    #[serde(rename = "nonlinear1d_forward")]
    Nonlinear1dForward,
    #[serde(rename = "allen_cahn_2d")]
    AllenCahn2d,
    #[serde(rename = "inverse1d")]
    Inverse1d,
    #[serde(rename = "inverse2d")]
    Inverse2d,
    #[serde(rename = "fem_compare")]
    FemCompare,
    #[serde(rename = "prior_augmented")]
    PriorAugmented,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::Linear1dForward,
        ExperimentId::Nonlinear1dForward,
        ExperimentId::AllenCahn2d,
        ExperimentId::Inverse1d,
        ExperimentId::Inverse2d,
        ExperimentId::FemCompare,
        ExperimentId::PriorAugmented,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::Linear1dForward => "linear1d_forward",
            ExperimentId::Nonlinear1dForward => "nonlinear1d_forward",
            ExperimentId::AllenCahn2d => "allen_cahn_2d",
            ExperimentId::Inverse1d => "inverse1d",
            ExperimentId::Inverse2d => "inverse2d",
            ExperimentId::FemCompare => "fem_compare",
            ExperimentId::PriorAugmented => "prior_augmented",
        }
    }

    pub fn pde(&self) -> Pde {
        match self {
            ExperimentId::Linear1dForward | ExperimentId::FemCompare | ExperimentId::PriorAugmented => Pde::linear_1d(),
            ExperimentId::Nonlinear1dForward => Pde::nonlinear_1d(KMode::Fixed(0.7)),
            ExperimentId::Inverse1d => Pde::nonlinear_1d(KMode::Trainable),
            ExperimentId::AllenCahn2d => Pde::allen_cahn_2d(),
            ExperimentId::Inverse2d => Pde::quadratic_2d(KMode::Trainable),
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|e| e.as_str()).collect();
                Error::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Measurement noise level: `case1` is σ = 0.01, `case2` is σ = 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCase {
    Case1,
    Case2,
}

impl NoiseCase {
    pub fn sigma(&self) -> f64 {
        match self {
            NoiseCase::Case1 => 0.01,
            NoiseCase::Case2 => 0.1,
        }
    }
}

impl FromStr for NoiseCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" => Ok(NoiseCase::Case1),
            "case2" => Ok(NoiseCase::Case2),
            _ => Err(Error::Config(format!("unknown noise case `{s}` (expected case1 or case2)"))),
        }
    }
}

/// User-facing settings; everything is optional. Read from a TOML document
/// and/or command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentId>,
    pub noise: Option<NoiseCase>,
    /// Network initialisation (and k initialisation).
    pub seed: Option<u64>,
    /// Measurement locations, measurement noise and replica noise. Defaults to `seed`.
    pub data_seed: Option<u64>,
    pub outputs: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub u_hidden: Option<Vec<usize>>,
    pub f_hidden: Option<Vec<usize>>,
    pub collocation_per_axis: Option<usize>,
    pub stencil_h: Option<f64>,
    pub weights: Option<LossWeights>,
    /// Half width of the cube the domain is mapped onto before the first layer.
    pub input_scale: Option<f64>,
    /// Evaluation grid points per axis.
    pub grid_points: Option<usize>,
    /// FEM ensemble size (fem_compare); one member per replica.
    pub ensemble: Option<usize>,
    pub fem_nodes: Option<usize>,
    pub histogram_bins: Option<usize>,
    pub prior_file: Option<PathBuf>,
    pub paper_scale: Option<bool>,
    pub deterministic: Option<bool>,
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        ExperimentConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn read_toml(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Values set in `top` win.
    pub fn overlay(self, top: ExperimentConfig) -> Self {
        overlay!(
            self,
            top,
            experiment,
            noise,
            seed,
            data_seed,
            outputs,
            epochs,
            learning_rate,
            u_hidden,
            f_hidden,
            collocation_per_axis,
            stencil_h,
            weights,
            input_scale,
            grid_points,
            ensemble,
            fem_nodes,
            histogram_bins,
            prior_file,
            paper_scale,
            deterministic,
            out
        )
    }

    /// Fill in every default for the chosen experiment and validate.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let experiment = self
            .experiment
            .ok_or_else(|| Error::Config("no experiment given".into()))?;
        let pde = experiment.pde();
        let dim = pde.dim();
        let paper_scale = self.paper_scale.unwrap_or(false);
        let noise = self.noise.unwrap_or(match experiment {
            ExperimentId::FemCompare | ExperimentId::PriorAugmented => NoiseCase::Case2,
            _ => NoiseCase::Case1,
        });
        let seed = self.seed.unwrap_or(0);
        let data_seed = self.data_seed.unwrap_or(seed);

        let (hidden, replicas, epochs, colloc) = match (dim, paper_scale) {
            (1, _) => (vec![20, 40], 500, 10_000, 201),
            (_, false) => (vec![50, 50], 200, 5_000, 21),
            (_, true) => (vec![200, 200, 200], 2_000, 50_000, 41),
        };
        let replicas = match (experiment, self.outputs, self.ensemble) {
            (ExperimentId::FemCompare, Some(m), Some(e)) if m != e => {
                return Err(Error::Config(format!(
                    "fem_compare uses one FEM solve per replica; outputs ({m}) and ensemble ({e}) differ"
                )))
            }
            (ExperimentId::FemCompare, m, e) => m.or(e).unwrap_or(replicas),
            (_, _, Some(_)) => return Err(Error::Config(format!("--ensemble only applies to fem_compare, not {experiment}"))),
            (_, m, _) => m.unwrap_or(replicas),
        };
        let mut weights = LossWeights::default();
        if experiment == ExperimentId::PriorAugmented {
            weights.prior_mean = replicas as f64;
            weights.prior_std = replicas as f64;
        }
        let train = TrainConfig {
            epochs: self.epochs.unwrap_or(epochs),
            learning_rate: self.learning_rate.unwrap_or(1e-3),
            replicas,
            u_hidden: self.u_hidden.clone().unwrap_or_else(|| hidden.clone()),
            f_hidden: self.f_hidden.clone().unwrap_or(hidden),
            pde,
            stencil: match self.stencil_h {
                Some(h) => Stencil::new(h, dim)?,
                None => Stencil::default_for(dim),
            },
            collocation_per_axis: self.collocation_per_axis.unwrap_or(colloc),
            weights: self.weights.unwrap_or(weights),
            input_scale: self.input_scale.unwrap_or(default_input_scale(experiment)),
            seed,
        };
        train.validate()?;

        let domain = pde.domain();
        let ends = Layout::EquallySpaced {
            count: 2,
            lo: domain.lo,
            hi: domain.hi,
        };
        let spaced = |count| Layout::EquallySpaced {
            count,
            lo: domain.lo,
            hi: domain.hi,
        };
        let (u_measurements, f_measurements) = match experiment {
            ExperimentId::Linear1dForward | ExperimentId::FemCompare => (vec![ends], vec![spaced(16)]),
            ExperimentId::Nonlinear1dForward => (vec![ends], vec![spaced(32)]),
            ExperimentId::PriorAugmented => (vec![ends], vec![spaced(5)]),
            ExperimentId::Inverse1d => (vec![spaced(8)], vec![spaced(32)]),
            ExperimentId::AllenCahn2d => (
                vec![Layout::BoundaryEqual { count_per_edge: 25 }],
                vec![Layout::UniformRandom { count: 500 }],
            ),
            ExperimentId::Inverse2d => (
                vec![
                    Layout::UniformRandom { count: 100 },
                    Layout::BoundaryEqual { count_per_edge: 25 },
                ],
                vec![Layout::UniformRandom { count: 100 }],
            ),
        };

        let grid_points = self.grid_points.unwrap_or(if dim == 1 { 201 } else { 101 });
        if grid_points < 2 {
            return Err(Error::Config("grid_points must be >= 2".into()));
        }
        let uses_fem = matches!(experiment, ExperimentId::FemCompare);
        let fem_nodes = uses_fem.then(|| self.fem_nodes.unwrap_or(141));
        if fem_nodes.is_some_and(|n| n < 2) {
            return Err(Error::Config("fem_nodes must be >= 2".into()));
        }
        let histogram_bins = self.histogram_bins.unwrap_or(30);
        if histogram_bins < 1 {
            return Err(Error::Config("histogram_bins must be >= 1".into()));
        }
        let prior_file = match experiment {
            ExperimentId::PriorAugmented => Some(
                self.prior_file
                    .clone()
                    .ok_or_else(|| Error::Config("prior_augmented needs a prior statistics file (--prior)".into()))?,
            ),
            _ => None,
        };
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{experiment}")));
        Ok(ResolvedConfig {
            experiment,
            noise,
            sigma: noise.sigma(),
            seed,
            data_seed,
            train,
            u_measurements,
            f_measurements,
            grid_points,
            fem_nodes,
            histogram_bins,
            qq_locations: if uses_fem { qq_locations() } else { Vec::new() },
            prior_file,
            paper_scale,
            deterministic: self.deterministic.unwrap_or(false),
            out,
        })
    }
}

fn default_input_scale(experiment: ExperimentId) -> f64 {
    match experiment {
        ExperimentId::Inverse1d => 5.0,
        _ => 1.0,
    }
}

/// Nine interior locations of the 1D domain used for QQ pairs and prior statistics.
pub fn qq_locations() -> Vec<f64> {
    (1..=9).map(|i| -0.7 + 0.14 * i as f64).collect()
}

/// A configuration with every default materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub experiment: ExperimentId,
    pub noise: NoiseCase,
    pub sigma: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub u_measurements: Vec<Layout>,
    pub f_measurements: Vec<Layout>,
    pub grid_points: usize,
    pub fem_nodes: Option<usize>,
    pub histogram_bins: usize,
    pub qq_locations: Vec<f64>,
    pub prior_file: Option<PathBuf>,
    pub paper_scale: bool,
    /// Runs are always reproducible; the flag is recorded for the manifest.
    pub deterministic: bool,
    pub out: PathBuf,
}

impl ResolvedConfig {
    pub fn pde(&self) -> &Pde {
        &self.train.pde
    }

    pub fn evaluation_grid(&self) -> Vec<Vec<f64>> {
        self.pde().domain().grid(self.grid_points)
    }

    /// Noisy u and f measurements. Layout `i` of quantity u uses stream
    /// `100 + i` of the data seed, f uses `200 + i`.
    pub fn measurements(&self) -> Result<(Vec<Measurement>, Vec<Measurement>)> {
        let gen = |q: Quantity, layouts: &[Layout], base: u64| -> Result<Vec<Measurement>> {
            let mut all = Vec::new();
            for (i, l) in layouts.iter().enumerate() {
                all.extend(sample_measurements(
                    self.pde(),
                    q,
                    l,
                    self.sigma,
                    derive_seed(self.data_seed, base + i as u64),
                )?);
            }
            Ok(all)
        };
        Ok((
            gen(Quantity::U, &self.u_measurements, 100)?,
            gen(Quantity::F, &self.f_measurements, 200)?,
        ))
    }

    /// Measurements expanded to replica targets (stream 300 of the data seed).
    pub fn dataset(&self) -> Result<ReplicaDataset> {
        let (u, f) = self.measurements()?;
        ReplicaDataset::new(
            self.pde().dim(),
            NoiseSpec::uniform(self.sigma)?,
            &u,
            &f,
            self.train.replicas,
            derive_seed(self.data_seed, 300),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub diagnostic: Option<String>,
    pub config: ResolvedConfig,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join(MANIFEST))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse(format!("manifest: {e}")))
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parse(format!("manifest has no metric `{name}`")))
    }
}

pub const MANIFEST: &str = "manifest.json";

struct Run<'a> {
    cfg: &'a ResolvedConfig,
    files: Vec<String>,
    metrics: BTreeMap<String, f64>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.cfg.out.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    /// Posterior summary CSV plus coverage, spread and error metrics.
    fn field(&mut self, prefix: &str, field: &PosteriorField, exact: &[f64]) -> Result<()> {
        self.write(&format!("{prefix}_posterior.csv"), |w| field.write_csv(w, exact))?;
        self.metric(format!("{prefix}_coverage"), coverage(field, exact)?.fraction);
        self.metric(format!("{prefix}_mean_std"), field.mean_of_std());
        self.metric(format!("{prefix}_max_std"), field.max_std());
        self.metric(format!("{prefix}_rmse"), field.rmse(exact)?);
        Ok(())
    }

    fn training(&mut self, suffix: &str, outcome: &TrainOutcome) -> Result<()> {
        self.write(&format!("loss{suffix}.csv"), |w| outcome.write_loss_trace(w))?;
        self.write(&format!("checkpoint{suffix}.bin"), |w| outcome.state.write_checkpoint(w))?;
        if let Some(last) = outcome.history.last() {
            self.metric(format!("final_loss{suffix}"), last.total);
        }
        Ok(())
    }

    /// Evaluate both networks on the grid and record their fields.
    fn posteriors(&mut self, suffix: &str, outcome: &TrainOutcome, ensembles: bool) -> Result<PosteriorField> {
        let grid = self.cfg.evaluation_grid();
        let (eu, ef) = exact_on(self.cfg.pde(), &grid)?;
        let u = PosteriorField::summarize_net(&outcome.state.u_net, &grid)?;
        let f = PosteriorField::summarize_net(&outcome.state.f_net, &grid)?;
        self.field(&format!("u{suffix}"), &u, &eu)?;
        self.field(&format!("f{suffix}"), &f, &ef)?;
        if ensembles {
            self.write(&format!("u{suffix}_ensemble.csv"), |w| u.write_ensemble_csv(w))?;
            self.write(&format!("f{suffix}_ensemble.csv"), |w| f.write_ensemble_csv(w))?;
        }
        Ok(u)
    }
}

fn exact_on(pde: &Pde, grid: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs = grid
        .iter()
        .map(|p| manufactured_solution(pde, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Run one experiment and write its artifacts under `cfg.out`.
pub fn run(cfg: &ResolvedConfig) -> Result<RunManifest> {
    let start = Instant::now();
    fs::create_dir_all(&cfg.out)?;
    let mut run = Run {
        cfg,
        files: Vec::new(),
        metrics: BTreeMap::new(),
    };
    let result = match cfg.experiment {
        ExperimentId::FemCompare => fem_compare(&mut run),
        ExperimentId::PriorAugmented => prior_augmented(&mut run),
        _ => forward(&mut run),
    };
    let manifest = RunManifest {
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        diagnostic: result.as_ref().err().map(|e| e.to_string()),
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        metrics: run.metrics,
        files: run.files,
    };
    write_manifest(&cfg.out, &manifest)?;
    result.map(|_| manifest)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    let mut w = BufWriter::new(File::create(&tmp)?);
    serde_json::to_writer_pretty(&mut w, manifest).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    writeln!(w)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}

fn forward(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let data = cfg.dataset()?;
    run.write("dataset.csv", |w| data.write_csv(w))?;
    let outcome = train(&cfg.train, &data, None)?;
    run.training("", &outcome)?;
    run.posteriors("", &outcome, cfg.pde().dim() == 1)?;
    if let Some(k) = &outcome.state.k {
        let hist = k_histogram(k, cfg.histogram_bins)?;
        run.write("k_values.csv", |w| {
            writeln!(w, "replica,k")?;
            for (j, v) in k.iter().enumerate() {
                writeln!(w, "{j},{v}")?;
            }
            Ok(())
        })?;
        run.write("k_histogram.csv", |w| hist.write_csv(w))?;
        run.metric("k_mean", hist.mean);
        run.metric("k_std", hist.std);
    }
    Ok(())
}

fn fem_compare(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let data = cfg.dataset()?;
    run.write("dataset.csv", |w| data.write_csv(w))?;
    let outcome = train(&cfg.train, &data, None)?;
    run.training("", &outcome)?;
    run.posteriors("", &outcome, true)?;

    let domain = cfg.pde().domain();
    let mesh = Mesh1D::uniform(domain.lo, domain.hi, cfg.fem_nodes.unwrap_or(141))?;
    let fem = fem_replica_ensemble(cfg.pde(), &data, &mesh)?;
    let nodes = fem.points.clone();
    let (exact_nodes, _) = exact_on(cfg.pde(), &nodes)?;
    let pinn = PosteriorField::summarize_net(&outcome.state.u_net, &nodes)?;
    run.field("fem_u", &fem, &exact_nodes)?;
    run.write("fem_u_ensemble.csv", |w| fem.write_ensemble_csv(w))?;
    run.field("u_fem_nodes", &pinn, &exact_nodes)?;
    let max_std = fem.max_std().max(pinn.max_std());
    run.metric("max_abs_mean_diff", crate::posterior::max_abs_diff(&pinn.mean, &fem.mean));
    run.metric("max_std", max_std);

    let locs: Vec<Vec<f64>> = cfg.qq_locations.iter().map(|&x| vec![x]).collect();
    let pinn_at = PosteriorField::summarize_net(&outcome.state.u_net, &locs)?;
    let m = fem.replicas();
    let fractions = default_fractions();
    let mut rows = Vec::with_capacity(locs.len());
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    let mut qq_max = 0.0f64;
    for (i, loc) in locs.iter().enumerate() {
        let fem_at = (0..m)
            .map(|j| {
                let col: Vec<f64> = fem.ensemble.column(j).to_vec();
                mesh.interpolate(&col, loc[0])
            })
            .collect::<Result<Vec<_>>>()?;
        let pinn_row = pinn_at.ensemble.row(i).to_vec();
        let pairs = qq_points(&pinn_row, &fem_at, &fractions)?;
        qq_max = pairs.iter().fold(qq_max, |a, p| a.max((p.q_a - p.q_b).abs()));
        let (mu, sd) = mean_std(&fem_at);
        means.push(mu);
        stds.push(sd);
        rows.push((loc.clone(), pairs));
    }
    run.write("qq.csv", |w| write_qq_csv(w, &rows))?;
    run.metric("qq_max_abs_diff", qq_max);
    let prior = PriorStats::new(locs, means, Some(stds))?;
    run.write("prior_stats.csv", |w| prior.write_csv(w))?;
    Ok(())
}

/// Variant name and which prior terms it uses.
pub const PRIOR_VARIANTS: [(&str, bool, bool); 3] = [
    ("measurements", false, false),
    ("means", true, false),
    ("means_stds", true, true),
];

fn prior_augmented(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let path = cfg.prior_file.as_ref().ok_or_else(|| Error::Config("missing prior file".into()))?;
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open prior file {}: {e}", path.display())))?;
    let prior = PriorStats::read_csv(BufReader::new(file))?;
    if prior.locations[0].len() != cfg.pde().dim() {
        return Err(Error::dim("prior location", cfg.pde().dim(), prior.locations[0].len()));
    }
    if prior.stds.is_none() {
        return Err(Error::Config("prior file has no std column; the means_stds variant needs it".into()));
    }
    for p in &prior.locations {
        cfg.pde().domain().check(p)?;
    }
    let data = cfg.dataset()?;
    run.write("dataset.csv", |w| data.write_csv(w))?;
    let means_only = prior.means_only();
    for (name, use_means, use_stds) in PRIOR_VARIANTS {
        let p = match (use_means, use_stds) {
            (false, _) => None,
            (true, false) => Some(&means_only),
            (true, true) => Some(&prior),
        };
        let outcome = train(&cfg.train, &data, p)?;
        let suffix = format!("_{name}");
        run.training(&suffix, &outcome)?;
        run.posteriors(&suffix, &outcome, false)?;
    }
    Ok(())
}

/// Locations shared by two fields (coordinates equal within `1e-9`), as index pairs.
pub fn common_points(a: &PosteriorField, b: &PosteriorField) -> Vec<(usize, usize)> {
    let close = |p: &[f64], q: &[f64]| p.len() == q.len() && p.iter().zip(q).all(|(x, y)| (x - y).abs() <= 1e-9);
    a.points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| b.points.iter().position(|q| close(p, q)).map(|j| (i, j)))
        .collect()
}

/// QQ rows for every location shared by two ensemble files, optionally
/// restricted to `at` (1D coordinates).
pub fn qq_from_ensembles(a: &PosteriorField, b: &PosteriorField, at: &[f64]) -> Result<Vec<(Vec<f64>, Vec<crate::posterior::QqPair>)>> {
    let fractions = default_fractions();
    let mut rows = Vec::new();
    for (i, j) in common_points(a, b) {
        let p = &a.points[i];
        if !at.is_empty() && !at.iter().any(|x| p.len() == 1 && (p[0] - x).abs() <= 1e-9) {
            continue;
        }
        let pairs = qq_points(&a.ensemble.row(i).to_vec(), &b.ensemble.row(j).to_vec(), &fractions)?;
        rows.push((p.clone(), pairs));
    }
    if rows.is_empty() {
        return Err(Error::Config("the two ensembles share no requested locations".into()));
    }
    Ok(rows)
}

/// Exact means of u at 1D locations with one shared std.
pub fn prior_from_exact(pde: &Pde, xs: &[f64], std: f64) -> Result<PriorStats> {
    let locs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let means = locs
        .iter()
        .map(|p| manufactured_solution(pde, p).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;
    let n = locs.len();
    PriorStats::new(locs, means, Some(vec![std; n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(experiment: ExperimentId, out: &Path) -> ResolvedConfig {
        ExperimentConfig {
            experiment: Some(experiment),
            outputs: Some(4),
            epochs: Some(3),
            u_hidden: Some(vec![4]),
            f_hidden: Some(vec![4]),
            collocation_per_axis: Some(7),
            grid_points: Some(11),
            out: Some(out.to_path_buf()),
            ..Default::default()
        }
        .resolve()
        .unwrap()
    }

    #[test]
    fn ids_round_trip_through_strings_and_serde() {
        for e in ExperimentId::ALL {
            assert_eq!(e.as_str().parse::<ExperimentId>().unwrap(), e);
            assert_eq!(serde_json::to_string(&e).unwrap(), format!("\"{}\"", e.as_str()));
        }
        assert!(matches!("linear".parse::<ExperimentId>(), Err(Error::Config(_))));
    }

    #[test]
    fn flags_win_over_file_values() {
        let file = ExperimentConfig::from_toml("experiment = \"inverse1d\"\nseed = 3\nepochs = 50\nnoise = \"case2\"\n").unwrap();
        let flags = ExperimentConfig {
            seed: Some(9),
            ..Default::default()
        };
        let c = file.overlay(flags).resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.data_seed, 9);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.sigma, 0.1);
        assert_eq!(c.experiment, ExperimentId::Inverse1d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("epoch = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("epochs = -3"), Err(Error::Config(_))));
        let c = ExperimentConfig {
            experiment: Some(ExperimentId::Linear1dForward),
            epochs: Some(0),
            ..Default::default()
        };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
        let c = ExperimentConfig {
            experiment: Some(ExperimentId::PriorAugmented),
            ..Default::default()
        };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_by_dimension_and_scale() {
        let r = |e, big| {
            ExperimentConfig {
                experiment: Some(e),
                paper_scale: Some(big),
                ..Default::default()
            }
            .resolve()
            .unwrap()
        };
        let c = r(ExperimentId::Linear1dForward, false);
        assert_eq!(c.train.u_dims(), vec![1, 20, 40, 500]);
        assert_eq!(c.train.epochs, 10_000);
        assert_eq!(c.grid_points, 201);
        let c = r(ExperimentId::AllenCahn2d, false);
        assert_eq!(c.train.u_dims(), vec![2, 50, 50, 200]);
        assert_eq!((c.train.epochs, c.train.collocation_per_axis), (5_000, 21));
        let c = r(ExperimentId::Inverse2d, true);
        assert_eq!(c.train.u_dims(), vec![2, 200, 200, 200, 2000]);
        assert_eq!((c.train.epochs, c.train.collocation_per_axis), (50_000, 41));
        let c = r(ExperimentId::FemCompare, false);
        assert_eq!((c.noise, c.fem_nodes, c.qq_locations.len()), (NoiseCase::Case2, Some(141), 9));
    }

    #[test]
    fn measurement_counts_follow_the_experiments() {
        let counts = |e| {
            let c = ExperimentConfig {
                experiment: Some(e),
                prior_file: Some("p.csv".into()),
                ..Default::default()
            }
            .resolve()
            .unwrap();
            let (u, f) = c.measurements().unwrap();
            (u.len(), f.len())
        };
        assert_eq!(counts(ExperimentId::Linear1dForward), (2, 16));
        assert_eq!(counts(ExperimentId::Nonlinear1dForward), (2, 32));
        assert_eq!(counts(ExperimentId::Inverse1d), (8, 32));
        assert_eq!(counts(ExperimentId::AllenCahn2d), (100, 500));
        assert_eq!(counts(ExperimentId::Inverse2d), (200, 100));
        assert_eq!(counts(ExperimentId::PriorAugmented), (2, 5));
    }

    #[test]
    fn ensemble_flag_sets_fem_compare_replicas() {
        let c = ExperimentConfig {
            experiment: Some(ExperimentId::FemCompare),
            ensemble: Some(64),
            ..Default::default()
        };
        assert_eq!(c.resolve().unwrap().train.replicas, 64);
        let c = ExperimentConfig { outputs: Some(10), ..c };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
        let c = ExperimentConfig {
            experiment: Some(ExperimentId::Inverse1d),
            ensemble: Some(64),
            ..Default::default()
        };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_run_writes_files_and_recomputable_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(ExperimentId::Inverse1d, dir.path());
        let m = run(&cfg).unwrap();
        assert_eq!(m.status, "ok");
        for f in ["u_posterior.csv", "f_posterior.csv", "loss.csv", "k_histogram.csv", "k_values.csv", "checkpoint.bin"] {
            assert!(m.files.iter().any(|x| x == f), "{f}");
        }
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        let text = fs::read_to_string(dir.path().join("k_values.csv")).unwrap();
        let k: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        let (mu, sd) = mean_std(&k);
        assert!((mu - m.metric("k_mean").unwrap()).abs() < 1e-12);
        assert!((sd - m.metric("k_std").unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fem_compare_emits_ninety_qq_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(ExperimentId::FemCompare, dir.path());
        run(&cfg).unwrap();
        let qq = fs::read_to_string(dir.path().join("qq.csv")).unwrap();
        assert_eq!(qq.lines().count(), 1 + 90);
        let prior = PriorStats::read_csv(BufReader::new(File::open(dir.path().join("prior_stats.csv")).unwrap())).unwrap();
        assert_eq!(prior.locations.len(), 9);
    }

    #[test]
    fn failed_run_leaves_failure_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(ExperimentId::Linear1dForward, dir.path());
        cfg.train.learning_rate = 1e300;
        cfg.train.epochs = 20;
        let err = run(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let m = RunManifest::read(dir.path()).unwrap();
        assert_eq!(m.status, "failed");
        assert!(m.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn prior_run_needs_std_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.csv");
        let prior = prior_from_exact(&Pde::linear_1d(), &qq_locations(), 0.05).unwrap();
        prior.means_only().write_csv(File::create(&p).unwrap()).unwrap();
        let mut cfg = quick(ExperimentId::Linear1dForward, &dir.path().join("run"));
        cfg.experiment = ExperimentId::PriorAugmented;
        cfg.prior_file = Some(p.clone());
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
        prior.write_csv(File::create(&p).unwrap()).unwrap();
        let m = run(&cfg).unwrap();
        for (name, _, _) in PRIOR_VARIANTS {
            assert!(m.metrics.contains_key(&format!("u_{name}_rmse")));
        }
    }

    #[test]
    fn common_points_pairs_equal_coordinates() {
        let f = |xs: &[f64]| {
            PosteriorField::from_ensemble(xs.iter().map(|&x| vec![x]).collect(), ndarray::Array2::zeros((xs.len(), 2))).unwrap()
        };
        let a = f(&[0.0, 0.1, 0.2, 0.3]);
        let b = f(&[0.1, 0.3, 0.5]);
        assert_eq!(common_points(&a, &b), vec![(1, 0), (3, 1)]);
        assert_eq!(qq_from_ensembles(&a, &b, &[0.3]).unwrap().len(), 1);
    }
}
