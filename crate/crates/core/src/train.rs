//! Loss assembly over all residual families and replicas, ADAM, and the
//! full-batch training loop.
//!
//! The loss is
//!
//! ```text
//! L = Σ_family w_family · (1 / N_family) · Σ_points Σ_replicas r²
//!   + Σ_i w_prior_mean · (mean_j u^j(x_i) − m_i)²
//!   + Σ_i w_prior_std  · (std_j u^j(x_i)  − s_i)²
//! ```
//!
//! where the ensemble std is the population form `sqrt(var + 1e-12)`.

use std::io::{BufRead, Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, rng_from, ReplicaDataset};
use crate::error::{Error, Result};
use crate::nn::{read_f64, read_u64, GradientBuffer, LinearProbes, Mlp, ProbeScratch, ProbeTape};
use crate::pde::{CollocationSet, KMode, Pde, Stencil};

const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pde: f64,
    pub essential: f64,
    pub natural: f64,
    pub meas_u: f64,
    pub meas_f: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pde: 1.0,
            essential: 1.0,
            natural: 1.0,
            meas_u: 1.0,
            meas_f: 1.0,
            prior_mean: 1.0,
            prior_std: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pde,
            self.essential,
            self.natural,
            self.meas_u,
            self.meas_f,
            self.prior_mean,
            self.prior_std,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Known ensemble statistics of `u` at a few locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub locations: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub stds: Option<Vec<f64>>,
}

impl PriorStats {
    pub fn new(locations: Vec<Vec<f64>>, means: Vec<f64>, stds: Option<Vec<f64>>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Empty("prior statistics locations"));
        }
        if means.len() != locations.len() {
            return Err(Error::dim("prior means", locations.len(), means.len()));
        }
        if let Some(s) = &stds {
            if s.len() != locations.len() {
                return Err(Error::dim("prior stds", locations.len(), s.len()));
            }
            if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("prior stds must be finite and >= 0".into()));
            }
        }
        Ok(Self {
            locations,
            means,
            stds,
        })
    }

    /// Same statistics without the std targets.
    pub fn means_only(&self) -> Self {
        Self {
            stds: None,
            ..self.clone()
        }
    }

    /// CSV with header `x,[y,]mean,std`; `std` is empty when absent.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.locations[0].len();
        writeln!(w, "{},mean,std", if dim == 1 { "x" } else { "x,y" })?;
        for (i, p) in self.locations.iter().enumerate() {
            for c in p {
                write!(w, "{c},")?;
            }
            match &self.stds {
                Some(s) => writeln!(w, "{},{}", self.means[i], s[i])?,
                None => writeln!(w, "{},", self.means[i])?,
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Empty("prior statistics file"))??;
        let dim = header.split(',').count() - 2;
        if !(1..=2).contains(&dim) {
            return Err(Error::Parse(format!("bad prior header `{header}`")));
        }
        let mut locations = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        let mut any_missing = false;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!("bad prior row `{line}`")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("cannot parse `{s}`")));
            locations.push(fields[..dim].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
            means.push(num(fields[dim])?);
            if fields[dim + 1].trim().is_empty() {
                any_missing = true;
            } else {
                stds.push(num(fields[dim + 1])?);
            }
        }
        Self::new(locations, means, if any_missing { None } else { Some(stds) })
    }
}

/// ADAM moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam gradients", params.len(), grads.len()));
    }
    if state.m.len() != params.len() {
        return Err(Error::dim("adam moments", params.len(), state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Weighted per-family loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub pde: f64,
    pub essential: f64,
    pub natural: f64,
    pub meas_u: f64,
    pub meas_f: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl LossComponents {
    pub const CSV_HEADER: &'static str = "epoch,total,pde,essential,natural,meas_u,meas_f,prior_mean,prior_std";

    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("pde", self.pde),
            ("essential", self.essential),
            ("natural", self.natural),
            ("meas_u", self.meas_u),
            ("meas_f", self.meas_f),
            ("prior_mean", self.prior_mean),
            ("prior_std", self.prior_std),
            ("total", self.total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{},{},{},{}",
            self.total,
            self.pde,
            self.essential,
            self.natural,
            self.meas_u,
            self.meas_f,
            self.prior_mean,
            self.prior_std
        )
    }
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub u: GradientBuffer,
    pub f: GradientBuffer,
    pub k: Option<Vec<f64>>,
}

/// Probe layout for every residual family, built once per training run.
#[derive(Debug, Clone)]
pub struct CompiledLoss {
    pde: Pde,
    weights: LossWeights,
    replicas: usize,
    u_probes: LinearProbes,
    f_probes: LinearProbes,
    // row indices into the u probe outputs
    lap_rows: Vec<usize>,
    centre_rows: Vec<usize>,
    ess_rows: Vec<usize>,
    nat_rows: Vec<usize>,
    u_meas_rows: Vec<usize>,
    prior_rows: Vec<usize>,
    // row indices into the f probe outputs
    f_colloc_rows: Vec<usize>,
    f_meas_rows: Vec<usize>,
    ess_targets: Vec<f64>,
    nat_targets: Vec<f64>,
    u_targets: Array2<f64>,
    f_targets: Array2<f64>,
    prior: Option<PriorStats>,
}

fn add_terms(probes: &mut LinearProbes, terms: Vec<(Vec<f64>, f64)>) -> usize {
    let idx: Vec<(usize, f64)> = terms.into_iter().map(|(p, c)| (probes.add_point(&p), c)).collect();
    probes.add_row(idx)
}

impl CompiledLoss {
    pub fn new(
        pde: &Pde,
        stencil: &Stencil,
        colloc: &CollocationSet,
        data: &ReplicaDataset,
        weights: &LossWeights,
        prior: Option<&PriorStats>,
    ) -> Result<Self> {
        weights.validate()?;
        let dim = pde.dim();
        if stencil.dim != dim {
            return Err(Error::dim("stencil dimension", dim, stencil.dim));
        }
        if data.dim != dim {
            return Err(Error::dim("dataset dimension", dim, data.dim));
        }
        let replicas = data.replicas();
        if data.f.replicas() != replicas {
            return Err(Error::dim("f replica targets", replicas, data.f.replicas()));
        }
        let domain = pde.domain();
        colloc.validate(&domain, stencil)?;

        let mut u = LinearProbes::new(dim);
        let mut f = LinearProbes::new(dim);
        let mut lap_rows = Vec::new();
        let mut centre_rows = Vec::new();
        let mut f_colloc_rows = Vec::new();
        for p in &colloc.interior {
            let terms = stencil.laplacian_terms(p);
            let centre = u.add_point(&terms[0].0);
            let mut idx = vec![(centre, terms[0].1)];
            for (q, c) in terms.into_iter().skip(1) {
                idx.push((u.add_point(&q), c));
            }
            lap_rows.push(u.add_row(idx));
            if pde.has_reaction() {
                centre_rows.push(u.add_row(vec![(centre, 1.0)]));
            }
            f_colloc_rows.push(f.add_value(p));
        }
        let ess_rows = colloc.essential.iter().map(|e| u.add_value(&e.point)).collect();
        let nat_rows = colloc
            .natural
            .iter()
            .map(|n| add_terms(&mut u, stencil.one_sided_terms(&n.point, n.axis, n.inward)))
            .collect();
        let mut u_meas_rows = Vec::new();
        for m in &data.u.measurements {
            domain.check(&m.location)?;
            u_meas_rows.push(u.add_value(&m.location));
        }
        let mut f_meas_rows = Vec::new();
        for m in &data.f.measurements {
            domain.check(&m.location)?;
            f_meas_rows.push(f.add_value(&m.location));
        }
        let mut prior_rows = Vec::new();
        if let Some(prior) = prior {
            for p in &prior.locations {
                domain.check(p)?;
                prior_rows.push(u.add_value(p));
            }
        }
        Ok(Self {
            pde: *pde,
            weights: *weights,
            replicas,
            u_probes: u,
            f_probes: f,
            lap_rows,
            centre_rows,
            ess_rows,
            nat_rows,
            u_meas_rows,
            prior_rows,
            f_colloc_rows,
            f_meas_rows,
            ess_targets: colloc.essential.iter().map(|e| e.target).collect(),
            nat_targets: colloc.natural.iter().map(|n| n.target).collect(),
            u_targets: data.u.targets.clone(),
            f_targets: data.f.targets.clone(),
            prior: prior.cloned(),
        })
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    /// Loss components and exact gradients.
    pub fn evaluate(&self, u_net: &Mlp, f_net: &Mlp, k: Option<&[f64]>) -> Result<(LossComponents, LossGradients)> {
        let mut ws = LossWorkspace::new(u_net, f_net);
        let comp = self.evaluate_into(u_net, f_net, k, &mut ws)?;
        Ok((comp, ws.grads))
    }

    /// Like [`CompiledLoss::evaluate`], leaving the gradients in `ws.grads`.
    pub fn evaluate_into(
        &self,
        u_net: &Mlp,
        f_net: &Mlp,
        k: Option<&[f64]>,
        ws: &mut LossWorkspace,
    ) -> Result<LossComponents> {
        let m = self.replicas;
        if u_net.output_dim() != m || f_net.output_dim() != m {
            return Err(Error::dim("network outputs", m, u_net.output_dim().min(f_net.output_dim())));
        }
        self.pde.check_k(k, m)?;
        let w = &self.weights;
        u_net.eval_probes_into(&self.u_probes, &mut ws.tu)?;
        f_net.eval_probes_into(&self.f_probes, &mut ws.tf)?;
        let (uo, fo) = (&ws.tu.outputs, &ws.tf.outputs);
        let du = &mut ws.du;
        let df = &mut ws.df;
        reset(du, uo.dim());
        reset(df, fo.dim());
        let mut dk = ws.grads.k.take().unwrap_or_default();
        dk.clear();
        dk.resize(m, 0.0);
        let mut comp = LossComponents::default();
        let lambda = self.pde.lambda;

        let n = self.lap_rows.len();
        if n > 0 && w.pde > 0.0 {
            let scale = w.pde / n as f64;
            let mut sum = 0.0;
            for i in 0..n {
                let (lr, fr) = (self.lap_rows[i], self.f_colloc_rows[i]);
                let cr = self.centre_rows.get(i).copied();
                for j in 0..m {
                    let react = match cr {
                        Some(cr) => self.pde.reaction(uo[[cr, j]], self.pde.k_for(k, j)),
                        None => Default::default(),
                    };
                    let r = lambda * uo[[lr, j]] + react.value - fo[[fr, j]];
                    sum += r * r;
                    let c = 2.0 * scale * r;
                    du[[lr, j]] += c * lambda;
                    if let Some(cr) = cr {
                        du[[cr, j]] += c * react.d_u;
                    }
                    df[[fr, j]] -= c;
                    dk[j] += c * react.d_k;
                }
            }
            comp.pde = scale * sum;
        }

        let point_family = |rows: &[usize], targets: &dyn Fn(usize, usize) -> f64, weight: f64, out: &Array2<f64>, d: &mut Array2<f64>| -> f64 {
            if rows.is_empty() || weight == 0.0 {
                return 0.0;
            }
            let scale = weight / rows.len() as f64;
            let mut sum = 0.0;
            for (i, &row) in rows.iter().enumerate() {
                for j in 0..m {
                    let r = out[[row, j]] - targets(i, j);
                    sum += r * r;
                    d[[row, j]] += 2.0 * scale * r;
                }
            }
            scale * sum
        };
        comp.essential = point_family(&self.ess_rows, &|i, _| self.ess_targets[i], w.essential, uo, du);
        comp.natural = point_family(&self.nat_rows, &|i, _| self.nat_targets[i], w.natural, uo, du);
        comp.meas_u = point_family(&self.u_meas_rows, &|i, j| self.u_targets[[i, j]], w.meas_u, uo, du);
        comp.meas_f = point_family(&self.f_meas_rows, &|i, j| self.f_targets[[i, j]], w.meas_f, fo, df);

        if let Some(prior) = &self.prior {
            let mf = m as f64;
            for (l, &row) in self.prior_rows.iter().enumerate() {
                let vals = uo.row(row);
                let mean = vals.sum() / mf;
                if w.prior_mean > 0.0 {
                    let e = mean - prior.means[l];
                    comp.prior_mean += w.prior_mean * e * e;
                    let g = 2.0 * w.prior_mean * e / mf;
                    du.row_mut(row).mapv_inplace(|d| d + g);
                }
                if let (Some(stds), true) = (&prior.stds, w.prior_std > 0.0) {
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mf;
                    let std = (var + STD_FLOOR).sqrt();
                    let e = std - stds[l];
                    comp.prior_std += w.prior_std * e * e;
                    let g = 2.0 * w.prior_std * e / (mf * std);
                    for (d, v) in du.row_mut(row).iter_mut().zip(vals) {
                        *d += g * (v - mean);
                    }
                }
            }
        }

        comp.total = comp.pde + comp.essential + comp.natural + comp.meas_u + comp.meas_f + comp.prior_mean + comp.prior_std;

        ws.grads.u.zero();
        ws.grads.f.zero();
        u_net.backprop_probes_with(&self.u_probes, &ws.tu, &ws.du, &mut ws.grads.u, &mut ws.su)?;
        f_net.backprop_probes_with(&self.f_probes, &ws.tf, &ws.df, &mut ws.grads.f, &mut ws.sf)?;
        ws.grads.k = if self.pde.is_inverse() { Some(dk) } else { None };
        Ok(comp)
    }
}

fn reset(a: &mut Array2<f64>, shape: (usize, usize)) {
    if a.dim() == shape {
        a.fill(0.0);
    } else {
        *a = Array2::zeros(shape);
    }
}

/// Buffers reused across loss evaluations.
#[derive(Debug, Clone)]
pub struct LossWorkspace {
    tu: ProbeTape,
    tf: ProbeTape,
    su: ProbeScratch,
    sf: ProbeScratch,
    du: Array2<f64>,
    df: Array2<f64>,
    pub grads: LossGradients,
}

impl LossWorkspace {
    pub fn new(u_net: &Mlp, f_net: &Mlp) -> Self {
        Self {
            tu: ProbeTape::default(),
            tf: ProbeTape::default(),
            su: ProbeScratch::default(),
            sf: ProbeScratch::default(),
            du: Array2::zeros((0, 0)),
            df: Array2::zeros((0, 0)),
            grads: LossGradients {
                u: GradientBuffer::zeros_like(u_net),
                f: GradientBuffer::zeros_like(f_net),
                k: None,
            },
        }
    }
}

/// Largest relative deviation between the analytic gradients of `loss` and
/// central finite differences with the given step, over every parameter of
/// both networks and k. Deviations are scaled by `max(|analytic|, |fd|, 1e-3)`.
pub fn gradient_check(loss: &CompiledLoss, u_net: &Mlp, f_net: &Mlp, k: Option<&[f64]>, step: f64) -> Result<f64> {
    let (_, grads) = loss.evaluate(u_net, f_net, k)?;
    let total = |u: &Mlp, f: &Mlp, k: Option<&[f64]>| -> Result<f64> {
        let mut ws = LossWorkspace::new(u, f);
        Ok(loss.evaluate_into(u, f, k, &mut ws)?.total)
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let mut u = u_net.clone();
    for (i, g) in grads.u.values().iter().enumerate() {
        let orig = u.params()[i];
        u.params_mut()[i] = orig + step;
        let up = total(&u, f_net, k)?;
        u.params_mut()[i] = orig - step;
        let down = total(&u, f_net, k)?;
        u.params_mut()[i] = orig;
        worst = worst.max(rel(*g, (up - down) / (2.0 * step)));
    }
    let mut f = f_net.clone();
    for (i, g) in grads.f.values().iter().enumerate() {
        let orig = f.params()[i];
        f.params_mut()[i] = orig + step;
        let up = total(u_net, &f, k)?;
        f.params_mut()[i] = orig - step;
        let down = total(u_net, &f, k)?;
        f.params_mut()[i] = orig;
        worst = worst.max(rel(*g, (up - down) / (2.0 * step)));
    }
    if let (Some(k), Some(gk)) = (k, &grads.k) {
        let mut kk = k.to_vec();
        for (i, g) in gk.iter().enumerate() {
            kk[i] = k[i] + step;
            let up = total(u_net, f_net, Some(&kk))?;
            kk[i] = k[i] - step;
            let down = total(u_net, f_net, Some(&kk))?;
            kk[i] = k[i];
            worst = worst.max(rel(*g, (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

/// One-shot loss and gradients; [`CompiledLoss`] amortises the setup across epochs.
#[allow(clippy::too_many_arguments)]
pub fn assemble_loss(
    u_net: &Mlp,
    f_net: &Mlp,
    k: Option<&[f64]>,
    data: &ReplicaDataset,
    colloc: &CollocationSet,
    pde: &Pde,
    stencil: &Stencil,
    weights: &LossWeights,
    prior: Option<&PriorStats>,
) -> Result<(LossComponents, LossGradients)> {
    CompiledLoss::new(pde, stencil, colloc, data, weights, prior)?.evaluate(u_net, f_net, k)
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub replicas: usize,
    /// Hidden layer sizes of the u network.
    pub u_hidden: Vec<usize>,
    /// Hidden layer sizes of the f network.
    pub f_hidden: Vec<usize>,
    pub pde: Pde,
    pub stencil: Stencil,
    /// Interior collocation points per axis (inset by the stencil step).
    pub collocation_per_axis: usize,
    pub weights: LossWeights,
    /// Both networks see the domain mapped onto `[-input_scale, input_scale]^d`.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
    /// Seeds network initialisation and the k array.
    pub seed: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.replicas < 1 {
            return Err(Error::Config("replicas must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.stencil.dim != self.pde.dim() {
            return Err(Error::dim("stencil dimension", self.pde.dim(), self.stencil.dim));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Config(format!("input scale must be positive, got {}", self.input_scale)));
        }
        self.weights.validate()
    }

    pub fn u_dims(&self) -> Vec<usize> {
        dims(self.pde.dim(), &self.u_hidden, self.replicas)
    }

    pub fn f_dims(&self) -> Vec<usize> {
        dims(self.pde.dim(), &self.f_hidden, self.replicas)
    }

    pub fn collocation(&self) -> Result<CollocationSet> {
        CollocationSet::uniform(&self.pde.domain(), &self.stencil, self.collocation_per_axis)
    }
}

fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

/// Trainable state: both networks, the optional k array and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub u_net: Mlp,
    pub f_net: Mlp,
    pub k: Option<Vec<f64>>,
    pub adam_u: AdamState,
    pub adam_f: AdamState,
    pub adam_k: Option<AdamState>,
    pub epoch: usize,
}

impl TrainState {
    /// Xavier-normal networks with inputs mapped from the domain onto
    /// `[-input_scale, input_scale]` and, for inverse problems, k drawn
    /// uniformly on [0, 1].
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let domain = config.pde.domain();
        let (lo, hi) = (vec![domain.lo; domain.dim], vec![domain.hi; domain.dim]);
        let mut u_net = Mlp::xavier_normal(&config.u_dims(), derive_seed(config.seed, 21))?;
        let mut f_net = Mlp::xavier_normal(&config.f_dims(), derive_seed(config.seed, 22))?;
        u_net.map_inputs(&lo, &hi, config.input_scale)?;
        f_net.map_inputs(&lo, &hi, config.input_scale)?;
        let k = match config.pde.k_mode {
            KMode::Trainable => {
                let mut rng = rng_from(derive_seed(config.seed, 23));
                Some((0..config.replicas).map(|_| rng.random::<f64>()).collect::<Vec<_>>())
            }
            KMode::Fixed(_) => None,
        };
        let lr = config.learning_rate;
        Ok(Self {
            adam_u: AdamState::new(u_net.param_count(), lr),
            adam_f: AdamState::new(f_net.param_count(), lr),
            adam_k: k.as_ref().map(|k| AdamState::new(k.len(), lr)),
            u_net,
            f_net,
            k,
            epoch: 0,
        })
    }

    fn step(&mut self, grads: &LossGradients) -> Result<()> {
        adam_step(self.u_net.params_mut(), grads.u.values(), &mut self.adam_u)?;
        adam_step(self.f_net.params_mut(), grads.f.values(), &mut self.adam_f)?;
        if let (Some(k), Some(gk), Some(st)) = (&mut self.k, &grads.k, &mut self.adam_k) {
            adam_step(k, gk, st)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Checkpoint: u snapshot, f snapshot, then `u64` k length and k values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        self.u_net.write_snapshot(&mut w)?;
        self.f_net.write_snapshot(&mut w)?;
        let k = self.k.as_deref().unwrap_or(&[]);
        w.write_all(&(k.len() as u64).to_le_bytes())?;
        for v in k {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Restore networks and k; optimizer moments restart from zero.
    pub fn read_checkpoint<R: Read>(mut r: R, learning_rate: f64) -> Result<Self> {
        let u_net = Mlp::read_snapshot(&mut r)?;
        let f_net = Mlp::read_snapshot(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        if n > u_net.output_dim() {
            return Err(Error::Parse(format!("k array of length {n} in checkpoint")));
        }
        let k = if n == 0 {
            None
        } else {
            Some((0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?)
        };
        Ok(Self {
            adam_u: AdamState::new(u_net.param_count(), learning_rate),
            adam_f: AdamState::new(f_net.param_count(), learning_rate),
            adam_k: k.as_ref().map(|k| AdamState::new(k.len(), learning_rate)),
            u_net,
            f_net,
            k,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Loss before each optimizer step.
    pub history: Vec<LossComponents>,
}

impl TrainOutcome {
    pub fn write_loss_trace<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", LossComponents::CSV_HEADER)?;
        for (e, c) in self.history.iter().enumerate() {
            writeln!(w, "{}", c.csv_row(e))?;
        }
        Ok(())
    }
}

/// Full-batch ADAM training from a fresh initialisation.
pub fn train(config: &TrainConfig, data: &ReplicaDataset, prior: Option<&PriorStats>) -> Result<TrainOutcome> {
    let state = TrainState::init(config)?;
    train_from(config, data, prior, state)
}

/// Continue training `state` for `config.epochs` more epochs.
pub fn train_from(
    config: &TrainConfig,
    data: &ReplicaDataset,
    prior: Option<&PriorStats>,
    mut state: TrainState,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.replicas() != config.replicas {
        return Err(Error::dim("dataset replicas", config.replicas, data.replicas()));
    }
    let colloc = config.collocation()?;
    let loss = CompiledLoss::new(&config.pde, &config.stencil, &colloc, data, &config.weights, prior)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut ws = LossWorkspace::new(&state.u_net, &state.f_net);
    for _ in 0..config.epochs {
        let comp = loss.evaluate_into(&state.u_net, &state.f_net, state.k.as_deref(), &mut ws)?;
        if let Some(component) = comp.first_non_finite() {
            return Err(Error::NonFinite {
                epoch: state.epoch,
                component: component.into(),
            });
        }
        history.push(comp);
        state.step(&ws.grads)?;
        if !state.u_net.is_finite() || !state.f_net.is_finite() {
            return Err(Error::NonFinite {
                epoch: state.epoch,
                component: "network parameters".into(),
            });
        }
    }
    Ok(TrainOutcome { state, history })
}
