//! Diagonal-covariance Gaussian mixtures, fit with EM. Used as a pose
//! prior: poses become feature vectors by flattening the non-root joint
//! rotation matrices, and the fitter penalizes the negative log-density.

use nalgebra::Vector3;
use rand::Rng;
use std::path::Path;

use crate::bank::PoseBank;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::rng;
use crate::rot::axis_angle_to_matrix;

const GMM_MAGIC: &[u8; 4] = b"BFKG";
const GMM_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl DiagonalGmm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_components();
        if m == 0 || self.means.len() != m || self.variances.len() != m {
            return Err(Error::data(format!(
                "mixture has {m} weights, {} means, {} variances",
                self.means.len(),
                self.variances.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::data("mixture dimension is zero".to_string()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::data(format!("mixture weights sum to {wsum}, not 1")));
        }
        for (mu, var) in self.means.iter().zip(self.variances.iter()) {
            if mu.len() != d || var.len() != d {
                return Err(Error::data("mixture component dimensions disagree".to_string()));
            }
            if var.iter().any(|v| !(*v > 0.0)) || mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(
                    "mixture variances must be positive and means finite".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Per-component log weights + log densities at `x`.
    fn component_logs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::parameter(format!(
                "point has {} dims, mixture has {}",
                x.len(),
                self.dim()
            )));
        }
        const LN_2PI: f64 = 1.8378770664093453;
        Ok((0..self.n_components())
            .map(|m| {
                let mut acc = self.weights[m].ln();
                for d in 0..x.len() {
                    let diff = x[d] - self.means[m][d];
                    let var = self.variances[m][d];
                    acc += -0.5 * (LN_2PI + var.ln()) - diff * diff / (2.0 * var);
                }
                acc
            })
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(logsumexp(&self.component_logs(x)?))
    }

    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_density(x)?)
    }

    /// Negative log-density and its gradient:
    /// `d(−ln p)/dx_d = Σ_m r_m (x_d − μ_md)/σ²_md` with posterior
    /// responsibilities `r_m`.
    pub fn nll_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let logs = self.component_logs(x)?;
        let lse = logsumexp(&logs);
        let mut grad = vec![0.0; x.len()];
        for m in 0..self.n_components() {
            let r = (logs[m] - lse).exp();
            for d in 0..x.len() {
                grad[d] += r * (x[d] - self.means[m][d]) / self.variances[m][d];
            }
        }
        Ok((-lse, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = ByteWriter::new();
        w.write_magic(GMM_MAGIC);
        w.write_u64(GMM_VERSION);
        w.write_u64(self.n_components() as u64);
        w.write_u64(self.dim() as u64);
        w.write_f64_slice(&self.weights);
        for mu in &self.means {
            w.write_f64_slice(mu);
        }
        for var in &self.variances {
            w.write_f64_slice(var);
        }
        w.to_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::from_file(path)?;
        r.expect_magic(GMM_MAGIC)?;
        let version = r.read_u64("format version")?;
        if version != GMM_VERSION {
            return Err(Error::data(format!(
                "unsupported mixture version {version} (expected {GMM_VERSION})"
            )));
        }
        let m = r.read_count("component count", 1 << 16)?;
        let d = r.read_count("dimension", 1 << 20)?;
        let weights = r.read_f64_vec(m, "mixture weights")?;
        let mut means = Vec::with_capacity(m);
        for _ in 0..m {
            means.push(r.read_f64_vec(d, "component mean")?);
        }
        let mut variances = Vec::with_capacity(m);
        for _ in 0..m {
            variances.push(r.read_f64_vec(d, "component variance")?);
        }
        r.expect_eof()?;
        let gmm = DiagonalGmm {
            weights,
            means,
            variances,
        };
        gmm.validate()?;
        Ok(gmm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub variance_floor: f64,
    pub reseed_limit: usize,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(n_components: usize, seed: u64) -> Self {
        EmConfig {
            n_components,
            max_iters: 500,
            rel_tol: 1e-6,
            variance_floor: 1e-6,
            reseed_limit: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub n_iters: usize,
    pub log_likelihood: Vec<f64>,
    pub n_reseeds: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// EM for a diagonal GMM. Seeding is greedy farthest-point in the
/// k-means++ style (first mean drawn uniformly, then each next mean drawn
/// with probability proportional to squared distance from the chosen set);
/// responsibilities are computed in the log domain; variances are floored;
/// a component that loses all its mass is reseeded at the worst-modeled
/// point, up to a retry limit.
pub fn fit_gmm(data: &[Vec<f64>], cfg: &EmConfig) -> Result<(DiagonalGmm, EmReport)> {
    let n = data.len();
    let m = cfg.n_components;
    if m == 0 || n < m {
        return Err(Error::parameter(format!(
            "EM needs at least as many points as components (got {n} points, {m} components)"
        )));
    }
    if !(cfg.variance_floor > 0.0) || !(cfg.rel_tol > 0.0) {
        return Err(Error::parameter(
            "EM variance floor and tolerance must be positive".to_string(),
        ));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(Error::parameter(
            "EM data must be non-empty vectors of one dimension".to_string(),
        ));
    }

    // Global per-dimension variance: the fallback scale for seeding and
    // reseeding.
    let mut global_mean = vec![0.0; d];
    for x in data {
        for (a, v) in global_mean.iter_mut().zip(x) {
            *a += v / n as f64;
        }
    }
    let mut global_var = vec![0.0; d];
    for x in data {
        for (a, (v, mu)) in global_var.iter_mut().zip(x.iter().zip(&global_mean)) {
            *a += (v - mu) * (v - mu) / n as f64;
        }
    }
    for v in global_var.iter_mut() {
        *v = v.max(cfg.variance_floor);
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(m);
    means.push(data[rng.gen_range(0..n)].clone());
    while means.len() < m {
        let dists: Vec<f64> = data
            .iter()
            .map(|x| {
                means
                    .iter()
                    .map(|mu| sq_dist(x, mu))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.gen_range(0..n) // all points identical
        };
        means.push(data[pick].clone());
    }
    let mut gmm = DiagonalGmm {
        weights: vec![1.0 / m as f64; m],
        means,
        variances: vec![global_var.clone(); m],
    };

    let mut trace = Vec::new();
    let mut n_reseeds = 0usize;
    let mut resp = vec![vec![0.0; m]; n];
    let mut point_ll = vec![0.0; n];
    let mut iter = 0usize;
    while iter < cfg.max_iters {
        iter += 1;
        // E-step in the log domain.
        let mut total_ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let logs = gmm.component_logs(x)?;
            let lse = logsumexp(&logs);
            point_ll[i] = lse;
            total_ll += lse;
            for (r, l) in resp[i].iter_mut().zip(logs.iter()) {
                *r = (l - lse).exp();
            }
        }
        if !total_ll.is_finite() {
            return Err(Error::numeric(format!(
                "EM log-likelihood became non-finite at iteration {iter}"
            )));
        }

        // M-step.
        let mass: Vec<f64> = (0..m).map(|c| data.iter().enumerate().map(|(i, _)| resp[i][c]).sum()).collect();
        let starved: Vec<usize> = (0..m).filter(|&c| mass[c] < 1e-10).collect();
        if !starved.is_empty() {
            n_reseeds += starved.len();
            if n_reseeds > cfg.reseed_limit {
                return Err(Error::numeric(format!(
                    "EM reseeded starved components {n_reseeds} times (limit {})",
                    cfg.reseed_limit
                )));
            }
            for &c in &starved {
                // Plant the component on the worst-modeled point.
                let worst = point_ll
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
                    .expect("non-empty data");
                gmm.means[c] = data[worst].clone();
                gmm.variances[c] = global_var.clone();
                gmm.weights[c] = 1.0 / m as f64;
            }
            let wsum: f64 = gmm.weights.iter().sum();
            for w in gmm.weights.iter_mut() {
                *w /= wsum;
            }
            // Skip the update for this round; next E-step uses the
            // reseeded component.
            continue;
        }
        for c in 0..m {
            gmm.weights[c] = mass[c] / n as f64;
            let mut mu = vec![0.0; d];
            for (i, x) in data.iter().enumerate() {
                for (a, v) in mu.iter_mut().zip(x) {
                    *a += resp[i][c] * v;
                }
            }
            for a in mu.iter_mut() {
                *a /= mass[c];
            }
            let mut var = vec![0.0; d];
            for (i, x) in data.iter().enumerate() {
                for (a, (v, mu)) in var.iter_mut().zip(x.iter().zip(&mu)) {
                    *a += resp[i][c] * (v - mu) * (v - mu);
                }
            }
            for a in var.iter_mut() {
                *a = (*a / mass[c]).max(cfg.variance_floor);
            }
            gmm.means[c] = mu;
            gmm.variances[c] = var;
        }

        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (total_ll - prev).abs() <= cfg.rel_tol * (1.0 + total_ll.abs()));
        trace.push(total_ll);
        if converged {
            break;
        }
    }
    gmm.validate()?;
    Ok((
        gmm,
        EmReport {
            n_iters: iter,
            log_likelihood: trace,
            n_reseeds,
        },
    ))
}

/// Flattened non-root rotation matrices of a pose: `9·(K−1)` values,
/// row-major per joint. The root is excluded so global heading does not
/// enter the prior.
pub fn pose_feature(pose: &[Vector3<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * pose.len().saturating_sub(1));
    for aa in &pose[1..] {
        let m = axis_angle_to_matrix(aa);
        for r in 0..3 {
            for c in 0..3 {
                out.push(m[(r, c)]);
            }
        }
    }
    out
}

/// Fits the pose prior over a bank's non-root rotations. Requires at least
/// ten poses per mixture component; fitting a looser ratio is how priors end
/// up memorizing their bank.
pub fn fit_pose_prior(bank: &PoseBank, cfg: &EmConfig) -> Result<(DiagonalGmm, EmReport)> {
    bank.validate()?;
    if bank.n_joints() < 2 {
        return Err(Error::parameter(
            "pose prior needs at least two joints (root is excluded)".to_string(),
        ));
    }
    if bank.len() < 10 * cfg.n_components {
        return Err(Error::parameter(format!(
            "bank has {} poses; fitting {} components needs at least {}",
            bank.len(),
            cfg.n_components,
            10 * cfg.n_components
        )));
    }
    let data: Vec<Vec<f64>> = bank.poses.iter().map(|p| pose_feature(p)).collect();
    fit_gmm(&data, cfg)
}
