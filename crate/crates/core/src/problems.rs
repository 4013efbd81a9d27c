//! Desk-scale objectives with per-worker data shards.
//!
//! Three kinds: synthetic least squares, binary logistic regression, and a
//! tiny one-hidden-layer tanh network with hand-derived backprop. Datasets
//! are generated from a fixed seed (Gaussian features, planted ground-truth
//! weights, parameterized label noise) so every run is reproducible without
//! downloads; a small CSV loader covers user-supplied data.
//!
//! Workers hold disjoint contiguous shards whose union is the full dataset.
//! `sample_gradient` draws a minibatch uniformly with replacement from the
//! worker's own shard, which keeps the draws i.i.d. and makes the averaged
//! gradient's variance scale like `1/n`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{make_chunk_layout, DenseVector};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    LeastSquares,
    Logistic,
    TinyMlp,
}

/// Declarative description of a problem instance; `build` turns it into data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Feature dimension (equals the parameter count except for the MLP).
    pub dim: usize,
    /// Hidden width, TinyMlp only.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub n_samples: usize,
    pub batch_size: usize,
    /// Label noise: observation noise std for regression kinds, label flip
    /// probability for logistic.
    #[serde(default)]
    pub noise: f64,
    pub data_seed: u64,
    /// Optional CSV dataset (rows = features, last column = label); replaces
    /// the synthetic generator.
    #[serde(default)]
    pub csv_path: Option<String>,
}

fn default_hidden() -> usize {
    16
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.csv_path.is_none() {
            if self.dim == 0 {
                return Err(Error::config("problem dim must be positive"));
            }
            if self.n_samples == 0 {
                return Err(Error::config("problem needs at least one sample"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.kind == ProblemKind::TinyMlp {
            if self.hidden == 0 || self.hidden > 64 {
                return Err(Error::config("tiny_mlp hidden width must be in 1..=64"));
            }
            let params = mlp_param_dim(self.dim, self.hidden);
            if params > 5000 {
                return Err(Error::config(format!(
                    "tiny_mlp parameter count {params} exceeds 5000"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) && self.kind == ProblemKind::Logistic {
            return Err(Error::config("logistic noise is a flip probability in [0,1]"));
        }
        Ok(())
    }
}

fn mlp_param_dim(in_dim: usize, hidden: usize) -> usize {
    hidden * in_dim + hidden + hidden + 1
}

/// A fully materialized problem: dataset, shard boundaries, loss/gradient
/// oracles.
#[derive(Debug, Clone)]
pub struct Problem {
    kind: ProblemKind,
    feat_dim: usize,
    param_dim: usize,
    hidden: usize,
    /// Row-major `n_samples x feat_dim`.
    features: Vec<f64>,
    labels: Vec<f64>,
    shards: Vec<std::ops::Range<usize>>,
    batch_size: usize,
    known_optimum: Option<f64>,
}

/// One stochastic gradient draw.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub gradient: DenseVector,
    pub loss: f64,
    pub batch_indices: Vec<usize>,
}

impl Problem {
    /// Generate (or load) the dataset and split it into `n_workers` disjoint
    /// contiguous shards.
    pub fn build(spec: &ProblemSpec, n_workers: usize) -> Result<Problem> {
        spec.validate()?;
        if n_workers == 0 {
            return Err(Error::config("need at least one worker"));
        }
        let (features, labels, feat_dim) = match &spec.csv_path {
            Some(path) => load_csv(path)?,
            None => synthesize(spec)?,
        };
        let n_samples = labels.len();
        if n_samples < n_workers {
            return Err(Error::config(format!(
                "{n_samples} samples cannot be split across {n_workers} workers"
            )));
        }
        if spec.kind == ProblemKind::Logistic {
            if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::config(format!(
                    "logistic labels must be 0 or 1, found {bad}"
                )));
            }
        }
        let shard_layout = make_chunk_layout(n_samples, n_workers)?;
        let shards = (0..n_workers)
            .map(|k| {
                let (start, len) = shard_layout.chunk(k);
                start..start + len
            })
            .collect();
        let param_dim = match spec.kind {
            ProblemKind::TinyMlp => mlp_param_dim(feat_dim, spec.hidden),
            _ => feat_dim,
        };
        let mut problem = Problem {
            kind: spec.kind,
            feat_dim,
            param_dim,
            hidden: spec.hidden,
            features,
            labels,
            shards,
            batch_size: spec.batch_size,
            known_optimum: None,
        };
        if spec.kind == ProblemKind::LeastSquares && feat_dim <= 512 {
            problem.known_optimum = problem.least_squares_optimum_loss();
        }
        Ok(problem)
    }

    /// Assemble a problem from an explicit dataset (used by tests and by the
    /// CSV path).
    pub fn from_parts(
        kind: ProblemKind,
        feat_dim: usize,
        hidden: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
        n_workers: usize,
        batch_size: usize,
    ) -> Result<Problem> {
        if feat_dim == 0 || labels.is_empty() || features.len() != labels.len() * feat_dim {
            return Err(Error::config("inconsistent dataset shape"));
        }
        let spec = ProblemSpec {
            kind,
            dim: feat_dim,
            hidden,
            n_samples: labels.len(),
            batch_size,
            noise: 0.0,
            data_seed: 0,
            csv_path: None,
        };
        spec.validate()?;
        let shard_layout = make_chunk_layout(labels.len(), n_workers)?;
        let shards = (0..n_workers)
            .map(|k| {
                let (start, len) = shard_layout.chunk(k);
                start..start + len
            })
            .collect();
        let param_dim = match kind {
            ProblemKind::TinyMlp => mlp_param_dim(feat_dim, hidden),
            _ => feat_dim,
        };
        Ok(Problem {
            kind,
            feat_dim,
            param_dim,
            hidden,
            features,
            labels,
            shards,
            batch_size,
            known_optimum: None,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Optimal loss when analytically available (least squares via normal
    /// equations).
    pub fn known_optimum(&self) -> Option<f64> {
        self.known_optimum
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn shard(&self, worker: usize) -> std::ops::Range<usize> {
        self.shards[worker].clone()
    }

    fn row(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.feat_dim..(sample + 1) * self.feat_dim]
    }

    /// Deterministic starting point. Zero except for the MLP, which needs a
    /// small random init to break hidden-unit symmetry.
    pub fn initial_point(&self, master_seed: u64) -> DenseVector {
        match self.kind {
            ProblemKind::TinyMlp => {
                let mut rng = derive_rng(master_seed, &[stream::INIT]);
                let data = (0..self.param_dim)
                    .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                DenseVector::from_vec_unchecked(data)
            }
            _ => DenseVector::zeros(self.param_dim),
        }
    }

    /// Loss and gradient of one sample at `x`, accumulated into `grad_acc`.
    fn accumulate_sample(&self, sample: usize, x: &DenseVector, grad_acc: &mut [f64]) -> f64 {
        let a = self.row(sample);
        let y = self.labels[sample];
        match self.kind {
            ProblemKind::LeastSquares => {
                let r = dot(a, x.as_slice()) - y;
                for (g, &ai) in grad_acc.iter_mut().zip(a.iter()) {
                    *g += r * ai;
                }
                0.5 * r * r
            }
            ProblemKind::Logistic => {
                let z = dot(a, x.as_slice());
                let p = sigmoid(z);
                for (g, &ai) in grad_acc.iter_mut().zip(a.iter()) {
                    *g += (p - y) * ai;
                }
                // -(y ln p + (1-y) ln(1-p)) = softplus(z) - y z, stable form
                softplus(z) - y * z
            }
            ProblemKind::TinyMlp => self.mlp_sample(a, y, x.as_slice(), grad_acc),
        }
    }

    /// Forward + backward for the one-hidden-layer tanh net.
    /// Parameter layout: [w1 (h x in, row-major), b1 (h), w2 (h), b2 (1)].
    fn mlp_sample(&self, a: &[f64], y: f64, theta: &[f64], grad_acc: &mut [f64]) -> f64 {
        let (h, d) = (self.hidden, self.feat_dim);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);

        let mut u = vec![0.0; h];
        for j in 0..h {
            u[j] = (dot(&w1[j * d..(j + 1) * d], a) + b1[j]).tanh();
        }
        let pred = dot(w2, &u) + b2[0];
        let r = pred - y;

        let (gw1, grest) = grad_acc.split_at_mut(h * d);
        let (gb1, grest) = grest.split_at_mut(h);
        let (gw2, gb2) = grest.split_at_mut(h);
        for j in 0..h {
            gw2[j] += r * u[j];
            let dz = r * w2[j] * (1.0 - u[j] * u[j]);
            gb1[j] += dz;
            for (g, &ai) in gw1[j * d..(j + 1) * d].iter_mut().zip(a.iter()) {
                *g += dz * ai;
            }
        }
        gb2[0] += r;
        0.5 * r * r
    }

    fn mean_over<'a>(
        &self,
        samples: impl Iterator<Item = usize> + 'a,
        count: usize,
        x: &DenseVector,
    ) -> Result<(DenseVector, f64)> {
        let mut grad = vec![0.0; self.param_dim];
        let mut loss = 0.0;
        for s in samples {
            loss += self.accumulate_sample(s, x, &mut grad);
        }
        let inv = 1.0 / count as f64;
        loss *= inv;
        let gradient = DenseVector::from_vec(grad.into_iter().map(|g| g * inv).collect())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} is not finite")));
        }
        Ok((gradient, loss))
    }

    /// Uniform-with-replacement minibatch gradient from worker `i`'s shard.
    /// Unbiased for that shard's mean gradient.
    pub fn sample_gradient<R: Rng + ?Sized>(
        &self,
        worker: usize,
        x: &DenseVector,
        rng: &mut R,
    ) -> Result<GradientSample> {
        if worker >= self.n_workers() {
            return Err(Error::config(format!(
                "worker {worker} out of range {}",
                self.n_workers()
            )));
        }
        if x.len() != self.param_dim {
            return Err(Error::dim(format!(
                "x len {} vs param dim {}",
                x.len(),
                self.param_dim
            )));
        }
        let shard = self.shards[worker].clone();
        if shard.is_empty() {
            return Err(Error::config(format!("worker {worker} has an empty shard")));
        }
        let batch_indices: Vec<usize> = (0..self.batch_size)
            .map(|_| rng.random_range(shard.clone()))
            .collect();
        let (gradient, loss) =
            self.mean_over(batch_indices.iter().copied(), batch_indices.len(), x)?;
        Ok(GradientSample { gradient, loss, batch_indices })
    }

    /// Exact mean gradient and loss of worker `i`'s full shard.
    pub fn shard_gradient_and_loss(&self, worker: usize, x: &DenseVector) -> Result<(DenseVector, f64)> {
        let shard = self.shards[worker].clone();
        self.mean_over(shard.clone(), shard.len(), x)
    }

    /// Exact deterministic loss and gradient over the union of shards.
    pub fn full_gradient_and_loss(&self, x: &DenseVector) -> Result<(DenseVector, f64)> {
        if x.len() != self.param_dim {
            return Err(Error::dim(format!(
                "x len {} vs param dim {}",
                x.len(),
                self.param_dim
            )));
        }
        self.mean_over(0..self.n_samples(), self.n_samples(), x)
    }

    /// Per-worker estimate of `E||g - grad f_i(x)||^2` from `draws`
    /// minibatch draws. Zero when the batch covers the whole shard.
    pub fn measure_variance<R: Rng + ?Sized>(
        &self,
        x: &DenseVector,
        draws: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if draws < 2 {
            return Err(Error::config("variance probe needs at least 2 draws"));
        }
        let mut out = Vec::with_capacity(self.n_workers());
        for worker in 0..self.n_workers() {
            let (shard_grad, _) = self.shard_gradient_and_loss(worker, x)?;
            let mut acc = 0.0;
            for _ in 0..draws {
                let g = self.sample_gradient(worker, x, rng)?.gradient;
                acc += g.sub(&shard_grad)?.iter().map(|d| d * d).sum::<f64>();
            }
            out.push(acc / draws as f64);
        }
        Ok(out)
    }

    /// Solve the normal equations independently and evaluate the loss there.
    fn least_squares_optimum_loss(&self) -> Option<f64> {
        let d = self.feat_dim;
        let n = self.n_samples();
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for s in 0..n {
            let a = self.row(s);
            for i in 0..d {
                rhs[i] += a[i] * self.labels[s];
                for j in i..d {
                    gram[i * d + j] += a[i] * a[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                gram[i * d + j] = gram[j * d + i];
            }
        }
        let x = cholesky_solve(&gram, &rhs, d)?;
        let xv = DenseVector::from_vec(x).ok()?;
        self.full_gradient_and_loss(&xv).ok().map(|(_, loss)| loss)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Plain Cholesky solve of a symmetric positive-definite system.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in i + 1..d {
            sum -= l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    Some(x)
}

fn synthesize(spec: &ProblemSpec) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let d = spec.dim;
    let n = spec.n_samples;
    let mut feat_rng = derive_rng(spec.data_seed, &[stream::DATA, 0]);
    let mut truth_rng = derive_rng(spec.data_seed, &[stream::DATA, 1]);
    let mut noise_rng = derive_rng(spec.data_seed, &[stream::DATA, 2]);

    let features: Vec<f64> = (0..n * d)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut feat_rng))
        .collect();

    let normal =
        |rng: &mut rand_chacha::ChaCha8Rng| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);

    let labels: Vec<f64> = match spec.kind {
        ProblemKind::LeastSquares => {
            let truth: Vec<f64> = (0..d).map(|_| normal(&mut truth_rng)).collect();
            (0..n)
                .map(|s| {
                    dot(&features[s * d..(s + 1) * d], &truth)
                        + spec.noise * normal(&mut noise_rng)
                })
                .collect()
        }
        ProblemKind::Logistic => {
            let truth: Vec<f64> = (0..d).map(|_| normal(&mut truth_rng)).collect();
            (0..n)
                .map(|s| {
                    let p = sigmoid(dot(&features[s * d..(s + 1) * d], &truth));
                    let mut y = f64::from(noise_rng.random::<f64>() < p);
                    if spec.noise > 0.0 && noise_rng.random::<f64>() < spec.noise {
                        y = 1.0 - y;
                    }
                    y
                })
                .collect()
        }
        ProblemKind::TinyMlp => {
            // teacher network with the same architecture
            let h = spec.hidden;
            let teacher: Vec<f64> = (0..mlp_param_dim(d, h))
                .map(|_| normal(&mut truth_rng))
                .collect();
            let (w1, rest) = teacher.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            (0..n)
                .map(|s| {
                    let a = &features[s * d..(s + 1) * d];
                    let mut pred = b2[0];
                    for j in 0..h {
                        pred += w2[j] * (dot(&w1[j * d..(j + 1) * d], a) + b1[j]).tanh();
                    }
                    pred + spec.noise * normal(&mut noise_rng)
                })
                .collect()
        }
    };
    Ok((features, labels, d))
}

/// Load `rows = features, last column = label` CSV data.
fn load_csv(path: &str) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut feat_dim = None;
    for record in reader.records() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::config("csv rows need at least one feature and a label"));
        }
        let dim = record.len() - 1;
        if *feat_dim.get_or_insert(dim) != dim {
            return Err(Error::config("csv rows have inconsistent widths"));
        }
        for (i, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::config(format!("csv field {field:?} is not a number"))
            })?;
            if i == dim {
                labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    let feat_dim = feat_dim.ok_or_else(|| Error::config("csv file is empty"))?;
    Ok((features, labels, feat_dim))
}
