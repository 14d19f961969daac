//! Synthetic Gaussian-mixture datasets, Dirichlet label-skew partitioning and
//! mini-batch schedules.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::vecmath::RngStream;

/// Number of full redraws `dirichlet_partition` attempts before giving up.
pub const PARTITION_RETRIES: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                found: inputs.len(),
            });
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!("label {l} out of range")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("class {missing} has no samples")));
        }
        Ok(Dataset {
            inputs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the given rows, in the given order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.input_dim)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.input_dim)
            .expect("dataset invariants guarantee a valid batch")
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        class_histogram(self.labels.iter().copied(), self.num_classes)
    }

    /// Writes the dataset as delimited text: a `N,input_dim,num_classes`
    /// header line, then one `label,x_1,...,x_d` line per sample.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{},{},{}", self.len(), self.input_dim, self.num_classes)?;
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i])?;
            for v in self.row(i) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Dataset> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Format("missing header".into()))??;
        let dims: Vec<usize> = header
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad header `{header}`: {e}")))?;
        let [n, input_dim, num_classes] = dims[..] else {
            return Err(Error::Format(format!("header must have 3 fields, got `{header}`")));
        };
        let mut inputs = Vec::with_capacity(n * input_dim);
        let mut labels = Vec::with_capacity(n);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Format(format!("row {}: bad label", lineno + 1)))?;
            let before = inputs.len();
            for f in fields {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("row {}: {e}", lineno + 1)))?;
                inputs.push(v);
            }
            if inputs.len() - before != input_dim {
                return Err(Error::Format(format!(
                    "row {}: expected {input_dim} features, found {}",
                    lineno + 1,
                    inputs.len() - before
                )));
            }
            labels.push(label);
        }
        if labels.len() != n {
            return Err(Error::Format(format!(
                "header declares {n} rows, found {}",
                labels.len()
            )));
        }
        Dataset::new(inputs, labels, input_dim, num_classes)
    }
}

pub(crate) fn class_histogram(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for l in labels {
        counts[l] += 1;
    }
    counts
}

/// Mean of class `c`: a vertex of the unit corner simplex (class 0 at the
/// origin, class `c` at `e_{c-1}`) when the input space has room for it,
/// otherwise a point on the unit circle (or line).
fn class_mean(c: usize, num_classes: usize, input_dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; input_dim];
    if input_dim + 1 >= num_classes {
        if c > 0 {
            mean[c - 1] = 1.0;
        }
    } else if input_dim >= 2 {
        let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
        mean[0] = angle.cos();
        mean[1] = angle.sin();
    } else {
        mean[0] = c as f64 - (num_classes - 1) as f64 / 2.0;
    }
    mean
}

/// Gaussian mixture with one spherical cluster (standard deviation
/// `cluster_spread`) per class. Samples are interleaved by class.
pub fn generate_classification(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    stream: RngStream,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "class count, input_dim and samples_per_class must be >= 1".into(),
        ));
    }
    if !(cluster_spread > 0.0 && cluster_spread.is_finite()) {
        return Err(Error::InvalidArgument("cluster_spread must be positive".into()));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| class_mean(c, num_classes, input_dim))
        .collect();
    let noise = Normal::new(0.0, cluster_spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream.rng();
    let n = num_classes * samples_per_class;
    let mut inputs = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (c, mean) in means.iter().enumerate() {
            inputs.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, input_dim, num_classes)
}

/// Sample indices owned by each client.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub dirichlet_alpha: f64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Per-client label histograms.
    pub fn label_histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| class_histogram(idx.iter().map(|&i| ds.labels()[i]), ds.num_classes()))
            .collect()
    }

    /// Mean total-variation distance between each client's label
    /// distribution and the global one.
    pub fn mean_label_skew(&self, ds: &Dataset) -> f64 {
        let global: Vec<f64> = ds.class_counts().iter().map(|&c| c as f64 / ds.len() as f64).collect();
        let hists = self.label_histograms(ds);
        let total: f64 = hists
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                0.5 * h
                    .iter()
                    .zip(&global)
                    .map(|(&c, g)| (c as f64 / n as f64 - g).abs())
                    .sum::<f64>()
            })
            .sum();
        total / hists.len() as f64
    }
}

fn dirichlet_draw<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // Every gamma draw underflowed (tiny alpha): the limit is a point mass.
        let winner = rng.random_range(0..k);
        p.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = f64::from(u8::from(i == winner)));
    }
    Ok(p)
}

/// Splits each class across clients by Dirichlet(`alpha`) proportions. A draw
/// that leaves any client empty is discarded and redrawn from the next
/// substream.
pub fn dirichlet_partition(ds: &Dataset, num_clients: usize, alpha: f64, stream: RngStream) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument("dirichlet alpha must be positive".into()));
    }
    if num_clients > ds.len() {
        return Err(Error::Partition(format!(
            "cannot give {num_clients} clients a sample each from {} samples",
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for attempt in 0..PARTITION_RETRIES {
        let mut rng = stream.substream(attempt).rng();
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            let mut idx = class_indices.clone();
            idx.shuffle(&mut rng);
            let p = dirichlet_draw(alpha, num_clients, &mut rng)?;
            let n = idx.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (m, pm) in p.iter().enumerate() {
                cum += pm;
                let end = if m + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                assignments[m].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            assignments.iter_mut().for_each(|a| a.sort_unstable());
            return Ok(PartitionPlan {
                assignments,
                dirichlet_alpha: alpha,
            });
        }
    }
    Err(Error::Partition(format!(
        "every client non-empty not achieved after {PARTITION_RETRIES} draws (alpha={alpha}, clients={num_clients})"
    )))
}

/// Shuffles the shard and chunks it; the last chunk may be short. Indices
/// inside each chunk are sorted, so a chunk covering the whole shard
/// reproduces the full-shard summation order exactly.
pub fn batch_indices(shard: &[usize], batch_size: usize, stream: RngStream) -> Result<Vec<Vec<usize>>> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty shard".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut idx = shard.to_vec();
    idx.shuffle(&mut stream.rng());
    Ok(idx
        .chunks(batch_size)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect())
}

pub fn batches(shard: &[usize], ds: &Dataset, batch_size: usize, stream: RngStream) -> Result<Vec<Batch>> {
    batch_indices(shard, batch_size, stream)?
        .iter()
        .map(|c| ds.gather(c))
        .collect()
}
