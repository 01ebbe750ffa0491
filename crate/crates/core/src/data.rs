//! Synthetic datasets, non-IID partitioning and the dataset text format.
//!
//! File format: the first line is `n input_dim num_classes`; each of the
//! next `n` lines is a label followed by `input_dim` features, separated by
//! single spaces, with features rendered as `%.17g`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::error::{ClientId, Error, Result};
use crate::format::g17;
use crate::models::LabeledSample;
use crate::numeric::{derive_stream, stream_key, RngStream};

const TAG_MEANS: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_DIRICHLET: u64 = 3;
const TAG_IID: u64 = 4;
const TAG_SPLIT: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<LabeledSample>,
    num_classes: usize,
    input_dim: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize, input_dim: usize) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument(
                "num_classes and input_dim must be positive".into(),
            ));
        }
        for s in &samples {
            if s.x.len() != input_dim {
                return Err(Error::DimMismatch {
                    expected: input_dim,
                    got: s.x.len(),
                });
            }
            if s.y >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: s.y,
                    len: num_classes,
                });
            }
        }
        Ok(Self {
            samples,
            num_classes,
            input_dim,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            num_classes: self.num_classes,
            input_dim: self.input_dim,
        })
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    /// Shuffled split into `(train, test)` with `round(n * test_fraction)` test samples.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut derive_stream(seed, stream_key(&[TAG_SPLIT])));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }
}

/// Class-conditional Gaussians `N(μ_c, spread² I)` with unit-norm means drawn
/// uniformly on the sphere. Labels cycle through the classes, so counts
/// differ by at most one, and the sample order is then shuffled.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || input_dim == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 classes and a positive input dimension".into(),
        ));
    }
    if n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "n = {n} is smaller than the number of classes {num_classes}"
        )));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid spread {spread}")));
    }
    let mut rng = derive_stream(seed, stream_key(&[TAG_MEANS]));
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|a| a / norm).collect();
            }
        })
        .collect();

    let mut rng = derive_stream(seed, stream_key(&[TAG_SAMPLES]));
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|y| {
            let x = means[y]
                .iter()
                .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledSample::new(x, y)
        })
        .collect::<Result<_>>()?;
    LabeledDataset::new(samples, num_classes, input_dim)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub concentration: f64,
    pub min_per_client: usize,
    pub seed: u64,
}

/// Client-to-sample-index assignment. Index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: BTreeMap<ClientId, Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.values().map(Vec::len).collect()
    }

    /// True when the index lists are disjoint and cover `0..n` exactly.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for idx in self.assignment.values() {
            for &i in idx {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn from_buckets(mut buckets: Vec<Vec<usize>>) -> Self {
        for b in &mut buckets {
            b.sort_unstable();
        }
        Self {
            assignment: buckets
                .into_iter()
                .enumerate()
                .map(|(u, b)| (ClientId(u), b))
                .collect(),
        }
    }
}

fn check_partition_request(n: usize, m: usize, min_per_client: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if n < m * min_per_client {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot give {m} clients {min_per_client} each"
        )));
    }
    Ok(())
}

/// Moves samples from the largest client (lowest id on ties) to each
/// undersized client, lowest id first, until every client has `min` samples.
fn repair(buckets: &mut [Vec<usize>], min: usize) {
    for u in 0..buckets.len() {
        while buckets[u].len() < min {
            let donor = (0..buckets.len())
                .max_by(|a, b| buckets[*a].len().cmp(&buckets[*b].len()).then(b.cmp(a)))
                .expect("non-empty");
            let moved = buckets[donor].pop().expect("donor holds samples");
            buckets[u].push(moved);
        }
    }
}

fn dirichlet(concentration: f64, m: usize, rng: &mut RngStream) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: all mass on one client
        let mut p = vec![0.0; m];
        p[rng.random_range(0..m)] = 1.0;
        p
    }
}

/// Label-skewed partition: for each class, client proportions are drawn from
/// `Dirichlet(concentration · 1_m)` and every sample of that class is routed
/// to a client drawn from those proportions.
pub fn dirichlet_partition(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    let m = spec.num_clients;
    check_partition_request(dataset.len(), m, spec.min_per_client)?;
    if !(spec.concentration > 0.0) || !spec.concentration.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive and finite, got {}",
            spec.concentration
        )));
    }
    let mut rng = derive_stream(spec.seed, stream_key(&[TAG_DIRICHLET]));
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.y].push(i);
    }
    let mut buckets = vec![Vec::new(); m];
    for members in &by_class {
        let p = dirichlet(spec.concentration, m, &mut rng);
        if members.is_empty() {
            continue;
        }
        let route = WeightedIndex::new(&p).expect("proportions sum to 1");
        for &i in members {
            buckets[route.sample(&mut rng)].push(i);
        }
    }
    repair(&mut buckets, spec.min_per_client);
    Ok(Partition::from_buckets(buckets))
}

/// Shuffled near-equal split; sizes differ by at most one.
pub fn iid_partition(n: usize, num_clients: usize, seed: u64) -> Result<Partition> {
    check_partition_request(n, num_clients, 1)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_stream(seed, stream_key(&[TAG_IID])));
    let mut buckets = vec![Vec::new(); num_clients];
    for (k, i) in idx.into_iter().enumerate() {
        buckets[k % num_clients].push(i);
    }
    Ok(Partition::from_buckets(buckets))
}

/// Shannon entropy (nats) of the label histogram of `indices`; 0 when empty.
pub fn label_entropy(dataset: &LabeledDataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; dataset.num_classes()];
    for &i in indices {
        counts[dataset.samples()[i].y] += 1;
    }
    let n = indices.len() as f64;
    counts
        .into_iter()
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn mean_label_entropy(dataset: &LabeledDataset, partition: &Partition) -> f64 {
    let total: f64 = partition
        .assignment
        .values()
        .map(|idx| label_entropy(dataset, idx))
        .sum();
    total / partition.num_clients() as f64
}

pub fn render_dataset(dataset: &LabeledDataset) -> String {
    let mut out = format!(
        "{} {} {}\n",
        dataset.len(),
        dataset.input_dim(),
        dataset.num_classes()
    );
    for s in dataset.samples() {
        out.push_str(&s.y.to_string());
        for v in &s.x {
            out.push(' ');
            out.push_str(&g17(*v));
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, render_dataset(dataset))?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn parse_dataset(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    let [n, input_dim, num_classes] = fields[..] else {
        return Err(parse_err(1, "header must be `n input_dim num_classes`"));
    };
    if input_dim == 0 || num_classes == 0 {
        return Err(parse_err(1, "input_dim and num_classes must be positive"));
    }

    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let line_no = k + 2;
        let line = lines
            .next()
            .ok_or_else(|| parse_err(line_no, format!("truncated: expected {n} samples, found {k}")))?;
        let mut parts = line.split_whitespace();
        let label: usize = parts
            .next()
            .ok_or_else(|| parse_err(line_no, "empty line"))?
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad label: {e}")))?;
        if label >= num_classes {
            return Err(parse_err(
                line_no,
                format!("label {label} outside header's {num_classes} classes"),
            ));
        }
        let x: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(line_no, format!("bad feature: {e}")))?;
        if x.len() != input_dim {
            return Err(parse_err(
                line_no,
                format!("expected {input_dim} features, found {}", x.len()),
            ));
        }
        let sample = LabeledSample::new(x, label)
            .map_err(|_| parse_err(line_no, "non-finite feature"))?;
        samples.push(sample);
    }
    if let Some((k, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(n + 2 + k, "more samples than the header declares"));
    }
    LabeledDataset::new(samples, num_classes, input_dim)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    parse_dataset(&fs::read_to_string(path)?)
}
