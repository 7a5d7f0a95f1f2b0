//! Synthetic datasets, non-IID client partitions and heterogeneity coefficients.

use std::fmt;
use std::io::Read;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Batch;
use crate::error::{argument, structural, Result};
use crate::rng::{tag, CounterRng};
use crate::tensor::Tensor;

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(structural!("{} rows but {} labels", n, labels.len()));
        }
        if n == 0 {
            return Err(argument!("dataset must be nonempty"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(argument!("label {} outside [0, {})", bad, num_classes));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let b = self.batch(indices)?;
        Dataset::new(b.features, b.labels, self.num_classes)
    }

    /// `copies` back-to-back repetitions of the dataset.
    pub fn tiled(&self, copies: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..copies).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }

    /// Reads `label,f0,f1,...` CSV with a header row.
    pub fn from_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| argument!("csv header: {}", e))?.clone();
        if headers.get(0) != Some("label") {
            return Err(argument!("csv header must start with `label`"));
        }
        let d = headers.len() - 1;
        if d == 0 {
            return Err(argument!("csv has no feature columns"));
        }
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| argument!("csv row {}: {}", line + 2, e))?;
            if rec.len() != d + 1 {
                return Err(argument!("csv row {} has {} fields, expected {}", line + 2, rec.len(), d + 1));
            }
            let y: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| argument!("csv row {}: bad label `{}`", line + 2, &rec[0]))?;
            labels.push(y);
            for f in rec.iter().skip(1) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| argument!("csv row {}: bad value `{}`", line + 2, f))?;
                if !v.is_finite() {
                    return Err(argument!("csv row {}: non-finite value", line + 2));
                }
                values.push(v);
            }
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Tensor::new(vec![labels.len(), d], values)?, labels, c)
    }
}

/// Gaussian class blobs: class `c` is centred at `margin · u_c` for a random
/// unit vector `u_c`, with identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    pub d: usize,
    pub num_classes: usize,
    pub centers: Vec<Vec<f64>>,
    seed: u64,
}

impl BlobGenerator {
    pub fn new(d: usize, num_classes: usize, margin: f64, seed: u64) -> Result<Self> {
        if d == 0 || num_classes < 2 {
            return Err(argument!("need d ≥ 1 and at least two classes"));
        }
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(argument!("margin must be finite and nonnegative"));
        }
        let mut rng = CounterRng::from_parts(&[seed, tag::DATASET, 0]);
        let centers = (0..num_classes)
            .map(|_| {
                let mut u = vec![0.0; d];
                rng.fill_normal(&mut u);
                let norm = u.iter().fold(0.0, |a, x| a + x * x).sqrt().max(f64::MIN_POSITIVE);
                u.iter().map(|x| margin * x / norm).collect()
            })
            .collect();
        Ok(Self {
            d,
            num_classes,
            centers,
            seed,
        })
    }

    /// `n` samples, labels cycling `0, 1, …, C−1`; `stream` separates
    /// independent draws from the same blobs.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        if n < self.num_classes {
            return Err(argument!("need n ≥ C ({} < {})", n, self.num_classes));
        }
        let mut rng = CounterRng::from_parts(&[self.seed, tag::DATASET, 1, stream]);
        let mut values = Vec::with_capacity(n * self.d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.num_classes;
            labels.push(c);
            for &mu in &self.centers[c] {
                values.push(mu + rng.next_normal());
            }
        }
        Dataset::new(Tensor::new(vec![n, self.d], values)?, labels, self.num_classes)
    }
}

/// Balanced synthetic classification data.
pub fn synth_classification(n: usize, d: usize, num_classes: usize, margin: f64, seed: u64) -> Result<Dataset> {
    BlobGenerator::new(d, num_classes, margin, seed)?.sample(n, 0)
}

/// How class samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    /// Every client receives the global class proportions (up to rounding).
    Exact,
    /// Per-class client shares drawn from `Dir(α·1_M)`.
    Dirichlet(f64),
}

impl fmt::Display for Concentration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Concentration::Exact => write!(f, "exact"),
            Concentration::Dirichlet(a) => write!(f, "{}", a),
        }
    }
}

impl Serialize for Concentration {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Concentration::Exact => s.serialize_str("exact"),
            Concentration::Dirichlet(a) => s.serialize_f64(*a),
        }
    }
}

impl<'de> Deserialize<'de> for Concentration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) if a > 0.0 && a.is_finite() => Ok(Concentration::Dirichlet(a)),
            Raw::Num(a) => Err(serde::de::Error::custom(format!(
                "dirichlet alpha must be positive, got {}",
                a
            ))),
            Raw::Str(s) if s == "exact" => Ok(Concentration::Exact),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a positive number or \"exact\", got \"{}\"",
                s
            ))),
        }
    }
}

/// Client index lists plus the class counts they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub concentration: Concentration,
    pub client_indices: Vec<Vec<usize>>,
    pub class_counts: Vec<usize>,
    pub client_class_counts: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn total(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// Recomputes counts from the index lists and checks disjointness.
    pub fn verify(&self, ds: &Dataset) -> Result<()> {
        let mut seen = vec![false; ds.len()];
        let mut class_counts = vec![0; ds.num_classes];
        for (m, idx) in self.client_indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(structural!("client {} is empty", m));
            }
            let mut cc = vec![0; ds.num_classes];
            for &i in idx {
                if i >= ds.len() || seen[i] {
                    return Err(structural!("index {} duplicated or out of range", i));
                }
                seen[i] = true;
                cc[ds.labels[i]] += 1;
                class_counts[ds.labels[i]] += 1;
            }
            if cc != self.client_class_counts[m] {
                return Err(structural!("stored class counts of client {} are stale", m));
            }
        }
        if class_counts != self.class_counts {
            return Err(structural!("stored class totals are stale"));
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `shares · total`; ties go to the lower id.
fn apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &m in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[m] += 1;
        left -= 1;
    }
    counts
}

fn dirichlet_shares(rng: &mut CounterRng, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: the limit is a point mass
        let mut one_hot = vec![0.0; m];
        one_hot[rng.below(m)] = 1.0;
        one_hot
    }
}

/// Splits `ds` over `num_clients` clients class by class.
///
/// Each class's samples are apportioned by largest remainder over the drawn
/// (or exact) shares. In Dirichlet mode the class's index order is shuffled
/// first; in exact mode clients take contiguous runs in index order. A client
/// left empty takes one sample from the currently largest client (lowest id
/// on ties), drawn from that client's most populous class.
pub fn dirichlet_partition(
    ds: &Dataset,
    num_clients: usize,
    concentration: Concentration,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(argument!("need at least one client"));
    }
    if num_clients > ds.len() {
        return Err(argument!(
            "{} clients cannot all receive data from {} samples",
            num_clients,
            ds.len()
        ));
    }
    if let Concentration::Dirichlet(a) = concentration {
        if !(a > 0.0) || !a.is_finite() {
            return Err(argument!("dirichlet alpha must be positive, got {}", a));
        }
    }
    let mut rng = CounterRng::from_parts(&[seed, tag::PARTITION]);
    // per client, per class index lists
    let mut buckets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); ds.num_classes]; num_clients];
    #[allow(clippy::needless_range_loop)]
    for c in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        let shares = match concentration {
            Concentration::Exact => vec![1.0 / num_clients as f64; num_clients],
            Concentration::Dirichlet(a) => {
                rng.shuffle(&mut idx);
                dirichlet_shares(&mut rng, a, num_clients)
            }
        };
        let counts = apportion(&shares, idx.len());
        let mut start = 0;
        for (m, &k) in counts.iter().enumerate() {
            buckets[m][c].extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    loop {
        let sizes: Vec<usize> = buckets.iter().map(|b| b.iter().map(Vec::len).sum()).collect();
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let donor = (0..num_clients)
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("at least one client");
        let class = (0..ds.num_classes)
            .max_by(|&a, &b| buckets[donor][a].len().cmp(&buckets[donor][b].len()).then(b.cmp(&a)))
            .expect("at least one class");
        let moved = buckets[donor][class].pop().expect("donor holds samples");
        buckets[empty][class].push(moved);
    }
    let client_class_counts: Vec<Vec<usize>> = buckets
        .iter()
        .map(|b| b.iter().map(Vec::len).collect())
        .collect();
    let client_indices = buckets.into_iter().map(|b| b.concat()).collect();
    Ok(Partition {
        concentration,
        client_indices,
        class_counts: ds.class_counts(),
        client_class_counts,
    })
}

/// Shuffles one client's indices and holds out `floor(test_fraction · n)` for testing.
pub fn train_test_split(indices: &[usize], test_fraction: f64, seed: u64, client: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = indices.to_vec();
    CounterRng::from_parts(&[seed, tag::LOCAL_SPLIT, client]).shuffle(&mut idx);
    let n_test = ((idx.len() as f64) * test_fraction).floor() as usize;
    let n_test = n_test.min(idx.len().saturating_sub(1));
    let test = idx.split_off(idx.len() - n_test);
    (idx, test)
}

/// Heterogeneity coefficients `α_{m,c} = n_c/|D| − n_{m,c}·α_c/|D_m|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasMatrix {
    pub alpha_mc: Vec<Vec<f64>>,
}

impl BiasMatrix {
    pub fn sum_sq(&self) -> f64 {
        self.alpha_mc
            .iter()
            .flatten()
            .fold(0.0, |acc, &a| acc + a * a)
    }

    pub fn is_zero(&self) -> bool {
        self.alpha_mc.iter().flatten().all(|&a| a == 0.0)
    }
}

pub fn bias_coefficients(p: &Partition, alpha_c: &[f64]) -> Result<BiasMatrix> {
    let c = p.class_counts.len();
    if alpha_c.len() != c {
        return Err(argument!("{} class concentrations for {} classes", alpha_c.len(), c));
    }
    let total = p.total() as f64;
    let alpha_mc = p
        .client_class_counts
        .iter()
        .map(|counts| {
            let size = counts.iter().sum::<usize>() as f64;
            (0..c)
                .map(|k| p.class_counts[k] as f64 / total - counts[k] as f64 * alpha_c[k] / size)
                .collect()
        })
        .collect();
    Ok(BiasMatrix { alpha_mc })
}
