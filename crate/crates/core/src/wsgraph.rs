//! Pre-generated Watts–Strogatz graphs over feature channels and the
//! renormalized aggregator `D^-1/2 (A + I) D^-1/2`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SplitMix64 (Steele, Lea & Flood). Owned here so generated graphs depend
/// on nothing but `(n, k, rho, seed)`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)` without modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub k: usize,
    pub rho: f64,
    pub seed: u64,
}

/// Undirected simple graph; edges are stored sorted with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    params: GenParams,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Validates and builds a graph from an explicit edge list.
    pub fn from_edges(
        n: usize,
        params: GenParams,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if i == j {
                return Err(Error::Config(format!("self-loop on node {i}")));
            }
            if j >= n {
                return Err(Error::Config(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if !set.insert((i, j)) {
                return Err(Error::Config(format!("duplicate edge ({i}, {j})")));
            }
        }
        if 2 * set.len() != n * params.k {
            return Err(Error::Config(format!(
                "{} edges on {n} nodes is not mean degree {}",
                set.len(),
                params.k
            )));
        }
        Ok(Self {
            n,
            params,
            edges: set.into_iter().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> GenParams {
        self.params
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Renames node `i` to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        crate::tensor::check_permutation(perm, self.n)?;
        Self::from_edges(
            self.n,
            self.params,
            self.edges.iter().map(|&(i, j)| (perm[i], perm[j])),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text, &path.display().to_string())
    }

    /// Header `ws n k rho seed`, then one ascending `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let p = self.params;
        let mut s = format!("ws {} {} {} {}\n", self.n, p.k, p.rho, p.seed);
        for &(i, j) in &self.edges {
            writeln!(s, "{i} {j}").unwrap();
        }
        s
    }

    pub fn parse_edge_list(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "ws" {
            return Err(err(
                1,
                format!("expected `ws n k rho seed`, got `{header}`"),
            ));
        }
        let n: usize = fields[1]
            .parse()
            .map_err(|e| err(1, format!("node count: {e}")))?;
        let k: usize = fields[2]
            .parse()
            .map_err(|e| err(1, format!("degree: {e}")))?;
        let rho: f64 = fields[3].parse().map_err(|e| err(1, format!("rho: {e}")))?;
        let seed: u64 = fields[4]
            .parse()
            .map_err(|e| err(1, format!("seed: {e}")))?;

        let mut edges = Vec::new();
        let mut prev: Option<(usize, usize)> = None;
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(err(ln, format!("expected `i j`, got `{line}`")));
            };
            let i: usize = a.parse().map_err(|e| err(ln, format!("node index: {e}")))?;
            let j: usize = b.parse().map_err(|e| err(ln, format!("node index: {e}")))?;
            if i >= j {
                return Err(err(ln, format!("edge ({i}, {j}) must satisfy i < j")));
            }
            if j >= n {
                return Err(err(
                    ln,
                    format!("node index {j} out of range for {n} nodes"),
                ));
            }
            match prev {
                Some(p) if p == (i, j) => {
                    return Err(err(ln, format!("duplicate edge ({i}, {j})")))
                }
                Some(p) if p > (i, j) => {
                    return Err(err(ln, format!("edge ({i}, {j}) out of ascending order")))
                }
                _ => {}
            }
            prev = Some((i, j));
            edges.push((i, j));
        }
        Self::from_edges(n, GenParams { k, rho, seed }, edges).map_err(|e| err(0, e.to_string()))
    }
}

/// Ring lattice on `n` nodes with `k/2` neighbours per side, then each
/// lattice edge `(i, i+j mod n)` is rewired with probability `rho` to
/// `(i, u)`, `u` uniform. Lanes `j = 1..=k/2` are scanned outermost, nodes
/// `i = 0..n` innermost; self-loops and duplicate edges are rejected and
/// redrawn.
pub fn ws_generate(n: usize, k: usize, rho: f64, seed: u64) -> Result<Graph> {
    if k % 2 == 1 {
        return Err(Error::OddDegree(k));
    }
    if k >= n {
        return Err(Error::TooDense { n, k });
    }
    if k < 2 {
        return Err(Error::Config(format!(
            "mean degree must be at least 2, got {k}"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "rewiring probability {rho} outside [0, 1]"
        )));
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in 1..=k / 2 {
            let v = (i + j) % n;
            adj[i].insert(v);
            adj[v].insert(i);
        }
    }
    let mut rng = SplitMix64::new(seed);
    for j in 1..=k / 2 {
        for i in 0..n {
            let v = (i + j) % n;
            if rng.next_f64() >= rho || adj[i].len() >= n - 1 {
                continue;
            }
            let u = loop {
                let u = rng.below(n as u64) as usize;
                if u != i && !adj[i].contains(&u) {
                    break u;
                }
            };
            adj[i].remove(&v);
            adj[v].remove(&i);
            adj[i].insert(u);
            adj[u].insert(i);
        }
    }
    let edges = adj
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.range(i + 1..).map(move |&j| (i, j)));
    Graph::from_edges(n, GenParams { k, rho, seed }, edges)
}

/// Dense symmetric aggregator `T = D^-1/2 (A + I) D^-1/2`, stored in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    n: usize,
    t: Vec<f64>,
}

impl Aggregator {
    pub fn new(g: &Graph) -> Self {
        let n = g.n();
        // degree including the self-loop, so never zero
        let d: Vec<usize> = g.degrees().iter().map(|d| d + 1).collect();
        let mut t = vec![0.0; n * n];
        let mut set = |i: usize, j: usize| t[i * n + j] = 1.0 / ((d[i] * d[j]) as f64).sqrt();
        for i in 0..n {
            set(i, i);
        }
        for &(i, j) in g.edges() {
            set(i, j);
            set(j, i);
        }
        Self { n, t }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.t
    }

    /// `[n, n]` copy at compute precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.n, self.n], &self.t).expect("n*n entries")
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.t[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

pub fn aggregator_matrix(g: &Graph) -> Aggregator {
    Aggregator::new(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeStats {
    pub degrees: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn degree_stats(g: &Graph) -> DegreeStats {
    let degrees = g.degrees();
    let (mean, variance, _) = moments(&degrees);
    let mut histogram = BTreeMap::new();
    for &d in &degrees {
        *histogram.entry(d).or_insert(0) += 1;
    }
    DegreeStats {
        degrees,
        mean,
        variance,
        histogram,
    }
}

/// Mean, population variance and skewness (0 when the variance is 0).
fn moments(xs: &[usize]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<usize>() as f64 / n;
    let m2 = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|&x| (x as f64 - mean).powi(3)).sum::<f64>() / n;
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    (mean, m2, skew)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationRow {
    pub rho: f64,
    /// Mean degree of each generated graph.
    pub graph_means: Vec<f64>,
    pub pooled_variance: f64,
    pub skewness: f64,
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub n: usize,
    pub k: usize,
    pub rows: Vec<ConcentrationRow>,
}

impl ConcentrationReport {
    pub fn to_table(&self) -> String {
        let mut s =
            String::from("rho,graphs,min_mean,max_mean,pooled_variance,skewness,histogram\n");
        for r in &self.rows {
            let min = r.graph_means.iter().copied().fold(f64::INFINITY, f64::min);
            let max = r
                .graph_means
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let hist: Vec<String> = r
                .histogram
                .iter()
                .map(|(d, c)| format!("{d}:{c}"))
                .collect();
            writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{}",
                r.rho,
                r.graph_means.len(),
                min,
                max,
                r.pooled_variance,
                r.skewness,
                hist.join(" ")
            )
            .unwrap();
        }
        s
    }
}

/// Seed of the `index`-th graph in a batch derived from `seed`.
pub fn derived_seed(seed: u64, index: u64) -> u64 {
    SplitMix64::new(seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}

/// Degree statistics of `num_graphs` WS graphs per rewiring probability.
pub fn concentration_experiment(
    n: usize,
    k: usize,
    rhos: &[f64],
    num_graphs: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if num_graphs < 2 {
        return Err(Error::Config(
            "concentration experiment needs at least 2 graphs".into(),
        ));
    }
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let mut pooled = Vec::with_capacity(n * num_graphs);
        let mut graph_means = Vec::with_capacity(num_graphs);
        for g in 0..num_graphs {
            let graph = ws_generate(n, k, rho, derived_seed(seed, g as u64))?;
            let stats = degree_stats(&graph);
            graph_means.push(stats.mean);
            pooled.extend(stats.degrees);
        }
        let (_, pooled_variance, skewness) = moments(&pooled);
        let mut histogram = BTreeMap::new();
        for &d in &pooled {
            *histogram.entry(d).or_insert(0) += 1;
        }
        rows.push(ConcentrationRow {
            rho,
            graph_means,
            pooled_variance,
            skewness,
            histogram,
        });
    }
    Ok(ConcentrationReport { n, k, rows })
}
