//! Tumor appearance features and k-means subtype clustering with
//! validity-index model selection.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::boundary;
use crate::volumes::{linear_index, MaskVolume, Subtype, Volume};

/// Bumped whenever the feature definitions change.
pub const FEATURE_SET_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; 7] = [
    "tumor_mean",
    "tumor_sd",
    "boundary_gradient",
    "contrast",
    "cnr",
    "log_volume_mm3",
    "background_mean",
];

/// Floor on the background standard deviation in the CNR denominator.
const MIN_BACKGROUND_SD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceFeatures {
    pub tumor_mean: f64,
    pub tumor_sd: f64,
    pub background_mean: f64,
    pub background_sd: f64,
    pub boundary_gradient: f64,
    pub contrast: f64,
    pub cnr: f64,
    pub volume_mm3: f64,
}

impl AppearanceFeatures {
    /// The seven clustering inputs, ordered as `FEATURE_NAMES`.
    pub fn vector(&self) -> [f64; 7] {
        [
            self.tumor_mean,
            self.tumor_sd,
            self.boundary_gradient,
            self.contrast,
            self.cnr,
            self.volume_mm3.ln(),
            self.background_mean,
        ]
    }
}

fn mean_sd_pop(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (mut n, mut s) = (0usize, 0.0);
    for v in vals.clone() {
        n += 1;
        s += v;
    }
    let mean = s / n as f64;
    let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Gradient magnitude by central differences (one-sided at the border),
/// in intensity per mm.
fn gradient_magnitude(v: &Volume, x: usize, y: usize, z: usize) -> f64 {
    let p = [x, y, z];
    let mut g2 = 0.0;
    for a in 0..3 {
        let n = v.shape[a];
        if n < 2 {
            continue;
        }
        let lo = p[a].saturating_sub(1);
        let hi = (p[a] + 1).min(n - 1);
        let mut pl = p;
        let mut ph = p;
        pl[a] = lo;
        ph[a] = hi;
        let d = (v.get(ph[0], ph[1], ph[2]) as f64 - v.get(pl[0], pl[1], pl[2]) as f64)
            / ((hi - lo) as f64 * v.spacing_mm[a]);
        g2 += d * d;
    }
    g2.sqrt()
}

/// Voxels within one voxel (26-neighbourhood) of a mask surface voxel: a
/// band three voxels thick straddling the tumor edge.
pub fn boundary_band(m: &MaskVolume) -> Vec<bool> {
    let surface = boundary(m);
    let s = m.shape;
    let mut band = vec![false; surface.len()];
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                if !surface[linear_index(s, x, y, z)] {
                    continue;
                }
                for zz in z.saturating_sub(1)..=(z + 1).min(s[2] - 1) {
                    for yy in y.saturating_sub(1)..=(y + 1).min(s[1] - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(s[0] - 1) {
                            band[linear_index(s, xx, yy, zz)] = true;
                        }
                    }
                }
            }
        }
    }
    band
}

pub fn extract_features(v: &Volume, m: &MaskVolume) -> Result<AppearanceFeatures> {
    if !v.same_grid(m) {
        return Err(Error::GridMismatch(format!("volume {:?} vs mask {:?}", v.shape, m.shape)));
    }
    if m.count() == 0 {
        return Err(Error::Degenerate("empty tumor mask".into()));
    }
    let tumor = v.data.iter().zip(&m.data).filter(|(_, k)| **k != 0).map(|(x, _)| *x as f64);
    let (tumor_mean, tumor_sd, _) = mean_sd_pop(tumor);
    let bg = v
        .data
        .iter()
        .zip(&m.data)
        .filter(|(x, k)| **k == 0 && **x != 0.0)
        .map(|(x, _)| *x as f64);
    if bg.clone().next().is_none() {
        return Err(Error::Degenerate("no non-zero background voxels".into()));
    }
    let (background_mean, background_sd, _) = mean_sd_pop(bg);
    let band = boundary_band(m);
    let s = v.shape;
    let (mut gsum, mut gn) = (0.0, 0usize);
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                if band[linear_index(s, x, y, z)] {
                    gsum += gradient_magnitude(v, x, y, z);
                    gn += 1;
                }
            }
        }
    }
    let f = AppearanceFeatures {
        tumor_mean,
        tumor_sd,
        background_mean,
        background_sd,
        boundary_gradient: gsum / gn as f64,
        contrast: (tumor_mean - background_mean) / background_mean,
        cnr: (tumor_mean - background_mean) / background_sd.max(MIN_BACKGROUND_SD),
        volume_mm3: m.count() as f64 * m.voxel_volume_mm3(),
    };
    if !f.vector().iter().all(|x| x.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite appearance features {f:?}")));
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative inertia change below which Lloyd iterations stop.
    pub tol: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 5,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn plus_plus_seed<R: Rng>(x: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.random_range(0..x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = x.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..x.len())
        };
        centroids.push(x[pick].clone());
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(x: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> KMeansResult {
    let k = centroids.len();
    let dim = x[0].len();
    let mut labels = vec![0usize; x.len()];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let mut inertia = 0.0;
        for (l, p) in labels.iter_mut().zip(x) {
            *l = nearest(p, &centroids);
            inertia += sq_dist(p, &centroids[*l]);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(x) {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: move it to the point farthest from its centroid.
                let far = (0..x.len())
                    .max_by(|&a, &b| {
                        sq_dist(&x[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&x[b], &centroids[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty data");
                centroids[c] = x[far].clone();
            }
        }
        if prev.is_finite() && (prev - inertia) <= tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
    }
    // Final labels are nearest-centroid under the returned centroids.
    let mut inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(x) {
        *l = nearest(p, &centroids);
        inertia += sq_dist(p, &centroids[*l]);
    }
    KMeansResult {
        centroids,
        labels,
        inertia,
        iterations,
    }
}

/// Best-inertia k-means over seeded k-means++ restarts.
pub fn kmeans(x: &[Vec<f64>], k: usize, opts: &FitOptions) -> Result<KMeansResult> {
    if k == 0 || x.len() < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= n, got k={k}, n={}", x.len())));
    }
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed ^ ((k as u64) << 32));
    let seeds: Vec<u64> = (0..opts.restarts.max(1)).map(|_| master.random()).collect();
    let runs = opts.execution.map(&seeds, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(*s);
        let init = plus_plus_seed(x, k, &mut rng);
        lloyd(x, init, opts.max_iter, opts.tol)
    });
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart"))
}

pub fn silhouette(x: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = x.len();
    let counts = (0..k).map(|c| labels.iter().filter(|l| **l == c).count()).collect::<Vec<_>>();
    let mut total = 0.0;
    for i in 0..n {
        if counts[labels[i]] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(&x[i], &x[j]).sqrt();
            }
        }
        let a = sums[labels[i]] / (counts[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|c| *c != labels[i] && counts[*c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 && b.is_finite() {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Between- over within-cluster dispersion, each per degree of freedom.
/// Returns 1 when the within-cluster dispersion is zero.
pub fn calinski_harabasz(x: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let k = centroids.len();
    let dim = x[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| x.iter().map(|p| p[d]).sum::<f64>() / n as f64).collect();
    let mut within = 0.0;
    let mut between = 0.0;
    for (c, cen) in centroids.iter().enumerate() {
        let members = labels.iter().filter(|l| **l == c).count();
        between += members as f64 * sq_dist(cen, &mean);
    }
    for (p, l) in x.iter().zip(labels) {
        within += sq_dist(p, &centroids[*l]);
    }
    if within == 0.0 {
        return 1.0;
    }
    between * (n - k) as f64 / (within * (k - 1) as f64)
}

pub fn davies_bouldin(x: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let k = centroids.len();
    let mut scatter = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, l) in x.iter().zip(labels) {
        scatter[*l] += sq_dist(p, &centroids[*l]).sqrt();
        counts[*l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            scatter[c] /= counts[c] as f64;
        }
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = sq_dist(&centroids[i], &centroids[j]).sqrt();
            let r = if d > 0.0 {
                (scatter[i] + scatter[j]) / d
            } else if scatter[i] + scatter[j] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    total / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityRow {
    pub k: usize,
    pub inertia: f64,
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KVotes {
    pub silhouette: usize,
    pub calinski_harabasz: usize,
    pub davies_bouldin: usize,
}

impl KVotes {
    /// Majority of the three choices, silhouette when all differ.
    pub fn consensus(&self) -> usize {
        let v = [self.silhouette, self.calinski_harabasz, self.davies_bouldin];
        if v[1] == v[2] {
            v[1]
        } else {
            v[0]
        }
    }

    pub fn unanimous(&self) -> bool {
        self.silhouette == self.calinski_harabasz && self.silhouette == self.davies_bouldin
    }
}

fn pick(rows: &[ValidityRow], score: impl Fn(&ValidityRow) -> f64, larger_better: bool) -> usize {
    let mut best = rows[0];
    for r in &rows[1..] {
        let ord = score(r).total_cmp(&score(&best));
        let better = if larger_better { ord == Ordering::Greater } else { ord == Ordering::Less };
        if better {
            best = *r;
        }
    }
    best.k
}

pub fn select_k(rows: &[ValidityRow]) -> KVotes {
    KVotes {
        silhouette: pick(rows, |r| r.silhouette, true),
        calinski_harabasz: pick(rows, |r| r.calinski_harabasz, true),
        davies_bouldin: pick(rows, |r| r.davies_bouldin, false),
    }
}

/// Standardization plus centroids, persisted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubtypeModel {
    pub feature_set_version: u32,
    /// Indices into `FEATURE_NAMES` of the features kept for clustering.
    pub kept_features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub k: usize,
    /// Centroids in standardized space.
    pub centroids: Vec<Vec<f64>>,
    pub centroid_labels: Vec<Subtype>,
}

impl SubtypeModel {
    pub fn is_fitted(&self) -> bool {
        self.k >= 2 && self.centroids.len() == self.k && self.centroid_labels.len() == self.k
    }

    pub fn standardize(&self, f: &AppearanceFeatures) -> Vec<f64> {
        let v = f.vector();
        self.kept_features
            .iter()
            .enumerate()
            .map(|(i, &fi)| (v[fi] - self.mean[i]) / self.sd[i])
            .collect()
    }

    pub fn assign_cluster(&self, f: &AppearanceFeatures) -> Result<usize> {
        if !self.is_fitted() {
            return Err(Error::Unfitted);
        }
        Ok(nearest(&self.standardize(f), &self.centroids))
    }

    pub fn assign(&self, f: &AppearanceFeatures) -> Result<Subtype> {
        Ok(self.centroid_labels[self.assign_cluster(f)?])
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: SubtypeModel = serde_json::from_slice(&bytes)?;
        if m.feature_set_version != FEATURE_SET_VERSION {
            return Err(Error::invalid(format!(
                "model uses feature set v{}, this build uses v{FEATURE_SET_VERSION}",
                m.feature_set_version
            )));
        }
        Ok(m)
    }
}

pub fn assign(model: &SubtypeModel, f: &AppearanceFeatures) -> Result<Subtype> {
    model.assign(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: SubtypeModel,
    pub validity: Vec<ValidityRow>,
    pub votes: KVotes,
    /// Cluster index per input, in input order.
    pub labels: Vec<usize>,
    pub dropped_features: Vec<String>,
}

/// Centroid labels: the highest-contrast half (rounded up) is B.
fn label_centroids(model_contrast: &[f64]) -> Vec<Subtype> {
    let k = model_contrast.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| model_contrast[b].total_cmp(&model_contrast[a]).then(a.cmp(&b)));
    let mut labels = vec![Subtype::D; k];
    for &i in order.iter().take(k.div_ceil(2)) {
        labels[i] = Subtype::B;
    }
    labels
}

/// Fits the standardization and k-means for every k in range, then keeps
/// the consensus k.
pub fn fit(features: &[AppearanceFeatures], opts: &FitOptions) -> Result<FitReport> {
    if opts.k_min < 2 || opts.k_max < opts.k_min {
        return Err(Error::invalid(format!("invalid k range [{}, {}]", opts.k_min, opts.k_max)));
    }
    if features.len() < opts.k_max + 1 {
        return Err(Error::invalid(format!(
            "fitting up to k={} needs at least {} samples, got {}",
            opts.k_max,
            opts.k_max + 1,
            features.len()
        )));
    }
    let raw: Vec<[f64; 7]> = features.iter().map(AppearanceFeatures::vector).collect();
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    let n = raw.len() as f64;
    let mut kept = Vec::new();
    let (mut mean, mut sd, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    for f in 0..7 {
        let m = raw.iter().map(|r| r[f]).sum::<f64>() / n;
        let s = (raw.iter().map(|r| (r[f] - m).powi(2)).sum::<f64>() / n).sqrt();
        if s > 1e-12 * m.abs().max(1.0) {
            kept.push(f);
            mean.push(m);
            sd.push(s);
        } else {
            log::warn!("feature {} has zero variance and is dropped", FEATURE_NAMES[f]);
            dropped.push(FEATURE_NAMES[f].to_string());
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("every feature has zero variance; nothing to cluster".into()));
    }
    let x: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| kept.iter().enumerate().map(|(i, &f)| (r[f] - mean[i]) / sd[i]).collect())
        .collect();
    // Canonical row order so input permutations cannot change the result.
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();

    let mut fits = Vec::new();
    let mut validity = Vec::new();
    for k in opts.k_min..=opts.k_max {
        let r = kmeans(&xs, k, opts)?;
        validity.push(ValidityRow {
            k,
            inertia: r.inertia,
            silhouette: silhouette(&xs, &r.labels, k),
            calinski_harabasz: calinski_harabasz(&xs, &r.labels, &r.centroids),
            davies_bouldin: davies_bouldin(&xs, &r.labels, &r.centroids),
        });
        fits.push(r);
    }
    let votes = select_k(&validity);
    let k = votes.consensus();
    let best = &fits[k - opts.k_min];
    let contrast_col = kept.iter().position(|&f| f == 3);
    let contrast: Vec<f64> = best
        .centroids
        .iter()
        .map(|c| match contrast_col {
            Some(i) => c[i],
            None => 0.0,
        })
        .collect();
    let mut labels = vec![0usize; x.len()];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = best.labels[pos];
    }
    let model = SubtypeModel {
        feature_set_version: FEATURE_SET_VERSION,
        feature_names: kept.iter().map(|&f| FEATURE_NAMES[f].to_string()).collect(),
        kept_features: kept,
        mean,
        sd,
        k,
        centroids: best.centroids.clone(),
        centroid_labels: label_centroids(&contrast),
    };
    Ok(FitReport {
        model,
        validity,
        votes,
        labels,
        dropped_features: dropped,
    })
}
