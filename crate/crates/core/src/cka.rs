//! Linear centered kernel alignment between activation matrices: Gram
//! matrices, biased and unbiased HSIC, minibatch CKA, adaptive token pooling,
//! layer-pair heatmaps and the RACT activation-dump format.
//!
//! Unbiased HSIC can be slightly negative on small samples. Those values are
//! propagated as-is, so a CKA value may dip a little below 0.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::volumes::Shape3;
use crate::swinsim::TokenField;

/// Pooled grid used before similarity analysis.
pub const POOL_BINS: Shape3 = [8, 8, 8];

/// Samples × features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer_id: String,
    pub n: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(layer_id: impl Into<String>, n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("activation matrix needs n ≥ 1 and d ≥ 1"));
        }
        if values.len() != n * d {
            return Err(Error::PayloadSize {
                expected: n * d,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite activation at row {}, column {}", i / d, i % d)));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            n,
            d,
            values,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Rows `start..end` as a new matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n {
            return Err(Error::invalid(format!("row range {start}..{end} outside 0..{}", self.n)));
        }
        Ok(Self {
            layer_id: self.layer_id.clone(),
            n: end - start,
            d: self.d,
            values: self.values[start * self.d..end * self.d].to_vec(),
        })
    }

    /// Concatenates matrices with the same width along the sample axis.
    pub fn stack(layer_id: impl Into<String>, parts: &[ActivationMatrix]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
        let mut values = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.d != first.d {
                return Err(Error::invalid(format!("width mismatch: {} vs {}", p.d, first.d)));
            }
            values.extend_from_slice(&p.values);
            n += p.n;
        }
        Self::new(layer_id, n, first.d, values)
    }
}

// ---------------------------------------------------------------------------
// Adaptive pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// One sample per pooled token; width = channels.
    #[default]
    PerToken,
    /// One sample per scan; width = pooled tokens × channels.
    PerScan,
}

/// Input index ranges of the `bins` output cells along an axis of length `extent`.
///
/// When `extent ≥ bins` the ranges tile the axis and the `extent % bins`
/// longer ranges come last. Smaller axes use `floor(i·e/k)..ceil((i+1)·e/k)`.
pub fn bin_ranges(extent: usize, bins: usize) -> Vec<(usize, usize)> {
    if extent >= bins {
        let base = extent / bins;
        let rem = extent % bins;
        let mut out = Vec::with_capacity(bins);
        let mut start = 0;
        for i in 0..bins {
            let len = base + usize::from(i >= bins - rem);
            out.push((start, start + len));
            start += len;
        }
        out
    } else {
        (0..bins)
            .map(|i| (i * extent / bins, ((i + 1) * extent).div_ceil(bins)))
            .collect()
    }
}

/// Adaptive average pooling of a token field to `bins`; output is token-major
/// (x fastest) with `field.dim` channels per pooled token.
pub fn pool_tokens(field: &TokenField, bins: Shape3) -> Result<Vec<f64>> {
    let e = field.extent;
    if e.contains(&0) || field.dim == 0 || field.data.is_empty() {
        return Err(Error::invalid(format!("empty token field {:?}×{}", e, field.dim)));
    }
    if bins.contains(&0) {
        return Err(Error::invalid("pooling bins must be ≥ 1"));
    }
    if field.data.len() != field.tokens() * field.dim {
        return Err(Error::PayloadSize {
            expected: field.tokens() * field.dim,
            found: field.data.len(),
        });
    }
    let c = field.dim;
    let [rx, ry, rz] = [0, 1, 2].map(|a| bin_ranges(e[a], bins[a]));
    let mut out = Vec::with_capacity(bins.iter().product::<usize>() * c);
    let mut acc = vec![0.0f64; c];
    for &(z0, z1) in &rz {
        for &(y0, y1) in &ry {
            for &(x0, x1) in &rx {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let t = x + e[0] * (y + e[1] * z);
                            for (a, v) in acc.iter_mut().zip(field.token(t)) {
                                *a += *v as f64;
                            }
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                out.extend(acc.iter().map(|a| a / count));
            }
        }
    }
    Ok(out)
}

/// Pools one scan's features to [`POOL_BINS`] and shapes them per `mode`.
pub fn pooled_activation(layer_id: impl Into<String>, field: &TokenField, mode: PoolMode) -> Result<ActivationMatrix> {
    let pooled = pool_tokens(field, POOL_BINS)?;
    let cells: usize = POOL_BINS.iter().product();
    match mode {
        PoolMode::PerToken => ActivationMatrix::new(layer_id, cells, field.dim, pooled),
        PoolMode::PerScan => ActivationMatrix::new(layer_id, 1, cells * field.dim, pooled),
    }
}

// ---------------------------------------------------------------------------
// Gram matrices and HSIC
// ---------------------------------------------------------------------------

/// Square n×n kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Gram {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!("gram of order {n} needs {} entries, got {}", n * n, data.len())));
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// `K = M Mᵀ`.
pub fn gram(m: &ActivationMatrix) -> Gram {
    let n = m.n;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ri = m.row(i);
        for j in 0..=i {
            let v: f64 = ri.iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Gram { n, data }
}

fn same_order(k: &Gram, l: &Gram) -> Result<usize> {
    if k.n != l.n {
        return Err(Error::invalid(format!("gram orders differ: {} vs {}", k.n, l.n)));
    }
    Ok(k.n)
}

/// `H = I − 11ᵀ/n`.
pub fn centering_matrix(n: usize) -> Gram {
    let mut data = vec![-1.0 / n as f64; n * n];
    for i in 0..n {
        data[i * n + i] += 1.0;
    }
    Gram { n, data }
}

/// `H K H`, computed by removing row, column and grand means.
pub fn center(k: &Gram) -> Gram {
    let n = k.n;
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| k.data[i * n..(i + 1) * n].iter().sum::<f64>() / nf).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.get(i, j)).sum::<f64>() / nf).collect();
    let grand = row.iter().sum::<f64>() / nf;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = k.get(i, j) - row[i] - col[j] + grand;
        }
    }
    Gram { n, data }
}

/// Biased estimator `tr(K H L H) / (n−1)²`.
pub fn hsic0(k: &Gram, l: &Gram) -> Result<f64> {
    let n = same_order(k, l)?;
    if n < 2 {
        return Err(Error::invalid("biased HSIC needs n ≥ 2"));
    }
    let kc = center(k);
    // tr(Kc L) = Σ_ij Kc_ij L_ji
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += kc.get(i, j) * l.get(j, i);
        }
    }
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

/// Unbiased estimator on diagonal-zeroed kernels:
/// `[tr(K̃L̃) + 1ᵀK̃1·1ᵀL̃1/((n−1)(n−2)) − 2/(n−2)·1ᵀK̃L̃1] / (n(n−3))`.
pub fn hsic1(k: &Gram, l: &Gram) -> Result<f64> {
    let n = same_order(k, l)?;
    if n < 4 {
        return Err(Error::invalid(format!("unbiased HSIC needs n ≥ 4, got {n}")));
    }
    let mut tr = 0.0;
    let mut k_col = vec![0.0; n];
    let mut l_row = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let kij = k.get(i, j);
            let lij = l.get(i, j);
            tr += kij * l.get(j, i);
            k_col[j] += kij;
            l_row[i] += lij;
        }
    }
    let sum_k: f64 = k_col.iter().sum();
    let sum_l: f64 = l_row.iter().sum();
    let cross: f64 = k_col.iter().zip(&l_row).map(|(a, b)| a * b).sum();
    let nf = n as f64;
    let val = tr + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross;
    Ok(val / (nf * (nf - 3.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Biased,
    #[default]
    Unbiased,
}

impl Estimator {
    pub fn hsic(self, k: &Gram, l: &Gram) -> Result<f64> {
        match self {
            Estimator::Biased => hsic0(k, l),
            Estimator::Unbiased => hsic1(k, l),
        }
    }
}

fn ratio(a: f64, b: f64, c: f64) -> Result<f64> {
    let den = b * c;
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate(format!("CKA denominator is {den:e}")));
    }
    Ok(a / den.sqrt())
}

pub fn cka_from_grams(k: &Gram, l: &Gram, est: Estimator) -> Result<f64> {
    ratio(est.hsic(k, l)?, est.hsic(k, k)?, est.hsic(l, l)?)
}

/// Linear CKA between two activation matrices over the same samples.
pub fn linear_cka(m: &ActivationMatrix, n: &ActivationMatrix, est: Estimator) -> Result<f64> {
    if m.n != n.n {
        return Err(Error::invalid(format!("sample counts differ: {} vs {}", m.n, n.n)));
    }
    cka_from_grams(&gram(m), &gram(n), est)
}

// ---------------------------------------------------------------------------
// Minibatch CKA
// ---------------------------------------------------------------------------

/// Running sums of per-batch unbiased HSIC terms. The 1/k factors cancel in
/// the ratio, so plain sums are kept.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MinibatchCka {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub batches: usize,
    widths: Option<(usize, usize)>,
}

impl MinibatchCka {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, m: &ActivationMatrix, n: &ActivationMatrix) -> Result<()> {
        if m.n != n.n {
            return Err(Error::invalid(format!("batch sample counts differ: {} vs {}", m.n, n.n)));
        }
        if m.n < 4 {
            return Err(Error::invalid(format!("batch of {} samples; need ≥ 4", m.n)));
        }
        match self.widths {
            Some(w) if w != (m.d, n.d) => {
                return Err(Error::invalid(format!("batch widths {:?} differ from earlier {:?}", (m.d, n.d), w)));
            }
            _ => self.widths = Some((m.d, n.d)),
        }
        self.update_grams(&gram(m), &gram(n))
    }

    pub fn update_grams(&mut self, k: &Gram, l: &Gram) -> Result<()> {
        self.a += hsic1(k, l)?;
        self.b += hsic1(k, k)?;
        self.c += hsic1(l, l)?;
        self.batches += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MinibatchCka) -> Result<()> {
        if let (Some(a), Some(b)) = (self.widths, other.widths) {
            if a != b {
                return Err(Error::invalid(format!("cannot merge widths {a:?} and {b:?}")));
            }
        }
        self.a += other.a;
        self.b += other.b;
        self.c += other.c;
        self.batches += other.batches;
        self.widths = self.widths.or(other.widths);
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.batches == 0 {
            return Err(Error::Degenerate("no batches accumulated".into()));
        }
        ratio(self.a, self.b, self.c)
    }
}

/// Consecutive row ranges of size `batch` in stored order. A trailing
/// remainder shorter than 4 rows joins the previous batch.
pub fn batch_ranges(n: usize, batch: usize) -> Result<Vec<(usize, usize)>> {
    if batch < 4 {
        return Err(Error::invalid(format!("batch size {batch} < 4")));
    }
    if n < 4 {
        return Err(Error::invalid(format!("{n} samples; need ≥ 4")));
    }
    let mut out: Vec<(usize, usize)> = (0..n).step_by(batch).map(|s| (s, (s + batch).min(n))).collect();
    if let Some(&(s, e)) = out.last() {
        if e - s < 4 && out.len() > 1 {
            out.pop();
            out.last_mut().unwrap().1 = n;
        }
    }
    Ok(out)
}

pub fn minibatch_cka(m: &ActivationMatrix, n: &ActivationMatrix, batch: usize) -> Result<f64> {
    if m.n != n.n {
        return Err(Error::invalid(format!("sample counts differ: {} vs {}", m.n, n.n)));
    }
    let mut acc = MinibatchCka::new();
    for (s, e) in batch_ranges(m.n, batch)? {
        acc.update(&m.rows(s, e)?, &n.rows(s, e)?)?;
    }
    acc.value()
}

// ---------------------------------------------------------------------------
// Layer heatmaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaOptions {
    pub estimator: Estimator,
    /// Minibatch size; `None` computes each cell on all samples at once.
    pub batch: Option<usize>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for CkaOptions {
    fn default() -> Self {
        Self {
            estimator: Estimator::Unbiased,
            batch: Some(64),
            execution: Execution::default(),
        }
    }
}

/// Similarity of every layer of dump A (rows) against every layer of dump B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub layers_a: Vec<String>,
    pub layers_b: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// `values[i][i]`, present when both dumps have the same layer count.
    pub diagonal: Option<Vec<f64>>,
    /// `1 − diagonal`.
    pub drift: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

struct LayerTerms {
    grams: Vec<Gram>,
    self_hsic: f64,
}

fn layer_terms(layer: &ActivationMatrix, ranges: &[(usize, usize)], est: Estimator) -> Result<LayerTerms> {
    let mut grams = Vec::with_capacity(ranges.len());
    let mut self_hsic = 0.0;
    for &(s, e) in ranges {
        let g = if ranges.len() == 1 && s == 0 && e == layer.n {
            gram(layer)
        } else {
            gram(&layer.rows(s, e)?)
        };
        self_hsic += est.hsic(&g, &g)?;
        grams.push(g);
    }
    Ok(LayerTerms { grams, self_hsic })
}

pub fn layer_heatmap(a: &[ActivationMatrix], b: &[ActivationMatrix], opts: &CkaOptions) -> Result<CkaMatrix> {
    let first = a
        .first()
        .or(b.first())
        .ok_or_else(|| Error::invalid("both dumps are empty"))?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("each dump needs at least one layer"));
    }
    let n = first.n;
    if let Some(bad) = a.iter().chain(b).find(|l| l.n != n) {
        return Err(Error::invalid(format!(
            "layer {:?} has {} samples; expected {n} in every layer",
            bad.layer_id, bad.n
        )));
    }
    let ranges = match opts.batch {
        Some(size) => {
            if opts.estimator == Estimator::Biased {
                return Err(Error::invalid("minibatch CKA uses the unbiased estimator"));
            }
            batch_ranges(n, size)?
        }
        None => vec![(0, n)],
    };
    let est = opts.estimator;
    let terms_a = opts.execution.map(a, |l| layer_terms(l, &ranges, est));
    let terms_b = opts.execution.map(b, |l| layer_terms(l, &ranges, est));
    let terms_a: Vec<LayerTerms> = terms_a.into_iter().collect::<Result<_>>()?;
    let terms_b: Vec<LayerTerms> = terms_b.into_iter().collect::<Result<_>>()?;
    let nb = b.len();
    let cells = opts.execution.map_range(a.len() * nb, |idx| {
        let (ta, tb) = (&terms_a[idx / nb], &terms_b[idx % nb]);
        let mut cross = 0.0;
        for (k, l) in ta.grams.iter().zip(&tb.grams) {
            cross += est.hsic(k, l)?;
        }
        ratio(cross, ta.self_hsic, tb.self_hsic)
    });
    let cells: Vec<f64> = cells.into_iter().collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = cells.chunks(nb).map(<[f64]>::to_vec).collect();
    let mut warnings = Vec::new();
    let (diagonal, drift) = if a.len() == nb {
        let d: Vec<f64> = (0..nb).map(|i| values[i][i]).collect();
        let drift = d.iter().map(|v| 1.0 - v).collect();
        (Some(d), Some(drift))
    } else {
        let msg = format!("layer counts differ ({} vs {}); diagonal skipped", a.len(), nb);
        log::warn!("{msg}");
        warnings.push(msg);
        (None, None)
    };
    Ok(CkaMatrix {
        layers_a: a.iter().map(|l| l.layer_id.clone()).collect(),
        layers_b: b.iter().map(|l| l.layer_id.clone()).collect(),
        values,
        diagonal,
        drift,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// RACT activation dumps
// ---------------------------------------------------------------------------

/// JSON header stored as `<name>.ract.json` next to the `<name>.ract.f32` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RactHeader {
    pub layer_id: String,
    /// Position of the layer within its dump.
    pub index: usize,
    pub n: usize,
    pub d: usize,
    pub dtype: String,
}

pub const RACT_HEADER_EXT: &str = ".ract.json";
pub const RACT_PAYLOAD_EXT: &str = ".ract.f32";

fn file_stem(index: usize, layer_id: &str) -> String {
    let clean: String = layer_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{index:03}_{clean}")
}

/// Writes one layer; returns the header path.
pub fn save_layer(dir: &Path, index: usize, layer: &ActivationMatrix) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = file_stem(index, &layer.layer_id);
    let hp = dir.join(format!("{stem}{RACT_HEADER_EXT}"));
    let pp = dir.join(format!("{stem}{RACT_PAYLOAD_EXT}"));
    let header = RactHeader {
        layer_id: layer.layer_id.clone(),
        index,
        n: layer.n,
        d: layer.d,
        dtype: "f32le".into(),
    };
    fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
    let mut bytes = Vec::with_capacity(layer.values.len() * 4);
    for v in &layer.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))?;
    Ok(hp)
}

/// Writes every layer of a dump, in order.
pub fn save_dump(dir: &Path, layers: &[ActivationMatrix]) -> Result<()> {
    for (i, l) in layers.iter().enumerate() {
        save_layer(dir, i, l)?;
    }
    Ok(())
}

pub fn load_layer(header_path: &Path) -> Result<(RactHeader, ActivationMatrix)> {
    let text = fs::read(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: RactHeader = serde_json::from_slice(&text).map_err(|e| Error::Header {
        path: header_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32le" {
        return Err(Error::Header {
            path: header_path.to_path_buf(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let s = header_path.to_string_lossy();
    let stem = s.strip_suffix(RACT_HEADER_EXT).ok_or_else(|| Error::Header {
        path: header_path.to_path_buf(),
        reason: format!("expected a {RACT_HEADER_EXT} file"),
    })?;
    let pp = PathBuf::from(format!("{stem}{RACT_PAYLOAD_EXT}"));
    let raw = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if raw.len() != header.n * header.d * 4 {
        return Err(Error::PayloadSize {
            expected: header.n * header.d,
            found: raw.len() / 4,
        });
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = ActivationMatrix::new(header.layer_id.clone(), header.n, header.d, values)?;
    Ok((header, m))
}

/// Loads every layer in `dir`, ordered by header index.
pub fn load_dump(dir: &Path) -> Result<Vec<ActivationMatrix>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.to_string_lossy().ends_with(RACT_HEADER_EXT) {
            layers.push(load_layer(&path)?);
        }
    }
    if layers.is_empty() {
        return Err(Error::invalid(format!("no {RACT_HEADER_EXT} layers in {}", dir.display())));
    }
    layers.sort_by(|(ha, _), (hb, _)| ha.index.cmp(&hb.index).then_with(|| ha.layer_id.cmp(&hb.layer_id)));
    for w in layers.windows(2) {
        if w[0].0.index == w[1].0.index {
            return Err(Error::invalid(format!(
                "duplicate layer index {} in {}",
                w[0].0.index,
                dir.display()
            )));
        }
    }
    Ok(layers.into_iter().map(|(_, m)| m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, seed: u64) -> ActivationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        ActivationMatrix::new("x", n, d, v).unwrap()
    }

    fn dense_product(a: &Gram, b: &Gram) -> Gram {
        let n = a.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[i * n + j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        Gram { n, data: out }
    }

    #[test]
    fn bin_ranges_split_evenly_with_late_remainder() {
        assert_eq!(bin_ranges(8, 8), (0..8).map(|i| (i, i + 1)).collect::<Vec<_>>());
        assert_eq!(bin_ranges(16, 8)[3], (6, 8));
        let r = bin_ranges(10, 8);
        let lens: Vec<usize> = r.iter().map(|(s, e)| e - s).collect();
        assert_eq!(lens, vec![1, 1, 1, 1, 1, 1, 2, 2]);
        assert_eq!(r.last().unwrap().1, 10);
        assert_eq!(bin_ranges(4, 8), vec![(0, 1), (0, 1), (1, 2), (1, 2), (2, 3), (2, 3), (3, 4), (3, 4)]);
    }

    #[test]
    fn pooling_identity_constant_and_ramp() {
        let mut f = TokenField::zeros([8, 8, 8], 2);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f32 * 0.5;
        }
        let p = pool_tokens(&f, POOL_BINS).unwrap();
        assert!(p.iter().zip(&f.data).all(|(a, b)| *a == *b as f64));

        let mut c = TokenField::zeros([5, 11, 3], 3);
        c.data.iter_mut().for_each(|v| *v = 0.25);
        assert!(pool_tokens(&c, POOL_BINS).unwrap().iter().all(|v| (*v - 0.25).abs() < 1e-12));

        // 16³ ramp: each bin is the mean of a 2³ block
        let e = 16;
        let mut r = TokenField::zeros([e; 3], 1);
        for z in 0..e {
            for y in 0..e {
                for x in 0..e {
                    r.data[x + e * (y + e * z)] = (x + 3 * y + 7 * z) as f32;
                }
            }
        }
        let p = pool_tokens(&r, POOL_BINS).unwrap();
        for (bz, by, bx) in [(0, 0, 0), (2, 5, 7), (7, 7, 7)] {
            let mut s = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += ((2 * bx + dx) + 3 * (2 * by + dy) + 7 * (2 * bz + dz)) as f64;
                    }
                }
            }
            assert_abs_diff_eq!(p[bx + 8 * (by + 8 * bz)], s / 8.0, epsilon = 1e-9);
        }
        assert!(pool_tokens(&TokenField::zeros([0, 4, 4], 2), POOL_BINS).is_err());
    }

    #[test]
    fn pooled_modes_shape() {
        let f = TokenField::zeros([16, 16, 8], 3);
        let t = pooled_activation("s0", &f, PoolMode::PerToken).unwrap();
        assert_eq!((t.n, t.d), (512, 3));
        let s = pooled_activation("s0", &f, PoolMode::PerScan).unwrap();
        assert_eq!((s.n, s.d), (1, 1536));
    }

    #[test]
    fn centering_matches_explicit_matrix_product() {
        let k = gram(&normal(7, 3, 1));
        let h = centering_matrix(7);
        let explicit = dense_product(&dense_product(&h, &k), &h);
        let fast = center(&k);
        for (a, b) in explicit.data.iter().zip(&fast.data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn hsic1_matches_brute_force_expansion() {
        // Direct sum over distinct index tuples from the U-statistic definition.
        let n = 6;
        let k = gram(&normal(n, 2, 2));
        let l = gram(&normal(n, 3, 3));
        let (mut t1, mut t2, mut t3) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                t1 += k.get(i, j) * l.get(i, j);
                for q in 0..n {
                    if q == i || q == j {
                        continue;
                    }
                    t3 += k.get(i, j) * l.get(i, q);
                    for r in 0..n {
                        if r == i || r == j || r == q {
                            continue;
                        }
                        t2 += k.get(i, j) * l.get(q, r);
                    }
                }
            }
        }
        let nf = n as f64;
        let p2 = nf * (nf - 1.0);
        let p3 = p2 * (nf - 2.0);
        let p4 = p3 * (nf - 3.0);
        let oracle = t1 / p2 + t2 / p4 - 2.0 * t3 / p3;
        assert_abs_diff_eq!(hsic1(&k, &l).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn hsic1_requires_four_samples_and_is_positive_on_self() {
        let x = normal(3, 2, 4);
        let k = gram(&x);
        assert!(hsic1(&k, &k).is_err());
        let k = gram(&normal(10, 2, 4));
        assert!(hsic1(&k, &k).unwrap() > 0.0);
    }

    #[test]
    fn cka_invariances_and_symmetry() {
        let x = normal(40, 5, 5);
        let y = normal(40, 3, 6);
        for est in [Estimator::Biased, Estimator::Unbiased] {
            assert_abs_diff_eq!(linear_cka(&x, &x, est).unwrap(), 1.0, epsilon = 1e-12);
            let scaled = ActivationMatrix::new("s", 40, 5, x.values.iter().map(|v| -3.5 * v).collect()).unwrap();
            assert_abs_diff_eq!(linear_cka(&x, &scaled, est).unwrap(), 1.0, epsilon = 1e-9);
            let a = linear_cka(&x, &y, est).unwrap();
            let b = linear_cka(&y, &x, est).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_denominator_errors() {
        let c = ActivationMatrix::new("c", 6, 2, vec![1.0; 12]).unwrap();
        let x = normal(6, 2, 7);
        assert!(matches!(linear_cka(&c, &x, Estimator::Biased), Err(Error::Degenerate(_))));
    }

    #[test]
    fn minibatch_single_batch_equals_full() {
        let x = normal(30, 4, 8);
        let y = normal(30, 6, 9);
        let full = linear_cka(&x, &y, Estimator::Unbiased).unwrap();
        assert_eq!(minibatch_cka(&x, &y, 30).unwrap(), full);
        assert_abs_diff_eq!(minibatch_cka(&x, &x, 8).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn minibatch_merge_is_order_free() {
        let x = normal(32, 4, 10);
        let y = normal(32, 4, 11);
        let mut fwd = MinibatchCka::new();
        let mut parts = Vec::new();
        for (s, e) in batch_ranges(32, 8).unwrap() {
            let mut one = MinibatchCka::new();
            one.update(&x.rows(s, e).unwrap(), &y.rows(s, e).unwrap()).unwrap();
            fwd.merge(&one).unwrap();
            parts.push(one);
        }
        let mut rev = MinibatchCka::new();
        for p in parts.iter().rev() {
            rev.merge(p).unwrap();
        }
        assert_abs_diff_eq!(fwd.value().unwrap(), rev.value().unwrap(), epsilon = 1e-12);
        assert_eq!(fwd.value().unwrap(), minibatch_cka(&x, &y, 8).unwrap());
    }

    #[test]
    fn batch_partition_rules() {
        assert_eq!(batch_ranges(10, 4).unwrap(), vec![(0, 4), (4, 10)]);
        assert_eq!(batch_ranges(12, 4).unwrap().len(), 3);
        assert_eq!(batch_ranges(13, 4).unwrap().last(), Some(&(8, 13)));
        assert!(batch_ranges(10, 3).is_err());
        let mut acc = MinibatchCka::new();
        assert!(acc.update(&normal(3, 2, 1), &normal(3, 2, 2)).is_err());
        acc.update(&normal(5, 2, 1), &normal(5, 2, 2)).unwrap();
        assert!(acc.update(&normal(5, 3, 1), &normal(5, 2, 2)).is_err());
    }

    #[test]
    fn heatmap_self_diagonal_and_mismatch_warning() {
        let layers: Vec<ActivationMatrix> = (0..3)
            .map(|i| {
                let mut m = normal(24, 3 + i, 20 + i as u64);
                m.layer_id = format!("block{i}");
                m
            })
            .collect();
        let opts = CkaOptions {
            batch: Some(8),
            ..CkaOptions::default()
        };
        let h = layer_heatmap(&layers, &layers, &opts).unwrap();
        for d in h.diagonal.as_ref().unwrap() {
            assert_abs_diff_eq!(*d, 1.0, epsilon = 1e-12);
        }
        assert!(h.drift.unwrap().iter().all(|v| v.abs() < 1e-12));
        let h2 = layer_heatmap(&layers, &layers[..2], &opts).unwrap();
        assert_eq!(h2.values.len(), 3);
        assert_eq!(h2.values[0].len(), 2);
        assert!(h2.diagonal.is_none() && h2.warnings.len() == 1);
        let full = CkaOptions {
            batch: None,
            estimator: Estimator::Biased,
            ..CkaOptions::default()
        };
        let h3 = layer_heatmap(&layers, &layers, &full).unwrap();
        assert_abs_diff_eq!(
            h3.values[0][1],
            linear_cka(&layers[0], &layers[1], Estimator::Biased).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ract_round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut layers = Vec::new();
        for (i, name) in ["stage0/block0", "b", "a"].iter().enumerate() {
            let mut m = normal(5, 2 + i, i as u64);
            m.layer_id = name.to_string();
            layers.push(m);
        }
        save_dump(dir.path(), &layers).unwrap();
        let back = load_dump(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in layers.iter().zip(&back) {
            assert_eq!(a.layer_id, b.layer_id);
            assert_eq!((a.n, a.d), (b.n, b.d));
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let payload = dir.path().join(format!("001_b{RACT_PAYLOAD_EXT}"));
        fs::write(&payload, [0u8; 8]).unwrap();
        assert!(matches!(load_dump(dir.path()), Err(Error::PayloadSize { .. })));
    }
}
