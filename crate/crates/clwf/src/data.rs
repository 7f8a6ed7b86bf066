//! Dataset ingestion, normalization, synthetic corpora, and imputation
//! metrics.
//!
//! CSV layout: a header row of feature names, then rows grouped per series in
//! time order (K columns per row, L rows per series). Missing cells are empty
//! or the literal NaN. Masks travel in sidecar files of the same shape.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A batch of multivariate series with observation masks and per-feature
/// normalization statistics (taken from the training split).
#[derive(Debug, Clone)]
pub struct SeriesBatch {
    /// B states of shape [K, L].
    pub values: Vec<Tensor>,
    /// 0/1 masks of the same shape; 1 marks an observed entry.
    pub obs_mask: Vec<Tensor>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

impl SeriesBatch {
    pub fn new(values: Vec<Tensor>, obs_mask: Vec<Tensor>) -> Result<Self> {
        if values.is_empty() || values.len() != obs_mask.len() {
            return Err(Error::Shape(format!(
                "series batch: {} value tensors vs {} masks",
                values.len(),
                obs_mask.len()
            )));
        }
        let shape = values[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "series batch: states must be K x L, got {shape:?}"
            )));
        }
        for (v, m) in values.iter().zip(obs_mask.iter()) {
            if v.shape() != shape || m.shape() != shape {
                return Err(Error::Shape(
                    "series batch: inconsistent state shapes".to_string(),
                ));
            }
            if m.data().iter().any(|x| *x != 0.0 && *x != 1.0) {
                return Err(Error::Domain(
                    "series batch: mask entries must be 0 or 1".to_string(),
                ));
            }
        }
        let k = shape[0];
        Ok(SeriesBatch {
            values,
            obs_mask,
            feature_means: vec![0.0; k],
            feature_stds: vec![1.0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn k(&self) -> usize {
        self.values[0].shape()[0]
    }

    pub fn l(&self) -> usize {
        self.values[0].shape()[1]
    }

    /// Per-feature mean/std over the observed entries of this batch.
    /// Features with no observations or zero variance get std 1.
    pub fn compute_stats(&mut self) {
        let (k, l) = (self.k(), self.l());
        for feat in 0..k {
            let mut count = 0.0;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for (v, m) in self.values.iter().zip(self.obs_mask.iter()) {
                for t in 0..l {
                    if m.data()[feat * l + t] == 1.0 {
                        let x = v.data()[feat * l + t];
                        count += 1.0;
                        sum += x;
                        sum_sq += x * x;
                    }
                }
            }
            if count == 0.0 {
                self.feature_means[feat] = 0.0;
                self.feature_stds[feat] = 1.0;
                continue;
            }
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            self.feature_means[feat] = mean;
            self.feature_stds[feat] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }

    /// Copy normalization statistics from another batch (the training split).
    pub fn with_stats_from(mut self, other: &SeriesBatch) -> Self {
        self.feature_means = other.feature_means.clone();
        self.feature_stds = other.feature_stds.clone();
        self
    }

    /// Per-feature z-score using self's statistics; unobserved entries are
    /// zeroed so downstream consumers see exactly "value 0, mask 0".
    pub fn normalize(&self) -> Result<SeriesBatch> {
        let (k, l) = (self.k(), self.l());
        let mut values = Vec::with_capacity(self.len());
        for (v, m) in self.values.iter().zip(self.obs_mask.iter()) {
            let mut data = v.data().to_vec();
            for feat in 0..k {
                for t in 0..l {
                    let idx = feat * l + t;
                    if m.data()[idx] == 1.0 {
                        data[idx] = (data[idx] - self.feature_means[feat])
                            / self.feature_stds[feat];
                    } else {
                        data[idx] = 0.0;
                    }
                }
            }
            values.push(Tensor::new(vec![k, l], data)?);
        }
        Ok(SeriesBatch {
            values,
            obs_mask: self.obs_mask.clone(),
            feature_means: self.feature_means.clone(),
            feature_stds: self.feature_stds.clone(),
        })
    }

    /// Inverse of [`SeriesBatch::normalize`] on every entry.
    pub fn denormalize(&self) -> Result<SeriesBatch> {
        let (k, l) = (self.k(), self.l());
        let mut values = Vec::with_capacity(self.len());
        for v in self.values.iter() {
            let mut data = v.data().to_vec();
            for feat in 0..k {
                for t in 0..l {
                    let idx = feat * l + t;
                    data[idx] = data[idx] * self.feature_stds[feat] + self.feature_means[feat];
                }
            }
            values.push(Tensor::new(vec![k, l], data)?);
        }
        Ok(SeriesBatch {
            values,
            obs_mask: self.obs_mask.clone(),
            feature_means: self.feature_means.clone(),
            feature_stds: self.feature_stds.clone(),
        })
    }

    /// Map a single normalized state back to raw units.
    pub fn denormalize_state(&self, state: &Tensor) -> Result<Tensor> {
        let (k, l) = (self.k(), self.l());
        if state.shape() != [k, l] {
            return Err(Error::Shape(format!(
                "denormalize_state: shape {:?}, expected [{k}, {l}]",
                state.shape()
            )));
        }
        let mut data = state.data().to_vec();
        for feat in 0..k {
            for t in 0..l {
                data[feat * l + t] =
                    data[feat * l + t] * self.feature_stds[feat] + self.feature_means[feat];
            }
        }
        Tensor::new(vec![k, l], data)
    }
}

/// Declared CSV shape: K features per row, L rows per series.
#[derive(Debug, Clone, Copy)]
pub struct CsvLayout {
    pub k: usize,
    pub l: usize,
}

fn parse_cell(cell: &str, line: u64) -> Result<Option<f64>> {
    let trimmed = cell.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let v: f64 = trimmed
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: cell '{trimmed}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("line {line}: non-finite value {v}")));
    }
    Ok(Some(v))
}

/// Read a values CSV into a batch. Missing cells get mask 0 and a zero
/// placeholder value.
pub fn load_csv(path: &Path, layout: &CsvLayout) -> Result<SeriesBatch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header_len = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .len();
    if header_len != layout.k {
        return Err(Error::Data(format!(
            "{}: header has {header_len} features, layout declares {}",
            path.display(),
            layout.k
        )));
    }

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != layout.k {
            return Err(Error::Data(format!(
                "line {line}: expected {} cells, found {}",
                layout.k,
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(layout.k);
        for cell in record.iter() {
            row.push(parse_cell(cell, line)?);
        }
        rows.push(row);
    }

    if rows.is_empty() || rows.len() % layout.l != 0 {
        return Err(Error::Data(format!(
            "{}: {} data rows not divisible into series of length {}",
            path.display(),
            rows.len(),
            layout.l
        )));
    }

    let b = rows.len() / layout.l;
    let (k, l) = (layout.k, layout.l);
    let mut values = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for s in 0..b {
        let mut v = vec![0.0; k * l];
        let mut m = vec![0.0; k * l];
        for t in 0..l {
            let row = &rows[s * l + t];
            for (feat, cell) in row.iter().enumerate() {
                if let Some(x) = cell {
                    v[feat * l + t] = *x;
                    m[feat * l + t] = 1.0;
                }
            }
        }
        values.push(Tensor::new(vec![k, l], v)?);
        masks.push(Tensor::new(vec![k, l], m)?);
    }
    SeriesBatch::new(values, masks)
}

/// Write a batch in the same layout; unobserved entries become empty cells.
pub fn save_csv(batch: &SeriesBatch, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (k, l) = (batch.k(), batch.l());
    let header: Vec<String> = (0..k).map(|i| format!("f{i}")).collect();
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (v, m) in batch.values.iter().zip(batch.obs_mask.iter()) {
        for t in 0..l {
            let row: Vec<String> = (0..k)
                .map(|feat| {
                    if m.data()[feat * l + t] == 1.0 {
                        format!("{}", v.data()[feat * l + t])
                    } else {
                        String::new()
                    }
                })
                .collect();
            writer
                .write_record(&row)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read a 0/1 mask sidecar with the same layout as the values CSV.
pub fn load_mask_csv(path: &Path, layout: &CsvLayout) -> Result<Vec<Tensor>> {
    let batch = load_csv(path, layout)?;
    let l = layout.l;
    let mut masks = Vec::with_capacity(batch.len());
    for (v, m) in batch.values.iter().zip(batch.obs_mask.iter()) {
        let mut data = vec![0.0; layout.k * l];
        for idx in 0..data.len() {
            if m.data()[idx] == 0.0 {
                return Err(Error::Data(format!(
                    "{}: mask sidecar has missing cells",
                    path.display()
                )));
            }
            let x = v.data()[idx];
            if x != 0.0 && x != 1.0 {
                return Err(Error::Data(format!(
                    "{}: mask entry {x} is not 0 or 1",
                    path.display()
                )));
            }
            data[idx] = x;
        }
        masks.push(Tensor::new(vec![layout.k, l], data)?);
    }
    Ok(masks)
}

/// Write a 0/1 mask sidecar.
pub fn save_mask_csv(masks: &[Tensor], path: &Path) -> Result<()> {
    if masks.is_empty() {
        return Err(Error::Domain("save_mask_csv: no masks".to_string()));
    }
    let ones: Vec<Tensor> = masks.iter().map(|m| Tensor::full(m.shape(), 1.0)).collect();
    let batch = SeriesBatch::new(masks.to_vec(), ones)?;
    save_csv(&batch, path)
}

/// K from the header row, L = number of data rows (single-series view, which
/// is all entrywise metrics need).
pub fn infer_csv_layout(path: &Path) -> Result<CsvLayout> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let k = header.split(',').count();
    let l = lines.count();
    if l == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(CsvLayout { k, l })
}

/// Write the Monte-Carlo samples sidecar: one block per sample, each block
/// holding every series in the input order, rows in the values-CSV layout.
pub fn save_samples_csv(per_series: &[Vec<Tensor>], path: &Path) -> Result<()> {
    if per_series.is_empty() {
        return Err(Error::Domain("save_samples_csv: no series".to_string()));
    }
    let m = per_series[0].len();
    if per_series.iter().any(|s| s.len() != m) {
        return Err(Error::Shape(
            "save_samples_csv: unequal sample counts across series".to_string(),
        ));
    }
    let shape = per_series[0][0].shape().to_vec();
    let (k, l) = (shape[0], shape[1]);
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    for sample in 0..m {
        writeln!(w, "# sample {sample}")?;
        for series in per_series {
            let state = &series[sample];
            for t in 0..l {
                let row: Vec<String> = (0..k)
                    .map(|feat| format!("{}", state.data()[feat * l + t]))
                    .collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`save_samples_csv`]: per-series lists of sample states.
pub fn load_samples_csv(path: &Path, layout: &CsvLayout) -> Result<Vec<Vec<Tensor>>> {
    let content = std::fs::read_to_string(path)?;
    let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("# sample") {
            blocks.push(Vec::new());
            continue;
        }
        let block = blocks
            .last_mut()
            .ok_or_else(|| Error::Data(format!("line {}: row before any '# sample'", i + 1)))?;
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: bad cell '{c}'", i + 1)))
            })
            .collect::<Result<_>>()?;
        if row.len() != layout.k {
            return Err(Error::Data(format!(
                "line {}: expected {} cells, found {}",
                i + 1,
                layout.k,
                row.len()
            )));
        }
        block.push(row);
    }
    if blocks.is_empty() {
        return Err(Error::Data(format!("{}: no sample blocks", path.display())));
    }
    let rows_per_block = blocks[0].len();
    if blocks.iter().any(|b| b.len() != rows_per_block) || rows_per_block % layout.l != 0 {
        return Err(Error::Data(format!(
            "{}: inconsistent block sizes",
            path.display()
        )));
    }
    let n_series = rows_per_block / layout.l;
    let (k, l) = (layout.k, layout.l);
    let mut per_series: Vec<Vec<Tensor>> = vec![Vec::with_capacity(blocks.len()); n_series];
    for block in &blocks {
        for s in 0..n_series {
            let mut data = vec![0.0; k * l];
            for t in 0..l {
                let row = &block[s * l + t];
                for feat in 0..k {
                    data[feat * l + t] = row[feat];
                }
            }
            per_series[s].push(Tensor::new(vec![k, l], data)?);
        }
    }
    Ok(per_series)
}

/// Built-in synthetic corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// 2-D mixture of two Gaussians at (±2, 0), σ = 0.3; K = 2, L = 1.
    TwoGaussians2d,
    /// K = 4 channels of random-phase/frequency sinusoids, L = 32, with a
    /// fraction of entries held out as evaluation targets.
    SinusoidMix,
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticParams {
    pub n_series: usize,
    /// Fraction of entries masked as evaluation targets (SinusoidMix only).
    pub eval_fraction: f64,
    pub amplitude: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_series: 128,
            eval_fraction: 0.2,
            amplitude: 1.0,
        }
    }
}

/// A synthetic dataset with retained ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    /// Observed view: obs_mask excludes the evaluation targets.
    pub data: SeriesBatch,
    /// Clean values everywhere.
    pub truth: Vec<Tensor>,
    /// 1 at evaluation-target positions.
    pub eval_mask: Vec<Tensor>,
}

pub fn make_synthetic(kind: SyntheticKind, params: &SyntheticParams, seed: u64) -> Result<SyntheticTask> {
    if params.n_series == 0 {
        return Err(Error::Domain("make_synthetic: n_series must be > 0".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::TwoGaussians2d => {
            let mut values = Vec::with_capacity(params.n_series);
            for _ in 0..params.n_series {
                let center = if rng.gen_bool(0.5) { 2.0 } else { -2.0 };
                let noise = Tensor::randn(&[2, 1], 0.3, &mut rng);
                let v = Tensor::new(vec![2, 1], vec![center, 0.0])?.add(&noise)?;
                values.push(v);
            }
            let masks: Vec<Tensor> = values.iter().map(|_| Tensor::full(&[2, 1], 1.0)).collect();
            let eval: Vec<Tensor> = values.iter().map(|_| Tensor::zeros(&[2, 1])).collect();
            let truth = values.clone();
            let data = SeriesBatch::new(values, masks)?;
            Ok(SyntheticTask {
                data,
                truth,
                eval_mask: eval,
            })
        }
        SyntheticKind::SinusoidMix => {
            if !(0.0..1.0).contains(&params.eval_fraction) {
                return Err(Error::Domain(format!(
                    "make_synthetic: eval_fraction {} outside [0, 1)",
                    params.eval_fraction
                )));
            }
            let (k, l) = (4usize, 32usize);
            let mut truth = Vec::with_capacity(params.n_series);
            let mut obs = Vec::with_capacity(params.n_series);
            let mut eval = Vec::with_capacity(params.n_series);
            for _ in 0..params.n_series {
                let mut v = vec![0.0; k * l];
                for feat in 0..k {
                    let freq = rng.gen_range(1.0..4.0);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    for t in 0..l {
                        let x = t as f64 / l as f64;
                        v[feat * l + t] =
                            params.amplitude * (std::f64::consts::TAU * freq * x + phase).sin();
                    }
                }
                let mut e = vec![0.0; k * l];
                for slot in e.iter_mut() {
                    if rng.gen_range(0.0..1.0) < params.eval_fraction {
                        *slot = 1.0;
                    }
                }
                // Imputation training needs at least two conditioning entries.
                let observed = e.iter().filter(|x| **x == 0.0).count();
                if observed < 2 {
                    e[0] = 0.0;
                    e[1] = 0.0;
                }
                let o: Vec<f64> = e.iter().map(|x| 1.0 - x).collect();
                truth.push(Tensor::new(vec![k, l], v)?);
                obs.push(Tensor::new(vec![k, l], o)?);
                eval.push(Tensor::new(vec![k, l], e)?);
            }
            let values: Vec<Tensor> = truth
                .iter()
                .zip(obs.iter())
                .map(|(t, m)| t.mul(m))
                .collect::<Result<_>>()?;
            let data = SeriesBatch::new(values, obs)?;
            Ok(SyntheticTask {
                data,
                truth,
                eval_mask: eval,
            })
        }
    }
}

/// Overlay known observations onto an imputed state: observed positions keep
/// the observation, the rest take the imputation.
pub fn merge_imputation(observed: &Tensor, obs_mask: &Tensor, imputed: &Tensor) -> Result<Tensor> {
    if observed.shape() != imputed.shape() || observed.shape() != obs_mask.shape() {
        return Err(Error::Shape(format!(
            "merge_imputation: shapes differ ({:?}, {:?}, {:?})",
            observed.shape(),
            obs_mask.shape(),
            imputed.shape()
        )));
    }
    let data = observed
        .data()
        .iter()
        .zip(obs_mask.data().iter())
        .zip(imputed.data().iter())
        .map(|((o, m), i)| if *m == 1.0 { *o } else { *i })
        .collect();
    Tensor::new(observed.shape().to_vec(), data)
}

/// Baseline: impute every entry with its feature mean (batch statistics).
pub fn mean_imputation(batch: &SeriesBatch) -> Vec<Tensor> {
    let (k, l) = (batch.k(), batch.l());
    let mut data = vec![0.0; k * l];
    for feat in 0..k {
        for t in 0..l {
            data[feat * l + t] = batch.feature_means[feat];
        }
    }
    let state = Tensor::new(vec![k, l], data).expect("finite stats");
    batch.values.iter().map(|_| state.clone()).collect()
}

/// Imputation quality over evaluation-target entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub count: usize,
}

/// RMSE/MAE (and CRPS when Monte-Carlo samples are supplied) strictly over
/// entries where eval_mask is 1.
pub fn metrics(
    imputed: &[Tensor],
    truth: &[Tensor],
    eval_mask: &[Tensor],
    samples: Option<&[Vec<Tensor>]>,
) -> Result<MetricReport> {
    if imputed.len() != truth.len() || imputed.len() != eval_mask.len() {
        return Err(Error::Shape(format!(
            "metrics: series counts differ ({}, {}, {})",
            imputed.len(),
            truth.len(),
            eval_mask.len()
        )));
    }
    if let Some(s) = samples {
        if s.len() != imputed.len() {
            return Err(Error::Shape(format!(
                "metrics: {} sample sets for {} series",
                s.len(),
                imputed.len()
            )));
        }
    }
    let mut count = 0usize;
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut crps_sum = 0.0;
    for (s_idx, ((imp, tru), mask)) in imputed.iter().zip(truth.iter()).zip(eval_mask.iter()).enumerate() {
        if imp.shape() != tru.shape() || imp.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "metrics: series {s_idx} shapes differ"
            )));
        }
        for idx in 0..imp.len() {
            if mask.data()[idx] != 1.0 {
                continue;
            }
            let err = imp.data()[idx] - tru.data()[idx];
            count += 1;
            sq_sum += err * err;
            abs_sum += err.abs();
            if let Some(sample_sets) = samples {
                let draws = &sample_sets[s_idx];
                let m = draws.len();
                if m == 0 {
                    return Err(Error::Domain(format!(
                        "metrics: series {s_idx} has no samples"
                    )));
                }
                let y = tru.data()[idx];
                let mut term1 = 0.0;
                for d in draws {
                    term1 += (d.data()[idx] - y).abs();
                }
                term1 /= m as f64;
                let mut term2 = 0.0;
                for a in draws {
                    for b in draws {
                        term2 += (a.data()[idx] - b.data()[idx]).abs();
                    }
                }
                term2 /= (m * m) as f64;
                crps_sum += term1 - 0.5 * term2;
            }
        }
    }
    if count == 0 {
        return Err(Error::Domain("metrics: evaluation mask is empty".to_string()));
    }
    Ok(MetricReport {
        rmse: (sq_sum / count as f64).sqrt(),
        mae: abs_sum / count as f64,
        crps: samples.map(|_| crps_sum / count as f64),
        count,
    })
}
