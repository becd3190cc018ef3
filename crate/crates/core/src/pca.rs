//! 2-D PCA of sentence representations and noise-dispersion statistics.
//!
//! Input vectors come from an external model dump (one pooled encoder output
//! per sentence). A record is labelled with its language and a variant tag:
//! `seed` for the clean sentence, or the noise operation that produced it
//! (`char_ins`, `word_rep`, ...).
//!
//! Dump format (TSV, UTF-8):
//!
//! ```text
//! #dim=4
//! de	seed	0.12	-0.5	0.33	0.9
//! de	char_ins	0.10	-0.4	0.31	0.8
//! ```

#![allow(clippy::tabs_in_doc_comments)]

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::io::write_atomic;

pub const SEED_VARIANT: &str = "seed";

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least {need} records, got {got}")]
    TooFewRecords { need: usize, got: usize },
    #[error("vectors need at least 2 dimensions, got {0}")]
    TooFewDimensions(usize),
    #[error("all vectors are identical; nothing to project")]
    DegenerateData,
    #[error("record {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: expected {expected} values, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: field {field:?} is not a number")]
    NonNumeric { line: usize, field: String },
    #[error("first line must declare the dimension as `#dim=<d>`")]
    MissingHeader,
    #[error("line {line}: label {lang}/{variant} appears twice")]
    DuplicateLabel {
        line: usize,
        lang: String,
        variant: String,
    },
    #[error("no seed vector for language {0:?}")]
    MissingSeed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub lang: String,
    pub variant: String,
    pub vector: Vec<f64>,
}

impl VectorRecord {
    pub fn new(lang: &str, variant: &str, vector: Vec<f64>) -> Self {
        VectorRecord {
            lang: lang.to_string(),
            variant: variant.to_string(),
            vector,
        }
    }

    pub fn is_seed(&self) -> bool {
        self.variant == SEED_VARIANT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `dim`.
    pub components: [Vec<f64>; 2],
    /// Sample-covariance eigenvalues of the two components, descending.
    pub eigenvalues: [f64; 2],
    /// Trace of the sample covariance (sum of all eigenvalues).
    pub total_variance: f64,
    /// `(lang, variant)` of each fitted record, aligned with `points`.
    pub labels: Vec<(String, String)>,
    pub points: Vec<[f64; 2]>,
}

impl PcaResult {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = v
                .iter()
                .zip(&self.mean)
                .zip(c)
                .map(|((x, m), w)| (x - m) * w)
                .sum();
        }
        out
    }

    /// Maps a 2-D point back into the input space.
    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.mean[j] + p[0] * self.components[0][j] + p[1] * self.components[1][j])
            .collect()
    }

    pub fn explained_variance_ratio(&self) -> [f64; 2] {
        if self.total_variance > 0.0 {
            [
                self.eigenvalues[0] / self.total_variance,
                self.eigenvalues[1] / self.total_variance,
            ]
        } else {
            [0.0, 0.0]
        }
    }
}

fn check_dims(records: &[VectorRecord]) -> Result<usize, PcaError> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    for (index, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(PcaError::DimensionMismatch {
                index,
                expected: dim,
                found: r.vector.len(),
            });
        }
    }
    Ok(dim)
}

/// Flips `v` so its first non-negligible coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Unit vector orthogonal to `v`, from the first standard basis vector that
/// survives Gram-Schmidt.
fn orthogonal_to(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let mut e: Vec<f64> = v.iter().map(|x| -x * v[i]).collect();
            e[i] += 1.0;
            e
        })
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .map(|e| {
            let n = norm(&e);
            e.into_iter().map(|x| x / n).collect()
        })
        .expect("dim >= 2")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fits the top two principal components of the sample covariance.
///
/// Uses a symmetric eigendecomposition of whichever of `XᵀX` (dim × dim) and
/// `XXᵀ` (n × n) is smaller, X being the centred data. In the second case the
/// components are recovered as `Xᵀu / ‖Xᵀu‖`.
pub fn fit_pca(records: &[VectorRecord]) -> Result<PcaResult, PcaError> {
    if records.len() < 3 {
        return Err(PcaError::TooFewRecords {
            need: 3,
            got: records.len(),
        });
    }
    let dim = check_dims(records)?;
    if dim < 2 {
        return Err(PcaError::TooFewDimensions(dim));
    }
    let n = records.len();
    let mut mean = vec![0.0; dim];
    for r in records {
        for (m, x) in mean.iter_mut().zip(&r.vector) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centred = DMatrix::from_fn(n, dim, |i, j| records[i].vector[j] - mean[j]);
    let denom = (n - 1) as f64;
    let total_variance = centred.norm_squared() / denom;
    let scale = centred.amax();
    if scale == 0.0 {
        return Err(PcaError::DegenerateData);
    }

    let gram_side = n < dim;
    let product = if gram_side {
        &centred * centred.transpose()
    } else {
        centred.transpose() * &centred
    };
    let eig = product.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]];
    if top <= 1e-24 * scale * scale * (n * dim) as f64 {
        return Err(PcaError::DegenerateData);
    }

    let mut components: [Vec<f64>; 2] = Default::default();
    let mut eigenvalues = [0.0; 2];
    for k in 0..2 {
        let idx = order[k];
        let mu = eig.eigenvalues[idx].max(0.0);
        let u = eig.eigenvectors.column(idx);
        let mut c: Vec<f64> = if gram_side {
            let v = centred.transpose() * u;
            let len = v.norm();
            if k == 1 && len <= 1e-12 * top.sqrt() {
                orthogonal_to(&components[0])
            } else {
                v.iter().map(|x| x / len).collect()
            }
        } else {
            u.iter().copied().collect()
        };
        fix_sign(&mut c);
        components[k] = c;
        eigenvalues[k] = if mu <= 1e-12 * top { 0.0 } else { mu / denom };
    }

    let mut result = PcaResult {
        mean,
        components,
        eigenvalues,
        total_variance,
        labels: records
            .iter()
            .map(|r| (r.lang.clone(), r.variant.clone()))
            .collect(),
        points: Vec::with_capacity(n),
    };
    result.points = records.iter().map(|r| result.project(&r.vector)).collect();
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LanguageDispersion {
    pub lang: String,
    pub noisy: usize,
    /// Mean Euclidean distance of noisy vectors to the seed, input space.
    pub mean_full: f64,
    /// Same distance measured between 2-D projections.
    pub mean_2d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DispersionStats {
    pub languages: Vec<LanguageDispersion>,
    /// Unweighted mean over languages.
    pub aggregate_full: f64,
    pub aggregate_2d: Option<f64>,
}

impl DispersionStats {
    /// `self / other` on the full-dimension aggregate; above 1 means `self`
    /// is more dispersed.
    pub fn ratio_to(&self, other: &DispersionStats) -> Option<f64> {
        (other.aggregate_full > 0.0).then(|| self.aggregate_full / other.aggregate_full)
    }

    /// Fixed-format block printed by the `dispersion` command.
    pub fn render(&self, name: &str) -> String {
        let mut s = String::new();
        for l in &self.languages {
            let _ = writeln!(
                s,
                "{name}\t{}\tn={}\tfull={:.6}\t2d={}",
                l.lang,
                l.noisy,
                l.mean_full,
                fmt_opt(l.mean_2d)
            );
        }
        let _ = writeln!(
            s,
            "{name}\tALL\tlangs={}\tfull={:.6}\t2d={}",
            self.languages.len(),
            self.aggregate_full,
            fmt_opt(self.aggregate_2d)
        );
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance of each language's noisy vectors to its seed vector.
///
/// Seed records among `noisy` are ignored, so one dump holding both can be
/// passed twice. With `projection`, 2-D distances are reported as well.
pub fn dispersion(
    noisy: &[VectorRecord],
    seeds: &[VectorRecord],
    projection: Option<&PcaResult>,
) -> Result<DispersionStats, PcaError> {
    let mut seed_of: BTreeMap<&str, &VectorRecord> = BTreeMap::new();
    for s in seeds.iter().filter(|r| r.is_seed()) {
        seed_of.entry(s.lang.as_str()).or_insert(s);
    }
    let mut per_lang: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for r in noisy.iter().filter(|r| !r.is_seed()) {
        let seed = seed_of
            .get(r.lang.as_str())
            .ok_or_else(|| PcaError::MissingSeed(r.lang.clone()))?;
        if seed.vector.len() != r.vector.len() {
            return Err(PcaError::DimensionMismatch {
                index: 0,
                expected: seed.vector.len(),
                found: r.vector.len(),
            });
        }
        let e = per_lang.entry(r.lang.as_str()).or_default();
        e.0 += 1;
        e.1 += euclid(&r.vector, &seed.vector);
        if let Some(p) = projection {
            e.2 += euclid(&p.project(&r.vector), &p.project(&seed.vector));
        }
    }
    let languages: Vec<LanguageDispersion> = per_lang
        .into_iter()
        .map(|(lang, (n, full, flat))| LanguageDispersion {
            lang: lang.to_string(),
            noisy: n,
            mean_full: full / n as f64,
            mean_2d: projection.map(|_| flat / n as f64),
        })
        .collect();
    let k = languages.len().max(1) as f64;
    let aggregate_full = languages.iter().map(|l| l.mean_full).sum::<f64>() / k;
    let aggregate_2d =
        projection.map(|_| languages.iter().filter_map(|l| l.mean_2d).sum::<f64>() / k);
    Ok(DispersionStats {
        languages,
        aggregate_full,
        aggregate_2d,
    })
}

fn parse_header(line: &str) -> Option<usize> {
    line.trim().strip_prefix("#dim=")?.trim().parse().ok()
}

pub fn parse_vectors(text: &str) -> Result<Vec<VectorRecord>, PcaError> {
    let mut lines = text.lines().enumerate();
    let dim = lines
        .next()
        .and_then(|(_, l)| parse_header(l))
        .ok_or(PcaError::MissingHeader)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let lang = fields.next().unwrap_or_default();
        let variant = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| PcaError::NonNumeric {
                    line: line_no,
                    field: f.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != dim {
            return Err(PcaError::RaggedRow {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        if !seen.insert((lang.to_string(), variant.to_string())) {
            return Err(PcaError::DuplicateLabel {
                line: line_no,
                lang: lang.to_string(),
                variant: variant.to_string(),
            });
        }
        out.push(VectorRecord::new(lang, variant, values));
    }
    Ok(out)
}

pub fn read_vectors(path: &Path) -> Result<Vec<VectorRecord>, PcaError> {
    let text = fs::read_to_string(path).map_err(|source| PcaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_vectors(&text)
}

pub fn format_vectors(records: &[VectorRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut s = format!("#dim={dim}\n");
    for r in records {
        s.push_str(&r.lang);
        s.push('\t');
        s.push_str(&r.variant);
        for v in &r.vector {
            // shortest round-trip representation
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_vectors(records: &[VectorRecord], path: &Path) -> Result<(), PcaError> {
    write_atomic(path, format_vectors(records).as_bytes()).map_err(|source| PcaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Projection TSV: header `#lang\tvariant\tx\ty`, then one row per record.
pub fn format_projection(result: &PcaResult) -> String {
    let mut s = String::from("#lang\tvariant\tx\ty\n");
    for ((lang, variant), [x, y]) in result.labels.iter().zip(&result.points) {
        let _ = writeln!(s, "{lang}\t{variant}\t{x}\t{y}");
    }
    s
}

pub fn write_projection(result: &PcaResult, path: &Path) -> Result<(), PcaError> {
    write_atomic(path, format_projection(result).as_bytes()).map_err(|source| PcaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_projection(path: &Path) -> Result<Vec<VectorRecord>, PcaError> {
    let text = fs::read_to_string(path).map_err(|source| PcaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    parse_vectors(&format!("#dim=2\n{body}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(lang: &str, variant: &str, v: &[f64]) -> VectorRecord {
        VectorRecord::new(lang, variant, v.to_vec())
    }

    #[test]
    fn collinear_points() {
        let recs: Vec<VectorRecord> = (0..5)
            .map(|t| rec("en", &format!("v{t}"), &[t as f64, t as f64]))
            .collect();
        let p = fit_pca(&recs).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.components[0][0] - h).abs() < 1e-12);
        assert!((p.components[0][1] - h).abs() < 1e-12);
        assert!((p.components[1][0] - h).abs() < 1e-12);
        assert!((p.components[1][1] + h).abs() < 1e-12);
        assert!(p.eigenvalues[1].abs() < 1e-12);
        // variance of t*sqrt(2) over t = 0..4
        assert!((p.eigenvalues[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        let same = vec![
            rec("a", "1", &[1.0, 2.0]),
            rec("a", "2", &[1.0, 2.0]),
            rec("a", "3", &[1.0, 2.0]),
        ];
        assert!(matches!(fit_pca(&same), Err(PcaError::DegenerateData)));
        assert!(matches!(
            fit_pca(&same[..2]),
            Err(PcaError::TooFewRecords { .. })
        ));
        let ragged = vec![
            rec("a", "1", &[1.0, 2.0]),
            rec("a", "2", &[1.0]),
            rec("a", "3", &[0.0, 2.0]),
        ];
        assert!(matches!(
            fit_pca(&ragged),
            Err(PcaError::DimensionMismatch { index: 1, .. })
        ));
        let flat = vec![
            rec("a", "1", &[1.0]),
            rec("a", "2", &[2.0]),
            rec("a", "3", &[3.0]),
        ];
        assert!(matches!(fit_pca(&flat), Err(PcaError::TooFewDimensions(1))));
    }

    #[test]
    fn dispersion_constructed() {
        let mut recs = vec![rec("de", "seed", &[0.0, 0.0])];
        for v in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]] {
            recs.push(VectorRecord::new(
                "de",
                &format!("n{}{}", v[0], v[1]),
                v.to_vec(),
            ));
        }
        let stats = dispersion(&recs, &recs, None).unwrap();
        assert_eq!(stats.languages.len(), 1);
        assert!((stats.aggregate_full - 1.0).abs() < 1e-12);

        let zero = vec![
            rec("fr", "seed", &[3.0, 4.0]),
            rec("fr", "char_ins", &[3.0, 4.0]),
        ];
        assert_eq!(dispersion(&zero, &zero, None).unwrap().aggregate_full, 0.0);
        assert!(matches!(
            dispersion(&zero, &recs, None),
            Err(PcaError::MissingSeed(l)) if l == "fr"
        ));
    }

    #[test]
    fn ratio_needs_positive_baseline() {
        let a = DispersionStats {
            languages: vec![],
            aggregate_full: 2.0,
            aggregate_2d: None,
        };
        let b = DispersionStats {
            languages: vec![],
            aggregate_full: 1.0,
            aggregate_2d: None,
        };
        let z = DispersionStats {
            languages: vec![],
            aggregate_full: 0.0,
            aggregate_2d: None,
        };
        assert_eq!(a.ratio_to(&b), Some(2.0));
        assert_eq!(a.ratio_to(&z), None);
    }

    #[test]
    fn parse_five_rows() {
        let mut text = String::from("#dim=4\n");
        for i in 0..5 {
            text.push_str(&format!("en\tv{i}\t1\t2\t3\t{i}\n"));
        }
        assert_eq!(parse_vectors(&text).unwrap().len(), 5);
    }

    #[test]
    fn parse_errors() {
        let ragged = "#dim=4\nen\tseed\t1\t2\t3\t4\nen\tx\t1\t2\t3\n";
        assert!(matches!(
            parse_vectors(ragged),
            Err(PcaError::RaggedRow {
                line: 3,
                expected: 4,
                found: 3
            })
        ));
        assert!(matches!(
            parse_vectors("en\tseed\t1\n"),
            Err(PcaError::MissingHeader)
        ));
        assert!(matches!(
            parse_vectors("#dim=1\nen\tseed\tabc\n"),
            Err(PcaError::NonNumeric { line: 2, .. })
        ));
        assert!(matches!(
            parse_vectors("#dim=1\nen\tseed\t1\nen\tseed\t2\n"),
            Err(PcaError::DuplicateLabel { line: 3, .. })
        ));
    }

    #[test]
    fn projection_roundtrip_exact() {
        let recs = vec![
            rec("en", "seed", &[0.1, 0.7, -0.3]),
            rec("en", "char_ins", &[0.2, 0.65, -0.1]),
            rec("de", "seed", &[-1.0 / 3.0, 0.2, 0.5]),
            rec("de", "char_del", &[-0.3, 0.1, 0.45]),
        ];
        let p = fit_pca(&recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.tsv");
        write_projection(&p, &path).unwrap();
        let back = read_projection(&path).unwrap();
        for (b, pt) in back.iter().zip(&p.points) {
            assert!((b.vector[0] - pt[0]).abs() <= 1e-12);
            assert!((b.vector[1] - pt[1]).abs() <= 1e-12);
        }
        let vpath = dir.path().join("vec.tsv");
        write_vectors(&recs, &vpath).unwrap();
        assert_eq!(read_vectors(&vpath).unwrap(), recs);
    }
}
