#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtransfer::corpus::{Direction, MultilingualDataset, ParallelCorpus, Split};
use rtransfer::embedding::EmbeddingStore;

/// Mixed-script vocabulary: ASCII words, accented words, CJK, punctuation.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    for w in [
        "the", "cat", "sat", "on", "mat", "école", "naïve", "Straße", "gehören", "事实", "一件",
        "很", "人", "نحن", "は", "です", ",", ".", "?", "don't",
    ] {
        v.push(w.to_string());
    }
    v
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: &[String], max_len: usize) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n)
        .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synthetic_lines(n: usize, seed: u64) -> Vec<String> {
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| random_sentence(&mut rng, &vocab, 30))
        .collect()
}

/// Target side sharing most tokens with the source, so that copying the
/// source scores well above zero BLEU.
pub fn pseudo_translation(src: &str, rng: &mut ChaCha8Rng, vocab: &[String]) -> String {
    let mut toks: Vec<&str> = src.split(' ').collect();
    let i = rng.random_range(0..toks.len());
    toks[i] = vocab[rng.random_range(0..vocab.len())].as_str();
    toks.join(" ")
}

pub fn synthetic_dataset(directions: &[&str], lines: usize, seed: u64) -> MultilingualDataset {
    let vocab = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = MultilingualDataset::new("synthetic");
    for d in directions {
        let dir: Direction = d.parse().unwrap();
        for (split, n) in [
            (Split::Train, lines),
            (Split::Valid, lines / 10 + 1),
            (Split::Test, lines),
        ] {
            let src: Vec<String> = (0..n)
                .map(|_| random_sentence(&mut rng, &vocab, 20))
                .collect();
            let tgt = src
                .iter()
                .map(|s| pseudo_translation(s, &mut rng, &vocab))
                .collect();
            ds.insert(ParallelCorpus::new(dir.clone(), split, src, tgt).unwrap());
        }
    }
    ds
}

/// GloVe-format file with a random vector for every vocabulary word.
pub fn write_embeddings(path: &Path, dim: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    for w in vocabulary() {
        s.push_str(&w);
        for _ in 0..dim {
            let _ = write!(s, " {:.5}", rng.random_range(-1.0..1.0f64));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Reference ranking by exhaustive comparison: score every other row with
/// the dot product of the stored unit vectors, sort all of them by descending
/// score then ascending row, keep the first `k`.
pub fn brute_force_topk(store: &EmbeddingStore, row: usize, k: usize) -> Vec<(usize, f64)> {
    let q = store.vector(row);
    let mut all: Vec<(usize, f64)> = (0..store.len())
        .filter(|&r| r != row)
        .map(|r| {
            let score = q
                .iter()
                .zip(store.vector(r))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            (r, score)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Cosine of two raw f64 vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Random store with deliberate exact ties: every tenth row duplicates an
/// earlier one, and some rows are positive multiples of others.
pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = if i >= 10 && i % 10 == 0 {
            rows[rng.random_range(0..i)].1.clone()
        } else if i >= 10 && i % 10 == 5 {
            rows[rng.random_range(0..i)]
                .1
                .iter()
                .map(|x| x * 2.0)
                .collect()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        rows.push((format!("t{i}"), v));
    }
    rows
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching eigenvectors as columns.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (rp, rq) = (row[p], row[q]);
                    row[p] = c * rp - s * rq;
                    row[q] = s * rp + c * rq;
                }
                #[allow(clippy::needless_range_loop)]
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Sample covariance (n - 1 denominator) of row vectors.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in c.iter_mut() {
        for x in row.iter_mut() {
            *x /= n - 1.0;
        }
    }
    c
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Corpora scored offline by sacrebleu (see fixtures/gen_bleu_oracle.py).
#[derive(serde::Deserialize)]
pub struct OracleCase {
    pub hyps: Vec<String>,
    pub refs: Vec<String>,
    pub bleu: f64,
    pub counts: [u64; 4],
    pub totals: [u64; 4],
    pub sys_len: u64,
    pub ref_len: u64,
}

#[derive(serde::Deserialize)]
pub struct Oracle {
    pub cases: Vec<OracleCase>,
}

pub fn bleu_oracle() -> Oracle {
    serde_json::from_str(&std::fs::read_to_string(fixture("bleu_oracle.json")).unwrap()).unwrap()
}

/// Writes a synthetic dataset, embeddings and an experiment config using the
/// identity-translator stub. Returns the config path.
pub fn setup_experiment(
    root: &Path,
    directions: &[&str],
    attacked: &str,
    lines: usize,
    translate: &str,
) -> PathBuf {
    let ds = synthetic_dataset(directions, lines, 21);
    ds.write_with_manifest(&root.join("data")).unwrap();
    write_embeddings(&root.join("emb.txt"), 8, 5);
    let cfg = root.join("experiment.toml");
    let text = format!(
        r#"manifest = "data/manifest.toml"
attacked_direction = "{attacked}"
output_dir = "run"
global_seed = 42
jobs = 4

[attack]
proportion = 0.1
top_k = 10

[embeddings]
default = "emb.txt"

[hook]
train = "mkdir -p {{model_dir}} && ls {{train_dir}} > {{model_dir}}/files.txt"
translate = "{translate}"
"#
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

pub const IDENTITY_TRANSLATOR: &str = "cp {src_file} {out_file} # {model_dir} {direction}";
