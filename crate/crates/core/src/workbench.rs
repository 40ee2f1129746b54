//! Inspection exports: attention matrices of a rollout, a 3-D principal
//! component view of the number embeddings, and a nearest-neighbour score
//! for held-out numbers.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{nee_step, seq2seq_decode_batch, InputEncoding, MaskVector, Model, ModelError, ModelMode};
use crate::numeral::{embed, encode_uint, EmbeddingTable, NumeralError};
use crate::traces::with_end;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeral(#[from] NumeralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Precondition(String),
}

/// Attention row behind each decode step: the pointer distribution for an
/// engine running selection sort, the last cross-attention for the
/// baseline. Rollouts that never terminate stop after `2 L` rows.
pub fn attention_rows(model: &Model, input: &[u64]) -> Result<Vec<Vec<f64>>, WorkbenchError> {
    let tokens = with_end(input);
    match model.config.mode {
        ModelMode::Nee => {
            let mut mask = MaskVector::considering_all(tokens.len());
            let mut rows = Vec::new();
            for _ in 0..2 * tokens.len() {
                if mask.considered_count() == 0 {
                    break;
                }
                let s = nee_step(model, &tokens, &mask)?;
                rows.push(s.pointer_weights);
                if s.value.is_end() {
                    break;
                }
                mask = s.next_mask;
            }
            Ok(rows)
        }
        ModelMode::Seq2seq => Ok(seq2seq_decode_batch(model, &[tokens])?.remove(0).attention),
    }
}

/// Writes `rows` as CSV: a `step,p0,p1,...` header, one line per step.
pub fn write_attention_csv(rows: &[Vec<f64>], path: &Path) -> Result<(), WorkbenchError> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("step".to_string()).chain((0..cols).map(|j| format!("p{j}"))).collect();
    writeln!(f, "{}", header.join(","))?;
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<String> = std::iter::once(k.to_string()).chain(row.iter().map(|v| format!("{v:.17e}"))).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Rollout attention for `input` written to `path`; returns the rows.
pub fn export_attention(model: &Model, input: &[u64], path: &Path) -> Result<Vec<Vec<f64>>, WorkbenchError> {
    let rows = attention_rows(model, input)?;
    write_attention_csv(&rows, path)?;
    Ok(rows)
}

/// Reads a CSV written by [`write_attention_csv`].
pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<f64>>, WorkbenchError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|c| c.parse::<f64>().map_err(|e| WorkbenchError::Precondition(format!("bad cell {c:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// Embedding of every number `0..2^n` as the model's input layer sees it.
pub fn number_embeddings(model: &Model) -> Result<Vec<Vec<f64>>, WorkbenchError> {
    let c = &model.config;
    let count = 1u64 << c.width;
    match c.input_encoding() {
        InputEncoding::Binary => {
            let t = model
                .params
                .get("embed.bits")
                .ok_or_else(|| WorkbenchError::Precondition("checkpoint has no bitwise embedding".into()))?;
            let table = EmbeddingTable::from_tensor(c.width, t)?;
            (0..count).map(|x| Ok(embed(&encode_uint(x, c.width)?, &table)?)).collect()
        }
        InputEncoding::OneHot => {
            let t = model
                .params
                .get("embed.table")
                .ok_or_else(|| WorkbenchError::Precondition("checkpoint has no embedding table".into()))?;
            let d = t.shape()[1];
            Ok((0..count as usize).map(|x| t.data()[x * d..(x + 1) * d].to_vec()).collect())
        }
        InputEncoding::RawBits => Err(WorkbenchError::Precondition("raw-bit inputs have no learned embedding".into())),
    }
}

/// Top principal components of a centred point cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// Unit-length, mutually orthogonal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub coordinates: Vec<Vec<f64>>,
    /// Share of the total variance along each component.
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
    pub mean: Vec<f64>,
    #[serde(default)]
    pub labels: Vec<u64>,
    #[serde(default)]
    pub holdout: Vec<bool>,
}

impl PcaProjection {
    pub fn explained_total(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    /// Mean squared distance between each point and its projection back
    /// from the kept components.
    pub fn reconstruction_error(&self, points: &[Vec<f64>]) -> f64 {
        let mut err = 0.0;
        for (p, c) in points.iter().zip(&self.coordinates) {
            for j in 0..p.len() {
                let back: f64 = self.mean[j] + c.iter().zip(&self.components).map(|(a, v)| a * v[j]).sum::<f64>();
                err += (p[j] - back).powi(2);
            }
        }
        err / points.len() as f64
    }
}

/// Eigen-decomposition of the covariance of `points`, keeping `k`
/// components.
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<PcaProjection, WorkbenchError> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(WorkbenchError::Precondition("need at least two points of equal non-zero dimension".into()));
    }
    if k > d {
        return Err(WorkbenchError::Precondition(format!("{k} components from {d} dimensions")));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(WorkbenchError::Precondition("points have no variance".into()));
    }
    let components: Vec<Vec<f64>> = order[..k].iter().map(|&c| eig.eigenvectors.column(c).iter().copied().collect()).collect();
    let explained_variance_ratio = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0) / total).collect();
    let coordinates = (0..n)
        .map(|i| components.iter().map(|v| (0..d).map(|j| x[(i, j)] * v[j]).sum()).collect())
        .collect();
    Ok(PcaProjection {
        components,
        coordinates,
        explained_variance_ratio,
        total_variance: total,
        mean,
        labels: Vec::new(),
        holdout: Vec::new(),
    })
}

/// 3-D projection of the number embeddings, flagging held-out numbers.
pub fn embeddings_pca(model: &Model, holdout: &BTreeSet<u64>) -> Result<PcaProjection, WorkbenchError> {
    let points = number_embeddings(model)?;
    let mut p = pca(&points, 3)?;
    p.labels = (0..points.len() as u64).collect();
    p.holdout = p.labels.iter().map(|x| holdout.contains(x)).collect();
    Ok(p)
}

/// Writes [`embeddings_pca`] as JSON, or as CSV (`number,holdout,x,y,z`)
/// when the path ends in `.csv`.
pub fn export_embeddings_pca(
    model: &Model,
    holdout: &BTreeSet<u64>,
    path: &Path,
) -> Result<PcaProjection, WorkbenchError> {
    let p = embeddings_pca(model, holdout)?;
    if path.extension().is_some_and(|e| e == "csv") {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "number,holdout,x,y,z")?;
        for ((n, h), c) in p.labels.iter().zip(&p.holdout).zip(&p.coordinates) {
            writeln!(f, "{n},{},{:.17e},{:.17e},{:.17e}", u8::from(*h), c[0], c[1], c[2])?;
        }
        f.flush()?;
    } else {
        std::fs::write(path, serde_json::to_string_pretty(&p).expect("projection serializes"))?;
    }
    Ok(p)
}

fn trained_numbers(count: usize, holdout: &BTreeSet<u64>) -> Result<Vec<u64>, WorkbenchError> {
    if holdout.is_empty() {
        return Err(WorkbenchError::Precondition("holdout set is empty".into()));
    }
    if holdout.iter().any(|&m| m as usize >= count) {
        return Err(WorkbenchError::Precondition("holdout number outside the embedding range".into()));
    }
    let trained: Vec<u64> = (0..count as u64).filter(|x| !holdout.contains(x)).collect();
    if trained.is_empty() {
        return Err(WorkbenchError::Precondition("every number is held out".into()));
    }
    Ok(trained)
}

/// Fraction of held-out numbers `m` whose nearest trained-number
/// embedding belongs to some `m'` with `|m - m'| <= 2`.
pub fn neighbor_score_of(embeddings: &[Vec<f64>], holdout: &BTreeSet<u64>) -> Result<f64, WorkbenchError> {
    let trained = trained_numbers(embeddings.len(), holdout)?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let hits = holdout
        .iter()
        .filter(|&&m| {
            let e = &embeddings[m as usize];
            let nearest = trained
                .iter()
                .min_by(|&&a, &&b| dist(e, &embeddings[a as usize]).total_cmp(&dist(e, &embeddings[b as usize])))
                .expect("trained set is non-empty");
            m.abs_diff(*nearest) <= 2
        })
        .count();
    Ok(hits as f64 / holdout.len() as f64)
}

pub fn neighbor_interpolation_score(model: &Model, holdout: &BTreeSet<u64>) -> Result<f64, WorkbenchError> {
    neighbor_score_of(&number_embeddings(model)?, holdout)
}

/// Expected score when the nearest trained number is uniform over the
/// trained set: the mean share of trained numbers within 2 of each
/// held-out number.
pub fn chance_neighbor_score(count: usize, holdout: &BTreeSet<u64>) -> Result<f64, WorkbenchError> {
    let trained = trained_numbers(count, holdout)?;
    let total: f64 = holdout
        .iter()
        .map(|&m| trained.iter().filter(|&&t| m.abs_diff(t) <= 2).count() as f64 / trained.len() as f64)
        .sum();
    Ok(total / holdout.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    #[test]
    fn rank_three_cloud_is_fully_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| gaussian(&mut rng)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| gaussian(&mut rng)).collect();
                (0..10).map(|j| 4.0 + (0..3).map(|i| c[i] * basis[i][j]).sum::<f64>()).collect()
            })
            .collect();
        let p = pca(&points, 3).unwrap();
        assert!((p.explained_total() - 1.0).abs() < 1e-9);
        assert!(p.reconstruction_error(&points) < 1e-9);
    }

    #[test]
    fn isotropic_cloud_spreads_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<Vec<f64>> = (0..4000).map(|_| (0..24).map(|_| gaussian(&mut rng)).collect()).collect();
        let p = pca(&points, 3).unwrap();
        assert!((p.explained_total() - 3.0 / 24.0).abs() < 0.05, "{}", p.explained_total());
    }

    #[test]
    fn components_are_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vec<f64>> =
            (0..300).map(|_| (0..6).map(|j| (j + 1) as f64 * gaussian(&mut rng)).collect()).collect();
        let p = pca(&points, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
        assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        let expect = (1.0 - p.explained_total()) * p.total_variance;
        assert!((p.reconstruction_error(&points) - expect).abs() < 1e-6);
    }

    #[test]
    fn empty_holdout_is_rejected() {
        let e = vec![vec![0.0]; 8];
        assert!(neighbor_score_of(&e, &BTreeSet::new()).is_err());
    }

    #[test]
    fn ordered_line_embedding_scores_perfectly() {
        let e: Vec<Vec<f64>> = (0..256).map(|x| vec![x as f64, 0.5]).collect();
        let holdout: BTreeSet<u64> = (0..256).filter(|x| x % 3 == 1).collect();
        assert_eq!(neighbor_score_of(&e, &holdout).unwrap(), 1.0);
    }

    #[test]
    fn chance_baseline_is_about_four_over_the_trained_count() {
        let holdout: BTreeSet<u64> = (100..110).collect();
        let c = chance_neighbor_score(256, &holdout).unwrap();
        // Interior held-out numbers have at most four neighbours within 2.
        assert!(c <= 4.0 / 246.0 + 1e-12 && c > 0.0);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = Model::new(ModelConfig::sort_nee(), 0).unwrap();
        for input in [vec![], vec![3, 1, 2]] {
            let rows = attention_rows(&m, &input).unwrap();
            assert!(!rows.is_empty());
            for r in &rows {
                assert_eq!(r.len(), input.len() + 1);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let rows = attention_rows(&m, &[]).unwrap();
        assert!(rows.iter().all(|r| r == &vec![1.0]));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![0.25, 0.75], vec![1.0, 0.0]];
        let p = dir.path().join("a.csv");
        write_attention_csv(&rows, &p).unwrap();
        assert_eq!(read_attention_csv(&p).unwrap(), rows);
    }

    #[test]
    fn untrained_bitwise_embeddings_cover_every_number() {
        let m = Model::new(ModelConfig::add_nee(), 0).unwrap();
        let e = number_embeddings(&m).unwrap();
        assert_eq!(e.len(), 256);
        assert!(e[0].iter().all(|&v| v == 0.0));
        let p = embeddings_pca(&m, &BTreeSet::from([5, 6])).unwrap();
        assert_eq!(p.holdout.iter().filter(|&&h| h).count(), 2);
    }
}
