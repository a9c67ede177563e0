use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;

use super::InversionArtifact;
use crate::dsp::render::write_png_matrix;
use crate::error::{Error, Result};

/// Pseudo-word embeddings sampled along the timestep axis and their
/// pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    /// One embedding per timestep.
    pub rows: Vec<Vec<f64>>,
    pub similarity: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Embeddings at `points` timesteps spread uniformly over `[0, T]`.
pub fn embedding_trajectory(art: &InversionArtifact, points: usize) -> Result<Trajectory> {
    if points < 2 {
        return Err(Error::Input("a trajectory needs at least 2 points".into()));
    }
    let t_max = art.meta.num_steps;
    let timesteps: Vec<usize> = (0..points)
        .map(|i| ((i * t_max) as f64 / (points - 1) as f64).round() as usize)
        .collect();
    let rows: Vec<Vec<f64>> = timesteps
        .iter()
        .map(|&t| Ok(art.pseudo.embedding(t)?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
        .collect::<Result<_>>()?;
    let similarity = rows
        .iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| if i == j { 1.0 } else { cosine(a, b) })
                .collect()
        })
        .collect();
    Ok(Trajectory {
        timesteps,
        rows,
        similarity,
    })
}

impl Trajectory {
    /// Mean similarity between points `lag` apart.
    pub fn lag_mean(&self, lag: usize) -> f64 {
        let n = self.similarity.len();
        if lag >= n {
            return f64::NAN;
        }
        let vals: Vec<f64> = (0..n - lag).map(|i| self.similarity[i][i + lag]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean over dimensions of the variance across timesteps.
    pub fn row_variance(&self) -> f64 {
        let n = self.rows.len() as f64;
        let d = self.rows[0].len();
        (0..d)
            .map(|k| {
                let mean = self.rows.iter().map(|r| r[k]).sum::<f64>() / n;
                self.rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / d as f64
    }

    /// Embedding CSV: header row of timesteps, then one row per dimension.
    pub fn embeddings_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = self.timesteps.iter().map(|t| format!("t{t}")).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for k in 0..self.rows[0].len() {
            let line: Vec<String> = self.rows.iter().map(|r| format!("{:.8}", r[k])).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Similarity CSV with timesteps as the first row and column.
    pub fn similarity_csv(&self) -> String {
        let mut s = String::from("t");
        for t in &self.timesteps {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (t, row) in self.timesteps.iter().zip(&self.similarity) {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v:.8}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `trajectory.csv`, `similarity.csv` and `similarity.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("trajectory.csv"), self.embeddings_csv())?;
        fs::write(dir.join("similarity.csv"), self.similarity_csv())?;
        let n = self.similarity.len();
        let flat: Vec<f32> = self.similarity.iter().flatten().map(|&v| v as f32).collect();
        let lo = flat.iter().copied().fold(f32::INFINITY, f32::min).min(0.999);
        write_png_matrix(&dir.join("similarity.png"), n, n, &flat, lo, 1.0)
    }
}
