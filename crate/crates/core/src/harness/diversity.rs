use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fno::FnoModel;
use crate::numerics::Tensor;

/// Per-entry weight-magnitude statistics of one layer across members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCov {
    pub name: String,
    /// Rows index channel pairs `(in, out)`, columns index modes (or output
    /// channels for dense layers).
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub cov: Vec<f64>,
    /// `|w|` per member, each row-major `rows × cols`.
    pub magnitudes: Vec<Vec<f64>>,
}

impl LayerCov {
    pub fn positive_fraction(&self) -> f64 {
        self.cov.iter().filter(|&&v| v > 0.0).count() as f64 / self.cov.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub members: usize,
    pub layers: Vec<LayerCov>,
    /// `‖θ_m − θ_k‖` between projection heads, when the model has several.
    pub head_distances: Option<Vec<Vec<f64>>>,
}

/// `std/mean` across members for every entry (population std). Entries
/// whose mean is zero get 0.
pub fn coefficient_of_variation(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = members.first() else {
        return Err(invalid("no members"));
    };
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(invalid("members have different sizes"));
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mean = members.iter().map(|m| m[i]).sum::<f64>() / k;
            if mean == 0.0 {
                return 0.0;
            }
            let var = members.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / k;
            var.sqrt() / mean.abs()
        })
        .collect())
}

/// `|w|` of spectral weights `[w, w, 2mt, mx, 2]` as a `(w·w) × (2mt·mx)` matrix.
fn spectral_magnitudes(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    let rows = s[0] * s[1];
    let cols = s[2] * s[3];
    let mag = t.data().chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
    (rows, cols, mag)
}

fn layer_cov(name: String, per_member: Vec<(usize, usize, Vec<f64>)>) -> Result<LayerCov> {
    let (rows, cols) = (per_member[0].0, per_member[0].1);
    let magnitudes: Vec<Vec<f64>> = per_member.into_iter().map(|(_, _, m)| m).collect();
    Ok(LayerCov {
        name,
        rows,
        cols,
        cov: coefficient_of_variation(&magnitudes)?,
        magnitudes,
    })
}

pub fn head_distances(model: &FnoModel) -> Vec<Vec<f64>> {
    let flat: Vec<Vec<f64>> = model.params.heads.iter().map(|h| h.flatten()).collect();
    flat.iter()
        .map(|a| {
            flat.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// CoV of every Fourier and pointwise layer across the given members (an
/// ensemble), or across the heads' hidden layers of a single multi-head
/// model, plus pairwise head distances for multi-head models.
pub fn diversity_report(models: &[FnoModel]) -> Result<DiversityReport> {
    let Some(first) = models.first() else {
        return Err(invalid("no models given"));
    };
    let heads = first.config.n_heads;
    if models.len() < 2 && heads < 2 {
        return Err(invalid("diversity needs at least two members or two heads"));
    }
    if models.iter().any(|m| m.config != first.config) {
        return Err(invalid("members must share an architecture"));
    }
    let mut layers = Vec::new();
    if models.len() >= 2 {
        for l in 0..first.params.layers.len() {
            let spec = models
                .iter()
                .map(|m| spectral_magnitudes(&m.params.layers[l].spectral))
                .collect();
            layers.push(layer_cov(format!("layer{l}_spectral"), spec)?);
            let pw = models
                .iter()
                .map(|m| {
                    let w = &m.params.layers[l].pointwise_w;
                    (
                        w.shape()[0],
                        w.shape()[1],
                        w.data().iter().map(|v| v.abs()).collect(),
                    )
                })
                .collect();
            layers.push(layer_cov(format!("layer{l}_pointwise"), pw)?);
        }
    } else {
        let hw = first
            .params
            .heads
            .iter()
            .map(|h| {
                (
                    h.w1.shape()[0],
                    h.w1.shape()[1],
                    h.w1.data().iter().map(|v| v.abs()).collect(),
                )
            })
            .collect();
        layers.push(layer_cov("head_w1".into(), hw)?);
    }
    Ok(DiversityReport {
        members: models.len().max(heads),
        layers,
        head_distances: (heads >= 2).then(|| head_distances(first)),
    })
}

fn matrix_csv(rows: usize, cols: usize, v: &[f64]) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = v[r * cols..(r + 1) * cols]
            .iter()
            .map(|x| format!("{x:.6e}"))
            .collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// `{layer}_cov.csv`, `{layer}_member{k}.csv` heatmaps and
/// `head_distances.csv`. Returns the written paths.
pub fn write_diversity_report(dir: &Path, report: &DiversityReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for l in &report.layers {
        put(
            format!("{}_cov.csv", l.name),
            matrix_csv(l.rows, l.cols, &l.cov),
        )?;
        for (k, m) in l.magnitudes.iter().enumerate() {
            put(
                format!("{}_member{k}.csv", l.name),
                matrix_csv(l.rows, l.cols, m),
            )?;
        }
    }
    if let Some(d) = &report.head_distances {
        let n = d.len();
        let flat: Vec<f64> = d.iter().flatten().copied().collect();
        put("head_distances.csv".into(), matrix_csv(n, n, &flat))?;
    }
    put(
        "summary.json".into(),
        serde_json::to_string_pretty(&summary(report))?,
    )?;
    Ok(written)
}

#[derive(Serialize)]
struct Summary<'a> {
    members: usize,
    positive_cov_fraction: Vec<(&'a str, f64)>,
    mean_head_distance: Option<f64>,
}

fn summary(r: &DiversityReport) -> Summary<'_> {
    Summary {
        members: r.members,
        positive_cov_fraction: r
            .layers
            .iter()
            .map(|l| (l.name.as_str(), l.positive_fraction()))
            .collect(),
        mean_head_distance: r.head_distances.as_ref().map(|d| {
            let n = d.len();
            let s: f64 = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| d[i][j])
                .sum();
            s / (n * (n - 1) / 2) as f64
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;

    fn cfg(n_heads: usize) -> FnoConfig {
        FnoConfig {
            width: 3,
            hidden: 2,
            n_layers: 1,
            modes_t: 2,
            modes_x: 2,
            nt: 8,
            nx: 8,
            n_heads,
            ..FnoConfig::default()
        }
    }

    #[test]
    fn two_sample_hand_case() {
        let (a, b) = (3.0_f64, 1.0_f64);
        let c = coefficient_of_variation(&[vec![a], vec![b]]).unwrap();
        // population std |a−b|/2 over mean (a+b)/2
        assert!((c[0] - (a - b).abs() / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn identical_members_have_zero_cov() {
        let m = FnoModel::new(cfg(1), 4).unwrap();
        let r = diversity_report(&[m.clone(), m]).unwrap();
        assert!(r.layers.iter().all(|l| l.cov.iter().all(|&v| v == 0.0)));
        assert!(r.head_distances.is_none());
        assert_eq!(r.layers[0].rows, 9);
        assert_eq!(r.layers[0].cols, 8);
    }

    #[test]
    fn distinct_seeds_give_positive_cov() {
        let ms: Vec<FnoModel> = (0..3).map(|s| FnoModel::new(cfg(1), s).unwrap()).collect();
        let r = diversity_report(&ms).unwrap();
        assert!(r.layers[0].positive_fraction() > 0.99);
    }

    #[test]
    fn single_head_single_member_is_rejected() {
        assert!(diversity_report(&[FnoModel::new(cfg(1), 0).unwrap()]).is_err());
    }

    #[test]
    fn head_distances_symmetric_with_zero_diagonal() {
        let m = FnoModel::new(cfg(3), 0).unwrap();
        let d = head_distances(&m);
        for i in 0..3 {
            assert_eq!(d[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let files = write_diversity_report(dir.path(), &diversity_report(&[m]).unwrap()).unwrap();
        assert!(files.iter().any(|p| p.ends_with("head_distances.csv")));
    }
}
