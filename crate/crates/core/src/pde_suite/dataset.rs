use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_task_params, Grid, OodRanges, PdeFamily, PdeTask, Range, Split};
use crate::error::{invalid, Error, Result};
use crate::numerics::io::{self, Dtype, TensorMeta};
use crate::numerics::Tensor;

/// Number of input channels: parameter field, x coordinate, t coordinate.
pub const INPUT_CHANNELS: usize = 3;

/// Paired (parameter field, solution field) samples on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: PdeFamily,
    pub split: Split,
    pub seed: u64,
    pub grid: Grid,
    /// `[N, nt, nx, 3]`; channel 0 is the constant parameter field.
    pub inputs: Tensor,
    /// `[N, nt, nx]`.
    pub targets: Tensor,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub family: PdeFamily,
    pub split: Split,
    pub seed: u64,
    pub n: usize,
    pub train_range: Range,
    pub ood_ranges: OodRanges,
    pub grid: Grid,
    pub params: Vec<f64>,
    pub sha256: String,
}

/// Inputs carry the raw parameter value; no normalization is applied.
pub fn input_field(grid: &Grid, c: f64) -> Tensor {
    let (xs, ts) = (grid.xs(), grid.ts());
    Tensor::from_fn(&[grid.nt, grid.nx, INPUT_CHANNELS], |k| {
        let ch = k % INPUT_CHANNELS;
        let p = k / INPUT_CHANNELS;
        match ch {
            0 => c,
            1 => xs[p % grid.nx],
            _ => ts[p / grid.nx],
        }
    })
}

pub fn build_dataset(task: &PdeTask, split: Split, n: usize, seed: u64) -> Result<Dataset> {
    let params = sample_task_params(task, split, n, seed);
    Dataset::from_params(task, split, seed, params)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn from_params(task: &PdeTask, split: Split, seed: u64, params: Vec<f64>) -> Result<Self> {
        let g = task.grid;
        let mut inputs = Vec::with_capacity(params.len() * g.nt * g.nx * INPUT_CHANNELS);
        let mut targets = Vec::with_capacity(params.len() * g.nt * g.nx);
        for &c in &params {
            inputs.extend_from_slice(input_field(&g, c).data());
            targets.extend_from_slice(task.solve(c)?.values.data());
        }
        Ok(Self {
            family: task.family,
            split,
            seed,
            grid: g,
            inputs: Tensor::new(vec![params.len(), g.nt, g.nx, INPUT_CHANNELS], inputs)?,
            targets: Tensor::new(vec![params.len(), g.nt, g.nx], targets)?,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn input(&self, i: usize) -> Tensor {
        self.inputs.outer(i)
    }

    pub fn target(&self, i: usize) -> Tensor {
        self.targets.outer(i)
    }

    /// Gather `(inputs [b, nt, nx, 3], targets [b, nt, nx])` for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let ds = self.subset(indices, self.split)?;
        Ok((ds.inputs, ds.targets))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            let inner: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= self.len() {
                    return Err(invalid(format!(
                        "index {i} out of range for {} samples",
                        self.len()
                    )));
                }
                data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
            }
            Tensor::new(shape, data)
        };
        Ok(Self {
            family: self.family,
            split,
            seed: self.seed,
            grid: self.grid,
            inputs: pick(&self.inputs)?,
            targets: pick(&self.targets)?,
            params: indices.iter().map(|&i| self.params[i]).collect(),
        })
    }

    /// Hold out `1/stride` of the samples, stratified over the parameter:
    /// samples are ranked by parameter value and every `stride`-th one (with
    /// a seed-dependent offset) goes to validation.
    pub fn split_validation(&self, stride: usize, seed: u64) -> Result<(Self, Self)> {
        if stride < 2 {
            return Err(invalid("validation stride must be at least 2"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.params[a].total_cmp(&self.params[b]).then(a.cmp(&b)));
        let offset = (seed % stride as u64) as usize;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (rank, &i) in order.iter().enumerate() {
            if rank % stride == offset {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((
            self.subset(&train, Split::Train)?,
            self.subset(&val, Split::Val)?,
        ))
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(io::encode(&self.inputs));
        h.update(io::encode(&self.targets));
        hex(&h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let task = PdeTask::with_grid(self.family, self.grid.nx, self.grid.nt);
        DatasetManifest {
            family: self.family,
            split: self.split,
            seed: self.seed,
            n: self.len(),
            train_range: task.param_range_train,
            ood_ranges: task.param_ranges_ood,
            grid: self.grid,
            params: self.params.clone(),
            sha256: self.content_hash(),
        }
    }

    pub fn paths(dir: &Path, split: Split) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(format!("{split}_inputs.bin")),
            dir.join(format!("{split}_targets.bin")),
            dir.join(format!("{split}_manifest.json")),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (inp, tgt, man) = Self::paths(dir, self.split);
        let meta = |name: &str, role: &str| TensorMeta {
            name: name.into(),
            dtype: Dtype::Float64,
            role: role.into(),
        };
        io::write_tensor(
            &inp,
            &self.inputs,
            &meta(&format!("{}_inputs", self.split), "input"),
        )?;
        io::write_tensor(
            &tgt,
            &self.targets,
            &meta(&format!("{}_targets", self.split), "target"),
        )?;
        fs::write(man, serde_json::to_vec_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let (inp, tgt, man) = Self::paths(dir, split);
        if !man.exists() {
            return Err(Error::MissingArtifact(man));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&man)?)?;
        let ds = Self {
            family: manifest.family,
            split: manifest.split,
            seed: manifest.seed,
            grid: manifest.grid,
            inputs: io::read_tensor(&inp)?,
            targets: io::read_tensor(&tgt)?,
            params: manifest.params,
        };
        if ds.inputs.shape().first() != Some(&ds.len())
            || ds.targets.shape().first() != Some(&ds.len())
        {
            return Err(Error::Format {
                path: man,
                reason: "tensor extents disagree with the manifest".into(),
            });
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_heat() -> PdeTask {
        PdeTask::with_grid(PdeFamily::Heat, 16, 16)
    }

    #[test]
    fn channels_are_param_x_t() {
        let ds = build_dataset(&small_heat(), Split::Train, 3, 0).unwrap();
        let inp = ds.input(1);
        let g = ds.grid;
        assert_eq!(inp.shape(), &[16, 16, 3]);
        for j in 0..16 {
            for i in 0..16 {
                assert_eq!(inp.get(&[j, i, 0]), ds.params[1]);
                assert_eq!(inp.get(&[j, i, 1]), g.x(i));
                assert_eq!(inp.get(&[j, i, 2]), g.t(j));
            }
        }
    }

    #[test]
    fn train_params_in_range() {
        let ds = build_dataset(
            &PdeTask::with_grid(PdeFamily::Heat, 8, 8),
            Split::Train,
            400,
            1,
        )
        .unwrap();
        assert_eq!(ds.len(), 400);
        assert!(ds.params.iter().all(|k| (1.0..=5.0).contains(k)));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = build_dataset(&small_heat(), Split::OodLarge, 0, 0).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.inputs.shape(), &[0, 16, 16, 3]);
    }

    #[test]
    fn save_is_byte_identical_and_loads_back() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            build_dataset(&small_heat(), Split::Train, 5, 42)
                .unwrap()
                .save(dir)
                .unwrap();
        }
        for name in [
            "train_inputs.bin",
            "train_targets.bin",
            "train_manifest.json",
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let back = Dataset::load(a.path(), Split::Train).unwrap();
        assert_eq!(
            back,
            build_dataset(&small_heat(), Split::Train, 5, 42).unwrap()
        );
    }

    #[test]
    fn validation_split_is_stratified_fifth() {
        let ds = build_dataset(
            &PdeTask::with_grid(PdeFamily::Heat, 8, 8),
            Split::Train,
            400,
            0,
        )
        .unwrap();
        let (train, val) = ds.split_validation(5, 0).unwrap();
        assert_eq!((train.len(), val.len()), (320, 80));
        let mut vp = val.params.clone();
        vp.sort_by(f64::total_cmp);
        assert!(vp[0] < 1.2 && vp[79] > 4.8);
        assert_eq!(val.split, Split::Val);
    }

    #[test]
    fn missing_dataset_names_the_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match Dataset::load(dir.path(), Split::OodSmall) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("ood_small_manifest.json")),
            other => panic!("{other:?}"),
        }
    }
}
