//! Network-ready tensors built from phantom samples, and subject-wise splits.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::io::{grid_to_tensor, mask_to_tensor};
use crate::network::INPUT_SIZE;
use crate::phantom::{load_dataset, Sample};
use crate::phase_filters::{build_stack, FilterParams, FilterStack};
use crate::{Error, Result};

/// Filter stacks and masks for a set of samples, resized to the network input
/// size. Inputs are `[N, 4, 224, 224]`, masks `[N, 1, 224, 224]` (f32).
#[derive(Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub y1: Tensor,
    pub y2: Tensor,
    pub groups: Vec<u64>,
    pub ids: Vec<String>,
    /// Identifies the underlying data; shared by every run trained on it.
    pub hash: String,
    pub band_thickness: usize,
}

/// Resizes `[N, C, H, W]` to the network input size (bilinear).
pub fn resize_to_input(x: &Tensor) -> Tensor {
    let s = x.size();
    if s[2] == INPUT_SIZE && s[3] == INPUT_SIZE {
        return x.shallow_clone();
    }
    x.upsample_bilinear2d([INPUT_SIZE, INPUT_SIZE], false, None, None)
}

/// Nearest-neighbour resize of `[N, C, H, W]` masks.
pub fn resize_nearest(x: &Tensor, h: i64, w: i64) -> Tensor {
    let s = x.size();
    if s[2] == h && s[3] == w {
        return x.shallow_clone();
    }
    x.upsample_nearest2d([h, w], None, None)
}

/// `[1, 4, H, W]` float tensor of a stack at its native size.
pub fn stack_to_tensor(stack: &FilterStack) -> Tensor {
    let chans: Vec<Tensor> = stack
        .channels()
        .iter()
        .map(|c| grid_to_tensor(c.view(), Kind::Float))
        .collect();
    Tensor::stack(&chans, 0).unsqueeze(0)
}

fn hash_samples(samples: &[Sample], params: &FilterParams) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(params)?);
    for s in samples {
        for v in s.frame.pixels().iter() {
            h.update(v.to_le_bytes());
        }
        h.update(s.y1.iter().copied().collect::<Vec<u8>>());
        h.update(s.y2.iter().copied().collect::<Vec<u8>>());
    }
    Ok(hex::encode(h.finalize()))
}

impl Dataset {
    /// Builds filter stacks for every sample.
    pub fn from_samples(samples: &[Sample], params: &FilterParams) -> Result<Self> {
        let hash = hash_samples(samples, params)?;
        Self::build(samples, params, hash)
    }

    /// Loads a generated dataset directory; the hash combines the manifest
    /// content hash with the filter parameters.
    pub fn load(dir: &Path, params: &FilterParams) -> Result<Self> {
        let loaded = load_dataset(dir)?;
        let mut h = Sha256::new();
        h.update(loaded.manifest.content_hash.as_bytes());
        h.update(serde_json::to_vec(params)?);
        let hash = hex::encode(h.finalize());
        Self::build(&loaded.samples, params, hash)
    }

    fn build(samples: &[Sample], params: &FilterParams, hash: String) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        let t = samples[0].meta.band_thickness;
        if samples.iter().any(|s| s.meta.band_thickness != t) {
            return Err(Error::Contract(
                "all samples must share one band thickness".into(),
            ));
        }
        let mut xs = Vec::with_capacity(samples.len());
        let mut y1s = Vec::with_capacity(samples.len());
        let mut y2s = Vec::with_capacity(samples.len());
        for s in samples {
            let stack = build_stack(&s.frame, params)?;
            xs.push(resize_to_input(&stack_to_tensor(&stack)));
            let m = |m| mask_to_tensor(m, Kind::Float).unsqueeze(0).unsqueeze(0);
            y1s.push(resize_nearest(&m(&s.y1), INPUT_SIZE, INPUT_SIZE));
            y2s.push(resize_nearest(&m(&s.y2), INPUT_SIZE, INPUT_SIZE));
        }
        Ok(Self {
            inputs: Tensor::cat(&xs, 0),
            y1: Tensor::cat(&y1s, 0),
            y2: Tensor::cat(&y2s, 0),
            groups: samples.iter().map(|s| s.meta.group).collect(),
            ids: samples.iter().map(|s| format!("seed{}", s.meta.seed)).collect(),
            hash,
            band_thickness: t,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `(inputs, y1, y2)` rows at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Tensor) {
        let idx = Tensor::from_slice(&indices.iter().map(|&i| i as i64).collect::<Vec<_>>());
        (
            self.inputs.index_select(0, &idx),
            self.y1.index_select(0, &idx),
            self.y2.index_select(0, &idx),
        )
    }

    /// A new dataset holding only `indices`. The hash records the selection.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("subset is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let (inputs, y1, y2) = self.batch(indices);
        let mut h = Sha256::new();
        h.update(self.hash.as_bytes());
        for &i in indices {
            h.update((i as u64).to_le_bytes());
        }
        Ok(Self {
            inputs,
            y1,
            y2,
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            hash: hex::encode(h.finalize()),
            band_thickness: self.band_thickness,
        })
    }
}

/// Sample indices of a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_groups: Vec<u64>,
    pub test_groups: Vec<u64>,
}

/// Assigns whole groups to train or test so that about `ratio` of the groups
/// train. At least one group lands on each side.
pub fn split_by_subject(groups: &[u64], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let distinct: Vec<u64> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Contract(format!(
            "a subject split needs at least 2 groups, found {}",
            distinct.len()
        )));
    }
    let n = distinct.len();
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let mut shuffled = distinct;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_groups = shuffled[..n_train].to_vec();
    let mut test_groups = shuffled[n_train..].to_vec();
    train_groups.sort_unstable();
    test_groups.sort_unstable();
    let (train, test) = (0..groups.len()).partition(|&i| train_groups.binary_search(&groups[i]).is_ok());
    Ok(Split {
        train,
        test,
        train_groups,
        test_groups,
    })
}
