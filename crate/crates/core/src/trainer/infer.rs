use std::path::{Path, PathBuf};

use super::{resize_nearest, resize_to_input, stack_to_tensor, Checkpoint};
use crate::io::{self, tensor_to_mask};
use crate::phase_filters::{build_stack, FilterParams, UltrasoundFrame};
use crate::{Mask, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub surface: Mask,
    pub shadow: Mask,
    /// Files written, if an output directory was given.
    pub files: Option<(PathBuf, PathBuf)>,
}

/// Segments one frame: filter stack at native size, resize to the network
/// input, one forward pass, threshold at 0.5, resize back.
pub fn infer(
    checkpoint: &Checkpoint,
    frame: &UltrasoundFrame,
    params: &FilterParams,
    out_dir: Option<&Path>,
) -> Result<MaskPair> {
    let (h, w) = frame.dim();
    let stack = build_stack(frame, params)?;
    let x = resize_to_input(&stack_to_tensor(&stack));
    let pred = checkpoint.model.predict(&x)?;
    let back = |t: &tch::Tensor| {
        let bin = t.ge(0.5).to_kind(tch::Kind::Float);
        tensor_to_mask(&resize_nearest(&bin, h as i64, w as i64).get(0).get(0))
    };
    let surface = back(&pred.y1_hat);
    let shadow = back(&pred.y2_hat);
    let files = match out_dir {
        Some(dir) => {
            io::create_dir(dir)?;
            let s = dir.join("surface_mask.png");
            let sh = dir.join("shadow_mask.png");
            io::write_mask(&s, &surface)?;
            io::write_mask(&sh, &shadow)?;
            Some((s, sh))
        }
        None => None,
    };
    Ok(MaskPair {
        surface,
        shadow,
        files,
    })
}
