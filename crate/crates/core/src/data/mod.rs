//! Pair samples, annotation files, patch extraction, augmentation and the
//! synthetic scene generator.

pub mod annotations;
pub mod augment;
pub mod patch;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{HeadBox, ImageDims, Vec3};
use crate::nn::Tensor;

pub use annotations::{
    load_annotations, load_dataset, read_patch_container, synthetic_records, write_annotations,
    write_patch_container, AnnotationRecord, PATCH_FILE,
};
pub use augment::{augment_pair, flip_pair, AugmentConfig};
pub use patch::{crop_head_patch, load_image_tensor};
pub use synth::{
    synth_generate_scene, synth_make_dataset, synth_render_head, NegativeMode, SynthNoise,
    SyntheticSceneConfig,
};

/// Two head patches with their boxes and a binary mutual-gaze label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub patch1: Tensor,
    pub patch2: Tensor,
    pub box1: HeadBox,
    pub box2: HeadBox,
    pub dims: ImageDims,
    pub label: u8,
    pub true_gaze1: Option<Vec3>,
    pub true_gaze2: Option<Vec3>,
}

impl PairSample {
    pub fn swap_heads(&mut self) {
        std::mem::swap(&mut self.patch1, &mut self.patch2);
        std::mem::swap(&mut self.box1, &mut self.box2);
        std::mem::swap(&mut self.true_gaze1, &mut self.true_gaze2);
    }
}

/// Disjoint index sets covering `0..n`, sized by `fractions` (which must sum
/// to 1). Boundaries are rounded cumulative counts of a seeded permutation.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let (mut acc, mut start) = (0.0, 0);
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        out.push(perm[start..end.max(start)].to_vec());
        start = end.max(start);
    }
    Ok(out)
}

pub fn split_dataset<T: Clone>(data: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    Ok(split_indices(data.len(), fractions, seed)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| data[i].clone()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_cover() {
        let parts = split_indices(1000, &[0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!(
            parts.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![700, 100, 200]
        );
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(parts, split_indices(1000, &[0.7, 0.1, 0.2], 5).unwrap());
        assert_ne!(parts, split_indices(1000, &[0.7, 0.1, 0.2], 6).unwrap());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_indices(10, &[0.5, 0.6], 0).is_err());
        assert!(split_indices(10, &[], 0).is_err());
    }
}
