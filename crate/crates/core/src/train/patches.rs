use rand::Rng;

use super::TrainError;
use crate::imageio::GrayImage;
use crate::tensor::{Scalar, Tensor};

/// Source coordinates of output pixel `(y, x)` under dihedral transform `t`
/// of a `p x p` patch. Bit 2 transposes, bit 0 mirrors columns, bit 1 rows.
fn dihedral(t: u8, y: usize, x: usize, p: usize) -> (usize, usize) {
    let (mut sy, mut sx) = if t & 4 != 0 { (x, y) } else { (y, x) };
    if t & 1 != 0 {
        sx = p - 1 - sx;
    }
    if t & 2 != 0 {
        sy = p - 1 - sy;
    }
    (sy, sx)
}

/// `count` random `patch x patch` crops scaled to `[0, 1]`, as a
/// `(count, 1, patch, patch)` tensor. Each crop picks an image uniformly,
/// then a position uniformly; with `augment` it also picks one of the eight
/// dihedral transforms.
pub fn sample_patches<T: Scalar, R: Rng + ?Sized>(
    corpus: &[GrayImage],
    patch: usize,
    count: usize,
    rng: &mut R,
    augment: bool,
) -> Result<Tensor<T>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if let Some((index, img)) = corpus
        .iter()
        .enumerate()
        .find(|(_, img)| img.width() < patch || img.height() < patch)
    {
        return Err(TrainError::ImageTooSmall {
            index,
            width: img.width(),
            height: img.height(),
            patch,
        });
    }
    let inv = 1.0 / 255.0;
    let mut data = Vec::with_capacity(count * patch * patch);
    for _ in 0..count {
        let img = &corpus[rng.random_range(0..corpus.len())];
        let y0 = rng.random_range(0..=img.height() - patch);
        let x0 = rng.random_range(0..=img.width() - patch);
        let t = if augment { rng.random_range(0..8u8) } else { 0 };
        for y in 0..patch {
            for x in 0..patch {
                let (sy, sx) = dihedral(t, y, x, patch);
                data.push(T::of(img.get(x0 + sx, y0 + sy) as f64 * inv));
            }
        }
    }
    Ok(Tensor::from_vec([count, 1, patch, patch], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn shape_and_range() {
        let corpus = vec![ramp(80, 70), ramp(64, 64)];
        let t: Tensor<f32> =
            sample_patches(&corpus, 64, 64, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        assert_eq!(t.shape(), [64, 1, 64, 64]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_corpus() {
        let corpus = vec![GrayImage::new(20, 20, vec![51; 400]).unwrap()];
        let t: Tensor<f64> =
            sample_patches(&corpus, 16, 5, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        assert!(t.data().iter().all(|&v| v == 51.0 / 255.0));
    }

    #[test]
    fn seeded_batches() {
        let corpus = vec![ramp(40, 33), ramp(17, 50)];
        let a: Tensor<f32> =
            sample_patches(&corpus, 16, 8, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        let b: Tensor<f32> =
            sample_patches(&corpus, 16, 8, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn too_small_image() {
        let corpus = vec![ramp(40, 40), ramp(15, 40)];
        let r: Result<Tensor<f32>, _> =
            sample_patches(&corpus, 16, 1, &mut ChaCha8Rng::seed_from_u64(0), false);
        assert!(matches!(r, Err(TrainError::ImageTooSmall { index: 1, .. })));
    }

    #[test]
    fn dihedral_group_is_eight_distinct_bijections() {
        let p = 4;
        let mut images = HashSet::new();
        for t in 0..8u8 {
            let mut seen = HashSet::new();
            let mut img = Vec::new();
            for y in 0..p {
                for x in 0..p {
                    let s = dihedral(t, y, x, p);
                    assert!(seen.insert(s));
                    img.push(s);
                }
            }
            images.insert(img);
        }
        assert_eq!(images.len(), 8);
    }
}
