use crate::collage::Sprite;
use crate::grid::{BinaryMask, PixelImage};

/// Shift radius, in pixels, of the alignment search.
pub const ALIGN_SEARCH: isize = 1;

/// Normalized cross-correlation between `sprite` and the generated subject
/// region, clamped to `[0, 1]`.
///
/// The sprite is resized (nearest neighbour) to the extent of `gen_mask`;
/// the score is the best correlation over crops shifted by up to
/// [`ALIGN_SEARCH`] pixels, taken over the sprite's alpha. An empty region
/// scores 0.
pub fn eval_alignment(gen: &PixelImage, sprite: &Sprite, gen_mask: &BinaryMask) -> f32 {
    let Some((x0, y0, w, h)) = gen_mask.extent() else {
        log::warn!("empty generated subject region; alignment is 0");
        return 0.0;
    };
    let reference = sprite.resized(w, h);
    let mut best = f32::NEG_INFINITY;
    for dy in -ALIGN_SEARCH..=ALIGN_SEARCH {
        for dx in -ALIGN_SEARCH..=ALIGN_SEARCH {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for v in 0..h {
                for u in 0..w {
                    if !reference.alpha_at(u, v) {
                        continue;
                    }
                    let (gx, gy) = ((x0 + u) as isize + dx, (y0 + v) as isize + dy);
                    if gx < 0 || gy < 0 || gx >= gen.width() as isize || gy >= gen.height() as isize {
                        continue;
                    }
                    a.extend_from_slice(&reference.pixel(u, v));
                    b.extend_from_slice(&gen.pixel(gx as usize, gy as usize));
                }
            }
            if let Some(score) = ncc(&a, &b) {
                best = best.max(score);
            }
        }
    }
    if best.is_finite() {
        best.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn ncc(a: &[f32], b: &[f32]) -> Option<f32> {
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (x as f64 - ma, y as f64 - mb);
        num += p * q;
        va += p * p;
        vb += q * q;
    }
    if va <= 1e-12 || vb <= 1e-12 {
        return Some(0.0);
    }
    Some((num / (va * vb).sqrt()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collage::{crop_with_mask, render_scene, BBox, SceneSpec, Shape, SubjectSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (PixelImage, BinaryMask) {
        let spec = SceneSpec {
            width: 24,
            height: 24,
            background: "weave".into(),
            subjects: vec![SubjectSpec {
                id: "a".into(),
                texture: "checker".into(),
                bbox: BBox::new(6, 4, 10, 12),
                z: 0,
                shape: Shape::Disc,
            }],
        };
        let img = render_scene(&spec, 4).unwrap();
        let mask = crate::collage::segment(&spec, BBox::new(6, 4, 10, 12)).unwrap();
        (img, mask)
    }

    #[test]
    fn identical_region_scores_one() {
        let (img, mask) = fixture();
        let sprite = crop_with_mask(&img, &mask).unwrap();
        assert!((eval_alignment(&img, &sprite, &mask) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverted_colours_score_zero() {
        let (img, mask) = fixture();
        let sprite = crop_with_mask(&img, &mask).unwrap();
        let inverted = PixelImage::new(24, 24, img.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert_eq!(eval_alignment(&inverted, &sprite, &mask), 0.0);
    }

    #[test]
    fn empty_region_scores_zero() {
        let (img, mask) = fixture();
        let sprite = crop_with_mask(&img, &mask).unwrap();
        assert_eq!(eval_alignment(&img, &sprite, &BinaryMask::zeros(24, 24)), 0.0);
    }

    #[test]
    fn noise_baseline_is_low() {
        let (img, mask) = fixture();
        let sprite = crop_with_mask(&img, &mask).unwrap();
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = PixelImage::new(24, 24, (0..24 * 24 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap();
            total += eval_alignment(&noise, &sprite, &mask);
        }
        assert!(total / 100.0 < 0.2, "mean {}", total / 100.0);
    }
}
