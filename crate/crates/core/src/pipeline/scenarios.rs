//! Seeded scene generators used by tests, sweeps and the CLI demo mode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ReferenceSpec;
use crate::collage::{BBox, SceneSpec, Shape, SubjectSpec, TEXTURES};

pub const SCENE_SIZE: usize = 32;
pub const SUBJECT_ID: &str = "subject";

const SHAPES: [Shape; 3] = [Shape::Rect, Shape::Disc, Shape::Diamond];

fn pick_box(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BBox {
    // Even offsets keep boxes patch-aligned.
    let x = 2 * rng.gen_range(0..=(SCENE_SIZE - w) / 2);
    let y = 2 * rng.gen_range(0..=(SCENE_SIZE - h) / 2);
    BBox::new(x, y, w, h)
}

/// A template with one subject and a reference scene holding the same
/// subject id with a different texture at a translated box.
pub fn translated_subject(seed: u64) -> (SceneSpec, ReferenceSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x07a5_1a7e);
    let mut textures = TEXTURES.to_vec();
    textures.shuffle(&mut rng);
    let (w, h) = (2 * rng.gen_range(6..=8), 2 * rng.gen_range(6..=8));
    let target = pick_box(&mut rng, w, h);
    let mut source = pick_box(&mut rng, w, h);
    while source == target {
        source = pick_box(&mut rng, w, h);
    }
    let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let template = SceneSpec {
        width: SCENE_SIZE,
        height: SCENE_SIZE,
        background: textures[0].to_string(),
        subjects: vec![SubjectSpec {
            id: SUBJECT_ID.into(),
            texture: textures[1].to_string(),
            bbox: target,
            z: 0,
            shape,
        }],
    };
    let reference = SceneSpec {
        width: SCENE_SIZE,
        height: SCENE_SIZE,
        background: textures[2].to_string(),
        subjects: vec![SubjectSpec {
            id: SUBJECT_ID.into(),
            texture: textures[3].to_string(),
            bbox: source,
            z: 0,
            shape,
        }],
    };
    (
        template,
        ReferenceSpec {
            scene: reference,
            subject: SUBJECT_ID.into(),
        },
    )
}

/// A template with two subjects in disjoint halves and one reference per
/// subject, each retextured.
pub fn two_subjects(seed: u64) -> (SceneSpec, Vec<ReferenceSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x25ab_1ec7);
    let mut textures = TEXTURES.to_vec();
    textures.shuffle(&mut rng);
    let half = SCENE_SIZE / 2;
    let boxes = [
        BBox::new(2 * rng.gen_range(0..=1), 2 * rng.gen_range(0..=8), 12, 12),
        BBox::new(half + 2 * rng.gen_range(0..=1), 2 * rng.gen_range(0..=8), 12, 12),
    ];
    let ids = ["left", "right"];
    let template = SceneSpec {
        width: SCENE_SIZE,
        height: SCENE_SIZE,
        background: textures[0].to_string(),
        subjects: (0..2)
            .map(|k| SubjectSpec {
                id: ids[k].into(),
                texture: textures[1 + k].to_string(),
                bbox: boxes[k],
                z: 0,
                shape: SHAPES[k],
            })
            .collect(),
    };
    let refs = (0..2)
        .map(|k| {
            let (w, h) = (2 * rng.gen_range(5..=7), 2 * rng.gen_range(5..=7));
            ReferenceSpec {
                scene: SceneSpec {
                    width: SCENE_SIZE,
                    height: SCENE_SIZE,
                    background: textures[3].to_string(),
                    subjects: vec![SubjectSpec {
                        id: ids[k].into(),
                        texture: textures[4 + k].to_string(),
                        bbox: pick_box(&mut rng, w, h),
                        z: 0,
                        shape: SHAPES[k],
                    }],
                },
                subject: ids[k].into(),
            }
        })
        .collect();
    (template, refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_valid_and_seeded() {
        for seed in 0..50 {
            let (t, r) = translated_subject(seed);
            t.validate().unwrap();
            r.scene.validate().unwrap();
            let a = t.subject(SUBJECT_ID).unwrap();
            let b = r.scene.subject(SUBJECT_ID).unwrap();
            assert_ne!(a.texture, b.texture);
            assert_ne!(a.bbox, b.bbox);
            assert_eq!((a.bbox.w, a.bbox.h), (b.bbox.w, b.bbox.h));
            let (t2, refs) = two_subjects(seed);
            t2.validate().unwrap();
            assert!(!t2.subjects[0].bbox.intersects(&t2.subjects[1].bbox));
            refs.iter().for_each(|r| r.scene.validate().unwrap());
        }
        assert_eq!(translated_subject(7), translated_subject(7));
    }
}
