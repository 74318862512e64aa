//! Procedural scenes and the stages that turn a template scene plus
//! reference subjects into an initialization collage.
//!
//! Grounding, segmentation and erasing sit behind [`SceneStages`]. The
//! shipped implementation, [`ExactStages`], answers from the [`SceneSpec`]
//! that produced the image. [`DilatedGrounding`] wraps any stages and pads
//! the boxes it reports, which is how an imprecise detector behaves.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::grid::{BinaryMask, PixelImage, CHANNELS, PATCH_SIZE};
use crate::matching::splitmix64;

/// Pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= width && self.bottom() <= height
    }

    /// Grows the box by `by` pixels on each side, clipped to the canvas.
    pub fn dilate(&self, by: usize, width: usize, height: usize) -> BBox {
        let x = self.x.saturating_sub(by);
        let y = self.y.saturating_sub(by);
        BBox::new(x, y, (self.right() + by).min(width) - x, (self.bottom() + by).min(height) - y)
    }

    /// Pixel mask of the box on a `width`×`height` canvas.
    pub fn to_mask(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(height, width);
        for y in self.y..self.bottom().min(height) {
            for x in self.x..self.right().min(width) {
                m.set_at(y, x, true);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rect,
    Disc,
    Diamond,
}

impl Shape {
    /// Whether local pixel `(u, v)` of a `w`×`h` box belongs to the shape.
    pub fn covers(&self, u: usize, v: usize, w: usize, h: usize) -> bool {
        let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
        let dx = (u as f32 + 0.5 - cx) / cx;
        let dy = (v as f32 + 0.5 - cy) / cy;
        match self {
            Shape::Rect => true,
            Shape::Disc => dx * dx + dy * dy <= 1.0,
            Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub id: String,
    pub texture: String,
    pub bbox: BBox,
    #[serde(default)]
    pub z: i32,
    #[serde(default)]
    pub shape: Shape,
}

/// A procedural scene: a textured background and textured subjects.
///
/// JSON schema:
///
/// ```json
/// {
///   "width": 32, "height": 32, "background": "weave",
///   "subjects": [
///     {"id": "cat", "texture": "stripes", "bbox": {"x": 4, "y": 4, "w": 12, "h": 12},
///      "z": 0, "shape": "disc"}
///   ]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: String,
    #[serde(default)]
    pub subjects: Vec<SubjectSpec>,
}

pub const TEXTURES: &[&str] = &["stripes", "checker", "dots", "waves", "rings", "plaid", "weave", "speckle"];

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(PATCH_SIZE) || !self.height.is_multiple_of(PATCH_SIZE) {
            return Err(GraftError::Spec(format!(
                "canvas {}x{} must be a positive multiple of the patch size",
                self.width, self.height
            )));
        }
        check_texture(&self.background)?;
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(GraftError::Spec(format!("duplicate subject id `{}`", s.id)));
            }
            check_texture(&s.texture)?;
            if !s.bbox.fits(self.width, self.height) {
                return Err(GraftError::Spec(format!("subject `{}` box {:?} leaves the canvas", s.id, s.bbox)));
            }
        }
        for (i, a) in self.subjects.iter().enumerate() {
            for b in &self.subjects[i + 1..] {
                if a.z == b.z && a.bbox.intersects(&b.bbox) {
                    return Err(GraftError::Spec(format!(
                        "subjects `{}` and `{}` overlap at the same depth",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSpec> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn without(&self, id: &str) -> SceneSpec {
        let mut out = self.clone();
        out.subjects.retain(|s| s.id != id);
        out
    }

    /// Stable token ids for conditioning: background first, then subjects.
    pub fn token_ids(&self) -> Vec<u64> {
        let mut ids = vec![name_hash(&self.background)];
        for s in &self.subjects {
            ids.push(name_hash(&s.id));
            ids.push(name_hash(&s.texture));
        }
        ids
    }
}

fn check_texture(name: &str) -> Result<()> {
    if TEXTURES.contains(&name) {
        Ok(())
    } else {
        Err(GraftError::Spec(format!("unknown texture `{name}` (known: {})", TEXTURES.join(", "))))
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn palette(seed: u64, slot: u64) -> [f32; 3] {
    let h = splitmix64(seed ^ slot.wrapping_mul(0x9e37_79b9));
    [
        0.1 + 0.8 * unit(splitmix64(h ^ 1)),
        0.1 + 0.8 * unit(splitmix64(h ^ 2)),
        0.1 + 0.8 * unit(splitmix64(h ^ 3)),
    ]
}

/// Texture colour at local pixel `(u, v)`. Deterministic in
/// `(texture, seed, u, v)`; a per-pixel jitter keeps every patch distinct.
pub fn texture_pixel(texture: &str, seed: u64, u: usize, v: usize) -> [f32; 3] {
    let key = splitmix64(seed ^ name_hash(texture));
    let (a, b) = (palette(key, 1), palette(key, 2));
    let (fu, fv) = (u as f32, v as f32);
    let mix: f32 = match texture {
        "stripes" => ((u + v) / 3 % 2) as f32,
        "checker" => ((u / 3 + v / 3) % 2) as f32,
        "dots" => {
            let (du, dv) = ((u % 5) as f32 - 2.0, (v % 5) as f32 - 2.0);
            (du * du + dv * dv <= 2.0) as u8 as f32
        }
        "waves" => 0.5 + 0.5 * (0.9 * fu + 1.7 * (0.45 * fv).sin()).sin(),
        "rings" => 0.5 + 0.5 * (0.8 * (fu * fu + fv * fv).sqrt()).cos(),
        "plaid" => 0.5 * ((u / 2).is_multiple_of(3) as u8 as f32 + (v / 2).is_multiple_of(4) as u8 as f32),
        "weave" => 0.5 + 0.5 * (0.6 * fu).sin() * (0.5 * fv).cos(),
        _ => unit(splitmix64(key ^ ((u as u64) << 20 | v as u64))),
    };
    let jitter_seed = splitmix64(key ^ 0xabcd ^ ((u as u64) << 32 | v as u64));
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let j = 0.16 * (unit(splitmix64(jitter_seed ^ c as u64)) - 0.5);
        out[c] = (a[c] + (b[c] - a[c]) * mix + j).clamp(0.0, 1.0);
    }
    out
}

fn background_pixel(spec: &SceneSpec, seed: u64, x: usize, y: usize) -> [f32; 3] {
    texture_pixel(&spec.background, seed ^ 0xb6, x, y)
}

/// Subjects sorted by depth, stable in declaration order.
fn by_depth(spec: &SceneSpec) -> Vec<&SubjectSpec> {
    let mut subjects: Vec<_> = spec.subjects.iter().collect();
    subjects.sort_by_key(|s| s.z);
    subjects
}

pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<PixelImage> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.width * spec.height * CHANNELS);
    for y in 0..spec.height {
        for x in 0..spec.width {
            data.extend_from_slice(&background_pixel(spec, seed, x, y));
        }
    }
    let mut img = PixelImage::new(spec.width, spec.height, data)?;
    for s in by_depth(spec) {
        let b = s.bbox;
        for v in 0..b.h {
            for u in 0..b.w {
                if s.shape.covers(u, v, b.w, b.h) {
                    img.set_pixel(b.x + u, b.y + v, texture_pixel(&s.texture, seed, u, v));
                }
            }
        }
    }
    Ok(img)
}

/// Exact box of `subject` in `spec`.
pub fn ground(spec: &SceneSpec, subject: &str) -> Result<BBox> {
    spec.subject(subject)
        .map(|s| s.bbox)
        .ok_or_else(|| GraftError::NotFound(subject.to_string()))
}

/// Visible pixels of the topmost subject overlapping `bbox`, restricted to `bbox`.
pub fn segment(spec: &SceneSpec, bbox: BBox) -> Result<BinaryMask> {
    if !bbox.fits(spec.width, spec.height) {
        return Err(GraftError::Bounds(format!("box {bbox:?} outside {}x{}", spec.width, spec.height)));
    }
    let ordered = by_depth(spec);
    let Some((idx, target)) = ordered
        .iter()
        .enumerate()
        .filter(|(_, s)| s.bbox.intersects(&bbox))
        .max_by_key(|(i, s)| (s.z, *i))
    else {
        return Ok(BinaryMask::zeros(spec.height, spec.width));
    };
    let mut mask = BinaryMask::zeros(spec.height, spec.width);
    let b = target.bbox;
    for v in 0..b.h {
        for u in 0..b.w {
            let (x, y) = (b.x + u, b.y + v);
            if !bbox.contains(x, y) || !target.shape.covers(u, v, b.w, b.h) {
                continue;
            }
            let occluded = ordered[idx + 1..].iter().any(|o| {
                o.bbox.contains(x, y) && o.shape.covers(x - o.bbox.x, y - o.bbox.y, o.bbox.w, o.bbox.h)
            });
            if !occluded {
                mask.set_at(y, x, true);
            }
        }
    }
    Ok(mask)
}

/// Replaces masked pixels with the scene background.
pub fn erase(image: &PixelImage, mask: &BinaryMask, spec: &SceneSpec, seed: u64) -> Result<PixelImage> {
    if mask.rows() != image.height() || mask.cols() != image.width() {
        return Err(GraftError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.cols(),
            mask.rows(),
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    for i in mask.ones_indices() {
        let (x, y) = (i % image.width(), i / image.width());
        out.set_pixel(x, y, background_pixel(spec, seed, x, y));
    }
    Ok(out)
}

/// The ground/segment/erase interface a real detector, segmenter and
/// inpainter would implement.
pub trait SceneStages: Send + Sync {
    fn ground(&self, image: &PixelImage, subject: &str) -> Result<BBox>;
    fn segment(&self, image: &PixelImage, bbox: BBox) -> Result<BinaryMask>;
    fn erase(&self, image: &PixelImage, mask: &BinaryMask) -> Result<PixelImage>;
}

/// Stages answered exactly from the spec that rendered the image.
#[derive(Debug, Clone)]
pub struct ExactStages {
    pub spec: SceneSpec,
    pub seed: u64,
}

impl ExactStages {
    pub fn new(spec: SceneSpec, seed: u64) -> Self {
        Self { spec, seed }
    }
}

impl SceneStages for ExactStages {
    fn ground(&self, _image: &PixelImage, subject: &str) -> Result<BBox> {
        ground(&self.spec, subject)
    }

    fn segment(&self, _image: &PixelImage, bbox: BBox) -> Result<BinaryMask> {
        segment(&self.spec, bbox)
    }

    fn erase(&self, image: &PixelImage, mask: &BinaryMask) -> Result<PixelImage> {
        erase(image, mask, &self.spec, self.seed)
    }
}

/// Wraps stages so every reported box is padded by `pixels`.
pub struct DilatedGrounding<S> {
    pub inner: S,
    pub pixels: usize,
}

impl<S: SceneStages> SceneStages for DilatedGrounding<S> {
    fn ground(&self, image: &PixelImage, subject: &str) -> Result<BBox> {
        Ok(self.inner.ground(image, subject)?.dilate(self.pixels, image.width(), image.height()))
    }

    fn segment(&self, image: &PixelImage, bbox: BBox) -> Result<BinaryMask> {
        self.inner.segment(image, bbox)
    }

    fn erase(&self, image: &PixelImage, mask: &BinaryMask) -> Result<PixelImage> {
        self.inner.erase(image, mask)
    }
}

/// A cropped subject with a binary alpha. Sizes are arbitrary pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub alpha: Vec<bool>,
}

impl Sprite {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> bool {
        self.alpha[y * self.width + x]
    }

    /// Nearest-neighbour resample to `w`×`h`.
    pub fn resized(&self, w: usize, h: usize) -> Sprite {
        let mut rgb = Vec::with_capacity(w * h * CHANNELS);
        let mut alpha = Vec::with_capacity(w * h);
        for dy in 0..h {
            let sy = ((2 * dy + 1) * self.height / (2 * h)).min(self.height - 1);
            for dx in 0..w {
                let sx = ((2 * dx + 1) * self.width / (2 * w)).min(self.width - 1);
                rgb.extend_from_slice(&self.pixel(sx, sy));
                alpha.push(self.alpha_at(sx, sy));
            }
        }
        Sprite {
            width: w,
            height: h,
            rgb,
            alpha,
        }
    }
}

/// Tight crop around the set pixels of `mask`, with the mask as alpha.
pub fn crop_with_mask(image: &PixelImage, mask: &BinaryMask) -> Result<Sprite> {
    if mask.rows() != image.height() || mask.cols() != image.width() {
        return Err(GraftError::Shape("mask does not match image".into()));
    }
    let (x0, y0, w, h) = mask.extent().ok_or(GraftError::EmptySubject)?;
    let mut rgb = Vec::with_capacity(w * h * CHANNELS);
    let mut alpha = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            rgb.extend_from_slice(&image.pixel(x, y));
            alpha.push(mask.at(y, x));
        }
    }
    Ok(Sprite {
        width: w,
        height: h,
        rgb,
        alpha,
    })
}

/// Size and placement of a sprite scaled to fit `target`, aspect preserved
/// and centred.
pub fn fit_in(sprite_w: usize, sprite_h: usize, target: BBox) -> Result<BBox> {
    let scale = (target.w as f64 / sprite_w as f64).min(target.h as f64 / sprite_h as f64);
    let w = (sprite_w as f64 * scale).round() as usize;
    let h = (sprite_h as f64 * scale).round() as usize;
    if w < 1 || h < 1 {
        return Err(GraftError::Size(format!(
            "{sprite_w}x{sprite_h} sprite shrinks to {w}x{h} in {target:?}"
        )));
    }
    let (w, h) = (w.min(target.w), h.min(target.h));
    Ok(BBox::new(target.x + (target.w - w) / 2, target.y + (target.h - h) / 2, w, h))
}

/// Scales `sprite` into `target` and composites it over `erased`. Returns
/// the image and the pixel mask of the pasted alpha.
pub fn paste_sprite(erased: &PixelImage, sprite: &Sprite, target: BBox) -> Result<(PixelImage, BinaryMask)> {
    if !target.fits(erased.width(), erased.height()) {
        return Err(GraftError::Bounds(format!(
            "target {target:?} outside {}x{}",
            erased.width(),
            erased.height()
        )));
    }
    let sprite_aspect = sprite.width as f64 / sprite.height as f64;
    let target_aspect = target.w as f64 / target.h as f64;
    let mismatch = (sprite_aspect / target_aspect).max(target_aspect / sprite_aspect);
    if mismatch > 4.0 {
        log::warn!(
            "sprite aspect {sprite_aspect:.2} vs target aspect {target_aspect:.2}: pasting a {mismatch:.1}:1 mismatch"
        );
    }
    let placed = fit_in(sprite.width, sprite.height, target)?;
    let scaled = sprite.resized(placed.w, placed.h);
    let mut out = erased.clone();
    let mut mask = BinaryMask::zeros(erased.height(), erased.width());
    for v in 0..placed.h {
        for u in 0..placed.w {
            if scaled.alpha_at(u, v) {
                out.set_pixel(placed.x + u, placed.y + v, scaled.pixel(u, v));
                mask.set_at(placed.y + v, placed.x + u, true);
            }
        }
    }
    Ok((out, mask))
}

pub fn resize_and_paste(erased: &PixelImage, sprite: &Sprite, target: BBox) -> Result<PixelImage> {
    Ok(paste_sprite(erased, sprite, target)?.0)
}

/// One reference subject to place into the template.
pub struct Reference<'a> {
    pub image: PixelImage,
    pub subject: String,
    pub stages: &'a dyn SceneStages,
}

/// A subject after pasting.
#[derive(Debug, Clone)]
pub struct PastedSubject {
    pub id: String,
    pub target: BBox,
    pub sprite: Sprite,
    /// Pasted alpha at pixel resolution.
    pub pixel_mask: BinaryMask,
    /// Pasted alpha at patch resolution.
    pub patch_mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct Collage {
    pub template: PixelImage,
    pub image: PixelImage,
    /// Union of the pasted subjects' patch masks.
    pub pre_mask: BinaryMask,
    pub subjects: Vec<PastedSubject>,
    /// Named intermediate images in the order they were produced.
    pub stages: Vec<(String, PixelImage)>,
}

/// Replaces each reference's subject in `template` in turn: ground, segment
/// and erase it in the template, crop it from the reference, and paste.
pub fn build_collage(template: &PixelImage, template_stages: &dyn SceneStages, refs: &[Reference<'_>]) -> Result<Collage> {
    let shape = template.patch_shape();
    let mut image = template.clone();
    let mut pre_mask = BinaryMask::zeros(shape.rows, shape.cols);
    let mut subjects = Vec::with_capacity(refs.len());
    let mut stages = vec![("template".to_string(), template.clone())];
    for r in refs {
        let id = r.subject.as_str();
        let target = template_stages.ground(&image, id).map_err(|e| e.in_stage("ground", id))?;
        let tmp_mask = template_stages.segment(&image, target).map_err(|e| e.in_stage("segment", id))?;
        let erased = template_stages.erase(&image, &tmp_mask).map_err(|e| e.in_stage("erase", id))?;

        let ref_box = r.stages.ground(&r.image, id).map_err(|e| e.in_stage("ground reference", id))?;
        let ref_mask = r.stages.segment(&r.image, ref_box).map_err(|e| e.in_stage("segment reference", id))?;
        let sprite = crop_with_mask(&r.image, &ref_mask).map_err(|e| e.in_stage("crop", id))?;
        let (pasted, pixel_mask) = paste_sprite(&erased, &sprite, target).map_err(|e| e.in_stage("paste", id))?;
        let patch_mask = pixel_mask.downsample_any(PATCH_SIZE)?;

        pre_mask = pre_mask.or(&patch_mask)?;
        stages.push((format!("erased_{id}"), erased));
        stages.push((format!("collage_{id}"), pasted.clone()));
        image = pasted;
        subjects.push(PastedSubject {
            id: id.to_string(),
            target,
            sprite,
            pixel_mask,
            patch_mask,
        });
    }
    Ok(Collage {
        template: template.clone(),
        image,
        pre_mask,
        subjects,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(subjects: Vec<SubjectSpec>) -> SceneSpec {
        SceneSpec {
            width: 24,
            height: 24,
            background: "weave".into(),
            subjects,
        }
    }

    fn subject(id: &str, texture: &str, bbox: BBox, shape: Shape) -> SubjectSpec {
        SubjectSpec {
            id: id.into(),
            texture: texture.into(),
            bbox,
            z: 0,
            shape,
        }
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let s = spec(vec![subject("cat", "stripes", BBox::new(4, 4, 8, 8), Shape::Disc)]);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(SceneSpec::from_json(&text).unwrap(), s);
        let minimal = r#"{"width": 8, "height": 8, "background": "dots"}"#;
        assert!(SceneSpec::from_json(minimal).unwrap().subjects.is_empty());

        let mut bad = s.clone();
        bad.subjects.push(subject("dog", "dots", BBox::new(8, 8, 8, 8), Shape::Rect));
        assert!(matches!(bad.validate(), Err(GraftError::Spec(_))));
        bad.subjects[1].z = 1;
        assert!(bad.validate().is_ok());
        bad.subjects[1].id = "cat".into();
        assert!(bad.validate().is_err());
        let mut off = s.clone();
        off.subjects[0].bbox = BBox::new(20, 20, 8, 8);
        assert!(off.validate().is_err());
        let mut odd = s;
        odd.width = 23;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn render_background_and_subject_region() {
        let empty = spec(vec![]);
        let bg = render_scene(&empty, 3).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(bg.pixel(x, y), background_pixel(&empty, 3, x, y));
            }
        }
        let one = spec(vec![subject("cat", "checker", BBox::new(4, 4, 8, 8), Shape::Rect)]);
        let img = render_scene(&one, 3).unwrap();
        let b = BBox::new(4, 4, 8, 8);
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(img.pixel(x, y) != bg.pixel(x, y), b.contains(x, y), "({x}, {y})");
            }
        }
        assert_eq!(render_scene(&one, 3).unwrap(), img);
    }

    #[test]
    fn grounding_is_exact() {
        let two = spec(vec![
            subject("cat", "checker", BBox::new(4, 4, 8, 8), Shape::Rect),
            subject("dog", "dots", BBox::new(14, 2, 6, 10), Shape::Disc),
        ]);
        assert_eq!(ground(&two, "cat").unwrap(), BBox::new(4, 4, 8, 8));
        assert_eq!(ground(&two, "dog").unwrap(), BBox::new(14, 2, 6, 10));
        assert!(!ground(&two, "cat").unwrap().intersects(&ground(&two, "dog").unwrap()));
        assert!(matches!(ground(&two, "owl"), Err(GraftError::NotFound(_))));
    }

    #[test]
    fn segmentation_shapes() {
        let b = BBox::new(2, 2, 20, 20);
        let rect = spec(vec![subject("a", "plaid", b, Shape::Rect)]);
        assert_eq!(segment(&rect, b).unwrap(), b.to_mask(24, 24));

        let disc = spec(vec![subject("a", "plaid", b, Shape::Disc)]);
        let m = segment(&disc, b).unwrap();
        let ratio = m.popcount() as f64 / 400.0;
        assert!((ratio - std::f64::consts::FRAC_PI_4).abs() < 0.03 * std::f64::consts::FRAC_PI_4);
        assert_eq!(m.and_not(&b.to_mask(24, 24)).unwrap().popcount(), 0);
    }

    #[test]
    fn segmentation_respects_occlusion() {
        let mut front = subject("b", "dots", BBox::new(8, 8, 8, 8), Shape::Rect);
        front.z = 1;
        let s = spec(vec![subject("a", "plaid", BBox::new(2, 2, 10, 10), Shape::Rect), front]);
        let m = segment(&s, BBox::new(2, 2, 10, 10)).unwrap();
        // The query box overlaps both; the front subject wins.
        assert_eq!(m.popcount(), 16);
        let back_only = segment(&s, BBox::new(2, 2, 5, 5)).unwrap();
        assert_eq!(back_only.popcount(), 25);
    }

    #[test]
    fn erase_contracts() {
        let s = spec(vec![subject("cat", "stripes", BBox::new(6, 6, 10, 10), Shape::Disc)]);
        let img = render_scene(&s, 5).unwrap();
        assert_eq!(erase(&img, &BinaryMask::zeros(24, 24), &s, 5).unwrap(), img);

        let mask = segment(&s, BBox::new(6, 6, 10, 10)).unwrap();
        let erased = erase(&img, &mask, &s, 5).unwrap();
        assert_eq!(erased, render_scene(&s.without("cat"), 5).unwrap());
        for i in 0..576 {
            if !mask.get(i) {
                assert_eq!(erased.pixel(i % 24, i / 24), img.pixel(i % 24, i / 24));
            }
        }
        assert_eq!(erase(&erased, &mask, &s, 5).unwrap(), erased);
    }

    #[test]
    fn crop_cases() {
        let s = spec(vec![]);
        let img = render_scene(&s, 1).unwrap();
        let full = crop_with_mask(&img, &BinaryMask::ones(24, 24)).unwrap();
        assert_eq!((full.width, full.height), (24, 24));
        assert!(full.alpha.iter().all(|&a| a));
        assert_eq!(full.rgb, img.data());

        let mut one = BinaryMask::zeros(24, 24);
        one.set_at(5, 7, true);
        let px = crop_with_mask(&img, &one).unwrap();
        assert_eq!((px.width, px.height), (1, 1));
        assert_eq!(px.pixel(0, 0), img.pixel(7, 5));

        // An L: a 4-pixel column plus a 3-pixel foot.
        let mut l = BinaryMask::zeros(24, 24);
        for y in 10..14 {
            l.set_at(y, 3, true);
        }
        for x in 4..6 {
            l.set_at(13, x, true);
        }
        let sp = crop_with_mask(&img, &l).unwrap();
        assert_eq!((sp.width, sp.height), (3, 4));
        let want = [
            true, false, false, true, false, false, true, false, false, true, true, true,
        ];
        assert_eq!(sp.alpha, want);
        assert!(matches!(crop_with_mask(&img, &BinaryMask::zeros(24, 24)), Err(GraftError::EmptySubject)));
    }

    fn block_sprite(blocks: usize) -> Sprite {
        let n = blocks * 2;
        let mut rgb = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let v = ((y / 2) * blocks + x / 2) as f32 / (blocks * blocks) as f32;
                rgb.extend_from_slice(&[v, 1.0 - v, 0.5]);
            }
        }
        Sprite {
            width: n,
            height: n,
            rgb,
            alpha: vec![true; n * n],
        }
    }

    #[test]
    fn paste_identity_and_decimation() {
        let s = spec(vec![]);
        let bg = render_scene(&s, 2).unwrap();
        let sprite = block_sprite(3);
        let target = BBox::new(5, 7, 6, 6);
        let out = resize_and_paste(&bg, &sprite, target).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                if target.contains(x, y) {
                    assert_eq!(out.pixel(x, y), sprite.pixel(x - 5, y - 7));
                } else {
                    assert_eq!(out.pixel(x, y), bg.pixel(x, y));
                }
            }
        }
        let half = resize_and_paste(&bg, &sprite, BBox::new(0, 0, 3, 3)).unwrap();
        for by in 0..3 {
            for bx in 0..3 {
                assert_eq!(half.pixel(bx, by), sprite.pixel(2 * bx, 2 * by));
            }
        }
    }

    #[test]
    fn paste_centres_and_rejects_degenerate() {
        let bg = render_scene(&spec(vec![]), 2).unwrap();
        let wide = Sprite {
            width: 8,
            height: 2,
            rgb: vec![0.9; 48],
            alpha: vec![true; 16],
        };
        let (_, mask) = paste_sprite(&bg, &wide, BBox::new(0, 0, 8, 8)).unwrap();
        assert_eq!(mask.extent(), Some((0, 3, 8, 2)));
        let err = paste_sprite(&bg, &wide, BBox::new(0, 0, 1, 8)).unwrap_err();
        assert!(matches!(err, GraftError::Size(_)));
        assert!(paste_sprite(&bg, &wide, BBox::new(20, 20, 8, 8)).is_err());
    }

    fn two_subject_fixture() -> (SceneSpec, SceneSpec, SceneSpec) {
        let template = SceneSpec {
            width: 32,
            height: 32,
            background: "weave".into(),
            subjects: vec![
                subject("cat", "checker", BBox::new(2, 4, 12, 12), Shape::Disc),
                subject("dog", "dots", BBox::new(18, 14, 12, 14), Shape::Rect),
            ],
        };
        let ref_cat = SceneSpec {
            width: 32,
            height: 32,
            background: "speckle".into(),
            subjects: vec![subject("cat", "stripes", BBox::new(14, 10, 10, 10), Shape::Rect)],
        };
        let ref_dog = SceneSpec {
            width: 32,
            height: 32,
            background: "rings".into(),
            subjects: vec![subject("dog", "plaid", BBox::new(4, 2, 8, 12), Shape::Diamond)],
        };
        (template, ref_cat, ref_dog)
    }

    #[test]
    fn collage_with_zero_one_two_references() {
        let (template, ref_cat, ref_dog) = two_subject_fixture();
        let tmp_img = render_scene(&template, 1).unwrap();
        let stages = ExactStages::new(template.clone(), 1);

        let none = build_collage(&tmp_img, &stages, &[]).unwrap();
        assert_eq!(none.image, tmp_img);
        assert_eq!(none.pre_mask.popcount(), 0);

        let cat_stages = ExactStages::new(ref_cat.clone(), 1);
        let cat = Reference {
            image: render_scene(&ref_cat, 1).unwrap(),
            subject: "cat".into(),
            stages: &cat_stages,
        };
        let one = build_collage(&tmp_img, &stages, std::slice::from_ref(&cat)).unwrap();
        let erased = &one.stages[1].1;
        let target = one.subjects[0].target;
        for y in 0..32 {
            for x in 0..32 {
                if one.image.pixel(x, y) != erased.pixel(x, y) {
                    assert!(target.contains(x, y));
                }
            }
        }
        // The patch mask covers exactly the patches touched by pasted alpha.
        let px = &one.subjects[0].pixel_mask;
        for pr in 0..16 {
            for pc in 0..16 {
                let touched = (0..2).any(|dy| (0..2).any(|dx| px.at(pr * 2 + dy, pc * 2 + dx)));
                assert_eq!(one.pre_mask.at(pr, pc), touched);
            }
        }

        let dog_stages = ExactStages::new(ref_dog.clone(), 1);
        let dog = Reference {
            image: render_scene(&ref_dog, 1).unwrap(),
            subject: "dog".into(),
            stages: &dog_stages,
        };
        let both = build_collage(&tmp_img, &stages, &[cat, dog]).unwrap();
        assert_eq!(both.subjects.len(), 2);
        let (a, b) = (&both.subjects[0], &both.subjects[1]);
        assert_eq!(a.pixel_mask.and(&b.pixel_mask).unwrap().popcount(), 0);
        assert_eq!(a.patch_mask.and(&b.patch_mask).unwrap().popcount(), 0);
        assert_eq!(both.pre_mask, a.patch_mask.or(&b.patch_mask).unwrap());
    }

    #[test]
    fn collage_errors_carry_subject() {
        let (template, ref_cat, _) = two_subject_fixture();
        let tmp_img = render_scene(&template, 1).unwrap();
        let stages = ExactStages::new(template, 1);
        let cat_stages = ExactStages::new(ref_cat.clone(), 1);
        let owl = Reference {
            image: render_scene(&ref_cat, 1).unwrap(),
            subject: "owl".into(),
            stages: &cat_stages,
        };
        match build_collage(&tmp_img, &stages, &[owl]) {
            Err(GraftError::Stage { stage, subject, .. }) => {
                assert_eq!(stage, "ground");
                assert_eq!(subject, "owl");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dilated_grounding_still_builds_a_collage() {
        let (template, ref_cat, _) = two_subject_fixture();
        let tmp_img = render_scene(&template, 1).unwrap();
        let fuzzy = DilatedGrounding {
            inner: ExactStages::new(template, 1),
            pixels: 1,
        };
        let cat_stages = DilatedGrounding {
            inner: ExactStages::new(ref_cat.clone(), 1),
            pixels: 1,
        };
        let cat = Reference {
            image: render_scene(&ref_cat, 1).unwrap(),
            subject: "cat".into(),
            stages: &cat_stages,
        };
        let c = build_collage(&tmp_img, &fuzzy, &[cat]).unwrap();
        assert_eq!(c.subjects[0].target, BBox::new(1, 3, 14, 14));
        assert!(c.pre_mask.popcount() > 0);
        assert_eq!(c.image.width(), 32);
    }
}
