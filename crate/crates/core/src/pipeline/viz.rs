use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::Result;
use crate::grid::{BinaryMask, PixelImage, PATCH_SIZE};
use crate::io::encode_png;
use crate::matching::Matching;

/// Display pixels per image pixel.
pub const VIZ_SCALE: usize = 8;
/// Horizontal gap between the two panels, in display pixels.
pub const VIZ_GAP: usize = 16;

/// Hue for a similarity in `[-1, 1]`: blue for weak, red for strong.
fn hue(similarity: f32) -> f32 {
    240.0 * (1.0 - (similarity.clamp(-1.0, 1.0) + 1.0) / 2.0)
}

/// Side-by-side SVG of `reference` (left) and `generated` (right) with one
/// line per set bit of `mask`, from the reference patch centre to its
/// matched generated patch centre.
pub fn match_viz(reference: &PixelImage, generated: &PixelImage, matching: &Matching, mask: &BinaryMask) -> Result<String> {
    let (rw, rh) = (reference.width() * VIZ_SCALE, reference.height() * VIZ_SCALE);
    let (gw, gh) = (generated.width() * VIZ_SCALE, generated.height() * VIZ_SCALE);
    let width = rw + VIZ_GAP + gw;
    let height = rh.max(gh);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    for (x, w, h, img) in [(0, rw, rh, reference), (rw + VIZ_GAP, gw, gh, generated)] {
        writeln!(
            svg,
            r#"<image x="{x}" y="0" width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/png;base64,{}"/>"#,
            STANDARD.encode(encode_png(img)?)
        )
        .unwrap();
    }
    let ref_shape = matching.ref_shape();
    let gen_shape = matching.gen_shape();
    let centre = |idx: usize, cols: usize| {
        let (r, c) = (idx / cols, idx % cols);
        let half = PATCH_SIZE as f32 / 2.0;
        (
            (c * PATCH_SIZE) as f32 * VIZ_SCALE as f32 + half * VIZ_SCALE as f32,
            (r * PATCH_SIZE) as f32 * VIZ_SCALE as f32 + half * VIZ_SCALE as f32,
        )
    };
    for i in mask.ones_indices() {
        let Some(j) = matching.forward.get(i).copied().flatten() else {
            continue;
        };
        let (x1, y1) = centre(i, ref_shape.cols);
        let (x2, y2) = centre(j, gen_shape.cols);
        let x2 = x2 + (rw + VIZ_GAP) as f32;
        let s = matching.best_sim.get(i).copied().unwrap_or(0.0);
        writeln!(
            svg,
            r#"<line class="match" x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="hsl({:.0},90%,50%)" stroke-width="1.5"/>"#,
            hue(s)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    fn lines(svg: &str) -> Vec<(f32, f32, f32, f32)> {
        svg.lines()
            .filter(|l| l.starts_with("<line"))
            .map(|l| {
                let attr = |name: &str| -> f32 {
                    let start = l.find(&format!(" {name}=\"")).unwrap() + name.len() + 3;
                    let end = start + l[start..].find('"').unwrap();
                    l[start..end].parse().unwrap()
                };
                (attr("x1"), attr("y1"), attr("x2"), attr("y2"))
            })
            .collect()
    }

    fn image() -> PixelImage {
        PixelImage::new(8, 8, (0..8 * 8 * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap()
    }

    #[test]
    fn empty_mask_draws_no_lines() {
        let shape = GridShape::new(4, 4);
        let m = Matching::from_forward(shape, shape, (0..16).map(Some).collect()).unwrap();
        let svg = match_viz(&image(), &image(), &m, &BinaryMask::zeros(4, 4)).unwrap();
        assert_eq!(svg.matches("<image").count(), 2);
        assert!(lines(&svg).is_empty());
    }

    #[test]
    fn identity_lines_are_horizontal_and_counted() {
        let shape = GridShape::new(4, 4);
        let m = Matching::from_forward(shape, shape, (0..16).map(Some).collect()).unwrap();
        let mut mask = BinaryMask::ones(4, 4);
        mask.set(3, false);
        mask.set(9, false);
        let svg = match_viz(&image(), &image(), &m, &mask).unwrap();
        let ls = lines(&svg);
        assert_eq!(ls.len(), mask.popcount());
        for (_, y1, _, y2) in ls {
            assert_eq!(y1, y2);
        }
        assert_eq!(svg, match_viz(&image(), &image(), &m, &mask).unwrap());
    }
}
