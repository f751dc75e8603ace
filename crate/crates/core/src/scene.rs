//! Synthetic scene specifications and a deterministic, aliasing-free
//! rasterizer: flat-colored shapes plus 5x7 bitmap glyphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::knowledge::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    /// Tiny texture mark, below the detector size floor.
    Dot,
}

impl ShapeKind {
    pub fn category(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
            ShapeKind::Dot => "dot",
        }
    }

    pub fn plural(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Star => "stars",
            ShapeKind::Cross => "crosses",
            ShapeKind::Dot => "dots",
        }
    }
}

pub const DETECTABLE_KINDS: [ShapeKind; 5] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Star,
    ShapeKind::Cross,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl ColorName {
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.85, 0.1, 0.1],
            ColorName::Green => [0.1, 0.7, 0.15],
            ColorName::Blue => [0.15, 0.25, 0.85],
            ColorName::Yellow => [0.9, 0.85, 0.1],
            ColorName::White => [0.98, 0.98, 0.98],
            ColorName::Black => [0.05, 0.05, 0.05],
        }
    }

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::White => "white",
            ColorName::Black => "black",
        }
    }
}

pub const SHAPE_COLORS: [ColorName; 4] =
    [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextSpec {
    pub text: String,
    /// Top-left corner of the rendered string.
    pub origin: (u32, u32),
    /// Integer glyph magnification.
    pub scale: u32,
    pub color: ColorName,
}

impl TextSpec {
    pub fn bbox(&self) -> BoundingBox {
        let (w, h) = text_extent(&self.text, self.scale);
        BoundingBox {
            x0: self.origin.0,
            y0: self.origin.1,
            x1: self.origin.0 + w,
            y1: self.origin.1 + h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Natural,
    DocumentLike,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width) in pixels.
    pub canvas: (usize, usize),
    pub shapes: Vec<ShapeSpec>,
    pub texts: Vec<TextSpec>,
    pub kind: SceneKind,
}

impl SceneSpec {
    pub fn empty(canvas: (usize, usize), kind: SceneKind) -> Self {
        SceneSpec { canvas, shapes: Vec::new(), texts: Vec::new(), kind }
    }

    pub fn background(&self) -> [f64; 3] {
        match self.kind {
            SceneKind::Natural => [0.75, 0.75, 0.75],
            SceneKind::DocumentLike => [0.98, 0.98, 0.98],
        }
    }

    /// Fraction of the canvas covered by text bounding boxes, clipped to 1.
    pub fn text_area_fraction(&self) -> f64 {
        let canvas_area = (self.canvas.0 * self.canvas.1) as f64;
        if canvas_area == 0.0 {
            return 0.0;
        }
        let text_area: f64 = self.texts.iter().map(|t| t.bbox().area() as f64).sum();
        (text_area / canvas_area).min(1.0)
    }

    fn check_bounds(&self, bbox: &BoundingBox) -> Result<()> {
        let (h, w) = self.canvas;
        if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
            return Err(Error::Contract(format!("degenerate box {bbox:?}")));
        }
        if bbox.x1 as usize > w || bbox.y1 as usize > h {
            return Err(Error::Contract(format!(
                "box {bbox:?} outside canvas {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Painter's-order rasterization onto the background color.
    pub fn render(&self) -> Result<ImageGrid> {
        let (h, w) = self.canvas;
        let mut img = ImageGrid::filled(h, w, self.background());
        for shape in &self.shapes {
            self.check_bounds(&shape.bbox)?;
            draw_shape(&mut img, shape);
        }
        for text in &self.texts {
            self.check_bounds(&text.bbox())?;
            draw_text(&mut img, text)?;
        }
        Ok(img)
    }

    /// Short description used as the pretraining caption target.
    pub fn caption(&self) -> String {
        let mut parts: Vec<String> = self
            .shapes
            .iter()
            .filter(|s| s.kind != ShapeKind::Dot)
            .take(3)
            .map(|s| format!("a {} {}", s.color.word(), s.kind.category()))
            .collect();
        for t in self.texts.iter().take(1) {
            parts.push(format!("the text {}", t.text.to_lowercase()));
        }
        if parts.is_empty() {
            "an empty scene".to_string()
        } else {
            parts.join(" and ")
        }
    }
}

fn draw_shape(img: &mut ImageGrid, shape: &ShapeSpec) {
    let b = &shape.bbox;
    let rgb = shape.color.rgb();
    let (x0, y0, x1, y1) = (b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64);
    let (w, h) = (x1 - x0, y1 - y0);
    let cx = (x0 + x1) as f64 / 2.0;
    let cy = (y0 + y1) as f64 / 2.0;
    let r = (w.min(h) as f64) / 2.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match shape.kind {
                ShapeKind::Square | ShapeKind::Dot => true,
                ShapeKind::Circle => {
                    (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r
                }
                ShapeKind::Triangle => {
                    // Upward triangle: apex at top center, base at bottom.
                    let t = (py - y0 as f64) / h as f64;
                    (px - cx).abs() <= t * w as f64 / 2.0
                }
                ShapeKind::Star => {
                    // Diamond plus a thin vertical/horizontal cross.
                    let dx = (px - cx).abs();
                    let dy = (py - cy).abs();
                    dx + dy <= r || dx <= r / 4.0 || dy <= r / 4.0
                }
                ShapeKind::Cross => {
                    let dx = (px - cx).abs();
                    let dy = (py - cy).abs();
                    dx <= w as f64 / 6.0 || dy <= h as f64 / 6.0
                }
            };
            if inside {
                img.set_pixel(y as usize, x as usize, rgb);
            }
        }
    }
}

// ── 5x7 bitmap font ──────────────────────────────────────────────────────

pub const GLYPH_WIDTH: u32 = 5;
pub const GLYPH_HEIGHT: u32 = 7;
/// Horizontal advance per glyph (one column of spacing).
pub const GLYPH_ADVANCE: u32 = 6;

/// Pixel extent of a rendered string at a given scale.
pub fn text_extent(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    if n == 0 {
        return (0, 0);
    }
    (((n - 1) * GLYPH_ADVANCE + GLYPH_WIDTH) * scale, GLYPH_HEIGHT * scale)
}

fn draw_text(img: &mut ImageGrid, text: &TextSpec) -> Result<()> {
    let rgb = text.color.rgb();
    let mut x_cursor = text.origin.0;
    for ch in text.text.chars() {
        let glyph = glyph_rows(ch)
            .ok_or_else(|| Error::Generation(format!("no glyph for character {ch:?}")))?;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH_WIDTH {
                if bits & (0x10 >> col) != 0 {
                    for dy in 0..text.scale {
                        for dx in 0..text.scale {
                            let y = text.origin.1 + row as u32 * text.scale + dy;
                            let x = x_cursor + col * text.scale + dx;
                            img.set_pixel(y as usize, x as usize, rgb);
                        }
                    }
                }
            }
        }
        x_cursor += GLYPH_ADVANCE * text.scale;
    }
    Ok(())
}

/// Row bitmaps (bit 4 = leftmost column) for A-Z and 0-9.
pub fn glyph_rows(ch: char) -> Option<[u8; 7]> {
    let rows = match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        _ => return None,
    };
    Some(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_scene() -> SceneSpec {
        SceneSpec {
            canvas: (64, 64),
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Circle,
                    color: ColorName::Red,
                    bbox: BoundingBox { x0: 8, y0: 8, x1: 24, y1: 24 },
                },
                ShapeSpec {
                    kind: ShapeKind::Dot,
                    color: ColorName::Blue,
                    bbox: BoundingBox { x0: 40, y0: 40, x1: 42, y1: 42 },
                },
            ],
            texts: vec![TextSpec {
                text: "AB7".into(),
                origin: (4, 44),
                scale: 2,
                color: ColorName::Black,
            }],
            kind: SceneKind::Natural,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let scene = demo_scene();
        let a = scene.render().unwrap();
        let b = scene.render().unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn circle_center_painted_background_preserved() {
        let img = demo_scene().render().unwrap();
        assert_eq!(img.pixel(16, 16), ColorName::Red.rgb());
        assert_eq!(img.pixel(0, 0), [0.75, 0.75, 0.75]);
        assert_eq!(img.pixel(41, 41), ColorName::Blue.rgb());
    }

    #[test]
    fn out_of_canvas_shape_is_error() {
        let mut scene = demo_scene();
        scene.shapes[0].bbox.x1 = 200;
        assert!(scene.render().is_err());
    }

    #[test]
    fn text_extent_matches_glyph_metrics() {
        assert_eq!(text_extent("AB7", 2), (2 * (2 * 6 + 5), 14));
        assert_eq!(text_extent("", 1), (0, 0));
    }

    #[test]
    fn glyphs_are_distinct() {
        let chars: Vec<char> = ('A'..='Z').chain('0'..='9').collect();
        for (i, a) in chars.iter().enumerate() {
            for b in chars.iter().skip(i + 1) {
                assert_ne!(glyph_rows(*a), glyph_rows(*b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn caption_lists_shapes_and_text() {
        let scene = demo_scene();
        assert_eq!(scene.caption(), "a red circle and the text ab7");
        let empty = SceneSpec::empty((16, 16), SceneKind::Natural);
        assert_eq!(empty.caption(), "an empty scene");
    }
}
