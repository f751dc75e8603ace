//! Structural knowledge: typed detection and OCR records, their bit-exact
//! text-template serialization, the chart/document detection filter, and
//! detector-noise simulation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{SceneSpec, ShapeKind};

// ── Types ────────────────────────────────────────────────────────────────

/// Integer pixel box, `x0 < x1`, `y0 < y1`, right/bottom exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0) as u64) * (self.y1.saturating_sub(self.y0) as u64)
    }

    pub fn validate(&self, canvas: Option<(u32, u32)>) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Contract(format!("empty or inverted box {self:?}")));
        }
        if let Some((w, h)) = canvas {
            if self.x1 > w || self.y1 > h {
                return Err(Error::Contract(format!("box {self:?} outside {w}x{h} image")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedInstance {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl DetectedInstance {
    pub fn validate(&self, canvas: Option<(u32, u32)>) -> Result<()> {
        if self.category.is_empty() {
            return Err(Error::Contract("empty category".into()));
        }
        if !self
            .category
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '_' || c == '-')
        {
            return Err(Error::Contract(format!(
                "category {:?} outside [a-z0-9 _-]",
                self.category
            )));
        }
        self.bbox.validate(canvas)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrSegment {
    pub text: String,
}

impl OcrSegment {
    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Contract("empty OCR segment".into()));
        }
        if self.text.contains('\n') {
            return Err(Error::Contract("newline inside OCR segment".into()));
        }
        Ok(())
    }
}

/// Ordered detections plus OCR segments; order is extraction order and is
/// preserved through serialize/parse.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuralKnowledge {
    pub instances: Vec<DetectedInstance>,
    pub ocr: Vec<OcrSegment>,
}

impl StructuralKnowledge {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty() && self.ocr.is_empty()
    }

    pub fn validate(&self, canvas: Option<(u32, u32)>) -> Result<()> {
        for inst in &self.instances {
            inst.validate(canvas)?;
        }
        for seg in &self.ocr {
            seg.validate()?;
        }
        Ok(())
    }
}

// ── Template serialization ───────────────────────────────────────────────

const OBJECTS_PREAMBLE: &str =
    "In addition to the image content, it also provides possible objects contained in the image and their coordinates.";
const OBJECTS_HEADER: &str = "Objects and their coordinates:";
const OCR_PREAMBLE: &str = "There may be some OCR text information in the image.";
const OCR_HEADER: &str = "OCR Information:";
const CLOSING: &str = "Please combine all above information when answering the question.";

fn escape_ocr(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ',' => out.push_str("\\,"),
            _ => out.push(c),
        }
    }
    out
}

/// Canonical text form of the knowledge record. Each block is its preamble
/// sentence, a header, and one item line; items are joined by ", " with a
/// trailing comma. An empty block is omitted entirely; an empty record
/// serializes to the empty string.
pub fn serialize_template(sk: &StructuralKnowledge) -> Result<String> {
    sk.validate(None)?;
    if sk.is_empty() {
        return Ok(String::new());
    }
    let mut lines: Vec<String> = Vec::new();
    if !sk.instances.is_empty() {
        lines.push(OBJECTS_PREAMBLE.to_string());
        lines.push(OBJECTS_HEADER.to_string());
        let tuples: Vec<String> = sk
            .instances
            .iter()
            .map(|i| {
                format!(
                    "({}, {}, {}, {}, {})",
                    i.category, i.bbox.x0, i.bbox.y0, i.bbox.x1, i.bbox.y1
                )
            })
            .collect();
        lines.push(format!("{},", tuples.join(", ")));
    }
    if !sk.ocr.is_empty() {
        lines.push(OCR_PREAMBLE.to_string());
        lines.push(OCR_HEADER.to_string());
        let texts: Vec<String> = sk.ocr.iter().map(|s| escape_ocr(&s.text)).collect();
        lines.push(format!("{},", texts.join(", ")));
    }
    lines.push(CLOSING.to_string());
    Ok(lines.join("\n"))
}

struct LineCursor<'a> {
    line: &'a str,
    lineno: usize,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(line: &'a str, lineno: usize) -> Self {
        LineCursor { line, lineno, chars: line.chars().collect(), pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.lineno, col: self.pos + 1, msg: msg.into() }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.bump() {
            Some(got) if got == c => Ok(()),
            Some(got) => Err(self.err(format!("expected {c:?}, found {got:?}"))),
            None => Err(self.err(format!("expected {c:?}, found end of line"))),
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.chars.len()
    }
}

fn parse_u32(cur: &mut LineCursor) -> Result<u32> {
    let start = cur.pos;
    while cur.peek().map(|c| c.is_ascii_digit()).unwrap_or(false) {
        cur.bump();
    }
    if cur.pos == start {
        return Err(cur.err("expected an integer"));
    }
    let s: String = cur.chars[start..cur.pos].iter().collect();
    s.parse::<u32>().map_err(|_| {
        Error::Parse { line: cur.lineno, col: start + 1, msg: format!("integer {s:?} out of range") }
    })
}

fn parse_instances_line(line: &str, lineno: usize) -> Result<Vec<DetectedInstance>> {
    let mut cur = LineCursor::new(line, lineno);
    let mut out = Vec::new();
    loop {
        cur.expect('(')?;
        let start = cur.pos;
        while cur
            .peek()
            .map(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '_' || c == '-')
            .unwrap_or(false)
        {
            cur.bump();
        }
        if cur.pos == start {
            return Err(cur.err("expected a category"));
        }
        let category: String = cur.chars[start..cur.pos].iter().collect();
        let mut nums = [0u32; 4];
        for n in nums.iter_mut() {
            cur.expect(',')?;
            cur.expect(' ')?;
            *n = parse_u32(&mut cur)?;
        }
        cur.expect(')')?;
        let bbox = BoundingBox { x0: nums[0], y0: nums[1], x1: nums[2], y1: nums[3] };
        let inst = DetectedInstance { category, bbox };
        if let Err(Error::Contract(msg)) = inst.validate(None) {
            return Err(cur.err(msg));
        }
        out.push(inst);
        cur.expect(',')?;
        if cur.at_end() {
            return Ok(out);
        }
        cur.expect(' ')?;
    }
}

fn parse_ocr_line(line: &str, lineno: usize) -> Result<Vec<OcrSegment>> {
    let mut cur = LineCursor::new(line, lineno);
    let mut out = Vec::new();
    let mut text = String::new();
    loop {
        match cur.bump() {
            Some('\\') => match cur.bump() {
                Some(c @ ('\\' | ',')) => text.push(c),
                Some(c) => return Err(cur.err(format!("invalid escape \\{c}"))),
                None => return Err(cur.err("dangling escape at end of line")),
            },
            Some(',') => {
                if text.is_empty() {
                    return Err(cur.err("empty OCR segment"));
                }
                out.push(OcrSegment { text: std::mem::take(&mut text) });
                if cur.at_end() {
                    return Ok(out);
                }
                cur.expect(' ')?;
            }
            Some(c) => text.push(c),
            None => return Err(cur.err("OCR line must end with an unescaped comma")),
        }
    }
}

/// Inverse of [`serialize_template`]: `parse(serialize(sk)) == sk` for every
/// valid record, and `serialize(parse(s)) == s` for every emitted string.
pub fn parse_template(s: &str) -> Result<StructuralKnowledge> {
    if s.is_empty() {
        return Ok(StructuralKnowledge::default());
    }
    let lines: Vec<&str> = s.split('\n').collect();
    let mut idx = 0;
    let mut sk = StructuralKnowledge::default();

    let expect_line = |lines: &[&str], idx: usize, want: &str| -> Result<()> {
        match lines.get(idx) {
            Some(&got) if got == want => Ok(()),
            Some(&got) => {
                let col = want
                    .chars()
                    .zip(got.chars())
                    .take_while(|(a, b)| a == b)
                    .count()
                    + 1;
                Err(Error::Parse { line: idx + 1, col, msg: format!("expected {want:?}") })
            }
            None => Err(Error::Parse { line: idx + 1, col: 1, msg: format!("missing line {want:?}") }),
        }
    };

    if lines.get(idx) == Some(&OBJECTS_PREAMBLE) {
        idx += 1;
        expect_line(&lines, idx, OBJECTS_HEADER)?;
        idx += 1;
        let line = lines
            .get(idx)
            .ok_or(Error::Parse { line: idx + 1, col: 1, msg: "missing object tuples".into() })?;
        sk.instances = parse_instances_line(line, idx + 1)?;
        idx += 1;
    }
    if lines.get(idx) == Some(&OCR_PREAMBLE) {
        idx += 1;
        expect_line(&lines, idx, OCR_HEADER)?;
        idx += 1;
        let line = lines
            .get(idx)
            .ok_or(Error::Parse { line: idx + 1, col: 1, msg: "missing OCR texts".into() })?;
        sk.ocr = parse_ocr_line(line, idx + 1)?;
        idx += 1;
    }
    if sk.is_empty() {
        return Err(Error::Parse { line: 1, col: 1, msg: "no recognizable block header".into() });
    }
    expect_line(&lines, idx, CLOSING)?;
    idx += 1;
    if idx != lines.len() {
        return Err(Error::Parse {
            line: idx + 1,
            col: 1,
            msg: "trailing content after closing sentence".into(),
        });
    }
    Ok(sk)
}

// ── Chart/document filter ────────────────────────────────────────────────

/// Signals for the chart/document classifier behind the detection filter.
#[derive(Debug, Clone, Copy)]
pub struct FilterSignals {
    pub ocr_segment_count: usize,
    pub instance_count: usize,
    pub text_area_fraction: f64,
}

impl FilterSignals {
    pub fn from_knowledge(sk: &StructuralKnowledge, text_area_fraction: f64) -> Self {
        FilterSignals {
            ocr_segment_count: sk.ocr.len(),
            instance_count: sk.instances.len(),
            text_area_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_text_fraction: f64,
    pub min_ocr_segments: usize,
    pub max_instances: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { max_text_fraction: 0.3, min_ocr_segments: 10, max_instances: 3 }
    }
}

/// Drops object detections from chart/document-like images, where they are
/// usually useless; OCR is always preserved. Idempotent.
pub fn filter_detections(
    sk: &StructuralKnowledge,
    signals: &FilterSignals,
    cfg: &FilterConfig,
) -> StructuralKnowledge {
    let chart_like = signals.text_area_fraction > cfg.max_text_fraction
        || (signals.ocr_segment_count >= cfg.min_ocr_segments
            && signals.instance_count <= cfg.max_instances);
    if chart_like {
        StructuralKnowledge { instances: Vec::new(), ocr: sk.ocr.clone() }
    } else {
        sk.clone()
    }
}

// ── Detector-noise simulation ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-instance probability of swapping the category for another one.
    pub category_flip_rate: f64,
    /// Std of the rounded Gaussian added to each box corner, in pixels.
    pub box_jitter_std: f64,
    /// Per-character OCR substitution probability.
    pub ocr_corrupt_rate: f64,
    /// Per-instance drop probability.
    pub drop_rate: f64,
    /// Per-instance probability of appending one spurious detection.
    pub spurious_rate: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            category_flip_rate: 0.0,
            box_jitter_std: 0.0,
            ocr_corrupt_rate: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.category_flip_rate == 0.0
            && self.box_jitter_std == 0.0
            && self.ocr_corrupt_rate == 0.0
            && self.drop_rate == 0.0
            && self.spurious_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("category_flip_rate", self.category_flip_rate),
            ("ocr_corrupt_rate", self.ocr_corrupt_rate),
            ("drop_rate", self.drop_rate),
            ("spurious_rate", self.spurious_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.box_jitter_std < 0.0 {
            return Err(Error::Contract("box_jitter_std must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    /// Default rates for the noisy-knowledge condition.
    fn default() -> Self {
        NoiseConfig {
            category_flip_rate: 0.15,
            box_jitter_std: 4.0,
            ocr_corrupt_rate: 0.1,
            drop_rate: 0.1,
            spurious_rate: 0.1,
        }
    }
}

const OCR_SUBSTITUTION_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn jitter_coord(v: u32, normal: &Normal<f64>, rng: &mut ChaCha8Rng, max: u32) -> u32 {
    let delta = normal.sample(rng).round() as i64;
    (v as i64 + delta).clamp(0, max as i64) as u32
}

fn random_box(rng: &mut ChaCha8Rng, canvas: (u32, u32)) -> BoundingBox {
    let (w, h) = canvas;
    let x0 = rng.gen_range(0..w.saturating_sub(1).max(1));
    let y0 = rng.gen_range(0..h.saturating_sub(1).max(1));
    let x1 = rng.gen_range(x0 + 1..=w);
    let y1 = rng.gen_range(y0 + 1..=h);
    BoundingBox { x0, y0, x1, y1 }
}

/// Simulates detector and OCR noise. Deterministic per seed; the output
/// always satisfies the instance invariants for the given canvas.
pub fn inject_noise(
    sk: &StructuralKnowledge,
    cfg: &NoiseConfig,
    canvas: (u32, u32),
    category_vocab: &[&str],
    seed: u64,
) -> Result<StructuralKnowledge> {
    cfg.validate()?;
    let (w, h) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.box_jitter_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Contract(format!("bad jitter std: {e}")))?;
    let mut out = StructuralKnowledge::default();

    for inst in &sk.instances {
        if rng.gen::<f64>() < cfg.drop_rate {
            continue;
        }
        let mut category = inst.category.clone();
        if rng.gen::<f64>() < cfg.category_flip_rate {
            let others: Vec<&&str> =
                category_vocab.iter().filter(|c| **c != inst.category).collect();
            if !others.is_empty() {
                category = others[rng.gen_range(0..others.len())].to_string();
            }
        }
        let mut bbox = inst.bbox;
        if cfg.box_jitter_std > 0.0 {
            let x0 = jitter_coord(bbox.x0, &jitter, &mut rng, w.saturating_sub(1));
            let y0 = jitter_coord(bbox.y0, &jitter, &mut rng, h.saturating_sub(1));
            let x1 = jitter_coord(bbox.x1, &jitter, &mut rng, w).max(x0 + 1).min(w);
            let y1 = jitter_coord(bbox.y1, &jitter, &mut rng, h).max(y0 + 1).min(h);
            bbox = BoundingBox { x0, y0, x1, y1 };
        }
        out.instances.push(DetectedInstance { category, bbox });
    }

    for seg in &sk.ocr {
        let text: String = seg
            .text
            .chars()
            .map(|c| {
                if rng.gen::<f64>() < cfg.ocr_corrupt_rate {
                    OCR_SUBSTITUTION_ALPHABET[rng.gen_range(0..OCR_SUBSTITUTION_ALPHABET.len())]
                        as char
                } else {
                    c
                }
            })
            .collect();
        out.ocr.push(OcrSegment { text });
    }

    for _ in &sk.instances {
        if rng.gen::<f64>() < cfg.spurious_rate && !category_vocab.is_empty() {
            let category = category_vocab[rng.gen_range(0..category_vocab.len())].to_string();
            out.instances.push(DetectedInstance { category, bbox: random_box(&mut rng, canvas) });
        }
    }

    out.validate(Some(canvas))?;
    Ok(out)
}

// ── Ground-truth extraction ──────────────────────────────────────────────

/// Shapes with a side below this floor are treated as undetectable texture
/// and never appear in extracted knowledge.
pub const DETECTOR_MIN_SIDE: u32 = 5;

/// Reads exact categories, boxes, and text strings out of a scene
/// specification, in painter's order. Stands in for running real detection
/// and OCR tools; also supplies the ground-truth knowledge condition.
pub fn oracle_extract(scene: &SceneSpec) -> StructuralKnowledge {
    let mut sk = StructuralKnowledge::default();
    for shape in &scene.shapes {
        if shape.kind == ShapeKind::Dot {
            continue;
        }
        let b = shape.bbox;
        if b.x1 - b.x0 < DETECTOR_MIN_SIDE || b.y1 - b.y0 < DETECTOR_MIN_SIDE {
            continue;
        }
        sk.instances.push(DetectedInstance {
            category: shape.kind.category().to_string(),
            bbox: b,
        });
    }
    for text in &scene.texts {
        sk.ocr.push(OcrSegment { text: text.text.clone() });
    }
    sk
}

// ── Randomized fixtures ──────────────────────────────────────────────────

/// Random valid record for round-trip and robustness tests. Texts cover the
/// printable characters that stress escaping (commas, backslashes, spaces).
pub fn random_sk(rng: &mut ChaCha8Rng, max_items: usize, canvas: (u32, u32)) -> StructuralKnowledge {
    const CATEGORY_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 _-";
    const TEXT_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 ,\\()._-?!";
    let n_inst = rng.gen_range(0..=max_items);
    let n_ocr = rng.gen_range(0..=max_items);
    let mut sk = StructuralKnowledge::default();
    for _ in 0..n_inst {
        let len = rng.gen_range(1..=10);
        let category: String = (0..len)
            .map(|_| CATEGORY_CHARS[rng.gen_range(0..CATEGORY_CHARS.len())] as char)
            .collect();
        sk.instances.push(DetectedInstance { category, bbox: random_box(rng, canvas) });
    }
    for _ in 0..n_ocr {
        let len = rng.gen_range(1..=12);
        let text: String = (0..len)
            .map(|_| TEXT_CHARS[rng.gen_range(0..TEXT_CHARS.len())] as char)
            .collect();
        sk.ocr.push(OcrSegment { text });
    }
    sk
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;

    fn dog_exit_sk() -> StructuralKnowledge {
        StructuralKnowledge {
            instances: vec![DetectedInstance {
                category: "dog".into(),
                bbox: BoundingBox { x0: 10, y0: 20, x1: 110, y1: 220 },
            }],
            ocr: vec![OcrSegment { text: "EXIT".into() }],
        }
    }

    #[test]
    fn serialize_full_template() {
        let text = serialize_template(&dog_exit_sk()).unwrap();
        let expect = "In addition to the image content, it also provides possible objects contained in the image and their coordinates.\n\
                      Objects and their coordinates:\n\
                      (dog, 10, 20, 110, 220),\n\
                      There may be some OCR text information in the image.\n\
                      OCR Information:\n\
                      EXIT,\n\
                      Please combine all above information when answering the question.";
        assert_eq!(text, expect);
    }

    #[test]
    fn empty_record_serializes_to_empty_string() {
        assert_eq!(serialize_template(&StructuralKnowledge::default()).unwrap(), "");
        assert_eq!(parse_template("").unwrap(), StructuralKnowledge::default());
    }

    #[test]
    fn instances_only_omits_ocr_block() {
        let mut sk = dog_exit_sk();
        sk.ocr.clear();
        let text = serialize_template(&sk).unwrap();
        assert!(text.contains("Objects and their coordinates:"));
        assert!(!text.contains("OCR"));
        assert!(text.ends_with("Please combine all above information when answering the question."));
        assert_eq!(parse_template(&text).unwrap(), sk);
    }

    #[test]
    fn ocr_only_omits_objects_block() {
        let mut sk = dog_exit_sk();
        sk.instances.clear();
        let text = serialize_template(&sk).unwrap();
        assert!(!text.contains("Objects"));
        assert_eq!(parse_template(&text).unwrap(), sk);
    }

    #[test]
    fn inverted_box_is_parse_error_with_position() {
        let text = "In addition to the image content, it also provides possible objects contained in the image and their coordinates.\n\
                    Objects and their coordinates:\n\
                    (dog, 10, 20, 5, 220),\n\
                    Please combine all above information when answering the question.";
        match parse_template(text) {
            Err(Error::Parse { line, col, .. }) => {
                assert_eq!(line, 3);
                assert!(col > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_name_line_and_column() {
        assert!(matches!(parse_template("garbage"), Err(Error::Parse { line: 1, .. })));
        let missing_header = format!("{OBJECTS_PREAMBLE}\nwrong line");
        assert!(matches!(parse_template(&missing_header), Err(Error::Parse { line: 2, .. })));
        let bad_tuple = format!("{OBJECTS_PREAMBLE}\n{OBJECTS_HEADER}\n(dog 1, 2, 3, 4),\n{CLOSING}");
        assert!(matches!(parse_template(&bad_tuple), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn escaped_commas_round_trip() {
        let sk = StructuralKnowledge {
            instances: vec![],
            ocr: vec![
                OcrSegment { text: "STOP, GO".into() },
                OcrSegment { text: "a\\b,c".into() },
                OcrSegment { text: " leading space".into() },
            ],
        };
        let text = serialize_template(&sk).unwrap();
        assert!(text.contains("STOP\\, GO"));
        assert_eq!(parse_template(&text).unwrap(), sk);
    }

    #[test]
    fn randomized_round_trip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let sk = random_sk(&mut rng, 6, (640, 480));
            let text = serialize_template(&sk).unwrap();
            let back = parse_template(&text).unwrap();
            assert_eq!(back, sk, "template was:\n{text}");
            // Canonical idempotence in the other direction.
            assert_eq!(serialize_template(&back).unwrap(), text);
        }
    }

    #[test]
    fn filter_rule_and_idempotence() {
        let sk = dog_exit_sk();
        let cfg = FilterConfig::default();

        let chart = FilterSignals { ocr_segment_count: 40, instance_count: 2, text_area_fraction: 0.6 };
        let filtered = filter_detections(&sk, &chart, &cfg);
        assert!(filtered.instances.is_empty());
        assert_eq!(filtered.ocr, sk.ocr);

        let natural = FilterSignals { ocr_segment_count: 0, instance_count: 1, text_area_fraction: 0.02 };
        assert_eq!(filter_detections(&sk, &natural, &cfg), sk);

        let refreshed = FilterSignals::from_knowledge(&filtered, 0.6);
        assert_eq!(filter_detections(&filtered, &refreshed, &cfg), filtered);
    }

    #[test]
    fn ocr_dense_low_instance_images_are_chart_like() {
        let sk = dog_exit_sk();
        let cfg = FilterConfig::default();
        let signals = FilterSignals { ocr_segment_count: 10, instance_count: 3, text_area_fraction: 0.1 };
        assert!(filter_detections(&sk, &signals, &cfg).instances.is_empty());
    }

    #[test]
    fn zero_noise_is_identity() {
        let sk = dog_exit_sk();
        let out = inject_noise(&sk, &NoiseConfig::zero(), (640, 480), &["dog", "cat"], 3).unwrap();
        assert_eq!(out, sk);
    }

    #[test]
    fn full_flip_changes_every_surviving_category() {
        let mut sk = dog_exit_sk();
        sk.instances.push(DetectedInstance {
            category: "cat".into(),
            bbox: BoundingBox { x0: 1, y0: 1, x1: 5, y1: 5 },
        });
        let cfg = NoiseConfig { category_flip_rate: 1.0, ..NoiseConfig::zero() };
        let out = inject_noise(&sk, &cfg, (640, 480), &["dog", "cat", "bird"], 9).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_ne!(out.instances[0].category, "dog");
        assert_ne!(out.instances[1].category, "cat");
    }

    #[test]
    fn noise_is_deterministic_per_seed_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sk = random_sk(&mut rng, 8, (64, 64));
        let cfg = NoiseConfig::default();
        let a = inject_noise(&sk, &cfg, (64, 64), &["dog", "cat"], 7).unwrap();
        let b = inject_noise(&sk, &cfg, (64, 64), &["dog", "cat"], 7).unwrap();
        assert_eq!(a, b);
        a.validate(Some((64, 64))).unwrap();
        let c = inject_noise(&sk, &cfg, (64, 64), &["dog", "cat"], 8).unwrap();
        // Different seed, overwhelmingly likely to differ for a nonempty record.
        if !sk.is_empty() {
            assert_ne!(a, c);
        }
    }

    #[test]
    fn oracle_reads_scene_spec() {
        use crate::scene::*;
        let scene = SceneSpec {
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
            texts: vec![TextSpec { text: "AB7".into(), origin: (4, 44), scale: 2, color: ColorName::Black }],
            kind: SceneKind::Natural,
        };
        let sk = oracle_extract(&scene);
        assert_eq!(sk.instances.len(), 1);
        assert_eq!(sk.instances[0].category, "circle");
        assert_eq!(sk.instances[0].bbox, BoundingBox { x0: 8, y0: 8, x1: 24, y1: 24 });
        assert_eq!(sk.ocr, vec![OcrSegment { text: "AB7".into() }]);

        let empty = oracle_extract(&SceneSpec::empty((32, 32), SceneKind::Natural));
        assert!(empty.is_empty());
    }

    #[test]
    fn json_sidecar_round_trip() {
        let sk = dog_exit_sk();
        let json = serde_json::to_string(&sk).unwrap();
        assert!(json.contains("\"category\":\"dog\""));
        let back: StructuralKnowledge = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sk);
    }
}
