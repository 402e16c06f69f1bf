//! Deterministic synthetic glyph imagery.
//!
//! Characters come from a fixed 5×7 bitmap font (A–Z, 0–9) drawn at a 6 px
//! pitch. Every generator is a pure function of its seed, so identical specs
//! produce byte-identical images in any process.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Rng, Tensor};
use crate::emit;
use crate::error::{Error, Result};

pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const PITCH: usize = GLYPH_W + 1;
/// Token id used when text is withheld.
pub const UNK_ID: usize = 36;
pub const VOCAB: usize = 37;

#[rustfmt::skip]
const FONT: [[u8; 7]; 36] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
];

/// Alphabet index of `c`, or `None` outside the alphabet.
pub fn char_id(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

/// The 7 row masks of `c`; bit 4 is the leftmost pixel.
pub fn glyph_bitmap(c: char) -> Option<[u8; 7]> {
    char_id(c).map(|i| FONT[i])
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            char_id(c).ok_or_else(|| Error::InvalidConfig(format!("`{c}` is not in the alphabet")))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    ids.iter()
        .map(|&i| {
            ALPHABET
                .chars()
                .nth(i)
                .ok_or_else(|| Error::InvalidConfig(format!("token {i} has no glyph")))
        })
        .collect()
}

/// Pixel width of a rendered string.
pub fn text_width(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * PITCH - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.width <= self.x + self.width
            && other.y + other.height <= self.y + self.height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedString {
    pub text: String,
    pub x: usize,
    pub y: usize,
}

impl PlacedString {
    pub fn bounds(&self) -> Rect {
        Rect {
            x: self.x,
            y: self.y,
            width: text_width(self.text.chars().count()),
            height: GLYPH_H,
        }
    }
}

/// Grayscale image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub strings: Vec<PlacedString>,
    pub seed: u64,
}

impl GlyphImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
            strings: Vec::new(),
            seed: 0,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// All placed text, joined with spaces in placement order.
    pub fn text(&self) -> String {
        self.strings
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stamp `text` with its top-left corner at (`x`, `y`).
    pub fn draw_string(&mut self, text: &str, x: usize, y: usize) -> Result<()> {
        let n = text.chars().count();
        if n > 0 && (x + text_width(n) > self.width || y + GLYPH_H > self.height) {
            return Err(Error::StringTooLong {
                text: text.into(),
                width: self.width,
                height: self.height,
            });
        }
        for (k, c) in text.chars().enumerate() {
            let bitmap = glyph_bitmap(c)
                .ok_or_else(|| Error::InvalidConfig(format!("`{c}` is not in the alphabet")))?;
            for (r, bits) in bitmap.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                        self.pixels[(y + r) * self.width + x + k * PITCH + col] = 1.0;
                    }
                }
            }
        }
        if n > 0 {
            self.strings.push(PlacedString {
                text: text.into(),
                x,
                y,
            });
        }
        Ok(())
    }

    /// Add uniform noise in `[-amplitude, amplitude]` and clamp to `[0, 1]`.
    pub fn add_noise(&mut self, amplitude: f64, rng: &mut Rng) {
        if amplitude <= 0.0 {
            return;
        }
        for p in &mut self.pixels {
            *p = (*p + amplitude * (2.0 * rng.uniform() - 1.0)).clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<GlyphImage> {
        if rect.x + rect.width > self.width || rect.y + rect.height > self.height {
            return Err(Error::OutOfBounds(format!(
                "{rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = GlyphImage::blank(rect.height, rect.width);
        for r in 0..rect.height {
            for c in 0..rect.width {
                out.pixels[r * rect.width + c] = self.pixel(rect.y + r, rect.x + c);
            }
        }
        out.seed = self.seed;
        out.strings = self
            .strings
            .iter()
            .filter(|s| rect.contains(&s.bounds()))
            .map(|s| PlacedString {
                text: s.text.clone(),
                x: s.x - rect.x,
                y: s.y - rect.y,
            })
            .collect();
        Ok(out)
    }

    pub fn fill_rect(&mut self, rect: Rect, value: f64) {
        for r in rect.y..(rect.y + rect.height).min(self.height) {
            for c in rect.x..(rect.x + rect.width).min(self.width) {
                self.pixels[r * self.width + c] = value;
            }
        }
    }

    /// Non-overlapping `patch × patch` blocks flattened row-major, one row per
    /// patch, patches in raster order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::InvalidConfig(format!(
                "{}x{} image does not tile into {patch}px patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut data = Vec::with_capacity(self.pixels.len());
        for pr in 0..gh {
            for pc in 0..gw {
                for r in 0..patch {
                    let row = (pr * patch + r) * self.width + pc * patch;
                    data.extend_from_slice(&self.pixels[row..row + patch]);
                }
            }
        }
        Tensor::matrix(gh * gw, patch * patch, data)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        emit::write_pgm(path, self.width, self.height, &self.pixels)
    }
}

/// Render `text` at a seeded random position on a `height × width` canvas,
/// then add seeded noise.
pub fn render_glyphs(
    text: &str,
    size: (usize, usize),
    seed: u64,
    noise: f64,
) -> Result<GlyphImage> {
    let (height, width) = size;
    let n = text.chars().count();
    let need_w = text_width(n);
    if need_w > width || (n > 0 && GLYPH_H > height) {
        return Err(Error::StringTooLong {
            text: text.into(),
            width,
            height,
        });
    }
    let mut rng = Rng::seed_from(seed);
    let mut img = GlyphImage::blank(height, width);
    img.seed = seed;
    if n > 0 {
        let x = rng.below(width - need_w + 1);
        let y = rng.below(height - GLYPH_H + 1);
        img.draw_string(text, x, y)?;
    }
    img.add_noise(noise, &mut rng);
    Ok(img)
}

/// Reconstruction-probe sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSample {
    /// Full image the probe sees (target region zeroed when `mask_image`).
    pub context: GlyphImage,
    /// Ground-truth pixels of the target region.
    pub target: GlyphImage,
    pub target_rect: Rect,
    pub text: Vec<usize>,
    pub mask_image: bool,
    pub drop_text: bool,
}

impl ReconSample {
    pub fn with_flags(&self, mask_image: bool, drop_text: bool) -> ReconSample {
        let mut out = self.clone();
        if mask_image && !self.mask_image {
            out.context.fill_rect(self.target_rect, 0.0);
        }
        if drop_text {
            out.text.iter_mut().for_each(|t| *t = UNK_ID);
        }
        out.mask_image = mask_image || self.mask_image;
        out.drop_text = drop_text || self.drop_text;
        out
    }
}

/// Pair an image with the target region `rect`. Text tokens are the ids of
/// the strings lying entirely inside `rect`, concatenated left to right.
pub fn make_pair(image: &GlyphImage, rect: Rect) -> Result<ReconSample> {
    let target = image.crop(rect)?;
    let mut inside: Vec<&PlacedString> = target.strings.iter().collect();
    inside.sort_by_key(|s| (s.y, s.x));
    let text: String = inside.iter().map(|s| s.text.as_str()).collect();
    Ok(ReconSample {
        context: image.clone(),
        target,
        target_rect: rect,
        text: tokenize(&text)?,
        mask_image: false,
        drop_text: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub noise: f64,
    /// Cell size of the dense task (one glyph at most per cell).
    pub patch: usize,
    /// Probability a dense-task cell holds a glyph.
    pub fill_prob: f64,
    /// Height of a text band in probe images; one string per band.
    pub band_height: usize,
    pub max_len: usize,
    /// Horizontal start jitter of probe strings, in pixels.
    pub max_jitter: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 256,
            image_size: 32,
            noise: 0.05,
            patch: 8,
            fill_prob: 0.5,
            band_height: 8,
            max_len: 4,
            max_jitter: 0,
        }
    }
}

fn random_string(rng: &mut Rng, min_len: usize, max_len: usize) -> String {
    let len = min_len + rng.below(max_len - min_len + 1);
    let chars: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| chars[rng.below(chars.len())]).collect()
}

/// Probe image `index`: one random string per horizontal band, target is a
/// seeded choice of band.
pub fn probe_sample(spec: &DatasetSpec, index: usize) -> Result<ReconSample> {
    let size = spec.image_size;
    let band = spec.band_height;
    if band < GLYPH_H || !size.is_multiple_of(band) {
        return Err(Error::InvalidConfig(format!(
            "band height {band} must be >= {GLYPH_H} and divide {size}"
        )));
    }
    if spec.max_len == 0 || text_width(spec.max_len) + spec.max_jitter > size {
        return Err(Error::InvalidConfig("strings do not fit the band".into()));
    }
    let mut rng = Rng::with_stream(spec.seed, index as u64);
    let mut img = GlyphImage::blank(size, size);
    img.seed = spec.seed;
    let bands = size / band;
    for b in 0..bands {
        let s = random_string(&mut rng, 1, spec.max_len);
        let x = rng.below(spec.max_jitter + 1);
        let y = b * band + rng.below(band - GLYPH_H + 1);
        img.draw_string(&s, x, y)?;
    }
    let target_band = rng.below(bands);
    img.add_noise(spec.noise, &mut rng);
    let rect = Rect {
        x: 0,
        y: target_band * band,
        width: size,
        height: band,
    };
    make_pair(&img, rect)
}

pub fn probe_dataset(spec: &DatasetSpec) -> Result<Vec<ReconSample>> {
    (0..spec.count).map(|i| probe_sample(spec, i)).collect()
}

/// Images plus per-cell glyph labels (0 = background, `1 + char_id` otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBatch {
    pub images: Vec<GlyphImage>,
    pub labels: Vec<Vec<usize>>,
}

pub const DENSE_CLASSES: usize = 37;

/// Batch `index` of the dense per-cell glyph classification task.
pub fn downstream_task_batch(
    spec: &DatasetSpec,
    index: usize,
    batch_size: usize,
) -> Result<DenseBatch> {
    let (size, cell) = (spec.image_size, spec.patch);
    if cell < GLYPH_H || size % cell != 0 {
        return Err(Error::InvalidConfig(format!(
            "cell {cell} must be >= {GLYPH_H} and divide {size}"
        )));
    }
    let grid = size / cell;
    let chars: Vec<char> = ALPHABET.chars().collect();
    let mut images = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let stream = (index as u64) << 20 | b as u64;
        let mut rng = Rng::with_stream(spec.seed ^ 0x5eed_d0e5, stream);
        let mut img = GlyphImage::blank(size, size);
        img.seed = spec.seed;
        let mut lab = vec![0; grid * grid];
        for (cell_idx, slot) in lab.iter_mut().enumerate() {
            if rng.uniform() >= spec.fill_prob {
                continue;
            }
            let id = rng.below(chars.len());
            let x = (cell_idx % grid) * cell + rng.below(cell - GLYPH_W + 1);
            let y = (cell_idx / grid) * cell + rng.below(cell - GLYPH_H + 1);
            img.draw_string(&chars[id].to_string(), x, y)?;
            *slot = id + 1;
        }
        img.add_noise(spec.noise, &mut rng);
        images.push(img);
        labels.push(lab);
    }
    Ok(DenseBatch { images, labels })
}

#[derive(Serialize)]
struct IndexRecord<'a> {
    file: String,
    string: &'a str,
    target_rect: Rect,
}

/// Write each probe sample's context image as PGM plus a JSONL index.
pub fn dump_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let sample = probe_sample(spec, i)?;
        let file = format!("glyph_{i:05}.pgm");
        sample.context.write_pgm(&dir.join(&file))?;
        let string = detokenize(&sample.text)?;
        lines.push(serde_json::to_string(&IndexRecord {
            file,
            string: &string,
            target_rect: sample.target_rect,
        })?);
    }
    emit::write_lines(&dir.join("index.jsonl"), &lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let a = render_glyphs("AB12", (16, 32), 9, 0.0).unwrap();
        let b = render_glyphs("AB12", (16, 32), 9, 0.0).unwrap();
        assert_eq!(a, b);
        let c = render_glyphs("AB12", (16, 32), 9, 0.2).unwrap();
        let d = render_glyphs("AB12", (16, 32), 9, 0.2).unwrap();
        assert_eq!(c.pixels, d.pixels);
        assert!(c.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn drawn_a_matches_bitmap_table() {
        let mut img = GlyphImage::blank(10, 10);
        img.draw_string("A", 2, 1).unwrap();
        let table = glyph_bitmap('A').unwrap();
        for r in 0..10 {
            for c in 0..10 {
                let inside = (1..8).contains(&r) && (2..7).contains(&c);
                let expected = inside && table[r - 1] & (1 << (4 - (c - 2))) != 0;
                assert_eq!(
                    img.pixel(r, c),
                    if expected { 1.0 } else { 0.0 },
                    "({r},{c})"
                );
            }
        }
    }

    #[test]
    fn empty_string_is_background() {
        let img = render_glyphs("", (8, 8), 1, 0.0).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn too_long_is_an_error() {
        assert!(matches!(
            render_glyphs("ABCDEF", (8, 20), 0, 0.0),
            Err(Error::StringTooLong { .. })
        ));
    }

    #[test]
    fn token_round_trip() {
        let s = "HELLO42";
        assert_eq!(detokenize(&tokenize(s).unwrap()).unwrap(), s);
        assert!(tokenize("a").is_err());
    }

    #[test]
    fn full_rect_target_equals_context() {
        let img = render_glyphs("XY", (8, 16), 3, 0.1).unwrap();
        let pair = make_pair(
            &img,
            Rect {
                x: 0,
                y: 0,
                width: 16,
                height: 8,
            },
        )
        .unwrap();
        assert_eq!(pair.target.pixels, pair.context.pixels);
        assert_eq!(detokenize(&pair.text).unwrap(), "XY");
    }

    #[test]
    fn right_half_partition_by_coordinates() {
        let img = render_glyphs("Q", (8, 16), 5, 0.3).unwrap();
        let rect = Rect {
            x: 8,
            y: 0,
            width: 8,
            height: 8,
        };
        let pair = make_pair(&img, rect).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(pair.target.pixel(r, c), img.pixel(r, c + 8));
            }
        }
        let masked = pair.with_flags(true, false);
        for r in 0..8 {
            for c in 0..16 {
                let v = masked.context.pixel(r, c);
                if c >= 8 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, img.pixel(r, c));
                }
            }
        }
        // ground truth untouched by masking
        assert_eq!(masked.target, pair.target);
    }

    #[test]
    fn out_of_bounds_rect() {
        let img = GlyphImage::blank(8, 8);
        let rect = Rect {
            x: 4,
            y: 0,
            width: 8,
            height: 8,
        };
        assert!(matches!(make_pair(&img, rect), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn drop_text_uses_unk() {
        let spec = DatasetSpec::default();
        let s = probe_sample(&spec, 0).unwrap().with_flags(false, true);
        assert!(!s.text.is_empty());
        assert!(s.text.iter().all(|&t| t == UNK_ID));
    }

    #[test]
    fn single_glyph_single_cell() {
        let spec = DatasetSpec {
            fill_prob: 1.0,
            image_size: 8,
            patch: 8,
            ..DatasetSpec::default()
        };
        let batch = downstream_task_batch(&spec, 0, 1).unwrap();
        assert_eq!(batch.labels[0].len(), 1);
        assert!(batch.labels[0][0] > 0);
    }

    #[test]
    fn label_counts_match_recount() {
        let spec = DatasetSpec::default();
        let batch = downstream_task_batch(&spec, 3, 6).unwrap();
        for (img, lab) in batch.images.iter().zip(&batch.labels) {
            let grid = spec.image_size / spec.patch;
            let mut recount = vec![0usize; grid * grid];
            for s in &img.strings {
                recount[(s.y / spec.patch) * grid + s.x / spec.patch] =
                    1 + char_id(s.text.chars().next().unwrap()).unwrap();
            }
            assert_eq!(&recount, lab);
            assert_eq!(lab.iter().filter(|&&l| l > 0).count(), img.strings.len());
        }
        assert_eq!(batch, downstream_task_batch(&spec, 3, 6).unwrap());
    }

    #[test]
    fn patches_are_raster_ordered() {
        let mut img = GlyphImage::blank(4, 4);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = i as f64;
        }
        let t = img.patches(2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }
}
