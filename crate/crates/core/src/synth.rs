//! Procedural stand-in datasets in the real on-disk formats.
//!
//! Ten glyph classes are drawn from line segments on a seven-segment-like
//! frame (plus two diagonals), with random affine jitter, stroke width, and
//! pixel noise. Static images are written as IDX; event versions come from a
//! simple DVS model: the glyph is swept along three saccades and a pixel
//! emits an ON/OFF event whenever its log intensity moves more than a
//! contrast threshold away from the level at its last event.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_aer, encode_idx, gzip, sample_seed, Event, IdxData, IMAGE, SENSOR};
use crate::error::Result;

type Segment = ((f64, f64), (f64, f64));

// Frame corners in a unit box: x to the right, y down.
const TL: (f64, f64) = (0.0, 0.0);
const TR: (f64, f64) = (1.0, 0.0);
const ML: (f64, f64) = (0.0, 0.5);
const MR: (f64, f64) = (1.0, 0.5);
const BL: (f64, f64) = (0.0, 1.0);
const BR: (f64, f64) = (1.0, 1.0);

fn glyph_segments(class: usize) -> Vec<Segment> {
    let a = (TL, TR);
    let b = (TR, MR);
    let c = (MR, BR);
    let d = (BL, BR);
    let e = (ML, BL);
    let f = (TL, ML);
    let g = (ML, MR);
    match class {
        0 => vec![a, b, c, d, e, f],
        1 => vec![b, c],
        2 => vec![a, b, g, e, d],
        3 => vec![a, b, g, c, d],
        4 => vec![f, g, b, c],
        5 => vec![a, f, g, c, d],
        6 => vec![a, f, g, e, d, c],
        7 => vec![a, (TR, BL)],
        8 => vec![a, b, c, d, e, f, g],
        _ => vec![(TL, BR), (TR, BL)],
    }
}

fn dist_to_segment(p: (f64, f64), s: Segment) -> f64 {
    let ((x0, y0), (x1, y1)) = s;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - x0) * dx + (p.1 - y0) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders one jittered 28x28 glyph of `class`.
pub fn render_glyph(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let segs = glyph_segments(class % 10);
    let angle: f64 = rng.gen_range(-0.2..0.2);
    let scale_x: f64 = rng.gen_range(9.0..12.0);
    let scale_y: f64 = rng.gen_range(15.0..19.0);
    let shear: f64 = rng.gen_range(-0.25..0.25);
    let cx = 14.0 + rng.gen_range(-2.5..2.5);
    let cy = 14.0 + rng.gen_range(-2.5..2.5);
    let width: f64 = rng.gen_range(1.0..2.2);
    let peak: f64 = rng.gen_range(170.0..255.0);
    let (sin, cos) = angle.sin_cos();
    // Glyph-space point for an image pixel: undo translation, rotation,
    // shear, then scale into the unit box.
    let to_glyph = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        let rx = rx - shear * ry;
        (rx / scale_x + 0.5, ry / scale_y + 0.5)
    };
    let unit = 1.0 / scale_x.min(scale_y);
    let mut img = vec![0u8; IMAGE * IMAGE];
    for y in 0..IMAGE {
        for x in 0..IMAGE {
            let p = to_glyph(x as f64 + 0.5, y as f64 + 0.5);
            let d = segs.iter().map(|&s| dist_to_segment(p, s)).fold(f64::INFINITY, f64::min) / unit;
            let ink = (width - d + 0.5).clamp(0.0, 1.0);
            let noise = if rng.gen_bool(0.03) { rng.gen_range(0.0..120.0) } else { 0.0 };
            img[y * IMAGE + x] = (ink * peak + noise).min(255.0) as u8;
        }
    }
    img
}

fn sample_canvas(canvas: &[f64], x: f64, y: f64) -> f64 {
    let n = SENSOR as isize;
    let (x0, y0) = (x.floor(), y.floor());
    let (wx, wy) = (x - x0, y - y0);
    let at = |xi: isize, yi: isize| {
        if xi < 0 || yi < 0 || xi >= n || yi >= n {
            0.0
        } else {
            canvas[yi as usize * SENSOR + xi as usize]
        }
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    (at(xi, yi) * (1.0 - wx) + at(xi + 1, yi) * wx) * (1.0 - wy)
        + (at(xi, yi + 1) * (1.0 - wx) + at(xi + 1, yi + 1) * wx) * wy
}

/// Sensor events for a glyph swept along three 100 ms saccades.
pub fn saccade_events(image: &[u8], rng: &mut impl Rng) -> Vec<Event> {
    const CONTRAST: f64 = 0.25;
    const AMPLITUDE: f64 = 2.0;
    let pad = (SENSOR - IMAGE) / 2;
    let mut canvas = vec![0.0; SENSOR * SENSOR];
    for y in 0..IMAGE {
        for x in 0..IMAGE {
            canvas[(y + pad) * SENSOR + x + pad] = image[y * IMAGE + x] as f64 / 255.0;
        }
    }
    let log = |v: f64| (v + 0.05).ln();
    // Triangle path: right-down, left-down... back to start.
    let corners = [(0.0, 0.0), (AMPLITUDE, AMPLITUDE), (-AMPLITUDE, AMPLITUDE), (0.0, 0.0)];
    let mut reference: Vec<f64> = canvas.iter().map(|&v| log(v)).collect();
    let mut events = Vec::new();
    for ms in 0..300u32 {
        let leg = (ms / 100) as usize;
        let f = ((ms % 100) + 1) as f64 / 100.0;
        let (ax, ay) = corners[leg];
        let (bx, by) = corners[leg + 1];
        let (dx, dy) = (ax + (bx - ax) * f, ay + (by - ay) * f);
        for y in 0..SENSOR {
            for x in 0..SENSOR {
                let i = y * SENSOR + x;
                let level = log(sample_canvas(&canvas, x as f64 - dx, y as f64 - dy));
                let diff = level - reference[i];
                if diff.abs() >= CONTRAST {
                    events.push(Event {
                        x: x as u8,
                        y: y as u8,
                        polarity: (diff > 0.0) as u8,
                        timestamp_us: ms * 1000 + rng.gen_range(0..1000),
                    });
                    reference[i] = level;
                }
            }
        }
    }
    events.sort_by_key(|e| e.timestamp_us);
    events
}

/// Sizes of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

fn glyphs(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * IMAGE * IMAGE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 10;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
        pixels.extend(render_glyph(class, &mut rng));
        labels.push(class as u8);
    }
    (pixels, labels)
}

/// Writes gzipped IDX files in the F-MNIST layout under `root`.
pub fn write_image_dataset(root: &Path, spec: SynthSpec) -> Result<()> {
    fs::create_dir_all(root)?;
    for (prefix, count, seed) in [("train", spec.train, spec.seed), ("t10k", spec.test, spec.seed ^ 0x7e57)] {
        let (pixels, labels) = glyphs(count, seed);
        let images = IdxData::Images { rows: IMAGE, cols: IMAGE, pixels };
        fs::write(root.join(format!("{prefix}-images-idx3-ubyte.gz")), gzip(&encode_idx(&images))?)?;
        fs::write(root.join(format!("{prefix}-labels-idx1-ubyte.gz")), gzip(&encode_idx(&IdxData::Labels(labels)))?)?;
    }
    Ok(())
}

/// Writes `.bin` event files in the N-MNIST layout under `root`.
pub fn write_event_dataset(root: &Path, spec: SynthSpec) -> Result<()> {
    for (dir, count, seed) in [("Train", spec.train, spec.seed), ("Test", spec.test, spec.seed ^ 0x7e57)] {
        let (pixels, labels) = glyphs(count, seed);
        for d in 0..10 {
            fs::create_dir_all(root.join(dir).join(d.to_string()))?;
        }
        for (i, &label) in labels.iter().enumerate() {
            let img = &pixels[i * IMAGE * IMAGE..(i + 1) * IMAGE * IMAGE];
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ 0xe7e7, i));
            let bytes = encode_aer(&saccade_events(img, &mut rng))?;
            fs::write(root.join(dir).join(label.to_string()).join(format!("{i:05}.bin")), bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{decode_aer, events_to_spikes};

    #[test]
    fn glyph_classes_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ink: Vec<u32> = (0..10).map(|c| render_glyph(c, &mut rng).iter().map(|&p| p as u32).sum()).collect();
        assert!(ink.iter().all(|&v| v > 0));
        // "8" uses every segment of "0" plus the middle bar.
        assert_ne!(ink[0], ink[8]);
    }

    #[test]
    fn deterministic_rendering() {
        let a = render_glyph(3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = render_glyph(3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn saccades_produce_both_polarities_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = render_glyph(8, &mut rng);
        let ev = saccade_events(&img, &mut rng);
        assert!(ev.len() > 100);
        assert!(ev.iter().any(|e| e.polarity == 1) && ev.iter().any(|e| e.polarity == 0));
        assert!(ev.iter().all(|e| e.timestamp_us < 300_000));
        let round = decode_aer(&encode_aer(&ev).unwrap()).unwrap();
        assert_eq!(round, ev);
        assert!(events_to_spikes(&ev, 100).count() > 0);
    }
}
