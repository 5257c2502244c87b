//! Dataset file formats and spike encodings.
//!
//! * N-MNIST: one `.bin` file per sample under `<root>/{Train,Test}/<digit>/`,
//!   each a sequence of 5-byte address events.
//! * F-MNIST: IDX files, `{train,t10k}-{images-idx3,labels-idx1}-ubyte`,
//!   optionally with a `.gz` suffix.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape5, SpikeTensor};
use crate::training::SampleSource;

pub const SENSOR: usize = 34;
pub const IMAGE: usize = 28;
const MAX_TIMESTAMP: u32 = (1 << 23) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u8,
    pub y: u8,
    pub polarity: u8,
    pub timestamp_us: u32,
}

/// Decodes 5-byte records: x, y, then polarity in bit 7 of byte 2 and a
/// 23-bit big-endian microsecond timestamp in the remaining bits.
pub fn decode_aer(bytes: &[u8]) -> Result<Vec<Event>> {
    if !bytes.len().is_multiple_of(5) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % 5,
            msg: format!("truncated event record ({} trailing bytes)", bytes.len() % 5),
        });
    }
    let mut events = Vec::with_capacity(bytes.len() / 5);
    for (i, r) in bytes.chunks_exact(5).enumerate() {
        let offset = i * 5;
        if r[0] as usize >= SENSOR || r[1] as usize >= SENSOR {
            return Err(Error::Format { offset, msg: format!("event address ({}, {}) outside 34x34", r[0], r[1]) });
        }
        events.push(Event {
            x: r[0],
            y: r[1],
            polarity: r[2] >> 7,
            timestamp_us: ((r[2] as u32 & 0x7f) << 16) | ((r[3] as u32) << 8) | r[4] as u32,
        });
    }
    if events.windows(2).any(|w| w[1].timestamp_us < w[0].timestamp_us) {
        events.sort_by_key(|e| e.timestamp_us);
    }
    Ok(events)
}

pub fn encode_aer(events: &[Event]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(events.len() * 5);
    for (i, e) in events.iter().enumerate() {
        if e.x as usize >= SENSOR || e.y as usize >= SENSOR || e.polarity > 1 || e.timestamp_us > MAX_TIMESTAMP {
            return Err(Error::Format { offset: i * 5, msg: format!("event {e:?} cannot be encoded") });
        }
        let t = e.timestamp_us;
        out.extend_from_slice(&[e.x, e.y, (e.polarity << 7) | (t >> 16) as u8, (t >> 8) as u8, t as u8]);
    }
    Ok(out)
}

/// Bins events into 1 ms steps, `(1, 2, 34, 34, t_steps)`; channel is the
/// polarity, later events past the window are dropped, and coincident events
/// saturate to one spike.
pub fn events_to_spikes(events: &[Event], t_steps: usize) -> SpikeTensor {
    let mut s = SpikeTensor::zeros(Shape5 { n: 1, c: 2, h: SENSOR, w: SENSOR, t: t_steps });
    for e in events {
        let bin = (e.timestamp_us / 1000) as usize;
        if bin < t_steps {
            s.fire(0, e.polarity as usize, e.y as usize, e.x as usize, bin);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images { rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            IdxData::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn be_u32(b: &[u8], offset: usize) -> Result<u32> {
    b.get(offset..offset + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format { offset, msg: "header ends early".into() })
}

/// Decodes an IDX image (`0x00000803`) or label (`0x00000801`) file,
/// gzip-compressed or not.
pub fn decode_idx(bytes: &[u8]) -> Result<IdxData> {
    let raw = gunzip_if_needed(bytes)?;
    let b = &raw[..];
    let magic = be_u32(b, 0)?;
    let (header, expected) = match magic {
        0x0000_0803 => {
            let (n, r, c) = (be_u32(b, 4)? as usize, be_u32(b, 8)? as usize, be_u32(b, 12)? as usize);
            (16, n.checked_mul(r).and_then(|v| v.checked_mul(c)))
        }
        0x0000_0801 => (8, Some(be_u32(b, 4)? as usize)),
        m => return Err(Error::Format { offset: 0, msg: format!("unknown IDX magic {m:#010x}") }),
    };
    let expected = expected.ok_or_else(|| Error::Format { offset: 4, msg: "IDX dimensions overflow".into() })?;
    let body = &b[header..];
    if body.len() != expected {
        return Err(Error::Format {
            offset: header,
            msg: format!("IDX body has {} bytes, header declares {expected}", body.len()),
        });
    }
    Ok(if magic == 0x803 {
        IdxData::Images { rows: be_u32(b, 8)? as usize, cols: be_u32(b, 12)? as usize, pixels: body.to_vec() }
    } else {
        IdxData::Labels(body.to_vec())
    })
}

pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images { rows, cols, pixels } => {
            out.extend_from_slice(&0x803u32.to_be_bytes());
            out.extend_from_slice(&(data.len() as u32).to_be_bytes());
            out.extend_from_slice(&(*rows as u32).to_be_bytes());
            out.extend_from_slice(&(*cols as u32).to_be_bytes());
            out.extend_from_slice(pixels);
        }
        IdxData::Labels(l) => {
            out.extend_from_slice(&0x801u32.to_be_bytes());
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            out.extend_from_slice(l);
        }
    }
    out
}

pub fn gzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes)?;
    Ok(enc.finish()?)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[u8], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dh * dw);
    let fy = sh as f64 / dh as f64;
    let fx = sw as f64 / dw as f64;
    let px = |y: usize, x: usize| src[y * sw + x] as f64;
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f64;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f64;
            let top = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
            let bottom = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Rate code for a 28x28 image: resize to 34x34, then an independent
/// Bernoulli(pixel / 255) draw per pixel and time step.
pub fn encode_static(image: &[u8], t_steps: usize, seed: u64) -> Result<SpikeTensor> {
    if image.len() != IMAGE * IMAGE {
        return Err(Error::Shape(format!("expected a 28x28 image, got {} pixels", image.len())));
    }
    let probs = resize_bilinear(image, IMAGE, IMAGE, SENSOR, SENSOR);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; SENSOR * SENSOR * t_steps];
    for (trace, &v) in data.chunks_exact_mut(t_steps).zip(&probs) {
        let p = (v / 255.0).clamp(0.0, 1.0);
        if p == 0.0 {
            continue;
        }
        for s in trace.iter_mut() {
            *s = (rng.gen::<f64>() < p) as u8;
        }
    }
    SpikeTensor::from_vec(Shape5 { n: 1, c: 1, h: SENSOR, w: SENSOR, t: t_steps }, data)
}

/// Deterministic per-sample seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeded shuffle of `0..n`, split into `(train, validation)` with
/// `validation` holding `val_count` indices.
pub fn split_indices(n: usize, val_count: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_count > n {
        return Err(Error::Param(format!("validation size {val_count} exceeds {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - val_count);
    Ok((idx, val))
}

/// The first `per_class` indices of each class, in index order, interleaved
/// by class. Used to carve balanced desk-scale subsets.
pub fn balanced_subset(labels: &[usize], classes: usize, per_class: usize, skip_per_class: usize) -> Vec<usize> {
    let mut buckets = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < classes {
            buckets[l].push(i);
        }
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for k in skip_per_class..skip_per_class + per_class {
        for b in &buckets {
            if let Some(&i) = b.get(k) {
                out.push(i);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

/// Decoded N-MNIST samples.
#[derive(Debug, Clone, Default)]
pub struct EventDataset {
    pub events: Vec<Vec<Event>>,
    pub labels: Vec<usize>,
    pub files: Vec<PathBuf>,
}

impl EventDataset {
    pub fn load(root: &Path, part: Partition) -> Result<Self> {
        let dir = root.join(match part {
            Partition::Train => "Train",
            Partition::Test => "Test",
        });
        if !dir.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("N-MNIST directory {} not found", dir.display()),
            )));
        }
        let mut ds = Self::default();
        for digit in 0..10usize {
            let class_dir = dir.join(digit.to_string());
            if !class_dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            files.sort();
            for f in files {
                let bytes = fs::read(&f)?;
                let events = decode_aer(&bytes).map_err(|e| match e {
                    Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", f.display()) },
                    other => other,
                })?;
                ds.events.push(events);
                ds.labels.push(digit);
                ds.files.push(f);
            }
        }
        if ds.labels.is_empty() {
            return Err(Error::Format { offset: 0, msg: format!("no .bin files under {}", dir.display()) });
        }
        Ok(ds)
    }

    pub fn event_count(&self, i: usize) -> usize {
        self.events[i].len()
    }
}

impl SampleSource for EventDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn spikes(&self, i: usize, t_steps: usize) -> Result<SpikeTensor> {
        Ok(events_to_spikes(&self.events[i], t_steps))
    }
}

/// F-MNIST images with their rate-coding seed.
#[derive(Debug, Clone, Default)]
pub struct ImageDataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub encode_seed: u64,
}

fn read_idx_file(root: &Path, stem: &str) -> Result<IdxData> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = root.join(&name);
        if p.is_file() {
            return decode_idx(&fs::read(&p)?).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", p.display()) },
                other => other,
            });
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found in {}", stem, root.display()),
    )))
}

impl ImageDataset {
    pub fn load(root: &Path, part: Partition, encode_seed: u64) -> Result<Self> {
        let prefix = match part {
            Partition::Train => "train",
            Partition::Test => "t10k",
        };
        let images = read_idx_file(root, &format!("{prefix}-images-idx3-ubyte"))?;
        let labels = read_idx_file(root, &format!("{prefix}-labels-idx1-ubyte"))?;
        let (pixels, rows, cols) = match images {
            IdxData::Images { rows, cols, pixels } => (pixels, rows, cols),
            IdxData::Labels(_) => return Err(Error::Format { offset: 0, msg: "image file holds labels".into() }),
        };
        let labels = match labels {
            IdxData::Labels(l) => l,
            IdxData::Images { .. } => return Err(Error::Format { offset: 0, msg: "label file holds images".into() }),
        };
        if (rows, cols) != (IMAGE, IMAGE) {
            return Err(Error::Format { offset: 8, msg: format!("expected 28x28 images, got {rows}x{cols}") });
        }
        if pixels.len() / (IMAGE * IMAGE) != labels.len() {
            return Err(Error::Format {
                offset: 4,
                msg: format!("{} images but {} labels", pixels.len() / (IMAGE * IMAGE), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Format { offset: 8, msg: format!("label {bad} outside 0..=9") });
        }
        Ok(Self { pixels, labels: labels.into_iter().map(usize::from).collect(), encode_seed })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE * IMAGE..(i + 1) * IMAGE * IMAGE]
    }
}

impl SampleSource for ImageDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn spikes(&self, i: usize, t_steps: usize) -> Result<SpikeTensor> {
        encode_static(self.image(i), t_steps, sample_seed(self.encode_seed, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_reference_record() {
        let e = decode_aer(&[0x12, 0x21, 0x80, 0x01, 0xF4]).unwrap();
        assert_eq!(e, vec![Event { x: 18, y: 33, polarity: 1, timestamp_us: 500 }]);
        let e = decode_aer(&[0, 0, 0, 0, 0]).unwrap();
        assert_eq!(e, vec![Event { x: 0, y: 0, polarity: 0, timestamp_us: 0 }]);
        assert!(decode_aer(&[]).unwrap().is_empty());
    }

    #[test]
    fn decode_errors() {
        match decode_aer(&[1, 2, 3, 4, 5, 6, 7]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match decode_aer(&[0, 0, 0, 0, 0, 34, 0, 0, 0, 0]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binning() {
        let ev = |t| Event { x: 1, y: 2, polarity: 0, timestamp_us: t };
        let s = events_to_spikes(&[ev(500)], 300);
        assert_eq!(s.get(0, 0, 2, 1, 0), 1);
        let s = events_to_spikes(&[ev(299_999), ev(350_000)], 300);
        assert_eq!(s.get(0, 0, 2, 1, 299), 1);
        assert_eq!(s.count(), 1);
        let s = events_to_spikes(&[ev(10), ev(20), ev(999)], 5);
        assert_eq!(s.count(), 1);
    }

    #[test]
    fn idx_black_image_and_magic() {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28];
        b.extend(std::iter::repeat_n(0, 784));
        match decode_idx(&b).unwrap() {
            IdxData::Images { rows, cols, pixels } => {
                assert_eq!((rows, cols), (28, 28));
                assert!(pixels.iter().all(|&p| p == 0));
            }
            other => panic!("{other:?}"),
        }
        b[3] = 2;
        assert!(matches!(decode_idx(&b), Err(Error::Format { offset: 0, .. })));
        b[3] = 3;
        b.pop();
        assert!(matches!(decode_idx(&b), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn idx_round_trip_gzip() {
        let labels = IdxData::Labels(vec![9, 0, 0, 3]);
        let raw = encode_idx(&labels);
        assert_eq!(&raw[..8], &[0, 0, 8, 1, 0, 0, 0, 4]);
        assert_eq!(decode_idx(&raw).unwrap(), labels);
        assert_eq!(decode_idx(&gzip(&raw).unwrap()).unwrap(), labels);
    }

    #[test]
    fn static_encoding_extremes() {
        let s = encode_static(&[0; 784], 50, 1).unwrap();
        assert_eq!(s.count(), 0);
        let s = encode_static(&[255; 784], 50, 1).unwrap();
        assert_eq!(s.count(), 34 * 34 * 50);
    }

    #[test]
    fn static_encoding_rate() {
        let s = encode_static(&[128; 784], 10_000, 7).unwrap();
        // Every pixel of a constant image resizes to exactly 128.
        let rate = s.count() as f64 / (34.0 * 34.0 * 10_000.0);
        assert!((rate - 128.0 / 255.0).abs() < 0.01, "{rate}");
        assert!((rate - 0.502).abs() < 0.01);
        let single = (0..10_000).map(|t| s.get(0, 0, 17, 17, t) as f64).sum::<f64>() / 10_000.0;
        // Five standard deviations for one trace.
        assert!((single - 128.0 / 255.0).abs() < 0.025, "{single}");
    }

    #[test]
    fn resize_constant_and_corners() {
        let img = vec![77u8; 784];
        assert!(resize_bilinear(&img, 28, 28, 34, 34).iter().all(|&v| (v - 77.0).abs() < 1e-12));
        let mut img = vec![0u8; 784];
        img[0] = 255;
        let r = resize_bilinear(&img, 28, 28, 34, 34);
        assert_eq!(r[0], 255.0);
        assert_eq!(r[34 * 34 - 1], 0.0);
    }

    #[test]
    fn split_is_reproducible_and_disjoint() {
        let (a, b) = split_indices(100, 10, 4).unwrap();
        let (c, d) = split_indices(100, 10, 4).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        assert_eq!(a.len(), 90);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_ne!(split_indices(100, 10, 5).unwrap().1, b);
    }

    #[test]
    fn balanced_subset_interleaves() {
        let labels = [0, 1, 0, 1, 2, 2, 0];
        assert_eq!(balanced_subset(&labels, 3, 2, 0), vec![0, 1, 4, 2, 3, 5]);
        assert_eq!(balanced_subset(&labels, 3, 1, 2), vec![6]);
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u8..34, 0u8..34, 0u8..2, 0u32..=MAX_TIMESTAMP), 0..200).prop_map(|v| {
            let mut ev: Vec<Event> =
                v.into_iter().map(|(x, y, polarity, timestamp_us)| Event { x, y, polarity, timestamp_us }).collect();
            ev.sort_by_key(|e| e.timestamp_us);
            ev
        })
    }

    proptest! {
        #[test]
        fn aer_round_trip(ev in arb_events()) {
            prop_assert_eq!(decode_aer(&encode_aer(&ev).unwrap()).unwrap(), ev);
        }

        #[test]
        fn binning_is_binary_and_bounded(ev in arb_events(), t in 1usize..400) {
            let s = events_to_spikes(&ev, t);
            prop_assert!(s.data().iter().all(|&v| v <= 1));
            prop_assert!(s.count() <= ev.len());
        }
    }
}
