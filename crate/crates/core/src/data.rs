//! MNIST IDX parsing, four-digit concatenation and a synthetic ranking task.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffsort::GroundTruthPermutation;
use crate::error::{Error, Result};

pub const IDX_LABELS: u32 = 2049;
pub const IDX_IMAGES: u32 = 2051;

pub const DIGIT_SIDE: usize = 28;
pub const FOUR_DIGIT_WIDTH: usize = 4 * DIGIT_SIDE;

/// Hidden width of the synthetic teacher network.
pub const TEACHER_WIDTH: usize = 16;
const TEACHER_SEED: u64 = 0x5eed_7eac;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxFile {
    pub fn is_images(&self) -> bool {
        self.magic == IDX_IMAGES
    }

    /// Number of items along the first dimension.
    pub fn count(&self) -> usize {
        self.dims[0]
    }

    /// Bytes of item `i`.
    pub fn item(&self, i: usize) -> &[u8] {
        let size: usize = self.dims[1..].iter().product();
        &self.payload[i * size..(i + 1) * size]
    }
}

pub fn load_idx(path: &Path) -> Result<IdxFile> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)?;
    let ndims = match magic {
        IDX_LABELS => 1,
        IDX_IMAGES => 3,
        _ => {
            return Err(Error::Format(format!(
                "bad IDX magic {magic:#010x} (type {:#04x}, {} dims); expected {IDX_LABELS} (u8 labels, 1 dim) or {IDX_IMAGES} (u8 images, 3 dims)",
                (magic >> 8) & 0xff,
                magic & 0xff
            )))
        }
    };
    let dims = (1..=ndims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 * (ndims + 1);
    let expected: usize = dims.iter().product();
    let got = bytes.len() - header;
    if got != expected {
        return Err(Error::Format(format!(
            "IDX payload has {got} bytes, dimensions {dims:?} require {expected}"
        )));
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Serializes an IDX file in the published layout.
pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = file.magic.to_be_bytes().to_vec();
    for d in &file.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&file.payload);
    out
}

/// Four-digit images (`28 x 112`, row-major, pixels in `[0, 1]`) and their
/// integer values.
#[derive(Debug, Clone, PartialEq)]
pub struct FourDigitSet {
    pub images: Vec<Vec<f64>>,
    pub values: Vec<u32>,
}

/// Concatenates the given digit indices horizontally.
pub fn concat_digits(images: &IdxFile, labels: &IdxFile, idx: [usize; 4]) -> Result<(Vec<f64>, u32)> {
    check_sources(images, labels)?;
    let mut img = vec![0.0; DIGIT_SIDE * FOUR_DIGIT_WIDTH];
    let mut value = 0u32;
    for (slot, &i) in idx.iter().enumerate() {
        if i >= images.count() {
            return Err(Error::InvalidParameter(format!("digit index {i} out of range")));
        }
        let digit = images.item(i);
        for r in 0..DIGIT_SIDE {
            for c in 0..DIGIT_SIDE {
                img[r * FOUR_DIGIT_WIDTH + slot * DIGIT_SIDE + c] = digit[r * DIGIT_SIDE + c] as f64 / 255.0;
            }
        }
        let label = labels.payload[i];
        if label > 9 {
            return Err(Error::Format(format!("label {label} is not a digit")));
        }
        value = 10 * value + label as u32;
    }
    Ok((img, value))
}

fn check_sources(images: &IdxFile, labels: &IdxFile) -> Result<()> {
    if images.magic != IDX_IMAGES || images.dims[1..] != [DIGIT_SIDE, DIGIT_SIDE] {
        return Err(Error::Format(format!(
            "expected 28x28 image file, got magic {} dims {:?}",
            images.magic, images.dims
        )));
    }
    if labels.magic != IDX_LABELS {
        return Err(Error::Format(format!("expected label file, got magic {}", labels.magic)));
    }
    if images.count() == 0 {
        return Err(Error::InvalidParameter("empty digit source".into()));
    }
    if images.count() != labels.count() {
        return Err(Error::LengthMismatch {
            expected: images.count(),
            got: labels.count(),
        });
    }
    Ok(())
}

/// Draws `count` four-digit numbers from random digits of the source.
pub fn make_four_digit<R: Rng + ?Sized>(
    rng: &mut R,
    images: &IdxFile,
    labels: &IdxFile,
    count: usize,
) -> Result<FourDigitSet> {
    check_sources(images, labels)?;
    if count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()));
    }
    let mut set = FourDigitSet {
        images: Vec::with_capacity(count),
        values: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let idx = std::array::from_fn(|_| rng.random_range(0..images.count()));
        let (img, v) = concat_digits(images, labels, idx)?;
        set.images.push(img);
        set.values.push(v);
    }
    Ok(set)
}

/// Ranking supervision: `n` feature vectors per tuple and their true order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingBatch {
    pub n: usize,
    pub d: usize,
    /// `inputs[t]` holds tuple `t` row-major as `n x d`.
    pub inputs: Vec<Vec<f64>>,
    pub truth: Vec<GroundTruthPermutation>,
}

impl RankingBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Fixed two-layer tanh network that defines the hidden scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    d: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl Teacher {
    pub fn new(d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEACHER_SEED ^ d as u64);
        let s = (1.0 / d as f64).sqrt() * 2.0;
        let w1 = (0..d * TEACHER_WIDTH).map(|_| rng.random_range(-s..s)).collect();
        let b1 = (0..TEACHER_WIDTH).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w2 = (0..TEACHER_WIDTH).map(|_| rng.random_range(-1.0..1.0)).collect();
        Teacher { d, w1, b1, w2 }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.d);
        (0..TEACHER_WIDTH)
            .map(|j| {
                let h = self.b1[j] + (0..self.d).map(|i| x[i] * self.w1[i * TEACHER_WIDTH + j]).sum::<f64>();
                h.tanh() * self.w2[j]
            })
            .sum()
    }
}

/// `tuples` fresh tuples of `n` points uniform in `[-1, 1]^d`, ranked by
/// the teacher's score (ascending, ties by index).
pub fn synth_ranking<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize, tuples: usize) -> Result<RankingBatch> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("need d, n >= 1, got d = {d}, n = {n}")));
    }
    let teacher = Teacher::new(d);
    let mut batch = RankingBatch {
        n,
        d,
        inputs: Vec::with_capacity(tuples),
        truth: Vec::with_capacity(tuples),
    };
    for _ in 0..tuples {
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let scores: Vec<f64> = x.chunks_exact(d).map(|p| teacher.score(p)).collect();
        batch.truth.push(GroundTruthPermutation::from_scores(&scores));
        batch.inputs.push(x);
    }
    Ok(batch)
}

/// Labelled points for a synthetic classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub d: usize,
    pub classes: usize,
    /// Row-major `len x d`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Points uniform in `[-1, 1]^d`, labelled by the argmax of a fixed
/// seeded random linear map.
pub fn synth_classification<R: Rng + ?Sized>(rng: &mut R, d: usize, classes: usize, count: usize) -> Result<ClassBatch> {
    if d == 0 || classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "need d >= 1 and at least 2 classes, got d = {d}, classes = {classes}"
        )));
    }
    let mut teacher = ChaCha8Rng::seed_from_u64(TEACHER_SEED ^ ((d as u64) << 32) ^ classes as u64);
    let w: Vec<f64> = (0..d * classes).map(|_| teacher.random_range(-1.0..1.0)).collect();
    let mut batch = ClassBatch {
        d,
        classes,
        inputs: Vec::with_capacity(count * d),
        labels: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let logits: Vec<f64> = (0..classes)
            .map(|c| (0..d).map(|i| x[i] * w[i * classes + c]).sum())
            .collect();
        let label = (0..classes)
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("classes >= 2");
        batch.inputs.extend_from_slice(&x);
        batch.labels.push(label);
    }
    Ok(batch)
}
