//! LIBSVM and IDX readers, train/test splits and batch sampling into loss events.

use std::io::{BufRead, Read};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::loss::{LossError, LossEvent, LossFamily};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: feature index {index} exceeds dimension {d}")]
    IndexOutOfRange { line: usize, index: usize, d: usize },
    #[error("line {line}: label {label} is not one of 1, 2, +1, -1")]
    BadLabel { line: usize, label: f64 },
    #[error("bad IDX magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("IDX {0} payload is truncated")]
    Truncated(&'static str),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("split needs {wanted} samples, dataset has {available}")]
    SplitTooLarge { wanted: usize, available: usize },
    #[error("batch of {batch} exceeds {available} training rows")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("model has dimension {got}, dataset has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One LIBSVM line. Indices are 1-based and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    pub label: f64,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Reads LIBSVM lines without interpreting labels. Blank lines are skipped.
pub fn parse_libsvm_samples<R: BufRead>(reader: R) -> Result<Vec<SparseSample>, DatasetError> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = lineno + 1;
        let mut tokens = line.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let bad = |msg: String| DatasetError::Parse { line: line_no, msg };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| bad(format!("bad label {label_tok:?}")))?;
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("token {tok:?} is not idx:val")))?;
            let i: usize = i.parse().map_err(|_| bad(format!("bad index {i:?}")))?;
            let v: f64 = v.parse().map_err(|_| bad(format!("bad value {v:?}")))?;
            if i == 0 {
                return Err(bad("feature indices are 1-based".into()));
            }
            if indices.last().is_some_and(|&p| p >= i) {
                return Err(bad(format!("index {i} is not increasing")));
            }
            indices.push(i);
            values.push(v);
        }
        out.push(SparseSample {
            label,
            indices,
            values,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_libsvm_samples`]; `{}` formatting of `f64` round-trips.
pub fn serialize_libsvm(samples: &[SparseSample]) -> String {
    let mut s = String::new();
    for sample in samples {
        s.push_str(&sample.label.to_string());
        for (i, v) in sample.indices.iter().zip(&sample.values) {
            s.push_str(&format!(" {i}:{v}"));
        }
        s.push('\n');
    }
    s
}

/// Binary labels: 1 and +1 map to +1, 2 and -1 to -1.
fn binary_label(label: f64, line: usize) -> Result<f64, DatasetError> {
    if label == 1.0 {
        Ok(1.0)
    } else if label == 2.0 || label == -1.0 {
        Ok(-1.0)
    } else {
        Err(DatasetError::BadLabel { line, label })
    }
}

/// Densified binary-labelled data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDataset {
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl DenseDataset {
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self, DatasetError> {
        if d == 0 || features.len() != d * labels.len() {
            return Err(DatasetError::DimensionMismatch {
                expected: d * labels.len(),
                got: features.len(),
            });
        }
        Ok(Self {
            d,
            features,
            labels,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            d: self.d,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Parses LIBSVM text into a dense dataset of dimension `d`.
pub fn parse_libsvm<R: BufRead>(reader: R, d: usize) -> Result<DenseDataset, DatasetError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line_text) in reader.lines().enumerate() {
        let text = line_text?;
        if text.trim().is_empty() {
            continue;
        }
        let line = lineno + 1;
        let sample = parse_libsvm_samples(text.as_bytes())
            .map_err(|e| match e {
                DatasetError::Parse { msg, .. } => DatasetError::Parse { line, msg },
                other => other,
            })?
            .remove(0);
        labels.push(binary_label(sample.label, line)?);
        let start = features.len();
        features.resize(start + d, 0.0);
        for (&i, &v) in sample.indices.iter().zip(&sample.values) {
            if i > d {
                return Err(DatasetError::IndexOutOfRange { line, index: i, d });
            }
            features[start + i - 1] = v;
        }
    }
    DenseDataset::new(d, features, labels)
}

fn read_u32_be<R: Read>(r: &mut R, what: &'static str) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DatasetError::Truncated(what),
        _ => DatasetError::Io(e),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload<R: Read>(r: &mut R, len: usize, what: &'static str) -> Result<Vec<u8>, DatasetError> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() < len {
        return Err(DatasetError::Truncated(what));
    }
    Ok(buf)
}

/// Reads an IDX image/label pair and keeps the two given digits. The first
/// digit is labelled -1 and the second +1; pixels are scaled to `[0, 1]`.
pub fn read_idx<R1: Read, R2: Read>(
    mut images: R1,
    mut labels: R2,
    digits: (u8, u8),
) -> Result<DenseDataset, DatasetError> {
    let magic = read_u32_be(&mut images, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32_be(&mut images, "image header")? as usize;
    let rows = read_u32_be(&mut images, "image header")? as usize;
    let cols = read_u32_be(&mut images, "image header")? as usize;

    let lmagic = read_u32_be(&mut labels, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            got: lmagic,
        });
    }
    let lcount = read_u32_be(&mut labels, "label header")? as usize;
    if lcount != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    let d = rows * cols;
    let pixels = read_payload(&mut images, count * d, "image")?;
    let digit_labels = read_payload(&mut labels, count, "label")?;

    let mut features = Vec::new();
    let mut out_labels = Vec::new();
    for (k, &digit) in digit_labels.iter().enumerate() {
        let label = if digit == digits.0 {
            -1.0
        } else if digit == digits.1 {
            1.0
        } else {
            continue;
        };
        out_labels.push(label);
        features.extend(pixels[k * d..(k + 1) * d].iter().map(|&p| p as f64 / 255.0));
    }
    DenseDataset::new(d.max(1), features, out_labels)
}

/// Disjoint train and test parts of one dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: DenseDataset,
    pub test: DenseDataset,
}

/// Seeded shuffle, then the first `train_size` rows train and the next
/// `test_size` rows (all the rest when `None`) test.
pub fn split<R: Rng + ?Sized>(
    data: &DenseDataset,
    train_size: usize,
    test_size: Option<usize>,
    rng: &mut R,
) -> Result<Split, DatasetError> {
    let test_size = test_size.unwrap_or(data.len().saturating_sub(train_size));
    let wanted = train_size + test_size;
    if wanted > data.len() {
        return Err(DatasetError::SplitTooLarge {
            wanted,
            available: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    Ok(Split {
        train: data.subset(&order[..train_size]),
        test: data.subset(&order[train_size..wanted]),
    })
}

/// `horizon` logistic events, each a uniform sample of `batch_size` distinct
/// training rows. Rounds sample independently of each other.
pub fn batch_stream<R: Rng + ?Sized>(
    train: &DenseDataset,
    horizon: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<LossEvent>, DatasetError> {
    if batch_size == 0 || batch_size > train.len() {
        return Err(DatasetError::BatchTooLarge {
            batch: batch_size,
            available: train.len(),
        });
    }
    (0..horizon)
        .map(|_| batch_event(train, batch_size, rng))
        .collect()
}

/// One logistic event over `batch_size` distinct rows.
pub fn batch_event<R: Rng + ?Sized>(
    train: &DenseDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<LossEvent, DatasetError> {
    let mut rows = index::sample(rng, train.len(), batch_size).into_vec();
    rows.sort_unstable();
    let batch = train.subset(&rows);
    Ok(LossEvent::new(
        LossFamily::Logistic,
        train.d(),
        batch.features,
        batch.labels,
    )?)
}

/// Fraction of rows with `sign(x'a) = b`. A zero margin counts as wrong.
pub fn accuracy(x: &[f64], data: &DenseDataset) -> Result<f64, DatasetError> {
    if x.len() != data.d() {
        return Err(DatasetError::DimensionMismatch {
            expected: data.d(),
            got: x.len(),
        });
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let margin: f64 = data.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            margin * data.labels[i] > 0.0
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Linearly separable-ish synthetic classification data: features uniform on
/// `[0, 1]`, labels the sign of a random hyperplane through the feature mean,
/// each flipped with probability `flip`.
pub fn synthetic_classification<R: Rng + ?Sized>(
    rng: &mut R,
    samples: usize,
    d: usize,
    flip: f64,
) -> Result<DenseDataset, DatasetError> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unif = Uniform::new(0.0, 1.0).expect("valid interval");
    let w: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let mut features = Vec::with_capacity(samples * d);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a: Vec<f64> = (0..d).map(|_| unif.sample(rng)).collect();
        let m: f64 = a.iter().zip(&w).map(|(a, w)| (a - 0.5) * w).sum();
        let mut b = if m > 0.0 { 1.0 } else { -1.0 };
        if rng.random::<f64>() < flip {
            b = -b;
        }
        features.extend(a);
        labels.push(b);
    }
    DenseDataset::new(d, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use proptest::prelude::{prop, prop_assert_eq, prop_oneof, proptest, Just, Strategy};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        StreamKey::new(seed, 0).global(Purpose::Data)
    }

    #[test]
    fn libsvm_examples() {
        let ds = parse_libsvm("1 3:0.5\n\n2 1:1 4:2\n".as_bytes(), 4).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(0), &[0.0, 0.0, 0.5, 0.0]);
        assert_eq!(ds.labels(), &[1.0, -1.0]);
        assert_eq!(ds.row(1), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn libsvm_errors_carry_line_numbers() {
        let err = parse_libsvm("1 1:1\n2 1:1 1:2\n".as_bytes(), 4).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 2, .. }), "{err}");
        let err = parse_libsvm("\n1 5:1\n".as_bytes(), 4).unwrap_err();
        assert!(matches!(err, DatasetError::IndexOutOfRange { line: 2, index: 5, d: 4 }));
        let err = parse_libsvm("1 a:1\n".as_bytes(), 4).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
        let err = parse_libsvm("3 1:1\n".as_bytes(), 4).unwrap_err();
        assert!(matches!(err, DatasetError::BadLabel { line: 1, .. }));
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    #[test]
    fn idx_fixture() {
        let imgs = idx_images(3, 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4, 255, 255, 0, 0]);
        let labs = idx_labels(&[6, 3, 8]);
        let ds = read_idx(imgs.as_slice(), labs.as_slice(), (6, 8)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[-1.0, 1.0]);
        assert_eq!(ds.row(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(ds.row(1), &[1.0, 1.0, 0.0, 0.0]);

        let only3 = read_idx(
            idx_images(1, 2, 2, &[1, 2, 3, 4]).as_slice(),
            idx_labels(&[3]).as_slice(),
            (6, 8),
        )
        .unwrap();
        assert!(only3.is_empty());
    }

    #[test]
    fn idx_rejects_bad_inputs() {
        let good = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        let mut flipped = good.clone();
        flipped[0..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_le_bytes());
        let labs = idx_labels(&[6]);
        assert!(matches!(
            read_idx(flipped.as_slice(), labs.as_slice(), (6, 8)),
            Err(DatasetError::BadMagic { .. })
        ));
        let mut flipped_labels = labs.clone();
        flipped_labels[0..4].copy_from_slice(&IDX_LABELS_MAGIC.to_le_bytes());
        assert!(matches!(
            read_idx(good.as_slice(), flipped_labels.as_slice(), (6, 8)),
            Err(DatasetError::BadMagic { .. })
        ));
        assert!(matches!(
            read_idx(&good[..good.len() - 1], labs.as_slice(), (6, 8)),
            Err(DatasetError::Truncated(_))
        ));
        assert!(matches!(
            read_idx(good.as_slice(), idx_labels(&[6, 8]).as_slice(), (6, 8)),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let n = 50;
        let ds = DenseDataset::new(1, (0..n).map(|i| i as f64).collect(), vec![1.0; n]).unwrap();
        let s = split(&ds, 30, None, &mut rng(4)).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (30, 20));
        let mut all: Vec<f64> = (0..30).map(|i| s.train.row(i)[0]).collect();
        all.extend((0..20).map(|i| s.test.row(i)[0]));
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        let again = split(&ds, 30, None, &mut rng(4)).unwrap();
        assert_eq!(again.train, s.train);
        assert!(split(&ds, 40, Some(20), &mut rng(4)).is_err());
    }

    #[test]
    fn batches() {
        let ds = synthetic_classification(&mut rng(1), 20, 3, 0.0).unwrap();
        assert!(batch_stream(&ds, 0, 5, &mut rng(2)).unwrap().is_empty());
        let full = batch_stream(&ds, 3, 20, &mut rng(2)).unwrap();
        let whole = LossEvent::new(
            LossFamily::Logistic,
            3,
            ds.features.clone(),
            ds.labels.clone(),
        )
        .unwrap();
        for e in &full {
            assert_eq!(e, &whole);
        }
        assert!(batch_stream(&ds, 1, 21, &mut rng(2)).is_err());
        let evs = batch_stream(&ds, 4, 7, &mut rng(2)).unwrap();
        assert!(evs.iter().all(|e| e.batch_size() == 7));
    }

    #[test]
    fn accuracy_examples() {
        let ds = DenseDataset::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, -1.0]).unwrap();
        assert_eq!(accuracy(&[0.0, 0.0], &ds).unwrap(), 0.0);
        assert_eq!(accuracy(&[1.0, -1.0], &ds).unwrap(), 1.0);

        let mut r = rng(9);
        let n = 10_000;
        let d = 5;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut r)).collect();
        let labels: Vec<f64> = (0..n)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let ds = DenseDataset::new(d, features, labels).unwrap();
        let x: Vec<f64> = (0..d).map(|_| normal.sample(&mut r)).collect();
        let acc = accuracy(&x, &ds).unwrap();
        assert!((acc - 0.5).abs() < 0.02, "{acc}");
    }

    fn sample_strategy() -> impl Strategy<Value = SparseSample> {
        (
            prop_oneof![Just(1.0), Just(2.0), Just(-1.0), -1e6f64..1e6],
            prop::collection::btree_map(1usize..500, -1e9f64..1e9, 0..12),
        )
            .prop_map(|(label, m)| SparseSample {
                label,
                indices: m.keys().copied().collect(),
                values: m.values().copied().collect(),
            })
    }

    proptest! {
        #[test]
        fn libsvm_round_trip(samples in prop::collection::vec(sample_strategy(), 0..20)) {
            let text = serialize_libsvm(&samples);
            let back = parse_libsvm_samples(text.as_bytes()).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
