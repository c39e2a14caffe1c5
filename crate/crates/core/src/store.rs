//! The `FQPB` container: a little-endian binary layout for activation
//! matrices, serialized erasers, window datasets and model weights.
//!
//! Activation files are the normative wire format shared with external
//! exporters:
//!
//! ```text
//! "FQPB"            4 bytes
//! version           u32
//! tap_id            u32 length + UTF-8 bytes
//! n, d              u64, u64
//! features          n*d f32, row-major
//! labels            n i32
//! frequencies       n i32
//! ```
//!
//! Eraser files share the header and carry `d`, then `P` (d*d, row-major),
//! `b` and `mu`, all f64. Readers reject any file whose declared sizes
//! disagree with its byte length.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{DatasetSplit, Partition, Split, TimeSeriesWindow};

pub const MAGIC: [u8; 4] = *b"FQPB";
pub const FORMAT_VERSION: u32 = 1;

/// The five probe taps: after decoder blocks 0-3 and before the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapId {
    #[serde(rename = "dec0")]
    Dec0,
    #[serde(rename = "dec1")]
    Dec1,
    #[serde(rename = "dec2")]
    Dec2,
    #[serde(rename = "dec3")]
    Dec3,
    #[serde(rename = "out")]
    Out,
}

impl TapId {
    /// Forward order.
    pub const ALL: [TapId; 5] = [TapId::Dec0, TapId::Dec1, TapId::Dec2, TapId::Dec3, TapId::Out];

    pub fn as_str(self) -> &'static str {
        match self {
            TapId::Dec0 => "dec0",
            TapId::Dec1 => "dec1",
            TapId::Dec2 => "dec2",
            TapId::Dec3 => "dec3",
            TapId::Out => "out",
        }
    }

    /// Position in forward order, also the block index used in subset labels.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TapId> {
        TapId::ALL.get(i).copied()
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidRecord(format!("unknown tap id `{s}`")))
    }
}

/// Hidden states collected at one tap, with labels and source frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub tap: TapId,
    pub features: Array2<f32>,
    pub labels: Vec<i32>,
    pub frequencies: Vec<i32>,
}

impl ActivationSet {
    pub fn new(
        tap: TapId,
        features: Array2<f32>,
        labels: Vec<i32>,
        frequencies: Vec<i32>,
    ) -> Result<Self> {
        let set = Self {
            tap,
            features,
            labels,
            frequencies,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyActivationSet);
        }
        let n = self.len();
        if self.labels.len() != n || self.frequencies.len() != n {
            return Err(Error::InvalidRecord(format!(
                "row counts disagree: {n} feature rows, {} labels, {} frequencies",
                self.labels.len(),
                self.frequencies.len()
            )));
        }
        Ok(())
    }
}

/// Serialized affine eraser `h -> P h + b`, fitted around mean `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasureRecord {
    pub layer_tap: TapId,
    pub p: Array2<f64>,
    pub b: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ErasureRecord {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn identity(tap: TapId, d: usize) -> Self {
        Self {
            layer_tap: tap,
            p: Array2::eye(d),
            b: vec![0.0; d],
            mu: vec![0.0; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.b.len();
        if self.p.dim() != (d, d) || self.mu.len() != d {
            return Err(Error::InvalidRecord(format!(
                "eraser shapes disagree: P {:?}, b {}, mu {}",
                self.p.dim(),
                d,
                self.mu.len()
            )));
        }
        Ok(())
    }

    /// Dimension check against a consuming model of width `d_model`.
    pub fn check_dim(&self, d_model: usize) -> Result<()> {
        if self.dim() != d_model {
            return Err(Error::Dimension {
                expected: d_model,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// byte plumbing

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn header() -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u32(FORMAT_VERSION);
        w
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub(crate) fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validates magic and version.
    pub(crate) fn open(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 || buf[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Self { buf, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.buf.len() {
            return Err(Error::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::InvalidRecord("string field is not UTF-8".into()))
    }

    /// Reads a u64 count and checks that `count * elem_bytes` still fits.
    pub(crate) fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Truncated)?;
        let needed = n.checked_mul(elem_bytes).ok_or(Error::Truncated)?;
        if needed > self.remaining() {
            return Err(Error::Truncated);
        }
        Ok(n)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::InvalidRecord(format!(
                "declared sizes disagree with byte length ({} trailing bytes)",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// activations

pub fn encode_activations(set: &ActivationSet) -> Result<Vec<u8>> {
    set.validate()?;
    let (n, d) = set.features.dim();
    let mut w = ByteWriter::header();
    w.str(set.tap.as_str());
    w.u64(n as u64);
    w.u64(d as u64);
    for v in set.features.iter() {
        w.f32(*v);
    }
    for v in &set.labels {
        w.i32(*v);
    }
    for v in &set.frequencies {
        w.i32(*v);
    }
    Ok(w.into_bytes())
}

pub fn decode_activations(bytes: &[u8]) -> Result<ActivationSet> {
    let mut r = ByteReader::open(bytes)?;
    let tap: TapId = r.str()?.parse()?;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let d = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let cells = n.checked_mul(d).ok_or(Error::Truncated)?;
    let needed = cells
        .checked_mul(4)
        .and_then(|f| f.checked_add(n.checked_mul(8)?))
        .ok_or(Error::Truncated)?;
    if needed > r.remaining() {
        return Err(Error::Truncated);
    }
    let features = (0..cells).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
    let labels = (0..n).map(|_| r.i32()).collect::<Result<Vec<i32>>>()?;
    let frequencies = (0..n).map(|_| r.i32()).collect::<Result<Vec<i32>>>()?;
    r.finish()?;
    let features = Array2::from_shape_vec((n, d), features)
        .map_err(|e| Error::InvalidRecord(e.to_string()))?;
    ActivationSet::new(tap, features, labels, frequencies)
}

pub fn write_activations(path: impl AsRef<Path>, set: &ActivationSet) -> Result<()> {
    write_file(path.as_ref(), encode_activations(set)?)
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationSet> {
    decode_activations(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// erasers

pub fn encode_eraser(rec: &ErasureRecord) -> Result<Vec<u8>> {
    rec.validate()?;
    let d = rec.dim();
    let mut w = ByteWriter::header();
    w.str(rec.layer_tap.as_str());
    w.u64(d as u64);
    for v in rec.p.iter() {
        w.f64(*v);
    }
    for v in rec.b.iter().chain(&rec.mu) {
        w.f64(*v);
    }
    Ok(w.into_bytes())
}

pub fn decode_eraser(bytes: &[u8]) -> Result<ErasureRecord> {
    let mut r = ByteReader::open(bytes)?;
    let layer_tap: TapId = r.str()?.parse()?;
    let d = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let cells = d
        .checked_mul(d)
        .and_then(|c| c.checked_add(2 * d))
        .ok_or(Error::Truncated)?;
    if cells.checked_mul(8).ok_or(Error::Truncated)? > r.remaining() {
        return Err(Error::Truncated);
    }
    let p = (0..d * d).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
    let b = (0..d).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
    let mu = (0..d).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
    r.finish()?;
    let p = Array2::from_shape_vec((d, d), p).map_err(|e| Error::InvalidRecord(e.to_string()))?;
    Ok(ErasureRecord { layer_tap, p, b, mu })
}

pub fn write_eraser(path: impl AsRef<Path>, rec: &ErasureRecord) -> Result<()> {
    write_file(path.as_ref(), encode_eraser(rec)?)
}

pub fn read_eraser(path: impl AsRef<Path>) -> Result<ErasureRecord> {
    decode_eraser(&read_file(path.as_ref())?)
}

/// Reads an eraser and checks it against a consumer of width `d_model`.
pub fn read_eraser_for(path: impl AsRef<Path>, d_model: usize) -> Result<ErasureRecord> {
    let rec = read_eraser(path)?;
    rec.check_dim(d_model)?;
    Ok(rec)
}

// ---------------------------------------------------------------------------
// window datasets

/// Tag prefix of dataset files; the rest of the tag names the dataset.
pub const DATASET_TAG_PREFIX: &str = "dataset:";

/// Dataset file layout, after the common header:
///
/// ```text
/// tag               u32 length + UTF-8 ("dataset:<name>")
/// n, T              u64, u64
/// samples           n*T f64, row-major
/// labels            n i32
/// frequencies       n i32
/// phases            n f64
/// offsets           n u64
/// splits            n u8 (0 train, 1 validation, 2 test)
/// ```
///
/// Rows are stored in train, validation, test order.
pub fn encode_dataset(name: &str, ds: &DatasetSplit) -> Result<Vec<u8>> {
    if ds.is_empty() {
        return Err(Error::InvalidRecord("empty dataset".into()));
    }
    let t = ds.iter().next().map(|(_, w, _)| w.samples.len()).unwrap_or(0);
    if ds.iter().any(|(_, w, _)| w.samples.len() != t) {
        return Err(Error::InvalidRecord("windows differ in length".into()));
    }
    let mut w = ByteWriter::header();
    w.str(&format!("{DATASET_TAG_PREFIX}{name}"));
    w.u64(ds.len() as u64);
    w.u64(t as u64);
    for (_, win, _) in ds.iter() {
        for v in &win.samples {
            w.f64(*v);
        }
    }
    for (_, _, y) in ds.iter() {
        w.i32(y);
    }
    for (_, win, _) in ds.iter() {
        w.i32(win.frequency as i32);
    }
    for (_, win, _) in ds.iter() {
        w.f64(win.phase);
    }
    for (_, win, _) in ds.iter() {
        w.u64(win.source_offset as u64);
    }
    for (split, _, _) in ds.iter() {
        w.u8(split.code());
    }
    Ok(w.into_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(String, DatasetSplit)> {
    let mut r = ByteReader::open(bytes)?;
    let tag = r.str()?;
    let name = tag
        .strip_prefix(DATASET_TAG_PREFIX)
        .ok_or_else(|| Error::InvalidRecord(format!("`{tag}` is not a dataset tag")))?
        .to_string();
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let t = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let row_bytes = t
        .checked_mul(8)
        .and_then(|b| b.checked_add(4 + 4 + 8 + 8 + 1))
        .ok_or(Error::Truncated)?;
    if n.checked_mul(row_bytes).ok_or(Error::Truncated)? > r.remaining() {
        return Err(Error::Truncated);
    }
    let samples = (0..n)
        .map(|_| (0..t).map(|_| r.f64()).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.i32()).collect::<Result<Vec<i32>>>()?;
    let freqs = (0..n).map(|_| r.i32()).collect::<Result<Vec<i32>>>()?;
    let phases = (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
    let offsets = (0..n).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
    let splits = (0..n).map(|_| r.u8()).collect::<Result<Vec<u8>>>()?;
    r.finish()?;

    let mut ds = DatasetSplit::default();
    for (i, samples) in samples.into_iter().enumerate() {
        let split = Split::from_code(splits[i])
            .ok_or_else(|| Error::InvalidRecord(format!("bad split code {}", splits[i])))?;
        let frequency = u32::try_from(freqs[i])
            .map_err(|_| Error::InvalidRecord(format!("negative frequency {}", freqs[i])))?;
        let part: &mut Partition = match split {
            Split::Train => &mut ds.train,
            Split::Validation => &mut ds.validation,
            Split::Test => &mut ds.test,
        };
        part.windows.push(TimeSeriesWindow {
            samples,
            frequency,
            phase: phases[i],
            source_offset: offsets[i] as usize,
        });
        part.labels.push(labels[i]);
    }
    Ok((name, ds))
}

pub fn write_dataset(path: impl AsRef<Path>, name: &str, ds: &DatasetSplit) -> Result<()> {
    write_file(path.as_ref(), encode_dataset(name, ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(String, DatasetSplit)> {
    decode_dataset(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// named f64 matrices (model weights)

/// Named-matrix bundle layout, after the common header:
///
/// ```text
/// tag               u32 length + UTF-8
/// meta              u32 length + UTF-8 (free-form, JSON for model weights)
/// count             u64
/// per matrix        name (u32 length + UTF-8), rows u64, cols u64, rows*cols f64
/// ```
pub fn encode_matrices(tag: &str, meta: &str, mats: &[(String, Array2<f64>)]) -> Vec<u8> {
    let mut w = ByteWriter::header();
    w.str(tag);
    w.str(meta);
    w.u64(mats.len() as u64);
    for (name, m) in mats {
        w.str(name);
        w.u64(m.nrows() as u64);
        w.u64(m.ncols() as u64);
        for v in m.iter() {
            w.f64(*v);
        }
    }
    w.into_bytes()
}

/// Returns `(tag, meta, matrices)`.
#[allow(clippy::type_complexity)]
pub fn decode_matrices(bytes: &[u8]) -> Result<(String, String, Vec<(String, Array2<f64>)>)> {
    let mut r = ByteReader::open(bytes)?;
    let tag = r.str()?;
    let meta = r.str()?;
    let count = r.count(1)?;
    let mut mats = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let rows = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
        let cols = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
        let cells = rows.checked_mul(cols).ok_or(Error::Truncated)?;
        if cells.checked_mul(8).ok_or(Error::Truncated)? > r.remaining() {
            return Err(Error::Truncated);
        }
        let data = (0..cells).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        let m = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::InvalidRecord(e.to_string()))?;
        mats.push((name, m));
    }
    r.finish()?;
    Ok((tag, meta, mats))
}

pub fn write_matrices(
    path: impl AsRef<Path>,
    tag: &str,
    meta: &str,
    mats: &[(String, Array2<f64>)],
) -> Result<()> {
    write_file(path.as_ref(), encode_matrices(tag, meta, mats))
}

#[allow(clippy::type_complexity)]
pub fn read_matrices(path: impl AsRef<Path>) -> Result<(String, String, Vec<(String, Array2<f64>)>)> {
    decode_matrices(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_set() -> ActivationSet {
        ActivationSet::new(
            TapId::Dec2,
            array![[0.5f32, -1.0, 2.25], [3.0, 0.0, -0.125]],
            vec![0, 1],
            vec![12, 200],
        )
        .unwrap()
    }

    #[test]
    fn activation_round_trip() {
        let set = sample_set();
        let bytes = encode_activations(&set).unwrap();
        assert_eq!(&bytes[..4], &[0x46, 0x51, 0x50, 0x42]);
        assert_eq!(decode_activations(&bytes).unwrap(), set);
    }

    #[test]
    fn empty_set_is_rejected() {
        let err = ActivationSet::new(TapId::Out, Array2::zeros((0, 4)), vec![], vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty activation set");
    }

    #[test]
    fn corrupt_files() {
        let bytes = encode_activations(&sample_set()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_activations(&bad).unwrap_err().to_string(), "bad magic");

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_activations(&bad)
            .unwrap_err()
            .to_string()
            .starts_with("unsupported version"));

        let cut = &bytes[..bytes.len() - 20];
        assert_eq!(decode_activations(cut).unwrap_err().to_string(), "truncated payload");

        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_activations(&long), Err(Error::InvalidRecord(_))));
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let mut w = ByteWriter::header();
        w.str("dec9");
        w.u64(0);
        w.u64(0);
        assert!(matches!(
            decode_activations(&w.into_bytes()),
            Err(Error::InvalidRecord(_))
        ));
    }

    #[test]
    fn identity_eraser_round_trip() {
        let rec = ErasureRecord::identity(TapId::Dec1, 5);
        let back = decode_eraser(&encode_eraser(&rec).unwrap()).unwrap();
        assert_eq!(back, rec);
        assert!(back.check_dim(5).is_ok());
        assert!(matches!(
            back.check_dim(64),
            Err(Error::Dimension { expected: 64, got: 5 })
        ));
    }

    #[test]
    fn matrices_round_trip() {
        let mats = vec![
            ("w".to_string(), array![[1.0, 2.0], [3.0, 4.0]]),
            ("b".to_string(), array![[0.5, -0.5, 1e-300]]),
        ];
        let bytes = encode_matrices("weights", "{}", &mats);
        let (tag, meta, back) = decode_matrices(&bytes).unwrap();
        assert_eq!((tag.as_str(), meta.as_str()), ("weights", "{}"));
        assert_eq!(back, mats);
        assert!(matches!(
            decode_matrices(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = read_activations("/nonexistent/dir/file.fqpb").unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
