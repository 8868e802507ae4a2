//! Binary embedding datasets and prototype banks.
//!
//! Everything is little-endian. A dataset file is
//!
//! ```text
//! "VILAEMB1" | record_count u32 | adapter_dim u32 | clip_dim u32 | class_count u32
//! then per record: label u32 | task_id u32 | adapter_dim x f32 | clip_dim x f32
//! ```
//!
//! and a prototype bank is
//!
//! ```text
//! "VILATXT1" | class_count u32 | template_count u32 | dim u32 | C*P*dim x f32 (class-major)
//! ```
//!
//! Class names for a bank live next to it in a plain-text sidecar, one name per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{invalid, Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"VILAEMB1";
pub const BANK_MAGIC: &[u8; 8] = b"VILATXT1";
pub const DATASET_HEADER_LEN: usize = 24;

/// One sample: both feature branches, its global class id and producer task id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub adapter: Vec<f32>,
    pub clip: Vec<f32>,
    pub label: u32,
    pub task_id: u32,
}

impl FeatureRecord {
    pub fn new(adapter: Vec<f32>, clip: Vec<f32>, label: u32, task_id: u32) -> Self {
        Self {
            adapter,
            clip,
            label,
            task_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetHeader {
    pub record_count: u32,
    pub adapter_dim: u32,
    pub clip_dim: u32,
    /// 0 when unknown.
    pub class_count: u32,
}

impl DatasetHeader {
    /// Header describing `records`, taking dims from the first record.
    pub fn describe(records: &[FeatureRecord], class_count: u32) -> Self {
        let (adapter_dim, clip_dim) = records
            .first()
            .map(|r| (r.adapter.len() as u32, r.clip.len() as u32))
            .unwrap_or((0, 0));
        Self {
            record_count: records.len() as u32,
            adapter_dim,
            clip_dim,
            class_count,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.adapter_dim == 0 && self.clip_dim == 0 {
            return Err(invalid("both feature branches have dimension 0"));
        }
        Ok(())
    }

    fn check_record(&self, record: &FeatureRecord) -> Result<()> {
        if record.adapter.len() != self.adapter_dim as usize {
            return Err(Error::DimensionMismatch {
                what: "adapter feature",
                expected: self.adapter_dim as usize,
                got: record.adapter.len(),
            });
        }
        if record.clip.len() != self.clip_dim as usize {
            return Err(Error::DimensionMismatch {
                what: "clip feature",
                expected: self.clip_dim as usize,
                got: record.clip.len(),
            });
        }
        if self.class_count > 0 && record.label >= self.class_count {
            return Err(Error::LabelOutOfRange {
                label: record.label as usize,
                class_count: self.class_count as usize,
            });
        }
        if !record
            .adapter
            .iter()
            .chain(&record.clip)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("feature record"));
        }
        Ok(())
    }

    pub fn record_len(&self) -> usize {
        8 + 4 * (self.adapter_dim as usize + self.clip_dim as usize)
    }
}

/// Writes a whole dataset. Every record is validated before the first byte
/// goes out, so a rejected dataset leaves the sink untouched.
pub fn write_dataset<W: Write>(
    records: &[FeatureRecord],
    header: &DatasetHeader,
    mut sink: W,
) -> Result<u64> {
    header.validate()?;
    if header.record_count as usize != records.len() {
        return Err(Error::DimensionMismatch {
            what: "record count",
            expected: header.record_count as usize,
            got: records.len(),
        });
    }
    for r in records {
        header.check_record(r)?;
    }

    let mut head = Vec::with_capacity(DATASET_HEADER_LEN);
    head.extend_from_slice(DATASET_MAGIC);
    for v in [
        header.record_count,
        header.adapter_dim,
        header.clip_dim,
        header.class_count,
    ] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&head)?;
    let mut written = head.len() as u64;

    let mut buf = Vec::with_capacity(header.record_len());
    for r in records {
        buf.clear();
        buf.extend_from_slice(&r.label.to_le_bytes());
        buf.extend_from_slice(&r.task_id.to_le_bytes());
        for v in r.adapter.iter().chain(&r.clip) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn check_magic(found: &[u8; 8], expected: &[u8; 8]) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], idx: usize) -> u32 {
    u32::from_le_bytes(bytes[4 * idx..4 * idx + 4].try_into().unwrap())
}

fn f32s_into(bytes: &[u8], out: &mut Vec<f32>) {
    out.clear();
    out.extend(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
    );
}

/// Streaming dataset reader. Holds one record's worth of bytes at a time.
pub struct DatasetReader<R> {
    source: R,
    header: DatasetHeader,
    remaining: u32,
    scratch: Vec<u8>,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut source, &mut magic, "dataset magic")?;
        check_magic(&magic, DATASET_MAGIC)?;
        let mut raw = [0u8; 16];
        read_exact_or(&mut source, &mut raw, "dataset header")?;
        let header = DatasetHeader {
            record_count: u32_at(&raw, 0),
            adapter_dim: u32_at(&raw, 1),
            clip_dim: u32_at(&raw, 2),
            class_count: u32_at(&raw, 3),
        };
        header.validate()?;
        Ok(Self {
            source,
            header,
            remaining: header.record_count,
            scratch: vec![0; header.record_len()],
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<FeatureRecord> {
        let index = self.header.record_count - self.remaining;
        read_exact_or(
            &mut self.source,
            &mut self.scratch,
            &format!("record {index} of {} is missing", self.header.record_count),
        )?;
        let d = self.header.adapter_dim as usize;
        let mut adapter = Vec::with_capacity(d);
        let mut clip = Vec::with_capacity(self.header.clip_dim as usize);
        f32s_into(&self.scratch[8..8 + 4 * d], &mut adapter);
        f32s_into(&self.scratch[8 + 4 * d..], &mut clip);
        let record = FeatureRecord {
            label: u32_at(&self.scratch, 0),
            task_id: u32_at(&self.scratch, 1),
            adapter,
            clip,
        };
        self.header.check_record(&record)?;
        Ok(record)
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<FeatureRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let out = self.read_record();
        self.remaining = if out.is_ok() { self.remaining - 1 } else { 0 };
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (0, Some(self.remaining as usize))
    }
}

pub fn read_dataset<R: Read>(source: R) -> Result<(DatasetHeader, Vec<FeatureRecord>)> {
    let reader = DatasetReader::new(source)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<FeatureRecord>)> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset_file(
    path: impl AsRef<Path>,
    records: &[FeatureRecord],
    header: &DatasetHeader,
) -> Result<u64> {
    write_dataset(records, header, BufWriter::new(File::create(path)?))
}

/// Raw per-template text embeddings, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBankFile {
    pub class_count: usize,
    pub template_count: usize,
    pub dim: usize,
    pub payload: Vec<f32>,
    /// Order is class id. Empty when no sidecar was supplied.
    pub class_names: Vec<String>,
}

impl PrototypeBankFile {
    pub fn new(
        class_count: usize,
        template_count: usize,
        dim: usize,
        payload: Vec<f32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let bank = Self {
            class_count,
            template_count,
            dim,
            payload,
            class_names,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn template(&self, class: usize, template: usize) -> &[f32] {
        let start = (class * self.template_count + template) * self.dim;
        &self.payload[start..start + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.class_count * self.template_count * self.dim;
        if self.payload.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "prototype payload",
                expected,
                got: self.payload.len(),
            });
        }
        if self.dim == 0 || self.template_count == 0 {
            return Err(invalid(
                "prototype bank needs dim >= 1 and template_count >= 1",
            ));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.class_count {
            return Err(Error::DimensionMismatch {
                what: "class name manifest",
                expected: self.class_count,
                got: self.class_names.len(),
            });
        }
        if !self.payload.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prototype bank"));
        }
        for c in 0..self.class_count {
            for p in 0..self.template_count {
                if self.template(c, p).iter().all(|&v| v == 0.0) {
                    return Err(Error::ZeroNormPrototype {
                        class: c,
                        template: Some(p),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn write_prototype_bank<W: Write>(bank: &PrototypeBankFile, mut sink: W) -> Result<u64> {
    bank.validate()?;
    let mut buf = Vec::with_capacity(20 + 4 * bank.payload.len());
    buf.extend_from_slice(BANK_MAGIC);
    for v in [bank.class_count, bank.template_count, bank.dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &bank.payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

/// Reads the binary part of a bank; `class_names` comes back empty.
pub fn read_prototype_bank<R: Read>(mut source: R) -> Result<PrototypeBankFile> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut source, &mut magic, "bank magic")?;
    check_magic(&magic, BANK_MAGIC)?;
    let mut raw = [0u8; 12];
    read_exact_or(&mut source, &mut raw, "bank header")?;
    let (c, p, d) = (
        u32_at(&raw, 0) as usize,
        u32_at(&raw, 1) as usize,
        u32_at(&raw, 2) as usize,
    );
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated(
            "bank payload is not a whole number of f32".into(),
        ));
    }
    let mut payload = Vec::new();
    f32s_into(&bytes, &mut payload);
    PrototypeBankFile::new(c, p, d, payload, Vec::new())
}

/// `bank.bin` -> `bank.bin.names`
pub fn class_names_path(bank_path: &Path) -> PathBuf {
    let mut s = bank_path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

pub fn read_class_names<R: BufRead>(source: R) -> Result<Vec<String>> {
    source
        .lines()
        .map(|l| {
            l.map(|s| s.trim_end_matches('\r').to_string())
                .map_err(Error::from)
        })
        .collect()
}

pub fn write_class_names<W: Write>(names: &[String], mut sink: W) -> Result<()> {
    for n in names {
        if n.contains('\n') {
            return Err(invalid(format!("class name {n:?} contains a newline")));
        }
        writeln!(sink, "{n}")?;
    }
    sink.flush()?;
    Ok(())
}

/// Reads a bank and, if present, its name sidecar.
pub fn load_prototype_bank(path: impl AsRef<Path>) -> Result<PrototypeBankFile> {
    let path = path.as_ref();
    let mut bank = read_prototype_bank(BufReader::new(File::open(path)?))?;
    let names_path = class_names_path(path);
    if names_path.exists() {
        bank.class_names = read_class_names(BufReader::new(File::open(names_path)?))?;
        bank.validate()?;
    }
    Ok(bank)
}

pub fn save_prototype_bank(path: impl AsRef<Path>, bank: &PrototypeBankFile) -> Result<u64> {
    let path = path.as_ref();
    let n = write_prototype_bank(bank, BufWriter::new(File::create(path)?))?;
    if !bank.class_names.is_empty() {
        write_class_names(
            &bank.class_names,
            BufWriter::new(File::create(class_names_path(path))?),
        )?;
    }
    Ok(n)
}

/// Per-branch summary used by `inspect`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BranchStats {
    pub dim: usize,
    pub mean_norm: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub mean_component: f64,
    pub std_component: f64,
}

impl BranchStats {
    pub fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f32]>) -> Option<Self> {
        if dim == 0 {
            return None;
        }
        let (mut n, mut norm_sum, mut min_norm, mut max_norm) =
            (0usize, 0.0, f64::INFINITY, 0.0f64);
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for row in rows {
            let sq: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let norm = sq.sqrt();
            norm_sum += norm;
            min_norm = min_norm.min(norm);
            max_norm = max_norm.max(norm);
            sum += row.iter().map(|&v| v as f64).sum::<f64>();
            sum_sq += sq;
            n += 1;
        }
        if n == 0 {
            return Some(Self {
                dim,
                mean_norm: 0.0,
                min_norm: 0.0,
                max_norm: 0.0,
                mean_component: 0.0,
                std_component: 0.0,
            });
        }
        let count = (n * dim) as f64;
        let mean = sum / count;
        Some(Self {
            dim,
            mean_norm: norm_sum / n as f64,
            min_norm,
            max_norm,
            mean_component: mean,
            std_component: (sum_sq / count - mean * mean).max(0.0).sqrt(),
        })
    }
}
