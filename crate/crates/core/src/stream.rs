//! Stream readers (CSV and a little binary format) and the JSON-lines
//! writer for flagged observations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::{ObservationBatch, ScoredObservation};
use crate::error::{Result, ThinError};

pub const BINARY_MAGIC: &[u8; 4] = b"OTHN";
pub const BINARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamFormat {
    Csv,
    Bin,
}

impl StreamFormat {
    /// `.bin` selects the binary format, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => StreamFormat::Bin,
            _ => StreamFormat::Csv,
        }
    }
}

/// How rows are grouped into time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Fixed-size batches; the last one may be shorter.
    Size(usize),
    /// A leading integer column gives the time index; consecutive rows with
    /// the same index form one batch. CSV only.
    TimeColumn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadOptions {
    pub format: StreamFormat,
    pub batching: Batching,
    /// Skip the first CSV line.
    pub header: bool,
    /// Time index of the first batch under [`Batching::Size`].
    pub start_time: u64,
    /// Leading observations to skip before batching starts.
    pub skip: usize,
}

impl ReadOptions {
    pub fn new(format: StreamFormat, batching: Batching) -> Self {
        Self {
            format,
            batching,
            header: false,
            start_time: 0,
            skip: 0,
        }
    }
}

/// Row source yielding `(line number, optional time index, values)`.
type RowIter = Box<dyn Iterator<Item = Result<(usize, Option<u64>, Vec<f64>)>>>;

/// Lazily groups rows into [`ObservationBatch`] values.
pub struct BatchReader {
    rows: std::iter::Peekable<RowIter>,
    batching: Batching,
    dim: Option<usize>,
    next_time: u64,
    failed: bool,
}

impl Iterator for BatchReader {
    type Item = Result<ObservationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let out = self.next_batch().transpose();
        if matches!(out, Some(Err(_))) {
            self.failed = true;
        }
        out
    }
}

impl BatchReader {
    fn next_batch(&mut self) -> Result<Option<ObservationBatch>> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut time: Option<u64> = None;
        loop {
            let boundary = match self.rows.peek() {
                None => true,
                Some(Err(_)) => false,
                Some(Ok((_, t, _))) => match self.batching {
                    Batching::Size(n) => cols.len() == n,
                    Batching::TimeColumn => time.is_some() && *t != time,
                },
            };
            if boundary {
                break;
            }
            let (line, t, values) = self.rows.next().expect("peeked")?;
            match self.dim {
                None => self.dim = Some(values.len()),
                Some(p) if p != values.len() => {
                    return Err(ThinError::Parse {
                        line,
                        msg: format!("expected {p} values, found {}", values.len()),
                    })
                }
                Some(_) => {}
            }
            if time.is_none() {
                time = t;
            }
            cols.push(values);
        }
        if cols.is_empty() {
            return Ok(None);
        }
        let t = match self.batching {
            Batching::TimeColumn => time.expect("time column present"),
            Batching::Size(_) => {
                let t = self.next_time;
                self.next_time += 1;
                t
            }
        };
        let p = self.dim.expect("set with first row");
        let data = DMatrix::from_fn(p, cols.len(), |r, c| cols[c][r]);
        ObservationBatch::new(t, data).map(Some)
    }
}

fn parse_csv_rows<R: Read + 'static>(reader: R, opts: ReadOptions) -> RowIter {
    let time_col = opts.batching == Batching::TimeColumn;
    let rdr = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header_lines = usize::from(opts.header);
    Box::new(rdr.into_records().enumerate().filter_map(move |(k, rec)| {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(k + 1 + header_lines, |p| p.line() as usize);
                return Some(Err(ThinError::Parse {
                    line,
                    msg: e.to_string(),
                }));
            }
        };
        let line = rec.position().map_or(k + 1 + header_lines, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            return None;
        }
        let mut fields = rec.iter();
        let t = if time_col {
            let raw = fields.next().unwrap_or("");
            match raw.parse::<u64>() {
                Ok(t) => Some(t),
                Err(_) => {
                    return Some(Err(ThinError::Parse {
                        line,
                        msg: format!("invalid time index {raw:?}"),
                    }))
                }
            }
        } else {
            None
        };
        let values: std::result::Result<Vec<f64>, _> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| ThinError::Parse {
                    line,
                    msg: format!("invalid number {f:?}"),
                })
            })
            .collect();
        Some(values.and_then(|v| {
            if v.is_empty() {
                Err(ThinError::Parse {
                    line,
                    msg: "row has no values".into(),
                })
            } else {
                Ok((line, t, v))
            }
        }))
    }))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_binary_rows<R: Read + 'static>(mut reader: R) -> Result<RowIter> {
    let mut magic = [0u8; 4];
    match reader.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(Box::new(std::iter::empty())),
        Err(e) => return Err(e.into()),
    }
    if &magic != BINARY_MAGIC {
        return Err(ThinError::Parse {
            line: 0,
            msg: "bad magic, expected OTHN".into(),
        });
    }
    let version = read_u32(&mut reader)?;
    if version != BINARY_VERSION {
        return Err(ThinError::Parse {
            line: 0,
            msg: format!("unsupported binary version {version}"),
        });
    }
    let p = read_u32(&mut reader)? as usize;
    if p == 0 {
        return Err(ThinError::Parse {
            line: 0,
            msg: "zero dimension".into(),
        });
    }
    let mut index = 0usize;
    let mut buf = vec![0u8; 8 * p];
    Ok(Box::new(std::iter::from_fn(move || {
        let mut filled = 0;
        while filled < buf.len() {
            match reader.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Some(Err(e.into())),
            }
        }
        if filled == 0 {
            return None;
        }
        index += 1;
        if filled < buf.len() {
            return Some(Err(ThinError::Parse {
                line: index,
                msg: format!("truncated observation: {filled} of {} bytes", buf.len()),
            }));
        }
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some(Ok((index, None, values)))
    })))
}

/// Opens a stream of observation batches from `reader`.
pub fn batches_from_reader<R: Read + 'static>(reader: R, opts: ReadOptions) -> Result<BatchReader> {
    if let Batching::Size(0) = opts.batching {
        return Err(ThinError::InvalidArgument("batch size must be positive".into()));
    }
    let rows = match opts.format {
        StreamFormat::Csv => parse_csv_rows(reader, opts),
        StreamFormat::Bin => {
            if opts.batching == Batching::TimeColumn {
                return Err(ThinError::InvalidArgument(
                    "time-column batching needs CSV input".into(),
                ));
            }
            parse_binary_rows(reader)?
        }
    };
    let rows: RowIter = Box::new(rows.skip(opts.skip));
    Ok(BatchReader {
        rows: rows.peekable(),
        batching: opts.batching,
        dim: None,
        next_time: opts.start_time,
        failed: false,
    })
}

pub fn read_stream(path: &Path, opts: ReadOptions) -> Result<BatchReader> {
    let file = BufReader::new(File::open(path)?);
    batches_from_reader(file, opts)
}

/// Reads every observation of `path` into one `p × n` matrix.
pub fn read_matrix(path: &Path, format: StreamFormat, header: bool) -> Result<DMatrix<f64>> {
    let mut opts = ReadOptions::new(format, Batching::Size(4096));
    opts.header = header;
    concat(read_stream(path, opts)?)
}

/// Concatenates batches column-wise.
pub fn concat(batches: impl IntoIterator<Item = Result<ObservationBatch>>) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    for b in batches {
        parts.push(b?.data);
    }
    let p = parts.first().map_or(0, |m| m.nrows());
    let n = parts.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(p, n);
    let mut at = 0;
    for m in parts {
        out.columns_mut(at, m.ncols()).copy_from(&m);
        at += m.ncols();
    }
    Ok(out)
}

/// Writes `data` (`p × n`) as CSV, one observation per row.
pub fn write_csv(mut w: impl Write, data: &DMatrix<f64>) -> Result<()> {
    let mut line = String::new();
    for col in data.column_iter() {
        line.clear();
        for (k, v) in col.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:?}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `data` (`p × n`) in the binary stream format.
pub fn write_binary(mut w: impl Write, data: &DMatrix<f64>) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    let p = u32::try_from(data.nrows())
        .map_err(|_| ThinError::InvalidArgument("dimension exceeds u32".into()))?;
    w.write_all(&p.to_le_bytes())?;
    for v in data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `data` to `path` in the format implied by its extension.
pub fn write_matrix(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match StreamFormat::from_path(path) {
        StreamFormat::Csv => write_csv(w, data),
        StreamFormat::Bin => write_binary(w, data),
    }
}

/// One JSON-lines output record. Quarantined observations carry a `null`
/// score and leaf `-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub t: u64,
    pub i: usize,
    pub score: Option<f64>,
    pub leaf: i64,
}

impl From<&ScoredObservation> for FlagRecord {
    fn from(o: &ScoredObservation) -> Self {
        Self {
            t: o.time_index,
            i: o.column_index,
            score: o.score.is_finite().then_some(o.score),
            leaf: o.assigned_leaf.map_or(-1, |l| l as i64),
        }
    }
}

pub struct FlagWriter<W: Write> {
    inner: W,
}

impl<W: Write> FlagWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write(&mut self, records: &[ScoredObservation]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.inner, &FlagRecord::from(r))?;
            self.inner.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_flags(path: &Path, records: &[ScoredObservation]) -> Result<()> {
    let mut w = FlagWriter::new(BufWriter::new(File::create(path)?));
    w.write(records)?;
    w.finish()?;
    Ok(())
}

pub fn read_flags(path: &Path) -> Result<Vec<FlagRecord>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ThinError::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads one value per line (blank lines skipped).
pub fn read_values<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        out.push(s.parse().map_err(|_| ThinError::Parse {
            line: k + 1,
            msg: format!("invalid value {s:?}"),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn csv_batches(text: &str, opts: ReadOptions) -> Result<Vec<ObservationBatch>> {
        batches_from_reader(Cursor::new(text.to_owned()), opts)?.collect()
    }

    fn csv_opts(batching: Batching) -> ReadOptions {
        ReadOptions::new(StreamFormat::Csv, batching)
    }

    #[test]
    fn fixed_size_batches() {
        let text: String = (0..10).map(|i| format!("{i},{}\n", i * 2)).collect();
        let b = csv_batches(&text, csv_opts(Batching::Size(4))).unwrap();
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.iter().map(|b| b.time_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(b[2].data.column(1).as_slice(), &[9.0, 18.0]);
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(csv_batches("", csv_opts(Batching::Size(3))).unwrap().is_empty());
        let bin = batches_from_reader(Cursor::new(Vec::new()), ReadOptions::new(StreamFormat::Bin, Batching::Size(3)))
            .unwrap()
            .count();
        assert_eq!(bin, 0);
    }

    #[test]
    fn header_and_time_column() {
        let text = "t,a,b\n3,1,2\n3,3,4\n5,5,6\n";
        let mut opts = csv_opts(Batching::TimeColumn);
        opts.header = true;
        let b = csv_batches(text, opts).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].time_index, b[0].len()), (3, 2));
        assert_eq!((b[1].time_index, b[1].len()), (5, 1));
        assert_eq!(b[0].data.column(1).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let text = "1,2\n3,x\n";
        match csv_batches(text, csv_opts(Batching::Size(5))) {
            Err(ThinError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_drift_is_an_error() {
        let text = "1,2\n3,4\n5,6,7\n";
        match csv_batches(text, csv_opts(Batching::Size(1))) {
            Err(ThinError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skip_and_start_time() {
        let text: String = (0..6).map(|i| format!("{i}\n")).collect();
        let mut opts = csv_opts(Batching::Size(2));
        opts.skip = 3;
        opts.start_time = 10;
        let b = csv_batches(&text, opts).unwrap();
        assert_eq!(b[0].data.as_slice(), &[3.0, 4.0]);
        assert_eq!(b.iter().map(|b| b.time_index).collect::<Vec<_>>(), vec![10, 11]);
    }

    #[test]
    fn bad_binary_header() {
        let err = batches_from_reader(Cursor::new(b"NOPE\x01\0\0\0".to_vec()), ReadOptions::new(StreamFormat::Bin, Batching::Size(1)));
        assert!(err.is_err());
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let mut buf = Vec::new();
        write_binary(&mut buf, &DMatrix::from_element(3, 2, 1.5)).unwrap();
        buf.truncate(buf.len() - 4);
        let r: Result<Vec<_>> = batches_from_reader(Cursor::new(buf), ReadOptions::new(StreamFormat::Bin, Batching::Size(8)))
            .unwrap()
            .collect();
        assert!(r.is_err());
    }

    #[test]
    fn binary_layout_is_column_major_little_endian() {
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_binary(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"OTHN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&buf[20..28], &2.0f64.to_le_bytes());
        assert_eq!(buf.len(), 12 + 4 * 8);
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_identical(
            p in 1usize..6,
            n in 1usize..20,
            bs in 1usize..7,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(p, n, |_, _| f64::from_bits(rng.random::<u64>() >> 2));
            let mut buf = Vec::new();
            write_binary(&mut buf, &m).unwrap();
            let back = concat(batches_from_reader(Cursor::new(buf), ReadOptions::new(StreamFormat::Bin, Batching::Size(bs))).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn csv_round_trip_is_exact(p in 1usize..5, n in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1e6..1e6));
            let mut buf = Vec::new();
            write_csv(&mut buf, &m).unwrap();
            let back = concat(batches_from_reader(Cursor::new(buf), csv_opts(Batching::Size(3))).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn flag_records_are_json_lines() {
        let recs = vec![
            ScoredObservation { time_index: 2, column_index: 1, score: 3.5, assigned_leaf: Some(4), flagged: true },
            ScoredObservation { time_index: 2, column_index: 3, score: f64::INFINITY, assigned_leaf: None, flagged: true },
        ];
        let mut w = FlagWriter::new(Vec::new());
        w.write(&recs).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(
            text,
            "{\"t\":2,\"i\":1,\"score\":3.5,\"leaf\":4}\n{\"t\":2,\"i\":3,\"score\":null,\"leaf\":-1}\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flags.jsonl");
        write_flags(&path, &recs).unwrap();
        let back = read_flags(&path).unwrap();
        assert_eq!(back[0], FlagRecord { t: 2, i: 1, score: Some(3.5), leaf: 4 });
        assert_eq!(back[1].score, None);
    }
}
