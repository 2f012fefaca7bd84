//! Criteo display-advertising TSV: label, 13 integer fields, 26 hex
//! categorical fields, tab separated, empty string for missing.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use dqrm_core::data::{RawRecord, Sample, DENSE_FEATURES, SPARSE_FEATURES};
use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};

pub const FIELDS: usize = 1 + DENSE_FEATURES + SPARSE_FEATURES;

/// Parses one line; `line_no` is only used in error messages.
pub fn parse_criteo_line(text: &str, line_no: u64) -> Result<RawRecord> {
    let bad = |reason: String| Error::MalformedRecord { line: line_no, reason };
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != FIELDS {
        return Err(bad(format!("expected {FIELDS} fields, found {}", fields.len())));
    }
    let label = match fields[0] {
        "0" => 0,
        "1" => 1,
        other => return Err(bad(format!("label {other:?} is not 0 or 1"))),
    };
    let dense = fields[1..=DENSE_FEATURES]
        .iter()
        .enumerate()
        .map(|(i, f)| match *f {
            "" => Ok(None),
            f => f
                .parse::<i64>()
                .map(Some)
                .map_err(|_| bad(format!("dense field {} {f:?} is not an integer", i + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    let categorical = fields[1 + DENSE_FEATURES..]
        .iter()
        .map(|f| (!f.is_empty()).then(|| (*f).to_owned()))
        .collect();
    Ok(RawRecord {
        label,
        dense,
        categorical,
    })
}

/// Tab-separated line; missing trailing fields are written empty so the
/// line always has [`FIELDS`] columns. Records with more fields than the
/// layout holds are an error.
pub fn format_criteo_line(rec: &RawRecord) -> Result<String> {
    if rec.dense.len() > DENSE_FEATURES || rec.categorical.len() > SPARSE_FEATURES {
        return Err(Error::Config(format!(
            "record has {} dense and {} categorical fields; the layout holds {DENSE_FEATURES} and {SPARSE_FEATURES}",
            rec.dense.len(),
            rec.categorical.len()
        )));
    }
    let mut out = rec.label.to_string();
    for i in 0..DENSE_FEATURES {
        out.push('\t');
        if let Some(Some(v)) = rec.dense.get(i) {
            out.push_str(&v.to_string());
        }
    }
    for i in 0..SPARSE_FEATURES {
        out.push('\t');
        if let Some(Some(s)) = rec.categorical.get(i) {
            out.push_str(s);
        }
    }
    Ok(out)
}

/// Iterator over the records of a Criteo text stream.
pub struct CriteoReader<R> {
    inner: R,
    line: u64,
    buf: String,
}

impl<R: BufRead> CriteoReader<R> {
    pub fn new(inner: R) -> Self {
        CriteoReader {
            inner,
            line: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for CriteoReader<R> {
    type Item = Result<RawRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) if self.buf.trim().is_empty() => continue,
                Ok(_) => return Some(parse_criteo_line(&self.buf, self.line)),
                Err(e) => {
                    return Some(Err(Error::MalformedRecord {
                        line: self.line,
                        reason: e.to_string(),
                    }))
                }
            }
        }
    }
}

/// Opens a plain or gzip-compressed file (detected by its magic bytes).
pub fn open_criteo(path: &Path) -> Result<CriteoReader<Box<dyn BufRead>>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn BufRead> = if n == 2 && magic == [0x1f, 0x8b] {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    Ok(CriteoReader::new(reader))
}

/// Reads every record of `path`, keeping the first `dense_in` integer
/// fields and mapping the first `table_rows.len()` categorical fields onto
/// tables of those sizes.
pub fn load_samples(path: &Path, dense_in: usize, table_rows: &[usize]) -> Result<Vec<Sample>> {
    if dense_in > DENSE_FEATURES || table_rows.len() > SPARSE_FEATURES {
        return Err(Error::Config(format!(
            "model needs {dense_in} dense and {} categorical fields; the file has {DENSE_FEATURES} and {SPARSE_FEATURES}",
            table_rows.len()
        )));
    }
    open_criteo(path)?
        .map(|r| {
            r.and_then(|mut rec| {
                rec.dense.truncate(dense_in);
                rec.categorical.truncate(table_rows.len());
                Ok(rec.to_sample(table_rows)?)
            })
        })
        .collect()
}

pub fn write_criteo<W: Write>(out: &mut W, records: impl IntoIterator<Item = RawRecord>) -> Result<u64> {
    let mut n = 0;
    for rec in records {
        writeln!(out, "{}", format_criteo_line(&rec)?).map_err(|e| Error::io("<output>", e))?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(label: &str, dense: &str, cat: &str) -> String {
        let mut f = vec![label.to_owned()];
        f.extend(std::iter::repeat_n(dense.to_owned(), DENSE_FEATURES));
        f.extend(std::iter::repeat_n(cat.to_owned(), SPARSE_FEATURES));
        f.join("\t")
    }

    #[test]
    fn parses_full_record() {
        let r = parse_criteo_line(&line("1", "3", "ab12cd34"), 1).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(r.dense, vec![Some(3); 13]);
        assert_eq!(r.categorical[25].as_deref(), Some("ab12cd34"));
    }

    #[test]
    fn empty_fields_are_missing() {
        let r = parse_criteo_line(&line("0", "", ""), 1).unwrap();
        assert!(r.dense.iter().all(Option::is_none));
        assert!(r.categorical.iter().all(Option::is_none));
    }

    #[test]
    fn wrong_arity_reports_line() {
        let short = line("1", "3", "ab").rsplit_once('\t').unwrap().0.to_owned();
        let err = parse_criteo_line(&short, 17).unwrap_err();
        assert!(err.to_string().starts_with("malformed record at line 17"), "{err}");
        assert!(parse_criteo_line(&line("2", "3", "ab"), 1).is_err());
        assert!(parse_criteo_line(&line("1", "x", "ab"), 1).is_err());
    }

    #[test]
    fn format_round_trip() {
        let text = line("1", "", "00ff");
        let r = parse_criteo_line(&text, 1).unwrap();
        assert_eq!(format_criteo_line(&r).unwrap(), text);
    }

    #[test]
    fn reader_skips_blank_lines_and_counts_them() {
        let text = format!("{}\n\n{}\nbad\n", line("1", "2", "a"), line("0", "", "b"));
        let got: Vec<_> = CriteoReader::new(text.as_bytes()).collect();
        assert_eq!(got.len(), 3);
        assert!(got[0].is_ok() && got[1].is_ok());
        match &got[2] {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(*line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_records_are_padded_and_truncated_back() {
        let rec = RawRecord {
            label: 1,
            dense: vec![Some(5), None],
            categorical: vec![Some("0000002a".into()), Some("7".into())],
        };
        let text = format_criteo_line(&rec).unwrap();
        assert_eq!(text.split('\t').count(), FIELDS);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        std::fs::write(&path, format!("{text}\n")).unwrap();
        let got = load_samples(&path, 2, &[100, 3]).unwrap();
        assert_eq!(got, vec![rec.to_sample(&[100, 3]).unwrap()]);
        assert!(load_samples(&path, 14, &[100]).is_err());

        let wide = RawRecord {
            label: 0,
            dense: vec![None; DENSE_FEATURES + 1],
            categorical: vec![],
        };
        assert!(format_criteo_line(&wide).is_err());
    }

    #[test]
    fn gzip_is_detected() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gz");
        let mut w = GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::fast());
        writeln!(w, "{}", line("1", "4", "beef")).unwrap();
        w.finish().unwrap();
        let rows = open_criteo(&path).unwrap().collect::<Result<Vec<_>>>().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].dense[0], Some(4));
    }

    proptest::proptest! {
        #[test]
        fn any_record_round_trips(
            label in 0u8..2,
            dense in proptest::collection::vec(proptest::option::of(-1000i64..100_000), DENSE_FEATURES),
            cat in proptest::collection::vec(proptest::option::of("[0-9a-f]{1,8}"), SPARSE_FEATURES),
        ) {
            let rec = RawRecord { label, dense, categorical: cat };
            let text = format_criteo_line(&rec).unwrap();
            proptest::prop_assert_eq!(parse_criteo_line(&text, 1).unwrap(), rec);
        }
    }
}
