//! CSV persistence for datasets and flat result rows.
//!
//! Dataset files carry the header `f0,…,f{d−1},label,domain`; the label cell
//! is empty for unlabeled rows. Floats are written in shortest round-trip
//! form, so a write/read cycle is lossless.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::Mat;
use crate::uda::{Dataset, Domain};

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Writes the datasets one after another under a single header.
pub fn write_datasets<W: Write>(out: W, sets: &[&Dataset]) -> Result<()> {
    let Some(first) = sets.first() else {
        return Err(Error::EmptyDataset);
    };
    let d = first.dim();
    if sets.iter().any(|s| s.dim() != d) {
        return Err(crate::error::dim_mismatch("datasets disagree on feature count"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header).map_err(csv_error)?;
    for set in sets {
        for i in 0..set.len() {
            let mut rec: Vec<String> = set.features().row(i).iter().map(|v| v.to_string()).collect();
            rec.push(set.labels().map_or(String::new(), |l| l[i].to_string()));
            rec.push(set.domain().to_string());
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_datasets_file(path: &Path, sets: &[&Dataset]) -> Result<()> {
    write_datasets(std::fs::File::create(path)?, sets)
}

/// Rows grouped by domain, in file order within each group.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub source: Option<Dataset>,
    pub target: Option<Dataset>,
}

#[derive(Default)]
struct Group {
    data: Vec<f64>,
    labels: Vec<Option<usize>>,
}

impl Group {
    fn finish(self, d: usize, domain: Domain) -> Result<Option<Dataset>> {
        if self.labels.is_empty() {
            return Ok(None);
        }
        let n = self.labels.len();
        let labeled = self.labels.iter().filter(|l| l.is_some()).count();
        // a domain is either fully labeled or fully unlabeled
        let labels = if labeled == n {
            Some(self.labels.into_iter().flatten().collect())
        } else if labeled == 0 {
            None
        } else {
            return Err(Error::Parse(format!("{domain} rows mix labeled and unlabeled entries")));
        };
        Ok(Some(Dataset::new(Mat::new(n, d, self.data)?, labels, domain)?))
    }
}

/// Parses a dataset CSV. Errors name the 1-based line and the column.
pub fn read_datasets<R: Read>(input: R) -> Result<DomainSplit> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(Error::Parse("header must be f0,…,f{d-1},label,domain".into()));
    }
    let d = cols.len() - 2;
    for (j, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse(format!("line 1, column {}: expected header f{j}, found '{name}'", j + 1)));
        }
    }
    let (mut src, mut tgt) = (Group::default(), Group::default());
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {}", csv_error(e))))?;
        if rec.len() != d + 2 {
            return Err(Error::Parse(format!("line {line}: expected {} fields, found {}", d + 2, rec.len())));
        }
        let bad = |j: usize, what: &str| Error::Parse(format!("line {line}, column {} ({}): {what}", j + 1, cols[j]));
        let domain: Domain = rec[d + 1].trim().parse().map_err(|_| bad(d + 1, "domain must be source or target"))?;
        let group = match domain {
            Domain::Source => &mut src,
            Domain::Target => &mut tgt,
        };
        for j in 0..d {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| bad(j, &format!("'{}' is not a number", &rec[j])))?;
            if !v.is_finite() {
                return Err(bad(j, "value is not finite"));
            }
            group.data.push(v);
        }
        let label = rec[d].trim();
        group.labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| bad(d, &format!("'{label}' is not a class index")))?)
        });
    }
    let split = DomainSplit {
        source: src.finish(d, Domain::Source)?,
        target: tgt.finish(d, Domain::Target)?,
    };
    if split.source.is_none() && split.target.is_none() {
        return Err(Error::EmptyDataset);
    }
    Ok(split)
}

pub fn read_datasets_file(path: &Path) -> Result<DomainSplit> {
    read_datasets(std::fs::File::open(path)?)
}

/// Writes serde records as CSV with a header taken from the field names.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_rows(std::fs::File::create(path)?, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;
    use crate::uda::make_two_moons;

    #[test]
    fn round_trip_is_lossless() {
        let s = make_two_moons(20, 0.1, 0.0, &mut RngStream::new(0)).unwrap();
        let t = make_two_moons(10, 0.1, 30.0, &mut RngStream::new(1))
            .unwrap()
            .with_domain(Domain::Target)
            .without_labels();
        let mut buf = Vec::new();
        write_datasets(&mut buf, &[&s, &t]).unwrap();
        let back = read_datasets(buf.as_slice()).unwrap();
        assert_eq!(back.source.as_ref(), Some(&s));
        assert_eq!(back.target.as_ref(), Some(&t));
    }

    #[test]
    fn non_numeric_cell_names_line_and_column() {
        let text = "f0,f1,label,domain\n0.5,1.0,0,source\n0.1,abc,1,source\n";
        let err = read_datasets(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn bad_header_and_domain_rejected() {
        assert!(read_datasets("x,y,label,domain\n1,2,0,source\n".as_bytes()).is_err());
        let err = read_datasets("f0,label,domain\n1,0,elsewhere\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 3"), "{err}");
    }

    #[test]
    fn rows_have_field_header() {
        #[derive(Serialize)]
        struct R {
            a: usize,
            b: f64,
        }
        let mut buf = Vec::new();
        write_rows(&mut buf, &[R { a: 1, b: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1,0.5\n");
    }
}
