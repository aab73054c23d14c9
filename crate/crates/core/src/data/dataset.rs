use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fmt_f64;
use crate::error::{Error, Result};

/// One sample: pooled text and image features plus a class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub text_dim: usize,
    pub image_dim: usize,
    pub num_classes: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(text_dim: usize, image_dim: usize, num_classes: usize) -> Self {
        Dataset {
            text_dim,
            image_dim,
            num_classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            if let Some(c) = counts.get_mut(r.label) {
                *c += 1;
            }
        }
        counts
    }

    /// Same header, only the records at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..Dataset::new(self.text_dim, self.image_dim, self.num_classes)
        }
    }

    /// Checks widths, labels and finiteness of every record.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            self.check_record(r)?;
        }
        Ok(())
    }

    fn check_record(&self, r: &FeatureRecord) -> Result<()> {
        let bad = |msg: String| Err(Error::Record { id: r.id.clone(), msg });
        if r.text.len() != self.text_dim {
            return bad(format!("text vector has {} values, header says {}", r.text.len(), self.text_dim));
        }
        if r.image.len() != self.image_dim {
            return bad(format!("image vector has {} values, header says {}", r.image.len(), self.image_dim));
        }
        if r.label >= self.num_classes {
            return bad(format!("label {} out of range for C={}", r.label, self.num_classes));
        }
        if !r.text.iter().chain(&r.image).all(|v| v.is_finite()) {
            return bad("non-finite feature value".into());
        }
        if r.id.is_empty() || r.id.contains(['\t', '\n', '\r']) {
            return bad("id must be non-empty and free of tabs and newlines".into());
        }
        Ok(())
    }

    /// Parses the tab-separated feature format.
    pub fn parse(src: &str) -> Result<Dataset> {
        let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header line".into(),
        })?;
        let mut ds = parse_header(header)?;
        for (i, line) in lines {
            let lineno = i + 1;
            let record = parse_record(line, lineno)?;
            ds.check_record(&record)?;
            ds.records.push(record);
        }
        Ok(ds)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "D_text={} D_img={} C={}\n",
            self.text_dim, self.image_dim, self.num_classes
        );
        for r in &self.records {
            let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, r.label, join(&r.text), join(&r.image));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::parse(&src)
}

fn parse_header(line: &str) -> Result<Dataset> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let (mut t, mut i, mut c) = (None, None, None);
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("header field {field:?} is not key=value")))?;
        let slot = match key {
            "D_text" => &mut t,
            "D_img" => &mut i,
            "C" => &mut c,
            _ => return Err(err(format!("unknown header key {key:?}"))),
        };
        if slot.is_some() {
            return Err(err(format!("duplicate header key {key:?}")));
        }
        let v: usize = value
            .parse()
            .map_err(|_| err(format!("header value {value:?} is not a non-negative integer")))?;
        *slot = Some(v);
    }
    match (t, i, c) {
        (Some(t), Some(i), Some(c)) if t > 0 && i > 0 && c > 0 => Ok(Dataset::new(t, i, c)),
        (Some(_), Some(_), Some(_)) => Err(err("header dimensions must be positive".into())),
        _ => Err(err("header must declare D_text, D_img and C".into())),
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<FeatureRecord> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let id = fields[0].to_string();
    let label = fields[1]
        .trim()
        .parse()
        .map_err(|_| err(format!("record {id}: label {:?} is not a class index", fields[1])))?;
    let floats = |s: &str, what: &str| -> Result<Vec<f64>> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("record {id}: bad {what} value {v:?}")))
            })
            .collect()
    };
    Ok(FeatureRecord {
        text: floats(fields[2], "text")?,
        image: floats(fields[3], "image")?,
        id,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "D_text=2 D_img=1 C=2\na\t0\t1,2\t3\nb\t1\t-1.5,0\t1e-3\nc\t1\t0,0\t0\n";

    #[test]
    fn parses_three_records() {
        let ds = Dataset::parse(GOOD).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[1].text, vec![-1.5, 0.0]);
        assert_eq!(ds.class_counts(), vec![1, 2]);
    }

    #[test]
    fn wrong_width_names_the_record() {
        let src = "D_text=2 D_img=1 C=2\nok\t0\t1,2\t3\nshort\t0\t1\t3\n";
        match Dataset::parse(src) {
            Err(Error::Record { id, .. }) => assert_eq!(id, "short"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let src = "D_text=2 D_img=1 C=2\nok\t0\t1,2\t3\nbroken line\n";
        match Dataset::parse(src) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let src = "D_text=1 D_img=1 C=2\nx\t2\t1\t1\n";
        assert!(matches!(Dataset::parse(src), Err(Error::Record { .. })));
    }

    #[test]
    fn rejects_nan() {
        let src = "D_text=1 D_img=1 C=2\nx\t0\tNaN\t1\n";
        assert!(Dataset::parse(src).is_err());
    }

    #[test]
    fn bad_header() {
        assert!(Dataset::parse("D_text=1 C=2\n").is_err());
        assert!(Dataset::parse("").is_err());
        assert!(Dataset::parse("D_text=1 D_img=1 C=2 Q=3\n").is_err());
    }
}
