//! Dataset and checkpoint files, and ingestion of UCR-archive text files.
//!
//! Datasets are JSON lines: a header `{"n", "classes", "meta"}` followed by
//! one `{"id", "times", "values", "label"}` record per series. Checkpoints are
//! a single JSON document. Reals are written in shortest round-trip form, so
//! both formats are lossless at double precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::model::{Matrix, Parameters};
use crate::signal::{Dataset, TimeSeries};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NaedError + '_ {
    move |source| NaedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, reason: impl Into<String>) -> NaedError {
    NaedError::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    classes: usize,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_dataset_to(&mut out, dataset).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

fn write_dataset_to(out: &mut impl Write, dataset: &Dataset) -> std::io::Result<()> {
    let header = Header {
        n: dataset.input_dim,
        classes: dataset.num_classes,
        meta: dataset.metadata.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for ts in &dataset.series {
        let record = Record {
            id: ts.id().to_string(),
            times: ts.times().to_vec(),
            values: ts.values().chunks(ts.input_dim()).map(<[f64]>::to_vec).collect(),
            label: ts.label(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| schema(path, "empty file, expected a header line"))?
        .map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| schema(path, format!("header: {e}")))?;
    if header.n == 0 || header.classes == 0 {
        return Err(schema(path, "header n and classes must be positive"));
    }
    let mut series = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 2;
        let rec: Record = serde_json::from_str(&line).map_err(|e| schema(path, format!("line {row}: {e}")))?;
        if rec.values.len() != rec.times.len() {
            return Err(schema(
                path,
                format!("line {row}: {} value rows for {} times", rec.values.len(), rec.times.len()),
            ));
        }
        if let Some(bad) = rec.values.iter().find(|v| v.len() != header.n) {
            return Err(schema(path, format!("line {row}: value row of length {}, header says n = {}", bad.len(), header.n)));
        }
        if let Some(c) = rec.label.filter(|&c| c >= header.classes) {
            return Err(schema(path, format!("line {row}: label {c} outside [0, {})", header.classes)));
        }
        let ts = TimeSeries::new(rec.id, rec.times, rec.values, rec.label).map_err(|e| schema(path, format!("line {row}: {e}")))?;
        series.push(ts);
    }
    let mut ds = Dataset::new(series, header.n, header.classes).map_err(|e| schema(path, e.to_string()))?;
    ds.metadata = header.meta;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    dictionary: DictionarySpec,
    n: usize,
    classes: usize,
    beta: Vec<f64>,
    #[serde(rename = "B")]
    forcing: Vec<f64>,
    #[serde(rename = "A")]
    readout: Vec<f64>,
    b: Vec<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Trained parameters together with their dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: DictionarySpec,
    pub params: Parameters,
    pub meta: BTreeMap<String, String>,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.params.check_shapes(&checkpoint.spec)?;
    let p = &checkpoint.params;
    let file = CheckpointFile {
        dictionary: checkpoint.spec.clone(),
        n: p.input_dim(),
        classes: p.num_classes(),
        beta: p.beta.data.clone(),
        forcing: p.forcing.data.clone(),
        readout: p.readout.data.clone(),
        b: p.bias.clone(),
        meta: checkpoint.meta.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| schema(path, e.to_string()))?;
    let m = file.dictionary.hidden_dim();
    let d = file.dictionary.dimension();
    let expect = |name: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(schema(path, format!("`{name}` has {got} entries, expected {want}")))
        }
    };
    expect("beta", file.beta.len(), m * d)?;
    expect("B", file.forcing.len(), m * file.n)?;
    expect("A", file.readout.len(), file.classes * m)?;
    expect("b", file.b.len(), file.classes)?;
    let params = Parameters {
        beta: Matrix::from_vec(m, d, file.beta),
        forcing: Matrix::from_vec(m, file.n, file.forcing),
        readout: Matrix::from_vec(file.classes, m, file.readout),
        bias: file.b,
    };
    if !params.is_finite() {
        return Err(schema(path, "non-finite parameter values"));
    }
    Ok(Checkpoint {
        spec: file.dictionary,
        params,
        meta: file.meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Comma,
    Whitespace,
}

impl Delimiter {
    /// Tab if the line has one, else comma if it has one, else whitespace.
    pub fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    fn split<'a>(self, line: &'a str) -> Box<dyn Iterator<Item = &'a str> + 'a> {
        match self {
            Delimiter::Tab => Box::new(line.split('\t').map(str::trim)),
            Delimiter::Comma => Box::new(line.split(',').map(str::trim)),
            Delimiter::Whitespace => Box::new(line.split_whitespace()),
        }
    }
}

/// Read a UCR-archive file: each row is a class label followed by the series
/// values. Labels are remapped to `0..k` in sorted order (numerically when
/// every label parses as a number) and the mapping is stored in the metadata
/// as `label/<original> = <index>`; times are `0, 1, …, M−1`.
pub fn read_ucr(path: &Path, delimiter: Option<Delimiter>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ucr").to_string();
    parse_ucr(&text, &stem, delimiter)
}

pub fn parse_ucr(text: &str, id_prefix: &str, delimiter: Option<Delimiter>) -> Result<Dataset> {
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    let Some(&(_, first)) = rows.first() else {
        return Err(NaedError::invalid("UCR file", "contains no rows"));
    };
    let delim = delimiter.unwrap_or_else(|| Delimiter::detect(first));

    let mut labels = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    let mut expected = None;
    for &(row, line) in &rows {
        let mut fields = delim.split(line);
        let label = fields.next().unwrap_or_default().to_string();
        if label.is_empty() {
            return Err(NaedError::Parse {
                row,
                column: 1,
                reason: "missing class label".into(),
            });
        }
        let vals = fields
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| NaedError::Parse {
                    row,
                    column: c + 2,
                    reason: format!("`{f}` is not a finite number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match expected {
            None => expected = Some(vals.len()),
            Some(len) if len != vals.len() => {
                return Err(NaedError::RaggedRows {
                    row,
                    expected: len,
                    found: vals.len(),
                })
            }
            _ => {}
        }
        labels.push(label);
        values.push(vals);
    }
    let length = expected.unwrap_or(0);
    if length < 2 {
        return Err(NaedError::invalid("UCR file", format!("series need at least two values, found {length}")));
    }

    let mut distinct: Vec<String> = labels.clone();
    distinct.sort();
    distinct.dedup();
    let numeric: Option<Vec<f64>> = distinct.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, String)> = nums.into_iter().zip(distinct).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        distinct = paired.into_iter().map(|(_, l)| l).collect();
    }
    let index: BTreeMap<&str, usize> = distinct.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let times: Vec<f64> = (0..length).map(|t| t as f64).collect();
    let width = rows.len().saturating_sub(1).to_string().len().max(5);
    let series = labels
        .iter()
        .zip(values)
        .enumerate()
        .map(|(i, (l, v))| TimeSeries::from_flat(format!("{id_prefix}-{i:0width$}"), times.clone(), v, 1, Some(index[l.as_str()])))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(series, 1, distinct.len())?;
    for (l, i) in &index {
        ds.metadata.insert(format!("label/{l}"), i.to_string());
    }
    ds.metadata.insert("source".into(), "ucr".into());
    Ok(ds)
}

/// Path of a sibling file with the given extension appended to the stem.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::initialize;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sample_dataset() -> Dataset {
        let a = TimeSeries::new("a", vec![0.0, 0.1, 0.3], vec![vec![1.0, -0.0], vec![0.1, 2.5], vec![1e-300, 3.0]], Some(1)).unwrap();
        let b = TimeSeries::new("b", vec![0.0, 1.0], vec![vec![std::f64::consts::PI, 0.2], vec![-7.0, 1.0 / 3.0]], Some(0)).unwrap();
        let mut ds = Dataset::new(vec![a, b], 2, 2).unwrap();
        ds.metadata.insert("k".into(), "v".into());
        ds
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tmp();
        let path = dir.path().join("d.jsonl");
        let ds = sample_dataset();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert!(back.series[0].value(0)[1].is_sign_negative());
    }

    #[test]
    fn header_class_mismatch_is_schema_error() {
        let dir = tmp();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"n\":1,\"classes\":2,\"meta\":{}}\n{\"id\":\"x\",\"times\":[0,1],\"values\":[[1],[2]],\"label\":2}\n",
        )
        .unwrap();
        assert!(matches!(read_dataset(&path), Err(NaedError::Schema { .. })));
        std::fs::write(&path, "{\"n\":1,\"classes\":2}\n{\"id\":\"x\",\"times\":[0,1],\"values\":[[1]],\"label\":0}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(NaedError::Schema { .. })));
        std::fs::write(&path, "{\"n\":1,\"classes\":2,\"extra\":1}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(NaedError::Schema { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tmp();
        let path = dir.path().join("c.json");
        let spec = DictionarySpec::fourier(2, 2, 10.0).unwrap();
        let ck = Checkpoint {
            params: initialize(&spec, 1, 2, 77),
            spec,
            meta: BTreeMap::from([("seed".to_string(), "77".to_string())]),
        };
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let scalars: usize = ["beta", "B", "A", "b"].iter().map(|k| v[k].as_array().unwrap().len()).sum();
        assert_eq!(scalars, crate::model::param_count(&ck.spec, 1, 2));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_schema_error() {
        let dir = tmp();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"dictionary":{"kind":"polynomial","m":1,"k":1},"n":1,"classes":2,"beta":[1.0],"B":[0.0],"A":[1.0,2.0],"b":[0.0,0.0]}"#,
        )
        .unwrap();
        assert!(matches!(read_checkpoint(&path), Err(NaedError::Schema { .. })));
    }

    #[test]
    fn minimal_ucr_parse() {
        let ds = parse_ucr("1 0.5 0.7\n2 0.1 0.2\n", "t", None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.series[0].label(), Some(0));
        assert_eq!(ds.series[1].label(), Some(1));
        assert_eq!(ds.series[0].times(), &[0.0, 1.0]);
        assert_eq!(ds.metadata["label/2"], "1");
    }

    #[test]
    fn ucr_labels_sorted_numerically() {
        let ds = parse_ucr("10,1,2\n-1,3,4\n2,5,6\n", "t", None).unwrap();
        let labels: Vec<usize> = ds.series.iter().filter_map(TimeSeries::label).collect();
        assert_eq!(labels, vec![2, 0, 1]);
    }

    #[test]
    fn ucr_errors() {
        match parse_ucr("1\t0.5\t0.7\n2\t0.1\tx\n", "t", None) {
            Err(NaedError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 3)),
            other => panic!("{other:?}"),
        }
        match parse_ucr("1,0.5,0.7\n2,0.1\n", "t", None) {
            Err(NaedError::RaggedRows { row, expected, found }) => assert_eq!((row, expected, found), (2, 2, 1)),
            other => panic!("{other:?}"),
        }
        assert!(parse_ucr("\n\n", "t", None).is_err());
    }

    #[test]
    fn explicit_delimiter_override() {
        let ds = parse_ucr("1 0.5;0.7 0.2\n", "t", Some(Delimiter::Whitespace));
        assert!(matches!(ds, Err(NaedError::Parse { .. })));
        let ds = parse_ucr("a,1.5,2\n", "t", Some(Delimiter::Comma)).unwrap();
        assert_eq!(ds.series[0].values(), &[1.5, 2.0]);
    }
}
