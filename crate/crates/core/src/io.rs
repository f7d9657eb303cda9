//! On-disk formats: model JSON, dataset sidecar + binary payload, quantizer
//! JSON and line-delimited JSON logs.
//!
//! Floats are written with serde_json's shortest round-trip representation,
//! so `load(save(x)) == x` bit for bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mimo::{Dataset, DatasetMeta, Sample, DATASET_VERSION};
use crate::network::{NetworkParams, StepMode, TrainingMeta};
use crate::quantizer::{Segment, SoftQuantizerParams};
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u64 = 1;
pub const QUANTIZER_FORMAT_VERSION: u64 = 1;

fn parse_err(path: &Path, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.into(),
    }
}

/// Last object key that starts before byte `offset`.
fn key_before(text: &str, offset: usize) -> Option<String> {
    let mut head = text.get(..offset).unwrap_or(text);
    while let Some(colon) = head.rfind(':') {
        let before = head[..colon].trim_end();
        if let Some(stripped) = before.strip_suffix('"') {
            if let Some(open) = stripped.rfind('"') {
                return Some(stripped[open + 1..].to_string());
            }
        }
        head = &head[..colon];
    }
    None
}

/// Parses JSON, naming the enclosing field on syntax errors.
fn parse_json(text: &str, path: &Path) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        let offset = line_col_to_offset(text, e.line(), e.column());
        let field = key_before(text, offset).unwrap_or_else(|| "<root>".into());
        parse_err(path, &field, e.to_string())
    })
}

fn line_col_to_offset(text: &str, line: usize, col: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + col.min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

fn field<'a>(obj: &'a Value, name: &str, path: &Path) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| parse_err(path, name, "missing field"))
}

fn as_u64(v: &Value, name: &str, path: &Path) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| parse_err(path, name, format!("expected an unsigned integer, got {v}")))
}

fn as_f64(v: &Value, name: &str, path: &Path) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| parse_err(path, name, format!("expected a number, got {v}")))
}

fn as_matrix<T: Scalar>(v: &Value, name: &str, path: &Path) -> Result<Vec<Vec<T>>> {
    let rows = v
        .as_array()
        .ok_or_else(|| parse_err(path, name, "expected an array of arrays"))?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let label = format!("{name}[{i}]");
            let row = row
                .as_array()
                .ok_or_else(|| parse_err(path, &label, "expected an array"))?;
            row.iter()
                .enumerate()
                .map(|(j, x)| Ok(T::lit(as_f64(x, &format!("{label}[{j}]"), path)?)))
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct ModelFile<'a> {
    format_version: u64,
    mode: StepMode,
    nt: usize,
    nr: usize,
    num_layers: usize,
    alphas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
    training_meta: &'a TrainingMeta,
}

fn to_f64_rows<T: Scalar>(rows: &[Vec<T>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
}

pub fn model_to_json<T: Scalar>(params: &NetworkParams<T>) -> Result<String> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        mode: params.mode,
        nt: params.nt,
        nr: params.nr,
        num_layers: params.num_layers(),
        alphas: to_f64_rows(&params.alphas),
        betas: to_f64_rows(&params.betas),
        training_meta: &params.meta,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses a model file; `path` is only used in error messages.
pub fn model_from_json<T: Scalar>(text: &str, path: &Path) -> Result<NetworkParams<T>> {
    let v = parse_json(text, path)?;
    let version = as_u64(field(&v, "format_version", path)?, "format_version", path)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let mode: StepMode =
        serde_json::from_value(field(&v, "mode", path)?.clone()).map_err(|e| parse_err(path, "mode", e.to_string()))?;
    let nt = as_u64(field(&v, "nt", path)?, "nt", path)? as usize;
    let nr = as_u64(field(&v, "nr", path)?, "nr", path)? as usize;
    let num_layers = as_u64(field(&v, "num_layers", path)?, "num_layers", path)? as usize;
    let alphas = as_matrix::<T>(field(&v, "alphas", path)?, "alphas", path)?;
    let betas = as_matrix::<T>(field(&v, "betas", path)?, "betas", path)?;
    if alphas.len() != num_layers {
        return Err(parse_err(
            path,
            "alphas",
            format!("{} layers, num_layers says {num_layers}", alphas.len()),
        ));
    }
    if betas.len() != num_layers {
        return Err(parse_err(
            path,
            "betas",
            format!("{} layers, num_layers says {num_layers}", betas.len()),
        ));
    }
    let meta = match v.get("training_meta") {
        None | Some(Value::Null) => TrainingMeta::default(),
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| parse_err(path, "training_meta", e.to_string()))?,
    };
    let mut params =
        NetworkParams::new(mode, nt, nr, alphas, betas).map_err(|e| parse_err(path, "alphas", e.to_string()))?;
    params.meta = meta;
    Ok(params)
}

pub fn save_model<T: Scalar>(params: &NetworkParams<T>, path: &Path) -> Result<()> {
    write_atomic(path, model_to_json(params)?.as_bytes())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<NetworkParams<T>> {
    model_from_json(&fs::read_to_string(path)?, path)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Sidecar header path for a dataset payload.
pub fn dataset_header_path(payload: &Path) -> PathBuf {
    let mut name = payload.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    payload.with_file_name(name)
}

/// Writes `payload` (little-endian f32: y, H row-major, s per sample) and its
/// `.json` header.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, payload: &Path) -> Result<()> {
    let mut meta = dataset.meta.clone();
    meta.count = dataset.samples.len();
    if let Some(dir) = payload.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(payload)?);
    for s in &dataset.samples {
        if s.nt() != meta.nt || s.nr() != meta.nr {
            return Err(Error::dims("save_dataset (sample size)", meta.nt, s.nt()));
        }
        for x in s.y_r.iter().chain(s.h_r.as_slice()).chain(&s.s_r) {
            out.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    fs::write(dataset_header_path(payload), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(payload: &Path) -> Result<Dataset<T>> {
    let header = dataset_header_path(payload);
    let text = fs::read_to_string(&header)?;
    let value = parse_json(&text, &header)?;
    let version = as_u64(field(&value, "version", &header)?, "version", &header)?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let meta: DatasetMeta = serde_json::from_value(value).map_err(|e| parse_err(&header, "<header>", e.to_string()))?;
    if meta.snr_db.is_empty() {
        return Err(parse_err(&header, "snr_db", "empty SNR list"));
    }
    let bytes = fs::read(payload)?;
    let (k, m) = (2 * meta.nt, 2 * meta.nr);
    let per = m + m * k + k;
    let want = meta.count * per * 4;
    if bytes.len() != want {
        return Err(parse_err(
            payload,
            "payload",
            format!("{} bytes, header implies {want}", bytes.len()),
        ));
    }
    let floats: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let samples = floats
        .chunks_exact(per)
        .enumerate()
        .map(|(i, chunk)| {
            let (y, rest) = chunk.split_at(m);
            let (h, s) = rest.split_at(m * k);
            Ok(Sample {
                y_r: y.to_vec(),
                h_r: Matrix::from_vec(m, k, h.to_vec())?,
                s_r: s.to_vec(),
                snr_db: meta.snr_db[i % meta.snr_db.len()],
                seed: crate::mimo::derive_seed(meta.seed, i as u64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, meta })
}

#[derive(Serialize, Deserialize)]
struct QuantizerFile {
    format_version: u64,
    l: usize,
    #[serde(rename = "Gb")]
    gb: f64,
    #[serde(rename = "G")]
    g: f64,
    sigma_final: f64,
    segments: Vec<Segment<f64>>,
    snapped_levels: Vec<f64>,
    snapped_thresholds: Vec<f64>,
}

/// Learned quantizer plus its snapped staircase.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerArtifact<T> {
    pub params: SoftQuantizerParams<T>,
    pub snapped_levels: Vec<T>,
    pub snapped_thresholds: Vec<T>,
}

pub fn save_quantizer<T: Scalar>(q: &QuantizerArtifact<T>, path: &Path) -> Result<()> {
    let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let file = QuantizerFile {
        format_version: QUANTIZER_FORMAT_VERSION,
        l: q.params.l,
        gb: q.params.gb.as_f64(),
        g: q.params.step().as_f64(),
        sigma_final: q.params.sigma.as_f64(),
        segments: q.params.segments.iter().map(Segment::to_f64).collect(),
        snapped_levels: f(&q.snapped_levels),
        snapped_thresholds: f(&q.snapped_thresholds),
    };
    write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

pub fn load_quantizer<T: Scalar>(path: &Path) -> Result<QuantizerArtifact<T>> {
    let text = fs::read_to_string(path)?;
    let v = parse_json(&text, path)?;
    let version = as_u64(field(&v, "format_version", path)?, "format_version", path)?;
    if version != QUANTIZER_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: QUANTIZER_FORMAT_VERSION,
        });
    }
    let file: QuantizerFile = serde_json::from_value(v).map_err(|e| parse_err(path, "<quantizer>", e.to_string()))?;
    let t = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<_>>();
    let params = SoftQuantizerParams::new(
        file.l,
        T::lit(file.gb),
        T::lit(file.sigma_final),
        file.segments.iter().map(Segment::from_f64).collect(),
    )
    .map_err(|e| parse_err(path, "segments", e.to_string()))?;
    Ok(QuantizerArtifact {
        params,
        snapped_levels: t(&file.snapped_levels),
        snapped_thresholds: t(&file.snapped_thresholds),
    })
}

/// Appends serializable records as line-delimited JSON.
pub struct JsonLinesWriter<W: Write> {
    out: W,
}

impl JsonLinesWriter<BufWriter<fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(JsonLinesWriter {
            out: BufWriter::new(fs::File::create(path)?),
        })
    }
}

impl<W: Write> JsonLinesWriter<W> {
    pub fn new(out: W) -> Self {
        JsonLinesWriter { out }
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
