//! Model file: a UTF-8 `key=value` header terminated by a line `end`,
//! followed by the weights as little-endian IEEE-754 `f64`.
//!
//! ```text
//! SONGCRAFT-AM
//! version=1
//! sample_rate=8000
//! frame_length_ms=25.0
//! ...
//! dims=117,64,64,37
//! seed=7
//! payload_f64=14303
//! end
//! <payload: norm_mean[ceps], norm_scale[ceps], then per layer W (out×in, row-major), b>
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{AcousticModel, Dense, ModelShape};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

pub const MODEL_MAGIC: &str = "SONGCRAFT-AM";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &AcousticModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AcousticModel> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}

pub(crate) fn encode(model: &AcousticModel) -> Vec<u8> {
    let shape = model.shape();
    let f = &shape.features;
    let dims: Vec<String> = shape.dims().iter().map(|d| d.to_string()).collect();
    let (mean, scale) = model.normalization();
    let mut payload: Vec<f64> = Vec::new();
    payload.extend_from_slice(mean);
    payload.extend_from_slice(scale);
    for layer in model.layers() {
        payload.extend_from_slice(&layer.weights);
        payload.extend_from_slice(&layer.bias);
    }

    let mut header = String::new();
    let _ = writeln!(header, "{MODEL_MAGIC}");
    let _ = writeln!(header, "version={MODEL_VERSION}");
    let _ = writeln!(header, "sample_rate={}", shape.sample_rate);
    let _ = writeln!(header, "frame_length_ms={:?}", f.frame_length_ms);
    let _ = writeln!(header, "frame_shift_ms={:?}", f.frame_shift_ms);
    let _ = writeln!(header, "preemphasis={:?}", f.preemphasis);
    let _ = writeln!(header, "num_mel_filters={}", f.num_mel_filters);
    let _ = writeln!(header, "num_cepstra={}", f.num_cepstra);
    let _ = writeln!(header, "log_floor={:?}", f.log_floor);
    let _ = writeln!(header, "fft_size={}", f.fft_size);
    let _ = writeln!(header, "context_left={}", shape.context_left);
    let _ = writeln!(header, "context_right={}", shape.context_right);
    let _ = writeln!(header, "dims={}", dims.join(","));
    let _ = writeln!(header, "seed={}", model.seed());
    let _ = writeln!(header, "payload_f64={}", payload.len());
    let _ = writeln!(header, "end");

    let mut bytes = header.into_bytes();
    bytes.reserve(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn decode(bytes: &[u8]) -> Result<AcousticModel> {
    let corrupt = |m: &str| Error::CorruptedModel(m.to_string());
    let marker = b"\nend\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt("header terminator not found"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let payload = &bytes[header_end + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(corrupt("bad magic"));
    }
    let kv: HashMap<&str, &str> = lines.filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| corrupt(&format!("missing header key {k}")));
    let version = get("version")?;
    if version != MODEL_VERSION.to_string() {
        return Err(Error::ModelVersion(version.to_string()));
    }
    fn num<T: std::str::FromStr>(s: &str, k: &str) -> Result<T> {
        s.parse().map_err(|_| Error::CorruptedModel(format!("bad value for {k}: {s:?}")))
    }
    let features = FeatureConfig {
        frame_length_ms: num(get("frame_length_ms")?, "frame_length_ms")?,
        frame_shift_ms: num(get("frame_shift_ms")?, "frame_shift_ms")?,
        preemphasis: num(get("preemphasis")?, "preemphasis")?,
        num_mel_filters: num(get("num_mel_filters")?, "num_mel_filters")?,
        num_cepstra: num(get("num_cepstra")?, "num_cepstra")?,
        log_floor: num(get("log_floor")?, "log_floor")?,
        fft_size: num(get("fft_size")?, "fft_size")?,
    };
    let dims: Vec<usize> = get("dims")?
        .split(',')
        .map(|d| num(d, "dims"))
        .collect::<Result<_>>()?;
    if dims.len() < 2 {
        return Err(corrupt("need at least input and output dims"));
    }
    let shape = ModelShape {
        features,
        sample_rate: num(get("sample_rate")?, "sample_rate")?,
        context_left: num(get("context_left")?, "context_left")?,
        context_right: num(get("context_right")?, "context_right")?,
        hidden: dims[1..dims.len() - 1].to_vec(),
        num_pdfs: dims[dims.len() - 1],
    };
    if shape.dims() != dims {
        return Err(corrupt("dims do not match context and cepstra"));
    }
    let seed: u64 = num(get("seed")?, "seed")?;
    let declared: usize = num(get("payload_f64")?, "payload_f64")?;
    let ceps = shape.features.num_cepstra;
    let expected = 2 * ceps + dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    if declared != expected {
        return Err(corrupt(&format!("header declares {declared} weights, shape needs {expected}")));
    }
    if payload.len() != expected * 8 {
        return Err(corrupt(&format!("payload has {} bytes, expected {}", payload.len(), expected * 8)));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mean = take(ceps);
    let scale = take(ceps);
    let layers = dims
        .windows(2)
        .map(|w| Dense { inputs: w[0], outputs: w[1], weights: take(w[0] * w[1]), bias: take(w[1]) })
        .collect();
    AcousticModel::new(&shape, mean, scale, layers, seed)
}
