//! WNET1 checkpoint format.
//!
//! Layout (little endian): magic `WNET1`; u32 header length + structured-text
//! header (key = value lines recording the task and model configuration);
//! u32 parameter count; per parameter a u32 name length + name, u8 rank,
//! rank u32 dims, then the f32 payload; finally a u64 length checksum equal
//! to the byte length of everything before it.

use crate::error::FormatError;
use crate::model::{ModelConfig, Tap, TaskConfig, WNet};
use crate::scalar::Scalar;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 5] = b"WNET1";

fn header_text(model: &ModelConfig, task: &TaskConfig) -> String {
    let tasks: Vec<&str> = [
        (task.t1_recon, "t1"),
        (task.t2_seg, "t2"),
        (task.t3_class, "t3"),
        (task.t4_pred, "t4"),
    ]
    .iter()
    .filter_map(|&(on, name)| on.then_some(name))
    .collect();
    let taps: Vec<String> = task.taps.iter().map(|t| t.to_string()).collect();
    format!(
        "alpha = {}\nlambda = {}\ntasks = {}\nuse_global_features = {}\nuse_tumor_features = {}\ntaps = {}\nbase_channels = {}\ninput_dims = {}x{}x{}\nseed = {}\nintra_block_residual = {}\ndropout = {}\n",
        task.alpha,
        task.lambda,
        tasks.join(","),
        task.use_global_features,
        task.use_tumor_features,
        taps.join(","),
        model.base_channels,
        model.input_dims[0],
        model.input_dims[1],
        model.input_dims[2],
        model.seed,
        model.intra_block_residual,
        model.dropout,
    )
}

fn parse_header(path: &str, text: &str) -> Result<(ModelConfig, TaskConfig), FormatError> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String, FormatError> {
        map.get(k).ok_or(FormatError::Malformed {
            path: path.to_string(),
            what: "checkpoint header",
            detail: format!("missing key '{k}'"),
        })
    };
    let bad = |what: &'static str, detail: String| FormatError::Malformed {
        path: path.to_string(),
        what,
        detail,
    };
    let tasks = get("tasks")?;
    let taps = get("taps")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| Tap::parse(s.trim()).map_err(|e| bad("tap", e.to_string())))
        .collect::<Result<Vec<Tap>, FormatError>>()?;
    let dims_text = get("input_dims")?;
    let dims: Vec<usize> = dims_text
        .split('x')
        .map(|s| s.parse().map_err(|_| bad("input_dims", dims_text.clone())))
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(bad("input_dims", dims_text.clone()));
    }
    let parse_f64 = |k: &str| -> Result<f64, FormatError> {
        get(k)?.parse().map_err(|_| bad("number", k.to_string()))
    };
    let parse_bool = |k: &str| -> Result<bool, FormatError> {
        get(k)?.parse().map_err(|_| bad("bool", k.to_string()))
    };
    let task = TaskConfig {
        t1_recon: tasks.split(',').any(|t| t == "t1"),
        t2_seg: tasks.split(',').any(|t| t == "t2"),
        t3_class: tasks.split(',').any(|t| t == "t3"),
        t4_pred: tasks.split(',').any(|t| t == "t4"),
        use_global_features: parse_bool("use_global_features")?,
        use_tumor_features: parse_bool("use_tumor_features")?,
        alpha: parse_f64("alpha")?,
        lambda: parse_f64("lambda")?,
        taps,
    };
    let model = ModelConfig {
        base_channels: get("base_channels")?
            .parse()
            .map_err(|_| bad("base_channels", get("base_channels").unwrap().clone()))?,
        input_dims: [dims[0], dims[1], dims[2]],
        seed: parse_f64("seed")? as u64,
        intra_block_residual: parse_bool("intra_block_residual")?,
        dropout: parse_f64("dropout")?,
    };
    Ok((model, task))
}

pub fn save<S: Scalar>(net: &WNet<S>, path: &Path) -> Result<(), FormatError> {
    let p = path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = header_text(&net.model, &net.task);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    let params = net.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for param in params {
        buf.extend_from_slice(&(param.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(param.name.as_bytes());
        buf.push(param.value.shape.len() as u8);
        for &d in &param.value.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &param.value.data {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let len = buf.len() as u64;
    buf.extend_from_slice(&len.to_le_bytes());
    let mut f = std::fs::File::create(path).map_err(|e| FormatError::io(&p, e))?;
    f.write_all(&buf).map_err(|e| FormatError::io(&p, e))
}

/// Rebuilds the model recorded in the checkpoint and fills its parameters.
pub fn load<S: Scalar>(path: &Path) -> Result<WNet<S>, FormatError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(&p, e))?;
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..5] != MAGIC {
        return Err(FormatError::BadMagic {
            path: p,
            expected: "WNET1",
        });
    }
    let recorded = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let actual = (bytes.len() - 8) as u64;
    if recorded != actual {
        return Err(FormatError::BadChecksum {
            path: p,
            recorded,
            actual,
        });
    }
    let mut at = 5usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], FormatError> {
        if *at + n > bytes.len() - 8 {
            return Err(FormatError::Truncated {
                path: path.display().to_string(),
                need: (*at + n) as u64,
                have: (bytes.len() - 8) as u64,
            });
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let header_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let header = String::from_utf8(take(&mut at, header_len)?.to_vec()).map_err(|e| {
        FormatError::Malformed {
            path: p.clone(),
            what: "checkpoint header",
            detail: e.to_string(),
        }
    })?;
    let (model_cfg, task_cfg) = parse_header(&p, &header)?;
    let mut net: WNet<S> = WNet::new(model_cfg, task_cfg)
        .map_err(|e| FormatError::Incompatible(e.to_string()))?;

    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut stored: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec()).map_err(|e| {
            FormatError::Malformed {
                path: p.clone(),
                what: "parameter name",
                detail: e.to_string(),
            }
        })?;
        let rank = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut at, numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        stored.insert(name, (shape, data));
    }

    for param in net.params_mut() {
        let (shape, data) = stored.remove(&param.name).ok_or_else(|| {
            FormatError::Incompatible(format!("checkpoint is missing parameter '{}'", param.name))
        })?;
        if shape != param.value.shape {
            return Err(FormatError::Incompatible(format!(
                "parameter '{}' has shape {:?} in the checkpoint but the model expects {:?}",
                param.name, shape, param.value.shape
            )));
        }
        param.value.data = data.iter().map(|&v| S::from_f64(v as f64)).collect();
    }
    if let Some(extra) = stored.keys().next() {
        return Err(FormatError::Incompatible(format!(
            "checkpoint contains unknown parameter '{extra}'"
        )));
    }
    Ok(net)
}
