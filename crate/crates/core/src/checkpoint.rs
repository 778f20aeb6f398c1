//! Checkpoint serialization.
//!
//! Layout: magic `UHCK`, format version (u32 LE), a UTF-8 key=value config
//! block (u64 LE length + bytes), then a manifest of named arrays (count,
//! then per array: name length, name bytes, rank, dims, all u64 LE)
//! followed by the payloads as row-major f32 LE in manifest order. The
//! center table is stored as the array named `centers` with dims [C, q].

use crate::centers::{CenterMethod, HashCenterTable};
use crate::error::{Error, Result};
use crate::network::{GateMode, ModelConfig, ModelParams};
use crate::objectives::LossWeights;
use crate::training::{Checkpoint, DetachSchedule, SplitConfig, TrainConfig};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The key=value text echoed into checkpoints and metric reports.
pub fn config_echo(config: &TrainConfig) -> String {
    config_block(config)
}

fn config_block(config: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("epochs", config.epochs.to_string());
    kv("batch_size", config.batch_size.to_string());
    kv("lambda1", config.weights.center.to_string());
    kv("lambda2", config.weights.pairwise.to_string());
    kv("lambda3", config.weights.mutual.to_string());
    kv("detach_schedule", config.detach_schedule.as_str().to_string());
    kv("learning_rate", config.learning_rate.to_string());
    kv("decay", config.decay.to_string());
    kv("epsilon", config.epsilon.to_string());
    kv(
        "include_diagonal_pairs",
        config.include_diagonal_pairs.to_string(),
    );
    kv("seed", config.seed.to_string());
    kv("input_dim", config.model.input_dim.to_string());
    kv("feature_dim", config.model.feature_dim.to_string());
    kv("code_len", config.model.code_len.to_string());
    kv("num_experts", config.model.num_experts.to_string());
    kv("top_k", config.model.top_k.to_string());
    kv("backbone_depth", config.model.backbone_depth.to_string());
    kv("gate_mode", config.model.gate_mode.as_str().to_string());
    kv("shared_experts", config.model.shared_experts.to_string());
    kv("tanh_output", config.model.tanh_output.to_string());
    kv("center_method", config.center_method.as_str().to_string());
    kv(
        "center_d_floor",
        config
            .center_d_floor
            .map_or_else(|| "auto".to_string(), |v| v.to_string()),
    );
    kv("seen_ratio", config.split.seen_ratio.to_string());
    kv("query_frac", config.split.query_frac.to_string());
    kv("train_frac", config.split.train_frac.to_string());
    s
}

fn parse_config_block(block: &str) -> Result<TrainConfig> {
    let mut map = HashMap::new();
    for (i, line) in block.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("checkpoint config line {}: missing '='", i + 1))
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint config missing key '{k}'")))
    };
    let parse_num = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("checkpoint config key '{k}' is not a number")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("checkpoint config key '{k}' is not an integer")))
    };
    let parse_bool = |k: &str| -> Result<bool> {
        get(k)?
            .parse::<bool>()
            .map_err(|_| Error::Format(format!("checkpoint config key '{k}' is not a bool")))
    };
    let d_floor = match get("center_d_floor")?.as_str() {
        "auto" => None,
        v => Some(v.parse::<usize>().map_err(|_| {
            Error::Format("checkpoint config key 'center_d_floor' is not an integer".into())
        })?),
    };
    Ok(TrainConfig {
        epochs: parse_usize("epochs")?,
        batch_size: parse_usize("batch_size")?,
        weights: LossWeights::new(
            parse_num("lambda1")?,
            parse_num("lambda2")?,
            parse_num("lambda3")?,
        )?,
        detach_schedule: DetachSchedule::parse(get("detach_schedule")?)?,
        learning_rate: parse_num("learning_rate")?,
        decay: parse_num("decay")?,
        epsilon: parse_num("epsilon")?,
        include_diagonal_pairs: parse_bool("include_diagonal_pairs")?,
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|_| Error::Format("checkpoint config key 'seed' is not a u64".into()))?,
        model: ModelConfig {
            input_dim: parse_usize("input_dim")?,
            feature_dim: parse_usize("feature_dim")?,
            code_len: parse_usize("code_len")?,
            num_experts: parse_usize("num_experts")?,
            top_k: parse_usize("top_k")?,
            backbone_depth: parse_usize("backbone_depth")?,
            gate_mode: GateMode::parse(get("gate_mode")?)?,
            shared_experts: parse_bool("shared_experts")?,
            tanh_output: parse_bool("tanh_output")?,
        },
        center_method: CenterMethod::parse(get("center_method")?)?,
        center_d_floor: d_floor,
        split: SplitConfig {
            seen_ratio: parse_num("seen_ratio")?,
            query_frac: parse_num("query_frac")?,
            train_frac: parse_num("train_frac")?,
        },
    })
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut names = ckpt.params.param_names();
    let mut dims = ckpt.params.param_dims();
    let arrays = ckpt.params.param_arrays();
    names.push("centers".to_string());
    dims.push(vec![ckpt.centers.num_classes(), ckpt.centers.code_len]);
    let center_flat: Vec<f64> = ckpt.centers.centers.iter().flatten().copied().collect();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let block = config_block(&ckpt.config);
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&(names.len() as u64).to_le_bytes());
    for (name, dim) in names.iter().zip(&dims) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dim.len() as u64).to_le_bytes());
        for d in dim {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for arr in arrays.iter().map(|a| a.as_slice()).chain([center_flat.as_slice()]) {
        for v in arr {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut cur = &bytes[8..];
    let read_u64 = |cur: &mut &[u8], what: &str| -> Result<u64> {
        let mut buf = [0u8; 8];
        cur.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated checkpoint reading {what}")))?;
        Ok(u64::from_le_bytes(buf))
    };
    let block_len = read_u64(&mut cur, "config block length")? as usize;
    if cur.len() < block_len {
        return Err(Error::Format("truncated checkpoint config block".into()));
    }
    let block = std::str::from_utf8(&cur[..block_len])
        .map_err(|_| Error::Format("checkpoint config block is not UTF-8".into()))?;
    let config = parse_config_block(block)?;
    cur = &cur[block_len..];

    let count = read_u64(&mut cur, "array count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut cur, "array name length")? as usize;
        if cur.len() < name_len {
            return Err(Error::Format("truncated checkpoint array name".into()));
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| Error::Format("checkpoint array name is not UTF-8".into()))?
            .to_string();
        cur = &cur[name_len..];
        let rank = read_u64(&mut cur, "array rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut cur, "array dim")? as usize);
        }
        manifest.push((name, dims));
    }
    let mut payloads: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for (name, dims) in manifest {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 4];
            cur.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!("truncated checkpoint payload for array '{name}'"))
            })?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        payloads.insert(name, (dims, data));
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            cur.len()
        )));
    }

    // Rebuild parameters: start from a zeroed model and fill by name.
    let mut params = zeroed_params(&config.model)?;
    {
        let names = params.param_names();
        let dims = params.param_dims();
        let mut arrays = params.param_arrays_mut();
        for ((name, dim), arr) in names.iter().zip(&dims).zip(arrays.iter_mut()) {
            let (got_dims, data) = payloads
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing array '{name}'")))?;
            if &got_dims != dim {
                return Err(Error::Format(format!(
                    "array '{name}' has dims {got_dims:?}, model expects {dim:?}"
                )));
            }
            **arr = data;
        }
    }

    let (center_dims, center_data) = payloads
        .remove("centers")
        .ok_or_else(|| Error::Format("checkpoint missing array 'centers'".into()))?;
    if center_dims.len() != 2 || center_dims[1] != config.model.code_len {
        return Err(Error::Format(format!(
            "centers array has dims {center_dims:?}, expected [C, {}]",
            config.model.code_len
        )));
    }
    if !payloads.is_empty() {
        let extra: Vec<&String> = payloads.keys().collect();
        return Err(Error::Format(format!(
            "checkpoint has unexpected arrays: {extra:?}"
        )));
    }
    let q = config.model.code_len;
    let mut rows = Vec::with_capacity(center_dims[0]);
    for chunk in center_data.chunks(q) {
        if chunk.iter().any(|v| *v != 1.0 && *v != -1.0) {
            return Err(Error::Format(
                "centers array has entries other than +-1".into(),
            ));
        }
        rows.push(chunk.to_vec());
    }
    let mut centers = HashCenterTable {
        code_len: q,
        centers: rows,
        min_distance: 0,
    };
    centers.min_distance = crate::centers::min_pairwise_hamming(&centers);
    Ok(Checkpoint {
        config,
        params,
        centers,
    })
}

fn zeroed_params(config: &ModelConfig) -> Result<ModelParams> {
    use crate::network::{Expert, Gate, Linear};
    config.validate()?;
    let (d_in, d, q, m) = (
        config.input_dim,
        config.feature_dim,
        config.code_len,
        config.num_experts,
    );
    let mut backbone = Vec::with_capacity(config.backbone_depth);
    for layer in 0..config.backbone_depth {
        let in_dim = if layer == 0 { d_in } else { d };
        backbone.push(Linear::zeros(in_dim, d));
    }
    let bank = if config.shared_experts { m } else { 2 * m };
    let experts = (0..bank)
        .map(|_| Expert {
            l1: Linear::zeros(d, q),
            l2: Linear::zeros(q, q),
        })
        .collect();
    Ok(ModelParams {
        config: *config,
        backbone,
        experts,
        gate_c: Gate {
            l1: Linear::zeros(d, d),
            l2: Linear::zeros(d, m),
        },
        gate_p: Gate {
            l1: Linear::zeros(d, d),
            l2: Linear::zeros(d, m),
        },
    })
}

pub fn write(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centers::generate_centers;

    fn fixture() -> Checkpoint {
        let config = TrainConfig {
            model: ModelConfig {
                input_dim: 6,
                feature_dim: 5,
                code_len: 8,
                num_experts: 3,
                top_k: 2,
                backbone_depth: 2,
                gate_mode: GateMode::Softmax,
                shared_experts: false,
                tanh_output: false,
            },
            center_d_floor: Some(3),
            ..TrainConfig::default()
        };
        let params = ModelParams::init(config.model, 21).unwrap();
        let centers = generate_centers(4, 8, CenterMethod::Hadamard, 0, 21).unwrap();
        Checkpoint {
            config,
            params,
            centers,
        }
    }

    /// f32 storage rounds f64 parameters; compare against the f32 image.
    fn to_f32_image(mut ckpt: Checkpoint) -> Checkpoint {
        for arr in ckpt.params.param_arrays_mut() {
            for v in arr.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        ckpt
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ckpt = fixture();
        let bytes = to_bytes(&ckpt);
        let back = from_bytes(&bytes).unwrap();
        let expect = to_f32_image(ckpt);
        assert_eq!(back.config, expect.config);
        assert_eq!(back.params, expect.params);
        assert_eq!(back.centers, expect.centers);
    }

    #[test]
    fn serialization_is_deterministic() {
        let ckpt = fixture();
        assert_eq!(to_bytes(&ckpt), to_bytes(&ckpt));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&fixture());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = to_bytes(&fixture());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(cut), Err(Error::Format(_))));
    }
}
