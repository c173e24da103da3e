//! Self-describing checkpoint container.
//!
//! A checkpoint embeds the full config text, the training step counters,
//! and every parameter tensor tagged with its name and group, so a decoder
//! process can rebuild the exact model without out-of-band information.
//! Parameters are restored by name with shape checks rather than by
//! position, which catches model/checkpoint mismatches loudly. All binary
//! fields are little-endian; float payloads are raw f64 bits, so values
//! round-trip exactly and decode stays bit-reproducible across processes.

use crate::config::ModelConfig;
use crate::error::{DiffcrError, Result};
use crate::tensor::{ParamGroup, ParamStore};
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::path::Path;

const MAGIC: [u8; 4] = *b"DCK1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    pub ae_steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub adam_t: u64,
}

pub struct LoadedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f64>,
    pub adam: Option<(ArrayD<f64>, ArrayD<f64>)>,
}

pub fn save(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore,
    state: TrainState,
    include_adam: bool,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    let cfg_text = config.to_text();
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    for v in [state.ae_steps, state.stage1_steps, state.stage2_steps, state.adam_t] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let ids: Vec<_> = store.ids().collect();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    out.push(include_adam as u8);
    for &id in &ids {
        let name = store.name(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let tag = store.group(id).tag();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        put_array(&mut out, store.value(id));
        if include_adam {
            let (m, v) = store.adam_state(id);
            put_array(&mut out, m);
            put_array(&mut out, v);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, TrainState, Vec<LoadedParam>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(DiffcrError::Checkpoint(format!(
                "truncated checkpoint at offset {} (wanted {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(DiffcrError::Checkpoint("bad checkpoint magic".into()));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|_| DiffcrError::Checkpoint("config text is not utf-8".into()))?;
    let config = ModelConfig::parse(cfg_text)
        .map_err(|e| DiffcrError::Checkpoint(format!("embedded config: {e}")))?;
    let mut counters = [0u64; 4];
    for c in &mut counters {
        *c = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    }
    let state = TrainState {
        ae_steps: counters[0],
        stage1_steps: counters[1],
        stage2_steps: counters[2],
        adam_t: counters[3],
    };
    let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let with_adam = match take(&mut pos, 1)?[0] {
        0 => false,
        1 => true,
        v => return Err(DiffcrError::Checkpoint(format!("bad adam flag {v}"))),
    };
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| DiffcrError::Checkpoint("param name is not utf-8".into()))?
            .to_string();
        let tag_len = take(&mut pos, 1)?[0] as usize;
        let tag = std::str::from_utf8(take(&mut pos, tag_len)?)
            .map_err(|_| DiffcrError::Checkpoint("group tag is not utf-8".into()))?;
        let group = ParamGroup::from_tag(tag)
            .ok_or_else(|| DiffcrError::Checkpoint(format!("unknown group tag {tag:?}")))?;
        let value = get_array(&bytes, &mut pos)?;
        let adam = if with_adam {
            let m = get_array(&bytes, &mut pos)?;
            let v = get_array(&bytes, &mut pos)?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(DiffcrError::Checkpoint(format!(
                    "adam state shape mismatch for {name}"
                )));
            }
            Some((m, v))
        } else {
            None
        };
        params.push(LoadedParam { name, group, value, adam });
    }
    if pos != bytes.len() {
        return Err(DiffcrError::Checkpoint(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - pos
        )));
    }
    Ok((config, state, params))
}

/// Copy loaded values into a freshly constructed store, matching by name.
/// Every checkpoint entry must find its parameter and vice versa.
pub fn install(store: &mut ParamStore, params: Vec<LoadedParam>) -> Result<()> {
    use std::collections::HashMap;
    let mut by_name: HashMap<String, LoadedParam> =
        params.into_iter().map(|p| (p.name.clone(), p)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let loaded = by_name.remove(&name).ok_or_else(|| {
            DiffcrError::Checkpoint(format!("checkpoint is missing parameter {name:?}"))
        })?;
        if loaded.value.shape() != store.value(id).shape() {
            return Err(DiffcrError::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                loaded.value.shape(),
                store.value(id).shape()
            )));
        }
        if loaded.group != store.group(id) {
            return Err(DiffcrError::Checkpoint(format!(
                "group mismatch for {name:?}: checkpoint {}, model {}",
                loaded.group.tag(),
                store.group(id).tag()
            )));
        }
        *store.value_mut(id) = loaded.value;
        if let Some((m, v)) = loaded.adam {
            store.set_adam_state(id, m, v);
        }
    }
    if !by_name.is_empty() {
        let mut extra: Vec<_> = by_name.keys().cloned().collect();
        extra.sort();
        return Err(DiffcrError::Checkpoint(format!(
            "checkpoint has {} parameters the model does not: {:?}",
            extra.len(),
            &extra[..extra.len().min(4)]
        )));
    }
    Ok(())
}

fn put_array(out: &mut Vec<u8>, arr: &ArrayD<f64>) {
    out.push(arr.ndim() as u8);
    for &d in arr.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_array(bytes: &[u8], pos: &mut usize) -> Result<ArrayD<f64>> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(DiffcrError::Checkpoint(format!(
                "truncated checkpoint at offset {} (wanted {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let ndim = take(pos, 1)?[0] as usize;
    if ndim > 8 {
        return Err(DiffcrError::Checkpoint(format!("implausible ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let d = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| DiffcrError::Checkpoint("dimension overflow".into()))?;
        dims.push(d);
    }
    if len > (1 << 28) {
        return Err(DiffcrError::Checkpoint(format!("implausible tensor of {len} elements")));
    }
    let raw = take(pos, 8 * len)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| DiffcrError::Checkpoint(format!("bad tensor shape: {e}")))
}
