//! "PDMC" checkpoint files: little-endian magic, version, tensor count, then
//! per tensor its name, rank, dims and `f32` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelConfig, ModelState};
use crate::error::{PdmError, Result};
use crate::ndnum::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| PdmError::Format(format!("{v} does not fit in u32")))
}

pub fn write_checkpoint(state: &ModelState, w: &mut impl Write) -> Result<()> {
    let named = state.named();
    w.write_all(b"PDMC")?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(u32_of(named.len())?)?;
    for (name, t) in named {
        w.write_u32::<LittleEndian>(u32_of(name.len())?)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(u32_of(t.ndim())?)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(u32_of(d)?)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn infer_config(tensors: &BTreeMap<String, Tensor>) -> Result<ModelConfig> {
    let get = |name: &str| {
        tensors
            .get(name)
            .ok_or_else(|| PdmError::Format(format!("checkpoint lacks {name}")))
    };
    let channels = get("backbone")?.shape()[0];
    let branches = (0..)
        .take_while(|i| tensors.contains_key(&format!("branch{i}.dilated1")))
        .count();
    let reduction = if branches > 0 {
        let reduced = get("branch0.dilated1")?.shape()[0];
        if reduced == 0 {
            return Err(PdmError::Format("empty branch kernel".into()));
        }
        channels / reduced
    } else {
        crate::mfgm::MfgmConfig::default().reduction
    };
    let prototypes = tensors.get("prototypes").map_or(0, |p| p.shape()[0]);
    let weight = get("classifier.weight")?;
    if weight.ndim() != 2 {
        return Err(PdmError::Format(
            "classifier weight must be a matrix".into(),
        ));
    }
    Ok(ModelConfig {
        channels,
        branches,
        reduction,
        prototypes,
        classes: weight.shape()[1],
    })
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"PDMC" {
        return Err(PdmError::Format("not a PDMC checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(PdmError::Format(format!(
            "unsupported PDMC version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| PdmError::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let t = Tensor::new(shape, data.into_iter().map(f64::from).collect())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(PdmError::Format(format!("duplicate tensor {name}")));
        }
    }
    let cfg = infer_config(&tensors)?;
    cfg.validate()
        .map_err(|e| PdmError::Format(format!("checkpoint architecture: {e}")))?;
    let mut state: Model<Tensor> = ModelState::zeros(&cfg);
    if state.named().len() != tensors.len() {
        return Err(PdmError::Format(format!(
            "{} tensors stored, architecture needs {}",
            tensors.len(),
            state.named().len()
        )));
    }
    for (name, slot) in state.named_mut() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| PdmError::Format(format!("checkpoint lacks {name}")))?;
        if t.shape() != slot.shape() {
            return Err(PdmError::Format(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(state, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
