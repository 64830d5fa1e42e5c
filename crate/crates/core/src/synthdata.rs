//! Seeded two-modality synthetic data and an identity-balanced batch sampler.
//!
//! Every identity owns a base map whose channels have zero spatial mean, so
//! identity lives in the spatial layout. Every modality owns a map that is
//! constant over space within each channel. A sample is base + modality
//! offset + gaussian noise. Values are rounded through `f32` at generation
//! time so a dataset survives a file round trip unchanged.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PdmError, Result};
use crate::ndnum::Tensor;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Ir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Vis, Modality::Ir];

    pub fn code(self) -> u8 {
        match self {
            Modality::Vis => 0,
            Modality::Ir => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Vis),
            1 => Some(Modality::Ir),
            _ => None,
        }
    }
}

const BASE_STREAM: u64 = 0;
const OFFSET_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;
const SAMPLER_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub samples_per_identity_per_modality: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub identity_separation: f64,
    pub modality_offset_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 8,
            samples_per_identity_per_modality: 32,
            channels: 16,
            height: 9,
            width: 5,
            identity_separation: 3.0,
            modality_offset_scale: 2.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(PdmError::contract("at least one identity is required"));
        }
        if self.samples_per_identity_per_modality == 0 {
            return Err(PdmError::contract(
                "at least one sample per identity and modality",
            ));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(PdmError::contract("map dimensions must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.modality_offset_scale >= 0.0) {
            return Err(PdmError::contract(
                "noise and offset scales must be non-negative",
            ));
        }
        if !(self.identity_separation > self.noise_std) {
            return Err(PdmError::contract(format!(
                "identity separation {} must exceed noise std {}",
                self.identity_separation, self.noise_std
            )));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_identities * self.samples_per_identity_per_modality * 2
    }

    fn map_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[c, h, w]`
    pub map: Tensor,
    pub identity: usize,
    pub modality: Modality,
}

/// Samples ordered by identity, then modality, then draw index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_identities: usize,
    pub per_identity_per_modality: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian_map(rng: &mut impl Rng, shape: [usize; 3], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Identity base maps: gaussian, each channel shifted to zero spatial mean.
fn identity_bases(spec: &SyntheticSpec) -> Vec<Tensor> {
    let mut rng = stream(spec.seed, BASE_STREAM);
    let hw = spec.height * spec.width;
    (0..spec.num_identities)
        .map(|_| {
            let mut t = gaussian_map(&mut rng, spec.map_shape(), spec.identity_separation);
            for ch in t.data_mut().chunks_mut(hw) {
                let mean = ch.iter().sum::<f64>() / hw as f64;
                ch.iter_mut().for_each(|v| *v -= mean);
            }
            t
        })
        .collect()
}

/// Modality offsets: one constant per channel.
fn modality_offsets(spec: &SyntheticSpec) -> [Tensor; 2] {
    let mut rng = stream(spec.seed, OFFSET_STREAM);
    let hw = spec.height * spec.width;
    let mut draw = || {
        let levels: Vec<f64> = (0..spec.channels)
            .map(|_| spec.modality_offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_fn(spec.map_shape(), |i| levels[i / hw])
    };
    [draw(), draw()]
}

fn generate_with(spec: &SyntheticSpec, noise_stream: u64) -> Result<Dataset> {
    spec.validate()?;
    let bases = identity_bases(spec);
    let offsets = modality_offsets(spec);
    let mut rng = stream(spec.seed, noise_stream);
    let mut samples = Vec::with_capacity(spec.num_samples());
    for (identity, base) in bases.iter().enumerate() {
        for modality in Modality::BOTH {
            let offset = &offsets[modality.code() as usize];
            for _ in 0..spec.samples_per_identity_per_modality {
                let noise = gaussian_map(&mut rng, spec.map_shape(), spec.noise_std);
                let data = base
                    .data()
                    .iter()
                    .zip(offset.data())
                    .zip(noise.data())
                    .map(|((b, o), n)| round_f32(b + o + n))
                    .collect();
                samples.push(Sample {
                    map: Tensor::new(spec.map_shape(), data)?,
                    identity,
                    modality,
                });
            }
        }
    }
    Ok(Dataset {
        num_identities: spec.num_identities,
        per_identity_per_modality: spec.samples_per_identity_per_modality,
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        samples,
    })
}

/// Training split.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_with(spec, NOISE_STREAM)
}

/// Same identities and modality offsets as [`generate`], fresh noise.
pub fn generate_heldout(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_with(spec, HELDOUT_STREAM)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn map_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Stacks the chosen samples into `[N, c, h, w]` with their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<Modality>)> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut mods = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| PdmError::contract(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.map.data());
            labels.push(s.identity);
            mods.push(s.modality);
        }
        let t = Tensor::new(
            [indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels, mods))
    }

    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].modality == modality)
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"PDMD")?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        for v in [
            self.len(),
            self.num_identities,
            self.per_identity_per_modality,
            self.channels,
            self.height,
            self.width,
        ] {
            w.write_u32::<LittleEndian>(to_u32(v)?)?;
        }
        for s in &self.samples {
            for &v in s.map.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        for s in &self.samples {
            w.write_u32::<LittleEndian>(to_u32(s.identity)?)?;
        }
        for s in &self.samples {
            w.write_u8(s.modality.code())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PDMD" {
            return Err(PdmError::Format("not a PDMD dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(PdmError::Format(format!(
                "unsupported PDMD version {version}"
            )));
        }
        let mut header = [0usize; 6];
        for h in &mut header {
            *h = r.read_u32::<LittleEndian>()? as usize;
        }
        let [n, ids, per, c, h, w] = header;
        if n != ids * per * 2 {
            return Err(PdmError::Format(format!(
                "{n} samples do not match {ids} identities x {per} x 2"
            )));
        }
        let size = c * h * w;
        let mut maps = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = vec![0f32; size];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            maps.push(Tensor::new(
                [c, h, w],
                data.into_iter().map(f64::from).collect(),
            )?);
        }
        let mut labels = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut labels)?;
        let mut codes = vec![0u8; n];
        r.read_exact(&mut codes)?;
        let mut samples = Vec::with_capacity(n);
        for ((map, y), m) in maps.into_iter().zip(labels).zip(codes) {
            if y as usize >= ids {
                return Err(PdmError::Format(format!("identity label {y} out of range")));
            }
            let modality = Modality::from_code(m)
                .ok_or_else(|| PdmError::Format(format!("bad modality code {m}")))?;
            samples.push(Sample {
                map,
                identity: y as usize,
                modality,
            });
        }
        Ok(Dataset {
            num_identities: ids,
            per_identity_per_modality: per,
            channels: c,
            height: h,
            width: w,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub const FORMAT_VERSION: u32 = 1;

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| PdmError::Format(format!("{v} does not fit in u32")))
}

/// One epoch of PK batches: `p` identities, each contributing `k` visible
/// then `k` infrared samples. No sample is drawn twice within an epoch;
/// leftovers that cannot fill a batch are dropped.
pub fn pk_sample(
    dataset: &Dataset,
    p: usize,
    k: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(PdmError::contract("P and K must be positive"));
    }
    let mut rng = stream(seed, SAMPLER_STREAM + epoch);
    let mut pools: Vec<[Vec<usize>; 2]> = vec![Default::default(); dataset.num_identities];
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.identity >= dataset.num_identities {
            return Err(PdmError::contract(format!(
                "identity {} out of range",
                s.identity
            )));
        }
        pools[s.identity][s.modality.code() as usize].push(i);
    }
    let eligible = pools
        .iter()
        .filter(|m| m[0].len() >= k && m[1].len() >= k)
        .count();
    if eligible < p {
        return Err(PdmError::contract(format!(
            "only {eligible} identities have {k} samples in both modalities, {p} required"
        )));
    }
    // per identity and modality, shuffled chunks of k
    let mut chunks: Vec<[Vec<Vec<usize>>; 2]> = pools
        .into_iter()
        .map(|mut m| {
            m.iter_mut().for_each(|pool| pool.shuffle(&mut rng));
            m.map(|pool| pool.chunks_exact(k).map(|c| c.to_vec()).collect())
        })
        .collect();
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut batches = Vec::new();
    loop {
        order.shuffle(&mut rng);
        let remaining = |id: usize| chunks[id][0].len().min(chunks[id][1].len());
        order.sort_by_key(|&id| std::cmp::Reverse(remaining(id)));
        let chosen: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&id| remaining(id) > 0)
            .take(p)
            .collect();
        if chosen.len() < p {
            break;
        }
        let mut batch = Vec::with_capacity(2 * p * k);
        for id in chosen {
            for m in 0..2 {
                batch.extend(chunks[id][m].pop().unwrap());
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
