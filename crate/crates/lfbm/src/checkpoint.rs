//! Versioned binary checkpoints.
//!
//! Layout: magic "LFBM", format version (u32 LE), an endianness flag byte
//! (1 = little-endian payload), a length-prefixed JSON metadata block, and
//! named little-endian f64 array sections for every parameter and optional
//! optimizer buffer. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::model::{Generator, PosteriorNet};
use crate::nn::OutputActivation;
use crate::optim::Adam;

pub const MAGIC: &[u8; 4] = b"LFBM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorArch {
    pub enc_hidden: Vec<usize>,
    pub ar_depth: usize,
    pub ar_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub mode: String,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub flow_depth: usize,
    pub coupling_width: usize,
    pub decoder_hidden: Vec<usize>,
    pub output_activation: String,
    pub sigma: f64,
    /// Image shape when the dataset is a raster, for grid exports.
    pub image_shape: Option<(usize, usize)>,
    pub posterior: Option<PosteriorArch>,
    /// Full effective run configuration for provenance and dataset
    /// regeneration.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u8(1)?; // little-endian payload
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::data(format!("metadata encode: {e}")))?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.sections.len() as u32)?;
        for s in &self.sections {
            let name = s.name.as_bytes();
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name)?;
            w.write_u8(s.shape.len() as u8)?;
            for &d in &s.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &s.values {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let fail = |what: &str, e: std::io::Error| Error::data(format!("{}: {what}: {e}", path.display()));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fail("magic", e))?;
        if &magic != MAGIC {
            return Err(Error::data(format!("{}: not a checkpoint (bad magic)", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| fail("version", e))?;
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let endian = r.read_u8().map_err(|e| fail("endian flag", e))?;
        if endian != 1 {
            return Err(Error::data(format!("{}: unsupported endianness flag {endian}", path.display())));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(|e| fail("metadata length", e))? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes).map_err(|e| fail("metadata", e))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| Error::data(format!("{}: metadata decode: {e}", path.display())))?;

        let count = r.read_u32::<LittleEndian>().map_err(|e| fail("section count", e))? as usize;
        let mut sections = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(|e| fail("section name length", e))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| fail("section name", e))?;
            let name = String::from_utf8(name).map_err(|_| Error::data(format!("section {i}: name not UTF-8")))?;
            let ndim = r.read_u8().map_err(|e| fail("section rank", e))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(|e| fail("section shape", e))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = vec![0.0f64; numel];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(|e| fail(&format!("section '{name}' payload"), e))?;
            sections.push(Section { name, shape, values });
        }
        Ok(Checkpoint { meta, sections })
    }
}

fn param_sections(prefix: &str, group: &crate::optim::ParamGroup) -> Vec<Section> {
    group
        .iter()
        .map(|(name, t)| Section {
            name: format!("{prefix}/{name}"),
            shape: t.shape(),
            values: t.values(),
        })
        .collect()
}

fn adam_sections(prefix: &str, adam: &Adam, group: &crate::optim::ParamGroup) -> Vec<Section> {
    let (m, v) = adam.moments();
    let mut out = vec![Section {
        name: format!("opt/{prefix}/scalars"),
        shape: vec![6],
        values: adam.scalars().to_vec(),
    }];
    for (i, (name, t)) in group.iter().enumerate() {
        out.push(Section { name: format!("opt/{prefix}/m/{name}"), shape: t.shape(), values: m[i].clone() });
        out.push(Section { name: format!("opt/{prefix}/v/{name}"), shape: t.shape(), values: v[i].clone() });
    }
    out
}

/// Optimizer states paired with the groups they were built from.
pub struct OptimizerStates<'a> {
    pub prior: Option<&'a Adam>,
    pub generator: Option<&'a Adam>,
    pub posterior: Option<&'a Adam>,
}

pub fn build_checkpoint(
    meta: CheckpointMeta,
    prior: &FlowModel,
    gen: &Generator,
    posterior: Option<&PosteriorNet>,
    opt: Option<&OptimizerStates>,
) -> Checkpoint {
    let mut sections = param_sections("prior", &prior.params());
    sections.extend(param_sections("gen", &gen.params()));
    if let Some(post) = posterior {
        sections.extend(param_sections("post", &post.params()));
    }
    if let Some(states) = opt {
        if let Some(a) = states.prior {
            sections.extend(adam_sections("prior", a, &prior.params()));
        }
        if let Some(a) = states.generator {
            sections.extend(adam_sections("gen", a, &gen.params()));
        }
        if let (Some(a), Some(post)) = (states.posterior, posterior) {
            sections.extend(adam_sections("post", a, &post.params()));
        }
    }
    Checkpoint { meta, sections }
}

fn fill_group(ckpt: &Checkpoint, prefix: &str, group: &crate::optim::ParamGroup) -> Result<()> {
    for (name, tensor) in group.iter() {
        let full = format!("{prefix}/{name}");
        let section = ckpt
            .section(&full)
            .ok_or_else(|| Error::data(format!("checkpoint missing parameter '{full}'")))?;
        if section.shape != tensor.shape() {
            return Err(Error::data(format!(
                "parameter '{full}' has shape {:?} in the checkpoint but the model expects {:?}",
                section.shape,
                tensor.shape()
            )));
        }
        tensor.set_values(&section.values)?;
    }
    Ok(())
}

fn output_activation(name: &str) -> Result<OutputActivation> {
    match name {
        "tanh" => Ok(OutputActivation::Tanh),
        "linear" => Ok(OutputActivation::Linear),
        other => Err(Error::data(format!("unknown output activation '{other}'"))),
    }
}

/// Rebuild models from checkpoint metadata and fill every parameter.
pub fn restore_models(ckpt: &Checkpoint) -> Result<(FlowModel, Generator, Option<PosteriorNet>)> {
    let m = &ckpt.meta;
    let prior = FlowModel::new(m.latent_dim, m.flow_depth, m.coupling_width, 0)?;
    fill_group(ckpt, "prior", &prior.params())?;
    prior.mark_actnorm_initialized();
    let gen = Generator::new(
        m.latent_dim,
        m.data_dim,
        &m.decoder_hidden,
        output_activation(&m.output_activation)?,
        m.sigma,
        0,
    )?;
    fill_group(ckpt, "gen", &gen.params())?;
    let posterior = match &m.posterior {
        None => None,
        Some(arch) => {
            let post = PosteriorNet::new(m.data_dim, m.latent_dim, &arch.enc_hidden, arch.ar_depth, arch.ar_width, 0)?;
            fill_group(ckpt, "post", &post.params())?;
            Some(post)
        }
    };
    Ok((prior, gen, posterior))
}

/// Restore an optimizer captured by [`build_checkpoint`].
pub fn restore_adam(ckpt: &Checkpoint, prefix: &str, group: &crate::optim::ParamGroup) -> Result<Option<Adam>> {
    let scalars = match ckpt.section(&format!("opt/{prefix}/scalars")) {
        None => return Ok(None),
        Some(s) => s,
    };
    if scalars.values.len() != 6 {
        return Err(Error::data(format!("optimizer scalars for '{prefix}' malformed")));
    }
    let mut m = Vec::with_capacity(group.len());
    let mut v = Vec::with_capacity(group.len());
    for (name, tensor) in group.iter() {
        for (store, tag) in [(&mut m, "m"), (&mut v, "v")] {
            let full = format!("opt/{prefix}/{tag}/{name}");
            let section = ckpt
                .section(&full)
                .ok_or_else(|| Error::data(format!("checkpoint missing optimizer buffer '{full}'")))?;
            if section.values.len() != tensor.numel() {
                return Err(Error::data(format!("optimizer buffer '{full}' size mismatch")));
            }
            store.push(section.values.clone());
        }
    }
    let mut adam = Adam::new(group, 0.0, 1.0);
    adam.restore(
        [
            scalars.values[0],
            scalars.values[1],
            scalars.values[2],
            scalars.values[3],
            scalars.values[4],
            scalars.values[5],
        ],
        m,
        v,
    );
    Ok(Some(adam))
}
