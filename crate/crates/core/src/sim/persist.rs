//! `.hatp` files for trained harness models.
//!
//! The window encoder is stored under `window.*`. A HAT model adds its
//! parameters under `hat.*`; an implicit model adds `implicit.*` and writes
//! an empty model list in the manifest, which is how the two are told apart.

use std::io::{Read, Write};

use super::observe::WindowEncoder;
use super::train::{HatModel, ImplicitModel};
use super::SimError;
use crate::baselines::ImplicitParams;
use crate::hat::io::{params_from_named, read_tensors, write_tensors, Provenance};
use crate::hat::{HatConfig, HatError};
use crate::tensor::Tensor;

const HAT_PREFIX: &str = "hat.";
const IMPLICIT_PREFIX: &str = "implicit.";

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SavedModel {
    Hat(HatModel),
    Implicit(ImplicitModel),
}

impl SavedModel {
    pub fn channels(&self) -> usize {
        match self {
            SavedModel::Hat(m) => m.hat.config.channels,
            SavedModel::Implicit(m) => m.implicit.channels(),
        }
    }
}

fn named<'a>(names: Vec<String>, prefix: &str, tensors: Vec<&'a Tensor>) -> Vec<(String, &'a Tensor)> {
    names.into_iter().map(|n| format!("{prefix}{n}")).zip(tensors).collect()
}

fn assign(names: Vec<String>, prefix: &str, slots: Vec<&mut Tensor>, found: &[(String, Tensor)]) -> Result<(), SimError> {
    for (name, slot) in names.iter().zip(slots) {
        let full = format!("{prefix}{name}");
        let (_, t) = found
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| HatError::Format(format!("missing tensor '{full}'")))?;
        if t.shape() != slot.shape() {
            return Err(HatError::Format(format!("tensor '{full}' has shape {:?}, expected {:?}", t.shape(), slot.shape()))
                .into());
        }
        *slot = t.clone();
    }
    Ok(())
}

pub fn save_hat_model<W: Write>(w: W, model: &HatModel, provenance: &Provenance) -> Result<(), SimError> {
    let mut tensors = named(WindowEncoder::tensor_names(), "", model.encoder.tensors());
    tensors.extend(crate::hat::io::named_tensors(&model.hat, HAT_PREFIX));
    Ok(write_tensors(w, provenance, &model.hat.config, &tensors)?)
}

pub fn save_implicit_model<W: Write>(w: W, model: &ImplicitModel, provenance: &Provenance) -> Result<(), SimError> {
    let mut tensors = named(WindowEncoder::tensor_names(), "", model.encoder.tensors());
    tensors.extend(named(ImplicitParams::tensor_names(), IMPLICIT_PREFIX, model.implicit.tensors()));
    let config = HatConfig { channels: model.implicit.channels(), models: vec![] };
    Ok(write_tensors(w, provenance, &config, &tensors)?)
}

pub fn load_model<R: Read>(r: R) -> Result<(SavedModel, Provenance), SimError> {
    let (manifest, found) = read_tensors(r)?;
    let c = manifest.hat.channels;
    let mut encoder = WindowEncoder::zeros(c);
    assign(WindowEncoder::tensor_names(), "", encoder.tensors_mut(), &found)?;
    let model = if manifest.hat.models.is_empty() {
        let mut implicit = ImplicitParams::zeros(c);
        assign(ImplicitParams::tensor_names(), IMPLICIT_PREFIX, implicit.tensors_mut(), &found)?;
        SavedModel::Implicit(ImplicitModel { encoder, implicit })
    } else {
        manifest.hat.validate()?;
        let hat = params_from_named(&manifest.hat, &found, HAT_PREFIX)?;
        SavedModel::Hat(HatModel { encoder, hat })
    };
    Ok((model, manifest.provenance))
}
