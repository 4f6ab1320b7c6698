//! Named tensor sets on disk: an `ADK1` weight file plus a JSON sidecar
//! (same stem, `.json` extension) listing each tensor's name and shape
//! alongside model-specific metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_tensors, write_tensors, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save(
    weights: &Path,
    kind: &str,
    tensors: &[(&str, &Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(
        &mut buf,
        &tensors.iter().map(|(_, t)| *t).collect::<Vec<_>>(),
    )?;
    fs::write(weights, buf)?;
    let sidecar = Sidecar {
        kind: kind.to_string(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(sidecar_path(weights), json + "\n")?;
    Ok(())
}

/// Loads a weight file and checks it against its sidecar.
pub fn load(weights: &Path, kind: &str) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let side_path = sidecar_path(weights);
    let text = fs::read_to_string(&side_path)?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::FormatLine {
        line: e.line(),
        msg: format!("{}: {e}", side_path.display()),
    })?;
    if sidecar.kind != kind {
        return Err(Error::FormatLine {
            line: 1,
            msg: format!("expected a {kind} sidecar, found {}", sidecar.kind),
        });
    }
    let bytes = fs::read(weights)?;
    let tensors = read_tensors(&bytes)?;
    if tensors.len() != sidecar.tensors.len() {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "weight file holds {} tensors, sidecar lists {}",
                tensors.len(),
                sidecar.tensors.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for (entry, t) in sidecar.tensors.into_iter().zip(tensors) {
        if entry.shape != t.shape() {
            return Err(Error::usage(format!(
                "tensor {} has shape {:?}, sidecar says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        out.push((entry.name, t));
    }
    Ok((out, sidecar.meta))
}

/// Pops tensors by name from a loaded set, in order.
pub(crate) fn take(set: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    match set.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(set.remove(i).1),
        None => Err(Error::usage(format!("missing tensor {name}"))),
    }
}
