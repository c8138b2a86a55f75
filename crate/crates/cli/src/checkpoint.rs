//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! manifest, then every tensor as raw little-endian `f32` in manifest
//! order. The manifest records the model geometry, the run configuration,
//! one entry per projection (variant tag plus the scalars its variant
//! needs) and the offset and shape of every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use budlora_core::compress::{CompressedModule, CompressionCase, Deployed};
use budlora_core::gatedlora::GatedLinear;
use budlora_core::model::{Block, Linear, Projection, TransformerConfig, TransformerModel};
use budlora_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

pub type Model = TransformerModel<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `teacher`, `student` or `compressed`.
    pub kind: String,
    pub dtype: String,
    pub model: ModelSection,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub modules: Vec<ModuleEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleEntry {
    pub name: String,
    /// `dense`, `gated`, `low_rank` or `dense_merged`.
    pub variant: String,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_skip_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Element offset into the payload.
    pub offset: usize,
    pub len: usize,
}

fn module_entry(name: String, lin: &Linear<f32>) -> ModuleEntry {
    let mut e = ModuleEntry {
        name,
        variant: lin.variant_tag().to_string(),
        d_in: lin.d_in(),
        d_out: lin.d_out(),
        retention: None,
        alpha: None,
        r_max: None,
        dense_skip_threshold: None,
        case: None,
        active_rank: None,
        svd_rank: None,
    };
    match lin {
        Linear::Dense(_) => {}
        Linear::Gated(g) => {
            e.retention = Some(g.retention());
            e.alpha = Some(g.alpha());
            e.r_max = Some(g.r_max());
            e.dense_skip_threshold = Some(g.dense_skip_threshold());
        }
        Linear::Compressed(c) => {
            e.retention = Some(c.retention);
            e.case = Some(c.case.number());
            e.active_rank = Some(c.active_rank);
            e.svd_rank = c.svd_rank;
        }
    }
    e
}

pub fn kind_of(model: &Model) -> &'static str {
    if model.is_compressed() {
        "compressed"
    } else if model.is_wrapped() {
        "student"
    } else {
        "dense"
    }
}

pub fn manifest_for(model: &Model, kind: &str, config: serde_json::Value) -> Manifest {
    let modules = model
        .linears()
        .map(|(i, p, l)| module_entry(p.module_name(i), l))
        .collect();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset,
            len: m.len(),
        });
        offset += m.len();
    }
    Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        dtype: "f32".into(),
        model: (*model.config()).into(),
        config,
        modules,
        tensors,
    }
}

pub fn encode(model: &Model, kind: &str, config: serde_json::Value) -> Vec<u8> {
    let manifest = manifest_for(model, kind, config);
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let n_elems: usize = manifest.tensors.iter().map(|t| t.len).sum();
    let mut out = Vec::with_capacity(8 + header.len() + 4 * n_elems);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in model.named_tensors() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &Model, kind: &str, config: serde_json::Value) -> CliResult<()> {
    fs::write(path, encode(model, kind, config)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<(Manifest, Model)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|reason| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

struct Tensors {
    map: BTreeMap<String, Matrix<f32>>,
}

impl Tensors {
    fn take(&mut self, name: &str) -> Result<Matrix<f32>, String> {
        self.map.remove(name).ok_or_else(|| format!("missing tensor {name}"))
    }
}

fn need<T>(v: Option<T>, module: &str, field: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("module {module} lacks {field}"))
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Model), String> {
    if bytes.len() < 8 {
        return Err("truncated header length".into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(8..8usize.saturating_add(n))
        .ok_or_else(|| format!("header length {n} exceeds file size {}", bytes.len()))?;
    let manifest: Manifest = serde_json::from_slice(header).map_err(|e| format!("manifest: {e}"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format version {}", manifest.format_version));
    }
    if manifest.dtype != "f32" {
        return Err(format!("unsupported dtype {}", manifest.dtype));
    }
    let payload = &bytes[8 + n..];
    let mut expected = 0usize;
    let mut map = BTreeMap::new();
    for t in &manifest.tensors {
        if t.offset != expected || t.len != t.rows * t.cols {
            return Err(format!("tensor {} has inconsistent offset or length", t.name));
        }
        let end = (t.offset + t.len) * 4;
        let raw = payload
            .get(t.offset * 4..end)
            .ok_or_else(|| format!("payload too short for tensor {}", t.name))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let m = Matrix::from_vec(t.rows, t.cols, data).map_err(|e| e.to_string())?;
        if map.insert(t.name.clone(), m).is_some() {
            return Err(format!("duplicate tensor {}", t.name));
        }
        expected += t.len;
    }
    if payload.len() != expected * 4 {
        return Err(format!("payload holds {} bytes, manifest declares {}", payload.len(), expected * 4));
    }

    let config: TransformerConfig = manifest.model.into();
    config.validate().map_err(|e| e.to_string())?;
    if manifest.modules.len() != 7 * config.n_layers {
        return Err(format!("{} module entries for {} layers", manifest.modules.len(), config.n_layers));
    }
    let mut ts = Tensors { map };
    let embed = ts.take("embed_tokens")?;
    let mut entries = manifest.modules.iter();
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let attn_norm = ts.take(&format!("layers.{i}.input_layernorm"))?;
        let mlp_norm = ts.take(&format!("layers.{i}.post_attention_layernorm"))?;
        let mut proj = Vec::with_capacity(7);
        for p in Projection::ALL {
            let e = entries.next().expect("count checked");
            let name = p.module_name(i);
            if e.name != name {
                return Err(format!("module entry {} where {name} was expected", e.name));
            }
            proj.push(linear_from(e, &mut ts)?);
        }
        let proj: [Linear<f32>; 7] = proj.try_into().map_err(|_| "seven projections".to_string())?;
        layers.push(Block {
            attn_norm,
            mlp_norm,
            proj,
        });
    }
    let final_norm = ts.take("norm")?;
    let head = ts.take("lm_head")?;
    if let Some(extra) = ts.map.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    let model = TransformerModel::from_parts(config, embed, layers, final_norm, head).map_err(|e| e.to_string())?;
    Ok((manifest, model))
}

fn linear_from(e: &ModuleEntry, ts: &mut Tensors) -> Result<Linear<f32>, String> {
    let n = &e.name;
    let lin = match e.variant.as_str() {
        "dense" => Linear::Dense(ts.take(&format!("{n}.weight"))?),
        "gated" => {
            let g = GatedLinear::from_parts(
                n.clone(),
                ts.take(&format!("{n}.weight"))?,
                ts.take(&format!("{n}.lora_a"))?,
                ts.take(&format!("{n}.lora_b"))?,
                ts.take(&format!("{n}.gate_logits"))?,
                need(e.retention, n, "retention")?,
                need(e.alpha, n, "alpha")?,
                need(e.dense_skip_threshold, n, "dense_skip_threshold")?,
            )
            .map_err(|err| format!("{n}: {err}"))?;
            if Some(g.r_max()) != e.r_max {
                return Err(format!("{n}: r_max disagrees with lora_a"));
            }
            Linear::Gated(g)
        }
        tag @ ("low_rank" | "dense_merged") => {
            let deployed = if tag == "low_rank" {
                Deployed::LowRank {
                    u: ts.take(&format!("{n}.u"))?,
                    v: ts.take(&format!("{n}.v"))?,
                }
            } else {
                Deployed::DenseMerged {
                    weight: ts.take(&format!("{n}.weight"))?,
                }
            };
            let case = CompressionCase::from_number(need(e.case, n, "case")?).map_err(|err| format!("{n}: {err}"))?;
            if (case == CompressionCase::MergeDense) != (tag == "dense_merged") {
                return Err(format!("{n}: case {case} does not match variant {tag}"));
            }
            Linear::Compressed(CompressedModule {
                name: n.clone(),
                deployed,
                case,
                retention: need(e.retention, n, "retention")?,
                active_rank: need(e.active_rank, n, "active_rank")?,
                svd_rank: e.svd_rank,
            })
        }
        other => return Err(format!("{n}: unknown variant {other:?}")),
    };
    if (lin.d_in(), lin.d_out()) != (e.d_in, e.d_out) {
        return Err(format!("{n}: tensors are {}x{}, manifest says {}x{}", lin.d_out(), lin.d_in(), e.d_out, e.d_in));
    }
    Ok(lin)
}
