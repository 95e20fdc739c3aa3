//! `EMSCKPT` checkpoint files.
//!
//! ```text
//! EMSCKPT 1
//! config<TAB>{json: model config, ablations, step, training config}
//! tensors<TAB><n>
//! <name><TAB><d0,d1,...><TAB><byte offset into data>     (n lines)
//! end
//! <row-major f32 little-endian data>
//! ```
//!
//! Optimizer moments, when present, are stored as tensors named
//! `adam.m:<param>` and `adam.v:<param>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{EmsError, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::Ablations;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{ParamStore, Real};
use crate::trainer::TrainConfig;

const MAGIC: &str = "EMSCKPT 1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    ablation: Ablations,
    step: u64,
    train: Option<TrainConfig>,
    adam: Option<AdamConfig>,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub adam: Option<Adam<f32>>,
}

fn encode_tensors<'a>(tensors: impl Iterator<Item = (String, &'a ArrayD<f32>)>) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    let mut data = Vec::new();
    let mut count = 0;
    for (name, t) in tensors {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), data.len()));
        for &x in t.iter() {
            data.extend_from_slice(&x.to_le_bytes());
        }
        count += 1;
    }
    (format!("tensors\t{count}\n{manifest}end\n"), data)
}

/// Writes `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let file_name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".tmp".into());
    tmp.set_file_name(file_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| EmsError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| EmsError::io(&tmp, e))?;
        f.sync_all().map_err(|e| EmsError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| EmsError::io(path, e))
}

pub fn save<F: Real>(
    path: impl AsRef<Path>,
    model: &Model<F>,
    step: u64,
    train: Option<&TrainConfig>,
    adam: Option<&Adam<F>>,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        model: model.cfg.clone(),
        ablation: model.ablation,
        step,
        train: train.cloned(),
        adam: adam.map(|a| a.cfg),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let params: ParamStore<f32> = model.store.cast();
    let mut named: Vec<(String, ArrayD<f32>)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        for (kind, moments) in [("m", m), ("v", v)] {
            for ((name, _), t) in params.iter().zip(moments) {
                named.push((format!("adam.{kind}:{name}"), t.mapv(|x| x.as_f64() as f32)));
            }
        }
    }
    let (manifest, data) = encode_tensors(named.iter().map(|(n, t)| (n.clone(), t)));
    let mut bytes = format!("{MAGIC}\nconfig\t{json}\n{manifest}").into_bytes();
    bytes.extend_from_slice(&data);
    write_atomic(path, &bytes)
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EmsError::format(path, "truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| EmsError::format(path, "header is not UTF-8"))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EmsError::io(path, e))?;
    let bad = |msg: String| EmsError::format(path, msg);
    let mut pos = 0;
    if next_line(&bytes, &mut pos, path)? != MAGIC {
        return Err(bad("missing EMSCKPT 1 magic".into()));
    }
    let header: Header = match next_line(&bytes, &mut pos, path)?.split_once('\t') {
        Some(("config", json)) => {
            serde_json::from_str(json).map_err(|e| bad(format!("bad config: {e}")))?
        }
        _ => return Err(bad("missing config line".into())),
    };
    let count: usize = match next_line(&bytes, &mut pos, path)?.split_once('\t') {
        Some(("tensors", n)) => n.parse().map_err(|_| bad("bad tensor count".into()))?,
        _ => return Err(bad("missing tensor count".into())),
    };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes, &mut pos, path)?;
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("bad manifest line {line:?}")));
        };
        let shape = shape
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in {line:?}")))?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
        entries.push((name.to_string(), shape, offset));
    }
    if next_line(&bytes, &mut pos, path)? != "end" {
        return Err(bad("manifest not terminated by `end`".into()));
    }
    let data = &bytes[pos..];
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let raw = data
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(format!("tensor {name} runs past end of file")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length matches shape");
        if let Some(p) = name.strip_prefix("adam.m:") {
            moments_m.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix("adam.v:") {
            moments_v.push((p.to_string(), t));
        } else {
            names.push(name);
            tensors.push(t);
        }
    }
    let model = Model::with_store(
        header.model,
        header.ablation,
        ParamStore::from_parts(names, tensors),
    )
    .map_err(|e| bad(e.to_string()))?;
    let adam = match header.adam {
        Some(cfg) => {
            let order = |moments: Vec<(String, ArrayD<f32>)>| -> Result<Vec<ArrayD<f32>>> {
                model
                    .store
                    .ids()
                    .map(|id| {
                        let want = model.store.name(id);
                        moments
                            .iter()
                            .find(|(n, _)| n == want)
                            .map(|(_, t)| t.clone())
                            .ok_or_else(|| bad(format!("missing optimizer moment for {want}")))
                    })
                    .collect()
            };
            Some(Adam::from_parts(cfg, order(moments_m)?, order(moments_v)?, header.step))
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        step: header.step,
        train: header.train,
        adam,
    })
}
