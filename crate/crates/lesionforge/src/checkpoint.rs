//! Checkpoint directories: named parameter/buffer tensors in the `LTD1`
//! container plus a UTF-8 `meta.txt` of key=value lines. Save -> load -> save
//! reproduces the directory byte for byte.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{build_from_config, ModelConfig, ModelGraph};
use crate::tensor::{load_ltd1, save_ltd1, AnyTensor, Tensor};
use crate::trainer::Optimizer;
use crate::util::fnv1a;

fn write_tensors(dir: &Path, tensors: &IndexMap<String, Tensor<f32>>) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (name, t) in tensors {
        save_ltd1(t, &dir.join(format!("{name}.ltd")))?;
    }
    Ok(())
}

fn read_tensor(dir: &Path, name: &str) -> Result<Tensor<f32>> {
    let path = dir.join(format!("{name}.ltd"));
    match load_ltd1(&path)? {
        AnyTensor::F32(t) => Ok(t),
        AnyTensor::F64(_) => Err(Error::Format(format!(
            "checkpoint tensor '{name}' must be 32-bit float"
        ))),
    }
}

/// Write `graph` (and optionally optimizer state) plus metadata under `dir`.
/// An existing checkpoint at `dir` is replaced.
pub fn save_checkpoint(
    dir: &Path,
    graph: &ModelGraph<f32>,
    opt: Option<&Optimizer>,
    seed: u64,
    epoch: usize,
    metrics: &[(String, String)],
) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)
            .map_err(|e| Error::io(format!("replacing {}", dir.display()), e))?;
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let config = graph.config.to_config_string();
    let mut meta = String::new();
    meta.push_str("format=lfckpt-v1\n");
    meta.push_str(&format!("config={config}\n"));
    meta.push_str(&format!("config_hash={:016x}\n", fnv1a(config.as_bytes())));
    meta.push_str(&format!("seed={seed}\n"));
    meta.push_str(&format!("epoch={epoch}\n"));
    let param_names: Vec<&str> = graph.param_names().collect();
    meta.push_str(&format!("params={}\n", param_names.join(";")));
    let buffer_names: Vec<String> = graph.buffers().keys().cloned().collect();
    meta.push_str(&format!("buffers={}\n", buffer_names.join(";")));
    match opt {
        Some(o) => {
            meta.push_str(&format!("opt={}\n", o.meta_line()));
        }
        None => meta.push_str("opt=none\n"),
    }
    for (k, v) in metrics {
        meta.push_str(&format!("metric.{k}={v}\n"));
    }
    std::fs::write(dir.join("meta.txt"), meta)
        .map_err(|e| Error::io("writing checkpoint meta", e))?;

    write_tensors(&dir.join("params"), graph.params())?;
    write_tensors(&dir.join("buffers"), graph.buffers())?;
    if let Some(o) = opt {
        write_tensors(&dir.join("opt"), &o.state_tensors())?;
    }
    Ok(())
}

/// A loaded checkpoint: rebuilt graph, optimizer state (if saved), and the
/// raw metadata map.
pub struct LoadedCheckpoint {
    pub graph: ModelGraph<f32>,
    pub opt: Option<Optimizer>,
    pub seed: u64,
    pub epoch: usize,
    pub meta: IndexMap<String, String>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta_text = std::fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::io(format!("reading {}/meta.txt", dir.display()), e))?;
    let mut meta = IndexMap::new();
    for line in meta_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad meta line '{line}'")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let require = |k: &str| -> Result<String> {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("checkpoint meta missing '{k}'")))
    };
    if require("format")? != "lfckpt-v1" {
        return Err(Error::Format("unsupported checkpoint format".into()));
    }
    let config = ModelConfig::parse(&require("config")?)?;
    let seed: u64 = require("seed")?
        .parse()
        .map_err(|_| Error::Format("bad seed in checkpoint meta".into()))?;
    let epoch: usize = require("epoch")?
        .parse()
        .map_err(|_| Error::Format("bad epoch in checkpoint meta".into()))?;

    let mut graph: ModelGraph<f32> = build_from_config(&config, seed)?;
    let expect_params: Vec<&str> = graph.param_names().collect();
    let listed = require("params")?;
    let listed_params: Vec<&str> = if listed.is_empty() { vec![] } else { listed.split(';').collect() };
    if expect_params != listed_params {
        return Err(Error::Format(
            "checkpoint parameter list does not match its model config".into(),
        ));
    }
    let params_dir = dir.join("params");
    let names: Vec<String> = graph.param_names().map(String::from).collect();
    for name in names {
        graph.set_param(&name, read_tensor(&params_dir, &name)?)?;
    }
    let buffers_dir = dir.join("buffers");
    for name in require("buffers")?.split(';').filter(|s| !s.is_empty()) {
        let t = read_tensor(&buffers_dir, name)?;
        if graph.buffer(name).is_some() {
            graph.set_buffer(name, t)?;
        } else {
            graph.add_extra_buffer(name, t);
        }
    }
    let opt = match require("opt")?.as_str() {
        "none" => None,
        line => {
            let mut o = Optimizer::from_meta_line(line)?;
            o.load_state(|name| read_tensor(&dir.join("opt"), name))?;
            Some(o)
        }
    };
    Ok(LoadedCheckpoint {
        graph,
        opt,
        seed,
        epoch,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_resnet, ResNetConfig};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ResNetConfig::tiny();
        cfg.input = (3, 16, 16);
        let graph: ModelGraph<f32> = build_resnet(&cfg, 11).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(
            &a,
            &graph,
            None,
            11,
            3,
            &[("val_acc".into(), "0.5".into())],
        )
        .unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.seed, 11);
        assert_eq!(loaded.graph.param_hash(), graph.param_hash());
        save_checkpoint(
            &b,
            &loaded.graph,
            None,
            loaded.seed,
            loaded.epoch,
            &[("val_acc".into(), "0.5".into())],
        )
        .unwrap();
        let ha = crate::util::hash_dir_tree(&a).unwrap();
        let hb = crate::util::hash_dir_tree(&b).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn parameter_list_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ResNetConfig::tiny();
        cfg.input = (3, 16, 16);
        let graph: ModelGraph<f32> = build_resnet(&cfg, 1).unwrap();
        let a = dir.path().join("a");
        save_checkpoint(&a, &graph, None, 1, 1, &[]).unwrap();
        // corrupt the meta param list
        let meta = std::fs::read_to_string(a.join("meta.txt")).unwrap();
        std::fs::write(a.join("meta.txt"), meta.replace("stem.conv.weight", "nope")).unwrap();
        assert!(load_checkpoint(&a).is_err());
    }
}
