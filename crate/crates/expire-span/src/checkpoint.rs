//! Checkpoints: a text header describing every array (name, dtype, shape)
//! followed by the raw little-endian f64 payload, trivially parseable from
//! any language. Reloading reproduces forward outputs bit-identically on the
//! same platform.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::OptimState;

const MAGIC: &str = "EXPIRESPAN-CKPT v1";

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    config: RunConfig,
    optimizer_step: usize,
    skipped_nonfinite: usize,
    arrays: Vec<ArrayMeta>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: Model,
    pub optimizer: OptimState,
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &Model,
    opt: &OptimState,
    step: usize,
) -> Result<()> {
    let names = model.param_names();
    let params = model.params();
    let mut arrays = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, t) in names.iter().zip(&params) {
        arrays.push(ArrayMeta { name: name.clone(), dtype: "f64".into(), shape: t.shape.clone() });
        payload.push(&t.data);
    }
    for (kind, acc) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, (t, a)) in names.iter().zip(params.iter().zip(acc)) {
            arrays.push(ArrayMeta {
                name: format!("opt.{kind}.{name}"),
                dtype: "f64".into(),
                shape: t.shape.clone(),
            });
            payload.push(a);
        }
    }
    let header = Header {
        step,
        config: config.clone(),
        optimizer_step: opt.step,
        skipped_nonfinite: opt.skipped_nonfinite,
        arrays,
    };
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{MAGIC}")?;
    writeln!(file, "{}", serde_json::to_string(&header)?)?;
    let mut buf = Vec::new();
    for arr in payload {
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing magic line".into()))?;
    if std::str::from_utf8(&bytes[..first_nl]).map_err(|_| Error::Checkpoint("bad magic".into()))?
        != MAGIC
    {
        return Err(Error::Checkpoint(format!("not a checkpoint: {}", path.display())));
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..second_nl])?;
    let mut payload = &rest[second_nl + 1..];

    let mut cfg = header.config.clone();
    // Checkpoints carry a resolved vocab; the model builds without the task.
    let mut model = Model::new(cfg.model.clone(), 0)?;
    let mut opt = OptimState::for_model(&model);
    opt.step = header.optimizer_step;
    opt.skipped_nonfinite = header.skipped_nonfinite;

    let names = model.param_names();
    let mut read_array = |meta: &ArrayMeta, dst: &mut [f64]| -> Result<()> {
        let n: usize = meta.shape.iter().product();
        if meta.dtype != "f64" {
            return Err(Error::Checkpoint(format!("array {} has dtype {}", meta.name, meta.dtype)));
        }
        if n != dst.len() {
            return Err(Error::Checkpoint(format!(
                "array {} has {} elements, expected {}",
                meta.name,
                n,
                dst.len()
            )));
        }
        if payload.len() < n * 8 {
            return Err(Error::Checkpoint("payload truncated".into()));
        }
        for (i, chunk) in payload[..n * 8].chunks_exact(8).enumerate() {
            dst[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        payload = &payload[n * 8..];
        Ok(())
    };

    for meta in &header.arrays {
        let slot: Option<usize> = if let Some(rest) = meta.name.strip_prefix("opt.m.") {
            names.iter().position(|n| n == rest).map(|i| i + names.len())
        } else if let Some(rest) = meta.name.strip_prefix("opt.v.") {
            names.iter().position(|n| n == rest).map(|i| i + 2 * names.len())
        } else {
            names.iter().position(|n| n == &meta.name)
        };
        let Some(slot) = slot else {
            return Err(Error::Checkpoint(format!("unknown array {}", meta.name)));
        };
        if slot < names.len() {
            read_array(meta, &mut model.params_mut()[slot].data)?;
        } else if slot < 2 * names.len() {
            read_array(meta, &mut opt.m[slot - names.len()])?;
        } else {
            read_array(meta, &mut opt.v[slot - 2 * names.len()])?;
        }
    }
    cfg.model.vocab_size = model.cfg.vocab_size;
    Ok(Checkpoint { config: cfg, step: header.step, model, optimizer: opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::ForwardOptions;
    use crate::rng::Rng;
    use crate::tensor::tape::Tape;

    fn test_config() -> RunConfig {
        let text = r#"{
            "task": { "kind": "copy", "distance": 16 },
            "model": { "vocab_size": 0, "max_span": 32, "block_size": 8,
                       "d_model": 16, "n_heads": 2, "d_ff": 32, "ramp": 8 },
            "run_dir": "runs/ckpt-test",
            "seed": 3
        }"#;
        let (mut cfg, _) = RunConfig::from_json(text).unwrap();
        cfg.build_task().unwrap();
        cfg
    }

    fn forward_once(model: &mut Model, tokens: &[usize]) -> Vec<f64> {
        let mut rng = Rng::new(0);
        model.reset_state();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model
            .forward_block(&mut tape, &bound, tokens, &ForwardOptions::default(), &mut rng, false)
            .unwrap();
        let v = tape.value(out.logits).to_vec();
        model.detach_banks(&tape);
        v
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let cfg = test_config();
        let mut model = Model::new(cfg.model.clone(), 11).unwrap();
        let mut opt = OptimState::for_model(&model);
        opt.step = 42;
        opt.m[3][0] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &cfg, &model, &opt, 100).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 100);
        assert_eq!(loaded.optimizer.step, 42);
        assert_eq!(loaded.optimizer.m[3][0], 0.125);

        let tokens = [1usize, 2, 3, 4, 0, 2, 1, 3];
        let mut m2 = loaded.model;
        let la = forward_once(&mut model, &tokens);
        let lb = forward_once(&mut m2, &tokens);
        assert_eq!(la.len(), lb.len());
        for (a, b) in la.iter().zip(&lb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint\n{}\n").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
