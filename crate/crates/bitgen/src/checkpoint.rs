//! Versioned binary checkpoints.
//!
//! Layout: magic `BGC1`, little-endian u32 format version, u32 header length,
//! a JSON header (kind, step, config, RNG state), then named f64 tensors in
//! sorted-name order. Model parameters use their store names; optimizer
//! moments are stored under `opt.m.` / `opt.v.` and the EMA shadow under
//! `ema.`. Writing is deterministic: the same state produces the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Ema, ParamStore};
use crate::rng::RngState;
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    /// "tokenizer" or "ar".
    pub kind: String,
    pub step: u64,
    pub config: RunConfig,
    pub rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    /// Capture parameters (and optionally full trainer state).
    pub fn capture(
        kind: &str,
        step: u64,
        config: &RunConfig,
        store: &ParamStore,
        trainer: Option<(&AdamW, &Ema, RngState)>,
    ) -> Checkpoint {
        let mut tensors: BTreeMap<String, Mat> =
            store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let mut rng = None;
        if let Some((opt, ema, rng_state)) = trainer {
            let (m, v) = opt.moments();
            for id in store.ids() {
                tensors.insert(format!("opt.m.{}", store.name(id)), m[id].clone());
                tensors.insert(format!("opt.v.{}", store.name(id)), v[id].clone());
                tensors.insert(format!("ema.{}", store.name(id)), ema.shadow(id).clone());
            }
            rng = Some(rng_state);
        }
        Checkpoint {
            header: CheckpointHeader { kind: kind.to_string(), step, config: config.clone(), rng },
            tensors,
        }
    }

    /// Rebuild a parameter store from the model tensors (sorted-name order).
    /// `use_ema` swaps in the EMA shadow values where present.
    pub fn build_store(&self, use_ema: bool) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, value) in &self.tensors {
            if name.starts_with("opt.") || name.starts_with("ema.") {
                continue;
            }
            let v = if use_ema {
                match self.tensors.get(&format!("ema.{name}")) {
                    Some(e) => e.clone(),
                    None => {
                        return Err(Error::Format(format!(
                            "checkpoint has no EMA shadow for {name}"
                        )))
                    }
                }
            } else {
                value.clone()
            };
            store.add(name, v);
        }
        if store.is_empty() {
            return Err(Error::Format("checkpoint contains no parameters".into()));
        }
        Ok(store)
    }

    /// Restore optimizer moments and EMA shadow for a rebuilt store.
    pub fn restore_trainer(&self, store: &ParamStore, opt: &mut AdamW, ema: &mut Ema) -> Result<()> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut shadow = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let fetch = |key: String| {
                self.tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {key}")))
            };
            m.push(fetch(format!("opt.m.{name}"))?);
            v.push(fetch(format!("opt.v.{name}"))?);
            shadow.push(fetch(format!("ema.{name}"))?);
        }
        opt.restore(m, v, self.header.step);
        ema.restore(shadow);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            let (rows, cols) = tensor.dim();
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(Error::Format("checkpoint: truncated".into()));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let magic = take(&mut at, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("checkpoint: bad magic {magic:02x?}")));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut at, hlen)?)
            .map_err(|e| Error::Format(format!("checkpoint: malformed header: {e}")))?;
        let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, nlen)?.to_vec())
                .map_err(|_| Error::Format("checkpoint: non-utf8 tensor name".into()))?;
            let rows = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let data = take(&mut at, rows * cols * 8)?;
            let vals: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name,
                Mat::from_shape_vec((rows, cols), vals)
                    .map_err(|_| Error::Format("checkpoint: bad tensor shape".into()))?,
            );
        }
        if at != bytes.len() {
            return Err(Error::Format("checkpoint: trailing bytes".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Reject a tokenizer/AR pairing whose shared fields disagree.
pub fn check_compat(tokenizer: &CheckpointHeader, ar_config: &RunConfig) -> Result<()> {
    let t = &tokenizer.config;
    if t.d != ar_config.d {
        return Err(Error::Compat(format!(
            "tokenizer checkpoint has d = {} but the run config wants d = {}",
            t.d, ar_config.d
        )));
    }
    if t.downsample != ar_config.downsample {
        return Err(Error::Compat(format!(
            "tokenizer checkpoint has downsample = {} but the run config wants {}",
            t.downsample, ar_config.downsample
        )));
    }
    if t.image_size != ar_config.image_size {
        return Err(Error::Compat(format!(
            "tokenizer checkpoint has image_size = {} but the run config wants {}",
            t.image_size, ar_config.image_size
        )));
    }
    if t.tok_hidden != ar_config.tok_hidden {
        return Err(Error::Compat(format!(
            "tokenizer checkpoint has tok_hidden = {} but the run config wants {}",
            t.tok_hidden, ar_config.tok_hidden
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_mat;

    fn store_with_params() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = crate::rng::stream(80, 0);
        s.add("alpha.w", randn_mat(&mut rng, 3, 4, 1.0));
        s.add("beta.b", randn_mat(&mut rng, 1, 4, 1.0));
        s
    }

    #[test]
    fn roundtrip_params_only() {
        let store = store_with_params();
        let cfg = RunConfig::default();
        let ck = Checkpoint::capture("tokenizer", 17, &cfg, &store, None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header.step, 17);
        assert_eq!(back.header.kind, "tokenizer");
        let rebuilt = back.build_store(false).unwrap();
        for id in store.ids() {
            let got = rebuilt.value(rebuilt.id(store.name(id)).unwrap());
            assert_eq!(got, store.value(id));
        }
        // Deterministic bytes.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn roundtrip_trainer_state() {
        let mut store = store_with_params();
        let cfg = RunConfig::default();
        let mut opt = AdamW::new(&store, 1e-3, 0.0, 1.0, 0);
        let mut ema = Ema::new(&store, 0.999);
        let g0 = store.value(0).clone() * 0.1;
        let g1 = store.value(1).clone() * 0.1;
        opt.step(&mut store, &[(0, g0), (1, g1)]);
        ema.update(&store);
        let rng = crate::rng::capture(5, &crate::rng::stream(5, 0));
        let ck = Checkpoint::capture("ar", 1, &cfg, &store, Some((&opt, &ema, rng)));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let rebuilt = back.build_store(false).unwrap();
        let mut opt2 = AdamW::new(&rebuilt, 1e-3, 0.0, 1.0, 0);
        let mut ema2 = Ema::new(&rebuilt, 0.999);
        back.restore_trainer(&rebuilt, &mut opt2, &mut ema2).unwrap();
        assert_eq!(opt2.step_count(), 1);
        let (m, _) = opt.moments();
        let (m2, _) = opt2.moments();
        // Rebuilt store is name-sorted; map through names.
        for id in store.ids() {
            let rid = rebuilt.id(store.name(id)).unwrap();
            assert_eq!(m[id], m2[rid]);
            assert_eq!(ema.shadow(id), ema2.shadow(rid));
        }
        assert_eq!(back.header.rng.unwrap(), rng);
    }

    #[test]
    fn ema_store_differs_after_updates() {
        let mut store = store_with_params();
        let cfg = RunConfig::default();
        let opt = AdamW::new(&store, 1e-3, 0.0, 1.0, 0);
        let mut ema = Ema::new(&store, 0.5);
        *store.value_mut(0) = store.value(0).clone() * 2.0;
        ema.update(&store);
        let rng = crate::rng::capture(5, &crate::rng::stream(5, 0));
        let ck = Checkpoint::capture("ar", 0, &cfg, &store, Some((&opt, &ema, rng)));
        let raw = ck.build_store(false).unwrap();
        let emas = ck.build_store(true).unwrap();
        assert!(raw.value(raw.id("alpha.w").unwrap()) != emas.value(emas.id("alpha.w").unwrap()));
    }

    #[test]
    fn rejects_corrupt_inputs() {
        let store = store_with_params();
        let cfg = RunConfig::default();
        let bytes = Checkpoint::capture("tokenizer", 0, &cfg, &store, None).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut vbad = bytes.clone();
        vbad[4] = 99;
        assert!(matches!(Checkpoint::from_bytes(&vbad), Err(Error::Format(_))));
    }

    #[test]
    fn compat_check_names_the_field() {
        let cfg = RunConfig::default();
        let store = store_with_params();
        let ck = Checkpoint::capture("tokenizer", 0, &cfg, &store, None);
        let mut ar = cfg.clone();
        ar.d = 8;
        ar.groups = 2;
        let err = check_compat(&ck.header, &ar).unwrap_err();
        assert!(err.to_string().contains("d ="), "{err}");
        assert!(matches!(err, Error::Compat(_)));
    }
}
