//! Model checkpoints in the safetensors container.
//!
//! Layout (all tensors little-endian f32 unless noted):
//!
//! * denoiser: `base.NNNN` for every base parameter in visit order,
//!   `schedule.betas` (f64), optional attached adapters as
//!   `lora.NNN.a` (d×r) / `lora.NNN.b` (r×k); metadata keys `format`,
//!   `config` (JSON), `trained_steps`, `adapters` (JSON list of
//!   `{alpha, seed}` per slot), `base_checksum`.
//! * adapter set: `lora.NNN.a` / `lora.NNN.b`; metadata `format`,
//!   `trimester`, `adapter_id`, `adapters`, `base_checksum`.
//! * segmentor: `decoder.NNN`; metadata `format`, `config`, and the three
//!   component checksums. Encoders are rebuilt from the seeded config and
//!   must reproduce the recorded checksums.

use std::collections::HashMap;
use std::path::Path;

use maskdiff_core::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule, TrimesterAdapters};
use maskdiff_core::lora::{LoraAdapter, Matrix};
use maskdiff_core::nn::{Module, ParamKind};
use maskdiff_core::segmentor::{SegConfig, SegModel};
use maskdiff_core::TrimesterLabel;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{what} checksum mismatch: recorded {recorded:016x}, rebuilt {actual:016x}")]
    ChecksumMismatch {
        what: &'static str,
        recorded: u64,
        actual: u64,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AdapterMeta {
    alpha: f32,
    seed: u64,
}

struct Builder {
    names: Vec<String>,
    bytes: Vec<(Vec<u8>, Vec<usize>, Dtype)>,
    meta: HashMap<String, String>,
}

impl Builder {
    fn new(format: &str) -> Self {
        let mut meta = HashMap::new();
        meta.insert("format".into(), format.into());
        Self {
            names: Vec::new(),
            bytes: Vec::new(),
            meta,
        }
    }

    fn f32(&mut self, name: String, shape: Vec<usize>, v: &[f32]) {
        self.names.push(name);
        self.bytes.push((v.iter().flat_map(|x| x.to_le_bytes()).collect(), shape, Dtype::F32));
    }

    fn f64(&mut self, name: String, v: &[f64]) {
        self.names.push(name);
        self.bytes.push((v.iter().flat_map(|x| x.to_le_bytes()).collect(), vec![v.len()], Dtype::F64));
    }

    fn meta(&mut self, k: &str, v: impl ToString) {
        self.meta.insert(k.into(), v.to_string());
    }

    fn adapters(&mut self, adapters: &[LoraAdapter<f32>]) {
        let meta: Vec<AdapterMeta> = adapters.iter().map(|a| AdapterMeta { alpha: a.alpha, seed: a.seed }).collect();
        for (i, a) in adapters.iter().enumerate() {
            self.f32(format!("lora.{i:03}.a"), vec![a.a.rows(), a.a.cols()], a.a.as_slice());
            self.f32(format!("lora.{i:03}.b"), vec![a.b.rows(), a.b.cols()], a.b.as_slice());
        }
        self.meta("adapters", serde_json::to_string(&meta).expect("plain data"));
    }

    fn write(self, path: &Path) -> Result<()> {
        let views: Vec<(String, TensorView<'_>)> = self
            .names
            .iter()
            .zip(&self.bytes)
            .map(|(n, (b, s, d))| (n.clone(), TensorView::new(*d, s.clone(), b).expect("consistent view")))
            .collect();
        let bytes = safetensors::serialize(views, &Some(self.meta)).map_err(|e| CheckpointError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        io::write_atomic(path, &bytes)?;
        Ok(())
    }
}

struct Reader<'a> {
    path: String,
    st: SafeTensors<'a>,
    meta: HashMap<String, String>,
}

impl<'a> Reader<'a> {
    fn open(path: &Path, bytes: &'a [u8], format: &str) -> Result<Self> {
        let p = path.display().to_string();
        let bad = |m: String| CheckpointError::Format {
            path: p.clone(),
            message: m,
        };
        let (_, md) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = md.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let r = Self { path: p, st, meta };
        let got = r.meta("format")?;
        if got != format {
            return Err(r.err(format!("expected a {format} checkpoint, found {got}")));
        }
        Ok(r)
    }

    fn err(&self, message: String) -> CheckpointError {
        CheckpointError::Format {
            path: self.path.clone(),
            message,
        }
    }

    fn meta(&self, k: &str) -> Result<&str> {
        self.meta.get(k).map(String::as_str).ok_or_else(|| self.err(format!("missing metadata {k}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&self, k: &str) -> Result<T> {
        serde_json::from_str(self.meta(k)?).map_err(|e| self.err(format!("{k}: {e}")))
    }

    fn u64(&self, k: &str) -> Result<u64> {
        self.meta(k)?.parse().map_err(|e| self.err(format!("{k}: {e}")))
    }

    fn has(&self, name: &str) -> bool {
        self.st.tensor(name).is_ok()
    }

    fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self.st.tensor(name).map_err(|e| self.err(format!("{name}: {e}")))?;
        if t.dtype() != Dtype::F32 {
            return Err(self.err(format!("{name}: expected f32")));
        }
        let v = t.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((t.shape().to_vec(), v))
    }

    fn f64(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.st.tensor(name).map_err(|e| self.err(format!("{name}: {e}")))?;
        if t.dtype() != Dtype::F64 {
            return Err(self.err(format!("{name}: expected f64")));
        }
        Ok(t.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn adapters(&self) -> Result<Vec<LoraAdapter<f32>>> {
        let meta: Vec<AdapterMeta> = self.json("adapters")?;
        meta.iter()
            .enumerate()
            .map(|(i, m)| {
                let (sa, a) = self.f32(&format!("lora.{i:03}.a"))?;
                let (sb, b) = self.f32(&format!("lora.{i:03}.b"))?;
                let mat = |s: &[usize], v| {
                    Matrix::from_vec(s[0], s.get(1).copied().unwrap_or(1), v)
                        .map_err(|e| self.err(format!("adapter {i}: {e}")))
                };
                Ok(LoraAdapter {
                    a: mat(&sa, a)?,
                    b: mat(&sb, b)?,
                    alpha: m.alpha,
                    seed: m.seed,
                })
            })
            .collect()
    }
}

fn load_params<M: Module>(r: &Reader<'_>, m: &mut M, kind: ParamKind, prefix: &str, width: usize) -> Result<()> {
    let mut i = 0;
    let mut failure = None;
    m.visit(&mut |p| {
        if p.kind != kind || failure.is_some() {
            return;
        }
        let name = format!("{prefix}.{i:0width$}");
        match r.f32(&name) {
            Ok((_, v)) if v.len() == p.value.len() => p.value.copy_from_slice(&v),
            Ok((_, v)) => failure = Some(r.err(format!("{name}: {} values, model expects {}", v.len(), p.value.len()))),
            Err(e) => failure = Some(e),
        }
        i += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.has(&format!("{prefix}.{i:0width$}")) {
        return Err(r.err(format!("checkpoint has more {prefix} tensors than the model")));
    }
    Ok(())
}

pub fn save_denoiser(path: &Path, model: &Denoiser, schedule: &NoiseSchedule) -> Result<()> {
    let mut m = model.clone();
    let mut b = Builder::new("denoiser");
    let mut i = 0;
    m.visit(&mut |p| {
        if p.kind == ParamKind::Base {
            b.f32(format!("base.{i:04}"), vec![p.value.len()], p.value);
            i += 1;
        }
    });
    b.f64("schedule.betas".into(), &schedule.betas);
    b.meta("config", serde_json::to_string(&m.config).expect("plain data"));
    b.meta("trained_steps", m.trained_steps);
    b.meta("base_checksum", m.checksum(ParamKind::Base));
    b.adapters(&m.adapters());
    b.write(path)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.into(),
        source,
    })?;
    let r = Reader::open(path, &bytes, "denoiser")?;
    let config: DenoiserConfig = r.json("config")?;
    let mut model = Denoiser::new(config).map_err(|e| r.err(e.to_string()))?;
    load_params(&r, &mut model, ParamKind::Base, "base", 4)?;
    model.trained_steps = r.u64("trained_steps")?;
    let adapters = r.adapters()?;
    if !adapters.is_empty() {
        model.install_adapters(&adapters).map_err(|e| r.err(e.to_string()))?;
    }
    let recorded = r.u64("base_checksum")?;
    let actual = model.checksum(ParamKind::Base);
    if recorded != actual {
        return Err(CheckpointError::ChecksumMismatch {
            what: "denoiser base",
            recorded,
            actual,
        });
    }
    let schedule = NoiseSchedule::from_betas(r.f64("schedule.betas")?).map_err(|e| r.err(e.to_string()))?;
    Ok((model, schedule))
}

pub fn save_adapter_set(path: &Path, set: &TrimesterAdapters) -> Result<()> {
    let mut b = Builder::new("lora-adapters");
    b.meta("trimester", set.trimester.as_str());
    b.meta("adapter_id", &set.adapter_id);
    b.meta("base_checksum", set.base_checksum);
    b.adapters(&set.adapters);
    b.write(path)
}

pub fn load_adapter_set(path: &Path) -> Result<TrimesterAdapters> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.into(),
        source,
    })?;
    let r = Reader::open(path, &bytes, "lora-adapters")?;
    let t = r.meta("trimester")?;
    Ok(TrimesterAdapters {
        trimester: TrimesterLabel::parse(t).ok_or_else(|| r.err(format!("unknown trimester {t}")))?,
        adapter_id: r.meta("adapter_id")?.to_string(),
        adapters: r.adapters()?,
        log: Default::default(),
        base_checksum: r.u64("base_checksum")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegChecksums {
    pub encoder: u64,
    pub prompt: u64,
    pub decoder: u64,
}

impl SegChecksums {
    pub fn of(m: &SegModel) -> Self {
        Self {
            encoder: m.encoder_checksum(),
            prompt: m.prompt_checksum(),
            decoder: m.decoder_checksum(),
        }
    }
}

pub fn save_segmentor(path: &Path, model: &SegModel) -> Result<SegChecksums> {
    let sums = SegChecksums::of(model);
    let mut b = Builder::new("segmentor");
    let mut dec = model.decoder.clone();
    let mut i = 0;
    dec.visit(&mut |p| {
        b.f32(format!("decoder.{i:03}"), vec![p.value.len()], p.value);
        i += 1;
    });
    b.meta("config", serde_json::to_string(&model.config).expect("plain data"));
    b.meta("encoder_checksum", sums.encoder);
    b.meta("prompt_checksum", sums.prompt);
    b.meta("decoder_checksum", sums.decoder);
    b.write(path)?;
    Ok(sums)
}

pub fn load_segmentor(path: &Path) -> Result<SegModel> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.into(),
        source,
    })?;
    let r = Reader::open(path, &bytes, "segmentor")?;
    let config: SegConfig = r.json("config")?;
    let mut model = SegModel::new(config);
    load_params(&r, &mut model.decoder, ParamKind::Base, "decoder", 3)?;
    let sums = SegChecksums::of(&model);
    for (what, key, actual) in [
        ("encoder", "encoder_checksum", sums.encoder),
        ("prompt encoder", "prompt_checksum", sums.prompt),
        ("decoder", "decoder_checksum", sums.decoder),
    ] {
        let recorded = r.u64(key)?;
        if recorded != actual {
            return Err(CheckpointError::ChecksumMismatch { what, recorded, actual });
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskdiff_core::rng;

    fn small() -> Denoiser {
        let mut m = Denoiser::new(DenoiserConfig {
            image_size: 16,
            channels: vec![8, 16],
            attn_from_level: 1,
            emb_dim: 16,
            time_freqs: 8,
            groups: 4,
            classes: 3,
            seed: 4,
        })
        .unwrap();
        let mut r = rng::seeded(1);
        m.visit(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.01 * rng::normal_f32(&mut r)));
        m.trained_steps = 7;
        m
    }

    #[test]
    fn denoiser_round_trip_with_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        m.init_adapters(2, 3).unwrap();
        m.visit(&mut |p| {
            if p.kind == ParamKind::Adapter {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 1e-3);
            }
        });
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let f = dir.path().join("d.safetensors");
        save_denoiser(&f, &m, &s).unwrap();
        let (mut back, s2) = load_denoiser(&f).unwrap();
        assert_eq!(s2, s);
        assert_eq!(back.snapshot(), m.snapshot());
        assert_eq!(back.trained_steps, 7);
        assert_eq!(back.adapters(), m.adapters());
    }

    #[test]
    fn adapter_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        m.init_adapters(2, 9).unwrap();
        let set = TrimesterAdapters {
            trimester: TrimesterLabel::Third,
            adapter_id: "lora-third-x".into(),
            adapters: m.adapters(),
            log: Default::default(),
            base_checksum: m.checksum(ParamKind::Base),
        };
        let f = dir.path().join("a.safetensors");
        save_adapter_set(&f, &set).unwrap();
        assert_eq!(load_adapter_set(&f).unwrap(), set);
        assert!(matches!(load_denoiser(&f), Err(CheckpointError::Format { .. })));
    }

    #[test]
    fn segmentor_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SegModel::new(SegConfig { seed: 3, ..Default::default() });
        m.decoder.visit(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.5));
        let f = dir.path().join("s.safetensors");
        let sums = save_segmentor(&f, &m).unwrap();
        let back = load_segmentor(&f).unwrap();
        assert_eq!(SegChecksums::of(&back), sums);

        let mut bytes = std::fs::read(&f).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        std::fs::write(&f, bytes).unwrap();
        assert!(matches!(load_segmentor(&f), Err(CheckpointError::ChecksumMismatch { .. })));
    }
}
