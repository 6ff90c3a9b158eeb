//! Binary training snapshots.
//!
//! Layout: magic `LVPC`, `u32` format version, then sections each prefixed
//! by a `u64` byte length, in this order: encoder, classifier, prototypes,
//! optimizer, scheduler, rng, config. Integers are little-endian `u32`/`u64`,
//! reals little-endian `f64`.

use std::path::Path;

use super::config::RunConfig;
use super::optimizer::{AdamW, Moments};
use super::scheduler::{Phase, StageState};
use crate::codec::{Reader, Writer};
use crate::encoders::{Encoder, FeatureEncoder, MlpConfig, MlpEncoder, VitConfig, VitEncoder};
use crate::error::{Error, Result};
use crate::losses::ClassifierBank;
use crate::prototypes::PrototypeBank;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub classifier: ClassifierBank,
    pub prototypes: PrototypeBank,
    pub optimizer: AdamW,
    pub stage: StageState,
    pub rng: RngState,
    pub config: RunConfig,
}

fn put_tensor(w: &mut Writer, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
    let n = n.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let data = r.f64s(n)?;
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn put_usizes(w: &mut Writer, vs: &[usize]) {
    for &v in vs {
        w.u64(v as u64);
    }
}

fn encode_encoder(enc: &Encoder) -> Vec<u8> {
    let mut w = Writer::new();
    match enc {
        Encoder::Mlp(e) => {
            let c = e.config();
            w.u8(0);
            put_usizes(&mut w, &[c.input_dim, c.hidden, c.output_dim]);
        }
        Encoder::Vit(e) => {
            let c = e.config();
            w.u8(1);
            put_usizes(
                &mut w,
                &[
                    c.image_width,
                    c.patch_stride,
                    c.channels,
                    c.token_dim,
                    c.layers,
                    c.heads,
                    c.ffn_hidden,
                    c.head_hidden,
                    c.output_dim,
                ],
            );
        }
    }
    w.u32(enc.params().len() as u32);
    for p in enc.params() {
        put_tensor(&mut w, p);
    }
    w.into_inner()
}

fn decode_encoder(r: &mut Reader<'_>) -> Result<Encoder> {
    let kind = r.u8()?;
    let mut dims = |n: usize| (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>();
    let head = match kind {
        0 => dims(3)?,
        1 => dims(9)?,
        k => return Err(Error::Format(format!("unknown encoder kind {k}"))),
    };
    let count = r.u32()? as usize;
    let params = (0..count).map(|_| get_tensor(r)).collect::<Result<Vec<_>>>()?;
    Ok(match kind {
        0 => Encoder::Mlp(MlpEncoder::from_params(
            MlpConfig {
                input_dim: head[0],
                hidden: head[1],
                output_dim: head[2],
            },
            params,
        )?),
        _ => Encoder::Vit(VitEncoder::from_params(
            VitConfig {
                image_width: head[0],
                patch_stride: head[1],
                channels: head[2],
                token_dim: head[3],
                layers: head[4],
                heads: head[5],
                ffn_hidden: head[6],
                head_hidden: head[7],
                output_dim: head[8],
            },
            params,
        )?),
    })
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Writer::new();
        out.bytes(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);

        out.section(&encode_encoder(&self.encoder));

        let mut w = Writer::new();
        put_tensor(&mut w, self.classifier.weights());
        out.section(&w.into_inner());

        let mut w = Writer::new();
        w.u64(self.prototypes.dim() as u64);
        w.u64(self.prototypes.classes() as u64);
        for &f in self.prototypes.initialized_flags() {
            w.u8(f as u8);
        }
        w.f64s(self.prototypes.raw());
        out.section(&w.into_inner());

        let mut w = Writer::new();
        let o = &self.optimizer;
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        w.f64(o.weight_decay);
        w.u64(o.step_count());
        w.u32(o.slots().len() as u32);
        for s in o.slots() {
            w.u64(s.m.len() as u64);
            w.f64s(&s.m);
            w.f64s(&s.v);
        }
        out.section(&w.into_inner());

        let mut w = Writer::new();
        w.u8(self.stage.phase.index());
        w.f64(self.stage.css_raw);
        w.f64(self.stage.css_smoothed);
        w.u64(self.stage.iteration);
        w.u8(self.stage.observed as u8);
        out.section(&w.into_inner());

        let mut w = Writer::new();
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        out.section(&w.into_inner());

        out.section(self.config.to_text().as_bytes());
        out.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }

        let mut s = r.section()?;
        let encoder = decode_encoder(&mut s)?;
        s.finish("encoder section")?;

        let mut s = r.section()?;
        let classifier = ClassifierBank::from_raw(get_tensor(&mut s)?)?;
        s.finish("classifier section")?;

        let mut s = r.section()?;
        let dim = s.usize()?;
        let classes = s.usize()?;
        let flags = (0..classes)
            .map(|_| s.u8().map(|b| b != 0))
            .collect::<Result<Vec<_>>>()?;
        let data = s.f64s(dim * classes)?;
        let prototypes = PrototypeBank::from_raw(dim, data, flags)?;
        s.finish("prototype section")?;

        let mut s = r.section()?;
        let (beta1, beta2, eps, wd) = (s.f64()?, s.f64()?, s.f64()?, s.f64()?);
        let step = s.u64()?;
        let n = s.u32()? as usize;
        let mut slots = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = s.usize()?;
            let m = s.f64s(len)?;
            let v = s.f64s(len)?;
            slots.push(Moments { m, v });
        }
        let optimizer = AdamW::from_parts(beta1, beta2, eps, wd, step, slots);
        s.finish("optimizer section")?;

        let mut s = r.section()?;
        let phase = Phase::from_index(s.u8()?).ok_or_else(|| Error::Format("bad phase index".into()))?;
        let stage = StageState {
            phase,
            css_raw: s.f64()?,
            css_smoothed: s.f64()?,
            iteration: s.u64()?,
            observed: s.u8()? != 0,
        };
        s.finish("scheduler section")?;

        let mut s = r.section()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(s.take(32)?);
        let rng = RngState {
            seed,
            stream: s.u64()?,
            word_pos: s.u128()?,
        };
        s.finish("rng section")?;

        let mut s = r.section()?;
        let text = std::str::from_utf8(s.take(s.remaining())?)
            .map_err(|_| Error::Format("config section is not utf-8".into()))?;
        let config = RunConfig::parse(text)?;
        r.finish("checkpoint")?;

        Ok(Checkpoint {
            encoder,
            classifier,
            prototypes,
            optimizer,
            stage,
            rng,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
