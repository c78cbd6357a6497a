//! The two-tower model and its checkpoint format.
//!
//! A model is one parameter set holding both encoders under the `tactile.`
//! and `image.` prefixes. Checkpoints serialize every tensor with its
//! optimizer state plus the resolved configuration text; randomness is
//! derived counter-style from the run seed, so seed + epoch is the complete
//! sampler state and resuming reproduces the original trajectory exactly.

use std::io::Read;
use std::path::Path;

use crate::alignment::{aggregate_tactile, LossConfig, TactileDescriptor};
use crate::encoders::{encode, BackboneKind, EncoderConfig, EncoderInput, EncoderParams, FeatureMap};
use crate::error::{Error, Result};
use crate::numeric::optim::ParamSet;
use crate::numeric::scalar::{c as sc, Scalar};
use crate::numeric::tensor::Tensor;
use crate::pairing::CurriculumSchedule;

pub const TACTILE_PREFIX: &str = "tactile";
pub const IMAGE_PREFIX: &str = "image";

/// Both encoders plus the loss settings they were trained with.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh seeded model. Backbones start frozen; aligners trainable.
    pub fn init(encoder: &EncoderConfig, loss: &LossConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        loss.validate()?;
        let mut params = ParamSet::new();
        EncoderParams::<T>::init(encoder, seed, TACTILE_PREFIX)?
            .register(&mut params, TACTILE_PREFIX, false, true)?;
        EncoderParams::<T>::init(encoder, seed, IMAGE_PREFIX)?
            .register(&mut params, IMAGE_PREFIX, false, true)?;
        Ok(Model {
            encoder: encoder.clone(),
            loss: loss.clone(),
            params,
        })
    }

    /// Wraps restored parameters, checking them against the encoder config.
    pub fn from_params(
        encoder: &EncoderConfig,
        loss: &LossConfig,
        params: ParamSet<T>,
    ) -> Result<Self> {
        encoder.validate()?;
        loss.validate()?;
        for prefix in [TACTILE_PREFIX, IMAGE_PREFIX] {
            EncoderParams::from_param_set(&params, prefix)?.validate(encoder)?;
        }
        Ok(Model {
            encoder: encoder.clone(),
            loss: loss.clone(),
            params,
        })
    }

    pub fn encode_tactile(&self, input: EncoderInput<'_, T>) -> Result<FeatureMap<T>> {
        let p = EncoderParams::from_param_set(&self.params, TACTILE_PREFIX)?;
        encode(input, &p, &self.encoder)
    }

    pub fn encode_visual(&self, input: EncoderInput<'_, T>) -> Result<FeatureMap<T>> {
        let p = EncoderParams::from_param_set(&self.params, IMAGE_PREFIX)?;
        encode(input, &p, &self.encoder)
    }

    /// Tactile descriptor of one tactile input: encode, then spatial mean.
    pub fn descriptor(&self, input: EncoderInput<'_, T>) -> Result<TactileDescriptor<T>> {
        aggregate_tactile(&self.encode_tactile(input)?)
    }

    /// Sets trainability for `epoch`: aligners always train, the image
    /// backbone never does, and the tactile backbone unfreezes once the
    /// schedule allows — only in random-projection mode, where it actually
    /// participates in the forward pass.
    pub fn apply_freeze(&mut self, epoch: usize, schedule: &CurriculumSchedule) -> Result<()> {
        let tactile_backbone = !schedule.backbones_frozen(epoch)
            && self.encoder.backbone == BackboneKind::RandomProjection;
        for suffix in crate::encoders::PARAM_SUFFIXES {
            let backbone = suffix.starts_with("backbone");
            let tactile = if backbone { tactile_backbone } else { true };
            self.params
                .set_trainable(&format!("{TACTILE_PREFIX}.{suffix}"), tactile)?;
            self.params
                .set_trainable(&format!("{IMAGE_PREFIX}.{suffix}"), !backbone)?;
        }
        Ok(())
    }
}

/// A training snapshot: completed epoch, parameters with optimizer state,
/// and an echo of the resolved configuration that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub seed: u64,
    /// Index of the last completed epoch.
    pub epoch: usize,
    pub config_text: String,
    pub params: ParamSet<T>,
}

const MAGIC: &[u8; 4] = b"STTC";
const VERSION: u16 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<T: Scalar>(&mut self, data: &[T]) {
        for v in data {
            self.buf
                .extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    path: &'a Path,
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| sc::<T>(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer { buf: Vec::new() };
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u16(0);
        w.u64(self.seed);
        w.u32(u32::try_from(self.epoch).map_err(|_| Error::invalid("epoch exceeds u32"))?);
        w.u32(self.config_text.len() as u32);
        w.bytes(self.config_text.as_bytes());
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.buf.push(u8::from(p.trainable));
            w.u64(p.step);
            w.u32(p.tensor.rank() as u32);
            for &d in p.tensor.shape() {
                w.u32(d as u32);
            }
            w.f64s(p.tensor.data());
            w.f64s(p.m.data());
            w.f64s(p.v.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { path, rest: bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        r.u16()?;
        let seed = r.u64()?;
        let epoch = r.u32()? as usize;
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::format(path, "config echo is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let trainable = r.take(1)?[0] != 0;
            let step = r.u64()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let tensor = Tensor::new(shape.clone(), r.f64s(len)?)?;
            let m = Tensor::new(shape.clone(), r.f64s(len)?)?;
            let v = Tensor::new(shape, r.f64s(len)?)?;
            params.insert_with_state(&name, tensor, trainable, m, v, step)?;
        }
        if !r.rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            seed,
            epoch,
            config_text,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
