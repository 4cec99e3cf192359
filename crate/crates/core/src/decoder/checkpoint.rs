//! Binary checkpoint: magic, version, config JSON, vocabulary hash, then
//! every named tensor as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{output_mask, DecoderError, ModelConfig, PersonalizedDecoder};
use crate::autodiff::Tensor;
use crate::flow::ActionVocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDEC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> DecoderError {
    DecoderError::CorruptCheckpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DecoderError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| corrupt("unexpected end of file"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, DecoderError> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DecoderError> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_bytes(r: &mut impl Read, len: usize, limit: usize) -> Result<Vec<u8>, DecoderError> {
    if len > limit {
        return Err(corrupt(format!("field of {len} bytes exceeds {limit}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| corrupt("unexpected end of file"))?;
    Ok(buf)
}

impl PersonalizedDecoder<f32> {
    pub fn write_to(&self, w: &mut impl Write, vocab: &ActionVocabulary) -> Result<(), DecoderError> {
        if vocab.size() != self.config.vocab_size {
            return Err(DecoderError::ConfigInvalid(format!(
                "model has {} ids but vocabulary has {}",
                self.config.vocab_size,
                vocab.size()
            )));
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&vocab.content_hash())?;
        let params = self.named_parameters();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, tensor) in params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &x in tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written for `vocab`; the vocabulary hash, tensor
    /// names and shapes must all match.
    pub fn read_from(r: &mut impl Read, vocab: &ActionVocabulary) -> Result<Self, DecoderError> {
        if &read_exact::<4>(r)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as usize;
        let config: ModelConfig = serde_json::from_slice(&read_bytes(r, len, 1 << 16)?)
            .map_err(|e| corrupt(format!("config: {e}")))?;
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let hash: [u8; 32] = read_exact(r)?;
        if hash != vocab.content_hash() {
            return Err(DecoderError::HashMismatch {
                checkpoint: hex::encode(hash),
                vocab: vocab.hash_hex(),
            });
        }
        if config.vocab_size != vocab.size() {
            return Err(corrupt("vocab_size disagrees with the vocabulary"));
        }
        let mut model = PersonalizedDecoder::<f32>::build(&config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = read_u32(r)? as usize;
        if count != expected.len() {
            return Err(corrupt(format!("{count} tensors, expected {}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let len = read_u32(r)? as usize;
            let got = String::from_utf8(read_bytes(r, len, 256)?).map_err(|_| corrupt("tensor name"))?;
            if &got != name {
                return Err(corrupt(format!("tensor {got}, expected {name}")));
            }
            let ndim = read_u32(r)? as usize;
            let dims = (0..ndim.min(8)).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &dims != shape {
                return Err(corrupt(format!("{name} has shape {dims:?}, expected {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let bytes = read_bytes(r, 4 * n, 4 * n)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            loaded.push(Tensor::new(shape.clone(), data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        for (dst, src) in model.parameters_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        model.output_mask = output_mask(config.vocab_size, Some(vocab));
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &ActionVocabulary) -> Result<(), DecoderError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, vocab)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &ActionVocabulary) -> Result<Self, DecoderError> {
        Self::read_from(&mut BufReader::new(File::open(path)?), vocab)
    }
}
