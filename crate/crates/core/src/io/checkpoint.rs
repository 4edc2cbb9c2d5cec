//! `DMPLUG1` checkpoints.
//!
//! Layout: the 7-byte magic, a little-endian `u64` metadata length, the JSON
//! metadata, then every tensor as raw little-endian `f64` in manifest order.
//! Manifest offsets are relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::NeuralScore;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DMPLUG1";
const HEADER: u64 = 7 + 8;
const BETAS: &str = "schedule.betas";
const MEAN: &str = "data.mean";
const VAR: &str = "data.var";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NeuralScore,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleInfo {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    schedule: ScheduleInfo,
    dim: usize,
    widths: Vec<usize>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(net: NeuralScore, schedule: NoiseSchedule) -> Result<Self> {
        if net.steps() != schedule.len() {
            return Err(Error::contract(format!(
                "network has {} time rows, schedule {} steps",
                net.steps(),
                schedule.len()
            )));
        }
        Ok(Self { net, schedule })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let betas = Tensor::from_vec(self.schedule.betas().to_vec());
        let mut named: Vec<(String, &Tensor)> = vec![
            (BETAS.to_string(), &betas),
            (MEAN.to_string(), self.net.data_mean()),
            (VAR.to_string(), self.net.data_var()),
        ];
        named.extend(self.net.named_params());
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let len = 8 * t.numel() as u64;
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        let betas = self.schedule.betas();
        let meta = Metadata {
            schedule: ScheduleInfo {
                steps: betas.len(),
                beta_start: betas[0],
                beta_end: betas[betas.len() - 1],
            },
            dim: self.net.dim(),
            widths: self.net.widths().to_vec(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::contract(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER as usize + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        if total < 7 || &bytes[..7] != MAGIC {
            return Err(Error::format(0, "missing DMPLUG1 magic"));
        }
        if total < HEADER {
            return Err(Error::format(7, "truncated metadata length"));
        }
        let meta_len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
        let payload = HEADER
            .checked_add(meta_len)
            .filter(|&p| p <= total)
            .ok_or_else(|| Error::format(HEADER, format!("metadata of {meta_len} bytes exceeds file")))?;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER as usize..payload as usize])
            .map_err(|e| Error::format(HEADER, format!("metadata: {e}")))?;

        let mut expected = vec![
            (BETAS.to_string(), vec![meta.schedule.steps]),
            (MEAN.to_string(), vec![1, meta.dim]),
            (VAR.to_string(), vec![1, meta.dim]),
        ];
        if meta.widths.is_empty() || meta.widths.contains(&0) || meta.dim == 0 || meta.schedule.steps == 0 {
            return Err(Error::format(HEADER, "metadata describes an empty network"));
        }
        expected.extend(NeuralScore::param_shapes(meta.dim, &meta.widths, meta.schedule.steps));
        if meta.tensors.len() != expected.len() {
            return Err(Error::format(
                HEADER,
                format!("manifest lists {} tensors, layout needs {}", meta.tensors.len(), expected.len()),
            ));
        }
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(expected.len());
        for (entry, (name, shape)) in meta.tensors.iter().zip(&expected) {
            let at = payload + entry.offset;
            if entry.offset != cursor {
                return Err(Error::format(
                    payload + cursor,
                    format!("`{}` starts at {} instead of {cursor}", entry.name, entry.offset),
                ));
            }
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::format(
                    at,
                    format!("expected `{name}` {shape:?}, manifest has `{}` {:?}", entry.name, entry.shape),
                ));
            }
            let numel: usize = shape.iter().product();
            if entry.len != 8 * numel as u64 {
                return Err(Error::format(
                    at,
                    format!("`{name}` is {} bytes, shape needs {}", entry.len, 8 * numel),
                ));
            }
            if at + entry.len > total {
                return Err(Error::format(total, format!("payload truncated inside `{name}`")));
            }
            let data = bytes[at as usize..(at + entry.len) as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
            cursor += entry.len;
        }
        if payload + cursor != total {
            return Err(Error::format(payload + cursor, "trailing bytes after the last tensor"));
        }
        let mut tensors = tensors.into_iter();
        let betas = tensors.next().expect("betas entry").into_data();
        let schedule = NoiseSchedule::from_betas(betas).map_err(|e| Error::format(payload, e.to_string()))?;
        let (mean, var) = (tensors.next().expect("mean entry"), tensors.next().expect("variance entry"));
        let stats_at = payload + meta.tensors[1].offset;
        let net = NeuralScore::from_parts(meta.dim, meta.widths, meta.schedule.steps, tensors.collect())?
            .with_data_stats(mean, var)
            .map_err(|e| Error::format(stats_at, e.to_string()))?;
        Self::new(net, schedule)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::SeedStream;
    use crate::schedule::make_linear_schedule;

    fn sample() -> Checkpoint {
        let mut rng = SeedStream::new(1);
        let data = rng.normal_tensor(&[10, 6]);
        let mut net = NeuralScore::new(6, &[5, 4], 20, &mut rng).unwrap().fit_data_stats(&data).unwrap();
        let last = net.params().len() - 2;
        net.params_mut()[last] = rng.normal_tensor(&[4, 6]);
        Checkpoint::new(net, make_linear_schedule(20, 1e-3, 0.3).unwrap()).unwrap()
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let x = SeedStream::new(2).normal_tensor(&[3, 6]);
        let tape = Tape::new();
        let a = ck.net.epsilon(&tape, &ck.schedule, 7, tape.constant(x.clone())).unwrap().value();
        let b = back.net.epsilon(&tape, &back.schedule, 7, tape.constant(x)).unwrap().value();
        assert_eq!(a.data(), b.data());
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn manifest_tiles_payload() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[15..15 + len]).unwrap();
        let mut cursor = 0;
        for e in &meta.tensors {
            assert_eq!(e.offset, cursor);
            cursor += e.len;
        }
        assert_eq!(15 + len as u64 + cursor, bytes.len() as u64);
    }

    #[test]
    fn corrupt_files_name_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(Checkpoint::from_bytes(&bad).unwrap_err()), 0);
        assert_eq!(offset_of(Checkpoint::from_bytes(&bytes[..10]).unwrap_err()), 7);
        let cut = bytes.len() - 3;
        assert_eq!(offset_of(Checkpoint::from_bytes(&bytes[..cut]).unwrap_err()), cut as u64);
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(offset_of(Checkpoint::from_bytes(&extra).unwrap_err()), bytes.len() as u64);
        let len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        let meta = String::from_utf8(bytes[15..15 + len].to_vec()).unwrap();
        let widened = meta.replace("[5,4]", "[5,5]");
        let mut tampered = MAGIC.to_vec();
        tampered.extend_from_slice(&(widened.len() as u64).to_le_bytes());
        tampered.extend_from_slice(widened.as_bytes());
        tampered.extend_from_slice(&bytes[15 + len..]);
        let err = Checkpoint::from_bytes(&tampered).unwrap_err();
        assert!(offset_of(err) >= 15 + widened.len() as u64);
    }

    #[test]
    fn mismatched_schedule_rejected() {
        let net = NeuralScore::new(2, &[3], 5, &mut SeedStream::new(0)).unwrap();
        assert!(Checkpoint::new(net, make_linear_schedule(6, 0.1, 0.2).unwrap()).is_err());
    }
}
