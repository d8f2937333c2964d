//! Single-file binary snapshot of parameters, optimizer moments and metadata.
//!
//! Layout (little-endian): magic `FINO`, version `u32`, then records until
//! end of file: name length `u32`, UTF-8 name, dtype `u8` (0 = f64, 1 = u64,
//! 2 = u8), rank `u32`, extents as `u64`, raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fino_tensor::{ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{FinoError, Result};
use crate::optim::AdamW;

const MAGIC: &[u8; 4] = b"FINO";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub config: TrainConfig,
    /// Image extents seen during training.
    pub extents: Option<(usize, usize)>,
}

enum Values {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

struct Record {
    shape: Vec<usize>,
    values: Values,
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &Values) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(match values {
        Values::F64(_) => 0,
        Values::U64(_) => 1,
        Values::U8(_) => 2,
    });
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match values {
        Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Values::U8(v) => out.extend_from_slice(v),
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_record(out, name, t.shape(), &Values::F64(t.data().to_vec()));
}

fn write_u64s(out: &mut Vec<u8>, name: &str, v: &[u64]) {
    write_record(out, name, &[v.len()], &Values::U64(v.to_vec()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FinoError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Record)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| FinoError::Checkpoint("record name is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let count = count.ok_or_else(|| FinoError::Checkpoint(format!("`{name}` has absurd extents {shape:?}")))?;
        let width = match dtype {
            0 | 1 => 8,
            2 => 1,
            t => return Err(FinoError::Checkpoint(format!("`{name}` has unknown dtype {t}"))),
        };
        let raw = self.take(count.checked_mul(width).ok_or_else(|| FinoError::Checkpoint("size overflow".into()))?)?;
        let values = match dtype {
            0 => Values::F64(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            1 => Values::U64(raw.chunks(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            _ => Values::U8(raw.to_vec()),
        };
        Ok((name, Record { shape, values }))
    }
}

impl Record {
    fn tensor(self, name: &str) -> Result<Tensor> {
        match self.values {
            Values::F64(v) => Tensor::from_vec(&self.shape, v).map_err(|e| FinoError::Checkpoint(format!("`{name}`: {e}"))),
            _ => Err(FinoError::Checkpoint(format!("`{name}` is not an f64 tensor"))),
        }
    }

    fn u64s(self, name: &str) -> Result<Vec<u64>> {
        match self.values {
            Values::U64(v) => Ok(v),
            _ => Err(FinoError::Checkpoint(format!("`{name}` is not a u64 record"))),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_string();
        write_u64s(&mut out, "meta.step", &[self.step]);
        write_u64s(&mut out, "meta.config_hash", &[self.config.hash()]);
        write_record(&mut out, "meta.config", &[text.len()], &Values::U8(text.into_bytes()));
        if let Some((h, w)) = self.extents {
            write_u64s(&mut out, "meta.extents", &[h as u64, w as u64]);
        }
        for (name, p) in self.params.iter() {
            write_tensor(&mut out, name, &p.value);
        }
        if let Some(opt) = &self.optimizer {
            write_u64s(&mut out, "meta.opt_state", &[opt.step, opt.skipped as u64]);
            for (name, t) in &opt.m {
                write_tensor(&mut out, &format!("opt.m.{name}"), t);
            }
            for (name, t) in &opt.v {
                write_tensor(&mut out, &format!("opt.v.{name}"), t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(FinoError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FinoError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut records = BTreeMap::new();
        while r.pos < bytes.len() {
            let (name, rec) = r.record()?;
            if records.insert(name.clone(), rec).is_some() {
                return Err(FinoError::Checkpoint(format!("record `{name}` appears twice")));
            }
        }
        let mut take = |name: &str| records.remove(name).ok_or_else(|| FinoError::Checkpoint(format!("missing `{name}`")));
        let step = take("meta.step")?.u64s("meta.step")?;
        let hash = take("meta.config_hash")?.u64s("meta.config_hash")?;
        let text = match take("meta.config")?.values {
            Values::U8(v) => String::from_utf8(v).map_err(|_| FinoError::Checkpoint("config is not UTF-8".into()))?,
            _ => return Err(FinoError::Checkpoint("`meta.config` is not text".into())),
        };
        let config = TrainConfig::parse(&text)?;
        if hash != [config.hash()] {
            return Err(FinoError::Checkpoint("config hash does not match the stored config".into()));
        }
        let extents = match records.remove("meta.extents") {
            Some(rec) => match rec.u64s("meta.extents")?[..] {
                [h, w] => Some((h as usize, w as usize)),
                _ => return Err(FinoError::Checkpoint("`meta.extents` needs two values".into())),
            },
            None => None,
        };
        let opt_state = records.remove("meta.opt_state").map(|r| r.u64s("meta.opt_state")).transpose()?;
        let mut params = ParamStore::new();
        let mut optimizer = opt_state
            .map(|s| match s[..] {
                [step, skipped] => {
                    let mut opt = AdamW::new(config.optimizer);
                    opt.step = step;
                    opt.skipped = skipped as usize;
                    Ok(opt)
                }
                _ => Err(FinoError::Checkpoint("`meta.opt_state` needs two values".into())),
            })
            .transpose()?;
        for (name, rec) in records {
            if let Some(rest) = name.strip_prefix("opt.m.").or_else(|| name.strip_prefix("opt.v.")) {
                let opt = optimizer
                    .as_mut()
                    .ok_or_else(|| FinoError::Checkpoint(format!("`{name}` without optimizer state")))?;
                let map = if name.starts_with("opt.m.") { &mut opt.m } else { &mut opt.v };
                map.insert(rest.to_string(), rec.tensor(&name)?);
            } else if name.starts_with("meta.") {
                return Err(FinoError::Checkpoint(format!("unknown metadata `{name}`")));
            } else {
                params.insert(name.clone(), rec.tensor(&name)?)?;
            }
        }
        let step = match step[..] {
            [s] => s,
            _ => return Err(FinoError::Checkpoint("`meta.step` needs one value".into())),
        };
        Ok(Self {
            params,
            optimizer,
            step,
            config,
            extents,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FinoError::load(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::optim::AdamWConfig;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model.widths = [2, 3, 4, 5];
        let params = init_params(&config.model, 9).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut store = params.clone();
        for (_, p) in store.iter_mut() {
            p.grad = p.value.map(|v| v * 0.5 + 0.1);
        }
        opt.update(&mut store, 1e-3);
        Checkpoint {
            params: store,
            optimizer: Some(opt),
            step: 17,
            config,
            extents: Some((64, 96)),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.extents, Some((64, 96)));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"FINO");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"FINO\x01\x00\x00\x00").is_err());
    }
}
