//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "ICD1"  u32 version
//! u32 n_steps  u32 t_max  f64 beta_start  f64 beta_end  f64 t_min
//! u32 block count, then per block:
//!   u32 name length, name bytes (UTF-8), u32 rank, u64 dims[rank], f64 data
//! ```
//!
//! Network configuration, guidance scales and boundary plans travel as
//! ordinary named blocks, so a file is just a schedule plus tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Activation;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{IcdError, Result};
use crate::schedule::ScheduleParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ICD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleParams,
    pub blocks: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> IcdError {
    IcdError::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut b = [0u8; K];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// Upper bound on element counts accepted from a file.
const MAX_ELEMENTS: u64 = 1 << 32;

impl Checkpoint {
    pub fn new(schedule: ScheduleParams) -> Self {
        Self {
            schedule,
            blocks: vec![],
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blocks.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing block {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.iter().any(|(n, _)| n == name)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let s = &self.schedule;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(s.n_steps as u32).to_le_bytes())?;
        out.write_all(&(s.t_max as u32).to_le_bytes())?;
        for v in [s.beta_start, s.beta_end, s.t_min] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &self.blocks {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = Reader { inner: input };
        if &r.bytes::<4>()? != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(IcdError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let schedule = ScheduleParams {
            n_steps: r.u32()? as usize,
            t_max: r.u32()? as usize,
            beta_start: r.f64()?,
            beta_end: r.f64()?,
            t_min: r.f64()?,
        };
        let count = r.u32()?;
        let mut blocks = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let mut name = vec![0u8; len.min(1 << 16)];
            if len > name.len() {
                return Err(bad("block name too long"));
            }
            r.inner
                .read_exact(&mut name)
                .map_err(|e| bad(format!("truncated file: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("block name is not UTF-8"))?;
            let rank = r.u32()?;
            if rank > 8 {
                return Err(bad(format!("block {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                count = count.saturating_mul(d);
                shape.push(d as usize);
            }
            if count > MAX_ELEMENTS {
                return Err(bad(format!("block {name} is implausibly large")));
            }
            let mut data = Vec::with_capacity(count as usize);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            blocks.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.inner.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last block"));
        }
        Ok(Self { schedule, blocks })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn vector(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len()], values.to_vec()).expect("1-D shape matches length")
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(bad(format!("{what} {v} is not a count")))
    }
}

/// Stores `den` under `prefix`: `{prefix}.config`, `{prefix}.guidance_scales`
/// and one block per parameter.
pub fn pack_denoiser(ck: &mut Checkpoint, prefix: &str, den: &Denoiser) {
    let c = den.config();
    ck.push(
        format!("{prefix}.config"),
        vector(&[
            c.num_classes as f64,
            c.time_dim as f64,
            c.class_dim as f64,
            c.guidance_dim as f64,
            c.hidden as f64,
            c.depth as f64,
            c.activation.code() as f64,
            den.t_max() as f64,
        ]),
    );
    ck.push(format!("{prefix}.guidance_scales"), vector(den.guidance_scales()));
    for (name, t) in den.named_params() {
        ck.push(format!("{prefix}.{name}"), t.clone());
    }
}

pub fn unpack_denoiser(ck: &Checkpoint, prefix: &str) -> Result<Denoiser> {
    let c = ck.get(&format!("{prefix}.config"))?.data();
    if c.len() != 8 {
        return Err(bad(format!("{prefix}.config has {} entries", c.len())));
    }
    let activation = Activation::from_code(as_count(c[6], "activation")? as u32)
        .ok_or_else(|| bad(format!("unknown activation code {}", c[6])))?;
    let config = DenoiserConfig {
        num_classes: as_count(c[0], "num_classes")?,
        time_dim: as_count(c[1], "time_dim")?,
        class_dim: as_count(c[2], "class_dim")?,
        guidance_dim: as_count(c[3], "guidance_dim")?,
        hidden: as_count(c[4], "hidden")?,
        depth: as_count(c[5], "depth")?,
        activation,
    };
    let t_max = as_count(c[7], "t_max")?;
    if t_max != ck.schedule.t_max {
        return Err(bad(format!(
            "network t_max {t_max} differs from schedule t_max {}",
            ck.schedule.t_max
        )));
    }
    let scales = ck.get(&format!("{prefix}.guidance_scales"))?.data().to_vec();
    let head = format!("{prefix}.");
    let named: Vec<(String, Tensor)> = ck
        .blocks
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&head).map(|s| (s.to_string(), t.clone())))
        .filter(|(n, _)| n != "config" && n != "guidance_scales")
        .collect();
    Denoiser::from_parts(config, t_max, scales, named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let den = Denoiser::new(
            DenoiserConfig {
                hidden: 8,
                depth: 2,
                ..Default::default()
            },
            1000,
            &mut stream(1, "ck"),
        )
        .unwrap()
        .with_guidance_embedding(&[1.0, 8.0], &mut stream(2, "ck"))
        .unwrap();
        let mut ck = Checkpoint::new(ScheduleParams::default());
        pack_denoiser(&mut ck, "student", &den);
        ck.push("empty", Tensor::new(vec![0], vec![]).unwrap());
        ck.push("odd", vector(&[f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((na, ta), (nb, tb)) in ck.blocks.iter().zip(&back.blocks) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        let den = unpack_denoiser(&back, "student").unwrap();
        assert_eq!(den.guidance_scales(), &[1.0, 8.0]);
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match Checkpoint::read_from(bytes.as_slice()) {
            Err(IcdError::Version { found: 7, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::read_from(&b"XXXX"[..]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::read_from(longer.as_slice()).is_err());
    }
}
