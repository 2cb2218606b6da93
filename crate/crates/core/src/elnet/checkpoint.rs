//! Binary checkpoint: `ELSEG1`, a length-prefixed JSON network config, named
//! parameter blocks, batchnorm running moments in the same block format, and an
//! optional trailing section (optimizer state).
//!
//! A block is `u32 name length, name bytes, u32 extent count, u32 extents,
//! little-endian f32 data`. All integers are little-endian.

use std::io::{Read, Write};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::volgrad::{RunningMoments, Tensor};

const MAGIC: &[u8; 6] = b"ELSEG1";

/// Free-form extra state stored after the network: a JSON header and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub header: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub extra: Option<Section>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    put_u32(w, bytes.len())?;
    w.write_all(bytes)?;
    Ok(())
}

fn put_block(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_bytes(w, name.as_bytes())?;
    put_u32(w, shape.len())?;
    for &e in shape {
        put_u32(w, e)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_blocks<'a>(w: &mut impl Write, blocks: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let blocks: Vec<_> = blocks.collect();
    put_u32(w, blocks.len())?;
    for (name, t) in blocks {
        put_block(w, name, t.shape(), t.data())?;
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.exact(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.exact(n, what)?).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("block name")?;
        let rank = self.u32("extent count")?;
        if rank > 8 {
            return Err(corrupt(format!("block `{name}` claims {rank} extents")));
        }
        let shape = (0..rank).map(|_| self.u32("extent")).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| corrupt(format!("block `{name}` is too large")))?;
        let bytes = self.exact(len * 4, "block data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn blocks(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32("block count")?;
        (0..n).map(|_| self.block()).collect()
    }

    fn at_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        Ok(self.inner.read(&mut probe)? == 0)
    }
}

/// Serializes `network` and an optional extra section.
pub fn write_checkpoint(w: &mut impl Write, network: &Network, extra: Option<&Section>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_bytes(w, serde_json::to_string(network.config())?.as_bytes())?;
    put_blocks(w, network.params().iter().map(|(_, name, t)| (name, t)))?;
    let mut moments = Vec::with_capacity(network.moments().len() * 2);
    for (name, m) in network.moments() {
        let c = m.mean.len();
        moments.push((format!("{name}.mean"), Tensor::new(vec![c], m.mean.clone())?));
        moments.push((format!("{name}.var"), Tensor::new(vec![c], m.var.clone())?));
    }
    put_blocks(w, moments.iter().map(|(n, t)| (n.as_str(), t)))?;
    match extra {
        None => w.write_all(&[0])?,
        Some(s) => {
            w.write_all(&[1])?;
            put_bytes(w, serde_json::to_string(&s.header)?.as_bytes())?;
            put_blocks(w, s.blocks.iter().map(|(n, t)| (n.as_str(), t)))?;
        }
    }
    Ok(())
}

/// Parses a checkpoint and rebuilds the network it describes.
pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r };
    if c.exact(MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt("bad magic; not an ELSEG1 checkpoint"));
    }
    let config: NetworkConfig = serde_json::from_str(&c.string("config")?)?;
    let mut network = Network::new(config, 0)?;
    let params = c.blocks()?;
    let raw = c.blocks()?;
    if raw.len() % 2 != 0 {
        return Err(corrupt("batchnorm moments must come in mean/var pairs"));
    }
    let mut moments = Vec::with_capacity(raw.len() / 2);
    for pair in raw.chunks_exact(2) {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        let layer = mean_name
            .strip_suffix(".mean")
            .filter(|l| var_name.strip_suffix(".var") == Some(l))
            .ok_or_else(|| corrupt(format!("unpaired moment blocks `{mean_name}` / `{var_name}`")))?;
        moments.push((
            layer.to_string(),
            RunningMoments {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            },
        ));
    }
    network.load_state(params, moments)?;
    let extra = match c.u8("section flag")? {
        0 => None,
        1 => {
            let header = serde_json::from_str(&c.string("section header")?)?;
            Some(Section {
                header,
                blocks: c.blocks()?,
            })
        }
        f => return Err(corrupt(format!("unknown section flag {f}"))),
    };
    if !c.at_end()? {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { network, extra })
}
