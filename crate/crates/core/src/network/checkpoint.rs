//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `IRCKPT\0\0`, `u32` version, `u32`-length
//! UTF-8 architecture text, `u32` layer count, then per layer an `f64`
//! rate multiplier, a `u8` frozen flag, a `u32` tensor count and each
//! tensor as `u32` rank, `u32` dims and `f32` data. A trailing `u8` flags
//! whether schedule state follows: base, head and decay rates (`f64`),
//! `u32` decay-point count, `u64` decay points, `u64` stop, `u64` iteration.

use std::io::{Read, Write};
use std::path::Path;

use super::{LearningSchedule, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IRCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub state: Option<(LearningSchedule, u64)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
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
    fn tensor(&mut self, expected_len: usize) -> Result<Vec<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(bad("implausible tensor rank"));
        }
        let mut n = 1usize;
        for _ in 0..rank {
            n = n.saturating_mul(self.u32()? as usize);
        }
        if n != expected_len {
            return Err(bad(format!(
                "tensor has {n} values, architecture needs {expected_len}"
            )));
        }
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|e| bad(format!("truncated tensor: {e}")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn write_tensor<W: Write>(w: &mut W, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn tensor_dims(net: &Network<f32>, li: usize) -> (Vec<usize>, Vec<usize>) {
    let l = &net.layers()[li];
    match l.spec.kind {
        super::LayerKind::Conv {
            filters, kernel, ..
        } => (vec![filters, l.input.c, kernel, kernel], vec![filters]),
        super::LayerKind::FullyConnected { units } => (vec![l.input.len(), units], vec![units]),
        _ => (vec![], vec![]),
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let net = &self.network;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let arch = net.architecture();
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch.as_bytes())?;
        w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
        for (li, l) in net.layers().iter().enumerate() {
            w.write_all(&l.spec.lr_multiplier.to_le_bytes())?;
            w.write_all(&[u8::from(l.spec.frozen)])?;
            if l.spec.kind.has_params() {
                w.write_all(&2u32.to_le_bytes())?;
                let (wd, bd) = tensor_dims(net, li);
                write_tensor(&mut w, &wd, &l.weights)?;
                write_tensor(&mut w, &bd, &l.bias)?;
            } else {
                w.write_all(&0u32.to_le_bytes())?;
            }
        }
        match &self.state {
            None => w.write_all(&[0])?,
            Some((s, it)) => {
                w.write_all(&[1])?;
                w.write_all(&s.base_rate.to_le_bytes())?;
                w.write_all(&s.head_rate.to_le_bytes())?;
                w.write_all(&s.decay_factor.to_le_bytes())?;
                w.write_all(&(s.decay_at_iterations.len() as u32).to_le_bytes())?;
                for d in &s.decay_at_iterations {
                    w.write_all(&d.to_le_bytes())?;
                }
                w.write_all(&s.stop_at_iteration.to_le_bytes())?;
                w.write_all(&it.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parameters are written into a copy of `template`; the stored
    /// architecture text must match the template's exactly.
    pub fn read_into<R: Read>(r: R, template: &Network<f32>) -> Result<Self> {
        let mut r = Reader { inner: r };
        if &r.bytes::<8>()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        if len > 1 << 20 {
            return Err(bad("implausible architecture block"));
        }
        let mut text = vec![0u8; len];
        r.inner
            .read_exact(&mut text)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        let text = String::from_utf8(text).map_err(|_| bad("architecture block is not UTF-8"))?;
        let expected = template.architecture();
        if text != expected {
            return Err(bad(format!(
                "architecture mismatch:\n--- checkpoint\n{text}--- expected\n{expected}"
            )));
        }
        let mut net = template.clone();
        let n = r.u32()? as usize;
        if n != net.layers().len() {
            return Err(bad("layer count mismatch"));
        }
        let names: Vec<String> = net.layer_names().into_iter().map(String::from).collect();
        for (li, name) in names.iter().enumerate() {
            let lr = r.f64()?;
            let frozen = r.u8()? != 0;
            let tensors = r.u32()?;
            let (nw, nb) = {
                let l = &net.layers()[li];
                (l.weights.len(), l.bias.len())
            };
            if tensors == 2 {
                let w = r.tensor(nw)?;
                let b = r.tensor(nb)?;
                let (pw, pb) = net.params_mut(name)?;
                *pw = w;
                *pb = b;
            } else if tensors != 0 || nw + nb > 0 {
                return Err(bad(format!(
                    "layer {name}: unexpected tensor count {tensors}"
                )));
            }
            net.set_lr_multiplier(name, lr)
                .map_err(|e| bad(e.to_string()))?;
            net.layers[li].spec.frozen = frozen;
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let base = r.f64()?;
                let head = r.f64()?;
                let decay = r.f64()?;
                let nd = r.u32()? as usize;
                if nd > 1 << 16 {
                    return Err(bad("implausible decay list"));
                }
                let mut points = Vec::with_capacity(nd);
                for _ in 0..nd {
                    points.push(r.u64()?);
                }
                let stop = r.u64()?;
                let it = r.u64()?;
                let s = LearningSchedule::new(base, head, decay, points, stop)
                    .map_err(|e| bad(e.to_string()))?;
                Some((s, it))
            }
            other => return Err(bad(format!("bad state flag {other}"))),
        };
        let mut rest = [0u8; 1];
        if r.inner.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Ok(Self {
            network: net,
            state,
        })
    }

    /// Rebuild the network from the architecture text alone.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut all = Vec::new();
        r.read_to_end(&mut all).map_err(|e| bad(e.to_string()))?;
        if all.len() < 16 || &all[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u32::from_le_bytes([all[12], all[13], all[14], all[15]]) as usize;
        let text = all
            .get(16..16 + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("unreadable architecture block"))?;
        let template = parse_architecture(text)?;
        Self::read_into(all.as_slice(), &template)
    }
}

fn parse_architecture(text: &str) -> Result<Network<f32>> {
    use super::{LayerKind, LayerSpec, Shape};
    let mut lines = text.lines();
    let input = lines
        .next()
        .and_then(|l| l.strip_prefix("input "))
        .ok_or_else(|| bad("architecture lacks an input line"))?;
    let dims: Vec<usize> = input
        .split('x')
        .map(|v| v.parse().map_err(|_| bad("bad input shape")))
        .collect::<Result<_>>()?;
    let [c, h, w] = dims[..] else {
        return Err(bad("bad input shape"));
    };
    let mut specs = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(|| bad("empty layer line"))?;
        let name = parts.next().ok_or_else(|| bad("layer without a name"))?;
        let kv: std::collections::BTreeMap<&str, usize> = parts
            .map(|p| {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad field {p}")))?;
                Ok((k, v.parse().map_err(|_| bad(format!("bad value in {p}")))?))
            })
            .collect::<Result<_>>()?;
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(format!("layer {name} lacks {k}")))
        };
        let kind = match kind {
            "conv" => LayerKind::Conv {
                filters: get("filters")?,
                kernel: get("kernel")?,
                stride: get("stride")?,
                pad: get("pad")?,
            },
            "maxpool" => LayerKind::MaxPool {
                size: get("size")?,
                stride: get("stride")?,
            },
            "relu" => LayerKind::Relu,
            "fc" => LayerKind::FullyConnected {
                units: get("units")?,
            },
            "softmax" => LayerKind::Softmax,
            other => return Err(bad(format!("unknown layer kind {other}"))),
        };
        specs.push(LayerSpec::new(name, kind));
    }
    Network::shaped(Shape::new(c, h, w), specs).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(
    path: &Path,
    network: &Network<f32>,
    state: Option<(&LearningSchedule, u64)>,
) -> Result<()> {
    let ck = Checkpoint {
        network: network.clone(),
        state: state.map(|(s, i)| (s.clone(), i)),
    };
    let mut buf = Vec::new();
    ck.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; with `template`, reject any architecture mismatch.
pub fn load_checkpoint(path: &Path, template: Option<&Network<f32>>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match template {
        Some(t) => Checkpoint::read_into(bytes.as_slice(), t),
        None => Checkpoint::read(bytes.as_slice()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use crate::seed;

    #[test]
    fn round_trip_is_exact() {
        let mut net: Network<f32> = ArchConfig::default().build(7, &mut seed::rng(1)).unwrap();
        net.set_freeze(&["conv1"]).unwrap();
        net.set_lr_multiplier("fc6", 0.5).unwrap();
        let sched = LearningSchedule::paper_recipe(400);
        let ck = Checkpoint {
            network: net.clone(),
            state: Some((sched.clone(), 123)),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back.network.layers(), net.layers());
        assert_eq!(back.state, Some((sched, 123)));
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        let into = Checkpoint::read_into(buf.as_slice(), &net).unwrap();
        assert_eq!(into.network.layers(), net.layers());
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let net: Network<f32> = ArchConfig::default().build(7, &mut seed::rng(1)).unwrap();
        let other: Network<f32> = ArchConfig::default().build(8, &mut seed::rng(1)).unwrap();
        let mut buf = Vec::new();
        Checkpoint {
            network: net,
            state: None,
        }
        .write_to(&mut buf)
        .unwrap();
        assert!(matches!(
            Checkpoint::read_into(buf.as_slice(), &other),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::read(&buf[..buf.len() - 3]).is_err());
        assert!(Checkpoint::read(&b"nonsense"[..]).is_err());
    }
}
