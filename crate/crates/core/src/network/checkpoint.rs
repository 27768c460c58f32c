//! `RTPK` parameter checkpoints.
//!
//! Layout: the bytes `RTPK`, a version byte, a little-endian `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` `u32` dimensions and the row-major `f64` values, all little-endian.

use std::fs;
use std::path::Path;

use super::{ConvLstmLayerParams, HeadLayer, NetworkError, NetworkParams};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"RTPK";
const VERSION: u8 = 0x01;

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.at + n > self.bytes.len() {
            return Err(NetworkError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn parse_name(name: &str) -> Option<(bool, usize, &str)> {
    let (prefix, field) = name.split_once('.')?;
    if let Some(idx) = prefix.strip_prefix("layer") {
        Some((true, idx.parse().ok()?, field))
    } else {
        let idx = prefix.strip_prefix("head")?;
        Some((false, idx.parse().ok()?, field))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams, NetworkError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(NetworkError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut layers: Vec<[Option<Tensor>; 3]> = Vec::new();
    let mut head: Vec<[Option<Tensor>; 2]> = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NetworkError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        let unknown = || NetworkError::Checkpoint(format!("unknown tensor name '{name}'"));
        let (is_layer, idx, field) = parse_name(&name).ok_or_else(unknown)?;
        let slot = if is_layer {
            if layers.len() <= idx {
                layers.resize_with(idx + 1, Default::default);
            }
            let f = match field {
                "kernel" => 0,
                "hidden_kernel" => 1,
                "bias" => 2,
                _ => return Err(unknown()),
            };
            &mut layers[idx][f]
        } else {
            if head.len() <= idx {
                head.resize_with(idx + 1, Default::default);
            }
            let f = match field {
                "kernel" => 0,
                "bias" => 1,
                _ => return Err(unknown()),
            };
            &mut head[idx][f]
        };
        if slot.replace(tensor).is_some() {
            return Err(NetworkError::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    if r.at != bytes.len() {
        return Err(NetworkError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    let missing = |what: String| NetworkError::Checkpoint(format!("missing tensor {what}"));
    let layers = layers
        .into_iter()
        .enumerate()
        .map(|(i, [k, hk, b])| {
            Ok(ConvLstmLayerParams {
                kernel: k.ok_or_else(|| missing(format!("layer{i}.kernel")))?,
                hidden_kernel: hk.ok_or_else(|| missing(format!("layer{i}.hidden_kernel")))?,
                bias: b.ok_or_else(|| missing(format!("layer{i}.bias")))?,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let head = head
        .into_iter()
        .enumerate()
        .map(|(i, [k, b])| {
            Ok(HeadLayer {
                kernel: k.ok_or_else(|| missing(format!("head{i}.kernel")))?,
                bias: b.ok_or_else(|| missing(format!("head{i}.bias")))?,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let params = NetworkParams { layers, head };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<(), NetworkError> {
    fs::write(path, encode_checkpoint(params)).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, NetworkError> {
    let bytes = fs::read(path).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkConfig};

    fn params() -> NetworkParams {
        let cfg = NetworkConfig {
            input_channels: 2,
            hidden_channels: vec![2, 3],
            kernel_size: 3,
            head_hidden: 4,
            output_channels: 2,
            ext_len: 2,
        };
        init_params(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn header_and_first_name() {
        let bytes = encode_checkpoint(&params());
        assert_eq!(&bytes[..5], b"RTPK\x01");
        assert_eq!(&bytes[5..9], &10u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &13u32.to_le_bytes());
        assert_eq!(&bytes[13..26], b"layer0.kernel");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_checkpoint(&params());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes.clone();
        long.push(1);
        assert!(decode_checkpoint(&long).is_err());
        let renamed = {
            let mut b = bytes.clone();
            b[13..18].copy_from_slice(b"lay3r");
            b
        };
        assert!(decode_checkpoint(&renamed).is_err());
    }
}
