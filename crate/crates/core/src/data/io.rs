//! On-disk dataset directories.
//!
//! A dataset directory holds a plain-text `manifest` of `key: value` lines and
//! one UITS tensor file per channel. UITS layout: the bytes `UITS`, a version
//! byte (`0x01`), a little-endian `u32` rank, `rank` little-endian `u32`
//! dimensions, then the values as row-major little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{CityDataset, DataError, NormStats, RegionGrid, UrbanImageTimeSeries, AUXILIARY as AUX_CHANNEL};
use crate::autodiff::Tensor;

pub const MANIFEST_FILE: &str = "manifest";
const MAGIC: &[u8; 4] = b"UITS";
const VERSION: u8 = 0x01;
const AUX_FILE: &str = "aux.uits";
const EXTERNAL_FILE: &str = "external.uits";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor, DataError> {
    let truncated = |needed: usize| DataError::Truncated {
        path: path.to_path_buf(),
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 9 {
        return Err(truncated(9));
    }
    if bytes[4] != VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.to_path_buf(),
            version: bytes[4],
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rank = read_u32(5);
    let header = 9 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..rank).map(|i| read_u32(9 + 4 * i)).collect();
    let count: usize = shape.iter().product();
    let needed = header + 8 * count;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - needed,
        });
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), DataError> {
    fs::write(path, encode_tensor(t)).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes, path)
}

fn read_checked(path: &Path, expected: &[usize]) -> Result<Tensor, DataError> {
    let t = read_tensor(path)?;
    if t.rank() != expected.len() {
        return Err(DataError::RankMismatch {
            path: path.to_path_buf(),
            expected: expected.len(),
            found: t.rank(),
        });
    }
    if t.shape() != expected {
        return Err(DataError::DimensionMismatch {
            path: path.to_path_buf(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

fn valid_channel_name(name: &str) -> bool {
    !name.is_empty()
        && name != AUX_CHANNEL
        && name != "external"
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

fn render_manifest(ds: &CityDataset) -> String {
    let grid = ds.grid();
    let mut lines = vec![
        format!("city: {}", ds.name),
        format!("width: {}", grid.width()),
        format!("height: {}", grid.height()),
        format!("t_start: {}", ds.t_start()),
        format!("t_count: {}", ds.len()),
        format!("channels: {}", ds.channels().join(",")),
        format!("aux_present: {}", ds.auxiliary.is_some()),
    ];
    if let Some(aux) = &ds.auxiliary {
        lines.push(format!("aux_t_start: {}", aux.t_start()));
        lines.push(format!("aux_t_count: {}", aux.len()));
    }
    lines.push(format!("ext_len: {}", ds.ext_len()));
    for ch in ds.channels() {
        let (lo, hi) = ds.norm.get(ch).expect("checked by save_dataset");
        lines.push(format!("norm_min.{ch}: {lo}"));
        lines.push(format!("norm_max.{ch}: {hi}"));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn save_dataset(ds: &CityDataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    for ch in ds.channels() {
        if !valid_channel_name(ch) {
            return Err(DataError::Manifest(format!(
                "channel name '{ch}' is not a valid file stem"
            )));
        }
        if ds.norm.get(ch).is_none() {
            return Err(DataError::MissingStats(ch.to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, render_manifest(ds)).map_err(io_err(&manifest))?;
    for s in &ds.service {
        write_tensor(&dir.join(format!("{}.uits", s.channel())), s.frames())?;
    }
    if let Some(aux) = &ds.auxiliary {
        write_tensor(&dir.join(AUX_FILE), aux.frames())?;
    }
    if let Some(ext) = &ds.external {
        write_tensor(&dir.join(EXTERNAL_FILE), ext)?;
    }
    Ok(())
}

struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self, DataError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| DataError::Manifest(format!("line {}: expected 'key: value'", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(DataError::Manifest(format!("duplicate key '{key}'")));
            }
        }
        Ok(Manifest { entries })
    }

    fn take(&mut self, key: &str) -> Result<String, DataError> {
        self.entries
            .remove(key)
            .ok_or_else(|| DataError::Manifest(format!("missing key '{key}'")))
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, DataError> {
        let raw = self.take(key)?;
        raw.parse()
            .map_err(|_| DataError::Manifest(format!("key '{key}': cannot parse '{raw}'")))
    }
}

pub fn load_dataset(dir: &Path) -> Result<CityDataset, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut m = Manifest::parse(&text)?;

    let city = m.take("city")?;
    let width: usize = m.take_parsed("width")?;
    let height: usize = m.take_parsed("height")?;
    let t_start: i64 = m.take_parsed("t_start")?;
    let t_count: usize = m.take_parsed("t_count")?;
    if t_count == 0 {
        return Err(DataError::EmptyTimestamps);
    }
    let grid = RegionGrid::new(width, height)?;
    let channels: Vec<String> = m.take("channels")?.split(',').map(|c| c.trim().to_string()).collect();
    if channels.iter().any(|c| !valid_channel_name(c)) {
        return Err(DataError::Manifest("invalid channel list".into()));
    }
    let aux_present: bool = m.take_parsed("aux_present")?;
    let aux_range = if aux_present {
        let start: i64 = m.take_parsed("aux_t_start")?;
        let count: usize = m.take_parsed("aux_t_count")?;
        if count == 0 {
            return Err(DataError::EmptyTimestamps);
        }
        Some((start, count))
    } else {
        None
    };
    let ext_len: usize = m.take_parsed("ext_len")?;

    let mut norm = NormStats::new();
    for ch in &channels {
        let lo: f64 = m.take_parsed(&format!("norm_min.{ch}"))?;
        let hi: f64 = m.take_parsed(&format!("norm_max.{ch}"))?;
        norm.insert(ch, lo, hi);
    }
    if let Some(extra) = m.entries.keys().next() {
        return Err(DataError::Manifest(format!("unknown key '{extra}'")));
    }

    let service = channels
        .iter()
        .map(|ch| {
            let path = dir.join(format!("{ch}.uits"));
            let frames = read_checked(&path, &[t_count, width, height])?;
            UrbanImageTimeSeries::new(grid, t_start, frames, ch.clone())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let auxiliary = match aux_range {
        Some((start, count)) => {
            let frames = read_checked(&dir.join(AUX_FILE), &[count, width, height])?;
            Some(UrbanImageTimeSeries::new(grid, start, frames, AUX_CHANNEL)?)
        }
        None => None,
    };
    let external = if ext_len > 0 {
        Some(read_checked(&dir.join(EXTERNAL_FILE), &[t_count, ext_len])?)
    } else {
        None
    };
    CityDataset::new(city, service, auxiliary, external, norm)
}
