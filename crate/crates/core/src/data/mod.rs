//! City grids, urban image time series, normalization and windowing.

mod csv_ingest;
mod io;

pub use csv_ingest::ingest_csv;
pub use io::{load_dataset, read_tensor, save_dataset, write_tensor, MANIFEST_FILE};

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Tensor;

pub const INFLOW: &str = "inflow";
pub const OUTFLOW: &str = "outflow";
/// Channel label of auxiliary (check-in-like) series.
pub const AUXILIARY: &str = "aux";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: bad magic bytes, not a UITS tensor file")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: truncated file (needed {needed} bytes, found {found})")]
    Truncated { path: PathBuf, needed: usize, found: usize },
    #[error("{path}: {extra} trailing bytes after tensor data")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: expected rank {expected}, found {found}")]
    RankMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: expected dimensions {expected:?}, found {found:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("empty timestamp range")]
    EmptyTimestamps,
    #[error("channel '{0}' is constant and cannot be normalized")]
    ConstantChannel(String),
    #[error("no normalization statistics for channel '{0}'")]
    MissingStats(String),
    #[error("timestamp window [{first}, {last}] outside series range [{start}, {end}]")]
    OutOfRange {
        first: i64,
        last: i64,
        start: i64,
        end: i64,
    },
    #[error("invalid grid {width}x{height}")]
    InvalidGrid { width: usize, height: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Tensor(#[from] crate::autodiff::AutodiffError),
}

/// A `W × H` partition of a city into equal-size regions.
///
/// Region `[i, j]` has `0 ≤ i < W`, `0 ≤ j < H` and linear index `j·W + i`.
/// Tensors store regions row-major as `[.., W, H, ..]`, i.e. at position
/// `i·H + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionGrid {
    width: usize,
    height: usize,
}

impl RegionGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidGrid { width, height });
        }
        Ok(RegionGrid { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn regions(&self) -> usize {
        self.width * self.height
    }

    pub fn linear_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.width && j < self.height);
        j * self.width + i
    }

    pub fn coords(&self, linear: usize) -> (usize, usize) {
        (linear % self.width, linear / self.width)
    }

    /// Offset of region `[i, j]` within a `[W, H, ..]` tensor.
    pub fn position(&self, i: usize, j: usize) -> usize {
        i * self.height + j
    }

    /// Regions in linear-index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.regions()).map(|l| self.coords(l))
    }
}

/// Per-region values over a contiguous range of integer timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct UrbanImageTimeSeries {
    grid: RegionGrid,
    t_start: i64,
    frames: Tensor,
    channel: String,
}

impl UrbanImageTimeSeries {
    /// `frames` must be `[T, W, H]`.
    pub fn new(grid: RegionGrid, t_start: i64, frames: Tensor, channel: impl Into<String>) -> Result<Self, DataError> {
        let s = frames.shape();
        if s.len() != 3 {
            return Err(DataError::RankMismatch {
                path: PathBuf::new(),
                expected: 3,
                found: s.len(),
            });
        }
        if s[1] != grid.width() || s[2] != grid.height() {
            return Err(DataError::DimensionMismatch {
                path: PathBuf::new(),
                expected: vec![s[0], grid.width(), grid.height()],
                found: s.to_vec(),
            });
        }
        Ok(UrbanImageTimeSeries {
            grid,
            t_start,
            frames,
            channel: channel.into(),
        })
    }

    pub fn grid(&self) -> RegionGrid {
        self.grid
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_start(&self) -> i64 {
        self.t_start
    }

    pub fn t_end(&self) -> i64 {
        self.t_start + self.len() as i64 - 1
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.t_start && t <= self.t_end()
    }

    fn index_of(&self, t: i64) -> usize {
        (t - self.t_start) as usize
    }

    pub fn frame(&self, t: i64) -> Result<&[f64], DataError> {
        self.check_range(t, t)?;
        let n = self.grid.regions();
        let idx = self.index_of(t);
        Ok(&self.frames.data()[idx * n..(idx + 1) * n])
    }

    pub fn value(&self, t: i64, i: usize, j: usize) -> f64 {
        let n = self.grid.regions();
        self.frames.data()[self.index_of(t) * n + self.grid.position(i, j)]
    }

    /// Values of region `[i, j]` at timestamps `first..=last`.
    pub fn region_series(&self, i: usize, j: usize, first: i64, last: i64) -> Result<Vec<f64>, DataError> {
        self.check_range(first, last)?;
        Ok((first..=last).map(|t| self.value(t, i, j)).collect())
    }

    fn check_range(&self, first: i64, last: i64) -> Result<(), DataError> {
        if first < self.t_start || last > self.t_end() || first > last {
            return Err(DataError::OutOfRange {
                first,
                last,
                start: self.t_start,
                end: self.t_end(),
            });
        }
        Ok(())
    }

    /// Input frames `t-k+1..=t` as `[k, W, H]` and the frame at `t+1` as `[W, H]`.
    pub fn window(&self, k: usize, t: i64) -> Result<(Tensor, Tensor), DataError> {
        if k == 0 {
            return Err(DataError::OutOfRange {
                first: t + 1,
                last: t + 1,
                start: self.t_start,
                end: self.t_end(),
            });
        }
        let first = t - k as i64 + 1;
        self.check_range(first, t + 1)?;
        let n = self.grid.regions();
        let i0 = self.index_of(first);
        let (w, h) = (self.grid.width(), self.grid.height());
        let x = Tensor::new(vec![k, w, h], self.frames.data()[i0 * n..(i0 + k) * n].to_vec())?;
        let y = Tensor::new(vec![w, h], self.frames.data()[(i0 + k) * n..(i0 + k + 1) * n].to_vec())?;
        Ok((x, y))
    }

    /// Timestamps `t` for which [`window`](Self::window) succeeds; `T - k` of them.
    pub fn window_timestamps(&self, k: usize) -> Vec<i64> {
        if k == 0 || self.len() <= k {
            return Vec::new();
        }
        (self.t_start + k as i64 - 1..self.t_end()).collect()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        UrbanImageTimeSeries {
            frames: self.frames.map(f),
            ..self.clone()
        }
    }
}

/// Per-channel raw-unit minimum and maximum used for min-max scaling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    channels: Vec<(String, f64, f64)>,
}

impl NormStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, channel: &str, min: f64, max: f64) {
        match self.channels.iter_mut().find(|(c, _, _)| c == channel) {
            Some(entry) => {
                entry.1 = min;
                entry.2 = max;
            }
            None => self.channels.push((channel.to_string(), min, max)),
        }
    }

    pub fn get(&self, channel: &str) -> Option<(f64, f64)> {
        self.channels
            .iter()
            .find(|(c, _, _)| c == channel)
            .map(|&(_, lo, hi)| (lo, hi))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64, f64)> {
        self.channels.iter().map(|(c, lo, hi)| (c.as_str(), *lo, *hi))
    }

    /// Observed extrema of each series.
    pub fn from_series<'a>(series: impl IntoIterator<Item = &'a UrbanImageTimeSeries>) -> Self {
        let mut stats = NormStats::new();
        for s in series {
            let lo = s.frames().data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.frames().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            stats.insert(s.channel(), lo, hi);
        }
        stats
    }

    /// Channels whose max equals their min.
    pub fn constant_channels(&self) -> Vec<&str> {
        self.channels
            .iter()
            .filter(|(_, lo, hi)| hi <= lo)
            .map(|(c, _, _)| c.as_str())
            .collect()
    }

    fn range(&self, channel: &str) -> Result<(f64, f64), DataError> {
        let (lo, hi) = self
            .get(channel)
            .ok_or_else(|| DataError::MissingStats(channel.to_string()))?;
        if !(hi > lo) {
            return Err(DataError::ConstantChannel(channel.to_string()));
        }
        Ok((lo, hi))
    }

    pub fn normalize_value(&self, channel: &str, x: f64) -> Result<f64, DataError> {
        let (lo, hi) = self.range(channel)?;
        Ok((x - lo) / (hi - lo))
    }

    pub fn denormalize_value(&self, channel: &str, x: f64) -> Result<f64, DataError> {
        let (lo, hi) = self.range(channel)?;
        Ok(x * (hi - lo) + lo)
    }
}

/// Maps raw values into `[0, 1]` with `(x - min) / (max - min)`.
pub fn normalize(series: &UrbanImageTimeSeries, stats: &NormStats) -> Result<UrbanImageTimeSeries, DataError> {
    let (lo, hi) = stats.range(series.channel())?;
    let span = hi - lo;
    Ok(series.map_values(|x| (x - lo) / span))
}

pub fn denormalize(series: &UrbanImageTimeSeries, stats: &NormStats) -> Result<UrbanImageTimeSeries, DataError> {
    let (lo, hi) = stats.range(series.channel())?;
    let span = hi - lo;
    Ok(series.map_values(|x| x * span + lo))
}

/// Everything known about one city: service channels, optional auxiliary
/// series, citywide external features and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CityDataset {
    pub name: String,
    pub service: Vec<UrbanImageTimeSeries>,
    pub auxiliary: Option<UrbanImageTimeSeries>,
    /// `[T, L_e]`, one row per service timestamp; `None` when `L_e = 0`.
    pub external: Option<Tensor>,
    pub norm: NormStats,
}

impl CityDataset {
    pub fn new(
        name: impl Into<String>,
        service: Vec<UrbanImageTimeSeries>,
        auxiliary: Option<UrbanImageTimeSeries>,
        external: Option<Tensor>,
        norm: NormStats,
    ) -> Result<Self, DataError> {
        let ds = CityDataset {
            name: name.into(),
            service,
            auxiliary,
            external,
            norm,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let first = self
            .service
            .first()
            .ok_or_else(|| DataError::Inconsistent("no service channels".into()))?;
        if first.is_empty() {
            return Err(DataError::EmptyTimestamps);
        }
        for s in &self.service[1..] {
            if s.grid() != first.grid() || s.t_start() != first.t_start() || s.len() != first.len() {
                return Err(DataError::Inconsistent(format!(
                    "channel '{}' does not share grid/timestamps with '{}'",
                    s.channel(),
                    first.channel()
                )));
            }
        }
        let mut names: Vec<&str> = self.service.iter().map(|s| s.channel()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Inconsistent("duplicate channel name".into()));
        }
        if let Some(aux) = &self.auxiliary {
            if aux.grid() != first.grid() {
                return Err(DataError::Inconsistent(
                    "auxiliary grid differs from service grid".into(),
                ));
            }
            if aux.len() < first.len() {
                return Err(DataError::Inconsistent(format!(
                    "auxiliary range ({}) shorter than service range ({})",
                    aux.len(),
                    first.len()
                )));
            }
        }
        if let Some(ext) = &self.external {
            if ext.rank() != 2 || ext.shape()[0] != first.len() {
                return Err(DataError::Inconsistent(format!(
                    "external features {:?} do not cover {} timestamps",
                    ext.shape(),
                    first.len()
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> RegionGrid {
        self.service[0].grid()
    }

    pub fn t_start(&self) -> i64 {
        self.service[0].t_start()
    }

    pub fn t_end(&self) -> i64 {
        self.service[0].t_end()
    }

    pub fn len(&self) -> usize {
        self.service[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> Vec<&str> {
        self.service.iter().map(|s| s.channel()).collect()
    }

    pub fn channel(&self, name: &str) -> Option<&UrbanImageTimeSeries> {
        self.service.iter().find(|s| s.channel() == name)
    }

    pub fn ext_len(&self) -> usize {
        self.external.as_ref().map_or(0, |e| e.shape()[1])
    }

    /// External feature row for timestamp `t`.
    pub fn external_at(&self, t: i64) -> Result<Vec<f64>, DataError> {
        match &self.external {
            None => Ok(Vec::new()),
            Some(ext) => {
                if t < self.t_start() || t > self.t_end() {
                    return Err(DataError::OutOfRange {
                        first: t,
                        last: t,
                        start: self.t_start(),
                        end: self.t_end(),
                    });
                }
                let l = ext.shape()[1];
                let idx = (t - self.t_start()) as usize;
                Ok(ext.data()[idx * l..(idx + 1) * l].to_vec())
            }
        }
    }

    /// Per-region concatenation of all service channels over `first..=last`,
    /// channel-major.
    pub fn service_series(&self, i: usize, j: usize, first: i64, last: i64) -> Result<Vec<f64>, DataError> {
        let mut out = Vec::new();
        for s in &self.service {
            out.extend(s.region_series(i, j, first, last)?);
        }
        Ok(out)
    }

    pub fn with_norm(mut self, norm: NormStats) -> Self {
        self.norm = norm;
        self
    }

    /// Model-ready samples: every valid window, normalized with `stats`.
    pub fn samples(&self, stats: &NormStats, k: usize) -> Result<Vec<Sample>, DataError> {
        let normalized: Vec<UrbanImageTimeSeries> = self
            .service
            .iter()
            .map(|s| normalize(s, stats))
            .collect::<Result<_, _>>()?;
        self.service[0]
            .window_timestamps(k)
            .into_iter()
            .map(|t| Sample::build(&normalized, self, k, t))
            .collect()
    }

    /// The sample whose input ends at `t`.
    pub fn sample_at(&self, stats: &NormStats, k: usize, t: i64) -> Result<Sample, DataError> {
        let normalized: Vec<UrbanImageTimeSeries> = self
            .service
            .iter()
            .map(|s| normalize(s, stats))
            .collect::<Result<_, _>>()?;
        Sample::build(&normalized, self, k, t)
    }
}

/// One training/evaluation example with channels stacked last.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Timestamp of the last input frame.
    pub t: i64,
    /// `[k, W, H, C]`.
    pub input: Tensor,
    /// `[W, H, C]`, the frame at `t + 1`.
    pub target: Tensor,
    /// External features of the predicted timestamp `t + 1`.
    pub external: Vec<f64>,
}

impl Sample {
    fn build(channels: &[UrbanImageTimeSeries], ds: &CityDataset, k: usize, t: i64) -> Result<Sample, DataError> {
        let c = channels.len();
        let grid = channels[0].grid();
        let n = grid.regions();
        let mut input = vec![0.0; k * n * c];
        let mut target = vec![0.0; n * c];
        for (ci, s) in channels.iter().enumerate() {
            let (x, y) = s.window(k, t)?;
            for (idx, &v) in x.data().iter().enumerate() {
                input[idx * c + ci] = v;
            }
            for (idx, &v) in y.data().iter().enumerate() {
                target[idx * c + ci] = v;
            }
        }
        Ok(Sample {
            t,
            input: Tensor::new(vec![k, grid.width(), grid.height(), c], input)?,
            target: Tensor::new(vec![grid.width(), grid.height(), c], target)?,
            external: ds.external_at(t + 1)?,
        })
    }
}
