//! Inter-city region matching by maximum Pearson correlation.
//!
//! Each target region is paired with the source region whose series it
//! correlates with most strongly. Service matching uses the target's short
//! service history (inflow and outflow concatenated per region); auxiliary
//! matching uses the longer auxiliary series both cities share.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::{CityDataset, DataError, RegionGrid};

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("pearson needs at least 2 values, got {0}")]
    TooShort(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("source range [{source_start}, {source_end}] does not cover target range [{target_start}, {target_end}]")]
    NoOverlap {
        target_start: i64,
        target_end: i64,
        source_start: i64,
        source_end: i64,
    },
    #[error("auxiliary data missing in {0} city")]
    MissingAuxiliary(&'static str),
    #[error("service channels differ: target {target:?}, source {source_channels:?}")]
    ChannelMismatch {
        target: Vec<String>,
        source_channels: Vec<String>,
    },
    #[error("target region [{0},{1}] has no match")]
    MissingRegion(usize, usize),
    #[error("matching file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Pearson correlation coefficient.
///
/// Returns 0 when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MatchingError> {
    if x.len() != y.len() {
        return Err(MatchingError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MatchingError::TooShort(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSource {
    Service,
    Auxiliary,
}

impl fmt::Display for MatchSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchSource::Service => "service",
            MatchSource::Auxiliary => "aux",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMatch {
    pub target: (usize, usize),
    pub source: (usize, usize),
    /// Raw correlation in `[-1, 1]`.
    pub rho: f64,
}

impl RegionMatch {
    /// Weight of this pair in the representation loss; negative correlations
    /// contribute nothing.
    pub fn weight(&self) -> f64 {
        self.rho.max(0.0)
    }
}

/// Total mapping from target regions to source regions, one entry per target
/// region in linear-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMatching {
    pub target_grid: RegionGrid,
    pub source_grid: RegionGrid,
    pub provenance: MatchSource,
    entries: Vec<RegionMatch>,
}

impl RegionMatching {
    pub fn new(
        target_grid: RegionGrid,
        source_grid: RegionGrid,
        provenance: MatchSource,
        mut entries: Vec<RegionMatch>,
    ) -> Result<Self, MatchingError> {
        entries.sort_by_key(|e| target_grid.linear_index(e.target.0, e.target.1));
        for (l, (i, j)) in target_grid.iter().enumerate() {
            match entries.get(l) {
                Some(e) if e.target == (i, j) => {}
                _ => return Err(MatchingError::MissingRegion(i, j)),
            }
        }
        if entries.len() != target_grid.regions() {
            let extra = entries[target_grid.regions()].target;
            return Err(MatchingError::Parse {
                line: 0,
                message: format!("duplicate target region [{},{}]", extra.0, extra.1),
            });
        }
        for e in &entries {
            if e.source.0 >= source_grid.width() || e.source.1 >= source_grid.height() {
                return Err(MatchingError::Parse {
                    line: 0,
                    message: format!("source region [{},{}] outside source grid", e.source.0, e.source.1),
                });
            }
        }
        Ok(RegionMatching {
            target_grid,
            source_grid,
            provenance,
            entries,
        })
    }

    /// Maps every target region to the source region at the same coordinates.
    pub fn identity(grid: RegionGrid, rho: f64) -> Self {
        let entries = grid
            .iter()
            .map(|r| RegionMatch {
                target: r,
                source: r,
                rho,
            })
            .collect();
        RegionMatching {
            target_grid: grid,
            source_grid: grid,
            provenance: MatchSource::Service,
            entries,
        }
    }

    pub fn entries(&self) -> &[RegionMatch] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> &RegionMatch {
        &self.entries[self.target_grid.linear_index(i, j)]
    }

    /// For each target tensor position (`i·H + j`), the matched source tensor
    /// position and clamped weight.
    pub fn position_pairs(&self) -> (Vec<usize>, Vec<f64>) {
        let n = self.target_grid.regions();
        let mut rows = vec![0; n];
        let mut weights = vec![0.0; n];
        for e in &self.entries {
            let p = self.target_grid.position(e.target.0, e.target.1);
            rows[p] = self.source_grid.position(e.source.0, e.source.1);
            weights[p] = e.weight();
        }
        (rows, weights)
    }

    /// Plain-text form: `ti,tj -> si,sj rho=<value>` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{} -> {},{} rho={}\n",
                e.target.0, e.target.1, e.source.0, e.source.1, e.rho
            ));
        }
        out
    }

    pub fn from_text(
        text: &str,
        target_grid: RegionGrid,
        source_grid: RegionGrid,
        provenance: MatchSource,
    ) -> Result<Self, MatchingError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| MatchingError::Parse {
                line: line_no,
                message: message.to_string(),
            };
            let (lhs, rest) = line.split_once("->").ok_or_else(|| err("missing '->'"))?;
            let (rhs, rho) = rest.trim().split_once(" rho=").ok_or_else(|| err("missing 'rho='"))?;
            let pair = |s: &str| -> Result<(usize, usize), MatchingError> {
                let (a, b) = s.trim().split_once(',').ok_or_else(|| err("expected 'i,j'"))?;
                Ok((
                    a.trim().parse().map_err(|_| err("bad region index"))?,
                    b.trim().parse().map_err(|_| err("bad region index"))?,
                ))
            };
            let rho: f64 = rho.trim().parse().map_err(|_| err("bad rho"))?;
            if !(-1.0..=1.0).contains(&rho) {
                return Err(err("rho outside [-1, 1]"));
            }
            entries.push(RegionMatch {
                target: pair(lhs)?,
                source: pair(rhs)?,
                rho,
            });
        }
        RegionMatching::new(target_grid, source_grid, provenance, entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), MatchingError> {
        fs::write(path, self.to_text()).map_err(|source| MatchingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(
        path: &Path,
        target_grid: RegionGrid,
        source_grid: RegionGrid,
        provenance: MatchSource,
    ) -> Result<Self, MatchingError> {
        let text = fs::read_to_string(path).map_err(|source| MatchingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text, target_grid, source_grid, provenance)
    }
}

/// Argmax over candidate series; ties go to the lowest index.
fn best_match(target: &[f64], candidates: &[Vec<f64>]) -> Result<(usize, f64), MatchingError> {
    let mut best = (0, f64::NEG_INFINITY);
    for (idx, c) in candidates.iter().enumerate() {
        let rho = pearson(target, c)?;
        if rho > best.1 {
            best = (idx, rho);
        }
    }
    Ok(best)
}

fn match_series(
    target_grid: RegionGrid,
    source_grid: RegionGrid,
    provenance: MatchSource,
    target_series: impl Fn(usize, usize) -> Result<Vec<f64>, MatchingError>,
    source_series: impl Fn(usize, usize) -> Result<Vec<f64>, MatchingError>,
) -> Result<RegionMatching, MatchingError> {
    let candidates: Vec<Vec<f64>> = source_grid
        .iter()
        .map(|(i, j)| source_series(i, j))
        .collect::<Result<_, _>>()?;
    let mut entries = Vec::with_capacity(target_grid.regions());
    for (i, j) in target_grid.iter() {
        let (best, rho) = best_match(&target_series(i, j)?, &candidates)?;
        entries.push(RegionMatch {
            target: (i, j),
            source: source_grid.coords(best),
            rho,
        });
    }
    RegionMatching::new(target_grid, source_grid, provenance, entries)
}

/// Matches on service data over the target's full timestamp range, which the
/// source must cover.
pub fn match_service(target: &CityDataset, source: &CityDataset) -> Result<RegionMatching, MatchingError> {
    let (first, last) = (target.t_start(), target.t_end());
    if first < source.t_start() || last > source.t_end() {
        return Err(MatchingError::NoOverlap {
            target_start: first,
            target_end: last,
            source_start: source.t_start(),
            source_end: source.t_end(),
        });
    }
    if target.channels() != source.channels() {
        return Err(MatchingError::ChannelMismatch {
            target: target.channels().iter().map(|s| s.to_string()).collect(),
            source_channels: source.channels().iter().map(|s| s.to_string()).collect(),
        });
    }
    match_series(
        target.grid(),
        source.grid(),
        MatchSource::Service,
        |i, j| Ok(target.service_series(i, j, first, last)?),
        |i, j| Ok(source.service_series(i, j, first, last)?),
    )
}

/// Matches on auxiliary data over the range both cities' auxiliary series share.
pub fn match_auxiliary(target: &CityDataset, source: &CityDataset) -> Result<RegionMatching, MatchingError> {
    let ta = target
        .auxiliary
        .as_ref()
        .ok_or(MatchingError::MissingAuxiliary("target"))?;
    let sa = source
        .auxiliary
        .as_ref()
        .ok_or(MatchingError::MissingAuxiliary("source"))?;
    let first = ta.t_start().max(sa.t_start());
    let last = ta.t_end().min(sa.t_end());
    if last - first + 1 < target.len() as i64 {
        return Err(MatchingError::NoOverlap {
            target_start: ta.t_start(),
            target_end: ta.t_end(),
            source_start: sa.t_start(),
            source_end: sa.t_end(),
        });
    }
    match_series(
        target.grid(),
        source.grid(),
        MatchSource::Auxiliary,
        |i, j| Ok(ta.region_series(i, j, first, last)?),
        |i, j| Ok(sa.region_series(i, j, first, last)?),
    )
}

/// Largest amount by which any source region's correlation exceeds the
/// matched one; `0` when every match is a true argmax.
pub fn argmax_violation(
    matching: &RegionMatching,
    target_series: impl Fn(usize, usize) -> Vec<f64>,
    source_series: impl Fn(usize, usize) -> Vec<f64>,
) -> Result<f64, MatchingError> {
    let mut worst: f64 = 0.0;
    for e in matching.entries() {
        let t = target_series(e.target.0, e.target.1);
        let chosen = pearson(&t, &source_series(e.source.0, e.source.1))?;
        for (i, j) in matching.source_grid.iter() {
            let rho = pearson(&t, &source_series(i, j))?;
            worst = worst.max(rho - chosen);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::{NormStats, UrbanImageTimeSeries, AUXILIARY, INFLOW, OUTFLOW};

    #[test]
    fn pearson_hand_cases() {
        assert_eq!(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0);
        assert_eq!(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert_eq!(pearson(&[1., 2., 3.], &[1., 3., 2.]).unwrap(), 0.5);
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(MatchingError::TooShort(1))));
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(pearson(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    fn city(frames: Vec<f64>, w: usize, h: usize, t0: i64, aux: Option<(Vec<f64>, i64)>) -> CityDataset {
        let grid = RegionGrid::new(w, h).unwrap();
        let t = frames.len() / (w * h);
        let inflow =
            UrbanImageTimeSeries::new(grid, t0, Tensor::new(vec![t, w, h], frames.clone()).unwrap(), INFLOW).unwrap();
        let outflow = UrbanImageTimeSeries::new(
            grid,
            t0,
            Tensor::new(vec![t, w, h], frames.iter().map(|v| v * 0.5 + 1.0).collect()).unwrap(),
            OUTFLOW,
        )
        .unwrap();
        let aux = aux.map(|(vals, start)| {
            let ta = vals.len() / (w * h);
            UrbanImageTimeSeries::new(grid, start, Tensor::new(vec![ta, w, h], vals).unwrap(), AUXILIARY).unwrap()
        });
        let norm = NormStats::from_series([&inflow, &outflow]);
        CityDataset::new("c", vec![inflow, outflow], aux, None, norm).unwrap()
    }

    fn wave(t: usize, regions: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(t * regions);
        for ti in 0..t {
            for r in 0..regions {
                v.push(f(ti, r));
            }
        }
        v
    }

    #[test]
    fn self_match_has_unit_correlation() {
        let frames = wave(10, 4, |t, r| ((t * (r + 1)) as f64 * 0.7).sin() + r as f64);
        let c = city(frames, 2, 2, 0, None);
        let m = match_service(&c, &c).unwrap();
        for e in m.entries() {
            assert!((e.rho - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_source_region_takes_everything() {
        let src = city(wave(6, 1, |t, _| t as f64), 1, 1, 0, None);
        let tgt = city(wave(4, 6, |t, r| ((t + r) % 3) as f64), 3, 2, 1, None);
        let m = match_service(&tgt, &src).unwrap();
        assert!(m.entries().iter().all(|e| e.source == (0, 0)));
        assert_eq!(m.entries().len(), 6);
    }

    #[test]
    fn no_overlap_reports_both_ranges() {
        let src = city(wave(6, 1, |t, _| t as f64), 1, 1, 0, None);
        let tgt = city(wave(4, 1, |t, _| t as f64), 1, 1, 4, None);
        match match_service(&tgt, &src) {
            Err(MatchingError::NoOverlap {
                target_start: 4,
                target_end: 7,
                source_start: 0,
                source_end: 5,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auxiliary_required() {
        let c = city(wave(4, 1, |t, _| t as f64), 1, 1, 0, None);
        assert!(matches!(
            match_auxiliary(&c, &c),
            Err(MatchingError::MissingAuxiliary("target"))
        ));
    }

    #[test]
    fn constant_auxiliary_region_falls_back_to_index_zero() {
        let src_aux = wave(8, 4, |t, r| ((t * (r + 2)) as f64).cos() * (r + 1) as f64);
        let src = city(wave(4, 4, |t, r| (t + r) as f64), 2, 2, 4, Some((src_aux, 0)));
        let tgt_aux = wave(8, 4, |t, r| if r == 3 { 5.0 } else { ((t * (r + 2)) as f64).cos() });
        let tgt = city(wave(4, 4, |t, r| (t * r) as f64), 2, 2, 4, Some((tgt_aux, 0)));
        let m = match_auxiliary(&tgt, &src).unwrap();
        // linear index 3 is region (1,1); its tensor position is also 3 on a 2x2 grid
        let e = m.get(1, 1);
        assert_eq!(e.rho, 0.0);
        assert_eq!(e.source, (0, 0));
    }

    #[test]
    fn text_round_trip() {
        let grid = RegionGrid::new(2, 3).unwrap();
        let src = RegionGrid::new(4, 1).unwrap();
        let entries = grid
            .iter()
            .enumerate()
            .map(|(l, r)| RegionMatch {
                target: r,
                source: (l % 4, 0),
                rho: (l as f64 / 7.0) - 0.3,
            })
            .collect();
        let m = RegionMatching::new(grid, src, MatchSource::Service, entries).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("0,0 -> 0,0 rho=-0.3\n"));
        let back = RegionMatching::from_text(&text, grid, src, MatchSource::Service).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn incomplete_matching_rejected() {
        let grid = RegionGrid::new(2, 1).unwrap();
        let text = "0,0 -> 0,0 rho=1\n";
        assert!(matches!(
            RegionMatching::from_text(text, grid, grid, MatchSource::Service),
            Err(MatchingError::MissingRegion(1, 0))
        ));
    }

    #[test]
    fn negative_rho_weight_is_clamped() {
        let e = RegionMatch {
            target: (0, 0),
            source: (0, 0),
            rho: -0.4,
        };
        assert_eq!(e.weight(), 0.0);
    }
}
