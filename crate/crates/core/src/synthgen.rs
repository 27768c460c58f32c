//! Synthetic multi-city crowd flow with known region correspondences.
//!
//! Each region follows one archetype's diurnal profile, scaled by a per-region
//! amplitude and a weekday/weekend factor, plus additive Gaussian noise
//! clipped at zero. Auxiliary series re-express the same archetype with
//! independent noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{
    save_dataset, CityDataset, DataError, NormStats, RegionGrid, UrbanImageTimeSeries, AUXILIARY, INFLOW, OUTFLOW,
};
use crate::matching::RegionMatching;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario field '{field}': {reason}")]
    Field { field: &'static str, reason: String },
    #[error("unknown scenario '{0}'")]
    Unknown(String),
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn field(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::Field {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub id: usize,
    pub name: &'static str,
    pub inflow: [f64; 24],
    pub outflow: [f64; 24],
    pub weekday: f64,
    pub weekend: f64,
    pub amplitude: (f64, f64),
}

impl Archetype {
    /// Check-in-like proxy: mostly arrivals, partly departures.
    pub fn auxiliary(&self) -> [f64; 24] {
        std::array::from_fn(|h| 0.7 * self.inflow[h] + 0.3 * self.outflow[h])
    }

    pub fn modulation(&self, t: i64) -> f64 {
        if is_weekday(t) {
            self.weekday
        } else {
            self.weekend
        }
    }
}

fn bumps(base: f64, peaks: &[(f64, f64, f64)]) -> [f64; 24] {
    std::array::from_fn(|h| {
        let h = h as f64;
        base + peaks
            .iter()
            .map(|&(height, mu, s)| height * (-(h - mu).powi(2) / (2.0 * s * s)).exp())
            .sum::<f64>()
    })
}

fn blend(parts: &[(f64, [f64; 24])], base: f64) -> [f64; 24] {
    std::array::from_fn(|h| base + parts.iter().map(|(w, p)| w * p[h]).sum::<f64>())
}

// Residential share of the mixed blend, and its extra midday bump.
const MIX_A: f64 = 0.6;
const MIX_MIDDAY: f64 = 6.0;
// Low-activity regions: a damped commuter average over a flat floor.
const LOW_A: f64 = 0.2;
const LOW_BASE: f64 = 2.0;

/// Residential, business, mixed and low-activity archetypes, ids 0 to 3.
///
/// Mixed and low-activity regions blend the two commuter profiles, so one
/// noisy day separates them less reliably than a long history does.
pub fn archetypes() -> Vec<Archetype> {
    let res_in = bumps(4.0, &[(30.0, 18.5, 1.5), (6.0, 12.0, 2.0)]);
    let res_out = bumps(4.0, &[(32.0, 8.0, 1.2), (5.0, 13.0, 2.0)]);
    let bus_in = bumps(3.0, &[(36.0, 8.5, 1.0), (8.0, 13.0, 1.0)]);
    let bus_out = bumps(3.0, &[(34.0, 17.5, 1.2), (8.0, 12.0, 1.0)]);
    let midday = bumps(0.0, &[(MIX_MIDDAY, 13.5, 2.5)]);
    vec![
        Archetype {
            id: 0,
            name: "residential",
            inflow: res_in,
            outflow: res_out,
            weekday: 1.0,
            weekend: 0.7,
            amplitude: (0.95, 1.05),
        },
        Archetype {
            id: 1,
            name: "business",
            inflow: bus_in,
            outflow: bus_out,
            weekday: 1.0,
            weekend: 0.3,
            amplitude: (0.95, 1.05),
        },
        Archetype {
            id: 2,
            name: "mixed",
            inflow: blend(&[(MIX_A, res_in), (1.0 - MIX_A, bus_in), (1.0, midday)], 0.0),
            outflow: blend(&[(MIX_A, res_out), (1.0 - MIX_A, bus_out), (1.0, midday)], 0.0),
            weekday: 1.0,
            weekend: 0.8,
            amplitude: (0.95, 1.05),
        },
        Archetype {
            id: 3,
            name: "low-activity",
            inflow: blend(&[(LOW_A * 0.5, res_in), (LOW_A * 0.5, bus_in)], LOW_BASE),
            outflow: blend(&[(LOW_A * 0.5, res_out), (LOW_A * 0.5, bus_out)], LOW_BASE),
            weekday: 1.0,
            weekend: 0.9,
            amplitude: (0.95, 1.05),
        },
    ]
}

/// Days 0 to 4 of every week are weekdays.
pub fn is_weekday(t: i64) -> bool {
    t.div_euclid(24).rem_euclid(7) < 5
}

/// Hour-of-day and day-type encoding padded with zeros to `len`.
///
/// With `len ≥ 26` the encoding is a 24-way hour one-hot followed by a
/// weekday/weekend one-hot; for `3 ≤ len < 26` it is `sin`/`cos` of the hour
/// and a weekday flag.
pub fn external_features(t: i64, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    let hour = t.rem_euclid(24) as usize;
    let weekday = is_weekday(t);
    if len >= 26 {
        v[hour] = 1.0;
        v[if weekday { 24 } else { 25 }] = 1.0;
    } else if len >= 3 {
        let angle = std::f64::consts::TAU * hour as f64 / 24.0;
        v[0] = angle.sin();
        v[1] = angle.cos();
        v[2] = if weekday { 1.0 } else { 0.0 };
    }
    v
}

fn default_recovery() -> f64 {
    0.9
}

fn default_one() -> f64 {
    1.0
}

/// Full description of a synthetic source/target pair.
///
/// Layouts give one archetype id per region in linear order; a mix gives
/// archetype mass fractions from which a layout is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub source_width: usize,
    pub source_height: usize,
    pub target_width: usize,
    pub target_height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_mix: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mix: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_layout: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layout: Option<Vec<usize>>,
    /// Noise standard deviation as a fraction of each region's diurnal range.
    pub noise: f64,
    pub aux_noise: f64,
    pub source_len: usize,
    pub target_len: usize,
    pub aux_len: usize,
    pub test_len: usize,
    pub ext_len: usize,
    /// Multiplies every target amplitude.
    #[serde(default = "default_one")]
    pub target_amplitude: f64,
    /// Target regions reuse the source amplitude at the same linear index.
    #[serde(default)]
    pub share_amplitudes: bool,
    /// Overrides every archetype's amplitude range with `1 ± spread`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_spread: Option<f64>,
    /// Minimum auxiliary matching recovery expected at this noise level.
    #[serde(default = "default_recovery")]
    pub recovery_threshold: f64,
}

const BUILTIN: &[(&str, &str)] = &[
    ("scarce-1day", include_str!("../scenarios/scarce-1day.toml")),
    ("similar-1day", include_str!("../scenarios/similar-1day.toml")),
    ("similar-3day", include_str!("../scenarios/similar-3day.toml")),
    ("dissimilar-1day", include_str!("../scenarios/dissimilar-1day.toml")),
    ("dissimilar-3day", include_str!("../scenarios/dissimilar-3day.toml")),
    ("size-mismatch", include_str!("../scenarios/size-mismatch.toml")),
];

pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    BUILTIN
        .iter()
        .map(|(_, text)| ScenarioSpec::from_toml(text).expect("builtin scenario parses"))
        .collect()
}

pub fn builtin_scenario(name: &str) -> Result<ScenarioSpec, SynthError> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioSpec::from_toml(text).expect("builtin scenario parses"))
        .ok_or_else(|| SynthError::Unknown(name.to_string()))
}

/// A builtin name, or else a path to a scenario file.
pub fn resolve_scenario(name_or_path: &str) -> Result<ScenarioSpec, SynthError> {
    if let Ok(spec) = builtin_scenario(name_or_path) {
        return Ok(spec);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(SynthError::Unknown(name_or_path.to_string()));
    }
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioSpec::from_toml(&text)
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioSpec { seed, ..self.clone() }
    }

    pub fn source_grid(&self) -> Result<RegionGrid, SynthError> {
        RegionGrid::new(self.source_width, self.source_height)
            .map_err(|_| field("source_width", "grid must be non-empty"))
    }

    pub fn target_grid(&self) -> Result<RegionGrid, SynthError> {
        RegionGrid::new(self.target_width, self.target_height)
            .map_err(|_| field("target_width", "grid must be non-empty"))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n_arch = archetypes().len();
        let src = self.source_grid()?;
        let tgt = self.target_grid()?;
        check_assignment(
            "source",
            self.source_mix.as_deref(),
            self.source_layout.as_deref(),
            src.regions(),
            n_arch,
        )?;
        check_assignment(
            "target",
            self.target_mix.as_deref(),
            self.target_layout.as_deref(),
            tgt.regions(),
            n_arch,
        )?;
        for (name, v) in [("noise", self.noise), ("aux_noise", self.aux_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be a non-negative number, got {v}")));
            }
        }
        if !(self.target_amplitude > 0.0 && self.target_amplitude.is_finite()) {
            return Err(field("target_amplitude", "must be positive"));
        }
        if self.target_len < 2 {
            return Err(field("target_len", "need at least 2 frames"));
        }
        if self.source_len < 10 * self.target_len {
            return Err(field(
                "source_len",
                format!("must be at least 10 × target_len ({})", 10 * self.target_len),
            ));
        }
        if self.aux_len < self.target_len || self.aux_len > self.source_len {
            return Err(field("aux_len", "must lie between target_len and source_len"));
        }
        if self.test_len < 2 {
            return Err(field("test_len", "need at least 2 frames"));
        }
        if self.ext_len == 1 || self.ext_len == 2 {
            return Err(field("ext_len", "must be 0 or at least 3"));
        }
        if let Some(d) = self.amplitude_spread {
            if !(0.0..1.0).contains(&d) {
                return Err(field("amplitude_spread", format!("must lie in [0, 1), got {d}")));
            }
        }
        if self.share_amplitudes && src != tgt {
            return Err(field("share_amplitudes", "requires equal grid sizes"));
        }
        if !(0.0..=1.0).contains(&self.recovery_threshold) {
            return Err(field("recovery_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Shared archetype mass between the two cities, `Σ_a min(p_a, q_a)`.
    pub fn archetype_overlap(&self) -> Result<f64, SynthError> {
        let s = mass(&self.layouts()?.0);
        let t = mass(&self.layouts()?.1);
        Ok(s.iter().zip(&t).map(|(a, b)| a.min(*b)).sum())
    }

    /// Archetype per region for the source and target, linear order.
    pub fn layouts(&self) -> Result<(Vec<usize>, Vec<usize>), SynthError> {
        self.validate()?;
        let mut rng = stream(self.seed, 1);
        let s = layout(
            self.source_mix.as_deref(),
            self.source_layout.as_deref(),
            self.source_grid()?.regions(),
            &mut rng,
        );
        let t = layout(
            self.target_mix.as_deref(),
            self.target_layout.as_deref(),
            self.target_grid()?.regions(),
            &mut rng,
        );
        Ok((s, t))
    }
}

fn check_assignment(
    city: &str,
    mix: Option<&[f64]>,
    layout: Option<&[usize]>,
    regions: usize,
    n_arch: usize,
) -> Result<(), SynthError> {
    let (mix_field, layout_field) = if city == "source" {
        ("source_mix", "source_layout")
    } else {
        ("target_mix", "target_layout")
    };
    match (mix, layout) {
        (Some(_), Some(_)) | (None, None) => Err(field(
            mix_field,
            format!("give exactly one of {mix_field} and {layout_field}"),
        )),
        (Some(m), None) => {
            if m.len() != n_arch {
                return Err(field(mix_field, format!("need {n_arch} fractions, got {}", m.len())));
            }
            let total: f64 = m.iter().sum();
            if m.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(field(mix_field, "fractions must be non-negative and sum to 1"));
            }
            Ok(())
        }
        (None, Some(l)) => {
            if l.len() != regions {
                return Err(field(layout_field, format!("need {regions} entries, got {}", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&a| a >= n_arch) {
                return Err(field(layout_field, format!("archetype id {bad} does not exist")));
            }
            Ok(())
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Largest-remainder counts, shuffled into a layout.
fn layout(mix: Option<&[f64]>, explicit: Option<&[usize]>, regions: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if let Some(l) = explicit {
        return l.to_vec();
    }
    let mix = mix.expect("validated");
    let exact: Vec<f64> = mix.iter().map(|p| p * regions as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = regions - counts.iter().sum::<usize>();
    for &a in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[a] += 1;
        missing -= 1;
    }
    let mut out: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| std::iter::repeat_n(a, c))
        .collect();
    out.shuffle(rng);
    out
}

fn mass(layout: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; archetypes().len()];
    for &a in layout {
        m[a] += 1.0 / layout.len() as f64;
    }
    m
}

/// Generated cities plus the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub source: CityDataset,
    pub target: CityDataset,
    /// The target's continuation after its training range.
    pub target_test: CityDataset,
    pub source_archetypes: Vec<usize>,
    pub target_archetypes: Vec<usize>,
}

impl Scenario {
    /// Fraction of target regions matched to a source region of the same archetype.
    pub fn recovery(&self, matching: &RegionMatching) -> f64 {
        let tg = self.target.grid();
        let sg = self.source.grid();
        let hits = matching
            .entries()
            .iter()
            .filter(|e| {
                let t = self.target_archetypes[tg.linear_index(e.target.0, e.target.1)];
                let s = self.source_archetypes[sg.linear_index(e.source.0, e.source.1)];
                t == s
            })
            .count();
        hits as f64 / matching.entries().len() as f64
    }

    /// Writes `source/`, `target/`, `target_test/`, `truth.txt`,
    /// `source_truth.txt` and `scenario.toml` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        save_dataset(&self.source, &dir.join("source"))?;
        save_dataset(&self.target, &dir.join("target"))?;
        save_dataset(&self.target_test, &dir.join("target_test"))?;
        let truth = dir.join("truth.txt");
        fs::write(&truth, truth_text(self.target.grid(), &self.target_archetypes)).map_err(io(&truth))?;
        let st = dir.join("source_truth.txt");
        fs::write(&st, truth_text(self.source.grid(), &self.source_archetypes)).map_err(io(&st))?;
        let spec = dir.join("scenario.toml");
        fs::write(&spec, self.spec.to_toml()).map_err(io(&spec))?;
        Ok(())
    }
}

/// `i,j -> archetype_id` per region, linear order.
pub fn truth_text(grid: RegionGrid, archetypes: &[usize]) -> String {
    let mut out = String::new();
    for (n, (i, j)) in grid.iter().enumerate() {
        let _ = writeln!(out, "{i},{j} -> {}", archetypes[n]);
    }
    out
}

pub fn parse_truth(text: &str, grid: RegionGrid) -> Result<Vec<usize>, SynthError> {
    let mut out = vec![usize::MAX; grid.regions()];
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || SynthError::Parse(format!("truth line {}: '{line}'", n + 1));
        let (region, arch) = line.split_once("->").ok_or_else(bad)?;
        let (i, j) = region.trim().split_once(',').ok_or_else(bad)?;
        let i: usize = i.trim().parse().map_err(|_| bad())?;
        let j: usize = j.trim().parse().map_err(|_| bad())?;
        if i >= grid.width() || j >= grid.height() {
            return Err(bad());
        }
        out[grid.linear_index(i, j)] = arch.trim().parse().map_err(|_| bad())?;
    }
    if out.contains(&usize::MAX) {
        return Err(SynthError::Parse("truth file does not cover every region".into()));
    }
    Ok(out)
}

struct CityPlan<'a> {
    grid: RegionGrid,
    layout: &'a [usize],
    amplitudes: &'a [f64],
}

/// Frames `[len, W, H]` for one profile kind starting at `t_start`. Noise
/// has standard deviation `sigma` times the region's diurnal range.
fn render(
    plan: &CityPlan,
    profile: impl Fn(&Archetype) -> [f64; 24],
    t_start: i64,
    len: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let arch = archetypes();
    let profiles: Vec<[f64; 24]> = arch.iter().map(&profile).collect();
    let ranges: Vec<f64> = profiles
        .iter()
        .map(|p| p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min))
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (w, h) = (plan.grid.width(), plan.grid.height());
    let mut data = vec![0.0; len * w * h];
    for step in 0..len {
        let t = t_start + step as i64;
        let hour = t.rem_euclid(24) as usize;
        for (n, (i, j)) in plan.grid.iter().enumerate() {
            let a = plan.layout[n];
            let amp = plan.amplitudes[n];
            let clean = profiles[a][hour] * arch[a].modulation(t) * amp;
            let e = if sigma > 0.0 {
                sigma * ranges[a] * amp * unit.sample(rng)
            } else {
                0.0
            };
            data[step * w * h + plan.grid.position(i, j)] = (clean + e).max(0.0);
        }
    }
    Tensor::new(vec![len, w, h], data).expect("non-empty frames")
}

fn external(t_start: i64, len: usize, ext_len: usize) -> Option<Tensor> {
    if ext_len == 0 {
        return None;
    }
    let data = (0..len)
        .flat_map(|s| external_features(t_start + s as i64, ext_len))
        .collect();
    Some(Tensor::new(vec![len, ext_len], data).expect("non-empty features"))
}

fn city(
    name: &str,
    plan: &CityPlan,
    t_start: i64,
    len: usize,
    spec: &ScenarioSpec,
    aux: Option<(i64, usize)>,
    streams: (u64, u64),
) -> Result<CityDataset, SynthError> {
    let mut rng = stream(spec.seed, streams.0);
    let inflow = render(plan, |a| a.inflow, t_start, len, spec.noise, &mut rng);
    let outflow = render(plan, |a| a.outflow, t_start, len, spec.noise, &mut rng);
    let service = vec![
        UrbanImageTimeSeries::new(plan.grid, t_start, inflow, INFLOW)?,
        UrbanImageTimeSeries::new(plan.grid, t_start, outflow, OUTFLOW)?,
    ];
    let auxiliary = match aux {
        Some((a_start, a_len)) => {
            let mut rng = stream(spec.seed, streams.1);
            let frames = render(plan, Archetype::auxiliary, a_start, a_len, spec.aux_noise, &mut rng);
            Some(UrbanImageTimeSeries::new(plan.grid, a_start, frames, AUXILIARY)?)
        }
        None => None,
    };
    Ok(CityDataset::new(
        name,
        service,
        auxiliary,
        external(t_start, len, spec.ext_len),
        NormStats::new(),
    )?)
}

/// Generates source, target and target continuation. Every random draw comes
/// from a stream keyed by the spec seed, so the source depends only on the
/// source fields.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    let (source_layout, target_layout) = spec.layouts()?;
    let arch = archetypes();
    let mut amp_rng = stream(spec.seed, 2);
    let draw = |layout: &[usize], rng: &mut ChaCha8Rng| -> Vec<f64> {
        layout
            .iter()
            .map(|&a| {
                let (lo, hi) = arch[a].amplitude;
                let (lo, hi) = spec.amplitude_spread.map_or((lo, hi), |d| (1.0 - d, 1.0 + d));
                if hi > lo {
                    Uniform::new(lo, hi).expect("valid range").sample(rng)
                } else {
                    lo
                }
            })
            .collect()
    };
    let source_amp = draw(&source_layout, &mut amp_rng);
    let mut target_rng = stream(spec.seed, 3);
    let target_amp: Vec<f64> = if spec.share_amplitudes {
        source_amp.clone()
    } else {
        draw(&target_layout, &mut target_rng)
    }
    .into_iter()
    .map(|a| a * spec.target_amplitude)
    .collect();

    let src_plan = CityPlan {
        grid: spec.source_grid()?,
        layout: &source_layout,
        amplitudes: &source_amp,
    };
    let tgt_plan = CityPlan {
        grid: spec.target_grid()?,
        layout: &target_layout,
        amplitudes: &target_amp,
    };
    let end = spec.source_len as i64;
    // The source's check-in history spans its whole service range; the
    // target's covers only the last `aux_len` frames, so the shared range
    // used for matching is exactly `aux_len` long.
    let source = city(
        "source",
        &src_plan,
        0,
        spec.source_len,
        spec,
        Some((0, spec.source_len)),
        (10, 11),
    )?;
    let norm = NormStats::from_series(&source.service);
    if let Some(c) = norm.constant_channels().first() {
        return Err(DataError::ConstantChannel(c.to_string()).into());
    }
    let source = source.with_norm(norm.clone());

    // Target training and test frames come from one continuous draw so the
    // noise process does not restart at the split.
    let t0 = end - spec.target_len as i64;
    let full = city(
        "target",
        &tgt_plan,
        t0,
        spec.target_len + spec.test_len,
        spec,
        Some((end - spec.aux_len as i64, spec.aux_len)),
        (20, 21),
    )?;
    let (target, target_test) = split(&full, spec.target_len, &norm)?;
    Ok(Scenario {
        spec: spec.clone(),
        source,
        target,
        target_test,
        source_archetypes: source_layout,
        target_archetypes: target_layout,
    })
}

fn split(full: &CityDataset, head: usize, norm: &NormStats) -> Result<(CityDataset, CityDataset), SynthError> {
    let take = |from: usize, len: usize| -> Result<(Vec<UrbanImageTimeSeries>, Option<Tensor>), SynthError> {
        let service = full
            .service
            .iter()
            .map(|s| {
                let grid = s.grid();
                let per = grid.regions();
                let data = s.frames().data()[from * per..(from + len) * per].to_vec();
                let frames = Tensor::new(vec![len, grid.width(), grid.height()], data)?;
                UrbanImageTimeSeries::new(grid, s.t_start() + from as i64, frames, s.channel())
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let ext = match &full.external {
            Some(e) => {
                let l = e.shape()[1];
                Some(
                    Tensor::new(vec![len, l], e.data()[from * l..(from + len) * l].to_vec())
                        .map_err(DataError::from)?,
                )
            }
            None => None,
        };
        Ok((service, ext))
    };
    let (s1, e1) = take(0, head)?;
    let (s2, e2) = take(head, full.len() - head)?;
    let train = CityDataset::new("target", s1, full.auxiliary.clone(), e1, norm.clone())?;
    let test = CityDataset::new("target_test", s2, None, e2, norm.clone())?;
    Ok((train, test))
}
