//! Timed request streams: replayed invocation traces or synthetic
//! diurnal/rotating-hot-set traffic.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Gamma, LogNormal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterId;
use crate::{ms_to_us, Micros};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("reading trace {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid workload: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_us: Micros,
    pub adapter: AdapterId,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

impl Request {
    pub fn arrival_ms(&self) -> f64 {
        self.arrival_us as f64 / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDistribution {
    /// `exp(ln(median) + sigma·Z)`, rounded and clamped to `[1, max]`.
    Lognormal {
        median: f64,
        sigma: f64,
        max: u32,
    },
    Fixed {
        tokens: u32,
    },
}

impl LengthDistribution {
    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            LengthDistribution::Lognormal { median, sigma, max } => {
                median >= 1.0 && sigma >= 0.0 && sigma.is_finite() && max >= 1
            }
            LengthDistribution::Fixed { tokens } => tokens >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Invalid(format!(
                "bad {what} length distribution {self:?}"
            )))
        }
    }

    fn sampler(&self) -> LengthSampler {
        match *self {
            LengthDistribution::Lognormal { median, sigma, max } => LengthSampler::Lognormal(
                LogNormal::new(median.ln(), sigma).expect("validated parameters"),
                max,
            ),
            LengthDistribution::Fixed { tokens } => LengthSampler::Fixed(tokens),
        }
    }
}

enum LengthSampler {
    Lognormal(LogNormal<f64>, u32),
    Fixed(u32),
}

impl LengthSampler {
    fn sample(&self, rng: &mut Pcg64) -> u32 {
        match self {
            LengthSampler::Fixed(n) => *n,
            LengthSampler::Lognormal(d, max) => {
                let x = d.sample(rng).round();
                (x.max(1.0) as u32).min(*max)
            }
        }
    }
}

pub const DEFAULT_INPUT_LENGTHS: LengthDistribution = LengthDistribution::Lognormal {
    median: 256.0,
    sigma: 0.8,
    max: 4096,
};
pub const DEFAULT_OUTPUT_LENGTHS: LengthDistribution = LengthDistribution::Lognormal {
    median: 128.0,
    sigma: 0.8,
    max: 2048,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub num_adapters: u32,
    /// Mean requests per second.
    pub base_rate: f64,
    /// Relative swing of the sinusoidal rate, in `[0, 1]`.
    pub diurnal_amplitude: f64,
    pub period_s: f64,
    pub hot_set_size: u32,
    /// Probability a request targets the current hot set.
    pub hot_share: f64,
    /// Zero disables rotation.
    pub hot_set_rotation_period_s: f64,
    /// Shifts the rotation clock so switches need not align with whole seconds.
    pub rotation_offset_s: f64,
    /// Every this many seconds the adapters are re-dealt into new rotation
    /// groups (a fixed pseudo-random permutation per epoch). Zero disables.
    #[serde(default)]
    pub reshuffle_period_s: f64,
    /// Coefficient of variation of inter-arrival gaps (1 = Poisson).
    pub burstiness: f64,
    pub input_tokens: LengthDistribution,
    pub output_tokens: LengthDistribution,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            num_adapters: 20,
            base_rate: 20.0,
            diurnal_amplitude: 0.0,
            period_s: 86_400.0,
            hot_set_size: 4,
            hot_share: 0.9,
            hot_set_rotation_period_s: 6.0,
            rotation_offset_s: 0.0,
            reshuffle_period_s: 0.0,
            burstiness: 1.0,
            input_tokens: DEFAULT_INPUT_LENGTHS,
            output_tokens: DEFAULT_OUTPUT_LENGTHS,
        }
    }
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
        if self.num_adapters < 1 {
            return bad("num_adapters must be at least 1");
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return bad("base_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.diurnal_amplitude) {
            return bad("diurnal_amplitude must lie in [0, 1]");
        }
        if self.period_s <= 0.0 {
            return bad("period_s must be positive");
        }
        if self.hot_set_size > self.num_adapters {
            return bad("hot_set_size cannot exceed num_adapters");
        }
        if !(0.0..=1.0).contains(&self.hot_share) {
            return bad("hot_share must lie in [0, 1]");
        }
        if self.hot_set_rotation_period_s < 0.0 {
            return bad("hot_set_rotation_period_s must be nonnegative");
        }
        if !(self.reshuffle_period_s >= 0.0 && self.reshuffle_period_s.is_finite()) {
            return bad("reshuffle_period_s must be nonnegative");
        }
        if !(self.burstiness >= 0.0 && self.burstiness.is_finite()) {
            return bad("burstiness must be a nonnegative coefficient of variation");
        }
        self.input_tokens.validate("input")?;
        self.output_tokens.validate("output")
    }

    /// Expected arrivals in `[0, t]` divided by the base rate.
    fn cumulative_shape(&self, t: f64) -> f64 {
        let a = self.diurnal_amplitude;
        let p = self.period_s;
        t + a * p / TAU * (1.0 - (TAU * t / p).cos())
    }

    /// Inverts the cumulative intensity; monotone because amplitude ≤ 1.
    fn time_at(&self, expected_arrivals: f64, hint: f64) -> f64 {
        let target = expected_arrivals / self.base_rate;
        if self.diurnal_amplitude == 0.0 {
            return target;
        }
        // the shape stays within one amplitude·period/π of t
        let slack = self.diurnal_amplitude * self.period_s / std::f64::consts::PI;
        let mut lo = (target - slack).max(hint).max(0.0);
        let mut hi = target + slack;
        if self.cumulative_shape(lo) > target {
            lo = hint.max(0.0);
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.cumulative_shape(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
        hi
    }

    /// Adapter dealt to rotation slot `slot` at time `t`.
    fn slot_adapter(&self, t: f64, slot: u32) -> AdapterId {
        if self.reshuffle_period_s <= 0.0 {
            return AdapterId(slot);
        }
        let epoch = (t / self.reshuffle_period_s).floor() as u64;
        let mut perm: Vec<u32> = (0..self.num_adapters).collect();
        let mut rng = Pcg64::seed_from_u64(
            epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(self.num_adapters),
        );
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        AdapterId(perm[slot as usize])
    }

    fn hot_slots(&self, t: f64) -> u32 {
        let n = u64::from(self.num_adapters);
        let step = if self.hot_set_rotation_period_s > 0.0 {
            ((t + self.rotation_offset_s) / self.hot_set_rotation_period_s).floor() as u64
        } else {
            0
        };
        ((step * u64::from(self.hot_set_size)) % n) as u32
    }

    /// Adapters in the hot set at time `t` seconds.
    pub fn hot_set_at(&self, t: f64) -> Vec<AdapterId> {
        let n = self.num_adapters;
        let first = self.hot_slots(t);
        (0..self.hot_set_size)
            .map(|i| self.slot_adapter(t, (first + i) % n))
            .collect()
    }

    fn pick_adapter(&self, t: f64, rng: &mut Pcg64) -> AdapterId {
        let n = self.num_adapters;
        let h = self.hot_set_size;
        if h == 0 || h == n {
            return self.slot_adapter(t, rng.random_range(0..n));
        }
        let first = self.hot_slots(t);
        if rng.random::<f64>() < self.hot_share {
            self.slot_adapter(t, (first + rng.random_range(0..h)) % n)
        } else {
            // k-th slot outside the hot run
            let k = rng.random_range(0..n - h);
            self.slot_adapter(t, (first + h + k) % n)
        }
    }
}

/// Generates a seeded request stream for `duration_s` seconds.
pub fn generate_synthetic(
    profile: &SyntheticProfile,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    profile.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(WorkloadError::Invalid("duration must be positive".into()));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let cv = profile.burstiness;
    let gaps = (cv > 0.0).then(|| {
        let shape = 1.0 / (cv * cv);
        Gamma::new(shape, 1.0 / shape).expect("positive shape")
    });
    let input = profile.input_tokens.sampler();
    let output = profile.output_tokens.sampler();

    let mut out = Vec::with_capacity((profile.base_rate * duration_s * 1.05) as usize);
    let mut operational = 0.0;
    let mut t = 0.0;
    loop {
        operational += match &gaps {
            Some(g) => g.sample(&mut rng),
            None => 1.0,
        };
        t = profile.time_at(operational, t);
        if t >= duration_s {
            break;
        }
        let adapter = profile.pick_adapter(t, &mut rng);
        out.push(Request {
            id: out.len() as u64,
            arrival_us: ms_to_us(t * 1000.0),
            adapter,
            input_tokens: input.sample(&mut rng),
            output_tokens: output.sample(&mut rng),
        });
    }
    Ok(out)
}

/// How trace function identifiers become adapter ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionMapping {
    /// Each distinct function gets its own adapter, in order of first arrival.
    Distinct,
    /// Stable FNV-1a hash of the function id, modulo `adapters`.
    HashMod { adapters: u32 },
    /// The `adapters` most frequent functions get distinct adapters (ties by
    /// first arrival); rows of all other functions are dropped.
    TopN { adapters: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub mapping: FunctionMapping,
    /// Inter-arrival gaps are divided by this factor.
    pub rate_scale: f64,
    pub input_tokens: LengthDistribution,
    pub output_tokens: LengthDistribution,
    /// Seeds the length fallback for rows without token counts.
    pub seed: u64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            mapping: FunctionMapping::Distinct,
            rate_scale: 1.0,
            input_tokens: DEFAULT_INPUT_LENGTHS,
            output_tokens: DEFAULT_OUTPUT_LENGTHS,
            seed: 0,
        }
    }
}

struct TraceRow {
    timestamp_ms: f64,
    function: String,
    input_tokens: Option<u32>,
    output_tokens: Option<u32>,
}

pub fn ingest_trace(path: &Path, opts: &TraceOptions) -> Result<Vec<Request>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_trace(&text, opts)
}

/// Parses CSV with header `timestamp_ms,function_id[,input_tokens,output_tokens]`.
pub fn parse_trace(text: &str, opts: &TraceOptions) -> Result<Vec<Request>, WorkloadError> {
    if !(opts.rate_scale > 0.0 && opts.rate_scale.is_finite()) {
        return Err(WorkloadError::Invalid("rate_scale must be positive".into()));
    }
    opts.input_tokens.validate("input")?;
    opts.output_tokens.validate("output")?;

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| WorkloadError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col("timestamp_ms").ok_or(WorkloadError::Parse {
        line: 1,
        message: "missing column timestamp_ms".into(),
    })?;
    let fn_col = col("function_id").ok_or(WorkloadError::Parse {
        line: 1,
        message: "missing column function_id".into(),
    })?;
    let in_col = col("input_tokens");
    let out_col = col("output_tokens");

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| WorkloadError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| WorkloadError::Parse { line, message };
        let ts_raw = record
            .get(ts_col)
            .ok_or_else(|| err("missing timestamp_ms".into()))?;
        let timestamp_ms: f64 = ts_raw
            .parse()
            .map_err(|_| err(format!("bad timestamp_ms {ts_raw:?}")))?;
        if !(timestamp_ms >= 0.0 && timestamp_ms.is_finite()) {
            return Err(err(format!(
                "timestamp_ms must be nonnegative, got {ts_raw}"
            )));
        }
        let function = record
            .get(fn_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| err("missing function_id".into()))?
            .to_string();
        let tokens = |c: Option<usize>, name: &str| -> Result<Option<u32>, WorkloadError> {
            match c.and_then(|c| record.get(c)).filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => match s.parse::<u32>() {
                    Ok(n) if n >= 1 => Ok(Some(n)),
                    _ => Err(err(format!("bad {name} {s:?}"))),
                },
            }
        };
        rows.push(TraceRow {
            timestamp_ms,
            input_tokens: tokens(in_col, "input_tokens")?,
            output_tokens: tokens(out_col, "output_tokens")?,
            function,
        });
    }
    if rows.is_empty() {
        return Err(WorkloadError::Invalid("trace has no requests".into()));
    }
    rows.sort_by(|a, b| a.timestamp_ms.total_cmp(&b.timestamp_ms));

    let ids = map_functions(&rows, opts.mapping)?;
    let t0 = rows[0].timestamp_ms;
    let mut rng = Pcg64::seed_from_u64(opts.seed);
    let input = opts.input_tokens.sampler();
    let output = opts.output_tokens.sampler();
    let mut out = Vec::with_capacity(rows.len());
    for (row, id) in rows.iter().zip(ids) {
        // fallback lengths are drawn for every row to keep the stream stable
        let fallback_in = input.sample(&mut rng);
        let fallback_out = output.sample(&mut rng);
        let Some(adapter) = id else { continue };
        out.push(Request {
            id: out.len() as u64,
            arrival_us: ms_to_us((row.timestamp_ms - t0) / opts.rate_scale),
            adapter,
            input_tokens: row.input_tokens.unwrap_or(fallback_in),
            output_tokens: row.output_tokens.unwrap_or(fallback_out),
        });
    }
    if out.is_empty() {
        return Err(WorkloadError::Invalid(
            "mapping dropped every request".into(),
        ));
    }
    Ok(out)
}

fn map_functions(
    rows: &[TraceRow],
    mapping: FunctionMapping,
) -> Result<Vec<Option<AdapterId>>, WorkloadError> {
    match mapping {
        FunctionMapping::Distinct => {
            let mut seen: HashMap<&str, AdapterId> = HashMap::new();
            Ok(rows
                .iter()
                .map(|r| {
                    let next = AdapterId(seen.len() as u32);
                    Some(*seen.entry(r.function.as_str()).or_insert(next))
                })
                .collect())
        }
        FunctionMapping::HashMod { adapters } => {
            if adapters == 0 {
                return Err(WorkloadError::Invalid(
                    "hash_mod needs at least one adapter".into(),
                ));
            }
            Ok(rows
                .iter()
                .map(|r| {
                    let mut h = FnvHasher::default();
                    h.write(r.function.as_bytes());
                    Some(AdapterId((h.finish() % u64::from(adapters)) as u32))
                })
                .collect())
        }
        FunctionMapping::TopN { adapters } => {
            let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
            for (i, r) in rows.iter().enumerate() {
                stats.entry(r.function.as_str()).or_insert((0, i)).0 += 1;
            }
            let mut ranked: Vec<(&str, (usize, usize))> = stats.into_iter().collect();
            ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
            let keep: HashMap<&str, AdapterId> = ranked
                .iter()
                .take(adapters as usize)
                .enumerate()
                .map(|(i, (f, _))| (*f, AdapterId(i as u32)))
                .collect();
            Ok(rows
                .iter()
                .map(|r| keep.get(r.function.as_str()).copied())
                .collect())
        }
    }
}

/// Number of distinct adapter ids a stream references (max id + 1).
pub fn adapter_span(requests: &[Request]) -> usize {
    requests
        .iter()
        .map(|r| r.adapter.index() + 1)
        .max()
        .unwrap_or(0)
}

pub fn write_trace_csv(requests: &[Request], path: &Path) -> Result<(), WorkloadError> {
    let io = |e: csv::Error| WorkloadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "timestamp_ms",
        "function_id",
        "input_tokens",
        "output_tokens",
    ])
    .map_err(io)?;
    for r in requests {
        w.write_record([
            format!("{:.3}", r.arrival_ms()),
            format!("fn-{}", r.adapter),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
