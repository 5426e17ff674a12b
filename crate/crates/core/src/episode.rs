//! Drinking-episode records: CSV ingestion, validation, and uniform
//! zero-order-hold resampling.
//!
//! A raw record is a list of `(time, brac, tac)` samples at arbitrary,
//! strictly increasing times. The discrete-time model wants something
//! stricter: BrAC held constant on each `[kτ, (k+1)τ)` for `k = 0..n-1`, and
//! TAC observed at `τ, 2τ, …, nτ`. [`resample_uniform`] bridges the two by
//! linear interpolation, treating everything outside the recorded span as
//! zero (the skin starts alcohol-free).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sampling interval for ingested sensor data: one minute.
pub const DEFAULT_TAU_HOURS: f64 = 1.0 / 60.0;

/// Column names used to pull time, BrAC and TAC out of a CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub time: String,
    pub brac: String,
    pub tac: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            time: "time_hours".into(),
            brac: "brac".into(),
            tac: "tac".into(),
        }
    }
}

/// An episode as recorded, possibly on a non-uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEpisode {
    pub id: String,
    pub time: Vec<f64>,
    pub brac: Vec<f64>,
    pub tac: Vec<f64>,
}

impl RawEpisode {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn check_times(&self) -> Result<()> {
        if let Some(i) = self.time.iter().position(|t| !t.is_finite()) {
            return Err(Error::Validation(format!(
                "episode {}: non-finite time at sample {i}",
                self.id
            )));
        }
        if let Some(w) = self.time.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "episode {}: times not strictly increasing at sample {} ({} then {})",
                self.id,
                w + 1,
                self.time[w],
                self.time[w + 1]
            )));
        }
        Ok(())
    }
}

/// A uniformly sampled episode in zero-order-hold form.
///
/// `brac[k]` is the input held on `[kτ, (k+1)τ)`, `tac[k]` the observation at
/// time `(k+1)τ`, so both have length `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub tau: f64,
    pub brac: Vec<f64>,
    pub tac: Vec<f64>,
}

impl Episode {
    pub fn new(id: impl Into<String>, tau: f64, brac: Vec<f64>, tac: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Validation(format!("episode {id}: tau must be positive, got {tau}")));
        }
        if brac.len() != tac.len() {
            return Err(Error::Validation(format!(
                "episode {id}: {} held inputs but {} observations",
                brac.len(),
                tac.len()
            )));
        }
        if brac.is_empty() {
            return Err(Error::EmptyInput(format!("episode {id} has no steps")));
        }
        if brac.iter().chain(&tac).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("episode {id}: non-finite concentration")));
        }
        Ok(Self { id, tau, brac, tac })
    }

    /// Number of observation steps `n`.
    pub fn n(&self) -> usize {
        self.tac.len()
    }

    /// Observation times `τ, 2τ, …, nτ`.
    pub fn observation_times(&self) -> Vec<f64> {
        (1..=self.n()).map(|k| k as f64 * self.tau).collect()
    }

    /// The episode as samples at `0, τ, …, nτ`. TAC at time zero is the zero
    /// initial condition; BrAC at `nτ` repeats the last held value.
    /// Resampling the result at the same `τ` gives back `self` exactly.
    pub fn to_raw(&self) -> RawEpisode {
        let n = self.n();
        let time = (0..=n).map(|k| k as f64 * self.tau).collect();
        let mut brac = self.brac.clone();
        brac.push(*self.brac.last().expect("episode is nonempty"));
        let mut tac = Vec::with_capacity(n + 1);
        tac.push(0.0);
        tac.extend_from_slice(&self.tac);
        RawEpisode {
            id: self.id.clone(),
            time,
            brac,
            tac,
        }
    }

    /// Centered moving average of the TAC series with an odd `window`,
    /// shrinking the window at the ends.
    pub fn smoothed(&self, window: usize) -> Result<Self> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "smoothing window must be odd and positive, got {window}"
            )));
        }
        let half = window / 2;
        let n = self.n();
        let tac = (0..n)
            .map(|k| {
                let lo = k.saturating_sub(half);
                let hi = (k + half).min(n - 1);
                self.tac[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        Ok(Self {
            tac,
            ..self.clone()
        })
    }
}

/// Reads a CSV episode. Header names are looked up through `schema`; extra
/// columns are ignored.
pub fn parse_episode_csv<R: Read>(id: &str, source: R, schema: &ColumnMap) -> Result<RawEpisode> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return Err(Error::Parse {
                line: 1,
                message: e.to_string(),
            })
        }
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyInput(format!("episode {id}: empty CSV")));
    }
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (ti, bi, ai) = (column(&schema.time)?, column(&schema.brac)?, column(&schema.tac)?);

    let mut raw = RawEpisode {
        id: id.to_string(),
        time: Vec::new(),
        brac: Vec::new(),
        tac: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |idx: usize, name: &str| -> Result<f64> {
            let text = record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{name}`"),
            })?;
            text.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("field `{name}` = {text:?}: {e}"),
            })
        };
        raw.time.push(field(ti, &schema.time)?);
        raw.brac.push(field(bi, &schema.brac)?);
        raw.tac.push(field(ai, &schema.tac)?);
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput(format!("episode {id}: no data rows")));
    }
    raw.check_times()?;
    Ok(raw)
}

/// Writes `time_hours,brac,tac` rows using the shortest round-trip decimal
/// form of each value.
pub fn write_episode_csv<W: Write>(raw: &RawEpisode, sink: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    let io = |e: csv::Error| Error::io(PathBuf::from(format!("<episode {}>", raw.id)), e.into());
    writer.write_record(["time_hours", "brac", "tac"]).map_err(io)?;
    for i in 0..raw.len() {
        writer
            .write_record([raw.time[i].to_string(), raw.brac[i].to_string(), raw.tac[i].to_string()])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(format!("<episode {}>", raw.id), e))?;
    Ok(())
}

/// Piecewise-linear interpolant through `(times, values)` that is zero
/// outside the recorded span.
fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let (first, last) = (times[0], times[times.len() - 1]);
    if t < first || t > last {
        return 0.0;
    }
    match times.binary_search_by(|x| x.total_cmp(&t)) {
        Ok(i) => values[i],
        Err(i) => {
            let (t0, t1) = (times[i - 1], times[i]);
            let w = (t - t0) / (t1 - t0);
            values[i - 1] + (values[i] - values[i - 1]) * w
        }
    }
}

/// Resamples a raw record onto the uniform grid of step `tau` starting at
/// time zero. The number of steps is the largest `n` with `nτ` inside the
/// record (up to rounding).
pub fn resample_uniform(raw: &RawEpisode, tau: f64) -> Result<Episode> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if raw.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "episode {}: need at least 2 samples to resample, got {}",
            raw.id,
            raw.len()
        )));
    }
    if raw.brac.len() != raw.len() || raw.tac.len() != raw.len() {
        return Err(Error::DimensionMismatch(format!(
            "episode {}: time/brac/tac lengths differ",
            raw.id
        )));
    }
    raw.check_times()?;
    let (first, last) = (raw.time[0], raw.time[raw.len() - 1]);
    if tau > last - first {
        return Err(Error::InvalidArgument(format!(
            "episode {}: tau = {tau} h exceeds the record span of {} h",
            raw.id,
            last - first
        )));
    }
    let n = (last / tau + 1e-9).floor();
    if n < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "episode {}: record ends at {last} h, before the first step at {tau} h",
            raw.id
        )));
    }
    let n = n as usize;
    let brac = (0..n)
        .map(|k| interpolate(&raw.time, &raw.brac, k as f64 * tau))
        .collect();
    let tac = (1..=n)
        .map(|k| interpolate(&raw.time, &raw.tac, k as f64 * tau))
        .collect();
    Episode::new(raw.id.clone(), tau, brac, tac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Tau,
    Brac,
    Tac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub series: Series,
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub items: Vec<Diagnostic>,
}

impl DiagnosticsReport {
    pub fn is_clean(&self) -> bool {
        self.items.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.items.iter().any(|d| d.severity == Severity::Error)
    }

    fn push(&mut self, severity: Severity, series: Series, index: Option<usize>, message: impl Into<String>) {
        self.items.push(Diagnostic {
            severity,
            series,
            index,
            message: message.into(),
        });
    }
}

/// Checks an episode without modifying it.
///
/// | condition                     | severity |
/// |-------------------------------|----------|
/// | tau not positive and finite   | error    |
/// | zero-length series            | error    |
/// | BrAC/TAC length mismatch      | error    |
/// | NaN or infinite entry         | error    |
/// | negative entry                | warning  |
/// | series identically zero       | warning  |
pub fn validate_episode(e: &Episode) -> DiagnosticsReport {
    let mut report = DiagnosticsReport::default();
    if !(e.tau > 0.0 && e.tau.is_finite()) {
        report.push(Severity::Error, Series::Tau, None, format!("tau = {} is not positive", e.tau));
    }
    if e.brac.len() != e.tac.len() {
        report.push(
            Severity::Error,
            Series::Tac,
            None,
            format!("{} held inputs but {} observations", e.brac.len(), e.tac.len()),
        );
    }
    for (series, values) in [(Series::Brac, &e.brac), (Series::Tac, &e.tac)] {
        if values.is_empty() {
            report.push(Severity::Error, series, None, "zero-length series");
            continue;
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                report.push(Severity::Error, series, Some(i), format!("non-finite value {v}"));
            } else if v < 0.0 {
                report.push(Severity::Warning, series, Some(i), format!("negative concentration {v}"));
            }
        }
        if values.iter().all(|&v| v == 0.0) {
            report.push(Severity::Warning, series, None, "flat signal");
        }
    }
    report
}

/// One entry of a dataset manifest. Paths are relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_q: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_index: Option<usize>,
}

/// A manifest is either a bare JSON array of entries or an object with an
/// `episodes` array (and optionally `tau_hours`, plus anything else).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub episodes: Vec<ManifestEntry>,
    pub tau_hours: Option<f64>,
    pub root: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let (episodes, tau_hours) = match value {
        serde_json::Value::Array(_) => (serde_json::from_value(value)?, None),
        serde_json::Value::Object(mut map) => {
            let episodes = map
                .remove("episodes")
                .ok_or_else(|| Error::Validation(format!("{}: manifest has no `episodes`", path.display())))?;
            let tau = map.get("tau_hours").and_then(|v| v.as_f64());
            (serde_json::from_value(episodes)?, tau)
        }
        _ => {
            return Err(Error::Validation(format!(
                "{}: manifest must be an array or an object",
                path.display()
            )))
        }
    };
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest {
        episodes,
        tau_hours,
        root,
    })
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads and resamples every episode at `tau`.
    pub fn load(&self, tau: f64, schema: &ColumnMap) -> Result<Vec<Episode>> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyInput("manifest lists no episodes".into()));
        }
        self.episodes
            .iter()
            .map(|entry| {
                let path = self.resolve(entry);
                let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                let raw = parse_episode_csv(&entry.id, std::io::BufReader::new(file), schema)?;
                resample_uniform(&raw, tau)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<RawEpisode> {
        parse_episode_csv("e", text.as_bytes(), &ColumnMap::default())
    }

    #[test]
    fn three_row_csv() {
        let raw = parse("time_hours,brac,tac\n0,0,0\n0.5,0.02,0.001\n1.0,0.04,0.003\n").unwrap();
        assert_eq!(raw.len(), 3);
        assert_eq!(raw.time, vec![0.0, 0.5, 1.0]);
        assert_eq!(raw.brac, vec![0.0, 0.02, 0.04]);
        assert_eq!(raw.tac, vec![0.0, 0.001, 0.003]);
    }

    #[test]
    fn duplicated_time_is_rejected() {
        let err = parse("time_hours,brac,tac\n0,0,0\n0.5,1,1\n0.5,1,1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn schema_remap() {
        let schema = ColumnMap {
            time: "t".into(),
            brac: "breath".into(),
            tac: "skin".into(),
        };
        let text = "skin,extra,t,breath\n0.0,x,0,0.01\n0.002,y,0.4,0.05\n0.004,z,1.1,0.03\n";
        let raw = parse_episode_csv("remapped", text.as_bytes(), &schema).unwrap();
        let expected = RawEpisode {
            id: "remapped".into(),
            time: vec![0.0, 0.4, 1.1],
            brac: vec![0.01, 0.05, 0.03],
            tac: vec![0.0, 0.002, 0.004],
        };
        assert_eq!(raw, expected);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("time_hours,brac,tac\n0,0,0\n0.5,abc,0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file() {
        assert!(matches!(parse("").unwrap_err(), Error::EmptyInput(_)));
        assert!(matches!(parse("time_hours,brac,tac\n").unwrap_err(), Error::EmptyInput(_)));
    }

    #[test]
    fn missing_column() {
        assert!(matches!(parse("time_hours,brac\n0,0\n").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn resample_two_point_brac() {
        let raw = RawEpisode {
            id: "r".into(),
            time: vec![0.0, 1.0],
            brac: vec![0.0, 2.0],
            tac: vec![0.0, 0.0],
        };
        let e = resample_uniform(&raw, 0.5).unwrap();
        assert_eq!(e.brac, vec![0.0, 1.0]);
        assert_eq!(e.n(), 2);
        assert_eq!(interpolate(&raw.time, &raw.brac, 1.0), 2.0);
    }

    #[test]
    fn resample_zero_outside_span() {
        let raw = RawEpisode {
            id: "late".into(),
            time: vec![0.5, 1.0, 2.0],
            brac: vec![1.0, 1.0, 1.0],
            tac: vec![0.2, 0.4, 0.6],
        };
        let e = resample_uniform(&raw, 0.25).unwrap();
        assert_eq!(e.n(), 8);
        assert_eq!(&e.brac[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(e.tac[0], 0.0);
        assert_eq!(e.tac[1], 0.2);
        assert!((e.tac[3] - 0.4).abs() < 1e-15);
        assert_eq!(e.tac[7], 0.6);
    }

    #[test]
    fn tau_larger_than_span() {
        let raw = RawEpisode {
            id: "short".into(),
            time: vec![0.0, 1.0, 2.0],
            brac: vec![0.0; 3],
            tac: vec![0.0; 3],
        };
        assert!(matches!(resample_uniform(&raw, 4.0).unwrap_err(), Error::InvalidArgument(_)));
    }

    #[test]
    fn validation_rules() {
        let clean = Episode::new("c", 0.1, vec![0.01, 0.02], vec![0.001, 0.002]).unwrap();
        assert!(validate_episode(&clean).is_clean());

        let neg = Episode::new("n", 0.1, vec![0.01, 0.02, 0.0], vec![0.001, -0.002, 0.0]).unwrap();
        let report = validate_episode(&neg);
        assert_eq!(report.items.len(), 1);
        assert_eq!(report.items[0].series, Series::Tac);
        assert_eq!(report.items[0].index, Some(1));
        assert!(!report.has_errors());

        let flat = Episode::new("f", 0.1, vec![0.01, 0.02], vec![0.0, 0.0]).unwrap();
        let report = validate_episode(&flat);
        assert_eq!(report.items.len(), 1);
        assert_eq!(report.items[0].message, "flat signal");
        assert_eq!(report.items[0].severity, Severity::Warning);

        let broken = Episode {
            id: "b".into(),
            tau: 0.0,
            brac: vec![f64::NAN],
            tac: vec![],
        };
        let report = validate_episode(&broken);
        assert!(report.has_errors());
        assert!(report.items.iter().any(|d| d.message == "zero-length series"));
        assert!(report.items.iter().any(|d| d.series == Series::Tau));
        assert!(report.items.iter().any(|d| d.series == Series::Brac && d.index == Some(0)));
    }

    #[test]
    fn smoothing() {
        let e = Episode::new("s", 0.1, vec![0.0; 4], vec![0.0, 3.0, 0.0, 3.0]).unwrap();
        let s = e.smoothed(3).unwrap();
        assert_eq!(s.tac, vec![1.5, 1.0, 2.0, 1.5]);
        assert_eq!(e.smoothed(1).unwrap(), e);
        assert!(e.smoothed(2).is_err());
    }

    fn uniform_episode() -> impl Strategy<Value = Episode> {
        (1usize..40, 0.001f64..2.0).prop_flat_map(|(n, tau)| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(-0.01f64..1.0, n),
            )
                .prop_map(move |(brac, tac)| Episode::new("u", tau, brac, tac).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resample_is_idempotent(e in uniform_episode()) {
            let back = resample_uniform(&e.to_raw(), e.tau).unwrap();
            prop_assert_eq!(back, e);
        }

        #[test]
        fn interpolation_preserves_range(
            values in prop::collection::vec(-5.0f64..5.0, 2..20),
            frac in 0.0f64..1.0,
        ) {
            let times: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.7 + 0.1).collect();
            let t = times[0] + frac * (times[times.len() - 1] - times[0]);
            let v = interpolate(&times, &values, t);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn csv_round_trip(
            steps in prop::collection::vec((0.001f64..3.0, any::<f64>(), any::<f64>()), 1..30),
        ) {
            let mut t = 0.0;
            let mut raw = RawEpisode { id: "rt".into(), time: vec![], brac: vec![], tac: vec![] };
            for (dt, b, a) in steps {
                t += dt;
                raw.time.push(t);
                raw.brac.push(if b.is_finite() { b } else { 0.0 });
                raw.tac.push(if a.is_finite() { a } else { 0.0 });
            }
            let mut buf = Vec::new();
            write_episode_csv(&raw, &mut buf).unwrap();
            let back = parse_episode_csv("rt", buf.as_slice(), &ColumnMap::default()).unwrap();
            prop_assert_eq!(back, raw);
        }
    }
}
