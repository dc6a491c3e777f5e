//! Text file formats: on/off datasets and photon distributions as CSV, model
//! parameters and reconstruction reports as JSON.
//!
//! Reals are written in the shortest decimal form that parses back to the
//! same `f64`, so every write/read round trip is value-identical. Output is
//! independent of platform and locale: `,` separators, `.` decimals, `\n`
//! line ends.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distribution::{OnOffDataset, OnOffRecord, PhotonDistribution};
use crate::energy_fit::EnergyFitResult;
use crate::numeric::compensated_sum;
use crate::pdc::PdcModelParams;
use crate::{Error, Result};

pub const DATASET_HEADER: &str = "eta,windows,off_count";
pub const DISTRIBUTION_HEADER: &str = "n,prob";

/// Largest allowed gap between a report's stated normalization and the sum
/// of its distribution.
const NORMALIZATION_ECHO_TOLERANCE: f64 = 1e-12;

/// Shortest decimal text that parses back to `x`, in exponent form outside
/// `[1e-5, 1e16)` to keep tiny probabilities short.
pub fn format_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&x.abs()) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

/// `# key: value` comment lines carried alongside a dataset, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata(pub Vec<(String, String)>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

/// Lines that are neither blank nor comments, with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn split_fields(line_no: usize, line: &str, expected: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != expected {
        return Err(Error::Parse {
            line: line_no,
            column: fields.len().min(expected) + 1,
            reason: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(
    line: usize,
    column: usize,
    text: &str,
    what: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e| Error::Parse {
        line,
        column,
        reason: format!("{what} {text:?}: {e}"),
    })
}

fn check_header(found: &str, expected: &'static str) -> Result<()> {
    let normalized: Vec<&str> = found.split(',').map(str::trim).collect();
    if normalized.join(",") != expected {
        return Err(Error::Header {
            found: found.to_string(),
            expected,
        });
    }
    Ok(())
}

pub fn format_dataset(data: &OnOffDataset, metadata: &Metadata) -> String {
    let mut out = String::new();
    if !data.label().is_empty() && metadata.get("label").is_none() {
        writeln!(out, "# label: {}", data.label()).unwrap();
    }
    for (key, value) in &metadata.0 {
        writeln!(out, "# {key}: {value}").unwrap();
    }
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for r in data.records() {
        writeln!(out, "{},{},{}", format_real(r.eta), r.windows, r.off_count).unwrap();
    }
    out
}

/// Parses a dataset file. A file holding no records at all (not even a
/// header) gives an empty dataset.
pub fn parse_dataset(text: &str) -> Result<(OnOffDataset, Metadata)> {
    let mut metadata = Metadata::new();
    for line in text.lines().filter_map(|l| l.strip_prefix('#')) {
        if let Some((key, value)) = line.split_once(':') {
            metadata
                .0
                .push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    let label = metadata.get("label").unwrap_or_default().to_string();

    let mut lines = content_lines(text);
    let Some((_, header)) = lines.next() else {
        return Ok((OnOffDataset::new(Vec::new(), label)?, metadata));
    };
    check_header(header, DATASET_HEADER)?;

    let mut records: Vec<OnOffRecord> = Vec::new();
    for (line_no, line) in lines {
        let fields = split_fields(line_no, line, 3)?;
        let eta: f64 = parse_field(line_no, 1, fields[0], "efficiency")?;
        let windows: u64 = parse_field(line_no, 2, fields[1], "window count")?;
        let off_count: u64 = parse_field(line_no, 3, fields[2], "off count")?;
        let record = OnOffRecord {
            eta,
            windows,
            off_count,
        };
        let located = |e: Error, column| Error::Parse {
            line: line_no,
            column,
            reason: e.to_string(),
        };
        if let Err(e) = record.validate() {
            let column = if !(eta > 0.0 && eta <= 1.0) {
                1
            } else if windows == 0 {
                2
            } else {
                3
            };
            return Err(located(e, column));
        }
        if records.iter().any(|r| r.eta == eta) {
            return Err(located(Error::DuplicateEfficiency(eta), 1));
        }
        records.push(record);
    }
    Ok((OnOffDataset::new(records, label)?, metadata))
}

pub fn read_dataset(path: &Path) -> Result<OnOffDataset> {
    Ok(read_dataset_with_metadata(path)?.0)
}

pub fn read_dataset_with_metadata(path: &Path) -> Result<(OnOffDataset, Metadata)> {
    parse_dataset(&read_text(path)?)
}

pub fn write_dataset(data: &OnOffDataset, path: &Path) -> Result<()> {
    write_dataset_with_metadata(data, &Metadata::new(), path)
}

pub fn write_dataset_with_metadata(
    data: &OnOffDataset,
    metadata: &Metadata,
    path: &Path,
) -> Result<()> {
    write_atomic(path, format_dataset(data, metadata).as_bytes())
}

pub fn format_distribution(dist: &PhotonDistribution) -> String {
    let mut out = String::from(DISTRIBUTION_HEADER);
    out.push('\n');
    for (n, p) in dist.probs().iter().enumerate() {
        writeln!(out, "{n},{}", format_real(*p)).unwrap();
    }
    out
}

/// Parses `n,prob` rows with `n` running `0, 1, 2, ...`. The entries are
/// kept as written; they are not renormalized.
pub fn parse_distribution(text: &str) -> Result<PhotonDistribution> {
    let mut lines = content_lines(text);
    let Some((_, header)) = lines.next() else {
        return Err(Error::InvalidDistribution("no entries".into()));
    };
    check_header(header, DISTRIBUTION_HEADER)?;
    let mut probs = Vec::new();
    for (line_no, line) in lines {
        let fields = split_fields(line_no, line, 2)?;
        let n: usize = parse_field(line_no, 1, fields[0], "photon number")?;
        if n != probs.len() {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                reason: format!("expected photon number {}, found {n}", probs.len()),
            });
        }
        let p: f64 = parse_field(line_no, 2, fields[1], "probability")?;
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::Parse {
                line: line_no,
                column: 2,
                reason: format!("probability {p} must be finite and nonnegative"),
            });
        }
        probs.push(p);
    }
    PhotonDistribution::unnormalized(probs)
}

pub fn read_distribution(path: &Path) -> Result<PhotonDistribution> {
    parse_distribution(&read_text(path)?)
}

pub fn write_distribution(dist: &PhotonDistribution, path: &Path) -> Result<()> {
    write_atomic(path, format_distribution(dist).as_bytes())
}

pub fn read_model_params(path: &Path) -> Result<PdcModelParams> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

pub fn write_model_params(params: &PdcModelParams, path: &Path) -> Result<()> {
    write_json(params, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub records: usize,
    pub label: String,
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BetaPolicyEcho {
    Fixed {
        beta: f64,
    },
    TargetEnergy {
        target: f64,
        rel_tolerance: f64,
        from_fit: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub n_max: usize,
    pub beta_policy: BetaPolicyEcho,
    pub max_iterations: usize,
    pub loglik_tolerance: f64,
    pub init: String,
    pub background: Option<String>,
    /// Simulation seed, when the input dataset records one.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSection {
    pub rho: Vec<f64>,
    pub normalization: f64,
    pub iterations: usize,
    pub converged: bool,
    pub beta_used: f64,
    pub mean_energy: f64,
    /// Absent when the loglikelihood is not finite.
    pub loglikelihood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub measured: f64,
    pub predicted: f64,
    /// Closed-form off-probability of the fitted model.
    pub model: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(rename = "N_ave")]
    pub n_ave: Option<f64>,
    pub x: Option<f64>,
    pub chi_square: f64,
    pub fidelity: Option<f64>,
    /// Description of the model the fidelity refers to.
    pub reference: Option<String>,
    pub reference_rho: Option<Vec<f64>>,
    pub per_eta: Vec<EtaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub input: InputDigest,
    pub config: ConfigEcho,
    pub fit: Option<EnergyFitResult>,
    pub reconstruction: ReconstructionSection,
    pub diagnostics: Diagnostics,
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Report(msg));
        let rec = &self.reconstruction;
        if rec.rho.is_empty() {
            return bad("empty distribution".into());
        }
        if let Some(p) = rec.rho.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return bad(format!(
                "distribution entry {p} is not a nonnegative number"
            ));
        }
        let sum = compensated_sum(rec.rho.iter().copied());
        if (sum - rec.normalization).abs() > NORMALIZATION_ECHO_TOLERANCE {
            return bad(format!(
                "distribution sums to {sum}, stated normalization is {}",
                rec.normalization
            ));
        }
        if let Some(reference) = &self.diagnostics.reference_rho {
            if reference.len() != rec.rho.len() {
                return bad(format!(
                    "reference distribution has {} entries, reconstruction {}",
                    reference.len(),
                    rec.rho.len()
                ));
            }
            if reference.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return bad("reference distribution has a negative or non-finite entry".into());
            }
        }
        for row in &self.diagnostics.per_eta {
            let probs = [Some(row.measured), Some(row.predicted), row.model];
            if probs
                .into_iter()
                .flatten()
                .any(|p| !(0.0..=1.0).contains(&p))
            {
                return bad(format!(
                    "off-probability outside [0, 1] at eta = {}",
                    row.eta
                ));
            }
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<PhotonDistribution> {
        PhotonDistribution::unnormalized(self.reconstruction.rho.clone())
    }
}

pub fn format_report(report: &Report) -> Result<String> {
    report.validate()?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

pub fn parse_report(text: &str) -> Result<Report> {
    let report: Report = serde_json::from_str(text)?;
    report.validate()?;
    Ok(report)
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    write_atomic(path, format_report(report)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<Report> {
    parse_report(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::EfficiencyGrid;

    fn sample() -> OnOffDataset {
        let grid = EfficiencyGrid::equally_spaced(30, 0.284).unwrap();
        let records = grid
            .etas()
            .iter()
            .enumerate()
            .map(|(k, &eta)| OnOffRecord::new(eta, 200_000, 199_000 - 6000 * k as u64).unwrap())
            .collect();
        OnOffDataset::new(records, "sample").unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let data = sample();
        let meta = Metadata::new().with("seed", 7).with("generator", "x");
        let (back, m) = parse_dataset(&format_dataset(&data, &meta)).unwrap();
        assert_eq!(back, data);
        assert_eq!(m.get("seed"), Some("7"));
        assert_eq!(m.get("label"), Some("sample"));
        assert_eq!(
            format_dataset(&back, &Metadata::new()),
            format_dataset(&data, &Metadata::new())
        );
    }

    #[test]
    fn awkward_reals_survive() {
        let etas = [0.1 + 0.2, 1e-300, 0.284 / 10.0 * 3.0, 1.0, 5e-324];
        let records = etas
            .iter()
            .map(|&e| OnOffRecord::new(e, 3, 1).unwrap())
            .collect();
        let data = OnOffDataset::new(records, "").unwrap();
        assert_eq!(
            parse_dataset(&format_dataset(&data, &Metadata::new()))
                .unwrap()
                .0,
            data
        );
    }

    #[test]
    fn off_count_above_windows_names_line() {
        let text = "eta,windows,off_count\n0.2,10,5\n0.5,1000,1001\n";
        match parse_dataset(text) {
            Err(Error::Parse {
                line: 3,
                column: 3,
                reason,
            }) => {
                assert!(reason.contains("exceeds"), "{reason}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_diagnosed() {
        assert!(matches!(
            parse_dataset("eta;windows;off\n0.5;10;5\n"),
            Err(Error::Header { .. })
        ));
        assert!(matches!(
            parse_distribution("k,p\n0,1\n"),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn malformed_lines_are_located() {
        let cases = [
            ("eta,windows,off_count\n0.5,ten,5\n", 2, 2),
            ("eta,windows,off_count\n# c\n\n0.5,10\n", 4, 3),
            ("eta,windows,off_count\n1.5,10,5\n", 2, 1),
            ("eta,windows,off_count\n0.5,0,0\n", 2, 2),
            ("eta,windows,off_count\n0.5,10,5\n0.5,10,4\n", 3, 1),
            ("eta,windows,off_count\n0.5,10,-1\n", 2, 3),
        ];
        for (text, line, column) in cases {
            match parse_dataset(text) {
                Err(Error::Parse {
                    line: l, column: c, ..
                }) => {
                    assert_eq!((l, c), (line, column), "{text:?}")
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_files_give_empty_datasets() {
        assert!(parse_dataset("").unwrap().0.is_empty());
        assert!(parse_dataset("# label: dark\neta,windows,off_count\n")
            .unwrap()
            .0
            .is_empty());
    }

    #[test]
    fn crlf_is_accepted() {
        let (d, _) = parse_dataset("eta,windows,off_count\r\n0.5,10,5\r\n").unwrap();
        assert_eq!(d.records()[0].off_count, 5);
    }

    #[test]
    fn distribution_round_trip() {
        let d = PhotonDistribution::new(vec![0.1, 0.7, 0.2 / 3.0, 1e-17]).unwrap();
        assert_eq!(parse_distribution(&format_distribution(&d)).unwrap(), d);
        assert!(parse_distribution("n,prob\n0,0.5\n2,0.5\n").is_err());
        assert!(parse_distribution("n,prob\n").is_err());
        assert!(parse_distribution("n,prob\n0,-0.1\n").is_err());
    }

    #[test]
    fn real_formatting_round_trips() {
        for x in [
            0.0,
            1.0,
            0.1 + 0.2,
            1e-5,
            9.99e-6,
            5e-324,
            1.7976931348623157e308,
            123456.789,
            1e16,
        ] {
            let text = format_real(x);
            assert_eq!(text.parse::<f64>().unwrap(), x, "{text}");
            assert!(text.len() < 30, "{text}");
        }
        assert_eq!(format_real(1e-7), "1e-7");
        assert_eq!(format_real(0.25), "0.25");
    }

    #[test]
    fn digest_matches_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
