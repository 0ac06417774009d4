//! Versioned output documents (tail reports, metric summaries, run
//! manifests) and the content hashing used for provenance auditing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tailflow::error::{Error, Result};
use tailflow::metrics::MetricSummary;
use tailflow::tail::TailReport;

pub const TAIL_REPORT_SCHEMA: &str = "tailflow-tailreport-v1";
pub const METRICS_SCHEMA: &str = "tailflow-metrics-v1";
pub const MANIFEST_SCHEMA: &str = "tailflow-manifest-v1";

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_sha256(&bytes))
}

/// SHA-256 of a byte string, hex-encoded.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TailReportDoc {
    schema: String,
    #[serde(flatten)]
    report: TailReport,
}

/// Writes a tail report as a versioned document.
pub fn save_tail_report(report: &TailReport, path: &Path) -> Result<()> {
    let doc = TailReportDoc {
        schema: TAIL_REPORT_SCHEMA.to_string(),
        report: report.clone(),
    };
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &doc)?;
    Ok(())
}

/// Reads a tail report back, checking the schema tag and re-validating
/// the representation invariants.
pub fn load_tail_report(path: &Path) -> Result<TailReport> {
    let file = File::open(path)?;
    let doc: TailReportDoc = serde_json::from_reader(BufReader::new(file))?;
    if doc.schema != TAIL_REPORT_SCHEMA {
        return Err(Error::Schema {
            expected: TAIL_REPORT_SCHEMA.to_string(),
            found: doc.schema,
        });
    }
    TailReport::new(
        doc.report.marginals.clone(),
        doc.report.d_l,
        doc.report.reorder.clone(),
    )
}

/// Flat key-value document of one evaluation: the metric summary plus the
/// oracle floor (when the generating spec was available) and the sampling
/// provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema: String,
    /// Mean negative log-likelihood of the test data under the model.
    pub nll: f64,
    pub area_light: Option<f64>,
    pub area_heavy: Option<f64>,
    pub tvar_light: Option<f64>,
    pub tvar_heavy: Option<f64>,
    /// `confusion[truth][predicted]`, 0 = light, 1 = heavy.
    pub confusion: [[usize; 2]; 2],
    pub area_skipped: usize,
    /// Mean negative log-density of the test data under the exact target,
    /// when the generating spec was given.
    pub oracle_nll: Option<f64>,
    pub n_flow_samples: usize,
    pub sample_seed: u64,
}

impl MetricsDoc {
    pub fn new(summary: &MetricSummary, oracle_nll: Option<f64>, n: usize, seed: u64) -> Self {
        MetricsDoc {
            schema: METRICS_SCHEMA.to_string(),
            nll: summary.nll,
            area_light: summary.area_light,
            area_heavy: summary.area_heavy,
            tvar_light: summary.tvar_light,
            tvar_heavy: summary.tvar_heavy,
            confusion: summary.confusion,
            area_skipped: summary.area_skipped,
            oracle_nll,
            n_flow_samples: n,
            sample_seed: seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let doc: MetricsDoc = serde_json::from_reader(BufReader::new(file))?;
        if doc.schema != METRICS_SCHEMA {
            return Err(Error::Schema {
                expected: METRICS_SCHEMA.to_string(),
                found: doc.schema,
            });
        }
        Ok(doc)
    }
}

/// Provenance record of one training run: configuration and input hashes,
/// seeds, wall time, and the final metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub variant: String,
    pub trial: usize,
    pub config_sha256: String,
    /// `(file name, sha256)` of every input the run consumed.
    pub inputs: Vec<(String, String)>,
    pub train_seed: u64,
    pub sample_seed: u64,
    pub wall_seconds: f64,
    pub best_val_nll: f64,
    pub metrics: MetricsDoc,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let doc: RunManifest = serde_json::from_reader(BufReader::new(file))?;
        if doc.schema != MANIFEST_SCHEMA {
            return Err(Error::Schema {
                expected: MANIFEST_SCHEMA.to_string(),
                found: doc.schema,
            });
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tailflow::tail::{MarginalTail, TailClass};

    #[test]
    fn sha256_matches_the_reference_vector() {
        // SHA-256 of the empty string is a published constant.
        assert_eq!(
            bytes_sha256(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn tail_report_documents_round_trip_and_revalidate() {
        let report = TailReport::new(
            vec![
                MarginalTail {
                    class: TailClass::Light,
                    index_estimate: None,
                    k_used: 12,
                },
                MarginalTail {
                    class: TailClass::Heavy,
                    index_estimate: Some(2.2),
                    k_used: 40,
                },
            ],
            1,
            vec![0, 1],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_tail_report(&report, &path).unwrap();
        let loaded = load_tail_report(&path).unwrap();
        assert_eq!(report, loaded);

        // A corrupted reorder must fail the re-validation on load.
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"reorder\": [\n    0,\n    1\n  ]", "\"reorder\": [0, 0]");
        std::fs::write(&path, text).unwrap();
        assert!(load_tail_report(&path).is_err());
    }
}
