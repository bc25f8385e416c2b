//! Rendering and persistence of estimate reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::search::{EstimateReport, VerificationReport};

/// Write `contents` to a sibling temporary file, then rename it into place,
/// so a failed run never leaves a truncated file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

impl EstimateReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: EstimateReport = load_json(path)?;
        if r.schema_version != crate::search::REPORT_SCHEMA_VERSION {
            return Err(Error::Unsupported(format!(
                "report schema version {} (expected {})",
                r.schema_version,
                crate::search::REPORT_SCHEMA_VERSION
            )));
        }
        Ok(r)
    }

    /// Every evaluated truncation level as tab-separated rows.
    pub fn sweep_tsv(&self) -> String {
        let mut s = String::from("layer\tM\tworst_q\tfold_i\tfold_j\tequivalent\tbisection\n");
        for l in &self.per_layer {
            for p in &l.pairs {
                for t in &p.trace {
                    let _ = writeln!(
                        s,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        l.layer, t.m, t.worst_q, p.i, p.j, t.equivalent, t.bisection
                    );
                }
            }
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let metric = format!("{:?}", self.config.metric).to_lowercase();
        let _ = writeln!(
            s,
            "{} samples, {} folds, metric {metric}, {} bootstrap resamples, seed {}",
            self.n_samples, self.config.folds, self.config.n_bootstrap, self.config.master_seed
        );
        let vals: Vec<String> = self.per_fold_val_q.iter().map(|q| format!("{q:.4}")).collect();
        let _ = writeln!(
            s,
            "validation {metric} per fold: {} (mean {:.4}); threshold {:.4}",
            vals.join(", "),
            self.mean_val_q,
            self.q_threshold
        );
        let _ = writeln!(s, "{:<6} {:>6} {:>8} {:>8} {:>7}  per-pair minima", "layer", "width", "mean", "final", "spread");
        for l in &self.per_layer {
            let found: Vec<String> = l.m_found().iter().map(|m| m.to_string()).collect();
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>8.2} {:>8} {:>7.3}  [{}]{}",
                l.layer,
                l.width,
                l.m_mean,
                l.m_final,
                l.relative_spread,
                found.join(", "),
                if l.non_monotone { "  (non-monotone)" } else { "" }
            );
        }
        let _ = writeln!(
            s,
            "universal bounds: N_in + N_out + 2 = {}, max(N_in, N_out) = {}",
            self.universal_bounds.grip, self.universal_bounds.cai
        );
        s
    }
}

impl VerificationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let metric = format!("{:?}", self.metric).to_lowercase();
        let widths: Vec<String> = self.widths.iter().map(|(l, w)| format!("layer {l} -> {w}")).collect();
        let _ = writeln!(s, "retrained widths: {}", widths.join(", "));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let _ = writeln!(
            s,
            "validation {metric}: original {:.4}, retrained {:.4}",
            mean(&self.s_val_q),
            mean(&self.d_val_q)
        );
        let _ = writeln!(
            s,
            "test {metric}: original {:.4}, retrained {:.4}",
            mean(&self.s_test_q),
            mean(&self.d_test_q)
        );
        let _ = writeln!(
            s,
            "worst pairwise agreement {:.4} vs threshold {:.4}: {}",
            self.worst_agreement,
            self.threshold,
            if self.equivalent { "equivalent" } else { "not equivalent" }
        );
        s
    }
}
