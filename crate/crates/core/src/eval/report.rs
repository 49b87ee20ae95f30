use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::questionnaire::{aggregate_questionnaire, mean_ssim, round_half_up, QuestionnaireRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkResult {
    pub network: String,
    /// Percent of preference votes.
    pub favorable_rating: Option<f64>,
    pub fid: Option<f64>,
    pub mean_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub networks: Vec<NetworkResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image: Vec<QuestionnaireRecord>,
}

impl EvalReport {
    /// Ratings and mean SSIM for networks "A" and "B" from questionnaire rows.
    pub fn from_questionnaire(records: &[QuestionnaireRecord]) -> Result<Self> {
        let (ra, rb) = aggregate_questionnaire(records)?;
        let (sa, sb) = mean_ssim(records)?;
        Ok(Self {
            networks: vec![
                NetworkResult {
                    network: "A".into(),
                    favorable_rating: Some(ra),
                    fid: None,
                    mean_ssim: Some(sa),
                },
                NetworkResult {
                    network: "B".into(),
                    favorable_rating: Some(rb),
                    fid: None,
                    mean_ssim: Some(sb),
                },
            ],
            per_image: records.to_vec(),
        })
    }

    pub fn network_mut(&mut self, name: &str) -> &mut NetworkResult {
        if let Some(i) = self.networks.iter().position(|n| n.network == name) {
            return &mut self.networks[i];
        }
        self.networks.push(NetworkResult {
            network: name.into(),
            favorable_rating: None,
            fid: None,
            mean_ssim: None,
        });
        self.networks.last_mut().unwrap()
    }

    pub fn render_table(&self) -> String {
        fn cell(v: Option<f64>, decimals: u32, suffix: &str) -> String {
            match v {
                Some(x) => format!(
                    "{:.prec$}{suffix}",
                    round_half_up(x, decimals),
                    prec = decimals as usize
                ),
                None => "n/a".into(),
            }
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>18} {:>10} {:>10}",
            "network", "favorable rating", "FID", "SSIM"
        );
        for n in &self.networks {
            let _ = writeln!(
                s,
                "{:<10} {:>18} {:>10} {:>10}",
                n.network,
                cell(n.favorable_rating, 2, "%"),
                cell(n.fid, 2, ""),
                cell(n.mean_ssim, 5, "")
            );
        }
        if !self.per_image.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>8} {:>8} {:>8}",
                "image", "likes A", "likes B", "SSIM A", "SSIM B"
            );
            for r in &self.per_image {
                let _ = writeln!(
                    s,
                    "{:<6} {:>8} {:>8} {:>8.4} {:>8.4}",
                    r.image_id, r.likes_a, r.likes_b, r.ssim_a, r.ssim_b
                );
            }
        }
        s
    }
}

/// Human-readable companion of a JSON report path.
pub fn table_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("txt")
}

/// Writes the report as JSON to `path` and as a text table next to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    std::fs::write(table_path(path), report.render_table())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
