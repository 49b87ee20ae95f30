use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the two-alternative preference study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRecord {
    pub image_id: String,
    #[serde(rename = "likes_A")]
    pub likes_a: u32,
    #[serde(rename = "likes_B")]
    pub likes_b: u32,
    #[serde(rename = "ssim_A")]
    pub ssim_a: f64,
    #[serde(rename = "ssim_B")]
    pub ssim_b: f64,
}

impl QuestionnaireRecord {
    pub fn new(image_id: impl Into<String>, likes_a: u32, likes_b: u32, ssim_a: f64, ssim_b: f64) -> Self {
        Self {
            image_id: image_id.into(),
            likes_a,
            likes_b,
            ssim_a,
            ssim_b,
        }
    }

    pub fn respondents(&self) -> u32 {
        self.likes_a + self.likes_b
    }
}

/// Rounds half away from zero at `decimals` places, going through the
/// shortest decimal representation so that e.g. `0.125` rounds to `0.13`.
pub fn round_half_up(value: f64, decimals: u32) -> f64 {
    let text = format!("{value}");
    let Some(dot) = text.find('.') else {
        return value;
    };
    let frac = &text[dot + 1..];
    if frac.len() <= decimals as usize || text.contains('e') {
        let scale = 10f64.powi(decimals as i32);
        return (value * scale).round() / scale;
    }
    let kept = &text[..dot + 1 + decimals as usize];
    let next = frac.as_bytes()[decimals as usize];
    let base: f64 = kept.parse().unwrap_or(value);
    if next >= b'5' {
        let step = 10f64.powi(-(decimals as i32));
        let bumped = if value < 0.0 { base - step } else { base + step };
        format!("{bumped:.prec$}", prec = decimals as usize)
            .parse()
            .unwrap_or(bumped)
    } else {
        base
    }
}

/// Favorable ratings in percent, unrounded.
pub fn favorable_ratings(records: &[QuestionnaireRecord]) -> Result<(f64, f64)> {
    let first = records
        .first()
        .ok_or_else(|| Error::validation("records", "no questionnaire records"))?;
    let respondents = first.respondents();
    if let Some(bad) = records.iter().find(|r| r.respondents() != respondents) {
        return Err(Error::validation(
            "records",
            format!(
                "image {} has {} responses, image {} has {respondents}",
                bad.image_id,
                bad.respondents(),
                first.image_id
            ),
        ));
    }
    let a: u64 = records.iter().map(|r| r.likes_a as u64).sum();
    let b: u64 = records.iter().map(|r| r.likes_b as u64).sum();
    let total = (a + b) as f64;
    if total == 0.0 {
        return Err(Error::validation("records", "no responses recorded"));
    }
    Ok((100.0 * a as f64 / total, 100.0 * b as f64 / total))
}

/// Favorable ratings in percent, rounded half-up to 2 decimals.
pub fn aggregate_questionnaire(records: &[QuestionnaireRecord]) -> Result<(f64, f64)> {
    let (a, b) = favorable_ratings(records)?;
    Ok((round_half_up(a, 2), round_half_up(b, 2)))
}

pub fn mean_ssim(records: &[QuestionnaireRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::validation("records", "no questionnaire records"));
    }
    let n = records.len() as f64;
    let a = records.iter().map(|r| r.ssim_a).sum::<f64>() / n;
    let b = records.iter().map(|r| r.ssim_b).sum::<f64>() / n;
    Ok((a, b))
}

/// Parses a comma- or tab-separated table with a header row naming
/// `image_id, likes_A, likes_B, ssim_A, ssim_B` (any order).
pub fn parse_questionnaire(text: &str) -> Result<Vec<QuestionnaireRecord>> {
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<QuestionnaireRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Parse(format!("questionnaire row {}: {e}", i + 1)))?;
        if !rec.ssim_a.is_finite() || !rec.ssim_b.is_finite() {
            return Err(Error::Parse(format!("questionnaire row {}: non-finite SSIM", i + 1)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::validation("questionnaire", "no rows"));
    }
    Ok(out)
}

pub fn load_questionnaire(path: &Path) -> Result<Vec<QuestionnaireRecord>> {
    parse_questionnaire(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie() {
        let r = [QuestionnaireRecord::new("a", 26, 26, 0.1, 0.2)];
        assert_eq!(aggregate_questionnaire(&r).unwrap(), (50.0, 50.0));
    }

    #[test]
    fn single_row() {
        let r = [QuestionnaireRecord::new("a", 8, 44, 0.3146, 0.2141)];
        assert_eq!(aggregate_questionnaire(&r).unwrap(), (15.38, 84.62));
        assert_eq!(mean_ssim(&r).unwrap(), (0.3146, 0.2141));
    }

    #[test]
    fn inconsistent_counts() {
        let r = [
            QuestionnaireRecord::new("a", 8, 44, 0.0, 0.0),
            QuestionnaireRecord::new("b", 8, 40, 0.0, 0.0),
        ];
        assert!(aggregate_questionnaire(&r).is_err());
        assert!(mean_ssim(&[]).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(39.615384615, 2), 39.62);
        assert_eq!(round_half_up(0.265105, 5), 0.26511);
        assert_eq!(round_half_up(2.0, 2), 2.0);
    }

    #[test]
    fn parses_csv_and_tsv() {
        let csv = "image_id,likes_A,likes_B,ssim_A,ssim_B\na,8,44,0.3146,0.2141\n";
        let tsv = "image_id\tssim_A\tssim_B\tlikes_A\tlikes_B\na\t0.3146\t0.2141\t8\t44\n";
        assert_eq!(parse_questionnaire(csv).unwrap(), parse_questionnaire(tsv).unwrap());
        assert!(parse_questionnaire("image_id,likes_A\na,1\n").is_err());
    }
}
