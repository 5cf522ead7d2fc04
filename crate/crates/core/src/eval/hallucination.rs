//! Marker-vocabulary counts in generated reports.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Variant};
use crate::error::{Error, Result};
use crate::trainer::{generate_report, select_tiles, Stage2Model, Strategy};

pub fn count_marker_tokens(ids: &[usize], markers: &BTreeSet<usize>) -> usize {
    ids.iter().filter(|i| markers.contains(i)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub case_id: String,
    pub text: String,
    pub marker_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub training: Variant,
    pub strategy: Strategy,
    pub reports: Vec<GeneratedReport>,
    pub mean: f64,
    /// Population standard deviation of the counts.
    pub std: f64,
    pub fraction_zero: f64,
}

impl HallucinationReport {
    pub fn from_reports(training: Variant, strategy: Strategy, reports: Vec<GeneratedReport>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("no generated reports"));
        }
        let n = reports.len() as f64;
        let counts: Vec<f64> = reports.iter().map(|r| r.marker_count as f64).collect();
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        let fraction_zero = reports.iter().filter(|r| r.marker_count == 0).count() as f64 / n;
        Ok(HallucinationReport {
            training,
            strategy,
            reports,
            mean,
            std: var.sqrt(),
            fraction_zero,
        })
    }
}

/// Generates a report for every case in `items` and counts marker tokens.
pub fn hallucination_report(
    model: &Stage2Model,
    training: Variant,
    dataset: &Dataset,
    items: &[usize],
    max_tiles: usize,
    max_len: usize,
    strategy: Strategy,
) -> Result<HallucinationReport> {
    let markers = &dataset.marker_ids;
    let reports = items
        .iter()
        .map(|&i| {
            let case = &dataset.cases[i];
            let tiles = select_tiles(&case.tiles, max_tiles, None)?;
            let ids = generate_report(model, &tiles, max_len, strategy)?;
            Ok(GeneratedReport {
                case_id: case.case_id.clone(),
                text: dataset.tokenizer.detokenize(&ids),
                marker_count: count_marker_tokens(&ids, markers),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HallucinationReport::from_reports(training, strategy, reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_marker_tokens() {
        let m: BTreeSet<usize> = [7, 9].into();
        assert_eq!(count_marker_tokens(&[1, 2, 3], &m), 0);
        assert_eq!(count_marker_tokens(&[7, 9, 7, 4], &m), 3);
    }

    #[test]
    fn aggregates() {
        let r = |c| GeneratedReport { case_id: String::new(), text: String::new(), marker_count: c };
        let h = HallucinationReport::from_reports(Variant::Full, Strategy::Greedy, vec![r(0), r(2)]).unwrap();
        assert_eq!((h.mean, h.std, h.fraction_zero), (1.0, 1.0, 0.5));
    }
}
