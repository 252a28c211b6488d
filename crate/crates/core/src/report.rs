//! Evaluation reports over clean and corrupted test sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_dataset, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{ece, ensemble_predict, nll_and_error, DEFAULT_ECE_BINS};
use crate::model::Model;
use crate::posterior::LatentStructure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub gamma: f64,
    pub components: usize,
    pub structure: LatentStructure,
    pub samples: usize,
    pub ensemble: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `None` on the clean set.
    pub corruption: Option<CorruptionSpec>,
    pub nll: f64,
    pub error: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub severity: u8,
    pub nll: f64,
    pub error: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub clean: MetricRow,
    pub rows: Vec<MetricRow>,
    /// Means over kinds at each severity present in `rows`.
    pub by_severity: Vec<SeverityRow>,
}

impl EvalReport {
    /// Mean NLL over every corrupted set.
    pub fn corrupted_nll(&self) -> f64 {
        self.rows.iter().map(|r| r.nll).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn corrupted_error(&self) -> f64 {
        self.rows.iter().map(|r| r.error).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let prefix = format!("{},{},{},{},{},{}", m.seed, m.gamma, m.components, m.structure, m.samples, m.ensemble);
        let mut out = String::from("seed,gamma,components,structure,samples,ensemble,kind,severity,nll,error,ece\n");
        let mut line = |kind: &str, sev: u8, nll: f64, err: f64, e: f64| {
            out.push_str(&format!("{prefix},{kind},{sev},{nll},{err},{e}\n"));
        };
        line("clean", 0, self.clean.nll, self.clean.error, self.clean.ece);
        for r in &self.rows {
            let c = r.corruption.expect("corrupted row");
            line(&c.kind.to_string(), c.severity, r.nll, r.error, r.ece);
        }
        for s in &self.by_severity {
            line("all", s.severity, s.nll, s.error, s.ece);
        }
        out
    }
}

fn row(models: &[Model], data: &Dataset, corruption: Option<CorruptionSpec>, samples: usize, seed: u64) -> Result<MetricRow> {
    // every set gets its own stream so rows do not depend on evaluation order
    let key = corruption.map_or(0, |c| 1 + c.kind as u64 * 8 + c.severity as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let p = ensemble_predict(models, &data.images, samples, &mut rng)?;
    let (nll, error) = nll_and_error(&p, &data.labels)?;
    Ok(MetricRow {
        corruption,
        nll,
        error,
        ece: ece(&p, &data.labels, DEFAULT_ECE_BINS)?,
    })
}

/// Evaluates a model, or a uniform ensemble, on the clean test set and on
/// each corruption in `suite`.
pub fn evaluate(
    models: &[Model],
    test: &Dataset,
    suite: &[CorruptionSpec],
    samples: usize,
    seed: u64,
    gamma: f64,
) -> Result<EvalReport> {
    let first = models.first().ok_or_else(|| Error::invalid("nothing to evaluate"))?;
    let meta = ReportMeta {
        seed,
        gamma,
        components: first.posterior.components(),
        structure: first.posterior.layout().structure(),
        samples,
        ensemble: models.len(),
    };
    let clean = row(models, test, None, samples, seed)?;
    let mut rows = Vec::with_capacity(suite.len());
    for spec in suite {
        rows.push(row(models, &corrupt_dataset(test, spec)?, Some(*spec), samples, seed)?);
    }
    let mut severities: Vec<u8> = rows.iter().filter_map(|r| r.corruption.map(|c| c.severity)).collect();
    severities.sort_unstable();
    severities.dedup();
    let by_severity = severities
        .into_iter()
        .map(|severity| {
            let sel: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.corruption.is_some_and(|c| c.severity == severity))
                .collect();
            let n = sel.len() as f64;
            SeverityRow {
                severity,
                nll: sel.iter().map(|r| r.nll).sum::<f64>() / n,
                error: sel.iter().map(|r| r.error).sum::<f64>() / n,
                ece: sel.iter().map(|r| r.ece).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(EvalReport {
        meta,
        clean,
        rows,
        by_severity,
    })
}
