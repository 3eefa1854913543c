use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, roc_svg, EvalConfig, OperatingPoint, RocPoint};
use crate::data::{augment, stack_context, AugmentConfig, Utterance};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Synthetic evaluation condition applied to the raw features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    /// Additive noise at a fixed feature-space SNR.
    Noisy,
    /// Random time shift, keyword kept inside the utterance.
    Shifted,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
            Condition::Shifted => "shifted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub conditions: Vec<Condition>,
    pub noisy_snr_db: f64,
    pub shift_frames: usize,
    pub seed: u64,
    /// Synthetic corpus size when no dataset is supplied.
    pub corpus_size: usize,
    /// Utterances of each kind held out for evaluation.
    pub holdout_positives: usize,
    pub holdout_negatives: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            conditions: vec![Condition::Clean, Condition::Noisy, Condition::Shifted],
            noisy_snr_db: 10.0,
            shift_frames: 20,
            seed: 0,
            corpus_size: 5000,
            holdout_positives: 500,
            holdout_negatives: 500,
        }
    }
}

/// Deterministic condition variant of `data`; each utterance draws from its
/// own stream keyed by `(seed, id)`.
pub fn apply_condition(data: &[Utterance], condition: Condition, cfg: &AblationConfig) -> Result<Vec<Utterance>> {
    let aug = match condition {
        Condition::Clean => return Ok(data.to_vec()),
        Condition::Noisy => AugmentConfig {
            snr_db: (cfg.noisy_snr_db, cfg.noisy_snr_db),
            max_shift: 0,
        },
        Condition::Shifted => AugmentConfig {
            snr_db: (f64::INFINITY, f64::INFINITY),
            max_shift: cfg.shift_frames,
        },
    };
    data.iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::from(u.id));
            augment(u, &aug, &mut rng)
        })
        .collect()
}

/// A named model; `None` marks a checkpoint that could not be found.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub name: String,
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// One operating point per condition; `None` when the model is absent.
    pub cells: Option<Vec<OperatingPoint>>,
    /// ROC under the first condition.
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub target_fa_per_hour: f64,
    pub conditions: Vec<Condition>,
    pub rows: Vec<AblationRow>,
}

/// Scores every present model under every condition and collects FR at the
/// target FA/h. Absent models are listed and skipped.
pub fn ablation_report(
    data: &[Utterance],
    models: &[ModelEntry],
    eval: &EvalConfig,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    eval.validate()?;
    if cfg.conditions.is_empty() {
        return Err(Error::config("no evaluation conditions"));
    }
    let present: Vec<&Checkpoint> = models.iter().filter_map(|m| m.checkpoint.as_ref()).collect();
    if present.windows(2).any(|w| w[0].frontend != w[1].frontend) {
        return Err(Error::config("checkpoints use different frontend configs"));
    }
    let mut variants = Vec::with_capacity(cfg.conditions.len());
    if let Some(first) = present.first() {
        let fe = &first.frontend;
        for &c in &cfg.conditions {
            variants.push(stack_context(&apply_condition(data, c, cfg)?, fe.left_context, fe.right_context));
        }
    }

    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let Some(ck) = &m.checkpoint else {
            log::warn!("model {} is absent", m.name);
            rows.push(AblationRow {
                name: m.name.clone(),
                cells: None,
                roc: Vec::new(),
            });
            continue;
        };
        let mut cells = Vec::with_capacity(variants.len());
        let mut roc = Vec::new();
        for (i, v) in variants.iter().enumerate() {
            let s = evaluate(&ck.params, v, eval)?;
            cells.push(s.operating_point);
            if i == 0 {
                roc = s.roc;
            }
        }
        rows.push(AblationRow {
            name: m.name.clone(),
            cells: Some(cells),
            roc,
        });
    }
    Ok(AblationReport {
        target_fa_per_hour: eval.target_fa_per_hour,
        conditions: cfg.conditions.clone(),
        rows,
    })
}

pub fn roc_csv(roc: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fr,fa_per_hour\n");
    for p in roc {
        writeln!(s, "{},{},{}", p.threshold, p.fr, p.fa_per_hour).expect("string write");
    }
    s
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# FR at {} FA/h\n", self.target_fa_per_hour);
        let header: Vec<&str> = self.conditions.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "| model | {} |", header.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(header.len()));
        let mut flagged = false;
        for r in &self.rows {
            let cells: Vec<String> = match &r.cells {
                Some(c) => c
                    .iter()
                    .map(|p| {
                        flagged |= !p.target_met;
                        format!("{:.2}%{}", 100.0 * p.fr, if p.target_met { "" } else { "*" })
                    })
                    .collect(),
                None => vec!["absent".to_string(); header.len()],
            };
            let _ = writeln!(s, "| {} | {} |", r.name, cells.join(" | "));
        }
        if flagged {
            s.push_str("\n\\* target not reached on this set; FR at the strictest threshold.\n");
        }
        let mut ranked: Vec<(&str, f64)> = self
            .rows
            .iter()
            .filter_map(|r| r.cells.as_ref().map(|c| (r.name.as_str(), c[0].fr)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        if !ranked.is_empty() {
            let names: Vec<&str> = ranked.iter().map(|r| r.0).collect();
            let _ = writeln!(
                s,
                "\nOrdering on {} (lowest FR first, informational): {}",
                self.conditions[0].name(),
                names.join(" < ")
            );
        }
        s
    }

    /// Writes `report.md`, `roc_<model>.csv`/`.svg` per present model and
    /// `roc_overlay.svg`. Returns the written paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put("report.md".into(), self.to_markdown())?;
        let cond = self.conditions[0].name();
        let mut series = Vec::new();
        for r in self.rows.iter().filter(|r| r.cells.is_some()) {
            put(format!("roc_{}.csv", r.name), roc_csv(&r.roc))?;
            put(
                format!("roc_{}.svg", r.name),
                roc_svg(&format!("{} ({cond})", r.name), &[(r.name.as_str(), r.roc.as_slice())]),
            )?;
            series.push((r.name.as_str(), r.roc.as_slice()));
        }
        put("roc_overlay.svg".into(), roc_svg(&format!("ROC ({cond})"), &series))?;
        Ok(written)
    }
}
