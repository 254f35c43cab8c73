//! Annotated pair sets on disk and their parallel evaluation.
//!
//! A dataset directory holds `pairs.jsonl` (one annotation per line) and one
//! `<id>.fstk` feature stack per image id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cyclecorr::features::{FeatureStack, HeadParams};
use cyclecorr::matching::MatchConfig;
use cyclecorr::search::{evaluate_pair, summarize, PairAnnotation, PairRecord, PckBasis, PckTable, SyntheticDataset};
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::format::{load_stack, save_stack};
use crate::fsio;

pub const PAIRS_FILE: &str = "pairs.jsonl";

pub fn stack_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.fstk"))
}

pub fn parse_pairs(path: &Path, text: &str) -> Result<Vec<PairAnnotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|source| CliError::Json {
                path: path.to_path_buf(),
                line: n + 1,
                source,
            })
        })
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairAnnotation>> {
    parse_pairs(path, &fsio::read_text(path)?)
}

pub fn render_pairs(pairs: &[PairAnnotation]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("annotations serialize") + "\n")
        .collect()
}

/// An annotation list with every stack it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: Vec<PairAnnotation>,
    pub stacks: BTreeMap<String, FeatureStack>,
}

impl From<SyntheticDataset> for Dataset {
    fn from(ds: SyntheticDataset) -> Self {
        Self {
            annotations: ds.annotations,
            stacks: ds.stacks,
        }
    }
}

impl Dataset {
    /// Reads `pairs` (default `<dir>/pairs.jsonl`) and the stacks it names
    /// from `dir`. A missing or malformed stack is reported with the first
    /// pair that references it.
    pub fn load(dir: &Path, pairs: Option<&Path>) -> Result<Self> {
        let pairs_path = pairs.map_or_else(|| dir.join(PAIRS_FILE), Path::to_path_buf);
        let annotations = read_pairs(&pairs_path)?;
        let mut first_use: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, a) in annotations.iter().enumerate() {
            first_use.entry(&a.src_id).or_insert(i);
            first_use.entry(&a.trg_id).or_insert(i);
        }
        let stacks = first_use
            .par_iter()
            .map(|(&id, &i)| {
                load_stack(&stack_path(dir, id))
                    .map(|s| (id.to_string(), s))
                    .map_err(|e| pair_error(i, &annotations[i], e))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { annotations, stacks })
    }

    /// Writes `pairs.jsonl` and every stack into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.stacks
            .par_iter()
            .try_for_each(|(id, s)| save_stack(&stack_path(dir, id), s))?;
        fsio::write_atomic(&dir.join(PAIRS_FILE), render_pairs(&self.annotations).as_bytes())
    }

    pub fn pair(&self, index: usize) -> Result<(&PairAnnotation, &FeatureStack, &FeatureStack)> {
        let a = self.annotations.get(index).ok_or_else(|| {
            CliError::Usage(format!("pair index {index} out of range ({} pairs)", self.annotations.len()))
        })?;
        let stack = |id: &str| {
            self.stacks
                .get(id)
                .ok_or_else(|| pair_error(index, a, CliError::Usage(format!("no stack for `{id}`"))))
        };
        Ok((a, stack(&a.src_id)?, stack(&a.trg_id)?))
    }
}

fn pair_error(index: usize, a: &PairAnnotation, e: CliError) -> CliError {
    CliError::Pair {
        index,
        src: a.src_id.clone(),
        trg: a.trg_id.clone(),
        source: Box::new(e),
    }
}

/// PCK of every pair, evaluated in parallel; records keep annotation order.
pub fn evaluate_dataset(
    ds: &Dataset,
    cfg: &MatchConfig,
    head: Option<&HeadParams>,
    alphas: &[f64],
    basis: PckBasis,
) -> Result<(PckTable, Vec<PairRecord>)> {
    let records = ds
        .annotations
        .par_iter()
        .enumerate()
        .map(|(i, _)| {
            let (a, src, trg) = ds.pair(i)?;
            evaluate_pair(a, src, trg, cfg, head, alphas, basis).map_err(|e| pair_error(i, a, e.into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = summarize(&records, alphas, basis)?;
    Ok((table, records))
}

/// Aligned text table: one row per category, then the overall mean, in percent.
pub fn render_table(table: &PckTable) -> String {
    let basis = match table.basis {
        PckBasis::Img => "img",
        PckBasis::Bbox => "bbox",
    };
    let headers: Vec<String> = table.alphas.iter().map(|a| format!("PCK@{a:.2}")).collect();
    let mut rows: Vec<(String, &[f64])> = table
        .per_category
        .iter()
        .map(|(c, v)| (c.clone(), v.as_slice()))
        .collect();
    rows.push((format!("all ({} pairs)", table.pairs), &table.mean));
    let name_width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(8);
    let col = headers.iter().map(|h| h.len()).max().unwrap_or(0).max(6);

    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", format!("[{basis}]"));
    for h in &headers {
        let _ = write!(out, "  {h:>col$}");
    }
    out.push('\n');
    for (name, values) in rows {
        let _ = write!(out, "{name:<name_width$}");
        for v in values {
            let _ = write!(out, "  {:>col$.1}", 100.0 * v);
        }
        out.push('\n');
    }
    out
}

/// File name of a pair's audit record.
pub fn record_name(index: usize, record: &PairRecord) -> String {
    format!("{index:05}_{}__{}.json", record.src_id, record.trg_id)
}
