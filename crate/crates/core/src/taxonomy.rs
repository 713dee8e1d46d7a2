//! Four-way correctness taxonomy of parallel examples.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;
use crate::model::{greedy_decode, Parameters, RoutingTrace};
use crate::scalar::Scalar;
use crate::synth::{is_digit, ParallelExample};

/// Source/target correctness class: first letter is the source language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyLabel {
    Cc,
    Ci,
    Ic,
    Ii,
}

impl TaxonomyLabel {
    pub const ALL: [TaxonomyLabel; 4] = [Self::Cc, Self::Ci, Self::Ic, Self::Ii];

    pub fn from_correctness(src_correct: bool, tgt_correct: bool) -> Self {
        match (src_correct, tgt_correct) {
            (true, true) => Self::Cc,
            (true, false) => Self::Ci,
            (false, true) => Self::Ic,
            (false, false) => Self::Ii,
        }
    }

    pub fn src_correct(self) -> bool {
        matches!(self, Self::Cc | Self::Ci)
    }

    pub fn tgt_correct(self) -> bool {
        matches!(self, Self::Cc | Self::Ic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cc => "cc",
            Self::Ci => "ci",
            Self::Ic => "ic",
            Self::Ii => "ii",
        }
    }
}

impl fmt::Display for TaxonomyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Final run of digit tokens after the last answer marker. Without a marker the
/// whole response is searched.
pub fn extract_answer(response: &[u32], marker: u32) -> Option<&[u32]> {
    let start = response
        .iter()
        .rposition(|&t| t == marker)
        .map_or(0, |i| i + 1);
    let tail = &response[start..];
    let end = tail.iter().rposition(|&t| is_digit(t))? + 1;
    let begin = tail[..end]
        .iter()
        .rposition(|&t| !is_digit(t))
        .map_or(0, |i| i + 1);
    Some(&tail[begin..end])
}

fn normalize(digits: &[u32]) -> &[u32] {
    let first = digits.iter().position(|&d| d != 0).unwrap_or(digits.len());
    &digits[first..]
}

/// Exact-match judge with leading-zero normalization. Unextractable answers are
/// judged incorrect.
pub fn judge_exact(response: &[u32], gold: &[u32], marker: u32) -> bool {
    match extract_answer(response, marker) {
        Some(ans) if gold.iter().all(|&t| is_digit(t)) && !gold.is_empty() => {
            normalize(ans) == normalize(gold)
        }
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionReport {
    pub n: usize,
    pub counts: BTreeMap<TaxonomyLabel, usize>,
    pub proportions: BTreeMap<TaxonomyLabel, f64>,
}

impl ProportionReport {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a TaxonomyLabel>) -> Self {
        let mut counts: BTreeMap<TaxonomyLabel, usize> =
            TaxonomyLabel::ALL.iter().map(|&l| (l, 0)).collect();
        let mut n = 0;
        for l in labels {
            *counts.get_mut(l).unwrap() += 1;
            n += 1;
        }
        let proportions = counts
            .iter()
            .map(|(&l, &c)| (l, if n == 0 { 0.0 } else { c as f64 / n as f64 }))
            .collect();
        Self {
            n,
            counts,
            proportions,
        }
    }

    pub fn proportion(&self, label: TaxonomyLabel) -> f64 {
        self.proportions[&label]
    }
}

pub struct Categorized<T> {
    pub examples: Vec<ParallelExample>,
    pub report: ProportionReport,
    pub traces_src: Vec<RoutingTrace<T>>,
    pub traces_tgt: Vec<RoutingTrace<T>>,
}

/// Decodes every source and target prompt, judges both responses against the
/// gold answer and labels the example.
pub fn categorize<T: Scalar>(
    dataset: &[ParallelExample],
    params: &Parameters<T>,
    max_new: usize,
    marker: u32,
) -> Result<Categorized<T>> {
    let mut examples = Vec::with_capacity(dataset.len());
    let mut traces_src = Vec::with_capacity(dataset.len());
    let mut traces_tgt = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let src = greedy_decode(params, &ex.prompt_src, max_new)?;
        let tgt = greedy_decode(params, &ex.prompt_tgt, max_new)?;
        let label = TaxonomyLabel::from_correctness(
            judge_exact(&src.tokens, &ex.gold_answer, marker),
            judge_exact(&tgt.tokens, &ex.gold_answer, marker),
        );
        let mut out = ex.clone();
        out.response_src = Some(src.tokens);
        out.response_tgt = Some(tgt.tokens);
        out.label = Some(label);
        examples.push(out);
        traces_src.push(src.trace);
        traces_tgt.push(tgt.trace);
    }
    let report = ProportionReport::from_labels(examples.iter().filter_map(|e| e.label.as_ref()));
    Ok(Categorized {
        examples,
        report,
        traces_src,
        traces_tgt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    NonFinite,
    AboveP99,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRecord {
    pub id: String,
    pub ppl_src: f64,
    pub ppl_tgt: f64,
}

impl PplRecord {
    pub fn new(id: impl Into<String>, ppl_src: f64, ppl_tgt: f64) -> Self {
        Self {
            id: id.into(),
            ppl_src,
            ppl_tgt,
        }
    }

    /// Cross-lingual difficulty gap.
    pub fn delta(&self) -> f64 {
        self.ppl_tgt - self.ppl_src
    }

    fn is_finite(&self) -> bool {
        self.ppl_src.is_finite() && self.ppl_tgt.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplTaxonomy {
    /// Aligned with the input records; `None` for excluded records.
    pub labels: Vec<Option<TaxonomyLabel>>,
    pub excluded: Vec<Option<ExclusionReason>>,
    pub p99_src: f64,
    pub p99_tgt: f64,
    pub median_src: f64,
    pub median_delta: f64,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile_nearest_rank(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Perplexity-proxy labels. Non-finite records and records above the 99th
/// percentile of either perplexity are excluded before the medians are taken;
/// then source-correct means `ppl_src < median(ppl_src)` and target-incorrect
/// means `delta > median(delta)`.
pub fn ppl_taxonomy(records: &[PplRecord]) -> Result<PplTaxonomy> {
    let finite: Vec<&PplRecord> = records.iter().filter(|r| r.is_finite()).collect();
    if finite.len() < 4 {
        return Err(Error::Analysis(format!(
            "{} finite perplexity records, need at least 4",
            finite.len()
        )));
    }
    let p99_src =
        percentile_nearest_rank(&finite.iter().map(|r| r.ppl_src).collect::<Vec<_>>(), 99.0);
    let p99_tgt =
        percentile_nearest_rank(&finite.iter().map(|r| r.ppl_tgt).collect::<Vec<_>>(), 99.0);
    let excluded: Vec<Option<ExclusionReason>> = records
        .iter()
        .map(|r| {
            if !r.is_finite() {
                Some(ExclusionReason::NonFinite)
            } else if r.ppl_src > p99_src || r.ppl_tgt > p99_tgt {
                Some(ExclusionReason::AboveP99)
            } else {
                None
            }
        })
        .collect();
    let kept: Vec<&PplRecord> = records
        .iter()
        .zip(&excluded)
        .filter(|(_, e)| e.is_none())
        .map(|(r, _)| r)
        .collect();
    if kept.len() < 4 {
        return Err(Error::Analysis(format!(
            "{} usable perplexity records, need at least 4",
            kept.len()
        )));
    }
    let median_src = median(&kept.iter().map(|r| r.ppl_src).collect::<Vec<_>>());
    let median_delta = median(&kept.iter().map(|r| r.delta()).collect::<Vec<_>>());
    let labels = records
        .iter()
        .zip(&excluded)
        .map(|(r, e)| {
            e.is_none().then(|| {
                TaxonomyLabel::from_correctness(r.ppl_src < median_src, r.delta() <= median_delta)
            })
        })
        .collect();
    Ok(PplTaxonomy {
        labels,
        excluded,
        p99_src,
        p99_tgt,
        median_src,
        median_delta,
    })
}
