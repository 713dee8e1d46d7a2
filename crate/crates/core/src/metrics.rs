//! Evaluation metrics, correlation, divergence reports and FLOPs accounting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, Parameters, RoutingTrace};
use crate::routing::{LayerRange, TaskExpertMap};
use crate::scalar::Scalar;
use crate::synth::ParallelExample;
use crate::taxonomy::judge_exact;

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

impl Side {
    pub fn prompt(self, ex: &ParallelExample) -> &[u32] {
        match self {
            Side::Src => &ex.prompt_src,
            Side::Tgt => &ex.prompt_tgt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Src => "src",
            Side::Tgt => "tgt",
        }
    }
}

/// Fraction of responses judged correct.
pub fn accuracy_of(responses: &[Vec<u32>], golds: &[&[u32]], marker: u32) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let hits = responses
        .iter()
        .zip(golds)
        .filter(|(r, g)| judge_exact(r, g, marker))
        .count();
    hits as f64 / responses.len() as f64
}

/// Accuracy, decoded responses and their traces.
pub type EvalDecode<T> = (f64, Vec<Vec<u32>>, Vec<RoutingTrace<T>>);

/// Greedy-decodes every prompt on one side and returns the accuracy plus the
/// decoded responses and their traces.
pub fn eval_decode<T: Scalar>(
    params: &Parameters<T>,
    eval: &[ParallelExample],
    side: Side,
    max_new: usize,
    marker: u32,
) -> Result<EvalDecode<T>> {
    if eval.is_empty() {
        return Err(Error::Input("empty eval set".into()));
    }
    let mut responses = Vec::with_capacity(eval.len());
    let mut traces = Vec::with_capacity(eval.len());
    for ex in eval {
        let d = greedy_decode(params, side.prompt(ex), max_new)?;
        responses.push(d.tokens);
        traces.push(d.trace);
    }
    let golds: Vec<&[u32]> = eval.iter().map(|e| e.gold_answer.as_slice()).collect();
    Ok((accuracy_of(&responses, &golds, marker), responses, traces))
}

pub fn eval_accuracy<T: Scalar>(
    params: &Parameters<T>,
    eval: &[ParallelExample],
    side: Side,
    max_new: usize,
    marker: u32,
) -> Result<f64> {
    Ok(eval_decode(params, eval, side, max_new, marker)?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Fraction of top-k slots occupied by task experts.
    #[default]
    Slots,
    /// Router mass placed on task experts.
    Mass,
}

/// Task-expert selection rate over generated positions and the map's layers
/// that have a non-empty expert set.
pub fn selection_rate<T: Scalar>(
    traces: &[RoutingTrace<T>],
    map: &TaskExpertMap,
    top_k: usize,
    all_layers: bool,
    mode: SelectionMode,
) -> f64 {
    let mut hit = 0.0;
    let mut total = 0.0;
    for l in map.layers(all_layers) {
        let set = map.expert_ids(l);
        if set.is_empty() {
            continue;
        }
        for trace in traces {
            for &t in &trace.generated_positions {
                match mode {
                    SelectionMode::Slots => {
                        let sel = trace.selected(l, t, top_k);
                        hit += sel.iter().filter(|e| set.contains(e)).count() as f64;
                        total += sel.len() as f64;
                    }
                    SelectionMode::Mass => {
                        let p = trace.dist(l, t);
                        hit += set.iter().map(|&e| p[e].to_f64_lossless()).sum::<f64>();
                        total += 1.0;
                    }
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        hit / total
    }
}

/// Sample Pearson correlation and its two-sided p-value from the t-distribution
/// with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Analysis("pearson needs at least 3 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Analysis("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Analysis(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsInput {
    /// Tokens per forward pass.
    pub b: u64,
    pub l: u64,
    pub k: u64,
    pub d_m: u64,
    pub d_e: u64,
    pub r: u64,
    pub e: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub base: u128,
    pub lora: u128,
    pub align: u128,
    /// `base + lora`; alignment is reported separately.
    pub total: u128,
}

/// Training FLOPs of the activated experts, their adapters and the alignment
/// term, in exact integer arithmetic.
pub fn flops_estimate(inp: FlopsInput) -> FlopsReport {
    let [b, l, k, dm, de, r, e] =
        [inp.b, inp.l, inp.k, inp.d_m, inp.d_e, inp.r, inp.e].map(u128::from);
    let base = 6 * b * l * k * dm * de;
    let lora = 4 * b * l * k * r * (dm + de);
    let align = 2 * b * l * e;
    FlopsReport {
        base,
        lora,
        align,
        total: base + lora,
    }
}

/// GFLOPs rounded to one decimal, as text.
pub fn gflops(flops: u128) -> String {
    // round half up on the exact integer
    let tenths = (flops + 50_000_000) / 100_000_000;
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub method: String,
    pub divergence: Vec<f64>,
    pub mid_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub mid_layers: LayerRange,
    pub methods: Vec<MethodProfile>,
}

impl DivergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,method,divergence\n");
        for m in &self.methods {
            for (l, d) in m.divergence.iter().enumerate() {
                out.push_str(&format!("{l},{},{d:?}\n", m.method));
            }
        }
        out
    }

    pub fn method(&self, name: &str) -> Option<&MethodProfile> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Per-layer divergence of several methods with the middle-layer mean of each.
pub fn divergence_report(
    profiles: &[(String, Vec<f64>)],
    mid_layers: LayerRange,
) -> Result<DivergenceReport> {
    let n_layers = profiles.first().map_or(0, |p| p.1.len());
    if mid_layers.end() >= n_layers {
        return Err(Error::Analysis("middle layers outside the profile".into()));
    }
    let mut methods = Vec::with_capacity(profiles.len());
    for (name, prof) in profiles {
        if prof.len() != n_layers {
            return Err(Error::LengthMismatch(prof.len(), n_layers));
        }
        let mid = &prof[mid_layers.start()..=mid_layers.end()];
        methods.push(MethodProfile {
            method: name.clone(),
            divergence: prof.clone(),
            mid_mean: mid.iter().sum::<f64>() / mid.len() as f64,
        });
    }
    Ok(DivergenceReport {
        mid_layers,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::ScoredExpert;
    use crate::tensor::Matrix;
    use std::collections::BTreeMap;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn table_flops() {
        let inp = FlopsInput {
            b: 4096,
            l: 16,
            k: 8,
            d_m: 2048,
            d_e: 1024,
            r: 16,
            e: 64,
        };
        let f = flops_estimate(inp);
        assert_eq!(f.base, 6_597_069_766_656);
        assert_eq!(f.lora, 103_079_215_104);
        assert_eq!(f.align, 8_388_608);
        assert_eq!(gflops(f.base), "6597.1");
        assert_eq!(gflops(f.lora), "103.1");
        assert!((f.align as f64) / (f.total as f64) < 1e-5);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap().0 - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &x.map(|v| -v)).unwrap().0 + 1.0).abs() < 1e-12);
        let y = [1.0, 3.0, 2.0, 5.0];
        // centered sums: sxy = 5.5, sxx = 5, syy = 8.75
        let oracle = 5.5 / (5.0f64 * 8.75).sqrt();
        let (r, p) = pearson(&x, &y).unwrap();
        assert!((r - oracle).abs() < 1e-12);
        assert!(p > 0.0 && p < 1.0);
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }

    fn map(experts: Vec<usize>) -> TaskExpertMap {
        let mut e = BTreeMap::new();
        for l in 0..2 {
            e.insert(
                l,
                experts
                    .iter()
                    .map(|&id| ScoredExpert { id, delta: 0.1 })
                    .collect(),
            );
        }
        TaskExpertMap {
            mid_layers: LayerRange(0, 1),
            experts: e,
            references: BTreeMap::new(),
        }
    }

    #[test]
    fn selection_rate_counts_slots() {
        let l0 = Matrix::from_rows(&[
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.2, 0.7],
            vec![0.6, 0.1, 0.3],
        ]);
        let l1 = Matrix::from_rows(&[
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.3, 0.4],
            vec![0.05, 0.05, 0.9],
        ]);
        let trace = RoutingTrace {
            layers: vec![l0, l1],
            generated_positions: vec![1, 2],
        };
        // top-1 selections at generated positions: l0 -> 2, 0 ; l1 -> 2, 2
        assert_eq!(
            selection_rate(
                std::slice::from_ref(&trace),
                &map(vec![2]),
                1,
                false,
                SelectionMode::Slots
            ),
            0.75
        );
        assert_eq!(
            selection_rate(
                std::slice::from_ref(&trace),
                &map(vec![0, 1, 2]),
                1,
                false,
                SelectionMode::Slots
            ),
            1.0
        );
        assert_eq!(
            selection_rate(
                std::slice::from_ref(&trace),
                &map(vec![1]),
                1,
                false,
                SelectionMode::Slots
            ),
            0.0
        );
        let mass = selection_rate(&[trace], &map(vec![2]), 1, false, SelectionMode::Mass);
        assert!((mass - (0.7 + 0.3 + 0.4 + 0.9) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn report_rows_and_round_trip() {
        let profiles = vec![
            ("base".to_string(), vec![0.5, 0.2, 0.1, 0.6]),
            ("sft".to_string(), vec![0.5, 0.2, 0.1, 0.6]),
        ];
        let r = divergence_report(&profiles, LayerRange(1, 2)).unwrap();
        assert_eq!(r.methods[0].divergence, r.methods[1].divergence);
        assert!((r.methods[0].mid_mean - 0.15).abs() < 1e-15);
        let back: DivergenceReport =
            serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r
            .to_csv()
            .starts_with("layer,method,divergence\n0,base,0.5\n"));
        let bad = vec![
            ("a".to_string(), vec![0.1, 0.2]),
            ("b".to_string(), vec![0.1]),
        ];
        assert!(divergence_report(&bad, LayerRange(0, 0)).is_err());
    }
}
