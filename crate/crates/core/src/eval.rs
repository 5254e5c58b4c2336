// SPDX-License-Identifier: MIT OR Apache-2.0

//! Judging: a pluggable judge interface, ensemble averaging, pairwise
//! agreement aggregation, and deterministic proxy judges.
//!
//! The proxy judge maps pipeline quantities onto 1-10 scores:
//!
//! * faithfulness = `clamp(1 + 4.5 * (cos_target + 1), 1, 10)` where
//!   `cos_target` is the centered cosine toward the target prototype;
//! * rarity = `faithfulness * (1 - universal_share)`, clamped to `[1, 10]`;
//! * fluency = `clamp(10 - (ll_ref - loglik) / 0.5, 1, 10)`.
//!
//! These are calibration constants, not measurements of quality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationRecord, FeatureId};
use crate::cue::{bias_score, cosine, csv_field, CueVector, PrototypeSet};
use crate::error::{CueError, Result};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 10.0;
/// Log-likelihood drop per token that costs one fluency point, times one.
pub const FLUENCY_SCALE: f64 = 0.5;

fn clamp_score(x: f64) -> f64 {
    x.clamp(SCORE_MIN, SCORE_MAX)
}

/// Likert-style scores in `[1, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub faithfulness: f64,
    pub rarity: f64,
    pub fluency: f64,
}

impl JudgeScore {
    pub fn new(faithfulness: f64, rarity: f64, fluency: f64) -> Result<Self> {
        let s = Self {
            faithfulness,
            rarity,
            fluency,
        };
        if [faithfulness, rarity, fluency]
            .iter()
            .any(|v| !(SCORE_MIN..=SCORE_MAX).contains(v))
        {
            return Err(CueError::invalid(format!(
                "judge score {s:?} outside [1, 10]"
            )));
        }
        Ok(s)
    }
}

/// Everything a judge may look at for one response.
#[derive(Debug, Clone, Copy)]
pub struct JudgeInput<'a> {
    pub response: &'a CueVector,
    pub target: &'a str,
    pub protos: &'a PrototypeSet,
    /// Share of the response's activation mass on universal features.
    pub universal_share: f64,
    /// Mean per-token log-likelihood of the response.
    pub loglik: f64,
    /// Reference log-likelihood from unsteered generation.
    pub ll_ref: f64,
}

pub trait Judge: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, input: &JudgeInput<'_>) -> Result<JudgeScore>;
}

/// Scores a response from its centered cosine toward the target.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyJudge;

/// Same formulas as [`ProxyJudge`] but with the raw (uncentered) cosine
/// toward the target prototype.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawCosineJudge;

pub fn faithfulness_from_cosine(cos: f64) -> f64 {
    clamp_score(1.0 + 4.5 * (cos + 1.0))
}

pub fn fluency_from_loglik(loglik: f64, ll_ref: f64) -> f64 {
    clamp_score(10.0 - (ll_ref - loglik) / FLUENCY_SCALE)
}

fn proxy_score(cos: f64, input: &JudgeInput<'_>) -> Result<JudgeScore> {
    if !(0.0..=1.0).contains(&input.universal_share) {
        return Err(CueError::invalid("universal share must be in [0, 1]"));
    }
    if !(cos.is_finite() && input.loglik.is_finite() && input.ll_ref.is_finite()) {
        return Err(CueError::Numeric("proxy judge input is not finite".into()));
    }
    let faith = faithfulness_from_cosine(cos);
    JudgeScore::new(
        faith,
        clamp_score(faith * (1.0 - input.universal_share)),
        fluency_from_loglik(input.loglik, input.ll_ref),
    )
}

impl Judge for ProxyJudge {
    fn name(&self) -> &str {
        "proxy"
    }

    fn score(&self, input: &JudgeInput<'_>) -> Result<JudgeScore> {
        let t = input
            .protos
            .label_index(input.target)
            .ok_or_else(|| CueError::UnknownLabel(input.target.to_owned()))?;
        let b = bias_score(input.response, input.protos)?;
        proxy_score(b.cosines[t], input)
    }
}

impl Judge for RawCosineJudge {
    fn name(&self) -> &str {
        "proxy-raw"
    }

    fn score(&self, input: &JudgeInput<'_>) -> Result<JudgeScore> {
        let t = input
            .protos
            .label_index(input.target)
            .ok_or_else(|| CueError::UnknownLabel(input.target.to_owned()))?;
        if input.response.len() != input.protos.dim() {
            return Err(CueError::Dim {
                expected: input.protos.dim(),
                got: input.response.len(),
                context: "response vs prototypes",
            });
        }
        let cos = cosine(
            input.response.as_slice(),
            &input.protos.prototypes[t],
            1e-12,
        );
        proxy_score(cos, input)
    }
}

/// Per-dimension mean over judges. A failing judge aborts with its name.
pub fn ensemble_score(judges: &[&dyn Judge], input: &JudgeInput<'_>) -> Result<JudgeScore> {
    if judges.is_empty() {
        return Err(CueError::invalid("ensemble needs at least one judge"));
    }
    let mut sum = [0.0; 3];
    for j in judges {
        let s = j.score(input).map_err(|e| CueError::Judge {
            judge: j.name().to_owned(),
            reason: e.to_string(),
        })?;
        sum[0] += s.faithfulness;
        sum[1] += s.rarity;
        sum[2] += s.fluency;
    }
    let n = judges.len() as f64;
    JudgeScore::new(sum[0] / n, sum[1] / n, sum[2] / n)
}

/// Mass share of `universal` features among all activations in `record`.
/// An empty record has share 0.
pub fn universal_share(record: &ActivationRecord, universal: &BTreeSet<FeatureId>) -> f64 {
    let (mut u, mut total) = (0.0, 0.0);
    for (f, v) in record.iter_features() {
        let v = f64::from(v);
        total += v;
        if universal.contains(&f) {
            u += v;
        }
    }
    if total > 0.0 {
        u / total
    } else {
        0.0
    }
}

/// Features active in at least `min_rate` of the records of every label.
pub fn universal_features(records: &[ActivationRecord], min_rate: f64) -> BTreeSet<FeatureId> {
    let mut per_label: BTreeMap<&str, (usize, BTreeMap<FeatureId, usize>)> = BTreeMap::new();
    for r in records {
        let e = per_label.entry(&r.label).or_default();
        e.0 += 1;
        for (f, _) in r.iter_features() {
            *e.1.entry(f).or_default() += 1;
        }
    }
    let mut out: Option<BTreeSet<FeatureId>> = None;
    for (n, counts) in per_label.values() {
        let frequent: BTreeSet<FeatureId> = counts
            .iter()
            .filter(|(_, &c)| c as f64 >= min_rate * *n as f64)
            .map(|(&f, _)| f)
            .collect();
        out = Some(match out {
            None => frequent,
            Some(prev) => prev.intersection(&frequent).copied().collect(),
        });
    }
    out.unwrap_or_default()
}

/// Presented position of a response in a pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseOutcome {
    pub result: Outcome,
    pub picks: [Side; 2],
}

/// Two-judge agreement: matching picks win, anything else is a tie.
pub fn pairwise(first: Side, second: Side) -> PairwiseOutcome {
    let result = match (first, second) {
        (Side::A, Side::A) => Outcome::A,
        (Side::B, Side::B) => Outcome::B,
        _ => Outcome::Tie,
    };
    PairwiseOutcome {
        result,
        picks: [first, second],
    }
}

/// Converts a judge's two scores into a pick; equal scores go to the
/// first-presented response.
pub fn pick_by_score(score_a: f64, score_b: f64) -> Side {
    if score_b > score_a {
        Side::B
    } else {
        Side::A
    }
}

/// Result from the perspective of the left condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinTieLoss {
    Win,
    Tie,
    Loss,
}

/// Compares a left and right response judged by two judges. `swap`
/// presents the right response first. Returns the presented-order outcome
/// and the left-side result.
pub fn compare_pair(left: [f64; 2], right: [f64; 2], swap: bool) -> (PairwiseOutcome, WinTieLoss) {
    let picks: Vec<Side> = (0..2)
        .map(|j| {
            if swap {
                pick_by_score(right[j], left[j])
            } else {
                pick_by_score(left[j], right[j])
            }
        })
        .collect();
    let out = pairwise(picks[0], picks[1]);
    let left_side = if swap { Outcome::B } else { Outcome::A };
    let wtl = match out.result {
        Outcome::Tie => WinTieLoss::Tie,
        r if r == left_side => WinTieLoss::Win,
        _ => WinTieLoss::Loss,
    };
    (out, wtl)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub win: usize,
    pub tie: usize,
    pub loss: usize,
}

impl Tally {
    pub fn add(&mut self, r: WinTieLoss) {
        match r {
            WinTieLoss::Win => self.win += 1,
            WinTieLoss::Tie => self.tie += 1,
            WinTieLoss::Loss => self.loss += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.win + self.tie + self.loss
    }

    /// `(win%, tie%, loss%)`; all zero when empty.
    pub fn percentages(&self) -> (f64, f64, f64) {
        let n = self.total();
        if n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let p = |x: usize| 100.0 * x as f64 / n as f64;
        (p(self.win), p(self.tie), p(self.loss))
    }
}

/// Win/tie/loss CSV, one row per `(left, right)` condition pair.
pub fn pairwise_csv(rows: &BTreeMap<(String, String), Tally>) -> String {
    let mut out = String::from("left,right,n,win_pct,tie_pct,loss_pct\n");
    for ((l, r), t) in rows {
        let (w, ti, lo) = t.percentages();
        out.push_str(&format!(
            "{},{},{},{w:.4},{ti:.4},{lo:.4}\n",
            csv_field(l),
            csv_field(r),
            t.total()
        ));
    }
    out
}

/// Generation condition: prompt style crossed with steering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Implicit,
    SteerImplicit,
    Explicit,
    SteerExplicit,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Implicit,
        Condition::SteerImplicit,
        Condition::Explicit,
        Condition::SteerExplicit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Implicit => "implicit",
            Self::SteerImplicit => "steer-implicit",
            Self::Explicit => "explicit",
            Self::SteerExplicit => "steer-explicit",
        }
    }

    pub fn steered(self) -> bool {
        matches!(self, Self::SteerImplicit | Self::SteerExplicit)
    }

    pub fn explicit(self) -> bool {
        matches!(self, Self::Explicit | Self::SteerExplicit)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CueError::invalid(format!("unknown condition {s:?}")))
    }
}

/// Mean scores of one `(condition, label)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub label: String,
    pub n: usize,
    pub faithfulness: f64,
    pub rarity: f64,
    pub fluency: f64,
}

/// Averages scores per `(condition, label)`; rows in condition then label
/// order.
pub fn condition_rows<'a, I>(scored: I) -> Vec<ConditionRow>
where
    I: IntoIterator<Item = (Condition, &'a str, JudgeScore)>,
{
    let mut acc: BTreeMap<(Condition, String), (usize, [f64; 3])> = BTreeMap::new();
    for (c, l, s) in scored {
        let e = acc.entry((c, l.to_owned())).or_default();
        e.0 += 1;
        e.1[0] += s.faithfulness;
        e.1[1] += s.rarity;
        e.1[2] += s.fluency;
    }
    acc.into_iter()
        .map(|((condition, label), (n, s))| ConditionRow {
            condition,
            label,
            n,
            faithfulness: s[0] / n as f64,
            rarity: s[1] / n as f64,
            fluency: s[2] / n as f64,
        })
        .collect()
}

pub fn condition_csv(rows: &[ConditionRow]) -> String {
    let mut out = String::from("condition,label,n,faithfulness,rarity,fluency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.condition,
            csv_field(&r.label),
            r.n,
            r.faithfulness,
            r.rarity,
            r.fluency
        ));
    }
    out
}
