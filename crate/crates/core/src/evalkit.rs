//! Mean top-k recall and late fusion of per-model class scores.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];

    pub fn name(self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }
}

/// Whether `label` is among the `k` best entries of `row`; equal scores
/// rank the lower class index first.
pub fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let s = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count();
    ahead < k
}

fn check_table(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if labels.is_empty() {
        return Err(Error::Contract("empty label set".into()));
    }
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("topk_recall", s, &[labels.len()]));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    Ok(c)
}

/// `(class, recall)` for every class with at least one instance, ascending.
pub fn topk_recall_per_class(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
    let c = check_table(scores, labels, k)?;
    let mut hits = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (row, &y) in scores.data().chunks(c).zip(labels) {
        total[y] += 1;
        hits[y] += in_top_k(row, y, k) as usize;
    }
    Ok((0..c)
        .filter(|&j| total[j] > 0)
        .map(|j| (j, hits[j] as f64 / total[j] as f64))
        .collect())
}

/// Unweighted mean of per-class top-k recall over classes present in `labels`.
pub fn mean_topk_recall(scores: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    let per = topk_recall_per_class(scores, labels, k)?;
    Ok(per.iter().map(|&(_, r)| r).sum::<f64>() / per.len() as f64)
}

/// Mean top-5 recall.
pub fn mt5r(scores: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    mean_topk_recall(scores, labels, 5)
}

/// Ground truth for a list of sample ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalLabels {
    pub ids: Vec<String>,
    pub verb: Vec<usize>,
    pub noun: Vec<usize>,
    pub action: Vec<usize>,
}

impl EvalLabels {
    pub fn task(&self, t: Task) -> &[usize] {
        match t {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }
}

/// MT5R per task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecall {
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
}

impl TaskRecall {
    pub fn get(&self, t: Task) -> f64 {
        match t {
            Task::Verb => self.verb,
            Task::Noun => self.noun,
            Task::Action => self.action,
        }
    }
}

/// Softmax scores of one model over an ordered list of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub model_id: String,
    pub modality: String,
    pub ids: Vec<String>,
    verb: Tensor<f32>,
    noun: Tensor<f32>,
    action: Tensor<f32>,
}

impl ScoreSet {
    /// Each tensor is `[samples, classes]` with rows summing to 1 ± 1e-5.
    pub fn new(
        model_id: impl Into<String>,
        modality: impl Into<String>,
        ids: Vec<String>,
        verb: Tensor<f32>,
        noun: Tensor<f32>,
        action: Tensor<f32>,
    ) -> Result<Self> {
        for (t, x) in Task::ALL.iter().zip([&verb, &noun, &action]) {
            let s = x.shape();
            if s.len() != 2 || s[0] != ids.len() {
                return Err(Error::dim("score set", s, &[ids.len()]));
            }
            for (i, row) in x.data().chunks(s[1]).enumerate() {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if !(sum - 1.0).abs().le(&1e-5) || row.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Data(format!(
                        "{} scores of sample {} sum to {sum}, not 1",
                        t.name(),
                        ids[i]
                    )));
                }
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            modality: modality.into(),
            ids,
            verb,
            noun,
            action,
        })
    }

    pub fn task(&self, t: Task) -> &Tensor<f32> {
        match t {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// MT5R per task against `labels`, which must list the same ids in order.
    pub fn recall(&self, labels: &EvalLabels) -> Result<TaskRecall> {
        if let Some(i) = (0..self.ids.len().max(labels.ids.len())).find(|&i| self.ids.get(i) != labels.ids.get(i)) {
            return Err(Error::Data(format!(
                "sample ids differ at position {i}: {:?} vs {:?}",
                self.ids.get(i),
                labels.ids.get(i)
            )));
        }
        Ok(TaskRecall {
            verb: mt5r(&self.verb, &labels.verb)?,
            noun: mt5r(&self.noun, &labels.noun)?,
            action: mt5r(&self.action, &labels.action)?,
        })
    }
}

/// Weighted selection of models to fuse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub name: String,
    pub members: Vec<(String, f64)>,
}

impl FusionSpec {
    /// Every model with weight 1.
    pub fn uniform<S: AsRef<str>>(name: &str, ids: &[S]) -> Self {
        Self {
            name: name.into(),
            members: ids.iter().map(|i| (i.as_ref().to_string(), 1.0)).collect(),
        }
    }

    /// Every set with weight 1, except `factor` for those of `modality`.
    pub fn modality_weighted(name: &str, sets: &[ScoreSet], modality: &str, factor: f64) -> Self {
        Self {
            name: name.into(),
            members: sets
                .iter()
                .map(|s| (s.model_id.clone(), if s.modality == modality { factor } else { 1.0 }))
                .collect(),
        }
    }
}

/// Weighted mean of the member score vectors, renormalized per row. Sets
/// not named in `spec` are ignored.
pub fn fuse(sets: &[ScoreSet], spec: &FusionSpec) -> Result<ScoreSet> {
    if spec.members.is_empty() {
        return Err(Error::Config(format!("fusion '{}' has no members", spec.name)));
    }
    let mut chosen = Vec::with_capacity(spec.members.len());
    for (id, w) in &spec.members {
        if !(*w > 0.0) || !w.is_finite() {
            return Err(Error::Config(format!("weight of '{id}' must be positive, got {w}")));
        }
        let set = sets
            .iter()
            .find(|s| &s.model_id == id)
            .ok_or_else(|| Error::Data(format!("no score set for model '{id}'")))?;
        chosen.push((set, *w));
    }
    let first = chosen[0].0;
    for (set, _) in &chosen[1..] {
        let mismatch = (0..first.ids.len().max(set.ids.len())).find(|&i| first.ids.get(i) != set.ids.get(i));
        if let Some(i) = mismatch {
            let id = first.ids.get(i).or(set.ids.get(i)).cloned().unwrap_or_default();
            return Err(Error::Data(format!(
                "sample ids of '{}' and '{}' diverge at '{id}'",
                first.model_id, set.model_id
            )));
        }
        for t in Task::ALL {
            if set.task(t).shape() != first.task(t).shape() {
                return Err(Error::dim("fuse", first.task(t).shape(), set.task(t).shape()));
            }
        }
    }
    let mut fused = Vec::with_capacity(3);
    for t in Task::ALL {
        let shape = first.task(t).shape().to_vec();
        let c = shape[1];
        let mut acc = vec![0f64; first.task(t).numel()];
        for (set, w) in &chosen {
            for (a, &v) in acc.iter_mut().zip(set.task(t).data()) {
                *a += w * v as f64;
            }
        }
        let mut out = Vec::with_capacity(acc.len());
        for row in acc.chunks(c) {
            let z: f64 = row.iter().sum();
            out.extend(row.iter().map(|&v| (v / z) as f32));
        }
        fused.push(Tensor::new(&shape, out)?);
    }
    let action = fused.pop().expect("three tasks");
    let noun = fused.pop().expect("three tasks");
    let verb = fused.pop().expect("three tasks");
    let members: Vec<&str> = chosen.iter().map(|(s, _)| s.model_id.as_str()).collect();
    let modality = if chosen.iter().all(|(s, _)| s.modality == first.modality) {
        first.modality.clone()
    } else {
        "mixed".into()
    };
    ScoreSet::new(
        format!("{}[{}]", spec.name, members.join("+")),
        modality,
        first.ids.clone(),
        verb,
        noun,
        action,
    )
}

/// One line of an ensemble comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub members: Vec<(String, f64)>,
    pub recall: TaskRecall,
}

/// MT5R of each fusion in `specs`.
pub fn ensemble_report(sets: &[ScoreSet], labels: &EvalLabels, specs: &[FusionSpec]) -> Result<Vec<ReportRow>> {
    specs
        .iter()
        .map(|spec| {
            Ok(ReportRow {
                name: spec.name.clone(),
                members: spec.members.clone(),
                recall: fuse(sets, spec)?.recall(labels)?,
            })
        })
        .collect()
}

/// Aligned text table of report rows.
pub struct ReportTable<'a>(pub &'a [ReportRow]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.0.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$}  {:>8}  {:>8}  {:>8}", "fusion", "verb", "noun", "action")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                r.name, r.recall.verb, r.recall.noun, r.recall.action
            )?;
        }
        Ok(())
    }
}

/// CSV rendering of report rows.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("fusion,members,mt5r_verb,mt5r_noun,mt5r_action\n");
    for r in rows {
        let members: Vec<String> = r.members.iter().map(|(id, w)| format!("{id}*{w}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            members.join(" "),
            r.recall.verb,
            r.recall.noun,
            r.recall.action
        ));
    }
    out
}
