//! Candidate solutions: three linked text representations, the fitted
//! expression, and a validity flag.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::evaluation::{Dataset, Partition};
use crate::expr::{evaluate, parse, ExprError, Skeleton};
use crate::fit::{fit_constants, FitBudget, FitError, FittedModel};
use crate::llm::{extract_blocks, RawGeneration};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Init,
    PosCrossover,
    NegCrossover,
    PosMutation,
    NegMutation,
}

impl Operator {
    pub const OFFSPRING: [Operator; 4] = [
        Operator::PosCrossover,
        Operator::NegCrossover,
        Operator::PosMutation,
        Operator::NegMutation,
    ];

    pub fn parent_count(self) -> usize {
        match self {
            Operator::Init => 0,
            Operator::PosCrossover | Operator::NegCrossover => 2,
            Operator::PosMutation | Operator::NegMutation => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Init => "init",
            Operator::PosCrossover => "pos_crossover",
            Operator::NegCrossover => "neg_crossover",
            Operator::PosMutation => "pos_mutation",
            Operator::NegMutation => "neg_mutation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<u64>,
    pub operator: Operator,
}

impl Lineage {
    pub fn init() -> Self {
        Lineage {
            parents: Vec::new(),
            operator: Operator::Init,
        }
    }

    /// Panics if `parents` is empty for an offspring operator or non-empty
    /// for `Init`.
    pub fn offspring(operator: Operator, parents: Vec<u64>) -> Self {
        assert_eq!(
            parents.is_empty(),
            operator == Operator::Init,
            "lineage parents must be empty exactly for init"
        );
        Lineage { parents, operator }
    }
}

/// Serde for reals that may be +inf (written as the string "inf").
pub mod ext_real {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a real: {other}"))),
            },
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(with = "super")] f64);
            Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// One candidate. Serialized without the parsed tree; the skeleton is
/// rebuilt from `math_text` on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SolutionRecord", into = "SolutionRecord")]
pub struct Solution {
    pub id: u64,
    pub idea_text: String,
    pub math_text: String,
    /// Stored verbatim, never executed.
    pub program_text: String,
    pub skeleton: Option<Skeleton>,
    pub fitted: Option<FittedModel>,
    /// Training NMSE, +inf when invalid.
    pub score: f64,
    pub valid: bool,
    pub reason: Option<String>,
    pub lineage: Lineage,
    pub born_at: u64,
}

#[derive(Serialize, Deserialize)]
struct SolutionRecord {
    id: u64,
    idea_text: String,
    math_text: String,
    program_text: String,
    #[serde(default)]
    expression: Option<String>,
    #[serde(default)]
    params: Option<Vec<f64>>,
    #[serde(with = "ext_real")]
    score: f64,
    valid: bool,
    #[serde(default)]
    reason: Option<String>,
    lineage: Lineage,
    born_at: u64,
}

impl From<Solution> for SolutionRecord {
    fn from(s: Solution) -> Self {
        SolutionRecord {
            id: s.id,
            expression: s.skeleton.as_ref().map(|k| k.to_string()),
            params: s.fitted.map(|f| f.params),
            idea_text: s.idea_text,
            math_text: s.math_text,
            program_text: s.program_text,
            score: s.score,
            valid: s.valid,
            reason: s.reason,
            lineage: s.lineage,
            born_at: s.born_at,
        }
    }
}

impl From<SolutionRecord> for Solution {
    fn from(r: SolutionRecord) -> Self {
        let skeleton = r
            .expression
            .is_some()
            .then(|| parse_candidate(&r.math_text).ok())
            .flatten();
        let fitted = match (&skeleton, r.params) {
            (Some(k), Some(params)) if r.valid => Some(FittedModel {
                skeleton: k.clone(),
                params,
                fit_loss: r.score,
            }),
            _ => None,
        };
        Solution {
            id: r.id,
            idea_text: r.idea_text,
            math_text: r.math_text,
            program_text: r.program_text,
            skeleton,
            fitted,
            score: r.score,
            valid: r.valid,
            reason: r.reason,
            lineage: r.lineage,
            born_at: r.born_at,
        }
    }
}

/// Parses candidate math text, tolerating a leading `name =` and line
/// breaks.
pub fn parse_candidate(math_text: &str) -> Result<Skeleton, ExprError> {
    let joined = math_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let body = match joined.split_once('=') {
        Some((lhs, rhs)) if is_identifier(lhs.trim()) => rhs.trim(),
        _ => joined.trim(),
    };
    parse(body)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn expr_reason(e: &ExprError) -> String {
    let kind = match e {
        ExprError::Syntax { .. } => "SyntaxError",
        ExprError::LimitExceeded(_) => "LimitExceeded",
        ExprError::UnknownFunction { .. } => "UnknownFunction",
        ExprError::Empty => "SyntaxError",
        ExprError::UndeclaredVariable(_) => "MissingVariable",
    };
    format!("{kind}: {e}")
}

fn fit_reason(e: &FitError) -> String {
    use crate::evaluation::ScoreError;
    use crate::expr::EvalError;
    let eval_kind = |e: &EvalError| match e {
        EvalError::MissingVariable(_) => "MissingVariable",
        EvalError::NotTimeOrdered => "NotTimeOrdered",
        EvalError::ArityMismatch { .. } => "ArityMismatch",
        _ => "EvalError",
    };
    let kind = match e {
        FitError::NoFiniteLoss => "NoFiniteLoss",
        FitError::Eval(inner) | FitError::Score(ScoreError::Eval(inner)) => eval_kind(inner),
        FitError::Score(_) => "ScoreError",
    };
    format!("{kind}: {e}")
}

impl Solution {
    /// An invalid candidate whose response could not even be extracted.
    pub fn rejected(id: u64, idea_text: String, reason: String, lineage: Lineage, born_at: u64) -> Self {
        Solution {
            id,
            idea_text,
            math_text: String::new(),
            program_text: String::new(),
            skeleton: None,
            fitted: None,
            score: f64::INFINITY,
            valid: false,
            reason: Some(reason),
            lineage,
            born_at,
        }
    }

    pub fn node_count(&self) -> usize {
        self.skeleton.as_ref().map_or(usize::MAX, Skeleton::node_count)
    }

    /// Lower score first, then fewer nodes, then earlier birth, then id.
    pub fn compare(&self, other: &Solution) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.node_count().cmp(&other.node_count()))
            .then(self.born_at.cmp(&other.born_at))
            .then(self.id.cmp(&other.id))
    }
}

/// Scores candidates against one dataset. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Evaluator {
    data: Arc<Dataset>,
    fit: FitBudget,
    run_seed: u64,
}

impl Evaluator {
    pub fn new(data: Arc<Dataset>, fit: FitBudget, run_seed: u64) -> Self {
        Evaluator { data, fit, run_seed }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn fit_budget(&self) -> FitBudget {
        self.fit
    }

    /// Parses and fits one candidate. Candidate failures become
    /// `valid = false` with a reason; this never errors.
    pub fn materialize(&self, raw: &RawGeneration, id: u64, lineage: Lineage, born_at: u64) -> Solution {
        let mut solution = Solution {
            id,
            idea_text: raw.idea_text.clone(),
            math_text: raw.math_text.clone(),
            program_text: raw.program_text.clone(),
            skeleton: None,
            fitted: None,
            score: f64::INFINITY,
            valid: false,
            reason: None,
            lineage,
            born_at,
        };
        let skeleton = match parse_candidate(&raw.math_text) {
            Ok(s) => s,
            Err(e) => {
                solution.reason = Some(expr_reason(&e));
                return solution;
            }
        };
        let budget = FitBudget {
            seed: derive_seed(&[self.run_seed, id]),
            ..self.fit
        };
        match fit_constants(&skeleton, &self.data, &budget) {
            Ok(model) => {
                solution.score = model.fit_loss;
                solution.valid = true;
                solution.fitted = Some(model);
            }
            Err(e) => solution.reason = Some(fit_reason(&e)),
        }
        solution.skeleton = Some(skeleton);
        solution
    }

    /// Extracts the fenced blocks of a response, then materializes.
    pub fn materialize_response(&self, response: &str, id: u64, lineage: Lineage, born_at: u64) -> Solution {
        match extract_blocks(response) {
            Ok(raw) => self.materialize(&raw, id, lineage, born_at),
            Err(e) => {
                let idea = crate::llm::fenced_block(response, "idea").unwrap_or_default();
                Solution::rejected(id, idea, format!("MissingMathBlock: {e}"), lineage, born_at)
            }
        }
    }

    /// Score plus the five ID rows with the largest absolute residual.
    pub fn feedback(&self, solution: &Solution) -> String {
        let Some(model) = solution.fitted.as_ref() else {
            return format!(
                "The best candidate so far is invalid ({}).",
                solution.reason.as_deref().unwrap_or("unknown reason")
            );
        };
        let mut text = format!(
            "Best candidate so far: {} with training NMSE {:.6e}.",
            model.skeleton, solution.score
        );
        let id = self.data.partition(Partition::Id);
        let Ok(frame) = id.frame() else { return text };
        let Ok(pred) = evaluate(&model.skeleton, &model.params, &frame) else {
            return text;
        };
        let mut rows: Vec<(usize, f64)> = id
            .target()
            .iter()
            .zip(&pred)
            .map(|(y, p)| (y - p).abs())
            .enumerate()
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        text.push_str(" Largest residuals:");
        let features = self.data.feature_names();
        for &(row, _) in rows.iter().take(5) {
            let inputs: Vec<String> = features
                .iter()
                .filter_map(|f| id.feature(f).map(|col| format!("{f}={:.4}", col[row])))
                .collect();
            text.push_str(&format!(
                "\n  {} -> target {:.4}, predicted {:.4}",
                inputs.join(", "),
                id.target()[row],
                pred[row]
            ));
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(f: impl Fn(f64) -> f64, xs: &[f64]) -> Arc<Dataset> {
        Arc::new(
            Dataset::new(
                "d",
                vec![
                    ("x".into(), xs.to_vec()),
                    ("y".into(), xs.iter().map(|&x| f(x)).collect()),
                ],
                "y",
                &vec![false; xs.len()],
                false,
                None,
            )
            .unwrap(),
        )
    }

    fn raw(math: &str) -> RawGeneration {
        RawGeneration {
            idea_text: "idea".into(),
            math_text: math.into(),
            program_text: "code".into(),
        }
    }

    fn with_score(id: u64, score: f64, math: &str, born_at: u64) -> Solution {
        let mut s = Solution::rejected(id, String::new(), String::new(), Lineage::init(), born_at);
        s.score = score;
        s.valid = score.is_finite();
        s.math_text = math.into();
        s.skeleton = parse(math).ok();
        s
    }

    #[test]
    fn materialize_examples() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let ev = Evaluator::new(line(|x| 2.0 * x, &xs), FitBudget::default(), 1);
        let good = ev.materialize(&raw("c0 * x"), 1, Lineage::init(), 0);
        assert!(good.valid && good.score < 1e-12);
        assert_eq!(good.fitted.as_ref().unwrap().fit_loss, good.score);

        let bad = ev.materialize(&raw("c0 * ("), 2, Lineage::init(), 0);
        assert!(!bad.valid && bad.score == f64::INFINITY);
        assert!(bad.reason.as_deref().unwrap().starts_with("SyntaxError"));

        let neg = Evaluator::new(line(|x| x, &[-1.0, -2.0, -3.0]), FitBudget::default(), 1);
        let s = neg.materialize(&raw("log(x)"), 3, Lineage::init(), 0);
        assert!(!s.valid);
        assert!(s.reason.as_deref().unwrap().starts_with("NoFiniteLoss"));
    }

    #[test]
    fn assignment_prefix_and_missing_block() {
        let xs: Vec<f64> = (1..=6).map(f64::from).collect();
        let ev = Evaluator::new(line(|x| 3.0 * x, &xs), FitBudget::default(), 1);
        let s = ev.materialize(&raw("y = c0 * x"), 1, Lineage::init(), 0);
        assert!(s.valid && s.score < 1e-12);
        let r = ev.materialize_response("```idea\nonly an idea\n```", 2, Lineage::init(), 0);
        assert!(!r.valid);
        assert_eq!(r.idea_text, "only an idea");
        assert!(r.reason.as_deref().unwrap().starts_with("MissingMathBlock"));
    }

    #[test]
    fn materialize_is_deterministic() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let ev = Evaluator::new(line(|x| (1.3 * x).sin() * 2.0, &xs), FitBudget::default(), 5);
        let a = ev.materialize(&raw("c0 * sin(c1 * x)"), 9, Lineage::init(), 0);
        let b = ev.materialize(&raw("c0 * sin(c1 * x)"), 9, Lineage::init(), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn compare_tie_breaks() {
        let a = with_score(1, 0.1, "x", 0);
        let b = with_score(2, 0.2, "x", 0);
        assert_eq!(a.compare(&b), Ordering::Less);
        let small = with_score(3, 0.5, "c0 * x", 0);
        let big = with_score(4, 0.5, "c0 * x + c1 * x", 0);
        assert_eq!(small.compare(&big), Ordering::Less);
        let early = with_score(9, 0.5, "c0 * x", 3);
        let late = with_score(1, 0.5, "c0 * x", 7);
        assert_eq!(early.compare(&late), Ordering::Less);
    }

    #[test]
    fn serde_round_trip_rebuilds_skeleton() {
        let xs: Vec<f64> = (1..=8).map(f64::from).collect();
        let ev = Evaluator::new(line(|x| 2.0 * x + 1.0, &xs), FitBudget::default(), 1);
        let s = ev.materialize(&raw("c0 * x + c1"), 4, Lineage::offspring(Operator::PosMutation, vec![1]), 2);
        let text = serde_json::to_string(&s).unwrap();
        let back: Solution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = ev.materialize(&raw("c0 * ("), 5, Lineage::init(), 0);
        let text = serde_json::to_string(&bad).unwrap();
        assert!(text.contains("\"score\":\"inf\""));
        assert_eq!(serde_json::from_str::<Solution>(&text).unwrap(), bad);
    }

    #[test]
    fn feedback_lists_residuals() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let ev = Evaluator::new(line(|x| x * x, &xs), FitBudget::default(), 1);
        let s = ev.materialize(&raw("c0 * x"), 1, Lineage::init(), 0);
        let fb = ev.feedback(&s);
        assert!(fb.contains("training NMSE"));
        assert_eq!(fb.matches("-> target").count(), 5);
    }

    #[test]
    #[should_panic]
    fn offspring_lineage_needs_parents() {
        Lineage::offspring(Operator::PosMutation, vec![]);
    }

    proptest::proptest! {
        #[test]
        fn compare_is_a_strict_total_order(
            raw_items in proptest::collection::vec((0u8..4, 0usize..3, 0u64..4, 0u64..6), 3)
        ) {
            let maths = ["x", "c0 * x", "c0 * x + c1"];
            let scores = [0.1, 0.2, 0.5, f64::INFINITY];
            let items: Vec<Solution> = raw_items
                .iter()
                .map(|&(s, m, b, id)| with_score(id, scores[s as usize], maths[m], b))
                .collect();
            let (a, b, c) = (&items[0], &items[1], &items[2]);
            proptest::prop_assert_eq!(a.compare(b), b.compare(a).reverse());
            if a.compare(b) == Ordering::Less && b.compare(c) == Ordering::Less {
                proptest::prop_assert_eq!(a.compare(c), Ordering::Less);
            }
            if a.compare(b) == Ordering::Equal {
                proptest::prop_assert_eq!(a.id, b.id);
            }
        }
    }
}
