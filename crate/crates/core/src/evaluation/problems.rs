//! Built-in benchmark families.
//!
//! The oscillator families integrate `x'' = a(t, x, v)` with RK4 and sample
//! the trajectory on a uniform time grid; the ID partition is the early time
//! window and OOD is the continuation. The static families sample variables
//! uniformly, with OOD rows drawn from the extrapolation range.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetError};
use crate::expr::{evaluate, parse, Frame, Skeleton};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Oscillation1,
    Oscillation2,
    EcoliGrowth,
    StressStrain,
    Custom,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Oscillation1 => "oscillation1",
            Family::Oscillation2 => "oscillation2",
            Family::EcoliGrowth => "ecoli_growth",
            Family::StressStrain => "stress_strain",
            Family::Custom => "custom",
        }
    }

    fn is_oscillator(self) -> bool {
        matches!(self, Family::Oscillation1 | Family::Oscillation2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub expression: String,
    pub params: Vec<f64>,
}

impl GroundTruth {
    pub fn skeleton(&self) -> Result<Skeleton, DatasetError> {
        let skeleton = parse(&self.expression)
            .map_err(|e| DatasetError::InvalidSpec(format!("ground truth: {e}")))?;
        if skeleton.param_count != self.params.len() {
            return Err(DatasetError::InvalidSpec(format!(
                "ground truth has {} parameters but {} values were given",
                skeleton.param_count,
                self.params.len()
            )));
        }
        Ok(skeleton)
    }
}

/// Half-open sampling interval `[lo, hi)` for ID rows and optionally a
/// disjoint interval for OOD rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarRange {
    pub id: [f64; 2],
    #[serde(default)]
    pub ood: Option<[f64; 2]>,
}

impl VarRange {
    fn new(id: [f64; 2], ood: Option<[f64; 2]>) -> Self {
        Self { id, ood }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub ranges: BTreeMap<String, VarRange>,
    pub n_id: usize,
    pub n_ood: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub family: Family,
    pub target: String,
    pub ground_truth: Option<GroundTruth>,
    pub sampling: Sampling,
    /// Natural-language task statement shown to the backend.
    pub description: String,
    /// Variable name → unit/meaning, shown to the backend.
    pub variable_notes: BTreeMap<String, String>,
}

impl ProblemSpec {
    /// Default spec for a built-in family. `Custom` gets an empty shell.
    pub fn builtin(family: Family) -> ProblemSpec {
        let gt = |e: &str, p: &[f64]| {
            Some(GroundTruth {
                expression: e.to_string(),
                params: p.to_vec(),
            })
        };
        let notes = |pairs: &[(&str, &str)]| {
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect::<BTreeMap<_, _>>()
        };
        let ranges = |pairs: &[(&str, VarRange)]| {
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<BTreeMap<_, _>>()
        };
        let sampling = |r: BTreeMap<String, VarRange>| Sampling {
            ranges: r,
            n_id: 200,
            n_ood: 50,
            noise_sd: 0.0,
            seed: 1,
        };
        let osc_ranges = ranges(&[("t", VarRange::new([0.0, 10.0], Some([10.0, 12.5])))]);
        let osc_notes = notes(&[
            ("t", "time (s)"),
            ("x", "position (m)"),
            ("v", "velocity (m/s)"),
            ("a", "acceleration (m/s^2), the target"),
        ]);
        match family {
            Family::Oscillation1 => ProblemSpec {
                family,
                target: "a".into(),
                ground_truth: gt(
                    "-c0^2 * x - c1 * v + c2 * sin(c3 * t)",
                    &[1.2, 0.3, 0.8, 1.1],
                ),
                sampling: sampling(osc_ranges),
                description: "Find the acceleration of a driven damped oscillator as a function of time, position and velocity.".into(),
                variable_notes: osc_notes,
            },
            Family::Oscillation2 => ProblemSpec {
                family,
                target: "a".into(),
                ground_truth: gt(
                    "-c0 * v - c1 * x + c2 * cos(c3 * t)",
                    &[0.25, 2.0, 0.7, 1.3],
                ),
                sampling: sampling(osc_ranges),
                description: "Find the acceleration of a forced oscillator from time, position and velocity. Rows are provided in time order.".into(),
                variable_notes: osc_notes,
            },
            Family::EcoliGrowth => ProblemSpec {
                family,
                target: "rate".into(),
                ground_truth: gt(
                    "c0 * s / (c1 + s) * exp(-c2 * temp_deviation^2)",
                    &[1.5, 0.8, 0.15],
                ),
                sampling: sampling(ranges(&[
                    ("s", VarRange::new([0.1, 5.0], Some([5.0, 8.0]))),
                    ("temp_deviation", VarRange::new([-3.0, 3.0], None)),
                ])),
                description: "Find the bacterial growth rate as a function of substrate concentration and temperature deviation from the optimum.".into(),
                variable_notes: notes(&[
                    ("s", "substrate concentration (g/L)"),
                    ("temp_deviation", "temperature minus optimum (K)"),
                    ("rate", "growth rate (1/h), the target"),
                ]),
            },
            Family::StressStrain => ProblemSpec {
                family,
                target: "stress".into(),
                ground_truth: gt("c0 * (1 - exp(-c1 * strain))", &[300.0, 6.0]),
                sampling: sampling(ranges(&[(
                    "strain",
                    VarRange::new([0.0, 0.5], Some([0.5, 0.8])),
                )])),
                description: "Find the stress of a material as a function of strain.".into(),
                variable_notes: notes(&[
                    ("strain", "dimensionless strain"),
                    ("stress", "stress (MPa), the target"),
                ]),
            },
            Family::Custom => ProblemSpec {
                family,
                target: "y".into(),
                ground_truth: None,
                sampling: sampling(BTreeMap::new()),
                description: String::new(),
                variable_notes: BTreeMap::new(),
            },
        }
    }

    /// Oscillator trajectories are stored in time order; only oscillation2
    /// exposes that order to candidates.
    pub fn time_ordered(&self) -> bool {
        self.family == Family::Oscillation2
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |m: String| Err(DatasetError::InvalidSpec(m));
        let s = &self.sampling;
        if s.n_id == 0 {
            return invalid("n_id must be positive".into());
        }
        if !(s.noise_sd.is_finite() && s.noise_sd >= 0.0) {
            return invalid("noise_sd must be finite and non-negative".into());
        }
        if self.ground_truth.is_none() {
            return invalid("a ground truth is required to synthesize data".into());
        }
        if s.ranges.is_empty() {
            return invalid("no sampling ranges".into());
        }
        for (name, r) in &s.ranges {
            if r.id[0].partial_cmp(&r.id[1]) != Some(std::cmp::Ordering::Less) {
                return invalid(format!("`{name}` ID range is empty"));
            }
            if let Some(o) = r.ood {
                if o[0].partial_cmp(&o[1]) != Some(std::cmp::Ordering::Less) {
                    return invalid(format!("`{name}` OOD range is empty"));
                }
            }
        }
        if s.n_ood > 0 {
            let outside = s.ranges.values().any(|r| match r.ood {
                Some(o) => o[0] >= r.id[1] || o[1] <= r.id[0],
                None => false,
            });
            if !outside {
                return invalid("OOD range must lie outside the ID range for some variable".into());
            }
        }
        if self.family.is_oscillator() && !s.ranges.contains_key("t") {
            return invalid("oscillator families sample the `t` range".into());
        }
        Ok(())
    }
}

/// Synthesizes a deterministic dataset from a problem definition.
pub fn generate_problem(spec: &ProblemSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let truth = spec.ground_truth.as_ref().expect("validated");
    let skeleton = truth.skeleton()?;
    let (mut columns, is_ood) = if spec.family.is_oscillator() {
        oscillator_rows(spec, &skeleton, &truth.params)?
    } else {
        static_rows(spec, &skeleton, &truth.params)?
    };
    if spec.sampling.noise_sd > 0.0 {
        let normal = Normal::new(0.0, spec.sampling.noise_sd)
            .map_err(|e| DatasetError::InvalidSpec(e.to_string()))?;
        let mut rng = rng_from(&[spec.sampling.seed, 0x0015E]);
        let target = &mut columns.last_mut().expect("target column").1;
        for y in target.iter_mut() {
            *y += normal.sample(&mut rng);
        }
    }
    Dataset::new(
        spec.family.name(),
        columns,
        &spec.target,
        &is_ood,
        spec.time_ordered(),
        spec.time_ordered().then(|| "t".to_string()),
    )
}

type Rows = (Vec<(String, Vec<f64>)>, Vec<bool>);

fn eval_truth(
    skeleton: &Skeleton,
    params: &[f64],
    columns: &[(String, Vec<f64>)],
) -> Result<Vec<f64>, DatasetError> {
    let frame = Frame::new(columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
        .map_err(|e| DatasetError::InvalidSpec(e.to_string()))?;
    let values = evaluate(skeleton, params, &frame)
        .map_err(|e| DatasetError::InvalidSpec(format!("ground truth: {e}")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DatasetError::InvalidSpec(
            "ground truth is not finite on the sampling range".into(),
        ));
    }
    Ok(values)
}

fn static_rows(spec: &ProblemSpec, skeleton: &Skeleton, params: &[f64]) -> Result<Rows, DatasetError> {
    let s = &spec.sampling;
    for var in &skeleton.variables {
        if !s.ranges.contains_key(var) {
            return Err(DatasetError::InvalidSpec(format!("no sampling range for `{var}`")));
        }
    }
    let mut rng = rng_from(&[s.seed, 0x5A4]);
    let total = s.n_id + s.n_ood;
    let mut columns: Vec<(String, Vec<f64>)> = s
        .ranges
        .keys()
        .map(|k| (k.clone(), Vec::with_capacity(total)))
        .collect();
    let mut is_ood = Vec::with_capacity(total);
    for row in 0..total {
        let ood = row >= s.n_id;
        for (name, values) in columns.iter_mut() {
            let range = &s.ranges[name];
            let [lo, hi] = match (ood, range.ood) {
                (true, Some(o)) => o,
                _ => range.id,
            };
            values.push(rng.gen_range(lo..hi));
        }
        is_ood.push(ood);
    }
    let target = eval_truth(skeleton, params, &columns)?;
    columns.push((spec.target.clone(), target));
    Ok((columns, is_ood))
}

fn oscillator_rows(spec: &ProblemSpec, skeleton: &Skeleton, params: &[f64]) -> Result<Rows, DatasetError> {
    let s = &spec.sampling;
    let range = s.ranges["t"];
    let grid = |[lo, hi]: [f64; 2], n: usize| (0..n).map(move |i| lo + (hi - lo) * i as f64 / n as f64);
    let mut times: Vec<(f64, bool)> = grid(range.id, s.n_id).map(|t| (t, false)).collect();
    if s.n_ood > 0 {
        let ood = range.ood.expect("validated");
        times.extend(grid(ood, s.n_ood).map(|t| (t, true)));
    }
    times.sort_by(|a, b| a.0.total_cmp(&b.0));

    let accel = |t: f64, x: f64, v: f64| -> Result<f64, DatasetError> {
        let cols = vec![
            ("t".to_string(), vec![t]),
            ("x".to_string(), vec![x]),
            ("v".to_string(), vec![v]),
        ];
        Ok(eval_truth(skeleton, params, &cols)?[0])
    };

    const SUBSTEPS: usize = 20;
    let (mut t, mut x, mut v) = (0.0_f64.min(times[0].0), 0.5, 0.0);
    let mut ts = Vec::with_capacity(times.len());
    let mut xs = Vec::with_capacity(times.len());
    let mut vs = Vec::with_capacity(times.len());
    for &(target_t, _) in &times {
        let h = (target_t - t) / SUBSTEPS as f64;
        if h != 0.0 {
            for _ in 0..SUBSTEPS {
                let k1x = v;
                let k1v = accel(t, x, v)?;
                let k2x = v + 0.5 * h * k1v;
                let k2v = accel(t + 0.5 * h, x + 0.5 * h * k1x, v + 0.5 * h * k1v)?;
                let k3x = v + 0.5 * h * k2v;
                let k3v = accel(t + 0.5 * h, x + 0.5 * h * k2x, v + 0.5 * h * k2v)?;
                let k4x = v + h * k3v;
                let k4v = accel(t + h, x + h * k3x, v + h * k3v)?;
                x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
                v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
                t += h;
            }
        }
        t = target_t;
        ts.push(t);
        xs.push(x);
        vs.push(v);
    }
    let mut is_ood: Vec<bool> = times.iter().map(|(_, o)| *o).collect();
    let mut columns = vec![("t".to_string(), ts), ("x".to_string(), xs), ("v".to_string(), vs)];
    if !spec.time_ordered() {
        // Without time order the rows carry no sequence; shuffle them.
        let mut order: Vec<usize> = (0..is_ood.len()).collect();
        let mut rng = rng_from(&[s.seed, 0x5FF]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (_, values) in columns.iter_mut() {
            *values = order.iter().map(|&i| values[i]).collect();
        }
        is_ood = order.iter().map(|&i| is_ood[i]).collect();
    }
    let target = eval_truth(skeleton, params, &columns)?;
    columns.push((spec.target.clone(), target));
    Ok((columns, is_ood))
}
