//! Shared helpers for integration tests: independent reference
//! implementations and scripted-run scaffolding.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coevo::expr::{BinOp, Expr, Func};
use coevo::llm::{ScriptRule, ScriptedFixture, Tag};
use rand::Rng;

// ---------------------------------------------------------------- oracles

/// NMSE written out longhand with a two-pass mean.
pub fn brute_nmse(pred: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        num += (y[i] - pred[i]).powi(2);
        den += (y[i] - mean).powi(2);
    }
    num / den
}

pub fn cos_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn groups_from_roots(ids: &[u64], roots: &[Option<usize>]) -> Vec<Vec<u64>> {
    let mut by_root: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (id, r) in ids.iter().zip(roots) {
        if let Some(r) = r {
            by_root.entry(*r).or_default().push(*id);
        }
    }
    let mut groups: Vec<Vec<u64>> = by_root.into_values().collect();
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort();
    groups
}

/// Connected components of the `cos >= tau` graph by union-find.
pub fn union_find_partition(ids: &[u64], vecs: &[Vec<f64>], tau: f64) -> Vec<Vec<u64>> {
    let n = vecs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if cos_sim(&vecs[i], &vecs[j]) >= tau {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let roots: Vec<Option<usize>> = (0..n).map(|i| Some(find(&mut parent, i))).collect();
    groups_from_roots(ids, &roots)
}

/// Density clustering by definition: core points within `eps` of each
/// other are mutually reachable (transitive closure over the core graph);
/// a non-core point with core neighbours joins its nearest core neighbour
/// (ties: lower id); the rest is noise.
pub fn brute_dbscan_partition(ids: &[u64], vecs: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Vec<u64>> {
    let n = vecs.len();
    let d = |i: usize, j: usize| if i == j { 0.0 } else { 1.0 - cos_sim(&vecs[i], &vecs[j]) };
    let close: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| d(i, j) <= eps).collect()).collect();
    let core: Vec<bool> = (0..n)
        .map(|i| close[i].iter().filter(|&&c| c).count() >= min_pts.max(1))
        .collect();
    // Warshall closure restricted to core points.
    let mut reach: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| core[i] && core[j] && close[i][j]).collect())
        .collect();
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                let via = reach[k].clone();
                for (r, v) in reach[i].iter_mut().zip(via) {
                    *r |= v;
                }
            }
        }
    }
    let mut root: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            root[i] = (0..n).find(|&j| reach[i][j]);
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !core[j] || !close[i][j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let (dj, db) = (d(i, j), d(i, b));
                    if dj < db || (dj == db && ids[j] < ids[b]) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        root[i] = best.and_then(|b| root[b]);
    }
    groups_from_roots(ids, &root)
}

/// Ordinary least squares through the normal equations, solved by Gaussian
/// elimination with partial pivoting.
pub fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = design[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &t) in design.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * t;
        }
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot_row = a[col].clone();
                for (x, pv) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * pv;
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

// ------------------------------------------------------- random expressions

const VARS: [&str; 4] = ["x", "y", "t", "speed"];

/// A random tree of at most `budget` nodes (roughly), using every node kind.
pub fn random_expr(rng: &mut impl Rng, budget: usize) -> Expr {
    if budget <= 1 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..4) {
            0 => {
                let mag = 10f64.powi(rng.gen_range(-7..8));
                let v = (rng.gen_range(-10.0..10.0) * mag * 1e3).round() / 1e3;
                Expr::Const(v)
            }
            1 => Expr::Param(rng.gen_range(0..6)),
            _ => Expr::var(VARS[rng.gen_range(0..VARS.len())]),
        };
    }
    let rest = budget - 1;
    match rng.gen_range(0..10) {
        0 => Expr::neg(random_expr(rng, rest)),
        1 | 2 => {
            let funcs = [
                Func::Sin,
                Func::Cos,
                Func::Tan,
                Func::Exp,
                Func::Log,
                Func::Sqrt,
                Func::Abs,
                Func::Tanh,
                Func::Min2,
                Func::Max2,
                Func::Grad1,
            ];
            let f = funcs[rng.gen_range(0..funcs.len())];
            if matches!(f, Func::Min2 | Func::Max2) {
                let left = rng.gen_range(1..rest.max(2));
                Expr::Call(f, vec![random_expr(rng, left), random_expr(rng, rest.saturating_sub(left).max(1))])
            } else {
                Expr::Call(f, vec![random_expr(rng, rest)])
            }
        }
        _ => {
            let ops = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow];
            let op = ops[rng.gen_range(0..ops.len())];
            let left = rng.gen_range(1..rest.max(2));
            Expr::binary(op, random_expr(rng, left), random_expr(rng, rest.saturating_sub(left).max(1)))
        }
    }
}

/// Renumbers parameters densely, keeping the relative order of indices.
pub fn dense_params(e: &Expr) -> Expr {
    let mut used = Vec::new();
    e.walk(&mut |n| {
        if let Expr::Param(i) = n {
            used.push(*i);
        }
    });
    used.sort_unstable();
    used.dedup();
    fn rewrite(e: &Expr, used: &[usize]) -> Expr {
        match e {
            Expr::Param(i) => Expr::Param(used.iter().position(|u| u == i).unwrap()),
            Expr::Const(_) | Expr::Var(_) => e.clone(),
            Expr::Neg(inner) => Expr::neg(rewrite(inner, used)),
            Expr::Binary(op, l, r) => Expr::binary(*op, rewrite(l, used), rewrite(r, used)),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| rewrite(a, used)).collect()),
        }
    }
    rewrite(e, &used)
}

// ---------------------------------------------------------- scripted runs

/// A solve-phase reply in the format contract.
pub fn solve(math: &str) -> String {
    format!("```idea\nmodel {math}\n```\n```math\n{math}\n```\n```code\ndef f(x): pass\n```")
}

pub fn idea(text: &str) -> String {
    format!("```idea\n{text}\n```")
}

pub fn rule(tag: Option<Tag>, contains: Option<&str>, responses: Vec<String>) -> ScriptRule {
    ScriptRule {
        tag,
        contains: contains.map(str::to_string),
        responses,
    }
}

/// Solve replies cycle through `solves`; every other phase gets a plain idea
/// and summaries get a fixed definition.
pub fn walk_fixture(solves: &[&str]) -> ScriptedFixture {
    ScriptedFixture {
        responses: vec![],
        rules: vec![
            rule(Some(Tag::Solve), None, solves.iter().map(|m| solve(m)).collect()),
            rule(
                Some(Tag::Summarize),
                None,
                vec!["```definition\nsharper structure\n```\n```description\nThe change tightened the fit.\n```".into()],
            ),
            rule(None, None, vec![idea("try a simple law")]),
        ],
        prompt_hashes: None,
    }
}

pub const LINE_PROBLEM: &str = r#"
[problem]
family = "custom"
description = "Find y as a function of x."
ground_truth = "2 * x"
ground_truth_params = []
n_id = 24
n_ood = 8

[problem.ranges.x]
id = [1.0, 5.0]
ood = [5.0, 7.0]
"#;

pub fn engine_section(population: usize, generations: usize, samples: usize, extra: &str) -> String {
    format!(
        "[engine]\npopulation_size = {population}\ngenerations = {generations}\nsamples_per_generation = {samples}\nseed = 7\n{extra}\n[engine.tree]\nwidths = [1]\n\n[engine.fit]\nrestarts = 2\nmax_evals = 400\nseed = 0\n"
    )
}

/// Writes `<root>/<name>.toml` and its fixture; output goes to `<root>/<name>`.
pub fn write_config(root: &Path, name: &str, problem: &str, engine: &str, fixture: &ScriptedFixture) -> PathBuf {
    let fixture_path = root.join(format!("{name}.fixture.json"));
    std::fs::write(&fixture_path, serde_json::to_string_pretty(fixture).unwrap()).unwrap();
    let text = format!(
        "{problem}\n{engine}\n[backend]\nmode = \"scripted\"\nfixture = \"{name}.fixture.json\"\n\n[output]\ndir = \"{name}\"\n"
    );
    let path = root.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

pub fn read_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
