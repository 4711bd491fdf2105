//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use coevo::embedding::{cluster_dbscan, cluster_threshold, Embedding};
use coevo::engine::{BestPoint, EngineConfig};
use coevo::evaluation::{generate_problem, nmse, score_solution, Dataset, Family, ProblemSpec};
use coevo::expr::{parse, print, Skeleton};
use coevo::fit::{fit_constants, FitBudget, FittedModel};
use coevo::knowledge::{KnowledgeLibrary, KnowledgePiece, KnowledgeSource, LibraryConfig};
use coevo::llm::{ScriptedFixture, Tag};
use coevo::rng::rng_from;
use coevo::run::{self, RunDir, EXIT_DIVERGENCE, EXIT_OK};
use coevo::solution::{Evaluator, Lineage};
use common::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn monotone(series: &[BestPoint]) -> bool {
    series.windows(2).all(|w| w[1].best_nmse <= w[0].best_nmse)
}

/// Best-series of every scripted run, checked together at the end.
#[derive(Default)]
struct Ledger {
    series: Vec<(String, Vec<BestPoint>)>,
}

// 1 ---------------------------------------------------------------------

fn structural_constants(tmp: &Path, ledger: &mut Ledger) -> Outcome {
    let d = EngineConfig::default();
    ensure(d.generations == 100 && d.samples_per_generation == 20, || "default budget is not 100 x 20".into())?;
    ensure(d.offspring_budget() == 2000, || format!("budget {}", d.offspring_budget()))?;
    ensure(LibraryConfig::default().capacity == 30, || "library capacity is not 30".into())?;

    let mut lib = KnowledgeLibrary::new(LibraryConfig::default(), 3);
    let mut rng = rng_from(&[1, 500]);
    let mut peak = 0;
    for i in 0..500u64 {
        let v: Vec<f64> = (0..6).map(|_| gauss(&mut rng)).collect();
        let before = rng.gen_range(0.2..1.0);
        lib.insert(KnowledgePiece {
            id: 0,
            definition: format!("insight {i}"),
            description: String::new(),
            embedding: Embedding::new(v).unwrap(),
            source: KnowledgeSource {
                solution_id: i,
                iteration: i,
                score_before: before,
                score_after: before * rng.gen_range(0.0..0.99),
            },
            uses: 0,
        });
        peak = peak.max(lib.len());
        ensure(lib.len() <= 30, || format!("library grew to {} after insert {i}", lib.len()))?;
    }

    // Full default-budget scripted run.
    let solves: Vec<String> = (0..40)
        .map(|k| if k % 4 == 0 { format!("c0 * x + {k}") } else { format!("x + {}", k as f64 / 8.0) })
        .collect();
    let solves: Vec<&str> = solves.iter().map(String::as_str).collect();
    let engine = "[engine]\nseed = 11\n\n[engine.tree]\nwidths = [1]\n\n[engine.fit]\nrestarts = 1\nmax_evals = 200\nseed = 0\n";
    let cfg = write_config(tmp, "full_budget", LINE_PROBLEM, engine, &walk_fixture(&solves));
    let state = run::cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    ledger.series.push(("full_budget".into(), state.best_series.clone()));
    let counted: u64 = state.operator_counts.iter().sum();
    let sampled: u64 = state.valid_series.iter().map(|p| p.samples).sum();
    ensure(state.offspring_total == 2000 && counted == 2000 && sampled == 2000, || {
        format!("offspring {} / operators {counted} / samples {sampled}", state.offspring_total)
    })?;
    ensure(state.generation == 100 && state.iteration == 2010, || {
        format!("generation {} iteration {}", state.generation, state.iteration)
    })?;
    ensure(state.library.len() <= 30, || "run library above capacity".into())?;
    Ok(format!("500 inserts peak size {peak}; full run 2000 offspring"))
}

// 2 ---------------------------------------------------------------------

fn nmse_oracle() -> Outcome {
    let y = [1.0, 2.0, 3.0];
    for (p, want) in [([1.0, 2.0, 3.0], 0.0), ([2.0, 2.0, 2.0], 1.0), ([1.0, 2.0, 4.0], 0.5)] {
        let got = nmse(&p, &y).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("nmse({p:?}) = {got}, want {want}"))?;
    }
    let mut rng = rng_from(&[2, 1000]);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.gen_range(2..60);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let y: Vec<f64> = (0..n).map(|_| scale * gauss(&mut rng)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + 0.5 * scale * rng.gen_range(-1.0..1.0)).collect();
        let got = nmse(&p, &y).map_err(|e| e.to_string())?;
        let want = brute_nmse(&p, &y);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok(format!("3 tagged exact, 1000 random max diff {worst:.1e}"))
}

// 3 ---------------------------------------------------------------------

fn parser_round_trip() -> Outcome {
    let mut rng = rng_from(&[3, 10_000]);
    let mut done = 0;
    let mut largest = 0;
    while done < 10_000 {
        let budget = rng.gen_range(1..60);
        let e = random_expr(&mut rng, budget);
        if e.node_count() > coevo::expr::DEFAULT_MAX_NODES {
            continue;
        }
        let text = print(&Skeleton::from_expr(e.clone()));
        let back = parse(&text).map_err(|err| format!("`{text}` failed to parse: {err}"))?;
        ensure(back.root == dense_params(&e), || format!("`{text}` re-parsed to {:?}", back.root))?;
        largest = largest.max(e.node_count());
        done += 1;
    }
    Ok(format!("10000 expressions, up to {largest} nodes"))
}

// 4 ---------------------------------------------------------------------

fn fit_oracle() -> Outcome {
    type Basis<'a> = (&'a str, fn(f64) -> f64);
    let basis: [Basis; 5] = [
        ("x", |x| x),
        ("x ^ 2", |x| x * x),
        ("sin(x)", f64::sin),
        ("exp(0.3 * x)", |x| (0.3 * x).exp()),
        ("1 / (1 + x ^ 2)", |x| 1.0 / (1.0 + x * x)),
    ];
    let mut rng = rng_from(&[4, 100]);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let k = rng.gen_range(1..=3);
        let mut picks: Vec<usize> = Vec::new();
        while picks.len() < k {
            let i = rng.gen_range(0..basis.len());
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        let intercept = rng.gen_bool(0.5);
        let mut terms: Vec<String> = picks.iter().enumerate().map(|(j, &i)| format!("c{j} * {}", basis[i].0)).collect();
        if intercept {
            terms.push(format!("c{k}"));
        }
        let text = terms.join(" + ");
        let n = 30;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let truth: Vec<f64> = (0..=k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let mut y: f64 = picks.iter().zip(&truth).map(|(&i, c)| c * basis[i].1(x)).sum();
                y += truth[k] + 0.3 * gauss(&mut rng) + 0.5 * x.powi(3);
                y
            })
            .collect();
        let data = Dataset::new("affine", vec![("x".into(), xs.clone()), ("y".into(), ys.clone())], "y", &vec![false; n], false, None)
            .map_err(|e| e.to_string())?;
        let skeleton = parse(&text).map_err(|e| e.to_string())?;
        let budget = FitBudget { seed: case, ..FitBudget::default() };
        let fitted = fit_constants(&skeleton, &data, &budget).map_err(|e| format!("{text}: {e}"))?;

        let design: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| {
                let mut row: Vec<f64> = picks.iter().map(|&i| basis[i].1(x)).collect();
                if intercept {
                    row.push(1.0);
                }
                row
            })
            .collect();
        let beta = least_squares(&design, &ys);
        let pred: Vec<f64> = design.iter().map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
        let best = brute_nmse(&pred, &ys);
        let diff = (fitted.fit_loss - best).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-6, || format!("`{text}`: fit_loss {} vs least squares {best}", fitted.fit_loss))?;
    }
    Ok(format!("100 skeletons, max |fit - lstsq| {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------

fn random_vectors(rng: &mut impl Rng, n: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dims).map(|_| gauss(rng)).collect())
        .collect()
}

fn clustering_oracles() -> Outcome {
    let mut rng = rng_from(&[5, 200]);
    let mut nontrivial = (0, 0);
    for case in 0..200 {
        let n = rng.gen_range(0..=50);
        let dims = rng.gen_range(2..5);
        let vecs = random_vectors(&mut rng, n, dims);
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        ids.reverse();
        let embs: Vec<Embedding> = vecs.iter().map(|v| Embedding::new(v.clone()).unwrap()).collect();
        let items: Vec<(u64, &Embedding)> = ids.iter().copied().zip(embs.iter()).collect();
        let tau = rng.gen_range(0.3..0.99);
        let got = cluster_threshold(&items, tau).map_err(|e| e.to_string())?.partition();
        let want = union_find_partition(&ids, &vecs, tau);
        ensure(got == want, || format!("threshold case {case} (n={n}, tau={tau})"))?;
        if want.len() > 1 {
            nontrivial.0 += 1;
        }
    }
    for case in 0..200 {
        let n = rng.gen_range(0..=30);
        let dims = rng.gen_range(2..5);
        let vecs = random_vectors(&mut rng, n, dims);
        let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 1000).collect();
        let embs: Vec<Embedding> = vecs.iter().map(|v| Embedding::new(v.clone()).unwrap()).collect();
        let items: Vec<(u64, &Embedding)> = ids.iter().copied().zip(embs.iter()).collect();
        let eps = rng.gen_range(0.02..0.5);
        let min_pts = rng.gen_range(1..5);
        let got = cluster_dbscan(&items, eps, min_pts).map_err(|e| e.to_string())?.partition();
        let want = brute_dbscan_partition(&ids, &vecs, eps, min_pts);
        ensure(got == want, || format!("dbscan case {case} (n={n}, eps={eps}, min_pts={min_pts})"))?;
        if want.len() > 1 {
            nontrivial.1 += 1;
        }
    }
    Ok(format!(
        "200 threshold + 200 dbscan instances match ({} / {} with several clusters)",
        nontrivial.0, nontrivial.1
    ))
}

// 6 ---------------------------------------------------------------------

fn ground_truth_recovery(tmp: &Path, ledger: &mut Ledger) -> Outcome {
    let mut notes = Vec::new();
    for family in [Family::Oscillation1, Family::Oscillation2, Family::EcoliGrowth, Family::StressStrain] {
        let spec = ProblemSpec::builtin(family);
        ensure(spec.sampling.noise_sd == 0.0, || "noise".into())?;
        let data = generate_problem(&spec).map_err(|e| e.to_string())?;
        let truth = spec.ground_truth.as_ref().unwrap();
        let model = FittedModel {
            skeleton: truth.skeleton().map_err(|e| e.to_string())?,
            params: truth.params.clone(),
            fit_loss: 0.0,
        };
        let s = score_solution(&model, &data).map_err(|e| e.to_string())?;
        let ood = s.ood_nmse.ok_or("no OOD rows")?;
        ensure(s.id_nmse < 1e-12 && ood < 1e-12, || format!("{}: id {} ood {ood}", family.name(), s.id_nmse))?;
        notes.push(family.name());
    }

    let problem = "[problem]\nfamily = \"stress_strain\"\nn_id = 60\nn_ood = 20\n";
    let walk = walk_fixture(&[
        "c0 * strain",
        "c0 * strain + c1 * strain ^ 2",
        "c0 * (1 - exp(-c1 * strain))",
    ]);
    let engine = "[engine]\npopulation_size = 3\ngenerations = 10\nsamples_per_generation = 5\nseed = 5\n\n[engine.operator_mix]\npos_crossover = 0.0\nneg_crossover = 0.0\npos_mutation = 1.0\nneg_mutation = 0.0\n\n[engine.tree]\nwidths = [1]\n";
    let cfg = write_config(tmp, "walk", problem, engine, &walk);
    let state = run::cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    ledger.series.push(("walk".into(), state.best_series.clone()));
    let best = state.best_nmse();
    ensure(best < 1e-10, || format!("mutation walk reached only {best:e}"))?;
    ensure(state.generation == 10 && state.offspring_total == 50, || "walk budget".into())?;
    Ok(format!("ground truths exact on {}; walk best {best:.1e}", notes.join(", ")))
}

// 7 ---------------------------------------------------------------------

fn oscillation_shortcut() -> Outcome {
    let spec = ProblemSpec::builtin(Family::Oscillation2);
    let data = std::sync::Arc::new(generate_problem(&spec).map_err(|e| e.to_string())?);
    ensure(data.is_time_ordered(), || "oscillation2 should be time-ordered".into())?;
    let range = spec.sampling.ranges["t"].id;
    let dt = (range[1] - range[0]) / spec.sampling.n_id as f64;
    let bound = 10.0 * dt * dt;
    let eval = Evaluator::new(data.clone(), FitBudget::default(), 0);
    let s = eval.materialize_response(&solve("grad1(v)"), 0, Lineage::init(), 0);
    ensure(s.valid, || format!("grad1(v) invalid: {:?}", s.reason))?;
    ensure(s.score < 1e-3 && s.score < bound, || format!("grad1(v) NMSE {} (bound {bound})", s.score))?;

    let plain = std::sync::Arc::new(data.without_time_order());
    let eval = Evaluator::new(plain, FitBudget::default(), 0);
    let t = eval.materialize_response(&solve("grad1(v)"), 1, Lineage::init(), 0);
    let reason = t.reason.clone().unwrap_or_default();
    ensure(!t.valid && reason.starts_with("NotTimeOrdered"), || format!("unordered copy gave {reason:?}"))?;
    Ok(format!("ID NMSE {:.2e} < min(1e-3, 10*dt^2 = {bound:.3}); unordered copy raises NotTimeOrdered", s.score))
}

// 8 ---------------------------------------------------------------------

fn determinism_and_replay(tmp: &Path, ledger: &mut Ledger) -> Outcome {
    let walk = ["c0", "c0 + x ^ 2", "sin(c0 * x)", "c0 * x + c1 * x ^ 2", "c0 * x"];
    let engine = engine_section(4, 4, 4, "");
    let a = write_config(tmp, "det_a", LINE_PROBLEM, &engine, &walk_fixture(&walk));
    let b = write_config(tmp, "det_b", LINE_PROBLEM, &engine, &walk_fixture(&walk));
    let sa = run::cmd_run(&a, false).map_err(|e| e.to_string())?;
    let sb = run::cmd_run(&b, false).map_err(|e| e.to_string())?;
    ledger.series.push(("det_a".into(), sa.best_series.clone()));
    ledger.series.push(("det_b".into(), sb.best_series.clone()));
    let (da, db) = (RunDir::new(tmp.join("det_a")), RunDir::new(tmp.join("det_b")));
    let la = std::fs::read(da.solutions()).map_err(|e| e.to_string())?;
    let lb = std::fs::read(db.solutions()).map_err(|e| e.to_string())?;
    ensure(!la.is_empty() && la == lb, || "solution logs differ".into())?;

    let code = run::exit_code(&run::cmd_replay(&da.root, true));
    ensure(code == EXIT_OK, || format!("untouched replay exited {code}"))?;

    let text = std::fs::read_to_string(db.transcript()).map_err(|e| e.to_string())?;
    let keep: Vec<&str> = text.lines().collect();
    std::fs::write(db.transcript(), keep[..keep.len() - 1].join("\n") + "\n").map_err(|e| e.to_string())?;
    let code = run::exit_code(&run::cmd_replay(&db.root, false));
    ensure(code == EXIT_DIVERGENCE, || format!("truncated replay exited {code}"))?;
    Ok(format!("{} byte-identical log bytes; replay 0 untouched, 4 truncated", la.len()))
}

// 9 ---------------------------------------------------------------------

fn offspring_means(root: &Path, population: u64, samples: u64) -> Result<(f64, f64), String> {
    let mut first = Vec::new();
    let mut later = Vec::new();
    for r in read_lines(&root.join("solutions.jsonl")) {
        if r["lineage"]["operator"] == "init" || r["valid"] != true {
            continue;
        }
        let born = r["born_at"].as_u64().unwrap();
        let generation = (born - population) / samples + 1;
        let score = r["score"].as_f64().unwrap();
        if generation == 1 { first.push(score) } else { later.push(score) }
    }
    if first.is_empty() || later.is_empty() {
        return Err("missing offspring".into());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&first), mean(&later)))
}

fn knowledge_fixture(with_knowledge: bool) -> ScriptedFixture {
    let mut rules = Vec::new();
    if with_knowledge {
        rules.push(rule(Some(Tag::Inspire), Some("KNOW-Q"), vec![idea("IDEA-GOOD")]));
    }
    rules.extend([
        rule(Some(Tag::Inspire), Some("Parent solution"), vec![idea("IDEA-MID")]),
        rule(Some(Tag::Inspire), None, vec![idea("IDEA-PLAIN")]),
        rule(Some(Tag::Solve), Some("IDEA-GOOD"), vec![solve("c0 * x ^ 2 + c1")]),
        rule(Some(Tag::Solve), Some("IDEA-MID"), vec![solve("c0 * x")]),
        rule(Some(Tag::Solve), None, vec![solve("c0")]),
    ]);
    let summary = if with_knowledge {
        "```definition\nKNOW-Q a quadratic term captures the curvature\n```"
    } else {
        "```definition\nthe fit improved\n```"
    };
    rules.push(rule(Some(Tag::Summarize), None, vec![summary.into()]));
    ScriptedFixture { responses: vec![], rules, prompt_hashes: None }
}

fn knowledge_effect(tmp: &Path, ledger: &mut Ledger) -> Outcome {
    let problem = "[problem]\nfamily = \"custom\"\nground_truth = \"2 * x ^ 2 + 1\"\nground_truth_params = []\nn_id = 30\nn_ood = 0\n\n[problem.ranges.x]\nid = [1.0, 5.0]\n";
    let engine = "[engine]\npopulation_size = 4\ngenerations = 4\nsamples_per_generation = 5\nseed = 9\n\n[engine.operator_mix]\npos_crossover = 0.0\nneg_crossover = 0.0\npos_mutation = 1.0\nneg_mutation = 0.0\n\n[engine.tree]\nwidths = [1]\n";
    let mut report = Vec::new();
    for (name, with_knowledge) in [("knowledge", true), ("control", false)] {
        let cfg = write_config(tmp, name, problem, engine, &knowledge_fixture(with_knowledge));
        let state = run::cmd_run(&cfg, false).map_err(|e| e.to_string())?;
        ledger.series.push((name.into(), state.best_series.clone()));
        let (g1, later) = offspring_means(&tmp.join(name), 4, 5)?;
        if with_knowledge {
            ensure(!state.library.is_empty(), || "no knowledge was stored".into())?;
            ensure(later < g1, || format!("with knowledge: gen-1 mean {g1:e}, later mean {later:e}"))?;
        } else {
            ensure(later >= g1, || format!("control shows a gap: gen-1 mean {g1:e}, later mean {later:e}"))?;
        }
        report.push(format!("{name} gen1 {g1:.3e} later {later:.3e}"));
    }
    Ok(report.join("; "))
}

// 10 --------------------------------------------------------------------

fn monotone_series(ledger: &Ledger) -> Outcome {
    ensure(!ledger.series.is_empty(), || "no runs recorded".into())?;
    for (name, series) in &ledger.series {
        ensure(!series.is_empty() && monotone(series), || format!("{name} best series increases"))?;
    }
    Ok(format!("{} runs non-increasing", ledger.series.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut ledger = Ledger::default();
    let mut failures = 0;
    let mut check = |n: usize, name: &str, limit: Duration, f: &mut dyn FnMut(&mut Ledger) -> Outcome| {
        let start = Instant::now();
        let outcome = f(&mut ledger);
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{n:>2}] {name}: {detail} ({took:.2?})"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{n:>2}] {name}: {detail} ({took:.2?})");
            }
        }
    };
    let s = Duration::from_secs;
    check(1, "structural constants", s(60), &mut |l| structural_constants(root, l));
    check(2, "nmse oracle", s(1), &mut |_| nmse_oracle());
    check(3, "parser round trip", s(10), &mut |_| parser_round_trip());
    check(4, "constant fitting oracle", s(30), &mut |_| fit_oracle());
    check(5, "clustering oracles", s(30), &mut |_| clustering_oracles());
    check(6, "ground-truth recovery", s(120), &mut |l| ground_truth_recovery(root, l));
    check(7, "oscillation2 shortcut", s(5), &mut |_| oscillation_shortcut());
    check(8, "determinism and replay", s(60), &mut |l| determinism_and_replay(root, l));
    check(9, "knowledge effect", s(60), &mut |l| knowledge_effect(root, l));
    check(10, "monotone best series", s(1), &mut |l| monotone_series(l));
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
