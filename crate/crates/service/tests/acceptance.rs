//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use acmix_core::adapters::{AdapterId, LowRankAdapter};
use acmix_core::audit::{common_substrings, TrainingCorpus, DEFAULT_N_VALUES};
use acmix_core::embedding::{Embedder, HashEmbedder, TokenSequence};
use acmix_core::model::{seeded_adapter, MixPlan, ModelSignature, ReferenceModel, XorShift64Star};
use acmix_core::pipeline::{Pipeline, RetrievalConfig};
use acmix_service::bench::{latency_sweep, retrieval_accuracy, retrieval_pipeline, spearman, synthetic_topics, LatencyOptions};
use axum::http::{Method, StatusCode};
use ndarray::Array1;
use serde_json::json;

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use common::{bits, naive_common_substrings, random_words, World};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "isolation: deleting non-permitted adapters is bit-identical (100 configs)", limit: secs(60), run: isolation },
        Criterion { name: "mixing equals merging within 1e-6 relative (500 pairs, 1-8 adapters)", limit: secs(30), run: mixing_equals_merging },
        Criterion { name: "permission coverage: all 2^5 grant subsets match the set-algebra oracle", limit: secs(60), run: permission_coverage },
        Criterion { name: "retrieval accuracy >= 98% at fetch_k=10, k=3; mean adapters <= 3", limit: secs(60), run: retrieval },
        Criterion { name: "hint algebra (1000 cases)", limit: secs(10), run: hint_algebra },
        Criterion { name: "audit matches the DP oracle (1000 pairs) and 43/111 -> 0.387", limit: secs(60), run: audit_oracle },
        Criterion { name: "audit absolute score is non-increasing in n (100 pairs)", limit: secs(30), run: audit_monotone },
        Criterion { name: "updates: deleted adapter never returns; mutation cost flat over 10/100/1000", limit: secs(120), run: updates },
        Criterion { name: "TTFT median rises with active adapters (Spearman >= 0.8)", limit: secs(120), run: ttft_trend },
        Criterion { name: "persistence: restart reproduces a 50-request golden suite bit for bit", limit: secs(30), run: persistence },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {:?}", c.limit))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {}  [{detail}; {elapsed:.2?}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}  [{why}]", c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn isolation() -> Outcome {
    let mut queries = 0;
    for seed in 0..100u64 {
        let n = 2 + (seed % 7) as usize;
        let mut world = World::random(1000 + seed, n);
        let grants = world.random_grants();
        world.pipeline.set_permissions("u", grants.clone());
        let cfg = world.random_config();
        let texts: Vec<String> = (0..3).map(|_| world.random_query()).collect();
        let before: Vec<_> = texts.iter().map(|t| world.pipeline.query("u", t, &cfg).unwrap()).collect();
        for id in world.ids.clone() {
            if !grants.contains(&id) {
                world.pipeline.remove_adapter(&id).unwrap();
            }
        }
        for (t, b) in texts.iter().zip(&before) {
            let a = world.pipeline.query("u", t, &cfg).unwrap();
            ensure!(bits(&a.response) == bits(&b.response), "seed {seed}: response changed for {t:?}");
            ensure!(a.active == b.active, "seed {seed}: active set changed for {t:?}");
            queries += 1;
        }
    }
    Ok(format!("{queries} queries identical"))
}

fn random_signature(rng: &mut XorShift64Star) -> ModelSignature {
    let depth = 1 + (rng.next_u64() % 3) as usize;
    let dims: Vec<usize> = (0..=depth).map(|_| 2 + (rng.next_u64() % 14) as usize).collect();
    ModelSignature::new(dims.windows(2).map(|w| (w[0], w[1])).collect()).unwrap()
}

fn random_adapter(rng: &mut XorShift64Star, sig: &ModelSignature, name: &str) -> LowRankAdapter {
    let mut layers: Vec<usize> = (0..sig.layers().len()).filter(|_| rng.next_f64() < 0.7).collect();
    if layers.is_empty() {
        layers.push(0);
    }
    let max_rank = layers.iter().map(|&l| sig.layers()[l].0.min(sig.layers()[l].1)).min().unwrap();
    let rank = 1 + (rng.next_u64() % max_rank as u64) as usize;
    seeded_adapter(AdapterId::new(name).unwrap(), sig, &layers, rank, 0.5 + rng.next_f64() * 16.0, 0.4, rng.next_u64()).unwrap()
}

fn mixing_equals_merging() -> Outcome {
    let mut rng = XorShift64Star::new(2024);
    let mut worst = 0f64;
    for case in 0..500u64 {
        let sig = random_signature(&mut rng);
        let model = ReferenceModel::seeded(&sig, case);
        let n = 1 + (rng.next_u64() % 8) as usize;
        let adapters: Vec<Arc<LowRankAdapter>> = (0..n).map(|i| Arc::new(random_adapter(&mut rng, &sig, &format!("a{i}")))).collect();
        let raw: Vec<f64> = (0..n).map(|_| 0.01 + rng.next_f64()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let plan = MixPlan::new(adapters.iter().cloned().zip(weights.iter().copied()).collect()).unwrap();
        let x = Array1::from_shape_fn(sig.input_dim(), |_| rng.symmetric(2.0));
        let mixed = model.forward_mixed(&x, &plan).unwrap();
        let merged = model.merge_weights(&adapters, &weights).unwrap().forward_base(&x).unwrap();
        let scale = merged.iter().fold(0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let err = mixed.iter().zip(&merged).fold(0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
        ensure!(err <= 1e-6, "case {case}: relative error {err:e}");
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn check_against_oracle(world: &World, user: &str, text: &str, cfg: &RetrievalConfig, grants: &BTreeSet<AdapterId>) -> Result<(), String> {
    let out = world.pipeline.query(user, text, cfg).map_err(|e| e.to_string())?;
    let q = world.embedder.embed(text).unwrap();
    let (want_active, want_hints) = world.oracle.expected(&q, cfg, grants, &world.hintable);
    let got: BTreeMap<AdapterId, f64> = out.active.iter().cloned().collect();
    ensure!(
        got.keys().eq(want_active.keys()),
        "{text:?}: active {:?}, oracle {:?}",
        got.keys().collect::<Vec<_>>(),
        want_active.keys().collect::<Vec<_>>()
    );
    for (id, w) in &want_active {
        ensure!((got[id] - w).abs() <= 1e-12, "{text:?}: weight of {id} {} vs {w}", got[id]);
    }
    let hints: BTreeSet<AdapterId> = out.hints.iter().map(|h| h.id.clone()).collect();
    ensure!(hints == want_hints, "{text:?}: hints {hints:?}, oracle {want_hints:?}");
    ensure!(hints.iter().all(|h| !got.contains_key(h)), "{text:?}: hint also active");
    Ok(())
}

fn permission_coverage() -> Outcome {
    let mut checked = 0;
    for seed in [5u64, 6, 7] {
        let mut world = World::random(seed, 5);
        let queries: Vec<String> = (0..8).map(|_| world.random_query()).collect();
        let configs = [RetrievalConfig::default(), world.random_config()];
        for mask in 0u32..32 {
            let grants: BTreeSet<AdapterId> = world
                .ids
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, id)| id.clone())
                .collect();
            let user = format!("mask{mask}");
            world.pipeline.set_permissions(&user, grants.clone());
            for cfg in &configs {
                for text in &queries {
                    check_against_oracle(&world, &user, text, cfg, &grants).map_err(|e| format!("seed {seed} mask {mask:05b}: {e}"))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} (subset, query) checks"))
}

fn retrieval() -> Outcome {
    let (embedder, topics) = synthetic_topics(7).map_err(|e| e.to_string())?;
    let pipeline = retrieval_pipeline(embedder, &topics, 7).map_err(|e| e.to_string())?;
    let rows = retrieval_accuracy(&pipeline, &topics, &RetrievalConfig::default()).map_err(|e| e.to_string())?;
    let all = rows.last().unwrap();
    ensure!(all.queries == 250, "expected 250 queries, ran {}", all.queries);
    ensure!(all.fraction >= 0.98, "accuracy {:.3}", all.fraction);
    ensure!(all.mean_adapters <= 3.0, "mean adapters {:.3}", all.mean_adapters);
    Ok(format!("accuracy {:.3}, mean adapters {:.2}", all.fraction, all.mean_adapters))
}

fn hint_algebra() -> Outcome {
    let mut cases = 0;
    let mut nonempty = 0;
    for seed in 0..50u64 {
        let mut world = World::random(5000 + seed, 4 + (seed % 5) as usize);
        for q in 0..20 {
            let grants = world.random_grants();
            let user = format!("u{q}");
            world.pipeline.set_permissions(&user, grants.clone());
            let text = world.random_query();
            let mut cfg = world.random_config();
            cfg.hints_enabled = true;
            check_against_oracle(&world, &user, &text, &cfg, &grants).map_err(|e| format!("seed {seed}: {e}"))?;
            let out = world.pipeline.query(&user, &text, &cfg).unwrap();
            ensure!(out.hints.iter().all(|h| world.hintable.contains(&h.id)), "non-hintable hint");
            nonempty += usize::from(!out.hints.is_empty());
            cases += 1;
        }
    }
    ensure!(nonempty > 100, "only {nonempty} cases produced hints");
    Ok(format!("{cases} cases, {nonempty} with hints"))
}

fn audit_oracle() -> Outcome {
    let mut rng = XorShift64Star::new(99);
    let mut matches = 0;
    for case in 0..1000 {
        let alphabet = [2, 5, 26][case % 3];
        let (lp, ls) = (1 + (rng.next_u64() % 200) as usize, 1 + (rng.next_u64() % 200) as usize);
        let p = random_words(&mut rng, lp, alphabet);
        let s = random_words(&mut rng, ls, alphabet);
        let n = 1 + (rng.next_u64() % 8) as usize;
        let got = common_substrings(&TokenSequence::tokenize(&p.join(" ")), &TokenSequence::tokenize(&s.join(" ")), n).unwrap();
        let want = naive_common_substrings(&p, &s, n);
        ensure!(got == want, "case {case} (alphabet {alphabet}, n {n}): {} vs {} matches", got.len(), want.len());
        matches += got.len();
    }
    // 43 of 111 prediction words copied verbatim
    let prediction: Vec<String> = (0..111).map(|i| format!("p{i}")).collect();
    let mut training: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
    training.extend(prediction[30..73].iter().cloned());
    training.extend((20..40).map(|i| format!("t{i}")));
    let report = TrainingCorpus::from_texts([training.join(" ").as_str()])
        .score("fig", &TokenSequence::tokenize(&prediction.join(" ")), 8)
        .unwrap();
    ensure!(report.absolute == 43 && report.word_count == 111, "absolute {} of {}", report.absolute, report.word_count);
    ensure!((report.relative - 0.387).abs() <= 0.001, "relative {}", report.relative);
    Ok(format!("{matches} matches agree; 43/111 = {:.4}", report.relative))
}

fn audit_monotone() -> Outcome {
    let mut rng = XorShift64Star::new(123);
    for case in 0..100 {
        let alphabet = [2, 3, 4][case % 3];
        let p = random_words(&mut rng, 200, alphabet);
        let training: Vec<String> = (0..3).map(|_| random_words(&mut rng, 150, alphabet).join(" ")).collect();
        let corpus = TrainingCorpus::from_texts(training.iter().map(String::as_str));
        let reports = corpus.score_many("p", &TokenSequence::tokenize(&p.join(" ")), &DEFAULT_N_VALUES).unwrap();
        let abs: Vec<usize> = reports.iter().map(|r| r.absolute).collect();
        ensure!(abs.windows(2).all(|w| w[0] >= w[1]), "case {case}: {abs:?}");
    }
    Ok("n = 8, 12, 15, 18".into())
}

fn updates() -> Outcome {
    let replay = delete_replay()?;
    let flat = mutation_latency()?;
    Ok(format!("{replay}; {flat}"))
}

fn delete_replay() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let runtime = tokio::runtime::Runtime::new().unwrap();
    runtime.block_on(async {
        let (app, state) = support::app(support::config(dir.path()));
        let vocab: Vec<String> = (0..60).map(|i| format!("v{i}")).collect();
        let mut rng = XorShift64Star::new(31);
        for a in 0..8 {
            let adapter = support::adapter(&state, &format!("z{a}"), a);
            let text: Vec<&str> = (0..30).map(|_| vocab[a as usize * 6 + (rng.next_u64() % 12) as usize].as_str()).collect();
            support::install(&app, &adapter, &[(&format!("d{a}"), &text.join(" "))]).await;
        }
        for u in 0..20 {
            let grants: Vec<String> = (0..8).filter(|_| rng.next_f64() < 0.6).map(|a| format!("z{a}")).collect();
            let r = support::send(&app, Method::PUT, &format!("/v1/admin/permissions/u{u}"), Some(support::TOKEN), Some(json!({ "grants": grants }))).await;
            ensure!(r.status == StatusCode::OK, "grant failed: {:?}", r.body);
        }
        let victim = "z3";
        let r = support::send(&app, Method::DELETE, &format!("/v1/admin/adapters/{victim}"), Some(support::TOKEN), None).await;
        ensure!(r.status == StatusCode::OK, "delete failed: {:?}", r.body);
        let mut others = 0;
        for i in 0..1000 {
            let len = 1 + (rng.next_u64() % 5) as usize;
            let text: Vec<&str> = (0..len).map(|_| vocab[(rng.next_u64() % 60) as usize].as_str()).collect();
            let r = support::send(
                &app,
                Method::POST,
                "/v1/query",
                None,
                Some(json!({ "user_id": format!("u{}", i % 20), "query": text.join(" ") })),
            )
            .await;
            ensure!(r.status == StatusCode::OK, "query {i} failed: {:?}", r.body);
            let active = support::active_ids(&r.body);
            let hints = support::hint_ids(&r.body);
            ensure!(!active.iter().chain(&hints).any(|id| id == victim), "query {i} returned {victim}");
            others += usize::from(!active.is_empty() || !hints.is_empty());
        }
        ensure!(others > 500, "replay too quiet: {others} informative responses");
        Ok("1000 replayed queries clean".to_string())
    })
}

/// Median nanoseconds of `op` over `reps` runs.
fn median_ns(reps: usize, mut op: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            op();
            s.elapsed().as_nanos() as f64
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

fn mutation_latency() -> Result<String, String> {
    let sig = ModelSignature::new(vec![(8, 8), (8, 4)]).unwrap();
    let probe_text = "probe words for the update test";
    let mut medians: Vec<(usize, [f64; 3])> = Vec::new();
    for size in [10usize, 100, 1000] {
        let pipeline = Pipeline::new(Arc::new(HashEmbedder::new(64, 0).unwrap()), ReferenceModel::seeded(&sig, 1));
        for i in 0..size {
            let id = AdapterId::new(format!("a{i:05}")).unwrap();
            pipeline.register_adapter(seeded_adapter(id.clone(), &sig, &[0, 1], 1, 1.0, 0.1, i as u64).unwrap()).unwrap();
            pipeline.ingest(&format!("d{i}"), "alpha beta gamma delta epsilon", &id, 2).unwrap();
            pipeline.set_permissions(&format!("user{i}"), [id].into_iter().collect());
        }
        let probe = AdapterId::new("probe").unwrap();
        let template = seeded_adapter(probe.clone(), &sig, &[0, 1], 1, 1.0, 0.1, 77).unwrap();
        let reps = 301;
        let register = median_ns(reps, || {
            pipeline.register_adapter(template.clone()).unwrap();
            pipeline.write(|s| s.adapters.unregister(&probe).unwrap());
        });
        let delete = {
            let mut t = Vec::with_capacity(reps);
            for _ in 0..reps {
                pipeline.register_adapter(template.clone()).unwrap();
                pipeline.ingest("probe-doc", probe_text, &probe, 2).unwrap();
                let s = Instant::now();
                pipeline.remove_adapter(&probe).unwrap();
                t.push(s.elapsed().as_nanos() as f64);
            }
            t.sort_by(f64::total_cmp);
            t[reps / 2]
        };
        let grants: BTreeSet<AdapterId> = [probe.clone()].into_iter().collect();
        let permit = median_ns(reps, || pipeline.set_permissions("user0", grants.clone()));
        medians.push((size, [register, delete, permit]));
    }
    let mut parts = Vec::new();
    for (k, name) in ["register", "delete", "permit"].iter().enumerate() {
        let vals: Vec<f64> = medians.iter().map(|(_, m)| m[k]).collect();
        let ratio = vals.iter().cloned().fold(f64::MIN, f64::max) / vals.iter().cloned().fold(f64::MAX, f64::min);
        ensure!(ratio <= 10.0, "{name} median grows {ratio:.1}x across sizes: {vals:?} ns");
        parts.push(format!("{name} x{ratio:.2}"));
    }
    Ok(parts.join(", "))
}

fn ttft_trend() -> Outcome {
    let rows = latency_sweep(&LatencyOptions::default()).map_err(|e| e.to_string())?;
    let counts: Vec<f64> = rows.iter().map(|r| r.adapters as f64).collect();
    let medians: Vec<f64> = rows.iter().map(|r| r.median_ttft_ms).collect();
    let rho = spearman(&counts, &medians);
    ensure!(rho >= 0.8, "Spearman rho {rho:.3}; medians {medians:?}");
    Ok(format!(
        "rho {rho:.3}; median {:.3} ms at 1 adapter, {:.3} ms at {}",
        medians[0],
        medians[medians.len() - 1],
        rows.len()
    ))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runtime = tokio::runtime::Runtime::new().unwrap();
    runtime.block_on(async {
        let config = support::config(dir.path());
        let (app, state) = support::app(config.clone());
        let vocab: Vec<String> = (0..50).map(|i| format!("g{i}")).collect();
        let mut rng = XorShift64Star::new(8);
        for a in 0..6u64 {
            let adapter = support::adapter(&state, &format!("p{a}"), a).with_hintable(a % 3 != 0);
            let docs: Vec<(String, String)> = (0..2)
                .map(|d| {
                    let words: Vec<&str> = (0..40).map(|_| vocab[(a as usize * 7 + (rng.next_u64() % 15) as usize) % 50].as_str()).collect();
                    (format!("p{a}-{d}"), words.join(" "))
                })
                .collect();
            let refs: Vec<(&str, &str)> = docs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            support::install(&app, &adapter, &refs).await;
        }
        for u in 0..5 {
            let grants: Vec<String> = (0..6).filter(|_| rng.next_f64() < 0.5).map(|a| format!("p{a}")).collect();
            support::send(&app, Method::PUT, &format!("/v1/admin/permissions/g{u}"), Some(support::TOKEN), Some(json!({ "grants": grants }))).await;
        }
        let requests: Vec<serde_json::Value> = (0..50)
            .map(|i| {
                let len = 1 + (rng.next_u64() % 6) as usize;
                let text: Vec<&str> = (0..len).map(|_| vocab[(rng.next_u64() % 50) as usize].as_str()).collect();
                let fetch_k = 1 + (rng.next_u64() % 10) as usize;
                json!({
                    "user_id": format!("g{}", i % 5),
                    "query": text.join(" "),
                    "fetch_k": fetch_k,
                    "k": 1 + (rng.next_u64() % fetch_k as u64) as usize,
                })
            })
            .collect();
        let mut golden = Vec::new();
        for r in &requests {
            golden.push(support::send(&app, Method::POST, "/v1/query", None, Some(r.clone())).await.body);
        }
        drop((app, state));

        let (app, _) = support::app(config);
        let mut active = 0;
        for (i, (r, g)) in requests.iter().zip(&golden).enumerate() {
            let now = support::send(&app, Method::POST, "/v1/query", None, Some(r.clone())).await.body;
            let as_bits = |v: &serde_json::Value| -> Vec<u64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap().to_bits()).collect() };
            ensure!(as_bits(&now["response"]) == as_bits(&g["response"]), "request {i}: response differs");
            ensure!(now["active"] == g["active"] && now["hints"] == g["hints"], "request {i}: plan or hints differ");
            active += usize::from(!support::active_ids(&now).is_empty());
        }
        ensure!(active >= 10, "golden suite too trivial: {active} requests mixed adapters");
        Ok(format!("50 requests identical, {active} with active adapters"))
    })
}
