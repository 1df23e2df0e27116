//! Acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test -p promptws-cli --test acceptance -- --nocapture --test-threads=1`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Display;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use promptws::backend::{Backend, BackendError, Capabilities, Capability, MockBackend, RawOutput};
use promptws::batching::{self, BatchConfig, BatchPlan, LocalEngine};
use promptws::client::{Client, Engine};
use promptws::labelmodel::{
    majority_vote, moments, naive_bayes_fit, naive_bayes_predict, partial_fit, partial_predict, signed_votes,
    triplet_fit, triplet_from_moments, EmConfig, EmParams, ProbLabels,
};
use promptws::query::{argmax, CompletionQuery, GenParams, Query, RankedQuery, Response};
use promptws::serving::{self, DualEncoderBackend, HashEncoder, RemoteConfig, RemoteEngine, ServerConfig};
use promptws::template::StringTemplate;
use promptws::voter::{calibrate_scores, LabelMap, Matcher, Vote, VoteMatrix, Voter};
use promptws_cli::config::TaskConfig;
use promptws_cli::pipeline::run_label;

fn report(name: &str, ok: bool, detail: impl Display) -> bool {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn canonical(responses: &[Response]) -> Vec<String> {
    responses.iter().map(Response::to_canonical_json).collect()
}

// ---------------------------------------------------------------------------
// Throughput proxy

/// Charges `batch_size × max_len` time units per batch. Token lengths come
/// from a fixed table, standing in for a tokenizer.
struct CostBackend {
    lengths: HashMap<String, usize>,
    time: AtomicU64,
}

impl CostBackend {
    fn len_of(&self, q: &Query) -> usize {
        match q {
            Query::Completion(c) => self.lengths[&c.prompt],
            Query::Ranked(_) => unreachable!("completion-only workload"),
        }
    }
}

impl Backend for CostBackend {
    fn model_id(&self) -> &str {
        "cost-sim"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::of(&[Capability::Complete])
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        let longest = queries.iter().map(|q| self.len_of(q)).max().unwrap_or(0);
        self.time.fetch_add((queries.len() * longest) as u64, Ordering::SeqCst);
        Ok(queries.iter().map(|q| RawOutput::Completion(format!("len {}", self.len_of(q)))).collect())
    }

    fn token_length(&self, q: &Query) -> Option<usize> {
        Some(self.len_of(q))
    }
}

#[test]
fn throughput_proxy() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dist = LogNormal::new(40f64.ln(), 0.6).unwrap();
    let lengths: Vec<usize> = (0..500).map(|_| (dist.sample(&mut rng).round() as usize).max(1)).collect();
    let queries: Vec<Query> = (0..500).map(|i| CompletionQuery::new(format!("q{i}")).unwrap().into()).collect();
    let backend = Arc::new(CostBackend {
        lengths: (0..500).map(|i| (format!("q{i}"), lengths[i])).collect(),
        time: AtomicU64::new(0),
    });

    let engine = LocalEngine::new(backend.clone(), BatchConfig::default());
    let dynamic_plan = engine.plan_for(&queries);
    let dynamic = engine.execute(&queries).unwrap();
    let dynamic_time = backend.time.swap(0, Ordering::SeqCst);

    let fifo_plan = BatchPlan::fifo(&lengths, 8).unwrap();
    let fifo = batching::execute(backend.as_ref(), &queries, &fifo_plan, 1).unwrap();
    let fifo_time = backend.time.load(Ordering::SeqCst);

    let tokens: usize = lengths.iter().sum();
    let speedup = (tokens as f64 / dynamic_time as f64) / (tokens as f64 / fifo_time as f64);
    let reduction = 1.0 - dynamic_plan.padding_cost() as f64 / fifo_plan.padding_cost() as f64;
    let same = canonical(&dynamic) == canonical(&fifo);
    let (fast, t) = within(start, Duration::from_secs(5));
    let ok = report(
        "throughput proxy",
        speedup >= 2.0 && reduction >= 0.60 && same && fast,
        format!(
            "speedup {speedup:.3}x (need >= 2.0), padding reduced {:.1}% (need >= 60%), {} vs {} time units, {t}",
            reduction * 100.0,
            dynamic_time,
            fifo_time
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Batching correctness

fn random_query(rng: &mut ChaCha8Rng) -> Query {
    let words = rng.random_range(1..=60);
    let prompt: Vec<String> = (0..words).map(|_| format!("w{}", rng.random_range(0..50))).collect();
    let prompt = prompt.join(" ");
    match rng.random_range(0..3) {
        0 => {
            let k = rng.random_range(1..=4);
            let cands: Vec<String> =
                (0..k).map(|c| format!("cand{c} {}", "x ".repeat(rng.random_range(0..4)))).collect();
            RankedQuery::text(prompt, cands).unwrap().into()
        }
        1 => CompletionQuery::with_params(
            prompt,
            GenParams { max_tokens: rng.random_range(1..64), temperature: 0.0, stop: Some("\n".into()) },
        )
        .unwrap()
        .into(),
        _ => CompletionQuery::new(prompt).unwrap().into(),
    }
}

/// Independent reference for the greedy rule.
fn reference_plan(lengths: &[usize], budget: usize, max_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(lengths[i]));
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match out.last_mut() {
            Some(b) if b.len() < max_batch && (b.len() + 1) * lengths[b[0]] <= budget => b.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

fn plan_violations(plan: &BatchPlan, budget: usize, max_batch: usize) -> Option<String> {
    let n = plan.lengths.len();
    let flat: Vec<usize> = plan.batches.concat();
    let mut sorted = flat.clone();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Some("not a partition".into());
    }
    for b in &plan.batches {
        let longest = b.iter().map(|&i| plan.lengths[i]).max().unwrap();
        if b.len() > 1 && b.len() * longest > budget {
            return Some(format!("batch over budget: {} x {longest} > {budget}", b.len()));
        }
        if b.len() > max_batch {
            return Some("batch over max_batch".into());
        }
    }
    // Batches concatenated are the stable descending order, so each batch is
    // a contiguous run of it.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(plan.lengths[i]));
    if flat != order {
        return Some("batches are not contiguous runs of the sorted order".into());
    }
    None
}

#[test]
fn batching_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mock = MockBackend::new("mock");
    let mut failures = Vec::new();
    for instance in 0..1000 {
        let n = rng.random_range(0..=40);
        let queries: Vec<Query> = (0..n).map(|_| random_query(&mut rng)).collect();
        let budget = rng.random_range(1..=600);
        let max_batch = rng.random_range(1..=16);
        let lengths = batching::token_lengths(&mock, &queries);
        let plan = BatchPlan::plan(&lengths, budget, max_batch).unwrap();
        if let Some(v) = plan_violations(&plan, budget, max_batch) {
            failures.push(format!("instance {instance}: {v}"));
            continue;
        }
        if plan.batches != reference_plan(&lengths, budget, max_batch) {
            failures.push(format!("instance {instance}: differs from reference greedy"));
            continue;
        }
        let workers = if instance % 2 == 0 { 1 } else { 3 };
        let batched = batching::execute(&mock, &queries, &plan, workers).unwrap();
        let single = batching::execute(&mock, &queries, &BatchPlan::fifo(&lengths, 1).unwrap(), 1).unwrap();
        if canonical(&batched) != canonical(&single) {
            failures.push(format!("instance {instance}: batched output differs"));
        }
    }
    let (fast, t) = within(start, Duration::from_secs(10));
    let ok = report(
        "batching correctness",
        failures.is_empty() && fast,
        format!("1000 instances, {} failures {:?}, {t}", failures.len(), failures.first()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Label-model oracle suite

fn random_votes(rng: &mut ChaCha8Rng, n: usize, m: usize, k: u32) -> VoteMatrix {
    let rows = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..=k)).collect()).collect::<Vec<Vec<u32>>>();
    VoteMatrix::from_ints(&rows, k).unwrap()
}

/// Draws votes from the naive-Bayes generative model.
fn planted_votes(rng: &mut ChaCha8Rng, n: usize, acc: &[f64], prop: &[f64], k: u32) -> (VoteMatrix, Vec<u32>) {
    let truth: Vec<u32> = (0..n).map(|_| rng.random_range(1..=k)).collect();
    let rows = truth
        .iter()
        .map(|&y| {
            acc.iter()
                .zip(prop)
                .map(|(&a, &b)| {
                    if rng.random::<f64>() >= b {
                        0
                    } else if rng.random::<f64>() < a {
                        y
                    } else {
                        let wrong: Vec<u32> = (1..=k).filter(|&c| c != y).collect();
                        *wrong.choose(rng).unwrap()
                    }
                })
                .collect()
        })
        .collect::<Vec<Vec<u32>>>();
    (VoteMatrix::from_ints(&rows, k).unwrap(), truth)
}

/// Exact marginals `P(y_i = c | V)` by enumerating every joint assignment
/// of labels, with emissions given by `f(i, j, y)` including propensity.
fn brute_force(votes: &VoteMatrix, k: usize, prior: &[f64], f: impl Fn(usize, usize, usize) -> f64) -> Vec<Vec<f64>> {
    let n = votes.n_rows();
    let mut marg = vec![vec![0.0; k]; n];
    let mut total = 0.0;
    let mut ys = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for y in ys.iter_mut() {
            *y = c % k;
            c /= k;
        }
        let mut joint = 1.0;
        for (i, &y) in ys.iter().enumerate() {
            joint *= prior[y];
            for j in 0..votes.n_lfs() {
                joint *= f(i, j, y);
            }
        }
        total += joint;
        for (i, &y) in ys.iter().enumerate() {
            marg[i][y] += joint;
        }
    }
    marg.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x /= total));
    marg
}

fn nb_emission<'a>(votes: &'a VoteMatrix, p: &EmParams, k: usize) -> impl Fn(usize, usize, usize) -> f64 + 'a {
    let p = p.clone();
    move |i, j, y| match votes.get(i, j) {
        Vote::Abstain => 1.0 - p.propensity[j],
        v if v.contains(y as u32 + 1) => p.propensity[j] * p.accuracy[j],
        _ => p.propensity[j] * (1.0 - p.accuracy[j]) / (k - 1) as f64,
    }
}

fn max_diff(a: &ProbLabels, b: &[Vec<f64>]) -> f64 {
    a.rows().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

fn max_diff_probs(a: &ProbLabels, b: &ProbLabels) -> f64 {
    max_diff(a, &b.rows().map(<[f64]>::to_vec).collect::<Vec<_>>())
}

/// Log-likelihood of the naive-Bayes model computed directly.
fn direct_log_likelihood(votes: &VoteMatrix, p: &EmParams, k: usize) -> f64 {
    let f = nb_emission(votes, p, k);
    (0..votes.n_rows())
        .map(|i| (0..k).map(|y| p.prior[y] * (0..votes.n_lfs()).map(|j| f(i, j, y)).product::<f64>()).sum::<f64>().ln())
        .sum()
}

#[test]
fn label_model_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EmConfig::default();
    let mut notes = Vec::new();

    // Brute-force posterior equivalence, naive Bayes.
    let mut nb_err: f64 = 0.0;
    for _ in 0..300 {
        let (n, m, k) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(2..=3u32));
        let v = random_votes(&mut rng, n, m, k);
        let fit = naive_bayes_fit(&v, k, cfg).unwrap();
        let post = naive_bayes_predict(&v, &fit.params).unwrap();
        let exact = brute_force(&v, k as usize, fit.params.prior(), nb_emission(&v, &fit.params.em, k as usize));
        nb_err = nb_err.max(max_diff(&post, &exact));
    }
    notes.push(format!("NB brute-force err {nb_err:.1e}"));

    // Brute-force posterior equivalence, partial labels.
    let mut pl_err: f64 = 0.0;
    for _ in 0..300 {
        let (n, m, k) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(2..=3u32));
        let rows = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        let members: Vec<u32> = (1..=k).filter(|_| rng.random_bool(0.5)).collect();
                        if members.is_empty() {
                            Vote::Abstain
                        } else {
                            Vote::set(members).unwrap()
                        }
                    })
                    .collect()
            })
            .collect();
        let v = VoteMatrix::new(rows, k).unwrap();
        let fit = partial_fit(&v, k, cfg).unwrap();
        let post = partial_predict(&v, &fit.params).unwrap();
        let p = &fit.params.em;
        let vocab: Vec<BTreeSet<Vec<u32>>> = (0..m)
            .map(|j| (0..n).map(|i| v.get(i, j)).filter(|x| !x.is_abstain()).map(|x| x.classes().to_vec()).collect())
            .collect();
        let emission = |i: usize, j: usize, y: usize| {
            let vote = v.get(i, j);
            if vote.is_abstain() {
                return 1.0 - p.propensity[j];
            }
            let y = y as u32 + 1;
            let n_in = vocab[j].iter().filter(|s| s.contains(&y)).count() as f64;
            let n_out = vocab[j].len() as f64 - n_in;
            if vote.contains(y) {
                p.propensity[j] * p.accuracy[j] / n_in
            } else {
                p.propensity[j] * (1.0 - p.accuracy[j]) / n_out
            }
        };
        let exact = brute_force(&v, k as usize, &p.prior, emission);
        pl_err = pl_err.max(max_diff(&post, &exact));
    }
    notes.push(format!("partial brute-force err {pl_err:.1e}"));

    // EM log-likelihood monotonicity.
    let mut monotone = true;
    let mut ll_err: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(2..=4u32);
        let m = rng.random_range(3..=6);
        let n = rng.random_range(20..=300);
        let acc: Vec<f64> = (0..m).map(|_| rng.random_range(0.4..0.95)).collect();
        let prop: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..1.0)).collect();
        let (v, _) = planted_votes(&mut rng, n, &acc, &prop, k);
        let fit = naive_bayes_fit(&v, k, cfg).unwrap();
        monotone &= fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        let last = *fit.log_likelihood.last().unwrap();
        ll_err = ll_err.max(((direct_log_likelihood(&v, &fit.params.em, k as usize) - last) / last).abs());
    }
    notes.push(format!("LL monotone on 50 instances: {monotone} (trace vs direct rel err {ll_err:.1e})"));

    // Parameter recovery from a planted model.
    let (v, _) = planted_votes(&mut ChaCha8Rng::seed_from_u64(5), 5000, &[0.9, 0.8, 0.7], &[1.0; 3], 2);
    let fit = naive_bayes_fit(&v, 2, cfg).unwrap();
    let alpha_err = fit.params.accuracy().iter().zip([0.9, 0.8, 0.7]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    notes.push(format!("NB alpha recovery err {alpha_err:.3}"));

    // Triplet recovery from exact moments.
    let mut exact_err: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.random_range(3..=7);
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
        let mom: Vec<Vec<Option<f64>>> =
            (0..m).map(|j| (0..m).map(|l| (j != l).then(|| a[j] * a[l])).collect()).collect();
        let p = triplet_from_moments(&mom, 0.5).unwrap();
        exact_err = exact_err.max(p.accuracies.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    notes.push(format!("triplet exact-moment err {exact_err:.1e}"));

    // Triplet recovery from samples.
    let truth_a = [0.8, 0.6, 0.9];
    let mut mc = ChaCha8Rng::seed_from_u64(200_000);
    let rows: Vec<Vec<u32>> = (0..200_000)
        .map(|_| {
            let y = if mc.random_bool(0.5) { 1 } else { 2 };
            truth_a.iter().map(|&a| if mc.random_bool((1.0 + a) / 2.0) { y } else { 3 - y }).collect()
        })
        .collect();
    let v = VoteMatrix::from_ints(&rows, 2).unwrap();
    let est = triplet_fit(&v, 0.5).unwrap();
    let mc_err = est.accuracies.iter().zip(truth_a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let moment_count = moments(&signed_votes(&v).unwrap(), 3)[0][1].is_some();
    notes.push(format!("triplet 200k-sample err {mc_err:.4}"));

    // Singleton partial labels agree with naive Bayes.
    let mut agree_err: f64 = 0.0;
    let mut instances = 0;
    while instances < 30 {
        let k = rng.random_range(2..=4u32);
        let m = rng.random_range(1..=4);
        let n = rng.random_range(10..=60);
        let v = random_votes(&mut rng, n, m, k);
        let full_vocab = (0..m).all(|j| (1..=k).all(|c| (0..n).any(|i| v.get(i, j) == &Vote::Class(c))));
        if !full_vocab {
            continue;
        }
        instances += 1;
        let nb = naive_bayes_predict(&v, &naive_bayes_fit(&v, k, cfg).unwrap().params).unwrap();
        let pl = partial_predict(&v, &partial_fit(&v, k, cfg).unwrap().params).unwrap();
        agree_err = agree_err.max(max_diff_probs(&nb, &pl));
    }
    notes.push(format!("singleton partial vs NB err {agree_err:.1e}"));

    let (fast, t) = within(start, Duration::from_secs(60));
    let ok = nb_err <= 1e-9
        && pl_err <= 1e-9
        && monotone
        && ll_err <= 1e-9
        && alpha_err <= 0.03
        && exact_err <= 1e-12
        && mc_err <= 0.02
        && moment_count
        && agree_err <= 1e-6
        && fast;
    assert!(report("label-model oracles", ok, format!("{}; {t}", notes.join("; "))));
}

// ---------------------------------------------------------------------------
// Calibration

/// Ranks with fixed scores: content-free prompts get the biased prior
/// (0.7, 0.3), real reviews an even split.
struct BiasedRanker;

impl Backend for BiasedRanker {
    fn model_id(&self) -> &str {
        "biased"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::of(&[Capability::RankText])
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        Ok(queries
            .iter()
            .map(|q| {
                let Query::Ranked(r) = q else { unreachable!() };
                let text = match &r.payload {
                    promptws::query::Payload::Text(t) => t.as_str(),
                    _ => unreachable!(),
                };
                let p: [f64; 2] = if text.contains("movie") { [0.5, 0.5] } else { [0.7, 0.3] };
                RawOutput::Logits(p.iter().map(|x| x.ln()).collect())
            })
            .collect())
    }
}

#[test]
fn calibration() {
    let q = calibrate_scores(&[0.5, 0.5], &[0.7, 0.3]);
    let exact_err = (q[0] - 0.3).abs().max((q[1] - 0.7).abs());

    let client = Client::new(LocalEngine::new(Arc::new(BiasedRanker), BatchConfig::default()));
    let template = StringTemplate::with_choices("Review: [[text]] Sentiment?", &["positive", "negative"]).unwrap();
    let map = LabelMap::new(vec![("positive".into(), Vote::Class(1)), ("negative".into(), Vote::Class(2))], 2).unwrap();
    let raw = Voter::new(map, Matcher::Exact);
    let calibrated = raw.clone().calibrate(&client, &template, &["N/A", "", "[MASK]"]).unwrap();
    let review = client.run_one(&template.apply(&[("text", "a fine movie")][..]).unwrap()).unwrap();
    let Response::Ranked(r) = &review else { unreachable!() };
    let live = calibrated.calibration().unwrap().apply(r).unwrap();
    let live_err = (live[0] - 0.3).abs().max((live[1] - 0.7).abs());
    let flipped = raw.vote(&review) == Vote::Class(1) && calibrated.vote(&review) == Vote::Class(2);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut invariant = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1e-6..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        if argmax(&calibrate_scores(&p, &vec![1.0 / k as f64; k])) == argmax(&p) {
            invariant += 1;
        }
    }
    let ok = exact_err <= 1e-12 && live_err <= 1e-12 && flipped && invariant == 1000;
    assert!(report(
        "calibration",
        ok,
        format!(
            "[0.5,0.5]/[0.7,0.3] -> [{:.15}, {:.15}] (err {exact_err:.1e}); via client err {live_err:.1e}, vote flipped {flipped}; uniform argmax kept {invariant}/1000",
            q[0], q[1]
        )
    ));
}

// ---------------------------------------------------------------------------
// Transport transparency

#[test]
fn transport_transparency() {
    let mock = Arc::new(MockBackend::new("mock-remote"));
    let server = serving::serve(mock.clone(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let addr = server.local_addr().to_string();
    let local = LocalEngine::new(mock, BatchConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let queries: Vec<Query> = (0..100).map(|_| random_query(&mut rng)).collect();
    let remote = RemoteEngine::connect(RemoteConfig { chunk_size: 16, ..RemoteConfig::new(&addr) }).unwrap();
    let over_wire = remote.remote_run(&queries).unwrap();
    let identical = canonical(&over_wire) == canonical(&local.execute(&queries).unwrap());

    // Two sessions submit interleaved chunks of different queries.
    let sets: Vec<Vec<Vec<Query>>> = (0..2)
        .map(|_| (0..6).map(|_| (0..rng.random_range(1..40)).map(|_| random_query(&mut rng)).collect()).collect())
        .collect();
    let barrier = Arc::new(Barrier::new(2));
    let results: Vec<Vec<Vec<Response>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sets
            .iter()
            .map(|rounds| {
                let barrier = barrier.clone();
                let addr = addr.clone();
                s.spawn(move || {
                    let engine =
                        RemoteEngine::connect(RemoteConfig { chunk_size: 5, ..RemoteConfig::new(&addr) }).unwrap();
                    rounds
                        .iter()
                        .map(|qs| {
                            barrier.wait();
                            engine.remote_run(qs).unwrap()
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let isolated = sets.iter().zip(&results).all(|(rounds, got)| {
        rounds.iter().zip(got).all(|(qs, rs)| canonical(rs) == canonical(&local.execute(qs).unwrap()))
    });
    server.shutdown();
    assert!(report(
        "transport transparency",
        identical && isolated,
        format!("100 queries byte-identical over loopback: {identical}; two interleaved sessions isolated: {isolated}")
    ));
}

// ---------------------------------------------------------------------------
// Caching

fn write_label_task(dir: &Path) -> std::path::PathBuf {
    let mut csv = String::from("id,text\n");
    for i in 0..10 {
        csv.push_str(&format!(
            "{i},comment number {i} {}\n",
            if i % 3 == 0 { "check out my channel" } else { "nice song" }
        ));
    }
    std::fs::write(dir.join("comments.csv"), csv).unwrap();
    let config = r#"
seed = 0
label_space = ["ham", "spam"]

[dataset]
path = "comments.csv"

[backend]
kind = "mock"
model_id = "mock-lm"

[[templates]]
template = "Is this comment spam? [[text]]"
answer_choices = ["Yes", "No"]

[[templates]]
template = "Does this comment ask you to visit something? [[text]]"

[[voters]]
name = "spam_rank"
template = 0
calibrate = true
label_map = { Yes = "spam", No = "ham" }

[[voters]]
name = "visit"
template = 1
matcher = "uncased"
label_map = { yes = "spam", no = "ham" }

[label_model]
kind = "naive_bayes"
"#;
    let path = dir.join("task.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn caching() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_label_task(dir.path());
    let cache = dir.path().join("responses.cache");
    let run = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_promptws"))
            .args(["label", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--cache")
            .arg(&cache)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run("cold");
    run("warm");
    let (cold, warm) = (manifest(&dir.path().join("cold")), manifest(&dir.path().join("warm")));
    let same_probs = std::fs::read(dir.path().join("cold/probs.csv")).unwrap()
        == std::fs::read(dir.path().join("warm/probs.csv")).unwrap();
    let warm_ok =
        warm["backend_queries"] == 0 && warm["cache_hit_rate"] == 1.0 && cold["backend_queries"].as_u64() > Some(0);

    // Representation cache: 3 images x 5 captions.
    let captions: Vec<String> = ["a persian cat", "a siamese cat", "a beagle", "a pug", "a tabby"]
        .iter()
        .map(|s| format!("a photo of {s}"))
        .collect();
    let images: Vec<String> = (0..3)
        .map(|i| {
            let p = dir.path().join(format!("img{i}.png"));
            std::fs::write(&p, format!("pixels of image {i}")).unwrap();
            p.to_string_lossy().into_owned()
        })
        .collect();
    let backend = Arc::new(DualEncoderBackend::new(HashEncoder::new("dual", 32)));
    let engine = LocalEngine::new(backend.clone(), BatchConfig::default());
    let queries: Vec<Query> =
        images.iter().map(|p| RankedQuery::image(p.clone(), captions.clone()).unwrap().into()).collect();
    engine.execute(&queries).unwrap();
    let first = backend.encoder().calls();
    engine.execute(&queries).unwrap();
    let second = backend.encoder().calls();
    let repr_ok = first == 8 && second == 8;

    assert!(report(
        "caching",
        warm_ok && same_probs && repr_ok,
        format!(
            "warm rerun: {} backend queries, hit rate {}, probs.csv identical {same_probs}; encoder calls {first} for 3 images x 5 captions (8 distinct), {second} after a repeat",
            warm["backend_queries"], warm["cache_hit_rate"]
        )
    ));
}

// ---------------------------------------------------------------------------
// End-to-end synthetic weak supervision

const BREEDS: [&str; 4] = ["persian", "siamese", "beagle", "pug"];

/// Answers prompts of the form `lf<j> row <i>: ...` from a planted table.
struct PlantedBackend {
    answers: HashMap<(usize, usize), String>,
}

impl Backend for PlantedBackend {
    fn model_id(&self) -> &str {
        "planted"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::of(&[Capability::Complete])
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        queries
            .iter()
            .map(|q| {
                let Query::Completion(c) = q else { return Err(BackendError::Unsupported(Capability::RankText)) };
                let mut words = c.prompt.split_whitespace();
                let lf = words.next().and_then(|w| w.strip_prefix("lf")).and_then(|w| w.parse().ok());
                let row = words.nth(1).and_then(|w| w.trim_end_matches(':').parse().ok());
                match (lf, row) {
                    (Some(lf), Some(row)) => Ok(RawOutput::Completion(self.answers[&(lf, row)].clone())),
                    _ => Err(BackendError::Other(format!("unexpected prompt {:?}", c.prompt))),
                }
            })
            .collect()
    }
}

struct Study {
    nb: f64,
    mv: f64,
    partial_fine: f64,
    partial_coarse: f64,
}

fn study(seed: u64, dir: &Path) -> Study {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accuracy = [0.6, 0.65, 0.7, 0.8, 0.85];
    let propensity = [0.7, 0.8, 0.6, 0.5, 0.9];
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let mut answers = HashMap::new();
    for (i, &y) in truth.iter().enumerate() {
        for (j, (&a, &b)) in accuracy.iter().zip(&propensity).enumerate() {
            let answer = if rng.random::<f64>() >= b {
                "not sure".to_string()
            } else if rng.random::<f64>() < a {
                BREEDS[y].to_uppercase()
            } else {
                let wrong: Vec<usize> = (0..4).filter(|&c| c != y).collect();
                BREEDS[*wrong.choose(&mut rng).unwrap()].to_string()
            };
            answers.insert((j, i), answer);
        }
        // Coarse LF: cat or dog, right 90% of the time.
        let group = if rng.random::<f64>() < 0.9 { y / 2 } else { 1 - y / 2 };
        let answer = if rng.random::<f64>() < 0.9 { ["cat", "dog"][group] } else { "animal" };
        answers.insert((5, i), answer.to_string());
    }

    let mut csv = String::from("id\n");
    (0..n).for_each(|i| csv.push_str(&format!("{i}\n")));
    std::fs::write(dir.join("pets.csv"), csv).unwrap();

    let config = |voters: usize, model: &str| {
        let mut text = format!(
            "seed = {seed}\nlabel_space = {BREEDS:?}\n\n[dataset]\npath = \"pets.csv\"\n\n[backend]\nkind = \"mock\"\nmodel_id = \"unused\"\n\n[label_model]\nkind = \"{model}\"\n"
        );
        for j in 0..6 {
            text.push_str(&format!("\n[[templates]]\ntemplate = \"lf{j} row [[id]]: which breed is pictured?\"\n"));
        }
        for j in 0..voters {
            let map = if j < 5 {
                "{ persian = \"persian\", siamese = \"siamese\", beagle = \"beagle\", pug = \"pug\" }"
            } else {
                "{ cat = [\"persian\", \"siamese\"], dog = [\"beagle\", \"pug\"] }"
            };
            text.push_str(&format!(
                "\n[[voters]]\nname = \"lf{j}\"\ntemplate = {j}\nmatcher = \"uncased\"\nlabel_map = {map}\n"
            ));
        }
        TaskConfig::parse(&text, Path::new("study.toml")).unwrap()
    };
    let client = Client::new(LocalEngine::new(Arc::new(PlantedBackend { answers }), BatchConfig::default()));
    let gold: Vec<u32> = truth.iter().map(|&y| y as u32 + 1).collect();

    let nb_run = run_label(&config(5, "naive_bayes"), dir, &client).unwrap();
    let mv = majority_vote(&nb_run.votes, 4).unwrap().accuracy(&gold);
    let fine = run_label(&config(5, "partial"), dir, &client).unwrap();
    let coarse = run_label(&config(6, "partial"), dir, &client).unwrap();
    Study {
        nb: nb_run.probs.accuracy(&gold),
        mv,
        partial_fine: fine.probs.accuracy(&gold),
        partial_coarse: coarse.probs.accuracy(&gold),
    }
}

#[test]
fn end_to_end_weak_supervision() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let studies: Vec<Study> = (0..5).map(|s| study(s, dir.path())).collect();
    let nb_wins = studies.iter().all(|s| s.nb >= s.mv);
    let coarse_ok = studies.iter().all(|s| s.partial_coarse >= s.partial_fine - 0.005);
    let mean = |f: fn(&Study) -> f64| studies.iter().map(f).sum::<f64>() / studies.len() as f64;
    let (fast, t) = within(start, Duration::from_secs(30));
    assert!(report(
        "end-to-end weak supervision",
        nb_wins && coarse_ok && fast,
        format!(
            "mean over 5 seeds: MV {:.4}, NB {:.4} (NB >= MV every seed: {nb_wins}); partial {:.4} -> {:.4} with coarse LF (no drop beyond 0.5%: {coarse_ok}); {t}",
            mean(|s| s.mv),
            mean(|s| s.nb),
            mean(|s| s.partial_fine),
            mean(|s| s.partial_coarse)
        )
    ));
}
