//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Name fragments given as arguments select a subset.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use storyboard_core::baselines::{bipartite_match, contextual_score, order_contextual, order_cumulative};
use storyboard_core::data::{
    generate_synthetic, load_embeddings, read_examples, save_embeddings, EmbeddingTable, StoryboardExample,
    SynthConfig,
};
use storyboard_core::eval::{kendall_tau, retrieve_and_order_score, PoolBuilder};
use storyboard_core::nn::{
    grad_check, Bundle, Checkpoint, Conditioning, NegativePolicy, OrdererConfig, OrdererModel, SequenceExample,
    Tape,
};
use storyboard_core::vq::{straight_through, straight_through_backward, Codebook, VqVariant};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration) -> Result<String, String> {
    let t = start.elapsed();
    if t <= limit {
        Ok(format!("{:.2}s", t.as_secs_f64()))
    } else {
        Err(format!("took {:.2}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

/// Pairwise definition, O(m^2).
fn brute_tau(pred: &[usize], reference: &[usize]) -> f64 {
    let m = pred.len();
    let pos: Vec<usize> = {
        let mut p = vec![0; m];
        for (i, &x) in pred.iter().enumerate() {
            p[x] = i;
        }
        p
    };
    let mut inv = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            if pos[reference[i]] > pos[reference[j]] {
                inv += 1;
            }
        }
    }
    1.0 - 2.0 * inv as f64 / (m * (m - 1) / 2) as f64
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    for m in 2..=6 {
        let all = permutations(m);
        let reference: Vec<usize> = (0..m).collect();
        for p in &all {
            let got = kendall_tau(p, &reference).map_err(|e| e.to_string())?;
            if got != brute_tau(p, &reference) {
                return Err(format!("m={m} {p:?}: {got}"));
            }
            cases += 1;
        }
        // every ordered pair of permutations for the small sizes
        if m <= 4 {
            for r in &all {
                for p in &all {
                    if kendall_tau(p, r).unwrap() != brute_tau(p, r) {
                        return Err(format!("{p:?} vs {r:?}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let m = rng.random_range(2..=11);
        let mut p: Vec<usize> = (0..m).collect();
        let mut r = p.clone();
        p.shuffle(&mut rng);
        r.shuffle(&mut rng);
        if kendall_tau(&p, &r).unwrap() != brute_tau(&p, &r) {
            return Err(format!("{p:?} vs {r:?}"));
        }
        cases += 1;
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("{cases} cases exact, {t}"))
}

fn tau_endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 2..=11 {
        let mut p: Vec<String> = (0..m).map(|i| format!("f{i}")).collect();
        p.shuffle(&mut rng);
        let rev: Vec<String> = p.iter().rev().cloned().collect();
        let same = kendall_tau(&p, &p).unwrap();
        let back = kendall_tau(&rev, &p).unwrap();
        if same != 1.0 || back != -1.0 {
            return Err(format!("m={m}: identity {same}, reversal {back}"));
        }
    }
    Ok("identity 1, reversal -1 for m in 2..=11".into())
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a: Array2<f64> = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    a
}

fn vq_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let size = rng.random_range(1..=512);
        let dim = rng.random_range(2..=32);
        let cb = Codebook::from_codes(unit_rows(&mut rng, size, dim), 0.8).unwrap();
        let f = unit_rows(&mut rng, 1, dim).row(0).to_vec();
        let got = cb.quantize(&f).indices[0];
        let book = &cb.books[0];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (i, row) in book.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        if got != best {
            return Err(format!("trial {trial}: quantize {got}, exhaustive L2 {best}"));
        }
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("1000 trials, exact index match, {t}"))
}

fn assignment_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let m = rng.random_range(1..=7);
        let sim: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (_, total) = bipartite_match(&sim).map_err(|e| e.to_string())?;
        let best = permutations(m)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| sim[i][j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if (total - best).abs() > 1e-9 {
            return Err(format!("trial {trial} (m={m}): {total} vs brute force {best}"));
        }
    }
    let t = within(start, Duration::from_secs(10))?;
    Ok(format!("200 matrices up to 7x7 within 1e-9, {t}"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut c = OrdererConfig::new(6, 5, 4);
        c.model_dim = 8;
        c.depth = 2;
        c.heads = 2;
        c.max_text_tokens = 4;
        c.max_frames = 6;
        c.conditioning = if seed % 2 == 0 { Conditioning::Prefix } else { Conditioning::CrossAttention };
        let model = OrdererModel::new(c, seed).unwrap();
        let cb = Codebook::new(VqVariant::Vanilla, 8, 4, 0.8, seed + 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let probe: Vec<SequenceExample> = (0..3)
            .map(|i| SequenceExample {
                example_id: format!("p{i}"),
                text: unit_rows(&mut rng, 3, 6),
                frames: unit_rows(&mut rng, 2 + i % 3, 5),
            })
            .collect();
        let r = grad_check(&model, &cb, &probe, 1e-4, 1.0, NegativePolicy::OtherSequences).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        if r.max_rel_error >= 1e-4 {
            return Err(format!("seed {seed}: {:.2e} at {}", r.max_rel_error, r.worst));
        }
    }
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("10 seeds, max relative error {worst:.2e}, {t}"))
}

fn straight_through_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = unit_rows(&mut rng, 3, 4);
    let cb = Codebook::from_codes(unit_rows(&mut rng, 16, 4), 0.8).unwrap();
    let mut q = Array2::zeros(z.raw_dim());
    for (mut row, f) in q.rows_mut().into_iter().zip(z.rows()) {
        row.assign(&ndarray::Array1::from(cb.quantize(&f.to_vec()).code));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(z.clone());
    let y = tape.straight_through(x, &q, &z);
    if tape.value(y) != &q {
        return Err("tape forward differs from the code".into());
    }
    let probe = unit_rows(&mut rng, 3, 4) * 3.0;
    let g = tape.backward(&[(y, probe.clone())], &mut storyboard_core::nn::ParamSet::new().zero_grads());
    if g[x].as_ref() != Some(&probe) {
        return Err("upstream gradient altered on its way to the features".into());
    }
    let f = z.row(0).to_vec();
    let c = q.row(0).to_vec();
    let (df, dc) = straight_through_backward(&probe.row(0).to_vec());
    check(
        straight_through(&f, &c) == c && df == probe.row(0).to_vec() && dc.iter().all(|&x| x == 0.0),
        "forward equals code, probe gradient passes unchanged, none reaches the code".into(),
    )
}

fn beam_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let table = |rng: &mut ChaCha8Rng, m: usize, d: usize| {
        let mut t = EmbeddingTable::new(d).unwrap();
        let ids: Vec<String> = (0..m).map(|i| format!("c{i}")).collect();
        for (id, row) in ids.iter().zip(unit_rows(rng, m, d).rows()) {
            t.insert(id.clone(), &row.to_vec()).unwrap();
        }
        (t, ids)
    };
    for trial in 0..100 {
        let m = rng.random_range(2..=8);
        let (frames, ids) = table(&mut rng, m, 6);
        let segs: Vec<Vec<f64>> = unit_rows(&mut rng, m, 6).rows().into_iter().map(|r| r.to_vec()).collect();
        let a = order_cumulative(&segs, &ids, &frames).unwrap();
        let b = order_contextual(&segs, &ids, &frames, 1).unwrap();
        if a.ordered_ids != b.ordered_ids {
            return Err(format!("trial {trial}: beam 1 differs from cumulative"));
        }
    }
    for trial in 0..50 {
        let m = rng.random_range(2..=5);
        let (frames, ids) = table(&mut rng, m, 6);
        let segs: Vec<Vec<f64>> = unit_rows(&mut rng, m, 6).rows().into_iter().map(|r| r.to_vec()).collect();
        let vecs: Vec<Vec<f64>> = ids.iter().map(|id| frames.vector(id).unwrap()).collect();
        let best = permutations(m)
            .iter()
            .map(|p| contextual_score(&segs, &p.iter().map(|&i| vecs[i].clone()).collect::<Vec<_>>()).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let r = order_contextual(&segs, &ids, &frames, 200).unwrap();
        let got: f64 = r.scores.iter().sum();
        if (got - best).abs() > 1e-9 {
            return Err(format!("trial {trial}: exhaustive beam {got}, optimum {best}"));
        }
    }
    Ok("100 instances beam 1 == cumulative; 50 exhaustive beams optimal".into())
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut t = EmbeddingTable::new(12).unwrap();
    for (i, row) in unit_rows(&mut rng, 50, 12).rows().into_iter().enumerate() {
        t.insert(format!("f{i}"), &row.to_vec()).unwrap();
    }
    let p = dir.path().join("t.tvse");
    save_embeddings(&t, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = load_embeddings(&p).map_err(|e| e.to_string())?;
    if back.to_bytes() != bytes || back.ids() != t.ids() {
        return Err("embedding file did not round-trip bit-exactly".into());
    }
    for (offset, value) in [(0usize, b'X'), (4, 9u8)] {
        let mut bad = bytes.clone();
        bad[offset] = value;
        if EmbeddingTable::from_bytes(&bad).is_ok() {
            return Err(format!("corrupted embedding header byte {offset} accepted"));
        }
    }
    let mut c = OrdererConfig::new(12, 12, 8);
    c.model_dim = 16;
    c.depth = 1;
    let bundle = Bundle {
        orderer: Some(OrdererModel::new(c, 1).unwrap()),
        codebook: Some(Codebook::new(VqVariant::Vanilla, 32, 8, 0.8, 2).unwrap()),
        ..Bundle::default()
    };
    let cp = dir.path().join("m.tvsc");
    bundle.save(&cp).unwrap();
    let cbytes = std::fs::read(&cp).unwrap();
    let back = Bundle::load(&cp).map_err(|e| e.to_string())?;
    if back.to_checkpoint().to_bytes() != cbytes || back.codebook != bundle.codebook {
        return Err("checkpoint did not round-trip bit-exactly".into());
    }
    for (offset, value) in [(0usize, b'X'), (4, 9u8)] {
        let mut bad = cbytes.clone();
        bad[offset] = value;
        if Checkpoint::from_bytes(&bad).is_ok() {
            return Err(format!("corrupted checkpoint header byte {offset} accepted"));
        }
    }
    let mut trailing = cbytes.clone();
    trailing.push(0);
    check(
        Checkpoint::from_bytes(&trailing).is_err(),
        "embeddings and checkpoints bit-exact; bad magic, version and trailing bytes rejected".into(),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["storyboard"];
    full.extend_from_slice(args);
    storyboard_cli::run(full).map_err(|e| format!("`{}`: {e:#}", args.join(" ")))
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn overall(dir: &Path) -> f64 {
    report(dir)["overall_tau"].as_f64().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The planted suite shared by the learnability and ablation criteria.
const LEARN_CONFIG: &str = include_str!("data/learnability.ini");
/// The planted suite for the retrieval criterion.
const RETRIEVAL_CONFIG: &str = include_str!("data/retrieval.ini");

struct LearnRuns {
    taus: Vec<(String, f64)>,
    no_vq: f64,
}

fn learn_runs(root: &Path) -> Result<LearnRuns, String> {
    let cfg = root.join("learn.ini");
    std::fs::write(&cfg, LEARN_CONFIG).unwrap();
    let data = root.join("learn-data");
    run_cli(&["--config", p(&cfg), "synth", "--out", p(&data)])?;
    let vq = root.join("learn-vq");
    run_cli(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&vq)])?;
    let novq = root.join("learn-novq");
    run_cli(&[
        "--config",
        p(&cfg),
        "--set",
        "model.use_vq=false",
        "train",
        "--data",
        p(&data),
        "--out",
        p(&novq),
    ])?;
    let mut taus = Vec::new();
    for s in ["vq-trans", "cumulative", "sliding", "naive"] {
        let out = root.join(format!("learn-eval-{s}"));
        let ck = vq.join("model.tvsc");
        run_cli(&[
            "--config",
            p(&cfg),
            "eval",
            "--data",
            p(&data),
            "--out",
            p(&out),
            "--strategy",
            s,
            "--checkpoint",
            p(&ck),
        ])?;
        taus.push((s.to_string(), overall(&out)));
    }
    let out = root.join("learn-eval-novq");
    let ck = novq.join("model.tvsc");
    run_cli(&[
        "--config",
        p(&cfg),
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--strategy",
        "vq-trans",
        "--checkpoint",
        p(&ck),
    ])?;
    Ok(LearnRuns {
        taus,
        no_vq: overall(&out),
    })
}

fn learnability(runs: &Result<LearnRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let t = |name: &str| runs.taus.iter().find(|(s, _)| s == name).unwrap().1;
    let (vq, cum, sli, nai) = (t("vq-trans"), t("cumulative"), t("sliding"), t("naive"));
    let detail = format!("vq-trans {vq:.3}, cumulative {cum:.3}, sliding {sli:.3}, naive {nai:.3}");
    check(vq >= 0.8 && vq - cum >= 0.02 && cum >= sli && sli - nai >= 0.02, detail)
}

fn vq_ablation(runs: &Result<LearnRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let vq = runs.taus[0].1;
    check(
        vq - runs.no_vq >= 0.02,
        format!("with VQ {vq:.3}, without {:.3}, difference {:+.3}", runs.no_vq, vq - runs.no_vq),
    )
}

fn retrieval_direction(root: &Path) -> Outcome {
    let cfg = root.join("retrieval.ini");
    std::fs::write(&cfg, RETRIEVAL_CONFIG).unwrap();
    let data = root.join("ret-data");
    run_cli(&["--config", p(&cfg), "synth", "--out", p(&data)])?;
    let train = root.join("ret-train");
    run_cli(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&train), "--models", "head"])?;
    let out = root.join("ret-eval");
    let ck = train.join("model.tvsc");
    run_cli(&[
        "--config",
        p(&cfg),
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--protocol",
        "retrieval",
        "--checkpoint",
        p(&ck),
        "--split",
        "val",
        "--pool-size",
        "100",
    ])?;
    let r = report(&out);
    let r10 = |row: usize| -> f64 {
        r["retrieval"][row]["recall"]
            .as_array()
            .unwrap()
            .iter()
            .find(|kv| kv[0].as_u64() == Some(10))
            .unwrap()[1]
            .as_f64()
            .unwrap()
    };
    let (raw, head) = (r10(0), r10(1));
    check(
        head - raw >= 0.05,
        format!("R@10 raw {raw:.3}, trained head {head:.3}, gain {:+.3}", head - raw),
    )
}

fn retrieve_order_pipeline() -> Outcome {
    let corpus = generate_synthetic(&SynthConfig { n_examples: 300, ..SynthConfig::default() }, 21).unwrap();
    let examples = &corpus.examples;
    let pools = PoolBuilder::new(examples);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let k = 20;
    for ex in examples.iter().take(100) {
        let pool = pools.build(ex, 500, 1).map_err(|e| e.to_string())?;
        let gt: HashSet<&String> = ex.frame_ids.iter().collect();
        if pool.len() != 500 || !ex.frame_ids.iter().all(|f| pool.contains(f)) {
            return Err(format!("{}: pool lacks ground truth or has wrong size", ex.example_id));
        }
        let mut predicted = pool.clone();
        predicted.shuffle(&mut rng);
        let s = retrieve_and_order_score(&predicted[..k], ex, k).map_err(|e| e.to_string())?;
        if s.product > s.r_at_k + 1e-12 || s.product.abs() > 1.0 {
            return Err(format!("{}: product {} exceeds R@K {}", ex.example_id, s.product, s.r_at_k));
        }
        let mut oracle = ex.frame_ids.clone();
        oracle.extend(pool.iter().filter(|f| !gt.contains(f)).take(k - ex.frame_ids.len()).cloned());
        let s = retrieve_and_order_score(&oracle, ex, k).map_err(|e| e.to_string())?;
        if (s.r_at_k, s.tau_at_k, s.product) != (1.0, 1.0, 1.0) {
            return Err(format!("{}: oracle scored {s:?}", ex.example_id));
        }
    }
    Ok("100 examples, pool 500: product <= R@K everywhere; oracle scores (1, 1, 1)".into())
}

/// Runs every command twice with the same seed and compares the artifacts.
fn determinism(root: &Path) -> Outcome {
    let cfg = root.join("det.ini");
    std::fs::write(
        &cfg,
        "[synth]\nn_examples = 120\n[codebook]\nsize = 64\n[model]\nmodel_dim = 16\ndepth = 1\nheads = 2\nmax_text_tokens = 8\n\
         [train]\nmodels = orderer,rerank,head\ntotal_steps = 15\n[rerank]\nmodel_dim = 16\ntotal_steps = 10\n\
         [head]\ntotal_steps = 10\n[eval]\npool_size = 30\nks = 5,10\nseg_limit = 50\n[sweep]\ngrid = none\nlambdas = 0.1,10\ntotal_steps = 5\n",
    )
    .unwrap();
    let mut compared = 0;
    let run_all = |tag: &str| -> Result<PathBuf, String> {
        let base = root.join(format!("det-{tag}"));
        let data = base.join("data");
        let c = p(&cfg);
        run_cli(&["--config", c, "--seed", "5", "synth", "--out", p(&data)])?;
        let train = base.join("train");
        run_cli(&["--config", c, "--seed", "5", "train", "--data", p(&data), "--out", p(&train)])?;
        let ck = train.join("model.tvsc");
        for s in ["naive", "sliding", "cumulative", "dynamic", "contextual", "vq-trans", "rerank"] {
            run_cli(&[
                "--config",
                c,
                "--seed",
                "5",
                "order",
                "--data",
                p(&data),
                "--out",
                p(&base.join(format!("order-{s}"))),
                "--strategy",
                s,
                "--checkpoint",
                p(&ck),
            ])?;
            run_cli(&[
                "--config",
                c,
                "--seed",
                "5",
                "retrieve-order",
                "--data",
                p(&data),
                "--out",
                p(&base.join(format!("ro-{s}"))),
                "--strategy",
                s,
                "--checkpoint",
                p(&ck),
            ])?;
        }
        run_cli(&["--config", c, "--seed", "5", "retrieve", "--data", p(&data), "--out", p(&base.join("retrieve")), "--checkpoint", p(&ck), "--use-head"])?;
        run_cli(&[
            "--config",
            c,
            "--seed",
            "5",
            "eval",
            "--data",
            p(&data),
            "--out",
            p(&base.join("eval-pred")),
            "--predictions",
            p(&base.join("order-vq-trans").join("predictions.jsonl")),
        ])?;
        run_cli(&["--config", c, "--seed", "5", "sweep", "--data", p(&data), "--out", p(&base.join("sweep"))])?;
        run_cli(&["--config", c, "--seed", "5", "stats", "--data", p(&data), "--out", p(&base.join("stats"))])?;
        Ok(base)
    };
    let a = run_all("a")?;
    let b = run_all("b")?;
    let mut dirs = vec![a.clone()];
    while let Some(d) = dirs.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                dirs.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_str().unwrap();
            // manifests record the differing run paths
            if name == "manifest.json" {
                continue;
            }
            let twin = b.join(path.strip_prefix(&a).unwrap());
            if std::fs::read(&path).unwrap() != std::fs::read(&twin).map_err(|e| format!("{}: {e}", twin.display()))? {
                return Err(format!("{} differs between runs", path.strip_prefix(&a).unwrap().display()));
            }
            compared += 1;
        }
    }
    let examples: Vec<StoryboardExample> = read_examples(a.join("data").join("examples.jsonl")).unwrap();
    check(
        compared > 40 && !examples.is_empty(),
        format!("{compared} artifacts byte-identical across two runs of every command"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let root = tempfile::tempdir().unwrap();
    let root_path = root.path().to_path_buf();

    let mut learn: Option<Result<LearnRuns, String>> = None;
    let names = [
        "metric oracle",
        "tau endpoints",
        "vq oracle",
        "assignment oracle",
        "gradient check",
        "straight-through contract",
        "learnability",
        "vq ablation",
        "retrieval direction",
        "retrieve-and-order pipeline",
        "beam reduction",
        "determinism",
        "format round-trips",
    ];
    let mut failed = 0;
    let mut ran = 0;
    for name in names {
        if !selected(name) {
            continue;
        }
        let start = Instant::now();
        let outcome = match name {
            "learnability" | "vq ablation" => {
                let runs = learn.get_or_insert_with(|| {
                    catch_unwind(AssertUnwindSafe(|| learn_runs(&root_path))).unwrap_or_else(|_| Err("panicked".into()))
                });
                if name == "learnability" {
                    learnability(runs)
                } else {
                    vq_ablation(runs)
                }
            }
            _ => catch_unwind(AssertUnwindSafe(|| match name {
                "metric oracle" => metric_oracle(),
                "tau endpoints" => tau_endpoints(),
                "vq oracle" => vq_oracle(),
                "assignment oracle" => assignment_oracle(),
                "gradient check" => gradient_check(),
                "straight-through contract" => straight_through_contract(),
                "retrieval direction" => retrieval_direction(&root_path),
                "retrieve-and-order pipeline" => retrieve_order_pipeline(),
                "beam reduction" => beam_reduction(),
                "determinism" => determinism(&root_path),
                "format round-trips" => format_round_trips(),
                _ => unreachable!(),
            }))
            .unwrap_or_else(|_| Err("panicked".into())),
        };
        ran += 1;
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name:<28} {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<28} {d}  [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    drop(root);
    if failed > 0 {
        std::process::exit(1);
    }
}
