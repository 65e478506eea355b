//! One function per subcommand. Each reads a resolved [`RunConfig`], writes
//! its artifacts into a run directory and finishes with a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use storyboard_core::data::stats::load_lexicon;
use storyboard_core::data::{
    corpus_stats, generate_synthetic, load_dataset, save_embeddings, split_dataset, write_examples, Corpus,
    CorpusStats, DatasetSplit, StoryboardExample, SynthConfig,
};
use storyboard_core::eval::{bucket_report, tau_best, EvalReport, ExampleResult};
use storyboard_core::nn::{
    prepare_sequences, train_orderer, train_rerank, train_retrieval_head, Bundle, Conditioning, HeadConfig,
    LossRecord, NegativePolicy, OrdererConfig, OrdererModel, RerankConfig, RerankModel, RetrievalExample,
    RetrievalHead, TrainConfig,
};
use storyboard_core::ordering::{read_predictions, write_predictions, PredictionRecord};
use storyboard_core::pipeline::{
    evaluate_ordering, evaluate_retrieval, evaluate_retrieve_order, mean_storyboard_length, Models,
    RetrieveOrderOptions, Strategy, StrategyOptions,
};
use storyboard_core::retrieval::retrieve_topk;
use storyboard_core::vq::{codebook_utilization, Codebook, Utilization, VqVariant};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const TEXTS_FILE: &str = "texts.tvse";
pub const FRAMES_FILE: &str = "frames.tvse";
pub const CHECKPOINT_FILE: &str = "model.tvsc";

/// Sub-seeds drawn in a fixed order from the run seed.
pub fn derive_seeds(run_seed: u64) -> BTreeMap<String, u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    [
        "synth",
        "split",
        "orderer_init",
        "codebook_init",
        "orderer_train",
        "rerank_init",
        "rerank_train",
        "head_init",
        "head_train",
        "eval",
    ]
    .iter()
    .map(|name| (name.to_string(), rng.random::<u64>()))
    .collect()
}

fn seed(seeds: &BTreeMap<String, u64>, name: &str) -> u64 {
    seeds[name]
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_text(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn synth_config(cfg: &RunConfig) -> Result<SynthConfig> {
    let words: Vec<usize> = cfg.list("synth.words_per_step")?;
    if words.len() != 2 {
        bail!("synth.words_per_step needs two values, min,max");
    }
    let sc = SynthConfig {
        n_examples: cfg.get("synth.n_examples")?,
        examples_per_movie: cfg.get("synth.examples_per_movie")?,
        dim: cfg.get("synth.dim")?,
        signal_strength: cfg.get("synth.signal_strength")?,
        noise: cfg.get("synth.noise")?,
        text_noise: cfg.get("synth.text_noise")?,
        nuisance: cfg.get("synth.nuisance")?,
        nuisance_dims: cfg.get("synth.nuisance_dims")?,
        step_angle_deg: cfg.get("synth.step_angle_deg")?,
        plane_share: cfg.get("synth.plane_share")?,
        movie_correlation: cfg.get("synth.movie_correlation")?,
        scenes: cfg.get("synth.scenes")?,
        scene_share: cfg.get("synth.scene_share")?,
        words_per_step: (words[0], words[1]),
        ..SynthConfig::default()
    };
    sc.validate()?;
    Ok(sc)
}

/// `synth`: writes a planted corpus as a dataset directory.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let seeds = derive_seeds(cfg.get("run.seed")?);
    let corpus = generate_synthetic(&synth_config(cfg)?, seed(&seeds, "synth"))?;
    write_examples(&corpus.examples, out.join(EXAMPLES_FILE))?;
    save_embeddings(&corpus.texts, out.join(TEXTS_FILE))?;
    save_embeddings(&corpus.frames, out.join(FRAMES_FILE))?;
    let mut m = Manifest::new("synth", cfg.values());
    m.seeds.insert("synth".into(), seed(&seeds, "synth"));
    m.finish(out, &[EXAMPLES_FILE, TEXTS_FILE, FRAMES_FILE])
}

/// A dataset directory loaded and split.
pub struct Dataset {
    pub dir: PathBuf,
    pub corpus: Corpus,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = PathBuf::from(cfg.raw("data.dir"));
        if dir.as_os_str().is_empty() {
            bail!("data.dir is not set (use --data)");
        }
        let corpus = load_dataset(dir.join(EXAMPLES_FILE), dir.join(TEXTS_FILE), dir.join(FRAMES_FILE))
            .with_context(|| format!("loading dataset from {}", dir.display()))?;
        let ratios: Vec<f64> = cfg.list("data.split")?;
        if ratios.len() != 3 {
            bail!("data.split needs three ratios train,val,test");
        }
        let seeds = derive_seeds(cfg.get("run.seed")?);
        let split = split_dataset(&corpus.examples, [ratios[0], ratios[1], ratios[2]], seed(&seeds, "split"))?;
        Ok(Self { dir, corpus, split })
    }

    pub fn part(&self, name: &str) -> Result<Vec<StoryboardExample>> {
        let ids = match name {
            "train" => &self.split.train,
            "val" => &self.split.val,
            "test" => &self.split.test,
            "all" => return Ok(self.corpus.examples.clone()),
            _ => bail!("unknown split {name:?}; expected train, val, test or all"),
        };
        let by_id: HashMap<&str, &StoryboardExample> =
            self.corpus.examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
        Ok(ids.iter().map(|id| by_id[id.as_str()].clone()).collect())
    }

    fn record_inputs(&self, m: &mut Manifest) -> Result<()> {
        for f in [EXAMPLES_FILE, TEXTS_FILE, FRAMES_FILE] {
            m.input(f, &self.dir.join(f))?;
        }
        Ok(())
    }
}

pub fn orderer_config(cfg: &RunConfig, text_dim: usize, frame_dim: usize) -> Result<OrdererConfig> {
    let mut oc = OrdererConfig::new(text_dim, frame_dim, cfg.get("codebook.dim")?);
    oc.model_dim = cfg.get("model.model_dim")?;
    oc.depth = cfg.get("model.depth")?;
    oc.heads = cfg.get("model.heads")?;
    oc.max_text_tokens = cfg.get("model.max_text_tokens")?;
    oc.max_frames = cfg.get("model.max_frames")?;
    oc.conditioning = Conditioning::parse(cfg.raw("model.conditioning"))?;
    oc.use_vq = cfg.flag("model.use_vq")?;
    oc.validate()?;
    Ok(oc)
}

pub fn new_codebook(cfg: &RunConfig, seed: u64) -> Result<Codebook> {
    let size: usize = cfg.get("codebook.size")?;
    let variant = VqVariant::parse(cfg.raw("codebook.variant"), size)?;
    Ok(Codebook::new(variant, size, cfg.get("codebook.dim")?, cfg.get("codebook.beta")?, seed)?)
}

pub fn orderer_train_config(cfg: &RunConfig, seed: u64) -> Result<TrainConfig> {
    let tc = TrainConfig {
        batch_size: cfg.get("train.batch_size")?,
        weight_decay: cfg.get("train.weight_decay")?,
        learning_rate: cfg.get("train.learning_rate")?,
        codebook_learning_rate: cfg.get("train.codebook_learning_rate")?,
        warmup_fraction: cfg.get("train.warmup_fraction")?,
        total_steps: cfg.get("train.total_steps")?,
        lambda_vq: cfg.get("train.lambda_vq")?,
        negatives: NegativePolicy::parse(cfg.raw("train.negatives"))?,
        seed,
        grad_clip: cfg.get("train.grad_clip")?,
        dead_code_window: cfg.get("train.dead_code_window")?,
    };
    tc.validate()?;
    Ok(tc)
}

/// Trains an orderer and its codebook on `train`.
pub fn fit_orderer(
    cfg: &RunConfig,
    corpus: &Corpus,
    train: &[StoryboardExample],
    seeds: &BTreeMap<String, u64>,
) -> Result<(OrdererModel, Codebook, Vec<LossRecord>)> {
    let oc = orderer_config(cfg, corpus.texts.dim(), corpus.frames.dim())?;
    let max_text = oc.max_text_tokens;
    let mut model = OrdererModel::new(oc, seed(seeds, "orderer_init"))?;
    let mut codebook = new_codebook(cfg, seed(seeds, "codebook_init"))?;
    let seqs = prepare_sequences(train, &corpus.texts, &corpus.frames, max_text)?;
    let tc = orderer_train_config(cfg, seed(seeds, "orderer_train"))?;
    let curve = train_orderer(&mut model, &mut codebook, &seqs, &tc)?;
    Ok((model, codebook, curve))
}

pub fn fit_rerank(
    cfg: &RunConfig,
    corpus: &Corpus,
    train: &[StoryboardExample],
    seeds: &BTreeMap<String, u64>,
) -> Result<(RerankModel, Vec<LossRecord>)> {
    let mut rc = RerankConfig::new(corpus.texts.dim(), corpus.frames.dim());
    rc.model_dim = cfg.get("rerank.model_dim")?;
    rc.heads = cfg.get("rerank.heads")?;
    rc.max_text_tokens = cfg.get("model.max_text_tokens")?;
    rc.max_frames = cfg.get("model.max_frames")?;
    let mut model = RerankModel::new(rc, seed(seeds, "rerank_init"))?;
    let seqs = prepare_sequences(train, &corpus.texts, &corpus.frames, model.config.max_text_tokens)?;
    let tc = TrainConfig {
        total_steps: cfg.get("rerank.total_steps")?,
        learning_rate: cfg.get("rerank.learning_rate")?,
        ..orderer_train_config(cfg, seed(seeds, "rerank_train"))?
    };
    let curve = train_rerank(&mut model, &seqs, &tc)?;
    Ok((model, curve))
}

pub fn fit_head(
    cfg: &RunConfig,
    corpus: &Corpus,
    train: &[StoryboardExample],
    seeds: &BTreeMap<String, u64>,
) -> Result<(RetrievalHead, Vec<LossRecord>)> {
    let shared: usize = cfg.get("head.shared_dim")?;
    let hc = HeadConfig {
        text_dim: corpus.texts.dim(),
        frame_dim: corpus.frames.dim(),
        shared_dim: if shared == 0 { corpus.texts.dim() } else { shared },
    };
    let mut head = RetrievalHead::new(hc, seed(seeds, "head_init"))?;
    let data = train
        .iter()
        .map(|ex| {
            Ok(RetrievalExample {
                text: corpus.texts.vector(&ex.text_id)?,
                frames: ex.frame_ids.iter().map(|f| corpus.frames.vector(f)).collect::<Result<_, _>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tc = TrainConfig {
        total_steps: cfg.get("head.total_steps")?,
        learning_rate: cfg.get("head.learning_rate")?,
        batch_size: cfg.get("head.batch_size")?,
        ..orderer_train_config(cfg, seed(seeds, "head_train"))?
    };
    let curve = train_retrieval_head(&mut head, &data, &tc)?;
    Ok((head, curve))
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: String,
    steps: usize,
    final_total: Option<f64>,
    final_trans: Option<f64>,
    final_vq: Option<f64>,
    tau: Option<f64>,
    codebook: Option<Utilization>,
}

fn summarize(model: &str, curve: &[LossRecord]) -> TrainSummary {
    let last = curve.last();
    TrainSummary {
        model: model.into(),
        steps: curve.len(),
        final_total: last.map(|l| l.total),
        final_trans: last.map(|l| l.trans),
        final_vq: last.map(|l| l.vq),
        tau: last.map(|l| l.tau),
        codebook: None,
    }
}

/// Codebook usage over the frames of `examples`.
pub fn utilization(model: &OrdererModel, codebook: &Codebook, corpus: &Corpus, examples: &[StoryboardExample]) -> Result<Utilization> {
    let mut assignments = Vec::new();
    for ex in examples {
        let raw = storyboard_core::nn::frame_matrix(&corpus.frames, &ex.frame_ids)?;
        let z = model.encode_frames(&raw);
        for row in z.rows() {
            assignments.push(codebook.leaf_index(&codebook.quantize(&row.to_vec())));
        }
    }
    Ok(codebook_utilization(&assignments, codebook.size)?)
}

/// `train`: fits the models named in `train.models` on the train split and
/// saves them in one checkpoint.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let data = Dataset::load(cfg)?;
    let seeds = derive_seeds(cfg.get("run.seed")?);
    let train = data.part("train")?;
    let models: Vec<String> = cfg.list("train.models")?;
    if models.is_empty() {
        bail!("train.models names no model");
    }
    let mut bundle = Bundle::default();
    let mut curves: BTreeMap<String, Vec<LossRecord>> = BTreeMap::new();
    let mut summaries = Vec::new();
    for name in &models {
        match name.as_str() {
            "orderer" => {
                let (model, codebook, curve) = fit_orderer(cfg, &data.corpus, &train, &seeds)?;
                let mut s = summarize(name, &curve);
                if model.config.use_vq {
                    s.codebook = Some(utilization(&model, &codebook, &data.corpus, &train)?);
                }
                summaries.push(s);
                curves.insert(name.clone(), curve);
                bundle.orderer = Some(model);
                bundle.codebook = Some(codebook);
            }
            "rerank" => {
                let (model, curve) = fit_rerank(cfg, &data.corpus, &train, &seeds)?;
                summaries.push(summarize(name, &curve));
                curves.insert(name.clone(), curve);
                bundle.rerank = Some(model);
            }
            "head" => {
                let (head, curve) = fit_head(cfg, &data.corpus, &train, &seeds)?;
                summaries.push(summarize(name, &curve));
                curves.insert(name.clone(), curve);
                bundle.head = Some(head);
            }
            other => bail!("unknown model {other:?} in train.models; expected orderer, rerank or head"),
        }
    }
    bundle.extra.insert("train.lambda_vq".into(), cfg.raw("train.lambda_vq").into());
    bundle.extra.insert("train.negatives".into(), cfg.raw("train.negatives").into());
    bundle.save(out.join(CHECKPOINT_FILE))?;
    write_json(out, "losses.json", &curves)?;
    write_json(out, "report.json", &summaries)?;
    let mut text = String::new();
    for s in &summaries {
        let _ = writeln!(
            text,
            "{:<8} steps {:>6}  loss {}  trans {}  vq {}{}",
            s.model,
            s.steps,
            fmt_opt(s.final_total),
            fmt_opt(s.final_trans),
            fmt_opt(s.final_vq),
            s.codebook
                .map(|u| format!("  codes used {:.3}  perplexity {:.1}", u.used_fraction, u.perplexity))
                .unwrap_or_default()
        );
    }
    write_text(out, "report.txt", &text)?;
    let mut m = Manifest::new("train", cfg.values());
    m.seeds = seeds;
    data.record_inputs(&mut m)?;
    m.finish(out, &[CHECKPOINT_FILE, "losses.json", "report.json", "report.txt"])
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn strategy_options(cfg: &RunConfig, seeds: &BTreeMap<String, u64>) -> Result<StrategyOptions> {
    Ok(StrategyOptions {
        beam_width: cfg.get("eval.beam_width")?,
        segmentation_limit: cfg.get("eval.seg_limit")?,
        seed: seed(seeds, "eval"),
    })
}

fn load_bundle(checkpoint: Option<&Path>, m: &mut Manifest) -> Result<Bundle> {
    match checkpoint {
        Some(p) => {
            m.input(CHECKPOINT_FILE, p)?;
            Bundle::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
        }
        None => Ok(Bundle::default()),
    }
}

fn models_of<'a>(bundle: &'a Bundle, use_head: bool) -> Result<Models<'a>> {
    let orderer = match (&bundle.orderer, &bundle.codebook) {
        (Some(m), Some(c)) => Some((m, c)),
        _ => None,
    };
    let head = if use_head {
        Some(bundle.head.as_ref().context("eval.use_head is set but the checkpoint has no retrieval head")?)
    } else {
        None
    };
    Ok(Models {
        orderer,
        rerank: bundle.rerank.as_ref(),
        head,
    })
}

fn check_strategy(strategy: Strategy, models: &Models<'_>) -> Result<()> {
    if strategy.needs_orderer() && models.orderer.is_none() {
        bail!("strategy {} needs --checkpoint with a trained orderer", strategy.name());
    }
    if strategy.needs_rerank() && models.rerank.is_none() {
        bail!("strategy {} needs --checkpoint with a trained re-ranker", strategy.name());
    }
    Ok(())
}

/// Scores a predictions file under the ordering protocol.
pub fn score_predictions(records: &[PredictionRecord], examples: &[StoryboardExample]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &StoryboardExample> = examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
    let mut results = Vec::with_capacity(records.len());
    for r in records {
        let ex = by_id
            .get(r.example_id.as_str())
            .with_context(|| format!("prediction for unknown example {}", r.example_id))?;
        let variants = if ex.gt_variants.is_empty() { vec![ex.frame_ids.clone()] } else { ex.gt_variants.clone() };
        let tau = tau_best(&r.ordered_ids, &variants).with_context(|| format!("scoring {}", r.example_id))?;
        results.push(ExampleResult {
            example_id: r.example_id.clone(),
            length: ex.frame_ids.len(),
            tau,
            k: None,
            r_at_k: None,
            product: None,
        });
    }
    let mut report = bucket_report(&results);
    report.protocol = "ordering".into();
    report.strategy = "predictions".into();
    Ok(report)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_text(out, "report.json", &(report.to_json() + "\n"))?;
    write_text(out, "report.txt", &report.render_text())
}

/// `eval` (and `order` / `retrieve-order`): runs one protocol for one
/// strategy, or scores an existing predictions file.
pub fn run_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    prepare_out(out)?;
    let data = Dataset::load(cfg)?;
    let seeds = derive_seeds(cfg.get("run.seed")?);
    let examples = data.part(cfg.raw("eval.split"))?;
    let protocol = cfg.raw("eval.protocol").to_string();
    let mut m = Manifest::new("eval", cfg.values());
    m.seeds = seeds.clone();
    data.record_inputs(&mut m)?;
    let mut outputs = vec!["report.json", "report.txt"];

    if let Some(p) = predictions {
        if protocol != "ordering" {
            bail!("--predictions can only be scored under the ordering protocol");
        }
        m.input("predictions", p)?;
        let report = score_predictions(&read_predictions(p)?, &examples)?;
        write_report(out, &report)?;
        return m.finish(out, &outputs);
    }

    let bundle = load_bundle(checkpoint, &mut m)?;
    let use_head = cfg.flag("eval.use_head")?;
    let models = models_of(&bundle, use_head)?;
    let opts = strategy_options(cfg, &seeds)?;
    let pool_size: usize = cfg.get("eval.pool_size")?;
    let report = match protocol.as_str() {
        "ordering" | "retrieve-order" => {
            let strategy = Strategy::parse(cfg.raw("eval.strategy"))?;
            check_strategy(strategy, &models)?;
            let run = if protocol == "ordering" {
                evaluate_ordering(strategy, &examples, &data.corpus, models, &opts)?
            } else {
                let mut n_segments: usize = cfg.get("eval.n_segments")?;
                if n_segments == 0 {
                    n_segments = mean_storyboard_length(&data.part("train")?);
                }
                let ro = RetrieveOrderOptions {
                    pool_size,
                    ks: cfg.list("eval.ks")?,
                    n_segments,
                };
                let mut run = evaluate_retrieve_order(strategy, &examples, &examples, &data.corpus, models, &opts, &ro)?;
                run.report.notes.push(format!(
                    "retrieval in {} space; text-segment strategies use {n_segments} segments",
                    if use_head { "projected" } else { "raw" }
                ));
                run
            };
            write_predictions(&run.predictions, out.join("predictions.jsonl"))?;
            outputs.push("predictions.jsonl");
            run.report
        }
        "retrieval" => retrieval_report(cfg, &data, &examples, &bundle, pool_size, &seeds)?,
        other => bail!("unknown protocol {other:?}; expected ordering, retrieve-order or retrieval"),
    };
    write_report(out, &report)?;
    m.finish(out, &outputs)
}

fn retrieval_report(
    cfg: &RunConfig,
    data: &Dataset,
    examples: &[StoryboardExample],
    bundle: &Bundle,
    pool_size: usize,
    seeds: &BTreeMap<String, u64>,
) -> Result<EvalReport> {
    let ks: Vec<usize> = cfg.list("eval.retrieval_ks")?;
    let eval_seed = seed(seeds, "eval");
    let mut rows = vec![evaluate_retrieval("raw", examples, examples, &data.corpus, None, pool_size, &ks, eval_seed)?];
    if let Some(h) = &bundle.head {
        rows.push(evaluate_retrieval("head", examples, examples, &data.corpus, Some(h), pool_size, &ks, eval_seed)?);
    }
    Ok(EvalReport {
        protocol: "retrieval".into(),
        strategy: "-".into(),
        count: examples.len(),
        retrieval: rows,
        ..EvalReport::default()
    })
}

/// `retrieve`: top-K rankings for every example of the eval split plus the
/// R@K table.
pub fn run_retrieve(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    prepare_out(out)?;
    let data = Dataset::load(cfg)?;
    let seeds = derive_seeds(cfg.get("run.seed")?);
    let examples = data.part(cfg.raw("eval.split"))?;
    let mut m = Manifest::new("retrieve", cfg.values());
    m.seeds = seeds.clone();
    data.record_inputs(&mut m)?;
    let bundle = load_bundle(checkpoint, &mut m)?;
    let head = if cfg.flag("eval.use_head")? {
        Some(bundle.head.as_ref().context("eval.use_head is set but the checkpoint has no retrieval head")?)
    } else {
        None
    };
    let pool_size: usize = cfg.get("eval.pool_size")?;
    let ks: Vec<usize> = cfg.list("eval.retrieval_ks")?;
    let k_max = ks.iter().copied().max().context("eval.retrieval_ks is empty")?;
    let pools = storyboard_core::eval::PoolBuilder::new(&examples);
    let mut lines = String::new();
    for ex in &examples {
        let pool = pools.build(ex, pool_size, seed(&seeds, "eval"))?;
        let ranking = retrieve_topk(&ex.text_id, &pool, &data.corpus.texts, &data.corpus.frames, head, k_max)?;
        lines.push_str(&serde_json::to_string(&ranking)?);
        lines.push('\n');
    }
    write_text(out, "rankings.jsonl", &lines)?;
    let report = retrieval_report(cfg, &data, &examples, &bundle, pool_size, &seeds)?;
    write_report(out, &report)?;
    m.finish(out, &["rankings.jsonl", "report.json", "report.txt"])
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub dim: usize,
    pub size: usize,
    pub variant: String,
    pub lambda_vq: f64,
    pub overall_tau: Option<f64>,
    pub bucket_tau: Vec<Option<f64>>,
    pub used_fraction: f64,
    pub perplexity: f64,
    pub final_loss: Option<f64>,
}

/// The codebook grid of the sweep: every dim with every size.
pub const GRID_DIMS: [usize; 4] = [32, 64, 128, 512];
pub const GRID_SIZES: [usize; 3] = [1024, 4096, 8192];

pub fn sweep_grid(grid: &str) -> Result<Vec<(usize, usize)>> {
    match grid {
        "codebook" => Ok(GRID_DIMS
            .iter()
            .flat_map(|&d| GRID_SIZES.iter().map(move |&s| (d, s)))
            .collect()),
        "none" => Ok(Vec::new()),
        other => bail!("unknown sweep grid {other:?}; expected codebook or none"),
    }
}

/// `sweep`: one trained orderer per (dim, size, variant) grid cell and per
/// lambda, each scored on the eval split with the ordering protocol.
pub fn run_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let data = Dataset::load(cfg)?;
    let seeds = derive_seeds(cfg.get("run.seed")?);
    let train = data.part("train")?;
    let examples = data.part(cfg.raw("eval.split"))?;
    let opts = strategy_options(cfg, &seeds)?;
    let steps: usize = cfg.get("sweep.total_steps")?;
    let variants: Vec<String> = cfg.list("sweep.variants")?;
    let lambdas: Vec<f64> = cfg.list("sweep.lambdas")?;

    let mut cells: Vec<(usize, usize, String, f64)> = Vec::new();
    for (dim, size) in sweep_grid(cfg.raw("sweep.grid"))? {
        for v in &variants {
            cells.push((dim, size, v.clone(), cfg.get("train.lambda_vq")?));
        }
    }
    for &l in &lambdas {
        cells.push((cfg.get("codebook.dim")?, cfg.get("codebook.size")?, cfg.raw("codebook.variant").into(), l));
    }

    let mut rows = Vec::with_capacity(cells.len());
    for (dim, size, variant, lambda) in cells {
        let mut c = cfg.clone();
        c.set("codebook.dim", dim)?;
        c.set("codebook.size", size)?;
        c.set("codebook.variant", &variant)?;
        c.set("train.lambda_vq", lambda)?;
        c.set("train.total_steps", steps)?;
        let (model, codebook, curve) = fit_orderer(&c, &data.corpus, &train, &seeds)?;
        let models = Models {
            orderer: Some((&model, &codebook)),
            ..Models::default()
        };
        let run = evaluate_ordering(Strategy::VqTrans, &examples, &data.corpus, models, &opts)?;
        let u = utilization(&model, &codebook, &data.corpus, &examples)?;
        rows.push(SweepRow {
            dim,
            size,
            variant,
            lambda_vq: lambda,
            overall_tau: run.report.overall_tau,
            bucket_tau: run.report.buckets.iter().map(|b| b.mean_tau).collect(),
            used_fraction: u.used_fraction,
            perplexity: u.perplexity,
            final_loss: curve.last().map(|l| l.total),
        });
    }
    write_json(out, "report.json", &rows)?;
    write_text(out, "report.txt", &render_sweep(&rows))?;
    let mut m = Manifest::new("sweep", cfg.values());
    m.seeds = seeds;
    data.record_inputs(&mut m)?;
    m.finish(out, &["report.json", "report.txt"])
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>5} {:>6} {:<16} {:>7} {:>9} {:>9} {:>9} {:>7} {:>8}\n",
        "dim", "size", "variant", "lambda", "Over-All", "[3-5]", "[6-11]", "used", "perplex"
    );
    let f = |x: Option<f64>| x.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:<16} {:>7} {:>9} {:>9} {:>9} {:>7.3} {:>8.1}",
            r.dim,
            r.size,
            r.variant,
            r.lambda_vq,
            f(r.overall_tau),
            f(r.bucket_tau.first().copied().flatten()),
            f(r.bucket_tau.get(1).copied().flatten()),
            r.used_fraction,
            r.perplexity
        );
    }
    out
}

#[derive(Debug, Serialize)]
struct StatsReport {
    all: CorpusStats,
    train: CorpusStats,
    val: CorpusStats,
    test: CorpusStats,
    length_histogram: BTreeMap<usize, usize>,
}

/// `stats`: diversity and concreteness statistics per split.
pub fn run_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let data = Dataset::load(cfg)?;
    let ngrams: Vec<usize> = cfg.list("stats.ngrams")?;
    let mut m = Manifest::new("stats", cfg.values());
    data.record_inputs(&mut m)?;
    let lexicon_path = cfg.raw("stats.lexicon");
    let lexicon = if lexicon_path.is_empty() {
        None
    } else {
        m.input("lexicon", Path::new(lexicon_path))?;
        Some(load_lexicon(lexicon_path)?)
    };
    let stats = |part: &str| -> Result<CorpusStats> { Ok(corpus_stats(&data.part(part)?, &ngrams, lexicon.as_ref())?) };
    let mut length_histogram = BTreeMap::new();
    for ex in &data.corpus.examples {
        *length_histogram.entry(ex.len()).or_insert(0) += 1;
    }
    let report = StatsReport {
        all: stats("all")?,
        train: stats("train")?,
        val: stats("val")?,
        test: stats("test")?,
        length_histogram,
    };
    write_json(out, "report.json", &report)?;
    let mut text = format!("{:<6} {:>8} {:>10}", "split", "examples", "mean words");
    for n in &ngrams {
        let _ = write!(text, " {:>9}", format!("{n}-grams"));
    }
    text.push_str(&format!(" {:>12}\n", "concreteness"));
    for (name, s) in [("all", &report.all), ("train", &report.train), ("val", &report.val), ("test", &report.test)] {
        let count = data.part(name)?.len();
        let _ = write!(text, "{:<6} {:>8} {:>10.2}", name, count, s.word_counts.mean_words);
        for n in &ngrams {
            let _ = write!(text, " {:>9}", s.unique_ngrams[n]);
        }
        let _ = writeln!(text, " {:>12}", s.avg_concreteness.map_or_else(|| "-".into(), |c| format!("{c:.3}")));
    }
    text.push_str("lengths:");
    for (len, n) in &report.length_histogram {
        let _ = write!(text, " {len}:{n}");
    }
    text.push('\n');
    write_text(out, "report.txt", &text)?;
    m.finish(out, &["report.json", "report.txt"])
}
