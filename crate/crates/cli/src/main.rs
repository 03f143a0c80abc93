use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use blendrank::corpus::{load_collection, load_qrels, load_queries, Qrels, QuerySet};
use blendrank::embed::{read_embeddings_tsv, toy_encode, EmbeddingMatrix};
use blendrank::evalstat::{
    bonferroni, evaluate_run, load_run, paired_t_test_reports, per_query_diff, write_run, EvalConfig, Gain, Metric,
};
use blendrank::features::{write_feature_tsv, FeatureMask, FeatureRegistry, MaskVariant};
use blendrank::ltr::{gain_report, random_search_tune, train, Ensemble, LtrDataset, SearchSpace, TrainParams};
use blendrank::pipeline::{
    blended_dataset, build_dense_index, build_lexical_index, first_stage_runs, make_synthetic, mask_dataset,
    write_sweep_csv, write_sweep_latency_csv, Cascade, PipelineConfig,
};
use blendrank::scorer::compile;

#[derive(Parser)]
#[command(name = "blendrank", version, about = "Dense first stage + LambdaMART re-ranking over blended features")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// key = value pipeline config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. --set nprobe=8.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; latency numbers are only meaningful with 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    nlist: Option<usize>,
    /// Lists probed per query (default: all).
    #[arg(long, global = true)]
    nprobe: Option<usize>,
    /// Probe/score metric: dot or cosine.
    #[arg(long, global = true)]
    metric: Option<String>,
    #[arg(long, global = true)]
    kmeans_iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "linear")]
    gain: String,
    #[arg(long, default_value_t = 10)]
    ndcg_k: usize,
    #[arg(long, default_value_t = 10)]
    mrr_k: usize,
    #[arg(long, default_value_t = 1000)]
    recall_k: usize,
    /// Minimum grade counted as relevant by MRR and recall.
    #[arg(long, default_value_t = 1)]
    rel_threshold: u32,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            ndcg_k: self.ndcg_k,
            mrr_k: self.mrr_k,
            recall_k: self.recall_k,
            gain: self.gain.parse::<Gain>()?,
            relevance_threshold: self.rel_threshold,
        })
    }
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    num_leaves: usize,
    #[arg(long, default_value_t = 10.0)]
    min_sum_hessian_leaf: f64,
    #[arg(long, default_value_t = 100)]
    min_data_leaf: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long, default_value_t = 500)]
    max_trees: usize,
}

impl ParamArgs {
    fn params(&self, seed: u64) -> TrainParams {
        TrainParams {
            learning_rate: self.learning_rate,
            num_leaves: self.num_leaves,
            min_sum_hessian_leaf: self.min_sum_hessian_leaf,
            min_data_leaf: self.min_data_leaf,
            patience: self.patience,
            max_trees: self.max_trees,
            seed,
            ..TrainParams::default()
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the inverted index of the collection.
    IndexLexical {
        #[arg(long)]
        stem: bool,
    },
    /// Train k-means and build the IVF index over the document embeddings.
    IndexDense,
    /// Encode a `id<TAB>text` TSV with the toy encoder into an embedding file.
    EncodeToy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dim: usize,
    },
    /// Convert a TSV of `id v1 ... vD` rows into an embedding file.
    ConvertEmbeddings {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the row ids, one per line.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Generate a synthetic collection, queries, qrels, embeddings and a config.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        docs: usize,
        #[arg(long, default_value_t = 500)]
        queries: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Also write consecutive query splits, e.g. 300,100,100 →
        /// queries.train.tsv, queries.valid.tsv, queries.test.tsv.
        #[arg(long, value_delimiter = ',')]
        split: Vec<usize>,
    },
    /// Build an SVMlight training file (full blended features).
    BuildTrain {
        /// Queries to sample (defaults to the config's queries).
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        negatives: usize,
    },
    /// Train a LambdaMART model from SVMlight files.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (iteration, valid_ndcg).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Random-search the learning rate, min_sum_hessian_leaf and
    /// min_data_leaf on the validation set, then train.
    Tune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Lower end of the min_data_leaf search range (desk-scale data
        /// may need less than 100).
        #[arg(long, default_value_t = 100)]
        min_data_low: usize,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Run the cascade over a query set and write a TREC run.
    Search {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-query latency CSV.
        #[arg(long)]
        latency: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Score a TREC run against qrels.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "")]
        dataset: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Metrics over a grid of probes × re-ranking cutoffs.
    Sweep {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        probes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "20,100,1000")]
        cutoffs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Wall-clock columns go here; the main CSV stays deterministic.
        #[arg(long)]
        latency_out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Split gain per feature and per family of a model.
    GainReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
        /// Embedding dimension (inferred from the model when omitted).
        #[arg(long)]
        dim: Option<usize>,
        /// Dump the feature registry as JSON.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Paired t-tests and per-query difference histograms of runs against a baseline.
    DiffReport {
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// ndcg, mrr or recall.
        #[arg(long = "eval-metric", default_value = "ndcg")]
        eval_metric: String,
        /// "Improved by at least" bucket.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        /// Number of comparisons for Bonferroni (defaults to the number of runs).
        #[arg(long)]
        comparisons: Option<usize>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Export blended feature rows of the first-stage candidates as TSV.
    DumpFeatures {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time naive traversal against compiled scoring (ns per document).
    BenchScorer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10000)]
        docs: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut c = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for kv in &g.overrides {
        c.apply_override(kv)?;
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(t) = g.threads {
        c.threads = t;
    }
    if let Some(n) = g.nlist {
        c.nlist = Some(n);
    }
    if let Some(n) = g.nprobe {
        c.nprobe = Some(n);
    }
    if let Some(m) = &g.metric {
        c.metric = m.parse()?;
    }
    if let Some(k) = g.kmeans_iters {
        c.kmeans_iters = k;
    }
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn query_set(path: Option<&PathBuf>, config: &PipelineConfig) -> Result<QuerySet> {
    let p = match path {
        Some(p) => p.as_path(),
        None => config.require(&config.queries, "queries")?,
    };
    Ok(load_queries(p)?)
}

fn qrels_opt(config: &PipelineConfig) -> Result<Option<Qrels>> {
    Ok(match &config.qrels {
        Some(p) => Some(load_qrels(p)?),
        None => None,
    })
}

fn mask_of(arg: &Option<String>, config: &PipelineConfig) -> Result<MaskVariant> {
    Ok(match arg {
        Some(m) => m.parse()?,
        None => config.mask,
    })
}

/// The registry a full-length dataset was built with.
fn registry_for_width(width: usize) -> Result<FeatureRegistry> {
    let base = FeatureRegistry::new(1).len() - 3;
    if width < base + 3 || !(width - base).is_multiple_of(3) {
        bail!("{width} features is not a blended vector width");
    }
    Ok(FeatureRegistry::new((width - base) / 3))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let seed = config.seed;

    match cli.cmd {
        Cmd::IndexLexical { stem } => {
            let corpus = load_collection(config.require(&config.collection, "collection")?)?;
            let index = build_lexical_index(&corpus, stem || config.stem);
            let out = config.require(&config.lexical_index, "lexical_index")?;
            index.save(out)?;
            log::info!("indexed {} docs, avg length {:.1} → {}", index.num_docs(), index.avg_doc_len(), out.display());
        }
        Cmd::IndexDense => {
            let path = config.require(&config.doc_embeddings, "doc_embeddings")?;
            let vectors = blendrank::embed::load_embeddings(path, None)?;
            let t = Instant::now();
            let ivf = build_dense_index(&vectors, config.nlist, config.metric, config.kmeans_iters, seed)?;
            let out = config.require(&config.dense_index, "dense_index")?;
            ivf.save(out)?;
            let sizes = ivf.list_sizes();
            log::info!(
                "{} lists over {} docs (largest {}, empty {}) in {:.1}s → {}",
                ivf.nlist(),
                ivf.n_docs(),
                sizes.iter().max().unwrap_or(&0),
                sizes.iter().filter(|&&s| s == 0).count(),
                t.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Cmd::EncodeToy { input, output, dim } => {
            let rows = load_queries(&input)?;
            let vecs = rows.iter().map(|q| toy_encode::<f32>(&q.text, dim, seed));
            let m = EmbeddingMatrix::from_rows(dim, vecs)?;
            m.save(&output)?;
            log::info!("encoded {} rows → {}", m.rows(), output.display());
        }
        Cmd::ConvertEmbeddings { input, output, ids } => {
            let (row_ids, m) = read_embeddings_tsv(&input)?;
            m.save(&output)?;
            if let Some(p) = ids {
                let mut w = create(&p)?;
                for id in &row_ids {
                    writeln!(w, "{id}")?;
                }
                w.flush()?;
            }
            log::info!("{} x {} → {}", m.rows(), m.dim(), output.display());
        }
        Cmd::MakeSynthetic { out, docs, queries, dim, split } => {
            let data = make_synthetic(docs, queries, dim, seed)?;
            let mut c = data.write_to_dir(&out)?;
            c.seed = seed;
            std::fs::write(out.join("pipeline.conf"), relative_config(&c, &out).to_string())?;
            if !split.is_empty() {
                let names = ["train", "valid", "test"];
                if split.len() > names.len() {
                    bail!("at most {} splits", names.len());
                }
                for (part, name) in data.split_queries(&split)?.iter().zip(names) {
                    part.write_tsv(out.join(format!("queries.{name}.tsv")))?;
                }
            }
            log::info!("{docs} docs, {queries} queries, {} judgments → {}", data.qrels.len(), out.display());
        }
        Cmd::BuildTrain { queries, out, negatives } => {
            let qs = query_set(queries.as_ref(), &config)?;
            let qrels = load_qrels(config.require(&config.qrels, "qrels")?)?;
            let cascade = Cascade::load(&config)?;
            let nprobe = config.nprobe.unwrap_or(cascade.ivf.nlist());
            let ds = blended_dataset(&cascade, &qs, &qrels, config.depth, nprobe, negatives, seed)?;
            ds.save(&out)?;
            log::info!(
                "{} groups, {} rows, {} features → {}",
                ds.groups().len(),
                ds.num_rows(),
                ds.feature_count(),
                out.display()
            );
        }
        Cmd::Train { train: tr, valid, mask, out, log: log_path, params } => {
            let (tr, va, m) = masked_pair(&tr, &valid, mask_of(&mask, &config)?)?;
            let model = train(&tr, &va, &params.params(seed))?.with_mask(m)?;
            save_model(&model, &out, log_path.as_deref())?;
        }
        Cmd::Tune { train: tr, valid, mask, out, log: log_path, trials, min_data_low, params } => {
            let (tr, va, m) = masked_pair(&tr, &valid, mask_of(&mask, &config)?)?;
            let space = SearchSpace {
                min_data_leaf: (min_data_low, SearchSpace::default().min_data_leaf.1),
                ..SearchSpace::default()
            };
            let res = random_search_tune(&tr, &va, &params.params(seed), &space, trials, seed)?;
            for (i, t) in res.trials.iter().enumerate() {
                log::info!(
                    "trial {i}: lr={:.4} min_hess={:.2} min_data={} → {:.5}",
                    t.params.learning_rate,
                    t.params.min_sum_hessian_leaf,
                    t.params.min_data_leaf,
                    t.valid_ndcg
                );
            }
            let model = train(&tr, &va, &res.best)?.with_mask(m)?;
            save_model(&model, &out, log_path.as_deref())?;
        }
        Cmd::Search { queries, out, latency, eval } => {
            let qs = query_set(queries.as_ref(), &config)?;
            let cascade = Cascade::load(&config)?;
            let s = cascade.settings(&config)?;
            let qrels = qrels_opt(&config)?;
            let res = cascade.run_batch(&s, &qs, qrels.as_ref(), &eval.config()?, config.threads > 1)?;
            write_run(&res.run, &out)?;
            if let Some(p) = latency {
                let mut w = csv::Writer::from_writer(create(&p)?);
                for l in &res.latency.per_query {
                    w.serialize(l)?;
                }
                w.flush()?;
            }
            println!("run {} ({} queries) → {}", res.run.tag, res.run.len(), out.display());
            print!("{}", res.latency.summary());
            if let Some(rep) = res.report {
                print!("{rep}");
            }
        }
        Cmd::Evaluate { run, qrels, csv, dataset, eval } => {
            let r = load_run(&run)?;
            let rep = evaluate_run(&r, &load_qrels(&qrels)?, &eval.config()?, &dataset);
            print!("{rep}");
            if let Some(p) = csv {
                rep.write_csv(create(&p)?)?;
            }
        }
        Cmd::Sweep { queries, probes, cutoffs, out, latency_out, eval } => {
            let qs = query_set(queries.as_ref(), &config)?;
            let qrels = load_qrels(config.require(&config.qrels, "qrels")?)?;
            let cascade = Cascade::load(&config)?;
            let base = cascade.settings(&config)?;
            let eval = eval.config()?;
            let rows = cascade.sweep(&base, &probes, &cutoffs, &qs, &qrels, &eval)?;
            write_sweep_csv(&rows, &eval, create(&out)?)?;
            if let Some(p) = latency_out {
                write_sweep_latency_csv(&rows, create(&p)?)?;
            }
            println!("{:>7} {:>7} {:>9} {:>9} {:>9} {:>11}", "nprobe", "cutoff", "nDCG", "recall", "MRR", "latency_ms");
            for r in &rows {
                println!(
                    "{:>7} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>11.3}",
                    r.nprobe, r.cutoff, r.ndcg, r.recall, r.mrr, r.latency_ms
                );
            }
        }
        Cmd::GainReport { model, top, dim, registry } => {
            let m = Ensemble::load(&model)?;
            let reg = match dim {
                Some(d) => FeatureRegistry::new(d),
                None => infer_registry(&m)?,
            };
            if let Some(p) = registry {
                std::fs::write(&p, reg.to_json()?)?;
            }
            print!("{}", gain_report(&m, &reg, top)?);
        }
        Cmd::DiffReport { qrels, baseline, runs, eval_metric, threshold, comparisons, eval } => {
            let qrels = load_qrels(&qrels)?;
            let eval = eval.config()?;
            let metric: Metric = eval_metric.parse()?;
            let base = evaluate_run(&load_run(&baseline)?, &qrels, &eval, "");
            let mut tests = Vec::new();
            let mut hists = Vec::new();
            for r in &runs {
                let rep = evaluate_run(&load_run(r)?, &qrels, &eval, "");
                tests.push((rep.mean(metric), paired_t_test_reports(&base, &rep, metric)?));
                hists.push(per_query_diff(&base, &rep, metric, threshold)?);
            }
            let ps: Vec<f64> = tests.iter().map(|(_, t)| t.p).collect();
            let adj = bonferroni(&ps, comparisons.unwrap_or(runs.len()))?;
            println!("baseline {}: {} = {:.4}", baseline.display(), base.label(metric), base.mean(metric));
            for (((r, (mean, t)), p_adj), h) in runs.iter().zip(&tests).zip(&adj).zip(&hists) {
                println!();
                println!("{}: {} = {:.4} (diff {:+.4})", r.display(), base.label(metric), mean, t.mean_diff);
                println!("t = {:.4}, df = {}, p = {:.3e}, bonferroni p = {:.3e}", t.t, t.df, t.p, p_adj);
                print!("{h}");
            }
        }
        Cmd::DumpFeatures { queries, out } => {
            let qs = query_set(queries.as_ref(), &config)?;
            let cascade = Cascade::load(&config)?;
            let nprobe = config.nprobe.unwrap_or(cascade.ivf.nlist());
            let runs = first_stage_runs(&cascade, &qs, config.depth, nprobe)?;
            let ctx = blendrank::features::FeatureContext {
                index: &cascade.index,
                doc_vectors: &cascade.doc_vectors,
                registry: &cascade.registry,
            };
            let mut w = create(&out)?;
            let mut rows = Vec::new();
            for q in qs.iter() {
                let v = cascade.encoder.encode(q)?;
                let toks = cascade.tokenizer.tokenize(&q.text);
                rows.push((q.id.clone(), runs[&q.id].clone(), ctx.candidate_features(&toks, &v, &runs[&q.id])?));
            }
            let flat: Vec<_> = rows
                .iter()
                .flat_map(|(q, r, fs)| r.ids().zip(fs).map(|(d, f)| (q.clone(), cascade.corpus.doc(d).id.clone(), f)))
                .collect();
            write_feature_tsv(&mut w, &cascade.registry, &flat)?;
            w.flush()?;
        }
        Cmd::BenchScorer { model, docs, repeats } => {
            let m = Ensemble::load(&model)?;
            let compiled = compile(&m)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> =
                (0..docs).map(|_| (0..m.feature_count).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut naive_best = f64::INFINITY;
            let mut qs_best = f64::INFINITY;
            let mut checksum = (0.0, 0.0);
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                checksum.0 = xs.iter().map(|x| m.score(x)).sum::<f64>();
                naive_best = naive_best.min(t.elapsed().as_secs_f64());
                let t = Instant::now();
                checksum.1 = compiled.score_batch(&xs)?.iter().sum::<f64>();
                qs_best = qs_best.min(t.elapsed().as_secs_f64());
            }
            let per = |s: f64| s * 1e9 / docs.max(1) as f64;
            println!("trees {}  conditions {}  docs {docs}", compiled.num_trees(), compiled.num_conditions());
            println!("naive     {:>10.1} ns/doc", per(naive_best));
            println!("compiled  {:>10.1} ns/doc", per(qs_best));
            if checksum.0.to_bits() != checksum.1.to_bits() {
                bail!("score mismatch: naive {} vs compiled {}", checksum.0, checksum.1);
            }
        }
    }
    Ok(())
}

fn masked_pair(
    train_path: &Path,
    valid_path: &Path,
    variant: MaskVariant,
) -> Result<(LtrDataset, LtrDataset, FeatureMask)> {
    let tr = LtrDataset::load(train_path)?;
    let va = LtrDataset::load(valid_path)?;
    if tr.feature_count() != va.feature_count() {
        bail!("train has {} features, valid {}", tr.feature_count(), va.feature_count());
    }
    let overlap = tr.query_ids().find(|q| va.query_ids().any(|v| v == *q));
    if let Some(q) = overlap {
        bail!("query {q} is in both training and validation sets");
    }
    let mask = FeatureMask::new(variant, &registry_for_width(tr.feature_count())?);
    Ok((mask_dataset(&tr, &mask)?, mask_dataset(&va, &mask)?, mask))
}

fn save_model(model: &Ensemble, out: &Path, log_path: Option<&Path>) -> Result<()> {
    model.save(out)?;
    if let Some(p) = log_path {
        model.write_log_csv(p)?;
    }
    let best = model.metadata.as_ref().map(|m| m.best_valid_ndcg).unwrap_or(f64::NAN);
    log::info!("{} trees, valid nDCG@10 {best:.5} → {}", model.len(), out.display());
    Ok(())
}

/// Find the registry whose hash the model's mask was built against.
fn infer_registry(m: &Ensemble) -> Result<FeatureRegistry> {
    match &m.mask {
        Some(mask) => (1..=8192)
            .map(FeatureRegistry::new)
            .find(|r| r.hash() == mask.registry_hash)
            .context("no registry matches the model's mask; pass --dim"),
        None => registry_for_width(m.feature_count),
    }
}

/// Config paths relative to `dir`, so the written directory can be moved.
fn relative_config(c: &PipelineConfig, dir: &Path) -> PipelineConfig {
    let mut c = c.clone();
    for p in [
        &mut c.collection,
        &mut c.queries,
        &mut c.qrels,
        &mut c.doc_embeddings,
        &mut c.query_embeddings,
        &mut c.query_ids,
        &mut c.lexical_index,
        &mut c.dense_index,
        &mut c.model,
    ]
    .into_iter()
    .flatten()
    {
        if let Ok(rel) = p.strip_prefix(dir) {
            *p = rel.to_path_buf();
        }
    }
    c
}
