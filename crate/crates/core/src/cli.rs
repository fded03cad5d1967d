//! Command-line front end. Every subcommand reads one run configuration,
//! prints the resolved seed, writes its outputs and its resolved config
//! into the run directory, and returns an [`Error`] whose
//! [`Error::exit_code`] becomes the process status.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{IndexKind, RunConfig};
use crate::data::{generate_dataset, tokenize, Dataset};
use crate::distill::{sweep_csv, sweep_distill, train_distilled, TeacherCache};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::fast::{embed_corpus, init_fast, train_fast};
use crate::index::{ExactIndex, Index, PqIndex};
use crate::io::write_atomic;
use crate::optim::TrainLog;
use crate::params::ParamStore;
use crate::pipeline::{
    benchmark, curve_csv, mean_recall, rerank_curve, smallest_sufficient_k, split_queries,
    synthetic_corpus, RetrievalPipeline, SlowCorpus,
};
use crate::slow::{train_slow, Direction, SlowModel};

pub const DATASET_FILE: &str = "dataset.txt";
pub const SLOW_CKPT: &str = "slow.ckpt";
pub const FAST_CKPT: &str = "fast.ckpt";
pub const DISTILLED_CKPT: &str = "distilled.ckpt";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const INDEX_FILE: &str = "index.bin";

#[derive(Debug, Parser)]
#[command(
    name = "fastslow",
    version,
    about = "Fast & Slow text-to-image retrieval experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set fast.train.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory (overrides `run.out_dir`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Student {
    Fast,
    Distilled,
}

impl Student {
    fn file(self) -> &'static str {
        match self {
            Student::Fast => FAST_CKPT,
            Student::Distilled => DISTILLED_CKPT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dir {
    Fwd,
    Bwd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Fast model used for the first stage.
    #[arg(long, value_enum, default_value = "distilled")]
    pub student: Student,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the Slow captioning model.
    TrainSlow(TrainArgs),
    /// Train the Fast dual encoder with the contrastive loss.
    TrainFast(TrainArgs),
    /// Train a Fast student distilled from the Slow checkpoint.
    Distill {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha_over_tau2: Option<f64>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Embed the evaluation split and build the index.
    BuildIndex {
        #[arg(long, value_enum, default_value = "distilled")]
        student: Student,
        #[arg(long, value_enum)]
        kind: Option<IndexKindArg>,
    },
    /// Rank the corpus for one caption.
    Query {
        #[arg(long)]
        text: String,
        /// Ranked items printed.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Recall of the fast stage and of the two-stage pipeline.
    Eval {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Use freshly initialized models instead of checkpoints.
        #[arg(long)]
        untrained: bool,
    },
    /// Recall and cost over a grid of (K, β).
    RerankCurve {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Distill one student per (τ, α/τ²) cell and report validation recall.
    SweepDistill,
    /// Latency of fast-only, slow-exhaustive and two-stage ranking.
    Bench {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Replace the corpus with N synthetic embeddings.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Cross-attention maps of one scene and caption, as JSON.
    DumpAttention {
        #[arg(long)]
        scene: u64,
        /// Caption text; the scene's gold caption when omitted.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, value_enum, default_value = "fwd")]
        direction: Dir,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndexKindArg {
    Exact,
    Pq,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSlow(_) => "train-slow",
            Command::TrainFast(_) => "train-fast",
            Command::Distill { .. } => "distill",
            Command::BuildIndex { .. } => "build-index",
            Command::Query { .. } => "query",
            Command::Eval { .. } => "eval",
            Command::RerankCurve { .. } => "rerank-curve",
            Command::SweepDistill => "sweep-distill",
            Command::Bench { .. } => "bench",
            Command::DumpAttention { .. } => "dump-attention",
        }
    }

    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        let train = |push: &mut dyn FnMut(&str, Option<String>), section: &str, t: &TrainArgs| {
            push(
                &format!("{section}.train.steps"),
                t.steps.map(|v| v.to_string()),
            );
            push(
                &format!("{section}.train.batch_size"),
                t.batch_size.map(|v| v.to_string()),
            );
        };
        match self {
            Command::TrainSlow(t) => train(&mut push, "slow", t),
            Command::TrainFast(t) => train(&mut push, "fast", t),
            Command::Distill {
                tau,
                alpha_over_tau2,
                train: t,
            } => {
                push("distill.tau", tau.map(float));
                push("distill.alpha_over_tau2", alpha_over_tau2.map(float));
                train(&mut push, "fast", t);
            }
            Command::BuildIndex { kind, .. } => push(
                "index.kind",
                kind.map(|k| match k {
                    IndexKindArg::Exact => "\"exact\"".into(),
                    IndexKindArg::Pq => "\"pq\"".into(),
                }),
            ),
            Command::Query { pipeline: p, .. }
            | Command::Eval { pipeline: p, .. }
            | Command::RerankCurve { pipeline: p }
            | Command::Bench { pipeline: p, .. } => {
                push("pipeline.k", p.k.map(|v| v.to_string()));
                push("pipeline.beta", p.beta.map(float));
            }
            _ => {}
        }
        o
    }
}

/// TOML float literal.
fn float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Resolves the configuration for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.global.overrides.clone();
    overrides.extend(cli.command.overrides());
    if let Some(d) = &cli.global.out_dir {
        overrides.push(format!("run.out_dir={}", toml_string(&d.to_string_lossy())));
    }
    if let Some(s) = cli.global.seed {
        overrides.push(format!("run.seed={s}"));
    }
    RunConfig::resolve(cli.global.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Runs one command. Output lines for the user go to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    println!("seed: {}", cfg.run.seed);
    let dir = cfg.run.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let name = cli.command.name();
    write_atomic(
        &dir.join(format!("{name}.resolved.toml")),
        cfg.to_toml()?.as_bytes(),
    )?;
    let ctx = Ctx {
        cfg: &cfg,
        dir: &dir,
    };
    match &cli.command {
        Command::GenData => ctx.gen_data(),
        Command::TrainSlow(_) => ctx.train_slow(),
        Command::TrainFast(_) => ctx.train_fast(),
        Command::Distill { .. } => ctx.distill(),
        Command::BuildIndex { student, .. } => ctx.build_index(*student),
        Command::Query {
            text,
            top,
            pipeline,
        } => ctx.query(text, *top, pipeline.student),
        Command::Eval {
            pipeline,
            untrained,
        } => ctx.eval(pipeline.student, *untrained),
        Command::RerankCurve { pipeline } => ctx.rerank_curve(pipeline.student),
        Command::SweepDistill => ctx.sweep(),
        Command::Bench {
            pipeline,
            synthetic,
        } => ctx.bench(pipeline.student, *synthetic),
        Command::DumpAttention {
            scene,
            text,
            direction,
        } => ctx.dump_attention(*scene, text.as_deref(), *direction),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
}

fn missing(path: &Path, hint: &str) -> Error {
    Error::Data(format!("{} not found; run `{hint}` first", path.display()))
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())?;
        println!("wrote {}", p.display());
        Ok(())
    }

    fn log_csv(&self, log: &TrainLog) -> String {
        let mut log = log.clone();
        if !self.cfg.run.record_timings {
            if let Some(c) = log.columns.iter().position(|c| *c == "seconds") {
                for r in &mut log.rows {
                    r[c] = 0.0;
                }
            }
        }
        log.to_csv()
    }

    fn dataset(&self) -> Result<Dataset> {
        let p = self.path(DATASET_FILE);
        if !p.exists() {
            return Err(missing(&p, "gen-data"));
        }
        let data = Dataset::load(&p)?;
        if data.config != self.cfg.data || data.seed != self.cfg.run.seed {
            return Err(Error::Config(format!(
                "{} was generated with a different data config or seed; rerun gen-data",
                p.display()
            )));
        }
        Ok(data)
    }

    fn load_store(&self, mut store: ParamStore, name: &str, hint: &str) -> Result<ParamStore> {
        let p = self.path(name);
        if !p.exists() {
            return Err(missing(&p, hint));
        }
        store.assign_from(&ParamStore::load(&p)?)?;
        Ok(store)
    }

    fn slow(&self, data: &Dataset, trained: bool) -> Result<(SlowModel, ParamStore)> {
        let (m, store) =
            SlowModel::init(&self.cfg.slow_config(data.vocab.len()), self.cfg.run.seed)?;
        if !trained {
            return Ok((m, store));
        }
        let store = self.load_store(store, SLOW_CKPT, "train-slow")?;
        Ok((m, store))
    }

    fn student(
        &self,
        data: &Dataset,
        which: Student,
        trained: bool,
    ) -> Result<(DualEncoder, ParamStore)> {
        let (m, store) = init_fast(&self.cfg.fast_config(data.vocab.len()), self.cfg.run.seed)?;
        if !trained {
            return Ok((m, store));
        }
        let hint = match which {
            Student::Fast => "train-fast",
            Student::Distilled => "distill",
        };
        let store = self.load_store(store, which.file(), hint)?;
        Ok((m, store))
    }

    fn gen_data(&self) -> Result<()> {
        let data = generate_dataset(&self.cfg.data, self.cfg.run.seed)?;
        data.save(&self.path(DATASET_FILE))?;
        println!(
            "{} scenes, {} captions, vocabulary {}",
            data.scenes.len(),
            data.captions.len(),
            data.vocab.len()
        );
        println!("wrote {}", self.path(DATASET_FILE).display());
        Ok(())
    }

    fn train_slow(&self) -> Result<()> {
        let data = self.dataset()?;
        let cfg = self.cfg.slow_config(data.vocab.len());
        let (_, store, log) = train_slow(&data, &cfg, &self.cfg.slow.train, self.cfg.run.seed)?;
        if !log.decreases_over("loss", 500) {
            log::warn!("slow training loss did not decrease over every 500-step window");
        }
        store.save(&self.path(SLOW_CKPT))?;
        println!("wrote {}", self.path(SLOW_CKPT).display());
        self.write("slow_log.csv", &self.log_csv(&log))
    }

    fn train_fast(&self) -> Result<()> {
        let data = self.dataset()?;
        let cfg = self.cfg.fast_config(data.vocab.len());
        let (_, store, log) = train_fast(&data, &cfg, &self.cfg.fast.train, self.cfg.run.seed)?;
        store.save(&self.path(FAST_CKPT))?;
        println!("wrote {}", self.path(FAST_CKPT).display());
        self.write("fast_log.csv", &self.log_csv(&log))
    }

    fn distill(&self) -> Result<()> {
        let data = self.dataset()?;
        let (sm, sst) = self.slow(&data, true)?;
        let mut teacher = TeacherCache::new(&sm, &sst, &data)?;
        let cfg = self.cfg.fast_config(data.vocab.len());
        let d = self.cfg.distill_config();
        let (_, store, log) = train_distilled(
            &data,
            &cfg,
            &self.cfg.fast.train,
            &d,
            &mut teacher,
            self.cfg.run.seed,
        )?;
        log::info!(
            "teacher cache: {} hits, {} misses",
            teacher.hits,
            teacher.misses
        );
        store.save(&self.path(DISTILLED_CKPT))?;
        println!("wrote {}", self.path(DISTILLED_CKPT).display());
        self.write("distill_log.csv", &self.log_csv(&log))
    }

    fn build_index(&self, which: Student) -> Result<()> {
        let data = self.dataset()?;
        let (m, store) = self.student(&data, which, true)?;
        let emb = embed_corpus(&m, &store, &data, self.cfg.eval.split)?;
        emb.save(&self.path(EMBEDDINGS_FILE))?;
        let index = match self.cfg.index.kind {
            IndexKind::Exact => Index::Exact(ExactIndex::build(emb)?),
            IndexKind::Pq => Index::Pq(PqIndex::build(&emb, &self.cfg.pq_config())?),
        };
        index.save(&self.path(INDEX_FILE))?;
        println!(
            "indexed {} items of split {} (dimension {})",
            index.len(),
            self.cfg.eval.split,
            index.dim()
        );
        println!("wrote {}", self.path(INDEX_FILE).display());
        Ok(())
    }

    fn index(&self) -> Result<Index> {
        let p = self.path(INDEX_FILE);
        if !p.exists() {
            return Err(missing(&p, "build-index"));
        }
        Index::load(&p)
    }

    fn corpus<'m>(
        &self,
        sm: &'m SlowModel,
        sst: &'m ParamStore,
        data: &'m Dataset,
        ids: &[u64],
    ) -> Result<SlowCorpus<'m>> {
        if self.cfg.pipeline.precompute {
            SlowCorpus::precompute(sm, sst, data, ids)
        } else {
            Ok(SlowCorpus::on_demand(sm, sst, data))
        }
    }

    fn queries(&self, data: &Dataset) -> Vec<(u64, Vec<u32>)> {
        let mut q = split_queries(data, self.cfg.eval.split);
        if self.cfg.eval.queries > 0 {
            q.truncate(self.cfg.eval.queries);
        }
        q
    }

    fn query(&self, text: &str, top: usize, which: Student) -> Result<()> {
        let data = self.dataset()?;
        let tokens = tokenize(text, &data.vocab)?;
        let (sm, sst) = self.slow(&data, true)?;
        let (fm, fst) = self.student(&data, which, true)?;
        let index = self.index()?;
        let corpus = self.corpus(&sm, &sst, &data, index.ids())?;
        let p = RetrievalPipeline::new(&fm, &fst, &index, &corpus, self.cfg.pipeline.clone())?;
        let (list, stats) = p.query(&tokens)?;
        let mut csv = String::from("rank,id,stage,fast,slow,combined\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (r, c) in list.items.iter().enumerate() {
            let line = format!(
                "{},{},{:?},{},{},{}",
                r + 1,
                c.id,
                c.stage,
                c.fast,
                opt(c.slow),
                opt(c.combined)
            );
            if r < top {
                println!("{line}");
            }
            csv.push_str(&line);
            csv.push('\n');
        }
        println!("slow invocations: {}", stats.slow_invocations);
        self.write("query.csv", &csv)
    }

    fn eval(&self, which: Student, untrained: bool) -> Result<()> {
        let data = self.dataset()?;
        let (sm, sst) = self.slow(&data, !untrained)?;
        let (fm, fst) = self.student(&data, which, !untrained)?;
        let index = if untrained {
            Index::Exact(ExactIndex::build(embed_corpus(
                &fm,
                &fst,
                &data,
                self.cfg.eval.split,
            )?)?)
        } else {
            self.index()?
        };
        let corpus = self.corpus(&sm, &sst, &data, index.ids())?;
        let p = RetrievalPipeline::new(&fm, &fst, &index, &corpus, self.cfg.pipeline.clone())?;
        let queries = self.queries(&data);
        let (mut fast, mut two, mut calls) = (Vec::new(), Vec::new(), 0);
        for (gold, tokens) in &queries {
            fast.push((
                p.fast_ranking(tokens)?.iter().map(|h| h.id).collect(),
                *gold,
            ));
            let (list, st) = p.query(tokens)?;
            calls += st.slow_invocations;
            two.push((list.ids(), *gold));
        }
        let n = index.len();
        let k5 = 5.min(n);
        let mut csv = String::from("model,K,beta,R1,R5,mean_slow_calls\n");
        let fr = (mean_recall(&fast, 1)?, mean_recall(&fast, k5)?);
        let tr = (mean_recall(&two, 1)?, mean_recall(&two, k5)?);
        csv.push_str(&format!("fast_only,0,0,{},{},0\n", fr.0, fr.1));
        csv.push_str(&format!(
            "fast_slow,{},{},{},{},{}\n",
            p.cfg.k.min(n),
            p.cfg.beta,
            tr.0,
            tr.1,
            calls as f64 / queries.len() as f64
        ));
        println!("corpus N = {n}, chance R@1 = {:.4}", 1.0 / n as f64);
        println!("fast only:   R@1 {:.4}  R@5 {:.4}", fr.0, fr.1);
        println!("fast & slow: R@1 {:.4}  R@5 {:.4}", tr.0, tr.1);
        self.write("eval.csv", &csv)
    }

    fn rerank_curve(&self, which: Student) -> Result<()> {
        let data = self.dataset()?;
        let (sm, sst) = self.slow(&data, true)?;
        let (fm, fst) = self.student(&data, which, true)?;
        let index = self.index()?;
        let corpus = self.corpus(&sm, &sst, &data, index.ids())?;
        let p = RetrievalPipeline::new(&fm, &fst, &index, &corpus, self.cfg.pipeline.clone())?;
        let n = index.len();
        let ks: Vec<usize> = self.cfg.eval.curve_ks.iter().map(|&k| k.min(n)).collect();
        let rows = rerank_curve(&p, &self.queries(&data), &ks, &self.cfg.eval.curve_betas)?;
        match smallest_sufficient_k(&rows) {
            Some(k) => println!("smallest K reaching slow-only R@1: {k}"),
            None => println!("no K in the grid reaches slow-only R@1"),
        }
        self.write(
            "rerank_curve.csv",
            &curve_csv(&rows, self.cfg.run.record_timings),
        )
    }

    fn sweep(&self) -> Result<()> {
        let data = self.dataset()?;
        let (sm, sst) = self.slow(&data, true)?;
        let mut teacher = TeacherCache::new(&sm, &sst, &data)?;
        let rows = sweep_distill(
            &data,
            &self.cfg.fast_config(data.vocab.len()),
            &self.cfg.fast.train,
            &self.cfg.distill_config(),
            &mut teacher,
            &self.cfg.distill.sweep_taus,
            &self.cfg.distill.sweep_alpha_over_tau2,
            self.cfg.run.seed,
        )?;
        self.write("sweep_distill.csv", &sweep_csv(&rows))
    }

    fn bench(&self, which: Student, synthetic: Option<usize>) -> Result<()> {
        let data = self.dataset()?;
        let (sm, sst) = self.slow(&data, true)?;
        let (fm, fst) = self.student(&data, which, true)?;
        let ev = &self.cfg.eval;
        let queries: Vec<Vec<u32>> = self
            .queries(&data)
            .into_iter()
            .map(|q| q.1)
            .take(ev.bench_queries.max(1))
            .collect();
        let (index, corpus) = match synthetic {
            None => {
                let index = self.index()?;
                let corpus = self.corpus(&sm, &sst, &data, index.ids())?;
                (index, corpus)
            }
            Some(n) => {
                let pool_ids = data.split_ids(ev.split);
                let pool = pool_ids
                    .iter()
                    .map(|&id| sm.prepare(&sst, sm.encode(&sst, &data.render(id))?))
                    .collect::<Result<Vec<_>>>()?;
                let (emb, items) = synthetic_corpus(n, fm.cfg.embed_dim, &pool, self.cfg.run.seed)?;
                (
                    Index::Exact(ExactIndex::build(emb)?),
                    SlowCorpus::from_items(&sm, &sst, items),
                )
            }
        };
        let p = RetrievalPipeline::new(&fm, &fst, &index, &corpus, self.cfg.pipeline.clone())?;
        let ks: Vec<usize> = ev.bench_ks.iter().map(|&k| k.min(index.len())).collect();
        let report = benchmark(
            &p,
            &queries,
            &ks,
            ev.bench_warmup,
            ev.bench_exhaustive_queries,
        )?;
        let table = report.table();
        print!("{table}");
        let mut csv = String::from("path,K,median_ms,p95_ms\n");
        csv.push_str(&format!(
            "fast_only,0,{},{}\n",
            report.fast_only.median_ms, report.fast_only.p95_ms
        ));
        csv.push_str(&format!(
            "slow_exhaustive,{},{},{}\n",
            report.n, report.slow_exhaustive.median_ms, report.slow_exhaustive.p95_ms
        ));
        for fs in &report.fast_slow {
            csv.push_str(&format!(
                "fast_slow,{},{},{}\n",
                fs.k, fs.total.median_ms, fs.total.p95_ms
            ));
            csv.push_str(&format!(
                "slow_stage,{},{},{}\n",
                fs.k, fs.slow_stage.median_ms, fs.slow_stage.p95_ms
            ));
        }
        self.write("bench.txt", &table)?;
        self.write("bench.csv", &csv)
    }

    fn dump_attention(&self, scene: u64, text: Option<&str>, dir: Dir) -> Result<()> {
        let data = self.dataset()?;
        if scene as usize >= data.scenes.len() {
            return Err(Error::Data(format!("scene {scene} does not exist")));
        }
        let tokens = match text {
            Some(t) => tokenize(t, &data.vocab)?,
            None => data.gold_caption(scene).tokens.clone(),
        };
        let (sm, sst) = self.slow(&data, true)?;
        let features = sm.encode(&sst, &data.render(scene))?;
        let direction = match dir {
            Dir::Fwd => Direction::Forward,
            Dir::Bwd => Direction::Backward,
        };
        let rec = sm.attention_maps(&sst, &features, &tokens, direction)?;
        let rows = |t: &crate::tensor::Tensor| {
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
        };
        let layers: Vec<_> = rec
            .layers
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|h| json!({"scores": rows(&h.scores), "weights": rows(&h.weights)}))
                    .collect::<Vec<_>>()
            })
            .collect();
        let out = json!({
            "scene": scene,
            "tokens": tokens,
            "direction": format!("{direction:?}"),
            "resolution": features.resolution,
            "layers": layers,
            "flagged": rec.flagged,
        });
        self.write(
            "attention.json",
            &serde_json::to_string(&out).map_err(|e| Error::Data(e.to_string()))?,
        )
    }
}
