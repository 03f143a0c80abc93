//! `key = value` pipeline configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::MaskVariant;
use crate::ivf::Metric;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub collection: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub doc_embeddings: Option<PathBuf>,
    /// Query vectors, row-aligned with `query_ids`.
    pub query_embeddings: Option<PathBuf>,
    /// TSV whose first column lists the query id of each embedding row.
    pub query_ids: Option<PathBuf>,
    pub lexical_index: Option<PathBuf>,
    pub dense_index: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Embedding dimension; 0 means "take it from the files".
    pub dim: usize,
    /// First-stage depth K.
    pub depth: usize,
    pub rerank_cutoff: usize,
    /// `None` probes every list.
    pub nprobe: Option<usize>,
    /// `None` uses `round(sqrt(N))`.
    pub nlist: Option<usize>,
    pub kmeans_iters: usize,
    pub metric: Metric,
    pub mask: MaskVariant,
    pub k_final: usize,
    pub seed: u64,
    pub stem: bool,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            collection: None,
            queries: None,
            qrels: None,
            doc_embeddings: None,
            query_embeddings: None,
            query_ids: None,
            lexical_index: None,
            dense_index: None,
            model: None,
            dim: 0,
            depth: 1000,
            rerank_cutoff: 1000,
            nprobe: None,
            nlist: None,
            kmeans_iters: 25,
            metric: Metric::Dot,
            mask: MaskVariant::Full,
            k_final: 1000,
            seed: 42,
            stem: false,
            threads: 1,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{v}`")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl PipelineConfig {
    /// Set one key. Relative paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        match key.trim() {
            "collection" => self.collection = opt_path(v),
            "queries" => self.queries = opt_path(v),
            "qrels" => self.qrels = opt_path(v),
            "doc_embeddings" => self.doc_embeddings = opt_path(v),
            "query_embeddings" => self.query_embeddings = opt_path(v),
            "query_ids" => self.query_ids = opt_path(v),
            "lexical_index" => self.lexical_index = opt_path(v),
            "dense_index" => self.dense_index = opt_path(v),
            "model" => self.model = opt_path(v),
            "dim" => self.dim = parse_num(key, v)?,
            "depth" | "K" => self.depth = parse_num(key, v)?,
            "rerank_cutoff" => self.rerank_cutoff = parse_num(key, v)?,
            "nprobe" => self.nprobe = if v == "all" { None } else { Some(parse_num(key, v)?) },
            "nlist" => self.nlist = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "kmeans_iters" => self.kmeans_iters = parse_num(key, v)?,
            "metric" => self.metric = v.parse()?,
            "mask" => self.mask = v.parse()?,
            "k_final" => self.k_final = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "stem" => self.stem = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::invalid(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::invalid(format!("line {}: expected key = value", i + 1)))?;
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Read a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            c.rebase(base);
        }
        Ok(c)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.collection,
            &mut self.queries,
            &mut self.qrels,
            &mut self.doc_embeddings,
            &mut self.query_embeddings,
            &mut self.query_ids,
            &mut self.lexical_index,
            &mut self.dense_index,
            &mut self.model,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.rerank_cutoff > self.depth {
            return Err(Error::invalid(format!("rerank_cutoff {} exceeds depth {}", self.rerank_cutoff, self.depth)));
        }
        if self.k_final > self.depth || self.k_final == 0 {
            return Err(Error::invalid(format!("k_final must be in 1..={}", self.depth)));
        }
        if self.nprobe == Some(0) {
            return Err(Error::invalid("nprobe must be at least 1"));
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field.as_deref().ok_or_else(|| Error::invalid(format!("config is missing `{name}`")))
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paths = [
            ("collection", &self.collection),
            ("queries", &self.queries),
            ("qrels", &self.qrels),
            ("doc_embeddings", &self.doc_embeddings),
            ("query_embeddings", &self.query_embeddings),
            ("query_ids", &self.query_ids),
            ("lexical_index", &self.lexical_index),
            ("dense_index", &self.dense_index),
            ("model", &self.model),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                writeln!(f, "{k} = {}", p.display())?;
            }
        }
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "depth = {}", self.depth)?;
        writeln!(f, "rerank_cutoff = {}", self.rerank_cutoff)?;
        match self.nprobe {
            Some(n) => writeln!(f, "nprobe = {n}")?,
            None => writeln!(f, "nprobe = all")?,
        }
        match self.nlist {
            Some(n) => writeln!(f, "nlist = {n}")?,
            None => writeln!(f, "nlist = auto")?,
        }
        writeln!(f, "kmeans_iters = {}", self.kmeans_iters)?;
        writeln!(f, "metric = {}", self.metric)?;
        writeln!(f, "mask = {}", self.mask)?;
        writeln!(f, "k_final = {}", self.k_final)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "stem = {}", self.stem)?;
        writeln!(f, "threads = {}", self.threads)
    }
}
