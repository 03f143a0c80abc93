//! Collections, queries, relevance judgments and the positional inverted
//! index that backs lexical feature extraction.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};

use crate::binio::{self, expect_magic};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 5] = b"CRIX1";

/// Lowercasing tokenizer that splits on runs of non-alphanumeric characters.
///
/// Stemming is off by default; when enabled it applies the Snowball English
/// (Porter2) stemmer to every token.
#[derive(Default)]
pub struct Tokenizer {
    stemmer: Option<Stemmer>,
}

impl Tokenizer {
    pub fn new(stem: bool) -> Self {
        Self { stemmer: stem.then(|| Stemmer::create(Algorithm::English)) }
    }

    pub fn stems(&self) -> bool {
        self.stemmer.is_some()
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        // Lowercase before splitting: some characters lowercase to sequences
        // containing non-alphanumeric marks.
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        for tok in lower.split(|c: char| !c.is_alphanumeric()) {
            if tok.is_empty() {
                continue;
            }
            match &self.stemmer {
                Some(s) => out.push(s.stem(tok).into_owned()),
                None => out.push(tok.to_string()),
            }
        }
        out
    }
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer").field("stem", &self.stems()).finish()
    }
}

/// Default tokenization: lowercase, split on non-alphanumerics, no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// An ordered document collection. Internal ids are positions in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, u32>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.id.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, internal_id: u32) -> &Document {
        &self.docs[internal_id as usize]
    }

    pub fn internal_id(&self, doc_id: &str) -> Option<u32> {
        self.by_id.get(doc_id).copied()
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pairs(path.as_ref(), self.docs.iter().map(|d| (&d.id, &d.text)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(queries.len());
        for q in &queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Query> {
        self.queries.iter()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pairs(path.as_ref(), self.queries.iter().map(|q| (&q.id, &q.text)))
    }
}

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.judgments.entry(query_id.to_string()).or_default().insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments.get(query_id).and_then(|m| m.get(doc_id)).copied().unwrap_or(0)
    }

    /// All judgments for a query, including zero grades.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// Doc ids judged with grade > 0, in doc-id order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.for_query(query_id)
            .map(|m| m.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_trec(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(w, "{q} 0 {d} {g}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn write_pairs<'a>(path: &Path, rows: impl Iterator<Item = (&'a String, &'a String)>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (id, text) in rows {
        writeln!(w, "{id}\t{text}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let Some((id, text)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `id<TAB>text`"));
        };
        if id.is_empty() {
            return Err(Error::parse(path, i + 1, "empty id"));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Corpus> {
    let rows = read_pairs(path.as_ref())?;
    Corpus::new(rows.into_iter().map(|(id, text)| Document { id, text }).collect())
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let rows = read_pairs(path.as_ref())?;
    QuerySet::new(rows.into_iter().map(|(id, text)| Query { id, text }).collect())
}

/// Parse TREC qrels (`query_id iter doc_id grade`, whitespace separated).
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(path, i + 1, "expected `qid iter docid grade`"));
        }
        let grade: i64 =
            fields[3].parse().map_err(|_| Error::parse(path, i + 1, format!("non-integer grade `{}`", fields[3])))?;
        if grade < 0 {
            return Err(Error::parse(path, i + 1, format!("negative grade {grade}")));
        }
        qrels.insert(fields[0], fields[2], grade as u32);
    }
    Ok(qrels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
    pub positions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TermEntry {
    pub cf: u64,
    pub postings: Vec<Posting>,
}

impl TermEntry {
    pub fn df(&self) -> usize {
        self.postings.len()
    }

    pub fn posting(&self, doc: u32) -> Option<&Posting> {
        self.postings.binary_search_by_key(&doc, |p| p.doc).ok().map(|i| &self.postings[i])
    }
}

/// Positional inverted index with collection statistics.
///
/// Besides the postings it caches two per-document values needed by the
/// lexical features: the number of distinct terms and the Euclidean norm of
/// the document's tf-idf vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    terms: BTreeMap<String, TermEntry>,
    doc_len: Vec<u32>,
    unique_terms: Vec<u32>,
    tfidf_norm: Vec<f64>,
    total_tokens: u64,
    stemmed: bool,
}

/// Robertson/Sparck-Jones idf with the +1 inside the log that keeps it
/// non-negative.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    let n = n_docs as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, tokenizer: &Tokenizer) -> Self {
        let n = corpus.len();
        let mut terms: BTreeMap<String, TermEntry> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(n);
        let mut unique_terms = Vec::with_capacity(n);
        let mut total_tokens = 0u64;

        for (id, doc) in corpus.docs().iter().enumerate() {
            let tokens = tokenizer.tokenize(&doc.text);
            doc_len.push(tokens.len() as u32);
            total_tokens += tokens.len() as u64;
            let mut local: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
            for (pos, t) in tokens.iter().enumerate() {
                local.entry(t.as_str()).or_default().push(pos as u32);
            }
            unique_terms.push(local.len() as u32);
            for (t, positions) in local {
                let entry = terms.entry(t.to_string()).or_default();
                entry.cf += positions.len() as u64;
                entry.postings.push(Posting { doc: id as u32, tf: positions.len() as u32, positions });
            }
        }

        let mut sq = vec![0.0f64; n];
        for entry in terms.values() {
            let w = idf(n, entry.df());
            for p in &entry.postings {
                let x = p.tf as f64 * w;
                sq[p.doc as usize] += x * x;
            }
        }
        let tfidf_norm = sq.into_iter().map(f64::sqrt).collect();

        Self { terms, doc_len, unique_terms, tfidf_norm, total_tokens, stemmed: tokenizer.stems() }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.total_tokens as f64 / self.num_docs() as f64
    }

    pub fn doc_len(&self, doc: u32) -> u32 {
        self.doc_len[doc as usize]
    }

    pub fn doc_lens(&self) -> &[u32] {
        &self.doc_len
    }

    pub fn unique_terms(&self, doc: u32) -> u32 {
        self.unique_terms[doc as usize]
    }

    pub fn tfidf_norm(&self, doc: u32) -> f64 {
        self.tfidf_norm[doc as usize]
    }

    pub fn term(&self, term: &str) -> Option<&TermEntry> {
        self.terms.get(term)
    }

    pub fn df(&self, term: &str) -> usize {
        self.term(term).map_or(0, TermEntry::df)
    }

    pub fn cf(&self, term: &str) -> u64 {
        self.term(term).map_or(0, |e| e.cf)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.num_docs(), self.df(term))
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &TermEntry)> {
        self.terms.iter().map(|(t, e)| (t.as_str(), e))
    }

    /// Whether the index was built with a stemming tokenizer; queries must
    /// be analyzed the same way.
    pub fn stemmed(&self) -> bool {
        self.stemmed
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.stemmed)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        binio::write_u32(w, self.stemmed as u32)?;
        binio::write_u32(w, self.num_docs() as u32)?;
        for i in 0..self.num_docs() {
            binio::write_u32(w, self.doc_len[i])?;
            binio::write_u32(w, self.unique_terms[i])?;
            binio::write_f64(w, self.tfidf_norm[i])?;
        }
        binio::write_u64(w, self.total_tokens)?;
        binio::write_u32(w, self.terms.len() as u32)?;
        for (t, e) in &self.terms {
            binio::write_str(w, t)?;
            binio::write_u64(w, e.cf)?;
            binio::write_u32(w, e.postings.len() as u32)?;
            for p in &e.postings {
                binio::write_u32(w, p.doc)?;
                binio::write_u32(w, p.tf)?;
                for &pos in &p.positions {
                    binio::write_u32(w, pos)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        use binio::{read_f64, read_str, read_u32, read_u64};
        expect_magic(r, INDEX_MAGIC)?;
        let stemmed = read_u32(r)? != 0;
        let n = read_u32(r)? as usize;
        let mut doc_len = Vec::with_capacity(n);
        let mut unique_terms = Vec::with_capacity(n);
        let mut tfidf_norm = Vec::with_capacity(n);
        for _ in 0..n {
            doc_len.push(read_u32(r)?);
            unique_terms.push(read_u32(r)?);
            tfidf_norm.push(read_f64(r)?);
        }
        let total_tokens = read_u64(r)?;
        let n_terms = read_u32(r)? as usize;
        let mut terms = BTreeMap::new();
        for _ in 0..n_terms {
            let t = read_str(r)?;
            let cf = read_u64(r)?;
            let np = read_u32(r)? as usize;
            let mut postings = Vec::with_capacity(np);
            for _ in 0..np {
                let doc = read_u32(r)?;
                let tf = read_u32(r)?;
                let positions = (0..tf).map(|_| read_u32(r)).collect::<Result<_, _>>()?;
                postings.push(Posting { doc, tf, positions });
            }
            terms.insert(t, TermEntry { cf, postings });
        }
        Ok(Self { terms, doc_len, unique_terms, tfidf_norm, total_tokens, stemmed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

pub fn build_inverted_index(corpus: &Corpus) -> InvertedIndex {
    InvertedIndex::build(corpus, &Tokenizer::default())
}
