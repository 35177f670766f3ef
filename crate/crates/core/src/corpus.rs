//! Sparse document-term counts with period and author metadata.
//!
//! Input is three UTF-8 files: `triplets.csv` (`doc_id,term_id,count`),
//! `docs.csv` (`doc_id,time_period[,author_id]`) and `vocab.txt` with one
//! term per line. Counts are stored doc-major in compressed sparse rows.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, TpfError};

pub const TRIPLETS_FILE: &str = "triplets.csv";
pub const DOCS_FILE: &str = "docs.csv";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    num_docs: usize,
    vocab_size: usize,
    num_periods: usize,
    row_ptr: Vec<usize>,
    terms: Vec<u32>,
    counts: Vec<u32>,
    period: Vec<usize>,
    author: Option<Vec<usize>>,
    num_authors: usize,
    vocabulary: Vec<String>,
    by_period: Vec<Vec<usize>>,
    dropped_docs: usize,
}

/// One row of the triplet file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub doc: usize,
    pub term: usize,
    pub count: u32,
}

/// Documents processed together in one stochastic step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub doc_ids: Vec<usize>,
    /// `D / |B|`, the factor turning batch sums into full-corpus estimates.
    pub scale: f64,
}

impl Corpus {
    /// Build and validate a corpus from in-memory parts.
    ///
    /// Documents without any positive count are removed and the remaining
    /// ones renumbered in their original order.
    pub fn from_parts(
        triplets: &[Triplet],
        periods: Vec<usize>,
        authors: Option<Vec<usize>>,
        vocabulary: Vec<String>,
    ) -> Result<Corpus> {
        let d_in = periods.len();
        let vocab_size = vocabulary.len();
        if d_in == 0 {
            return Err(TpfError::Validation("corpus has no documents".into()));
        }
        if vocab_size == 0 {
            return Err(TpfError::Validation("vocabulary is empty".into()));
        }
        if let Some(a) = &authors {
            if a.len() != d_in {
                return Err(TpfError::Validation(format!(
                    "{} author ids for {} documents",
                    a.len(),
                    d_in
                )));
            }
        }

        let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); d_in];
        let mut seen = HashSet::with_capacity(triplets.len());
        for tr in triplets {
            if tr.doc >= d_in {
                return Err(TpfError::Validation(format!(
                    "doc_id {} out of range (D = {})",
                    tr.doc, d_in
                )));
            }
            if tr.term >= vocab_size {
                return Err(TpfError::Validation(format!(
                    "term_id {} out of range (V = {})",
                    tr.term, vocab_size
                )));
            }
            if !seen.insert((tr.doc, tr.term)) {
                return Err(TpfError::Validation(format!(
                    "duplicate entry for doc_id {}, term_id {}",
                    tr.doc, tr.term
                )));
            }
            if tr.count > 0 {
                rows[tr.doc].push((tr.term as u32, tr.count));
            }
        }

        let keep: Vec<usize> = (0..d_in).filter(|&d| !rows[d].is_empty()).collect();
        let dropped_docs = d_in - keep.len();
        if dropped_docs > 0 {
            log::warn!("dropped {dropped_docs} empty documents");
        }
        if keep.is_empty() {
            return Err(TpfError::Validation("every document is empty".into()));
        }

        let num_periods = periods.iter().max().map_or(0, |&t| t + 1);
        let mut row_ptr = Vec::with_capacity(keep.len() + 1);
        row_ptr.push(0);
        let (mut terms, mut counts) = (Vec::new(), Vec::new());
        let mut period = Vec::with_capacity(keep.len());
        let mut author = authors.as_ref().map(|_| Vec::with_capacity(keep.len()));
        let mut by_period = vec![Vec::new(); num_periods];
        for (new_id, &d) in keep.iter().enumerate() {
            let row = &mut rows[d];
            row.sort_unstable_by_key(|&(v, _)| v);
            for &(v, c) in row.iter() {
                terms.push(v);
                counts.push(c);
            }
            row_ptr.push(terms.len());
            period.push(periods[d]);
            by_period[periods[d]].push(new_id);
            if let (Some(out), Some(src)) = (author.as_mut(), authors.as_ref()) {
                out.push(src[d]);
            }
        }
        if let Some(t) = by_period.iter().position(|docs| docs.is_empty()) {
            return Err(TpfError::Validation(format!("time period {t} has no documents")));
        }
        let num_authors = author.as_ref().and_then(|a| a.iter().max()).map_or(0, |&a| a + 1);

        Ok(Corpus {
            num_docs: keep.len(),
            vocab_size,
            num_periods,
            row_ptr,
            terms,
            counts,
            period,
            author,
            num_authors,
            vocabulary,
            by_period,
            dropped_docs,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_periods(&self) -> usize {
        self.num_periods
    }

    pub fn num_authors(&self) -> usize {
        self.num_authors
    }

    pub fn nnz(&self) -> usize {
        self.terms.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn dropped_docs(&self) -> usize {
        self.dropped_docs
    }

    pub fn period_of(&self, doc: usize) -> usize {
        self.period[doc]
    }

    pub fn periods(&self) -> &[usize] {
        &self.period
    }

    pub fn authors(&self) -> Option<&[usize]> {
        self.author.as_deref()
    }

    pub fn docs_in_period(&self, t: usize) -> &[usize] {
        &self.by_period[t]
    }

    /// Term ids and counts of one document, sorted by term id.
    pub fn doc(&self, d: usize) -> (&[u32], &[u32]) {
        let (lo, hi) = (self.row_ptr[d], self.row_ptr[d + 1]);
        (&self.terms[lo..hi], &self.counts[lo..hi])
    }

    pub fn doc_total(&self, d: usize) -> u64 {
        self.doc(d).1.iter().map(|&c| c as u64).sum()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(self.nnz());
        for d in 0..self.num_docs {
            let (ts, cs) = self.doc(d);
            out.extend(ts.iter().zip(cs).map(|(&v, &c)| Triplet {
                doc: d,
                term: v as usize,
                count: c,
            }));
        }
        out
    }

    /// Same counts with every document mapped to a single period.
    pub fn collapse_periods(&self) -> Corpus {
        let mut c = self.clone();
        c.num_periods = 1;
        c.period = vec![0; c.num_docs];
        c.by_period = vec![(0..c.num_docs).collect()];
        c
    }

    /// Sum the documents of each (author, period) pair into one document.
    /// The result is ordered by period, then author.
    pub fn aggregate_by_author(&self) -> Result<Corpus> {
        let authors = self
            .author
            .as_ref()
            .ok_or_else(|| TpfError::Validation("corpus has no author ids".into()))?;
        let a_n = self.num_authors;
        let mut cells: Vec<Vec<u64>> = Vec::new();
        let mut slot = vec![usize::MAX; a_n * self.num_periods];
        let mut periods = Vec::new();
        let mut out_authors = Vec::new();
        for t in 0..self.num_periods {
            for a in 0..a_n {
                if self.by_period[t].iter().any(|&d| authors[d] == a) {
                    slot[t * a_n + a] = cells.len();
                    cells.push(vec![0; self.vocab_size]);
                    periods.push(t);
                    out_authors.push(a);
                }
            }
        }
        for d in 0..self.num_docs {
            let row = &mut cells[slot[self.period[d] * a_n + authors[d]]];
            let (ts, cs) = self.doc(d);
            for (&v, &c) in ts.iter().zip(cs) {
                row[v as usize] += c as u64;
            }
        }
        let mut triplets = Vec::new();
        for (doc, row) in cells.iter().enumerate() {
            for (term, &c) in row.iter().enumerate() {
                if c > 0 {
                    let count = u32::try_from(c).map_err(|_| {
                        TpfError::Validation(format!("aggregated count {c} overflows"))
                    })?;
                    triplets.push(Triplet { doc, term, count });
                }
            }
        }
        Corpus::from_parts(&triplets, periods, Some(out_authors), self.vocabulary.clone())
    }

    /// True when no (author, period) pair holds more than one document.
    pub fn one_doc_per_author_period(&self) -> bool {
        let Some(authors) = &self.author else {
            return false;
        };
        let mut seen = HashSet::new();
        (0..self.num_docs).all(|d| seen.insert((authors[d], self.period[d])))
    }

    /// Write the three input files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut s = String::from("doc_id,term_id,count\n");
        for tr in self.triplets() {
            let _ = writeln!(s, "{},{},{}", tr.doc, tr.term, tr.count);
        }
        fs::write(dir.join(TRIPLETS_FILE), s)?;

        let mut s = String::new();
        match &self.author {
            Some(a) => {
                s.push_str("doc_id,time_period,author_id\n");
                for d in 0..self.num_docs {
                    let _ = writeln!(s, "{},{},{}", d, self.period[d], a[d]);
                }
            }
            None => {
                s.push_str("doc_id,time_period\n");
                for d in 0..self.num_docs {
                    let _ = writeln!(s, "{},{}", d, self.period[d]);
                }
            }
        }
        fs::write(dir.join(DOCS_FILE), s)?;

        let mut s = String::new();
        for w in &self.vocabulary {
            s.push_str(w);
            s.push('\n');
        }
        fs::write(dir.join(VOCAB_FILE), s)?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        TpfError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

struct Rows<'a> {
    path: PathBuf,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Rows<'a> {
    fn new(path: &Path, text: &'a str, headers: &[&[&str]]) -> Result<(Self, usize)> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let which = headers.iter().position(|h| *h == cols.as_slice()).ok_or_else(|| {
            TpfError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("unexpected header {header:?}"),
            }
        })?;
        Ok((
            Rows {
                path: path.to_path_buf(),
                lines,
            },
            headers[which].len(),
        ))
    }

    fn next_row(&mut self, width: usize) -> Option<Result<(usize, Vec<u64>)>> {
        for (i, line) in self.lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse = || -> std::result::Result<Vec<u64>, String> {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields.len() != width {
                    return Err(format!("expected {width} fields, found {}", fields.len()));
                }
                fields
                    .iter()
                    .map(|f| f.parse::<u64>().map_err(|e| format!("bad field {f:?}: {e}")))
                    .collect()
            };
            return Some(parse().map(|v| (i + 1, v)).map_err(|msg| TpfError::Parse {
                path: self.path.clone(),
                line: i + 1,
                msg,
            }));
        }
        None
    }
}

/// Load a corpus from the three input files.
pub fn load_corpus(triplet_path: &Path, docs_path: &Path, vocab_path: &Path) -> Result<Corpus> {
    let vocab_text = read(vocab_path)?;
    let vocabulary: Vec<String> = vocab_text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let docs_text = read(docs_path)?;
    let (mut rows, width) = Rows::new(
        docs_path,
        &docs_text,
        &[&["doc_id", "time_period"], &["doc_id", "time_period", "author_id"]],
    )?;
    let mut entries = Vec::new();
    while let Some(row) = rows.next_row(width) {
        entries.push(row?);
    }
    let d = entries.len();
    let mut periods = vec![usize::MAX; d];
    let mut authors = (width == 3).then(|| vec![0usize; d]);
    for (line, vals) in &entries {
        let id = vals[0] as usize;
        if id >= d {
            return Err(TpfError::Validation(format!(
                "{}:{line}: doc_id {id} out of range (D = {d})",
                docs_path.display()
            )));
        }
        if periods[id] != usize::MAX {
            return Err(TpfError::Validation(format!(
                "{}:{line}: doc_id {id} listed twice",
                docs_path.display()
            )));
        }
        periods[id] = vals[1] as usize;
        if let Some(a) = authors.as_mut() {
            a[id] = vals[2] as usize;
        }
    }

    let trip_text = read(triplet_path)?;
    let (mut rows, _) = Rows::new(triplet_path, &trip_text, &[&["doc_id", "term_id", "count"]])?;
    let mut triplets = Vec::new();
    while let Some(row) = rows.next_row(3) {
        let (line, v) = row?;
        let count = u32::try_from(v[2]).map_err(|_| TpfError::Parse {
            path: triplet_path.to_path_buf(),
            line,
            msg: format!("count {} too large", v[2]),
        })?;
        triplets.push(Triplet {
            doc: v[0] as usize,
            term: v[1] as usize,
            count,
        });
    }
    Corpus::from_parts(&triplets, periods, authors, vocabulary)
}

/// Load `triplets.csv`, `docs.csv` and `vocab.txt` from one directory.
pub fn load_dir(dir: &Path) -> Result<Corpus> {
    load_corpus(&dir.join(TRIPLETS_FILE), &dir.join(DOCS_FILE), &dir.join(VOCAB_FILE))
}

/// Shuffle documents and cut them into consecutive batches.
pub fn split_batches<R: Rng + ?Sized>(corpus: &Corpus, batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(TpfError::arg("batch size must be at least 1"));
    }
    let mut ids: Vec<usize> = (0..corpus.num_docs()).collect();
    ids.shuffle(rng);
    let d = corpus.num_docs() as f64;
    Ok(ids
        .chunks(batch_size)
        .map(|c| Batch {
            doc_ids: c.to_vec(),
            scale: d / c.len() as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(doc: usize, term: usize, count: u32) -> Triplet {
        Triplet { doc, term, count }
    }

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn builds_small_corpus() {
        let c = Corpus::from_parts(&[tr(0, 0, 2), tr(0, 2, 1), tr(1, 1, 3)], vec![0, 1], None, vocab(3)).unwrap();
        assert_eq!((c.num_docs(), c.vocab_size(), c.num_periods()), (2, 3, 2));
        assert_eq!(c.doc(0), (&[0u32, 2][..], &[2u32, 1][..]));
        assert_eq!(c.total_count(), 6);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let e = Corpus::from_parts(&[tr(0, 5, 1)], vec![0], None, vocab(3)).unwrap_err();
        assert!(matches!(e, TpfError::Validation(_)));
        let e = Corpus::from_parts(&[tr(0, 1, 1), tr(0, 1, 2)], vec![0], None, vocab(3)).unwrap_err();
        assert!(e.to_string().contains("duplicate"));
    }

    #[test]
    fn drops_empty_documents() {
        let c = Corpus::from_parts(&[tr(0, 0, 1), tr(2, 1, 1)], vec![0, 0, 1], None, vocab(2)).unwrap();
        assert_eq!(c.num_docs(), 2);
        assert_eq!(c.dropped_docs(), 1);
        assert_eq!(c.period_of(1), 1);
    }

    #[test]
    fn empty_period_is_named() {
        let e = Corpus::from_parts(&[tr(0, 0, 1), tr(1, 0, 1)], vec![0, 2], None, vocab(1)).unwrap_err();
        assert!(e.to_string().contains("period 1"));
        let e = Corpus::from_parts(&[tr(0, 0, 1)], vec![0, 1], None, vocab(1)).unwrap_err();
        assert!(e.to_string().contains("period 1"));
    }

    #[test]
    fn batches_have_expected_sizes() {
        let trip: Vec<_> = (0..10).map(|d| tr(d, 0, 1)).collect();
        let c = Corpus::from_parts(&trip, vec![0; 10], None, vocab(1)).unwrap();
        let b = split_batches(&c, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sizes: Vec<_> = b.iter().map(|x| x.doc_ids.len()).collect();
        let scales: Vec<_> = b.iter().map(|x| x.scale).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(scales, vec![2.5, 2.5, 5.0]);
        let again = split_batches(&c, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
        assert!(split_batches(&c, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn aggregation_sums_counts() {
        let c = Corpus::from_parts(
            &[tr(0, 0, 1), tr(1, 0, 2), tr(1, 1, 1), tr(2, 1, 4)],
            vec![0, 0, 1],
            Some(vec![1, 1, 0]),
            vocab(2),
        )
        .unwrap();
        assert!(!c.one_doc_per_author_period());
        let g = c.aggregate_by_author().unwrap();
        assert_eq!(g.num_docs(), 2);
        assert_eq!(g.doc(0), (&[0u32, 1][..], &[3u32, 1][..]));
        assert_eq!(g.authors().unwrap(), &[1, 0]);
        assert!(g.one_doc_per_author_period());
    }
}
