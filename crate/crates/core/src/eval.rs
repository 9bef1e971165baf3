//! Word error rate and multi-reference corpus BLEU.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::beam::NBestRecord;
use crate::error::{Error, Result};
use crate::vocab::normalize_text;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors per reference word. An empty reference counts as one word so
    /// that spurious insertions still register.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }

    /// Reference empty but hypothesis not.
    pub fn degenerate(&self) -> bool {
        self.ref_len == 0 && self.insertions > 0
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_len += o.ref_len;
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Minimum word edit distance between reference and hypothesis with a
/// breakdown of one optimal alignment.
pub fn word_edits(reference: &str, hypothesis: &str) -> EditCounts {
    let r = words(reference);
    let h = words(hypothesis);
    let (n, m) = (r.len(), h.len());
    // cost table, then backtrace
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word error rate of one pair, as a fraction.
pub fn wer(reference: &str, hypothesis: &str) -> (f64, EditCounts) {
    let c = word_edits(reference, hypothesis);
    (c.rate(), c)
}

/// Pooled edits over a corpus of `(reference, hypothesis)` pairs.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> EditCounts {
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total.add(&word_edits(r, h));
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// On the 0–100 scale.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(w: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if w.len() >= n {
        for g in w.windows(n) {
            *m.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with per-segment multi-reference clipping, closest
/// reference length (ties to the shorter) and no smoothing. n-gram orders
/// for which the whole corpus has no hypothesis n-grams are skipped.
pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(Error::Input("BLEU needs at least one segment".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        if p.references.is_empty() {
            return Err(Error::Input(format!("segment {:?} has no reference", p.id)));
        }
        let h = words(&p.hypothesis);
        let refs: Vec<Vec<&str>> = p.references.iter().map(|r| words(r)).collect();
        hyp_len += h.len();
        let mut closest = refs[0].len();
        for r in &refs[1..] {
            let (d, best) = (r.len().abs_diff(h.len()), closest.abs_diff(h.len()));
            if d < best || (d == best && r.len() < closest) {
                closest = r.len();
            }
        }
        ref_len += closest;
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    // Orders longer than every hypothesis have no n-grams at all and are
    // left out of the mean instead of zeroing the score.
    let orders: Vec<f64> = precisions
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&p, _)| p)
        .collect();
    let bleu = if orders.is_empty() || orders.contains(&0.0) {
        0.0
    } else {
        let log_mean = orders.iter().map(|p| p.ln()).sum::<f64>() / orders.len() as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Reads an `id<TAB>text` reference file.
pub fn read_references(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line.split_once('\t').unwrap_or((line, ""));
        let err = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            detail,
        };
        if id.is_empty() {
            return Err(err("missing utterance id".into()));
        }
        if out.insert(id.to_string(), t.to_string()).is_some() {
            return Err(err(format!("duplicate utterance id {id:?}")));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Wer,
    Bleu,
}

impl Metric {
    /// ASR is scored by WER, translation tasks by BLEU.
    pub fn for_task(task: &str) -> Self {
        if task == "asr" {
            Metric::Wer
        } else {
            Metric::Bleu
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub task: String,
    pub metric: Metric,
    /// WER in percent or BLEU on the 0–100 scale.
    pub score: f64,
    pub edits: Option<EditCounts>,
    pub bleu: Option<BleuScore>,
    /// Per-utterance WER (percent) or sentence BLEU, sorted by id.
    pub per_utterance: Vec<(String, f64)>,
}

impl EvalReport {
    /// `WER 12.50` or `BLEU 100.00`.
    pub fn summary(&self) -> String {
        match self.metric {
            Metric::Wer => format!("WER {:.2}", self.score),
            Metric::Bleu => format!("BLEU {:.2}", self.score),
        }
    }

    /// Tab-separated report: `key<TAB>value` header block, then one
    /// `id<TAB>score` line per utterance after a `# utterances` marker.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task\t{}", self.task);
        match self.metric {
            Metric::Wer => {
                let e = self.edits.unwrap_or_default();
                let _ = writeln!(s, "metric\tWER");
                let _ = writeln!(s, "score\t{:.2}", self.score);
                let _ = writeln!(s, "substitutions\t{}", e.substitutions);
                let _ = writeln!(s, "insertions\t{}", e.insertions);
                let _ = writeln!(s, "deletions\t{}", e.deletions);
                let _ = writeln!(s, "ref_words\t{}", e.ref_len);
            }
            Metric::Bleu => {
                let _ = writeln!(s, "metric\tBLEU");
                let _ = writeln!(s, "score\t{:.2}", self.score);
                if let Some(b) = &self.bleu {
                    for (n, p) in b.precisions.iter().enumerate() {
                        let _ = writeln!(s, "p{}\t{:.6}\t{}/{}", n + 1, p, b.matches[n], b.totals[n]);
                    }
                    let _ = writeln!(s, "bp\t{:.6}", b.brevity_penalty);
                    let _ = writeln!(s, "hyp_len\t{}", b.hyp_len);
                    let _ = writeln!(s, "ref_len\t{}", b.ref_len);
                }
            }
        }
        let _ = writeln!(s, "utterances\t{}", self.per_utterance.len());
        let _ = writeln!(s, "# utterances");
        for (id, v) in &self.per_utterance {
            let _ = writeln!(s, "{id}\t{v:.4}");
        }
        s
    }
}

/// Joins rank-1 hypotheses with references by id and scores them.
///
/// Every reference id needs a hypothesis and vice versa; WER uses the
/// first reference set only.
pub fn evaluate_run(nbest: &[NBestRecord], references: &[BTreeMap<String, String>], task: &str) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(Error::Usage("at least one reference file is required".into()));
    }
    let mut hyps: BTreeMap<&str, &str> = BTreeMap::new();
    for r in nbest {
        if r.rank == 1 && hyps.insert(&r.id, &r.text).is_some() {
            return Err(Error::Input(format!("utterance {:?} has two rank-1 hypotheses", r.id)));
        }
    }
    let metric = Metric::for_task(task);
    let refs_used = if metric == Metric::Wer { &references[..1] } else { references };
    let mut ref_ids: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for set in refs_used {
        for (id, t) in set {
            ref_ids.entry(id).or_default().push(normalize_text(t));
        }
    }
    let missing_hyp: Vec<&str> = ref_ids.keys().filter(|id| !hyps.contains_key(*id)).copied().collect();
    let missing_ref: Vec<&str> = hyps.keys().filter(|id| !ref_ids.contains_key(*id)).copied().collect();
    if !missing_hyp.is_empty() || !missing_ref.is_empty() {
        return Err(Error::Input(format!(
            "hypotheses and references do not align; no hypothesis for {missing_hyp:?}, no reference for {missing_ref:?}"
        )));
    }
    let pairs: Vec<EvalPair> = ref_ids
        .into_iter()
        .map(|(id, refs)| EvalPair {
            id: id.to_string(),
            hypothesis: normalize_text(hyps[id]),
            references: refs,
        })
        .collect();
    match metric {
        Metric::Wer => {
            let per: Vec<(String, f64)> = pairs
                .iter()
                .map(|p| (p.id.clone(), 100.0 * wer(&p.references[0], &p.hypothesis).0))
                .collect();
            let edits = corpus_wer(pairs.iter().map(|p| (p.references[0].as_str(), p.hypothesis.as_str())));
            Ok(EvalReport {
                task: task.to_string(),
                metric,
                score: 100.0 * edits.rate(),
                edits: Some(edits),
                bleu: None,
                per_utterance: per,
            })
        }
        Metric::Bleu => {
            let b = corpus_bleu(&pairs, 4)?;
            let per = pairs
                .iter()
                .map(|p| Ok((p.id.clone(), corpus_bleu(std::slice::from_ref(p), 4)?.bleu)))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalReport {
                task: task.to_string(),
                metric,
                score: b.bleu,
                edits: None,
                bleu: Some(b),
                per_utterance: per,
            })
        }
    }
}
