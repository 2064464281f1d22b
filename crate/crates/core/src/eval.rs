//! Evaluation protocols: retrieval metrics, linear probe, k-NN and zero-shot
//! classification, sentence-similarity correlation and checkpoint tracking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::contrastive::cosine_sim;
use crate::data::{LabelDescription, LabeledText, QRels, SimilarityPair, TextRecord};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::index::{IndexMode, VectorIndex};
use crate::tokenizer::Side;
use crate::trainer::Checkpoint;

/// Ranked document ids per query id.
pub type Run = BTreeMap<String, Vec<String>>;

const EMBED_CHUNK: usize = 64;

/// What to do with a query whose relevant set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyQrels {
    /// Leave it out of the mean and log a warning.
    #[default]
    Skip,
    /// Include it with a score of zero.
    CountZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mrr,
    Recall,
    Ndcg,
}

fn per_query(metric: Metric, ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let top = &ranked[..ranked.len().min(k)];
    match metric {
        Metric::Mrr => top
            .iter()
            .position(|d| relevant.contains(d))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64),
        Metric::Recall => top.iter().filter(|d| relevant.contains(*d)).count() as f64 / relevant.len() as f64,
        Metric::Ndcg => {
            let dcg: f64 = top
                .iter()
                .enumerate()
                .filter(|(_, d)| relevant.contains(*d))
                .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
                .sum();
            let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
            dcg / ideal
        }
    }
}

/// Mean of `metric`@`k` over the queries in `results`.
pub fn metric_at_k(metric: Metric, results: &Run, qrels: &QRels, k: usize, empty: EmptyQrels) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (qid, ranked) in results {
        let relevant = qrels
            .get(qid)
            .ok_or_else(|| Error::Data(format!("query {qid} has no qrels entry")))?;
        if relevant.is_empty() {
            match empty {
                EmptyQrels::Skip => {
                    log::warn!("query {qid} has no relevant documents; skipped");
                    continue;
                }
                EmptyQrels::CountZero => {
                    counted += 1;
                    continue;
                }
            }
        }
        total += per_query(metric, ranked, relevant, k);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data("no evaluable queries".into()));
    }
    Ok(total / counted as f64)
}

pub fn mrr_at_k(results: &Run, qrels: &QRels, k: usize) -> Result<f64> {
    metric_at_k(Metric::Mrr, results, qrels, k, EmptyQrels::Skip)
}

pub fn recall_at_k(results: &Run, qrels: &QRels, k: usize) -> Result<f64> {
    metric_at_k(Metric::Recall, results, qrels, k, EmptyQrels::Skip)
}

pub fn ndcg_at_k(results: &Run, qrels: &QRels, k: usize) -> Result<f64> {
    metric_at_k(Metric::Ndcg, results, qrels, k, EmptyQrels::Skip)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub queries: usize,
    pub mrr_at_10: f64,
    pub recall_at_1: f64,
    pub recall_at_20: f64,
    pub recall_at_100: f64,
    pub ndcg_at_10: f64,
}

/// Embeds `corpus` (y side) into an index, searches every query (x side) and
/// scores the run against `qrels`.
pub fn evaluate_retrieval(
    encoder: &Encoder,
    queries: &[TextRecord],
    corpus: &[TextRecord],
    qrels: &QRels,
    mode: IndexMode,
    empty: EmptyQrels,
) -> Result<RetrievalReport> {
    let doc_ids: BTreeSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
    for q in queries {
        if let Some(missing) = qrels
            .get(&q.id)
            .and_then(|rel| rel.iter().find(|d| !doc_ids.contains(d.as_str())))
        {
            return Err(Error::Data(format!("qrels for {} reference unknown document {missing}", q.id)));
        }
    }
    let docs = encoder.embed_texts(
        &corpus.iter().map(|d| d.text.as_str()).collect::<Vec<_>>(),
        Side::Y,
        EMBED_CHUNK,
    )?;
    let index = VectorIndex::build(
        corpus.iter().map(|d| d.id.clone()).zip(docs.into_iter().map(|e| e.into_vec())).collect(),
        mode,
    )?;
    let q_emb = encoder.embed_texts(
        &queries.iter().map(|q| q.text.as_str()).collect::<Vec<_>>(),
        Side::X,
        EMBED_CHUNK,
    )?;
    let mut run = Run::new();
    for (q, e) in queries.iter().zip(&q_emb) {
        let hits = index.search(e.as_slice(), 100)?;
        run.insert(q.id.clone(), hits.into_iter().map(|h| h.id).collect());
    }
    let m = |metric, k| metric_at_k(metric, &run, qrels, k, empty);
    Ok(RetrievalReport {
        queries: run.len(),
        mrr_at_10: m(Metric::Mrr, 10)?,
        recall_at_1: m(Metric::Recall, 1)?,
        recall_at_20: m(Metric::Recall, 20)?,
        recall_at_100: m(Metric::Recall, 100)?,
        ndcg_at_10: m(Metric::Ndcg, 10)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub vector: Vec<f64>,
    pub label: String,
}

pub fn embed_labeled(encoder: &Encoder, items: &[LabeledText]) -> Result<Vec<LabeledEmbedding>> {
    let texts: Vec<&str> = items.iter().map(|t| t.text.as_str()).collect();
    Ok(encoder
        .embed_texts(&texts, Side::X, EMBED_CHUNK)?
        .into_iter()
        .zip(items)
        .map(|(e, t)| LabeledEmbedding {
            vector: e.into_vec(),
            label: t.label.clone(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            steps: 500,
            learning_rate: 0.1,
        }
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub labels: Vec<String>,
    /// `[classes, dim]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl LinearProbe {
    pub fn fit(train: &[LabeledEmbedding], cfg: &ProbeConfig) -> Result<Self> {
        let labels: Vec<String> = train
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if labels.len() < 2 {
            return Err(Error::invalid("linear probe needs at least two classes"));
        }
        let dim = train[0].vector.len();
        if train.iter().any(|e| e.vector.len() != dim) {
            return Err(Error::invalid("training embeddings differ in dimension"));
        }
        let targets: Vec<usize> = train
            .iter()
            .map(|e| labels.binary_search(&e.label).expect("label collected above"))
            .collect();
        let c = labels.len();
        let n = train.len() as f64;
        let mut w = vec![vec![0.0; dim]; c];
        let mut b = vec![0.0; c];
        let mut probs = vec![0.0; c];
        for _ in 0..cfg.steps {
            let mut gw = vec![vec![0.0; dim]; c];
            let mut gb = vec![0.0; c];
            for (e, &t) in train.iter().zip(&targets) {
                for j in 0..c {
                    probs[j] = b[j] + crate::tensor::dot(&w[j], &e.vector);
                }
                softmax_in_place(&mut probs);
                probs[t] -= 1.0;
                for j in 0..c {
                    gb[j] += probs[j];
                    for (g, x) in gw[j].iter_mut().zip(&e.vector) {
                        *g += probs[j] * x;
                    }
                }
            }
            for j in 0..c {
                b[j] -= cfg.learning_rate * gb[j] / n;
                for (wi, g) in w[j].iter_mut().zip(&gw[j]) {
                    *wi -= cfg.learning_rate * (g / n + cfg.l2 * *wi);
                }
            }
        }
        Ok(LinearProbe {
            labels,
            weights: w,
            bias: b,
        })
    }

    /// Highest-scoring label; ties go to the earlier label.
    pub fn predict(&self, x: &[f64]) -> &str {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            let s = b + crate::tensor::dot(w, x);
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        &self.labels[best]
    }

    pub fn accuracy(&self, test: &[LabeledEmbedding]) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::invalid("empty test set"));
        }
        let mut correct = 0usize;
        for e in test {
            if self.labels.binary_search(&e.label).is_err() {
                return Err(Error::Data(format!("test label {} does not occur in training data", e.label)));
            }
            correct += usize::from(self.predict(&e.vector) == e.label);
        }
        Ok(correct as f64 / test.len() as f64)
    }
}

pub fn linear_probe(train: &[LabeledEmbedding], test: &[LabeledEmbedding]) -> Result<f64> {
    linear_probe_with(train, test, &ProbeConfig::default())
}

pub fn linear_probe_with(train: &[LabeledEmbedding], test: &[LabeledEmbedding], cfg: &ProbeConfig) -> Result<f64> {
    let train_labels: BTreeSet<&str> = train.iter().map(|e| e.label.as_str()).collect();
    if let Some(unseen) = test.iter().find(|e| !train_labels.contains(e.label.as_str())) {
        return Err(Error::Data(format!("test label {} does not occur in training data", unseen.label)));
    }
    LinearProbe::fit(train, cfg)?.accuracy(test)
}

pub const DEFAULT_KNN_K: usize = 256;

/// Majority label among the `k` most cosine-similar training examples.
/// Vote ties go to the label with the larger summed similarity, then to the
/// smaller label. Neighbours with equal similarity are taken in training order.
pub fn knn_classify(train: &[LabeledEmbedding], query: &[f64], k: usize) -> Result<String> {
    if train.is_empty() {
        return Err(Error::invalid("k-NN needs a non-empty training set"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", train.len())));
    }
    let mut sims: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, e)| cosine_sim(query, &e.vector).map(|s| (s, i)))
        .collect::<Result<_>>()?;
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(s, i) in &sims[..k] {
        let v = votes.entry(train[i].label.as_str()).or_insert((0, 0.0));
        v.0 += 1;
        v.1 += s;
    }
    // BTreeMap iterates labels ascending, so a strict comparison keeps the smaller label on a full tie.
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (count, sum)) in votes {
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum > bs),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    Ok(best.expect("k >= 1").0.to_string())
}

/// Fraction of `test` whose k-NN label matches.
pub fn knn_accuracy(train: &[LabeledEmbedding], test: &[LabeledEmbedding], k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut correct = 0usize;
    for e in test {
        correct += usize::from(knn_classify(train, &e.vector, k)? == e.label);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// A prompt with exactly one `{label}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub const SLOT: &'static str = "{label}";

    pub fn new(template: impl Into<String>) -> Result<Self> {
        let t = template.into();
        match t.matches(Self::SLOT).count() {
            1 => Ok(PromptTemplate(t)),
            n => Err(Error::invalid(format!(
                "template must contain exactly one {} slot, found {n}",
                Self::SLOT
            ))),
        }
    }

    pub fn fill(&self, label: &str) -> String {
        self.0.replace(Self::SLOT, label)
    }
}

/// Index of the label embedding with the highest cosine to `query`; ties go
/// to the first.
pub fn zero_shot_argmax(query: &[f64], labels: &[Vec<f64>]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::invalid("zero-shot needs at least one label"));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, l) in labels.iter().enumerate() {
        let s = cosine_sim(query, l)?;
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

/// Label texts as embedded on the y side: the description, or the template
/// filled with the label name when a template is given.
fn label_texts(labels: &[LabelDescription], template: Option<&PromptTemplate>) -> Result<Vec<String>> {
    if labels.is_empty() {
        return Err(Error::invalid("zero-shot needs at least one label"));
    }
    labels
        .iter()
        .map(|l| {
            let text = match template {
                Some(t) => t.fill(&l.label),
                None => l.description.clone(),
            };
            if text.is_empty() {
                Err(Error::invalid(format!("label {} has an empty description", l.label)))
            } else {
                Ok(text)
            }
        })
        .collect()
}

/// Predicted label for each query text.
pub fn zero_shot_classify_many(
    encoder: &Encoder,
    labels: &[LabelDescription],
    queries: &[&str],
    template: Option<&PromptTemplate>,
) -> Result<Vec<String>> {
    let texts = label_texts(labels, template)?;
    let label_emb: Vec<Vec<f64>> = encoder
        .embed_texts(&texts, Side::Y, EMBED_CHUNK)?
        .into_iter()
        .map(|e| e.into_vec())
        .collect();
    encoder
        .embed_texts(queries, Side::X, EMBED_CHUNK)?
        .iter()
        .map(|q| zero_shot_argmax(q.as_slice(), &label_emb).map(|i| labels[i].label.clone()))
        .collect()
}

pub fn zero_shot_classify(
    encoder: &Encoder,
    labels: &[LabelDescription],
    query: &str,
    template: Option<&PromptTemplate>,
) -> Result<String> {
    Ok(zero_shot_classify_many(encoder, labels, &[query], template)?.remove(0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Spearman correlation of `predicted` against `gold`. Constant `gold` is an
/// error; constant `predicted` yields 0.
pub fn spearman(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::invalid("spearman inputs differ in length"));
    }
    if gold.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 pairs"));
    }
    if gold.iter().all(|g| *g == gold[0]) {
        return Err(Error::invalid("gold scores are all equal"));
    }
    Ok(pearson(&average_ranks(predicted), &average_ranks(gold))
        .unwrap_or(0.0)
        .clamp(-1.0, 1.0))
}

/// Both sentences are embedded on the x side.
pub fn sentence_similarity_eval(encoder: &Encoder, pairs: &[SimilarityPair]) -> Result<f64> {
    let a: Vec<&str> = pairs.iter().map(|p| p.a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.b.as_str()).collect();
    let ea = encoder.embed_texts(&a, Side::X, EMBED_CHUNK)?;
    let eb = encoder.embed_texts(&b, Side::X, EMBED_CHUNK)?;
    let predicted = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| cosine_sim(x.as_slice(), y.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    spearman(&predicted, &gold)
}

/// An evaluation run against every tracked checkpoint.
#[derive(Clone, Debug)]
pub enum Suite {
    Retrieval {
        queries: Vec<TextRecord>,
        corpus: Vec<TextRecord>,
        qrels: QRels,
    },
    Probe {
        train: Vec<LabeledText>,
        test: Vec<LabeledText>,
    },
    Knn {
        train: Vec<LabeledText>,
        test: Vec<LabeledText>,
        k: usize,
    },
    ZeroShot {
        labels: Vec<LabelDescription>,
        test: Vec<LabeledText>,
        template: Option<PromptTemplate>,
    },
    Similarity {
        pairs: Vec<SimilarityPair>,
    },
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Retrieval { .. } => "retrieval_mrr@10",
            Suite::Probe { .. } => "probe_accuracy",
            Suite::Knn { .. } => "knn_accuracy",
            Suite::ZeroShot { .. } => "zeroshot_accuracy",
            Suite::Similarity { .. } => "sts_spearman",
        }
    }

    pub fn run(&self, encoder: &Encoder) -> Result<f64> {
        match self {
            Suite::Retrieval { queries, corpus, qrels } => Ok(evaluate_retrieval(
                encoder,
                queries,
                corpus,
                qrels,
                IndexMode::Flat,
                EmptyQrels::Skip,
            )?
            .mrr_at_10),
            Suite::Probe { train, test } => {
                linear_probe(&embed_labeled(encoder, train)?, &embed_labeled(encoder, test)?)
            }
            Suite::Knn { train, test, k } => {
                let tr = embed_labeled(encoder, train)?;
                knn_accuracy(&tr, &embed_labeled(encoder, test)?, (*k).min(tr.len()))
            }
            Suite::ZeroShot { labels, test, template } => {
                if test.is_empty() {
                    return Err(Error::invalid("empty test set"));
                }
                let texts: Vec<&str> = test.iter().map(|t| t.text.as_str()).collect();
                let pred = zero_shot_classify_many(encoder, labels, &texts, template.as_ref())?;
                let correct = pred.iter().zip(test).filter(|(p, t)| **p == t.label).count();
                Ok(correct as f64 / test.len() as f64)
            }
            Suite::Similarity { pairs } => sentence_similarity_eval(encoder, pairs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackRow {
    pub step: u64,
    pub suite: String,
    pub metric: f64,
}

/// Evaluates every suite on every checkpoint, in checkpoint order.
pub fn track_checkpoints(checkpoints: &[Checkpoint], suites: &[Suite]) -> Result<Vec<TrackRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid("tracking needs at least two checkpoints"));
    }
    let first = &checkpoints[0].encoder;
    for c in &checkpoints[1..] {
        if c.encoder.config() != first.config() || c.encoder.vocab() != first.vocab() {
            return Err(Error::invalid(format!(
                "checkpoint at step {} has an incompatible encoder configuration",
                c.step
            )));
        }
    }
    let mut rows = Vec::new();
    for c in checkpoints {
        for s in suites {
            rows.push(TrackRow {
                step: c.step,
                suite: s.name().to_string(),
                metric: s.run(&c.encoder)?,
            });
        }
    }
    Ok(rows)
}

pub fn tracking_csv(rows: &[TrackRow]) -> String {
    let mut s = String::from("step,suite,metric\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.suite, r.metric));
    }
    s
}
