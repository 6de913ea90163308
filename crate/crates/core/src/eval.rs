//! Zero-shot classification, intra-object invariance and description accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{cosine_distance, cosine_similarity, softmax, Matrix};
use crate::model::{ModelState, TextEncoder};
use crate::synthdata::{zero_shot_prompt, MultiViewDataset};
use crate::viewpoints::ObjectEmbeddings;

/// Deterministic text-to-vector map used by description accuracy.
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl TextEmbedder for TextEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.encode(text)
    }
}

/// One text embedding per candidate category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    pub labels: Vec<String>,
    pub embeddings: Matrix,
}

impl ClassBank {
    pub fn new(labels: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if labels.is_empty() {
            return Err(OvtError::Empty("class bank"));
        }
        if labels.len() != embeddings.rows() {
            return Err(OvtError::dims("ClassBank", labels.len(), embeddings.rows()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(OvtError::Config(format!("duplicate class label {dup:?}")));
        }
        Ok(Self { labels, embeddings })
    }

    /// Embeds `"a photo of <label>"` for each label.
    pub fn from_text(labels: Vec<String>, embedder: &dyn TextEmbedder) -> Result<Self> {
        let rows = labels
            .iter()
            .map(|l| embedder.embed(&zero_shot_prompt(l)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(OvtError::Empty("class bank"));
        }
        Self::new(labels, Matrix::from_rows(&rows)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Class indices, most similar first.
    pub ranking: Vec<usize>,
    /// Softmax of similarities divided by `τ`, in class order.
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub predictions: Vec<Prediction>,
    pub accuracy: Vec<TopK>,
}

impl ZeroShotReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

/// Ranks classes by cosine similarity; ties go to the lower class index.
pub fn zero_shot_classify(
    images: &Matrix,
    truths: &[usize],
    bank: &ClassBank,
    ks: &[usize],
    tau: f64,
) -> Result<ZeroShotReport> {
    if bank.is_empty() {
        return Err(OvtError::Empty("class bank"));
    }
    if images.rows() != truths.len() {
        return Err(OvtError::dims("zero_shot_classify", images.rows(), truths.len()));
    }
    if images.rows() > 0 && images.cols() != bank.embeddings.cols() {
        return Err(OvtError::dims(
            "zero_shot_classify",
            images.shape_str(),
            bank.embeddings.shape_str(),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > bank.len()) {
        return Err(OvtError::Config(format!("top-k {k} outside [1, {}]", bank.len())));
    }
    if let Some(&t) = truths.iter().find(|&&t| t >= bank.len()) {
        return Err(OvtError::Config(format!(
            "truth class {t} not in bank of {}",
            bank.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(OvtError::Config(format!("temperature {tau} must be positive")));
    }
    let mut predictions = Vec::with_capacity(images.rows());
    let mut hits = vec![0usize; ks.len()];
    for (row, &truth) in images.iter_rows().zip(truths) {
        let sims = bank
            .embeddings
            .iter_rows()
            .map(|c| cosine_similarity(row, c))
            .collect::<Result<Vec<_>>>()?;
        let mut ranking: Vec<usize> = (0..bank.len()).collect();
        ranking.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let pos = ranking.iter().position(|&c| c == truth).expect("truth in ranking");
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(pos < k);
        }
        let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        predictions.push(Prediction {
            ranking,
            confidence: softmax(&scaled),
        });
    }
    let n = images.rows().max(1) as f64;
    let accuracy = ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| TopK {
            k,
            accuracy: h as f64 / n,
        })
        .collect();
    Ok(ZeroShotReport { predictions, accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub epsilon: f64,
    /// Largest pairwise cosine distance per object, in input order.
    pub per_object_max: Vec<f64>,
    /// Fraction of objects whose largest distance is at most `epsilon`.
    pub fraction_within: f64,
    /// Mean of `per_object_max`.
    pub mean_max_distance: f64,
    /// Mean over all unordered view pairs of every object.
    pub mean_pairwise_distance: f64,
}

pub fn invariance_report(objects: &[ObjectEmbeddings], epsilon: f64) -> Result<InvarianceReport> {
    if objects.is_empty() {
        return Err(OvtError::Empty("objects"));
    }
    let mut per_object_max = Vec::with_capacity(objects.len());
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for obj in objects {
        let e = &obj.embeddings;
        let mut worst: f64 = 0.0;
        for i in 0..e.rows() {
            for j in i + 1..e.rows() {
                let d = cosine_distance(e.row(i), e.row(j))?;
                worst = worst.max(d);
                pair_sum += d;
                pairs += 1;
            }
        }
        per_object_max.push(worst);
    }
    let n = objects.len() as f64;
    let within = per_object_max.iter().filter(|&&d| d <= epsilon).count();
    Ok(InvarianceReport {
        epsilon,
        fraction_within: within as f64 / n,
        mean_max_distance: per_object_max.iter().sum::<f64>() / n,
        mean_pairwise_distance: if pairs == 0 { 0.0 } else { pair_sum / pairs as f64 },
        per_object_max,
    })
}

/// Cosine similarity between each generated text and its reference.
pub fn description_similarities(
    generated: &[String],
    truths: &[String],
    embedder: &dyn TextEmbedder,
) -> Result<Vec<f64>> {
    if generated.len() != truths.len() {
        return Err(OvtError::dims("description_accuracy", generated.len(), truths.len()));
    }
    if generated.is_empty() {
        return Err(OvtError::Empty("descriptions"));
    }
    generated
        .iter()
        .zip(truths)
        .map(|(g, t)| cosine_similarity(&embedder.embed(g)?, &embedder.embed(t)?))
        .collect()
}

/// Fraction of similarities at or above `beta`.
pub fn accuracy_at(similarities: &[f64], beta: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&beta) {
        return Err(OvtError::Config(format!("threshold {beta} outside [-1, 1]")));
    }
    if similarities.is_empty() {
        return Err(OvtError::Empty("similarities"));
    }
    Ok(similarities.iter().filter(|&&s| s >= beta).count() as f64 / similarities.len() as f64)
}

/// `Acc@β`: share of descriptions whose embedding similarity to the reference reaches `β`.
pub fn description_accuracy(
    generated: &[String],
    truths: &[String],
    embedder: &dyn TextEmbedder,
    beta: f64,
) -> Result<f64> {
    accuracy_at(&description_similarities(generated, truths, embedder)?, beta)
}

/// Mean similarity on clean data.
pub fn adaptive_threshold(clean_similarities: &[f64]) -> Result<f64> {
    if clean_similarities.is_empty() {
        return Err(OvtError::Empty("clean similarities"));
    }
    Ok(clean_similarities.iter().sum::<f64>() / clean_similarities.len() as f64)
}

/// `1 − 1e−9`: exact-match threshold that tolerates rounding in self-similarity.
pub const BETA_EXACT: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub epsilon: f64,
    /// Fixed thresholds; the adaptive one is always added.
    pub betas: Vec<f64>,
    pub top_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            betas: vec![BETA_EXACT, 0.5],
            top_k: vec![1, 5],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(OvtError::Config("eval.epsilon must be >= 0".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(-1.0..=1.0).contains(*b)) {
            return Err(OvtError::Config(format!("eval.betas entry {b} outside [-1, 1]")));
        }
        if self.top_k.is_empty() || self.top_k.contains(&0) {
            return Err(OvtError::Config(
                "eval.top_k must be non-empty with entries >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaAccuracy {
    pub label: String,
    pub beta: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: usize,
    pub objects: usize,
    pub zero_shot: Vec<TopK>,
    pub clean_zero_shot: Option<Vec<TopK>>,
    pub invariance: InvarianceReport,
    pub description_accuracy: Vec<BetaAccuracy>,
}

/// Embeddings of every record, grouped per object.
pub fn group_embeddings(dataset: &MultiViewDataset, embeddings: &[Vec<f64>]) -> Result<Vec<ObjectEmbeddings>> {
    dataset
        .objects()
        .into_iter()
        .map(|g| {
            let rows: Vec<Vec<f64>> = g.indices.iter().map(|&i| embeddings[i].clone()).collect();
            let view_ids = g.indices.iter().map(|&i| dataset.records[i].view_id).collect();
            ObjectEmbeddings::new(g.object_id, Matrix::from_rows(&rows)?, view_ids)
        })
        .collect()
}

/// Label indices for every record; errors on a category missing from the bank.
pub fn truth_indices(dataset: &MultiViewDataset, bank: &ClassBank) -> Result<Vec<usize>> {
    dataset
        .records
        .iter()
        .map(|r| {
            bank.index_of(&r.category)
                .ok_or_else(|| OvtError::Config(format!("category {:?} not in class bank", r.category)))
        })
        .collect()
}

/// Zero-shot predictions turned into generated texts, compared with the
/// reference prompt for the true label.
fn description_pairs(report: &ZeroShotReport, truths: &[usize], bank: &ClassBank) -> (Vec<String>, Vec<String>) {
    let generated = report
        .predictions
        .iter()
        .map(|p| zero_shot_prompt(&bank.labels[p.ranking[0]]))
        .collect();
    let reference = truths.iter().map(|&t| zero_shot_prompt(&bank.labels[t])).collect();
    (generated, reference)
}

/// Full evaluation of a model on a multi-view set, with an optional clean set
/// supplying the adaptive threshold.
pub fn evaluate_model(
    state: &ModelState,
    views: &MultiViewDataset,
    clean: Option<&MultiViewDataset>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(OvtError::Empty("evaluation views"));
    }
    let mut labels = views.categories();
    if let Some(c) = clean {
        for l in c.categories() {
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
    }
    let bank = ClassBank::from_text(labels, &state.text)?;
    let ks: Vec<usize> = cfg.top_k.iter().map(|&k| k.min(bank.len())).collect();
    let enc = state.image_encoder()?;
    let embed =
        |d: &MultiViewDataset| -> Result<Vec<Vec<f64>>> { d.records.iter().map(|r| enc.encode(&r.raw)).collect() };

    let emb = embed(views)?;
    let truths = truth_indices(views, &bank)?;
    let zs = zero_shot_classify(&Matrix::from_rows(&emb)?, &truths, &bank, &ks, state.tau())?;
    let invariance = invariance_report(&group_embeddings(views, &emb)?, cfg.epsilon)?;
    let (generated, reference) = description_pairs(&zs, &truths, &bank);
    let sims = description_similarities(&generated, &reference, &state.text)?;

    let (clean_zero_shot, adaptive) = match clean.filter(|c| !c.is_empty()) {
        Some(c) => {
            let ce = embed(c)?;
            let ct = truth_indices(c, &bank)?;
            let czs = zero_shot_classify(&Matrix::from_rows(&ce)?, &ct, &bank, &ks, state.tau())?;
            let (g, r) = description_pairs(&czs, &ct, &bank);
            let clean_sims = description_similarities(&g, &r, &state.text)?;
            (Some(czs.accuracy), adaptive_threshold(&clean_sims)?)
        }
        None => (None, adaptive_threshold(&sims)?),
    };

    let mut description_accuracy = Vec::new();
    for &beta in &cfg.betas {
        let label = if beta == BETA_EXACT {
            "1.0".to_string()
        } else {
            format!("{beta}")
        };
        description_accuracy.push(BetaAccuracy {
            label,
            beta,
            accuracy: accuracy_at(&sims, beta)?,
        });
    }
    let adaptive = adaptive.clamp(-1.0, 1.0);
    description_accuracy.push(BetaAccuracy {
        label: "adaptive".into(),
        beta: adaptive,
        accuracy: accuracy_at(&sims, adaptive)?,
    });
    Ok(EvalReport {
        views: views.len(),
        objects: invariance.per_object_max.len(),
        zero_shot: zs.accuracy,
        clean_zero_shot,
        invariance,
        description_accuracy,
    })
}
