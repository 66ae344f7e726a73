//! Concept representation vectors, the semantic similarity loss, periodic
//! recalibration, and the full bias-correction retraining loop.
//!
//! A concept's representation vector is the mean flattened feature map of
//! the filters that carry the concept in their label and appear positively
//! associated with the class. During retraining every filter map is pushed
//! (by cosine similarity) away from the undesired vectors of the image's
//! class and towards the desired ones, while cross-entropy keeps the
//! classifier working. Every `k` epochs the rule-set is re-extracted and the
//! vectors are recalibrated by mean-merging new vectors into the old bank.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tape, Var};
use crate::binarize::{BinarizerParams, NormTable};
use crate::cnn::{AuxLoss, CnnModel, EpochStats, TensorDataset, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::fold::{FoldParams, Head, Pred, RuleSet};
use crate::metrics;
use crate::pipeline::{extract_ruleset, Extraction};
use crate::semlabel::{top_m_images, LabelMap, LabelParams, SegMask, Vocabulary};
use crate::tensor::{Scalar, Tensor};

/// Undesired/desired concept tokens per class.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ClassConstraints {
    #[serde(default)]
    pub undesired: Vec<String>,
    #[serde(default)]
    pub desired: Vec<String>,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ConstraintSet {
    pub classes: BTreeMap<String, ClassConstraints>,
}

impl ConstraintSet {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cs: ConstraintSet =
            toml::from_str(text).map_err(|e| Error::Config(format!("constraints: {e}")))?;
        cs.validate()?;
        Ok(cs)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("constraints serialize")
    }

    pub fn validate(&self) -> Result<()> {
        for (class, cc) in &self.classes {
            for u in &cc.undesired {
                if cc.desired.contains(u) {
                    return Err(Error::Config(format!(
                        "concept `{u}` is both undesired and desired for class `{class}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn for_class(&self, class: &str) -> Option<&ClassConstraints> {
        self.classes.get(class)
    }
}

/// Mean filter representation of one concept for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVector {
    pub concept: String,
    pub class: String,
    pub values: Vec<f64>,
    /// Filters that contributed.
    pub filters: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassBank {
    pub undesired: Vec<ConceptVector>,
    pub desired: Vec<ConceptVector>,
}

/// Per-class undesired/desired concept vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptBank {
    pub by_class: BTreeMap<String, ClassBank>,
}

impl ConceptBank {
    pub fn is_empty(&self) -> bool {
        self.by_class.values().all(|b| b.undesired.is_empty() && b.desired.is_empty())
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossParams {
    pub lambda_b: f64,
    pub lambda_g: f64,
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite())
            || !(self.lambda_g >= 0.0 && self.lambda_g.is_finite())
        {
            return Err(Error::Config("lambda_b and lambda_g must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CorrectionConfig {
    /// Retraining epochs.
    pub epochs: usize,
    /// Recalibration period in epochs.
    pub period: usize,
    pub loss: LossParams,
    /// Images averaged into a filter representation vector.
    pub top_images: usize,
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.period < 1 {
            return Err(Error::Config("correct.period must be >= 1".into()));
        }
        if self.epochs < self.period {
            return Err(Error::Config("correct.epochs must be >= correct.period".into()));
        }
        if self.top_images < 1 {
            return Err(Error::Config("correct.top_images must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean flattened feature map of `filter` over its `m` top-norm images.
/// Datasets smaller than `m` use every image (with a warning).
pub fn filter_repr_vector<T: Scalar>(
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    nt: &NormTable,
    filter: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let m_eff = m.min(nt.n);
    if m_eff < m {
        log::warn!("filter {filter}: only {} images available for the top-{m} mean", nt.n);
    }
    let top = top_m_images(nt, filter, m_eff)?;
    let plane = model.config.feature_map_len();
    let mut acc = vec![0.0f64; plane];
    for &i in &top {
        let (maps, _) = model.forward(&data.images[i])?;
        for (a, v) in acc.iter_mut().zip(&maps.data()[filter * plane..(filter + 1) * plane]) {
            *a += v.as_f64();
        }
    }
    for a in &mut acc {
        *a /= m_eff as f64;
    }
    Ok(acc)
}

/// Filter predicates occurring non-negated in the direct body of any rule
/// headed by `class`. Negated occurrences and predicates inside abnormality
/// rule bodies are excluded.
pub fn positively_associated(rs: &RuleSet, class: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for rule in &rs.rules {
        if rule.head == Head::Target(class.to_string()) {
            for lit in &rule.body {
                if let Pred::Filter(name) = &lit.pred {
                    if !lit.negated {
                        out.insert(name.clone());
                    }
                }
            }
        }
    }
    out
}

/// Map a rule-set predicate name to its filter index, through the label map
/// when the name is labelled, or via the raw `f<k>` form.
fn resolve_filter(name: &str, labels: &LabelMap) -> Option<usize> {
    labels.filter_of(name).or_else(|| {
        name.strip_prefix('f').and_then(|d| d.parse::<usize>().ok()).filter(|&i| i >= 1).map(|i| i - 1)
    })
}

/// Concept representation vector: the mean of the representation vectors of
/// every positively-associated filter of `class` whose label carries
/// `concept` as a token. `None` when no such filter exists.
#[allow(clippy::too_many_arguments)]
pub fn concept_vector<T: Scalar>(
    concept: &str,
    class: &str,
    rs: &RuleSet,
    labels: &LabelMap,
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    nt: &NormTable,
    m: usize,
) -> Result<Option<ConceptVector>> {
    let mut filters = Vec::new();
    for pred in positively_associated(rs, class) {
        let Some(filter) = resolve_filter(&pred, labels) else {
            continue;
        };
        let carries = labels
            .entries
            .iter()
            .find(|e| e.filter == filter)
            .is_some_and(|e| e.concepts.iter().any(|c| c == concept));
        if carries {
            filters.push(filter);
        }
    }
    filters.sort_unstable();
    filters.dedup();
    if filters.is_empty() {
        return Ok(None);
    }
    let plane = model.config.feature_map_len();
    let mut acc = vec![0.0f64; plane];
    for &f in &filters {
        let v = filter_repr_vector(model, data, nt, f, m)?;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= filters.len() as f64;
    }
    Ok(Some(ConceptVector {
        concept: concept.to_string(),
        class: class.to_string(),
        values: acc,
        filters,
    }))
}

/// Build the per-class bank from the constraints; concepts with no carrying
/// filter are skipped (with a warning).
#[allow(clippy::too_many_arguments)]
pub fn build_concept_bank<T: Scalar>(
    constraints: &ConstraintSet,
    rs: &RuleSet,
    labels: &LabelMap,
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    nt: &NormTable,
    m: usize,
) -> Result<ConceptBank> {
    constraints.validate()?;
    let mut bank = ConceptBank::default();
    for (class, cc) in &constraints.classes {
        let mut class_bank = ClassBank::default();
        for concept in &cc.undesired {
            match concept_vector(concept, class, rs, labels, model, data, nt, m)? {
                Some(v) => class_bank.undesired.push(v),
                None => log::warn!("no filter carries undesired concept `{concept}` for class `{class}`"),
            }
        }
        for concept in &cc.desired {
            match concept_vector(concept, class, rs, labels, model, data, nt, m)? {
                Some(v) => class_bank.desired.push(v),
                None => log::warn!("no filter carries desired concept `{concept}` for class `{class}`"),
            }
        }
        bank.by_class.insert(class.clone(), class_bank);
    }
    Ok(bank)
}

/// Mean-merge `new` into `old`: concepts present in both average
/// componentwise, new concepts are adopted, old ones retained.
pub fn recalibrate(old: &ConceptBank, new: &ConceptBank) -> Result<ConceptBank> {
    let merge_lists = |old_list: &[ConceptVector], new_list: &[ConceptVector]| -> Result<Vec<ConceptVector>> {
        let mut out = Vec::new();
        for o in old_list {
            if let Some(n) = new_list.iter().find(|n| n.concept == o.concept) {
                if n.values.len() != o.values.len() {
                    return Err(Error::shape(
                        "recalibrate",
                        format!("concept `{}` dimension {} vs {}", o.concept, o.values.len(), n.values.len()),
                    ));
                }
                let values =
                    o.values.iter().zip(n.values.iter()).map(|(a, b)| (a + b) / 2.0).collect();
                let mut filters = o.filters.clone();
                filters.extend(&n.filters);
                filters.sort_unstable();
                filters.dedup();
                out.push(ConceptVector {
                    concept: o.concept.clone(),
                    class: o.class.clone(),
                    values,
                    filters,
                });
            } else {
                out.push(o.clone());
            }
        }
        for n in new_list {
            if !old_list.iter().any(|o| o.concept == n.concept) {
                out.push(n.clone());
            }
        }
        Ok(out)
    };
    let mut by_class = BTreeMap::new();
    let classes: BTreeSet<&String> = old.by_class.keys().chain(new.by_class.keys()).collect();
    let empty = ClassBank::default();
    for class in classes {
        let o = old.by_class.get(class).unwrap_or(&empty);
        let n = new.by_class.get(class).unwrap_or(&empty);
        by_class.insert(
            class.clone(),
            ClassBank {
                undesired: merge_lists(&o.undesired, &n.undesired)?,
                desired: merge_lists(&o.desired, &n.desired)?,
            },
        );
    }
    Ok(ConceptBank { by_class })
}

/// The semantic similarity loss for one image's feature maps, on the tape.
/// For every filter j: `lambda_b * sum_b cos(r_j, r_b) - lambda_g * sum_g
/// cos(r_j, r_g)` with the bank vectors of the image's ground-truth class
/// held constant.
pub fn semantic_similarity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    feature_maps: Var,
    undesired: &[Tensor<T>],
    desired: &[Tensor<T>],
    loss: &LossParams,
) -> Result<Var> {
    let k = tape.value(feature_maps).shape()[0];
    let lb = T::from_f64(loss.lambda_b);
    let lg = T::from_f64(-loss.lambda_g);
    let mut acc = tape.leaf(Tensor::scalar(T::zero()));
    for j in 0..k {
        if undesired.is_empty() && desired.is_empty() {
            break;
        }
        let map = tape.channel(feature_maps, j)?;
        let flat = tape.flatten(map);
        for b in undesired {
            let cos = tape.cosine_similarity(flat, b)?;
            let term = tape.scale(cos, lb);
            acc = tape.add(acc, term)?;
        }
        for g in desired {
            let cos = tape.cosine_similarity(flat, g)?;
            let term = tape.scale(cos, lg);
            acc = tape.add(acc, term)?;
        }
    }
    Ok(acc)
}

/// Plain value of the loss, mirroring the tape accumulation order exactly.
pub fn semantic_similarity_value<T: Scalar>(
    feature_maps: &Tensor<T>,
    undesired: &[Tensor<T>],
    desired: &[Tensor<T>],
    loss: &LossParams,
) -> Result<T> {
    let k = feature_maps.shape()[0];
    let plane: usize = feature_maps.shape()[1..].iter().product();
    let lb = T::from_f64(loss.lambda_b);
    let lg = T::from_f64(-loss.lambda_g);
    let mut acc = T::zero();
    for j in 0..k {
        let flat = &feature_maps.data()[j * plane..(j + 1) * plane];
        for b in undesired {
            acc = acc + crate::ops::cosine_similarity(flat, b.data())? * lb;
        }
        for g in desired {
            acc = acc + crate::ops::cosine_similarity(flat, g.data())? * lg;
        }
    }
    Ok(acc)
}

/// [`AuxLoss`] adapter: bank vectors pre-cast to the training precision and
/// grouped by class index.
pub struct SemanticLossAux<T: Scalar> {
    per_class: Vec<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
    params: LossParams,
}

impl<T: Scalar> SemanticLossAux<T> {
    pub fn new(bank: &ConceptBank, class_names: &[String], params: LossParams) -> Self {
        let per_class = class_names
            .iter()
            .map(|name| match bank.by_class.get(name) {
                Some(cb) => (
                    cb.undesired.iter().map(|v| tensor_from_f64::<T>(&v.values)).collect(),
                    cb.desired.iter().map(|v| tensor_from_f64::<T>(&v.values)).collect(),
                ),
                None => (Vec::new(), Vec::new()),
            })
            .collect();
        SemanticLossAux { per_class, params }
    }
}

fn tensor_from_f64<T: Scalar>(values: &[f64]) -> Tensor<T> {
    Tensor::new(vec![values.len()], values.iter().map(|&v| T::from_f64(v)).collect())
        .expect("bank vector tensor")
}

impl<T: Scalar> AuxLoss<T> for SemanticLossAux<T> {
    fn loss(&self, tape: &mut Tape<T>, feature_maps: Var, label: usize) -> Result<Var> {
        let (undesired, desired) = self
            .per_class
            .get(label)
            .ok_or_else(|| Error::invalid("semantic_similarity_loss", format!("label {label} has no bank")))?;
        semantic_similarity_loss(tape, feature_maps, undesired, desired, &self.params)
    }
}

/// Metric snapshot taken at each recalibration.
#[derive(Clone, Debug)]
pub struct RecalSnapshot {
    pub epoch: usize,
    pub pct_undesired: f64,
    pub pct_desired: f64,
    pub coverage: f64,
    pub unique_predicates: usize,
    pub size: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CorrectionHistory {
    pub epochs: Vec<EpochStats>,
    pub recalibrations: Vec<RecalSnapshot>,
}

/// Everything the correction loop needs besides the model.
pub struct CorrectionContext<'a, T: Scalar> {
    pub train: &'a TensorDataset<T>,
    pub val: Option<&'a TensorDataset<T>>,
    pub masks: &'a [SegMask],
    pub vocab: &'a Vocabulary,
    pub class_names: &'a [String],
    pub constraints: &'a ConstraintSet,
    pub fold: FoldParams,
    pub binarizer: BinarizerParams,
    pub labels: LabelParams,
}

pub struct CorrectionOutcome<T: Scalar> {
    pub model: CnnModel<T>,
    pub initial: Extraction,
    pub fin: Extraction,
    pub history: CorrectionHistory,
}

fn snapshot_metrics(
    ex: &Extraction,
    constraints: &ConstraintSet,
    epoch: usize,
) -> Result<RecalSnapshot> {
    let binding = crate::fold::PredicateBinding::from_label_positions(&ex.label_map);
    let (pct_undesired, pct_desired, coverage) =
        metrics::percent_undesired_desired(&ex.labelled, &ex.table, constraints, &binding)?;
    let (unique_predicates, size) = metrics::ruleset_size_stats(&ex.labelled);
    Ok(RecalSnapshot { epoch, pct_undesired, pct_desired, coverage, unique_predicates, size })
}

/// The full retraining loop: extract and label the initial rule-set, build
/// the concept bank, retrain with cross-entropy plus the similarity loss,
/// re-extract and recalibrate every `cfg.period` epochs, and return the
/// final extraction alongside the history.
pub fn correct_bias<T: Scalar>(
    model: CnnModel<T>,
    ctx: &CorrectionContext<'_, T>,
    tc: &TrainConfig,
    cfg: &CorrectionConfig,
) -> Result<CorrectionOutcome<T>> {
    cfg.validate()?;
    let initial = extract_ruleset(
        &model,
        ctx.train,
        ctx.masks,
        ctx.vocab,
        ctx.class_names,
        &ctx.fold,
        &ctx.binarizer,
        &ctx.labels,
    )?;
    let mut bank = build_concept_bank(
        ctx.constraints,
        &initial.ruleset,
        &initial.label_map,
        &model,
        ctx.train,
        &initial.norm_table,
        cfg.top_images,
    )?;
    if bank.is_empty() {
        log::warn!("concept bank is empty; retraining reduces to plain cross-entropy");
    }

    let mut trainer = Trainer::new(model, tc.clone())?;
    let mut history = CorrectionHistory::default();
    let mut last_extraction: Option<Extraction> = None;
    for epoch in 1..=cfg.epochs {
        let aux = SemanticLossAux::<T>::new(&bank, ctx.class_names, cfg.loss);
        trainer.run_epoch(ctx.train, ctx.val, Some(&aux))?;
        history.epochs.push(trainer.history.last().unwrap().clone());
        if epoch % cfg.period == 0 || epoch == cfg.epochs {
            let ex = extract_ruleset(
                &trainer.model,
                ctx.train,
                ctx.masks,
                ctx.vocab,
                ctx.class_names,
                &ctx.fold,
                &ctx.binarizer,
                &ctx.labels,
            )?;
            history.recalibrations.push(snapshot_metrics(&ex, ctx.constraints, epoch)?);
            let fresh = build_concept_bank(
                ctx.constraints,
                &ex.ruleset,
                &ex.label_map,
                &trainer.model,
                ctx.train,
                &ex.norm_table,
                cfg.top_images,
            )?;
            bank = recalibrate(&bank, &fresh)?;
            last_extraction = Some(ex);
        }
    }
    let fin = last_extraction.expect("epochs >= period guarantees an extraction");
    Ok(CorrectionOutcome { model: trainer.model, initial, fin, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(concept: &str, class: &str, values: Vec<f64>) -> ConceptVector {
        ConceptVector { concept: concept.into(), class: class.into(), values, filters: vec![0] }
    }

    #[test]
    fn constraints_reject_overlap() {
        let text = "[classes.meadow]\nundesired = [\"beacon\"]\ndesired = [\"beacon\"]\n";
        assert!(ConstraintSet::parse_toml(text).is_err());
        let ok = "[classes.meadow]\nundesired = [\"beacon\"]\ndesired = [\"grass\"]\n";
        let cs = ConstraintSet::parse_toml(ok).unwrap();
        assert_eq!(cs.for_class("meadow").unwrap().undesired, vec!["beacon"]);
    }

    #[test]
    fn positively_associated_direct_non_negated_only() {
        let rs = crate::fold::parse_ruleset(
            "target(X,'c') :- sky1(X), not road1(X), not ab1(X).\nab1(X) :- road2(X).\ntarget(X,'d') :- road3(X).\n",
        )
        .unwrap();
        let assoc = positively_associated(&rs, "c");
        assert!(assoc.contains("sky1"));
        assert!(!assoc.contains("road1"), "negated literal is not positively linked");
        assert!(!assoc.contains("road2"), "abnormality bodies are excluded");
        assert!(!assoc.contains("road3"), "other classes are excluded");
    }

    #[test]
    fn recalibrate_means_adopts_and_retains() {
        let mut old = ConceptBank::default();
        old.by_class.insert(
            "c".into(),
            ClassBank {
                undesired: vec![cv("sky", "c", vec![0.0, 2.0]), cv("tree", "c", vec![1.0, 1.0])],
                desired: vec![],
            },
        );
        let mut new = ConceptBank::default();
        new.by_class.insert(
            "c".into(),
            ClassBank {
                undesired: vec![cv("sky", "c", vec![2.0, 0.0]), cv("road", "c", vec![5.0, 5.0])],
                desired: vec![],
            },
        );
        let merged = recalibrate(&old, &new).unwrap();
        let u = &merged.by_class["c"].undesired;
        assert_eq!(u.iter().find(|v| v.concept == "sky").unwrap().values, vec![1.0, 1.0]);
        assert_eq!(u.iter().find(|v| v.concept == "tree").unwrap().values, vec![1.0, 1.0]);
        assert_eq!(u.iter().find(|v| v.concept == "road").unwrap().values, vec![5.0, 5.0]);
    }

    #[test]
    fn recalibrate_is_idempotent_on_identical_banks() {
        let mut bank = ConceptBank::default();
        bank.by_class.insert(
            "c".into(),
            ClassBank { undesired: vec![cv("sky", "c", vec![0.25, -1.5, 3.0])], desired: vec![] },
        );
        let merged = recalibrate(&bank, &bank).unwrap();
        assert_eq!(merged, bank);
    }

    #[test]
    fn recalibrate_rejects_dimension_mismatch() {
        let mut old = ConceptBank::default();
        old.by_class.insert(
            "c".into(),
            ClassBank { undesired: vec![cv("sky", "c", vec![1.0, 2.0])], desired: vec![] },
        );
        let mut new = ConceptBank::default();
        new.by_class.insert(
            "c".into(),
            ClassBank { undesired: vec![cv("sky", "c", vec![1.0])], desired: vec![] },
        );
        assert!(recalibrate(&old, &new).is_err());
    }

    #[test]
    fn similarity_loss_hand_value() {
        // one filter, r = (1,0); B = {(0,1)}, G = {(1,0)}:
        // 0.05 * cos((1,0),(0,1)) - 0.001 * cos((1,0),(1,0)) = -0.001
        let mut tape = Tape::<f64>::new();
        let maps = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let b = vec![Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()];
        let params = LossParams { lambda_b: 0.05, lambda_g: 0.001 };
        let loss = semantic_similarity_loss(&mut tape, maps, &b, &g, &params).unwrap();
        assert!((tape.value(loss).scalar_value() + 0.001).abs() < 1e-15);

        // the pure value mirrors the tape exactly
        let value = semantic_similarity_value(
            &Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
            &b,
            &g,
            &params,
        )
        .unwrap();
        assert_eq!(value, tape.value(loss).scalar_value());
    }

    #[test]
    fn similarity_loss_empty_bank_is_zero() {
        let mut tape = Tape::<f64>::new();
        let maps = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let loss = semantic_similarity_loss(
            &mut tape,
            maps,
            &[],
            &[],
            &LossParams { lambda_b: 0.05, lambda_g: 0.001 },
        )
        .unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn duplicating_a_bank_vector_doubles_its_term() {
        let maps = Tensor::<f64>::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let v = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let params = LossParams { lambda_b: 0.05, lambda_g: 0.0 };
        let single = semantic_similarity_value(&maps, std::slice::from_ref(&v), &[], &params).unwrap();
        let double =
            semantic_similarity_value(&maps, &[v.clone(), v.clone()], &[], &params).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-15);
    }

    #[test]
    fn similarity_loss_is_scale_invariant_in_bank_vectors() {
        let maps = Tensor::<f64>::new(vec![1, 2, 2], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let v = Tensor::new(vec![4], vec![0.5, 0.25, -1.0, 2.0]).unwrap();
        let scaled = v.map(|x| x * 37.5);
        let params = LossParams { lambda_b: 0.05, lambda_g: 0.001 };
        let a = semantic_similarity_value(&maps, std::slice::from_ref(&v), &[], &params).unwrap();
        let b = semantic_similarity_value(&maps, &[scaled], &[], &params).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn similarity_gradient_matches_finite_differences() {
        // toy model contract: 1 image, K = 2 filters of 2x2 maps, f64
        use crate::gradcheck::finite_diff_check;
        let b = vec![Tensor::new(vec![4], vec![0.4, -0.3, 0.8, 0.1]).unwrap()];
        let g = vec![Tensor::new(vec![4], vec![-0.2, 0.9, 0.05, 0.5]).unwrap()];
        let params = LossParams { lambda_b: 5e-2, lambda_g: 1e-3 };
        let x = Tensor::new(
            vec![2, 2, 2],
            vec![0.7, -0.4, 0.2, 0.9, -0.6, 0.3, 0.5, -0.1],
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let maps = tape.leaf(x.clone());
        let loss = semantic_similarity_loss(&mut tape, maps, &b, &g, &params).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(maps).clone();
        let mut f = |t: &Tensor<f64>| semantic_similarity_value(t, &b, &g, &params).unwrap();
        let err = finite_diff_check(&mut f, &x, &analytic, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
