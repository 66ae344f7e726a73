//! Rule-set evaluation: accuracy, fidelity to the network, predicate counts,
//! rule-set size, and the share of covered images classified through
//! undesired or desired concepts.

use std::collections::BTreeSet;

use crate::binarize::{binarize_image, BinarizationTable, Thresholds};
use crate::bias::ConstraintSet;
use crate::cnn::{CnnModel, TensorDataset};
use crate::error::{Error, Result};
use crate::fold::{classify, Head, Pred, PredicateBinding, RuleSet};
use crate::semlabel::name_tokens;
use crate::tensor::Scalar;

/// One evaluation row: fidelity, accuracy, unique predicate count, size,
/// undesired/desired decision-path shares and coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub fidelity: f64,
    pub accuracy: f64,
    pub unique_predicates: usize,
    pub size: usize,
    pub pct_undesired: f64,
    pub pct_desired: f64,
    pub coverage: f64,
}

impl MetricsRecord {
    pub fn csv_header() -> &'static str {
        "fidelity,accuracy,predicates,size,pct_undesired,pct_desired,coverage"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
            self.fidelity,
            self.accuracy,
            self.unique_predicates,
            self.size,
            self.pct_undesired,
            self.pct_desired,
            self.coverage
        )
    }
}

/// Non-negated filter predicates in the fired rule's direct body; `None` on
/// abstention.
pub fn decision_path(
    rs: &RuleSet,
    binvec: &[bool],
    binding: &PredicateBinding,
) -> Result<Option<BTreeSet<String>>> {
    let Some((_, rule_idx)) = classify(rs, binvec, binding)? else {
        return Ok(None);
    };
    let mut path = BTreeSet::new();
    for lit in &rs.rules[rule_idx].body {
        if let Pred::Filter(name) = &lit.pred {
            if !lit.negated {
                path.insert(name.clone());
            }
        }
    }
    Ok(Some(path))
}

/// Over the covered (non-abstaining) rows of the table: the fraction whose
/// decision path carries an undesired concept for the fired class, then —
/// only among the remainder — the fraction with a desired concept. Returns
/// `(pct_undesired, pct_desired, coverage)`.
pub fn percent_undesired_desired(
    rs: &RuleSet,
    table: &BinarizationTable,
    constraints: &ConstraintSet,
    binding: &PredicateBinding,
) -> Result<(f64, f64, f64)> {
    let mut covered = 0usize;
    let mut undesired = 0usize;
    let mut desired = 0usize;
    for i in 0..table.n {
        let Some((class, rule_idx)) = classify(rs, table.row(i), binding)? else {
            continue;
        };
        covered += 1;
        let Some(cc) = constraints.for_class(class) else {
            continue;
        };
        let mut path_tokens = BTreeSet::new();
        for lit in &rs.rules[rule_idx].body {
            if let Pred::Filter(name) = &lit.pred {
                if !lit.negated {
                    path_tokens.extend(name_tokens(name));
                }
            }
        }
        if cc.undesired.iter().any(|u| path_tokens.contains(u)) {
            undesired += 1;
        } else if cc.desired.iter().any(|d| path_tokens.contains(d)) {
            desired += 1;
        }
    }
    if covered == 0 {
        return Ok((0.0, 0.0, 0.0));
    }
    Ok((
        undesired as f64 / covered as f64,
        desired as f64 / covered as f64,
        covered as f64 / table.n as f64,
    ))
}

/// Rule-set prediction for one image: classify its binarized activations,
/// falling back to `fallback` on abstention.
pub fn rule_predict<T: Scalar>(
    rs: &RuleSet,
    binding: &PredicateBinding,
    model: &CnnModel<T>,
    image: &crate::tensor::Tensor<T>,
    th: &Thresholds,
    class_names: &[String],
    fallback: usize,
) -> Result<usize> {
    let binvec = binarize_image(model, image, th)?;
    match classify(rs, &binvec, binding)? {
        Some((class, _)) => class_names
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::UnknownPredicate(format!("class `{class}` not in dataset"))),
        None => Ok(fallback),
    }
}

/// Fraction of images where the rule-set prediction matches the CNN's.
#[allow(clippy::too_many_arguments)]
pub fn fidelity<T: Scalar>(
    rs: &RuleSet,
    binding: &PredicateBinding,
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    th: &Thresholds,
    class_names: &[String],
    fallback: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("fidelity over an empty dataset".into()));
    }
    let mut agree = 0usize;
    for image in &data.images {
        let rule = rule_predict(rs, binding, model, image, th, class_names, fallback)?;
        if rule == model.predict(image)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / data.len() as f64)
}

/// Fraction of images where the rule-set prediction matches the label.
#[allow(clippy::too_many_arguments)]
pub fn rule_accuracy<T: Scalar>(
    rs: &RuleSet,
    binding: &PredicateBinding,
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    th: &Thresholds,
    class_names: &[String],
    fallback: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("accuracy over an empty dataset".into()));
    }
    let mut hit = 0usize;
    for (image, &label) in data.images.iter().zip(data.labels.iter()) {
        if rule_predict(rs, binding, model, image, th, class_names, fallback)? == label {
            hit += 1;
        }
    }
    Ok(hit as f64 / data.len() as f64)
}

/// `(unique filter predicates, total body literals)`. Abnormality predicates
/// count towards size (as body occurrences) but not towards uniqueness.
pub fn ruleset_size_stats(rs: &RuleSet) -> (usize, usize) {
    let mut unique = BTreeSet::new();
    let mut size = 0usize;
    for rule in &rs.rules {
        for lit in &rule.body {
            size += 1;
            if let Pred::Filter(name) = &lit.pred {
                unique.insert(name.clone());
            }
        }
    }
    (unique.len(), size)
}

/// Convenience check used by reports: true when `rs` contains a rule head
/// for every listed class.
pub fn covers_all_classes(rs: &RuleSet, class_names: &[String]) -> bool {
    class_names.iter().all(|c| rs.rules.iter().any(|r| r.head == Head::Target(c.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::raw_filter_name;
    use crate::bias::{ClassConstraints, ConstraintSet};
    use crate::fold::parse_ruleset;

    fn constraints(class: &str, undesired: &[&str], desired: &[&str]) -> ConstraintSet {
        let mut cs = ConstraintSet::default();
        cs.classes.insert(
            class.to_string(),
            ClassConstraints {
                undesired: undesired.iter().map(|s| s.to_string()).collect(),
                desired: desired.iter().map(|s| s.to_string()).collect(),
            },
        );
        cs
    }

    fn table(rows: Vec<Vec<bool>>, labels: Vec<usize>, classes: &[&str], names: &[&str]) -> BinarizationTable {
        BinarizationTable::from_rows(
            rows,
            labels,
            classes.iter().map(|s| s.to_string()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn decision_path_cases() {
        let rs = parse_ruleset(
            "target(X,'c') :- ground1_road1(X).\ntarget(X,'d') :- not x1(X).\ntarget(X,'e') :- sky1(X), not ab1(X).\nab1(X) :- x1(X).\n",
        )
        .unwrap();
        let binding =
            PredicateBinding::from_names(&["ground1_road1", "x1", "sky1"]);
        // fired rule with one positive literal
        let p = decision_path(&rs, &[true, false, false], &binding).unwrap().unwrap();
        assert_eq!(p.into_iter().collect::<Vec<_>>(), vec!["ground1_road1"]);
        // fired rule with only negated literals has an empty path
        let p = decision_path(&rs, &[false, false, false], &binding).unwrap().unwrap();
        assert!(p.is_empty());
        // abnormality literals are excluded from the path
        let rs2 = parse_ruleset("target(X,'e') :- sky1(X), not ab1(X).\nab1(X) :- x1(X).\n").unwrap();
        let binding2 = PredicateBinding::from_names(&["sky1", "x1"]);
        let p = decision_path(&rs2, &[true, false], &binding2).unwrap().unwrap();
        assert_eq!(p.into_iter().collect::<Vec<_>>(), vec!["sky1"]);
    }

    #[test]
    fn percent_metrics_hand_counts() {
        // 4 covered images: 1 undesired path, 2 of the remaining have desired
        let rs = parse_ruleset(
            "target(X,'c') :- sky1(X).\ntarget(X,'c') :- grass1(X).\ntarget(X,'c') :- not other1(X).\n",
        )
        .unwrap();
        let t = table(
            vec![
                vec![true, false, false],  // sky -> undesired
                vec![false, true, false],  // grass -> desired
                vec![false, true, false],  // grass -> desired
                vec![false, false, false], // neither (fires rule 3, empty path)
            ],
            vec![0, 0, 0, 0],
            &["c"],
            &["sky1", "grass1", "other1"],
        );
        let binding = PredicateBinding::from_names(&["sky1", "grass1", "other1"]);
        let cs = constraints("c", &["sky"], &["grass"]);
        let (u, d, cov) = percent_undesired_desired(&rs, &t, &cs, &binding).unwrap();
        assert_eq!((u, d, cov), (0.25, 0.5, 1.0));
    }

    #[test]
    fn undesired_takes_precedence_over_desired() {
        let rs = parse_ruleset("target(X,'c') :- sky1(X), grass1(X).\n").unwrap();
        let t = table(
            vec![vec![true, true], vec![false, true]],
            vec![0, 0],
            &["c"],
            &["sky1", "grass1"],
        );
        let binding = PredicateBinding::from_names(&["sky1", "grass1"]);
        let cs = constraints("c", &["sky"], &["grass"]);
        let (u, d, cov) = percent_undesired_desired(&rs, &t, &cs, &binding).unwrap();
        assert_eq!(u, 1.0);
        assert_eq!(d, 0.0);
        assert_eq!(cov, 0.5);
    }

    #[test]
    fn no_matching_tokens_gives_zeros() {
        let rs = parse_ruleset("target(X,'c') :- blob1(X).\n").unwrap();
        let t = table(vec![vec![true]], vec![0], &["c"], &["blob1"]);
        let binding = PredicateBinding::from_names(&["blob1"]);
        let cs = constraints("c", &["sky"], &["grass"]);
        let (u, d, cov) = percent_undesired_desired(&rs, &t, &cs, &binding).unwrap();
        assert_eq!((u, d, cov), (0.0, 0.0, 1.0));
    }

    #[test]
    fn size_stats_counts() {
        let rs = parse_ruleset("target(X,'c') :- f1(X), not f2(X).\n").unwrap();
        assert_eq!(ruleset_size_stats(&rs), (2, 2));
        let rs = parse_ruleset(
            "target(X,'c') :- f1(X), not ab1(X).\ntarget(X,'d') :- f1(X).\nab1(X) :- f2(X).\n",
        )
        .unwrap();
        // f1 counts once in unique, ab1 counts in size only
        assert_eq!(ruleset_size_stats(&rs), (2, 4));
        let rs = parse_ruleset(
            "target(X,'a') :- p1(X).\ntarget(X,'b') :- p2(X).\ntarget(X,'a') :- p3(X).\ntarget(X,'b') :- p4(X).\n",
        )
        .unwrap();
        assert_eq!(ruleset_size_stats(&rs), (4, 4));
    }

    #[test]
    fn metrics_invariant_under_consistent_renaming() {
        let rs = parse_ruleset("target(X,'c') :- sky1(X).\ntarget(X,'c') :- not sky1(X), grass1(X).\n").unwrap();
        let t = table(
            vec![vec![true, false], vec![false, true], vec![false, false]],
            vec![0, 0, 0],
            &["c"],
            &["sky1", "grass1"],
        );
        let binding = PredicateBinding::from_names(&["sky1", "grass1"]);
        let cs = constraints("c", &["sky"], &["grass"]);
        let before = percent_undesired_desired(&rs, &t, &cs, &binding).unwrap();

        let mut rename = std::collections::BTreeMap::new();
        rename.insert("sky1".to_string(), "cloud1".to_string());
        rename.insert("grass1".to_string(), "turf1".to_string());
        let rs2 = rs.rename_filters(&rename);
        let binding2 = PredicateBinding::from_names(&["cloud1", "turf1"]);
        let cs2 = constraints("c", &["cloud"], &["turf"]);
        let after = percent_undesired_desired(&rs2, &t, &cs2, &binding2).unwrap();
        assert_eq!(before, after);
        assert_eq!(ruleset_size_stats(&rs), ruleset_size_stats(&rs2));
    }

    #[test]
    fn fidelity_against_model_predictions() {
        use crate::binarize::{build_norm_table, compute_thresholds, BinarizerParams};
        use crate::cnn::{build_model, CnnConfig};
        use crate::tensor::Tensor;
        let model = build_model::<f64>(&CnnConfig {
            input_size: 8,
            channels: 1,
            blocks: vec![4],
            k: 4,
            classes: 2,
            seed: 31,
        })
        .unwrap();
        let mut ds = TensorDataset::default();
        for i in 0..6 {
            let v = (i as f64 + 1.0) / 7.0;
            ds.images.push(Tensor::new(vec![1, 8, 8], vec![v; 64]).unwrap());
            ds.labels.push(i % 2);
        }
        let nt = build_norm_table(&model, &ds).unwrap();
        let th = compute_thresholds(&nt, &BinarizerParams::default());
        let class_names = vec!["a".to_string(), "b".to_string()];
        // a rule-set that abstains always, fallback = class 0: fidelity equals
        // the share of images the CNN itself assigns to class 0
        let rs = parse_ruleset(&format!("target(X,'b') :- {}(X), not {}(X).\n", raw_filter_name(0), raw_filter_name(0))).unwrap();
        let binding = PredicateBinding::raw(4);
        let fid = fidelity(&rs, &binding, &model, &ds, &th, &class_names, 0).unwrap();
        let cnn_zero_rate = ds
            .images
            .iter()
            .filter(|img| model.predict(img).unwrap() == 0)
            .count() as f64
            / ds.len() as f64;
        assert!((fid - cnn_zero_rate).abs() < 1e-12);

        let empty = TensorDataset::<f64>::default();
        assert!(fidelity(&rs, &binding, &model, &empty, &th, &class_names, 0).is_err());
    }
}
