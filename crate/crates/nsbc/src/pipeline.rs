//! Norms -> thresholds -> binarization -> rule induction -> labelling, as one
//! step shared by extraction, recalibration and the CLI.

use crate::binarize::{binarize, build_norm_table, compute_thresholds, BinarizationTable, BinarizerParams, NormTable, Thresholds};
use crate::cnn::{CnnModel, TensorDataset};
use crate::error::Result;
use crate::fold::{learn_ruleset, FoldParams, RuleSet};
use crate::semlabel::{label_all, LabelMap, LabelParams, SegMask, Vocabulary};
use crate::tensor::Scalar;

/// One full extraction from a trained model.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub norm_table: NormTable,
    pub thresholds: Thresholds,
    pub table: BinarizationTable,
    /// Raw rule-set over `f<k>` predicates.
    pub ruleset: RuleSet,
    pub label_map: LabelMap,
    /// Rule-set with predicates renamed through the label map.
    pub labelled: RuleSet,
}

#[allow(clippy::too_many_arguments)]
pub fn extract_ruleset<T: Scalar>(
    model: &CnnModel<T>,
    train: &TensorDataset<T>,
    masks: &[SegMask],
    vocab: &Vocabulary,
    class_names: &[String],
    fold: &FoldParams,
    binarizer: &BinarizerParams,
    labels: &LabelParams,
) -> Result<Extraction> {
    let norm_table = build_norm_table(model, train)?;
    let thresholds = compute_thresholds(&norm_table, binarizer);
    let table = binarize(&norm_table, &thresholds, class_names)?;
    let ruleset = learn_ruleset(&table, fold)?;
    let label_map = label_all(model, train, masks, vocab, &norm_table, &ruleset, labels)?;
    let labelled = ruleset.rename_filters(&label_map.rename_map());
    Ok(Extraction { norm_table, thresholds, table, ruleset, label_map, labelled })
}

/// Thresholds CSV: `filter,theta` rows.
pub fn thresholds_to_csv(th: &Thresholds) -> String {
    let mut out = String::from("filter,theta\n");
    for (i, t) in th.0.iter().enumerate() {
        out.push_str(&format!("{},{}\n", crate::binarize::raw_filter_name(i), t));
    }
    out
}

pub fn thresholds_from_csv(text: &str) -> Result<Thresholds> {
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (_, v) = line.split_once(',').ok_or_else(|| crate::error::Error::Parse {
            line: lineno + 1,
            col: 1,
            msg: "threshold line must be `filter,theta`".into(),
        })?;
        values.push(v.trim().parse::<f64>().map_err(|_| crate::error::Error::Parse {
            line: lineno + 1,
            col: 1,
            msg: format!("invalid threshold `{v}`"),
        })?);
    }
    Ok(Thresholds(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_csv_roundtrip() {
        let th = Thresholds(vec![0.5, 1.25, 7.75e-3]);
        let back = thresholds_from_csv(&thresholds_to_csv(&th)).unwrap();
        assert_eq!(back, th);
    }
}
