//! Names rule predicates after the concepts their filters look at: each
//! filter's high-activation region (bilinear-upsampled feature map cut at a
//! percentile) is intersected with ground-truth segmentation masks, IoU
//! scores are averaged over the filter's top-m images, and the winning
//! concept(s) become the predicate name.

use std::collections::BTreeMap;

use crate::binarize::{raw_filter_name, NormTable};
use crate::cnn::{CnnModel, TensorDataset};
use crate::error::{Error, Result};
use crate::fold::RuleSet;
use crate::tensor::Scalar;

/// Per-pixel concept identifiers for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub side: usize,
    pub ids: Vec<u8>,
}

impl SegMask {
    pub fn new(side: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != side * side {
            return Err(Error::shape(
                "seg_mask",
                format!("{} ids for a {side}x{side} mask", ids.len()),
            ));
        }
        Ok(SegMask { side, ids })
    }

    pub fn validate_against(&self, vocab: &Vocabulary) -> Result<()> {
        for &id in &self.ids {
            if !vocab.contains(id) {
                return Err(Error::Dataset(format!("mask pixel id {id} missing from vocabulary")));
            }
        }
        Ok(())
    }
}

/// Concept id to name mapping (`id,name` per line on disk).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: BTreeMap<u8, String>,
}

impl Vocabulary {
    pub fn new(names: BTreeMap<u8, String>) -> Self {
        Vocabulary { names }
    }

    pub fn contains(&self, id: u8) -> bool {
        self.names.contains_key(&id)
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(&id).map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &str)> {
        self.names.iter().map(|(&id, name)| (id, name.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id_str, name) = line.split_once(',').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                col: 1,
                msg: "vocabulary line must be `id,name`".into(),
            })?;
            let id: u8 = id_str.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                col: 1,
                msg: format!("invalid concept id `{id_str}`"),
            })?;
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Parse {
                    line: lineno + 1,
                    col: 1,
                    msg: format!("invalid concept name `{name}`"),
                });
            }
            if names.insert(id, name.to_string()).is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    col: 1,
                    msg: format!("duplicate concept id {id}"),
                });
            }
        }
        Ok(Vocabulary { names })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, name) in &self.names {
            out.push_str(&format!("{id},{name}\n"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LabelParams {
    /// Top-image count per filter.
    pub top_m: usize,
    /// Activation percentile for the mask cut, in (0,100).
    pub percentile: f64,
    /// Secondary concepts join the name when their score is >= beta * top.
    pub beta: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        LabelParams { top_m: 10, percentile: 95.0, beta: 0.8 }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_m < 1 {
            return Err(Error::Config("labels.top_m must be >= 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::Config("labels.percentile must lie in (0,100)".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config("labels.beta must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Indices of the `m` largest norms in a filter's column, descending, ties by
/// lower image index.
pub fn top_m_images(nt: &NormTable, filter: usize, m: usize) -> Result<Vec<usize>> {
    if m > nt.n {
        return Err(Error::invalid(
            "top_m_images",
            format!("m = {m} exceeds the {} available images", nt.n),
        ));
    }
    let mut idx: Vec<usize> = (0..nt.n).collect();
    idx.sort_by(|&a, &b| {
        nt.get(b, filter)
            .partial_cmp(&nt.get(a, filter))
            .expect("norms are finite")
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(idx)
}

/// Bilinear upsampling with half-pixel sample positions, clamped at borders.
pub fn bilinear_upsample(map: &[f64], side: usize, out_side: usize) -> Vec<f64> {
    debug_assert_eq!(map.len(), side * side);
    let mut out = vec![0.0; out_side * out_side];
    let scale = side as f64 / out_side as f64;
    let coords: Vec<(usize, usize, f64)> = (0..out_side)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(side - 1);
            (lo, hi, s - lo as f64)
        })
        .collect();
    for (oy, &(y0, y1, fy)) in coords.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in coords.iter().enumerate() {
            let v = (1.0 - fy) * (1.0 - fx) * map[y0 * side + x0]
                + (1.0 - fy) * fx * map[y0 * side + x1]
                + fy * (1.0 - fx) * map[y1 * side + x0]
                + fy * fx * map[y1 * side + x1];
            out[oy * out_side + ox] = v;
        }
    }
    out
}

/// Nearest-rank percentile of a non-empty slice.
fn percentile_threshold(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Upsample a feature map to image resolution and keep the pixels at or above
/// the q-th percentile. An all-zero map yields an empty mask.
pub fn filter_mask(map: &[f64], map_side: usize, image_side: usize, q: f64) -> Vec<bool> {
    if map.iter().all(|&v| v == 0.0) {
        return vec![false; image_side * image_side];
    }
    let up = bilinear_upsample(map, map_side, image_side);
    let thr = percentile_threshold(&up, q);
    up.iter().map(|&v| v >= thr).collect()
}

/// IoU per concept id visible under the mask; ids with empty intersection are
/// omitted.
pub fn iou_scores(mask: &[bool], seg: &SegMask) -> Result<BTreeMap<u8, f64>> {
    if mask.len() != seg.ids.len() {
        return Err(Error::shape(
            "iou_scores",
            format!("mask has {} pixels, segmentation {}", mask.len(), seg.ids.len()),
        ));
    }
    let mut region = BTreeMap::<u8, usize>::new();
    let mut inter = BTreeMap::<u8, usize>::new();
    let mut mask_count = 0usize;
    for (i, &id) in seg.ids.iter().enumerate() {
        *region.entry(id).or_default() += 1;
        if mask[i] {
            mask_count += 1;
            *inter.entry(id).or_default() += 1;
        }
    }
    let mut out = BTreeMap::new();
    for (&id, &i) in &inter {
        if i > 0 {
            let r = region[&id];
            out.insert(id, i as f64 / (r + mask_count - i) as f64);
        }
    }
    Ok(out)
}

/// One labelled filter: the unique predicate name, the concept tokens used in
/// it, and the full scored concept list (descending).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEntry {
    pub filter: usize,
    pub name: String,
    pub concepts: Vec<String>,
    pub scores: Vec<(String, f64)>,
}

/// Filter index -> predicate name mapping for a rule-set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelMap {
    pub entries: Vec<LabelEntry>,
}

impl LabelMap {
    pub fn name_of(&self, filter: usize) -> Option<&str> {
        self.entries.iter().find(|e| e.filter == filter).map(|e| e.name.as_str())
    }

    pub fn filter_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.filter)
    }

    /// Raw predicate name -> labelled name, for printing and renaming.
    pub fn rename_map(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|e| (raw_filter_name(e.filter), e.name.clone()))
            .collect()
    }

    /// `filter,name,scores` per line, scores as `concept:value` pairs
    /// separated by `|`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filter,name,scores\n");
        for e in &self.entries {
            let scores: Vec<String> =
                e.scores.iter().map(|(c, s)| format!("{c}:{s:.6}")).collect();
            out.push_str(&format!("{},{},{}\n", e.filter, e.name, scores.join("|")));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let parse_err = |msg: String| Error::Parse { line: lineno + 1, col: 1, msg };
            let filter: usize = parts
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| parse_err("invalid filter index".into()))?;
            let name = parts
                .next()
                .ok_or_else(|| parse_err("missing predicate name".into()))?
                .trim()
                .to_string();
            if name.is_empty() {
                return Err(parse_err("empty predicate name".into()));
            }
            let mut scores = Vec::new();
            if let Some(rest) = parts.next() {
                for pair in rest.split('|').filter(|p| !p.trim().is_empty()) {
                    let (c, s) = pair
                        .split_once(':')
                        .ok_or_else(|| parse_err(format!("invalid score pair `{pair}`")))?;
                    let v: f64 = s
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(format!("invalid score `{s}`")))?;
                    scores.push((c.trim().to_string(), v));
                }
            }
            let concepts = name_tokens(&name);
            entries.push(LabelEntry { filter, name, concepts, scores });
        }
        Ok(LabelMap { entries })
    }
}

/// Concept tokens of a predicate name: split at `_`, strip the trailing
/// counter digits of each part (`cabinet1_wall12` -> `cabinet`, `wall`).
pub fn name_tokens(name: &str) -> Vec<String> {
    name.split('_')
        .map(|part| part.trim_end_matches(|c: char| c.is_ascii_digit()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Mean IoU per concept over the filter's top-m images, descending score.
pub fn label_filter<T: Scalar>(
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    masks: &[SegMask],
    vocab: &Vocabulary,
    nt: &NormTable,
    filter: usize,
    params: &LabelParams,
) -> Result<Vec<(String, f64)>> {
    params.validate()?;
    let m_eff = params.top_m.min(nt.n);
    if m_eff < params.top_m {
        log::warn!(
            "labelling filter {filter}: only {} images available for top-{}",
            nt.n,
            params.top_m
        );
    }
    let top = top_m_images(nt, filter, m_eff)?;
    let side = model.config.feature_map_side();
    let plane = model.config.feature_map_len();
    let image_side = model.config.input_size;
    let mut sums = BTreeMap::<u8, f64>::new();
    for &i in &top {
        let seg = masks
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("missing segmentation mask for image {i}")))?;
        let (maps, _) = model.forward(&data.images[i])?;
        let map: Vec<f64> =
            maps.data()[filter * plane..(filter + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let mask = filter_mask(&map, side, image_side, params.percentile);
        for (id, iou) in iou_scores(&mask, seg)? {
            *sums.entry(id).or_default() += iou;
        }
    }
    let mut scored: Vec<(String, f64)> = sums
        .into_iter()
        .filter(|&(_, s)| s > 0.0)
        .map(|(id, s)| {
            let name = vocab
                .name(id)
                .ok_or_else(|| Error::Dataset(format!("concept id {id} missing from vocabulary")))?;
            Ok((name.to_string(), s / m_eff as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Label every filter whose predicate occurs in the rule-set. Counters run
/// per concept across all labelled filters, in ascending filter order, so
/// two sky-dominated filters become `sky1` and `sky2`.
pub fn label_all<T: Scalar>(
    model: &CnnModel<T>,
    data: &TensorDataset<T>,
    masks: &[SegMask],
    vocab: &Vocabulary,
    nt: &NormTable,
    rs: &RuleSet,
    params: &LabelParams,
) -> Result<LabelMap> {
    if masks.len() != data.len() {
        return Err(Error::Dataset(format!(
            "{} masks for {} images",
            masks.len(),
            data.len()
        )));
    }
    let mut filters = Vec::new();
    for pred in rs.filter_predicates() {
        let idx = parse_raw_filter(&pred)?;
        if idx >= model.config.k {
            return Err(Error::UnknownPredicate(pred));
        }
        filters.push(idx);
    }
    filters.sort_unstable();
    filters.dedup();

    let mut counters = BTreeMap::<String, usize>::new();
    let mut entries = Vec::new();
    for &filter in &filters {
        let scored = label_filter(model, data, masks, vocab, nt, filter, params)?;
        let included: Vec<String> = match scored.first() {
            None => vec!["unknown".to_string()],
            Some((_, top)) => scored
                .iter()
                .filter(|(_, s)| *s >= params.beta * top)
                .map(|(c, _)| c.clone())
                .collect(),
        };
        let mut parts = Vec::new();
        for concept in &included {
            let c = counters.entry(concept.clone()).or_insert(0);
            *c += 1;
            parts.push(format!("{concept}{c}"));
        }
        entries.push(LabelEntry {
            filter,
            name: parts.join("_"),
            concepts: included,
            scores: scored,
        });
    }
    Ok(LabelMap { entries })
}

fn parse_raw_filter(pred: &str) -> Result<usize> {
    pred.strip_prefix('f')
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&i| i >= 1)
        .map(|i| i - 1)
        .ok_or_else(|| Error::UnknownPredicate(pred.to_string()))
}
