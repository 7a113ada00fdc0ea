//! Scoring, ROC/AUC and report files.
//!
//! AUC is computed twice, independently: by a trapezoidal sweep over the
//! ROC curve and by the pairwise Mann-Whitney count.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architectures::OutputSemantics;
use crate::dataset::{LabelOrientation, PairDataset};
use crate::error::{Error, Result};
use crate::exec::{Mode, RunOptions};
use crate::training::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreOrientation {
    HigherIsMatch,
    LowerIsMatch,
}

impl From<OutputSemantics> for ScoreOrientation {
    fn from(s: OutputSemantics) -> Self {
        match s {
            OutputSemantics::MatchProbability => ScoreOrientation::HigherIsMatch,
            OutputSemantics::EmbeddingDistance => ScoreOrientation::LowerIsMatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub index: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoredPair>,
    pub orientation: ScoreOrientation,
    pub label_orientation: LabelOrientation,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredPair>, orientation: ScoreOrientation, label_orientation: LabelOrientation) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| e.label > 1) {
            return Err(Error::InvalidArgument(format!("pair {} has label {}", bad.index, bad.label)));
        }
        Ok(Self { entries, orientation, label_orientation })
    }

    /// Pairs `scores` with the indices and labels of `d`, in stored order.
    pub fn from_dataset(d: &PairDataset, scores: Vec<f64>, orientation: ScoreOrientation) -> Result<Self> {
        if scores.len() != d.len() {
            return Err(Error::Shape(format!("{} scores for {} pairs", scores.len(), d.len())));
        }
        let entries = d
            .pairs()
            .iter()
            .zip(scores)
            .map(|(p, score)| ScoredPair { index: p.index, score, label: p.label })
            .collect();
        Self::new(entries, orientation, d.orientation())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn canonical_labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| self.label_orientation.to_canonical(e.label)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Deterministic scores of `m` on `d` (dropout off, running statistics).
pub fn score_dataset(m: &TrainedModel, d: &PairDataset) -> Result<ScoreSet> {
    let scores = m.predict(d, RunOptions::new(Mode::Eval), 0)?;
    ScoreSet::from_dataset(d, scores, m.spec.output_semantics.into())
}

/// Higher-is-match scores with match-is-one labels.
pub fn canonicalize(s: &ScoreSet) -> ScoreSet {
    let flip = s.orientation == ScoreOrientation::LowerIsMatch;
    ScoreSet {
        entries: s
            .entries
            .iter()
            .map(|e| ScoredPair {
                index: e.index,
                score: if flip { -e.score } else { e.score },
                label: s.label_orientation.to_canonical(e.label),
            })
            .collect(),
        orientation: ScoreOrientation::HigherIsMatch,
        label_orientation: LabelOrientation::MatchIsOne,
    }
}

/// Canonical scores and labels, checked for NaN and for both classes.
fn canonical_parts(s: &ScoreSet) -> Result<(Vec<f64>, Vec<u8>, usize, usize)> {
    let c = canonicalize(s);
    let scores = c.scores();
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("score set contains NaN".into()));
    }
    let labels: Vec<u8> = c.entries.iter().map(|e| e.label).collect();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC needs both classes, got {pos} matching and {neg} non-matching pairs"
        )));
    }
    Ok((scores, labels, pos, neg))
}

/// ROC curve over every distinct threshold, integrated with the
/// trapezoidal rule.
pub fn auc_trapezoid(s: &ScoreSet) -> Result<RocResult> {
    let (scores, labels, pos, neg) = canonical_parts(s)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of one (positive, negative) cell
    let mut twice_area: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = twice_area as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocResult { points, auc })
}

/// Fraction of (match, non-match) pairs ranked correctly, ties counting
/// one half.
pub fn auc_pairwise_oracle(s: &ScoreSet) -> Result<f64> {
    let (scores, labels, pos, neg) = canonical_parts(s)?;
    let positives: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &y)| y == 1).map(|(&v, _)| v).collect();
    let negatives: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &y)| y == 0).map(|(&v, _)| v).collect();
    let mut halves: u64 = 0;
    for p in &positives {
        for n in &negatives {
            halves += match p.partial_cmp(n) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(halves as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub name: String,
    pub roc: RocResult,
    pub params: u64,
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn roc_svg(results: &[ReportEntry]) -> String {
    let (size, margin) = (480.0, 50.0);
    let plot = size - 2.0 * margin;
    let x = |f: f64| margin + f * plot;
    let y = |t: f64| size - margin - t * plot;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##, x(0.0), y(0.0), x(1.0), y(1.0));
    for tick in 0..=5 {
        let t = tick as f64 / 5.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t:.1}</text>"#, x(t), size - margin + 16.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{t:.1}</text>"#, margin - 6.0, y(t) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">False positive rate</text>"#, size / 2.0, size - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        size / 2.0,
        size / 2.0
    );
    for (i, r) in results.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r.roc.points.iter().map(|&(f, t)| format!("{:.2},{:.2}", x(f), y(t))).collect();
        let _ = writeln!(svg, r#"<polyline class="roc" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = y(0.3) + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x(0.5), x(0.56));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">{} (AUC {:.4})</text>"#,
            x(0.58),
            ly + 4.0,
            xml_escape(&r.name),
            r.roc.auc
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `roc_<name>.csv` per model, `summary.csv` and `roc.svg` into
/// `dir`, returning the paths written.
pub fn emit_report(results: &[ReportEntry], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one model".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in results {
        let path = dir.join(format!("roc_{}.csv", file_stem(&r.name)));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in &r.roc.points {
            w.write_record([f.to_string(), t.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["name", "auc", "params"])?;
    for r in results {
        w.write_record([r.name.clone(), r.roc.auc.to_string(), r.params.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    written.push(summary);
    let svg = dir.join("roc.svg");
    fs::write(&svg, roc_svg(results)).map_err(|e| Error::io(&svg, e))?;
    written.push(svg);
    Ok(written)
}

fn orientation_name(o: ScoreOrientation) -> &'static str {
    match o {
        ScoreOrientation::HigherIsMatch => "HigherIsMatch",
        ScoreOrientation::LowerIsMatch => "LowerIsMatch",
    }
}

fn labels_name(o: LabelOrientation) -> &'static str {
    match o {
        LabelOrientation::MatchIsOne => "MatchIsOne",
        LabelOrientation::MatchIsZero => "MatchIsZero",
    }
}

/// Writes `index,label,score` rows after a `# orientation=... labels=...`
/// comment line.
pub fn write_scores_csv(s: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!(
        "# orientation={} labels={}\nindex,label,score\n",
        orientation_name(s.orientation),
        labels_name(s.label_orientation)
    );
    for e in &s.entries {
        let _ = writeln!(text, "{},{},{}", e.index, e.label, e.score);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a score file; a missing comment line means higher-is-match
/// scores with match-is-one labels.
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let (mut orientation, mut labels) = (ScoreOrientation::HigherIsMatch, LabelOrientation::MatchIsOne);
    if let Some(meta) = first.trim().strip_prefix('#') {
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("orientation", "HigherIsMatch")) => orientation = ScoreOrientation::HigherIsMatch,
                Some(("orientation", "LowerIsMatch")) => orientation = ScoreOrientation::LowerIsMatch,
                Some(("labels", "MatchIsOne")) => labels = LabelOrientation::MatchIsOne,
                Some(("labels", "MatchIsZero")) => labels = LabelOrientation::MatchIsZero,
                _ => return Err(Error::Format(format!("{}: unknown header field {kv:?}", path.display()))),
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "label", "score"] {
        return Err(Error::Format(format!("{}: expected columns index,label,score", path.display())));
    }
    let mut entries = Vec::new();
    for row in reader.deserialize::<(usize, u8, f64)>() {
        let (index, label, score) = row?;
        entries.push(ScoredPair { index, score, label });
    }
    ScoreSet::new(entries, orientation, labels)
}

/// Per-pair scores of several models side by side:
/// `index,label,<name>...` with match-is-one labels.
pub fn write_prediction_table(sets: &[(String, ScoreSet)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let Some((_, first)) = sets.first() else {
        return Err(Error::InvalidArgument("prediction table needs at least one model".into()));
    };
    for (name, s) in sets {
        let same = s.len() == first.len() && s.entries.iter().zip(&first.entries).all(|(a, b)| a.index == b.index);
        if !same {
            return Err(Error::InvalidArgument(format!("{name} scores a different pair list")));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend(sets.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let labels = first.canonical_labels();
    for (k, e) in first.entries.iter().enumerate() {
        let mut row = vec![e.index.to_string(), labels[k].to_string()];
        row.extend(sets.iter().map(|(_, s)| s.entries[k].score.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        let entries = pos
            .iter()
            .map(|&s| (s, 1))
            .chain(neg.iter().map(|&s| (s, 0)))
            .enumerate()
            .map(|(index, (score, label))| ScoredPair { index, score, label })
            .collect();
        ScoreSet::new(entries, ScoreOrientation::HigherIsMatch, LabelOrientation::MatchIsOne).unwrap()
    }

    #[test]
    fn worked_examples() {
        let perfect = set(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(auc_trapezoid(&perfect).unwrap().auc, 1.0);
        assert_eq!(auc_pairwise_oracle(&perfect).unwrap(), 1.0);
        let mixed = set(&[0.8, 0.3], &[0.5, 0.1]);
        assert_eq!(auc_pairwise_oracle(&mixed).unwrap(), 0.75);
        assert_eq!(auc_trapezoid(&mixed).unwrap().auc, 0.75);
        let ties = set(&[0.4, 0.4], &[0.4, 0.4, 0.4]);
        assert_eq!(auc_pairwise_oracle(&ties).unwrap(), 0.5);
        assert_eq!(auc_trapezoid(&ties).unwrap().auc, 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(auc_trapezoid(&set(&[0.1, 0.2], &[])).is_err());
        assert!(auc_pairwise_oracle(&set(&[], &[0.3])).is_err());
    }

    #[test]
    fn random_labels_give_half() {
        let mut rng = crate::seeds::rng(11);
        let entries = (0..10_000)
            .map(|index| ScoredPair { index, score: rng.random(), label: rng.random_range(0..2) })
            .collect();
        let s = ScoreSet::new(entries, ScoreOrientation::HigherIsMatch, LabelOrientation::MatchIsOne).unwrap();
        assert!((auc_trapezoid(&s).unwrap().auc - 0.5).abs() <= 0.02);
    }

    #[test]
    fn canonicalize_examples() {
        let s = ScoreSet::new(
            vec![ScoredPair { index: 4, score: 0.3, label: 0 }],
            ScoreOrientation::LowerIsMatch,
            LabelOrientation::MatchIsZero,
        )
        .unwrap();
        let c = canonicalize(&s);
        assert_eq!(c.entries[0], ScoredPair { index: 4, score: -0.3, label: 1 });
        assert_eq!(c.orientation, ScoreOrientation::HigherIsMatch);
        assert_eq!(canonicalize(&c), c);
        let h = set(&[0.2], &[0.1]);
        assert_eq!(canonicalize(&h), h);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let roc = auc_trapezoid(&set(&[0.8, 0.3], &[0.5, 0.1])).unwrap();
        let one = emit_report(&[ReportEntry { name: "DTC".into(), roc: roc.clone(), params: 10 }], dir.path()).unwrap();
        assert_eq!(one.len(), 3);
        assert!(one.iter().all(|p| p.exists()));
        let mut r = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        let rows: Vec<(String, f64, u64)> = r.deserialize().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].1 - roc.auc).abs() < 1e-6);

        let two = [
            ReportEntry { name: "a".into(), roc: roc.clone(), params: 1 },
            ReportEntry { name: "b".into(), roc, params: 2 },
        ];
        emit_report(&two, dir.path()).unwrap();
        let svg = fs::read_to_string(dir.path().join("roc.svg")).unwrap();
        assert_eq!(svg.matches(r#"class="roc""#).count(), 2);
        assert!(emit_report(&[], dir.path()).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = ScoreSet::new(
            vec![ScoredPair { index: 3, score: 1.25, label: 1 }, ScoredPair { index: 7, score: 0.1, label: 0 }],
            ScoreOrientation::LowerIsMatch,
            LabelOrientation::MatchIsZero,
        )
        .unwrap();
        write_scores_csv(&s, &path).unwrap();
        assert_eq!(read_scores_csv(&path).unwrap(), s);
        fs::write(&path, "index,label,score\n0,1,0.5\n").unwrap();
        let plain = read_scores_csv(&path).unwrap();
        assert_eq!(plain.orientation, ScoreOrientation::HigherIsMatch);
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_scores_csv(&path).is_err());
    }

    #[test]
    fn prediction_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let s = set(&[0.9], &[0.2]);
        write_prediction_table(&[("x".into(), s.clone()), ("y".into(), s)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "index,label,x,y");
        assert_eq!(text.lines().count(), 3);
    }

    fn score_sets() -> impl Strategy<Value = ScoreSet> {
        (2usize..=200, any::<u64>()).prop_map(|(n, seed)| {
            let mut rng = crate::seeds::rng(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            // coarse grid so ties are common
            let entries = labels
                .into_iter()
                .enumerate()
                .map(|(index, label)| ScoredPair { index, score: rng.random_range(0..20) as f64 / 20.0, label })
                .collect();
            ScoreSet::new(entries, ScoreOrientation::HigherIsMatch, LabelOrientation::MatchIsOne).unwrap()
        })
    }

    proptest! {
        #[test]
        fn trapezoid_matches_oracle(s in score_sets()) {
            let roc = auc_trapezoid(&s).unwrap();
            prop_assert!((roc.auc - auc_pairwise_oracle(&s).unwrap()).abs() <= 1e-9);
            prop_assert_eq!(roc.points.first().copied(), Some((0.0, 0.0)));
            prop_assert_eq!(roc.points.last().copied(), Some((1.0, 1.0)));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn auc_invariant_under_increasing_transform(s in score_sets()) {
            let mut t = s.clone();
            t.entries.iter_mut().for_each(|e| e.score = (3.0 * e.score).exp() - 7.0);
            prop_assert_eq!(auc_trapezoid(&s).unwrap().auc, auc_trapezoid(&t).unwrap().auc);
        }

        #[test]
        fn relabel_and_negate_keeps_auc(s in score_sets()) {
            let mut t = s.clone();
            t.entries.iter_mut().for_each(|e| { e.score = -e.score; e.label = 1 - e.label; });
            prop_assert_eq!(auc_trapezoid(&s).unwrap().auc, auc_trapezoid(&t).unwrap().auc);
            let flipped = ScoreSet { orientation: ScoreOrientation::LowerIsMatch, label_orientation: LabelOrientation::MatchIsZero, ..t };
            prop_assert_eq!(auc_trapezoid(&s).unwrap().auc, auc_trapezoid(&flipped).unwrap().auc);
        }
    }
}
