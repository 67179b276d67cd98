//! Metric checks against the published 18-sign classification report and
//! against an oracle that counts directly from prediction lists.

use proptest::prelude::*;
use signfusion::dataset::LabelTable;
use signfusion::evaluation::{aggregate, confusion_matrix, format_report, round2, EvaluationReport};

/// `(label, precision, recall, f1, support)` exactly as printed.
const PUBLISHED: [(&str, f64, f64, f64, usize); 18] = [
    ("اسم", 1.0, 1.0, 1.0, 1),
    ("السلام عليكم", 0.0, 0.0, 0.0, 1),
    ("أنا أسف", 1.0, 1.0, 1.0, 2),
    ("أهلا وسهلا", 0.0, 0.0, 0.0, 1),
    ("باص", 1.0, 0.5, 0.67, 2),
    ("حسنا", 1.0, 1.0, 1.0, 1),
    ("سيارة", 1.0, 0.5, 0.67, 2),
    ("سيارة أجرة", 1.0, 1.0, 1.0, 2),
    ("سيئ", 1.0, 1.0, 1.0, 1),
    ("شكرا", 1.0, 1.0, 1.0, 2),
    ("طائرة", 0.0, 0.0, 0.0, 2),
    ("قطار", 1.0, 1.0, 1.0, 1),
    ("لو سمحت", 1.0, 1.0, 1.0, 2),
    ("مطعم", 1.0, 1.0, 1.0, 1),
    ("مع السلامة", 1.0, 1.0, 1.0, 2),
    ("وعليكم السلام", 0.33, 1.0, 0.5, 1),
    ("وقت", 0.33, 1.0, 0.5, 1),
    ("يشرب", 1.0, 1.0, 1.0, 2),
];

/// Six misclassifications consistent with every printed row: the two
/// greetings swap, both planes and one of each half-recalled vehicle land
/// on the two low-precision classes.
const ERRORS: [(&str, &str); 6] = [
    ("السلام عليكم", "أهلا وسهلا"),
    ("أهلا وسهلا", "السلام عليكم"),
    ("طائرة", "وعليكم السلام"),
    ("طائرة", "وقت"),
    ("باص", "وعليكم السلام"),
    ("سيارة", "وقت"),
];

fn published_report() -> EvaluationReport {
    let labels = LabelTable::from_names(PUBLISHED.iter().map(|r| r.0));
    let idx = |name: &str| labels.index_of(name).unwrap();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for &(name, _, recall, _, support) in &PUBLISHED {
        let hits = (recall * support as f64).round() as usize;
        for _ in 0..hits {
            truth.push(idx(name));
            pred.push(idx(name));
        }
    }
    for (t, p) in ERRORS {
        truth.push(idx(t));
        pred.push(idx(p));
    }
    let cm = confusion_matrix(&truth, &pred, labels.len()).unwrap();
    aggregate(&cm, &labels).unwrap()
}

struct Row {
    label: String,
    values: Vec<f64>,
    support: usize,
}

/// Reads the tab-separated report back into numbers.
fn parse(text: &str) -> Vec<Row> {
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split('\t').collect();
            let support = cells.last().unwrap().parse().unwrap();
            let values = cells[1..cells.len() - 1]
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| {
                    assert_eq!(c.split('.').nth(1).map(str::len), Some(2), "`{c}` is not two decimals");
                    c.parse().unwrap()
                })
                .collect();
            Row {
                label: cells[0].to_string(),
                values,
                support,
            }
        })
        .collect()
}

#[test]
fn published_rows_are_reproduced() {
    let report = published_report();
    assert_eq!(report.total, 27);
    assert_eq!(report.confusion.trace(), 21);
    for &(name, p, r, f, support) in &PUBLISHED {
        let m = report.per_class[report.labels.index_of(name).unwrap()];
        assert_eq!(
            (round2(m.precision), round2(m.recall), round2(m.f1), m.support),
            (p, r, f, support),
            "{name}"
        );
    }
}

#[test]
fn published_summary_rows() {
    let r = published_report();
    assert!((r.accuracy - 21.0 / 27.0).abs() < 1e-12);
    // Per-class precisions are 13 ones, two thirds and three zeros.
    assert!((r.macro_avg.precision - (13.0 + 2.0 / 3.0) / 18.0).abs() < 1e-12);
    assert!((r.macro_avg.recall - 14.0 / 18.0).abs() < 1e-12);
    // Eleven perfect rows, two at 2/3 and two at 1/2.
    assert!((r.macro_avg.f1 - (11.0 + 4.0 / 3.0 + 1.0) / 18.0).abs() < 1e-12);
    assert_eq!(round2(r.accuracy), 0.78);
    assert_eq!(
        [
            round2(r.macro_avg.precision),
            round2(r.macro_avg.recall),
            round2(r.macro_avg.f1)
        ],
        [0.76, 0.78, 0.74]
    );
    assert_eq!(
        [
            round2(r.weighted_avg.precision),
            round2(r.weighted_avg.recall),
            round2(r.weighted_avg.f1)
        ],
        [0.80, 0.78, 0.77]
    );
    // Nothing is ever predicted as a plane, so its precision has an empty denominator.
    assert_eq!(r.zero_denominators, 1);
}

#[test]
fn formatted_report_parses_back_to_rounded_values() {
    let report = published_report();
    let text = format_report(&report);
    let rows = parse(&text);
    assert_eq!(rows.len(), 18 + 3);
    for (i, row) in rows.iter().take(18).enumerate() {
        let m = report.per_class[i];
        assert_eq!(row.label, report.labels.name(i).unwrap());
        assert_eq!(row.values, vec![round2(m.precision), round2(m.recall), round2(m.f1)]);
        assert_eq!(row.support, m.support);
    }
    let tail: Vec<&str> = rows[18..].iter().map(|r| r.label.as_str()).collect();
    assert_eq!(tail, ["Accuracy", "Macro Avg", "Weighted Avg"]);
    assert_eq!(rows[18].values, vec![0.78]);
    assert_eq!(rows[19].values, vec![0.76, 0.78, 0.74]);
    assert_eq!(rows[20].values, vec![0.8, 0.78, 0.77]);
    assert!(rows[18..].iter().all(|r| r.support == 27));
}

fn counted(truth: &[usize], pred: &[usize], k: usize) -> (f64, Vec<(f64, f64, usize)>) {
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let per = (0..k)
        .map(|c| {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count();
            let predicted = pred.iter().filter(|&&p| p == c).count();
            let actual = truth.iter().filter(|&&t| t == c).count();
            let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (div(tp, predicted), div(tp, actual), actual)
        })
        .collect();
    (correct as f64 / truth.len() as f64, per)
}

fn pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..8).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..60)))
}

proptest! {
    #[test]
    fn aggregate_agrees_with_direct_counting((k, pairs) in pairs()) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let labels = LabelTable::from_names((0..k).map(|i| format!("l{i}")));
        let report = aggregate(&confusion_matrix(&truth, &pred, k).unwrap(), &labels).unwrap();
        let (acc, per) = counted(&truth, &pred, k);
        prop_assert!((report.accuracy - acc).abs() < 1e-12);
        let n = truth.len() as f64;
        let mut macro_p = 0.0;
        let mut weighted_r = 0.0;
        for (m, &(p, r, support)) in report.per_class.iter().zip(&per) {
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.recall - r).abs() < 1e-12);
            prop_assert_eq!(m.support, support);
            macro_p += p / k as f64;
            weighted_r += r * support as f64 / n;
        }
        prop_assert!((report.macro_avg.precision - macro_p).abs() < 1e-12);
        // Support-weighted recall is accuracy by construction.
        prop_assert!((report.weighted_avg.recall - weighted_r).abs() < 1e-12);
        prop_assert!((report.weighted_avg.recall - acc).abs() < 1e-12);
    }

    #[test]
    fn relabelling_permutes_rows_only((k, pairs) in pairs(), rot in 0usize..8) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let shift = |v: &[usize]| v.iter().map(|&c| (c + rot) % k).collect::<Vec<_>>();
        let labels = LabelTable::from_names((0..k).map(|i| format!("l{i}")));
        let a = aggregate(&confusion_matrix(&truth, &pred, k).unwrap(), &labels).unwrap();
        let b = aggregate(&confusion_matrix(&shift(&truth), &shift(&pred), k).unwrap(), &labels).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.macro_avg.f1 - b.macro_avg.f1).abs() < 1e-12);
        prop_assert!((a.weighted_avg.precision - b.weighted_avg.precision).abs() < 1e-12);
        for c in 0..k {
            prop_assert_eq!(a.per_class[c], b.per_class[(c + rot) % k]);
        }
    }
}
