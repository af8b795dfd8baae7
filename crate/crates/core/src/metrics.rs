//! Accuracy, class-wise diagnostics and report serialization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub global_accuracy: f64,
    pub classwise_accuracy: Vec<f64>,
}

/// Scores hard predictions against labels. Every class must occur in
/// `labels`, otherwise its recall is undefined.
pub fn score_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        total[y] += 1;
        correct[y] += usize::from(p == y);
    }
    if let Some(c) = total.iter().position(|&n| n == 0) {
        return Err(Error::Evaluation(format!(
            "class {c} has no test samples; class-wise accuracy is undefined"
        )));
    }
    Ok(Evaluation {
        global_accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        classwise_accuracy: correct
            .iter()
            .zip(&total)
            .map(|(&k, &n)| k as f64 / n as f64)
            .collect(),
    })
}

const EVAL_CHUNK: usize = 1024;

/// Plain argmax accuracy of `model` on `test`, using raw logits.
pub fn evaluate<T: Scalar>(model: &Mlp<T>, test: &Dataset<T>) -> Result<Evaluation> {
    let features = test.features();
    let mut predictions = Vec::with_capacity(test.len());
    for start in (0..test.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(test.len());
        let logits = model.logits(features.slice(s![start..end, ..]))?;
        predictions.extend(logits.outer_iter().map(argmax));
    }
    score_predictions(&predictions, test.labels(), test.num_classes())
}

/// Metrics recorded after one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub global_accuracy: f64,
    pub classwise_accuracy: Vec<f64>,
    /// Mean minibatch training loss over every participant and local step.
    pub mean_train_loss: f64,
    /// Post-LocalUpdate class-wise accuracy per client (`None` for clients
    /// that sat the round out). Only recorded with diagnostics enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_classwise: Option<Vec<Option<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// Fixed-point rendering with at least nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.9}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 40) as usize;
    format!("{v:.decimals$}")
}

pub fn render_csv(reports: &[RoundReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Usage("no round reports to write".into()))?;
    let classes = first.classwise_accuracy.len();
    let mut out = String::from("round,global_acc");
    for c in 0..classes {
        write!(out, ",classwise_{c}").expect("writing to a String");
    }
    out.push('\n');
    for r in reports {
        if r.classwise_accuracy.len() != classes {
            return Err(Error::Shape(format!(
                "round {} reports {} classes, expected {classes}",
                r.round,
                r.classwise_accuracy.len()
            )));
        }
        write!(out, "{},{}", r.round, format_sig9(r.global_accuracy)).expect("writing to a String");
        for &a in &r.classwise_accuracy {
            write!(out, ",{}", format_sig9(a)).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn render_json(reports: &[RoundReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Usage("no round reports to write".into()));
    }
    serde_json::to_string_pretty(reports).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn write_report(reports: &[RoundReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => render_csv(reports)?,
        ReportFormat::Json => render_json(reports)?,
    };
    fs::write(path.as_ref(), body).map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<Vec<RoundReport>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); zero for one run.
    pub std: f64,
    pub runs: usize,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn summarize_runs(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::Usage("cannot summarise zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunSummary {
        mean,
        std,
        runs: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::nn::Dense;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    fn report(round: usize, acc: f64) -> RoundReport {
        RoundReport {
            round,
            global_accuracy: acc,
            classwise_accuracy: vec![acc, 1.0 - acc, 0.125],
            mean_train_loss: 0.3,
            client_classwise: Some(vec![Some(vec![0.1, 0.2, 0.3]), None]),
            wall_time: None,
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0_f32, 0.0].view()), 0);
    }

    #[test]
    fn constant_predictor() {
        // Output layer with only a bias: always predicts class 2.
        let layer = Dense {
            weights: Array2::<f64>::zeros((4, 2)),
            bias: array![0.0, 0.0, 1.0, 0.0],
        };
        let model = Mlp::from_layers(vec![layer]).unwrap();
        let test = Dataset::new(
            Array2::zeros((8, 2)),
            vec![0, 1, 2, 3, 0, 1, 2, 3],
            4,
            Split::Test,
        )
        .unwrap();
        let e = evaluate(&model, &test).unwrap();
        assert_eq!(e.classwise_accuracy, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(e.global_accuracy, 0.25);
    }

    #[test]
    fn perfect_model_on_point_clusters() {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 3,
            per_class: 10,
            spread: 0.0,
            separation: 1.0,
            seed: 2,
        };
        let (_, test) = gen_synthetic::<f64>(&spec).unwrap();
        // Nearest-mean readout written as a linear layer: w_c = μ_c, b_c = −‖μ_c‖²/2.
        let means: Vec<Array1<f64>> = (0..3)
            .map(|c| {
                let i = test.labels().iter().position(|&y| y == c).unwrap();
                test.features().row(i).to_owned()
            })
            .collect();
        let mut weights = Array2::zeros((3, 3));
        let mut bias = Array1::zeros(3);
        for (c, m) in means.iter().enumerate() {
            weights.row_mut(c).assign(m);
            bias[c] = -0.5 * m.dot(m);
        }
        let model = Mlp::from_layers(vec![Dense { weights, bias }]).unwrap();
        let e = evaluate(&model, &test).unwrap();
        assert_eq!(e.classwise_accuracy, vec![1.0; 3]);
    }

    #[test]
    fn hand_counted_confusion() {
        let labels = [0, 0, 1, 1, 1, 2, 2, 0];
        let preds = [0, 1, 1, 1, 2, 2, 0, 0];
        // class 0: 2/3, class 1: 2/3, class 2: 1/2, overall 5/8
        let e = score_predictions(&preds, &labels, 3).unwrap();
        assert_eq!(e.classwise_accuracy, vec![2.0 / 3.0, 2.0 / 3.0, 0.5]);
        assert_eq!(e.global_accuracy, 0.625);
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(matches!(
            score_predictions(&[0, 1], &[0, 1], 3),
            Err(Error::Evaluation(_))
        ));
    }

    proptest! {
        #[test]
        fn global_is_count_weighted_classwise_mean(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 4..60)
        ) {
            let mut labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            labels.extend(0..4);
            preds.extend(0..4);
            let e = score_predictions(&preds, &labels, 4).unwrap();
            let counts: Vec<usize> = (0..4).map(|c| labels.iter().filter(|&&y| y == c).count()).collect();
            let weighted: f64 = e.classwise_accuracy.iter().zip(&counts)
                .map(|(a, &n)| a * n as f64).sum::<f64>() / labels.len() as f64;
            prop_assert!((weighted - e.global_accuracy).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let csv = render_csv(&[report(1, 0.5), report(2, 0.75)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "round,global_acc,classwise_0,classwise_1,classwise_2");
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert_eq!(lines[1], "1,0.500000000,0.500000000,0.500000000,0.125000000");
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.0125), "0.0125000000");
        assert_eq!(format_sig9(0.0), "0.000000000");
        assert_eq!(format_sig9(2.0 / 3.0), "0.666666667");
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut reports = vec![report(1, 0.123456789012345), report(2, 2.0 / 3.0)];
        reports[1].client_classwise = None;
        reports[1].wall_time = Some(1.25);
        write_report(&reports, &path, ReportFormat::Json).unwrap();
        assert_eq!(read_report_json(&path).unwrap(), reports);
    }

    #[test]
    fn empty_reports_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for f in [ReportFormat::Csv, ReportFormat::Json] {
            assert!(matches!(
                write_report(&[], dir.path().join("x"), f),
                Err(Error::Usage(_))
            ));
        }
        assert!(matches!(
            write_report(&[report(1, 0.5)], "/nonexistent/dir/x.csv", ReportFormat::Csv),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn run_summaries() {
        let s = summarize_runs(&[0.5]).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.0));
        let s = summarize_runs(&[0.90, 0.92, 0.94]).unwrap();
        assert!((s.mean - 0.92).abs() < 1e-12);
        assert!((s.std - 0.02).abs() < 1e-12);
        assert!(summarize_runs(&[0.7, 0.7, 0.7]).unwrap().std < 1e-12);
        assert!(summarize_runs(&[]).is_err());
    }
}
