//! Group fairness metrics for binary predictions, labels and attributes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairnessError {
    #[error("frame columns differ in length: predictions {predictions}, labels {labels}, attributes {attributes}")]
    Length {
        predictions: usize,
        labels: usize,
        attributes: usize,
    },
    #[error("{column}[{index}] = {value} is not binary")]
    NonBinary {
        column: &'static str,
        index: usize,
        value: usize,
    },
    #[error("empty frame")]
    Empty,
    #[error("attribute group a={0} is empty")]
    EmptyGroup(usize),
    #[error("cell (a={attribute}, y={label}) is empty")]
    EmptyCell { attribute: usize, label: usize },
}

pub type Result<T> = std::result::Result<T, FairnessError>;

/// Binary predictions, labels and attributes of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    predictions: Vec<usize>,
    labels: Vec<usize>,
    attributes: Vec<usize>,
}

impl EvalFrame {
    pub fn new(predictions: Vec<usize>, labels: Vec<usize>, attributes: Vec<usize>) -> Result<Self> {
        if predictions.len() != labels.len() || labels.len() != attributes.len() {
            return Err(FairnessError::Length {
                predictions: predictions.len(),
                labels: labels.len(),
                attributes: attributes.len(),
            });
        }
        for (column, v) in [
            ("predictions", &predictions),
            ("labels", &labels),
            ("attributes", &attributes),
        ] {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| x > 1) {
                return Err(FairnessError::NonBinary {
                    column,
                    index,
                    value,
                });
            }
        }
        Ok(Self {
            predictions,
            labels,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    /// `(positive predictions, count)` over samples matching the filter.
    fn rate_counts(&self, keep: impl Fn(usize, usize) -> bool) -> (usize, usize) {
        let mut pos = 0;
        let mut total = 0;
        for k in 0..self.len() {
            if keep(self.attributes[k], self.labels[k]) {
                total += 1;
                pos += self.predictions[k];
            }
        }
        (pos, total)
    }

    fn cell_rate(&self, a: usize, y: usize) -> Result<f64> {
        let (pos, total) = self.rate_counts(|aa, yy| aa == a && yy == y);
        if total == 0 {
            return Err(FairnessError::EmptyCell {
                attribute: a,
                label: y,
            });
        }
        Ok(pos as f64 / total as f64)
    }
}

/// `|p(ŷ=1|a=0) − p(ŷ=1|a=1)|`.
pub fn dp_gap(frame: &EvalFrame) -> Result<f64> {
    let mut rates = [0.0; 2];
    for (a, r) in rates.iter_mut().enumerate() {
        let (pos, total) = frame.rate_counts(|aa, _| aa == a);
        if total == 0 {
            return Err(FairnessError::EmptyGroup(a));
        }
        *r = pos as f64 / total as f64;
    }
    Ok((rates[0] - rates[1]).abs())
}

/// `|TPR₀ − TPR₁| + |FPR₀ − FPR₁|`.
pub fn eo_gap(frame: &EvalFrame) -> Result<f64> {
    let tpr0 = frame.cell_rate(0, 1)?;
    let tpr1 = frame.cell_rate(1, 1)?;
    let fpr0 = frame.cell_rate(0, 0)?;
    let fpr1 = frame.cell_rate(1, 0)?;
    Ok((tpr0 - tpr1).abs() + (fpr0 - fpr1).abs())
}

/// Minimum within-cell accuracy over the four (label, attribute) cells.
pub fn worst_group_accuracy(frame: &EvalFrame) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for y in 0..2 {
        for a in 0..2 {
            let mut hits = 0usize;
            let mut total = 0usize;
            for k in 0..frame.len() {
                if frame.attributes[k] == a && frame.labels[k] == y {
                    total += 1;
                    hits += usize::from(frame.predictions[k] == y);
                }
            }
            if total == 0 {
                return Err(FairnessError::EmptyCell { attribute: a, label: y });
            }
            worst = worst.min(hits as f64 / total as f64);
        }
    }
    Ok(worst)
}

pub fn accuracy(frame: &EvalFrame) -> Result<f64> {
    if frame.is_empty() {
        return Err(FairnessError::Empty);
    }
    let hits = frame
        .predictions
        .iter()
        .zip(&frame.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / frame.len() as f64)
}

/// All four metrics at once.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub worst_group_acc: f64,
}

pub fn report(frame: &EvalFrame) -> Result<FairnessReport> {
    Ok(FairnessReport {
        accuracy: accuracy(frame)?,
        dp_gap: dp_gap(frame)?,
        eo_gap: eo_gap(frame)?,
        worst_group_acc: worst_group_accuracy(frame)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumeration_frame() -> EvalFrame {
        EvalFrame::new(
            vec![1, 0, 0, 0, 1, 1, 0, 1],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![0, 0, 0, 0, 1, 1, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn dp_gap_by_hand() {
        let f = EvalFrame::new(vec![1, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dp_gap(&f).unwrap(), 0.5);
        let f = EvalFrame::new(vec![1; 4], vec![0, 1, 0, 1], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dp_gap(&f).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_values() {
        let f = enumeration_frame();
        assert_eq!(eo_gap(&f).unwrap(), 1.0);
        assert_eq!(worst_group_accuracy(&f).unwrap(), 0.5);
        assert_eq!(accuracy(&f).unwrap(), 0.75);
    }

    #[test]
    fn perfect_and_inverted_predictors() {
        let y = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let a = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let f = EvalFrame::new(y.clone(), y.clone(), a.clone()).unwrap();
        assert_eq!(eo_gap(&f).unwrap(), 0.0);
        assert_eq!(worst_group_accuracy(&f).unwrap(), 1.0);
        assert_eq!(accuracy(&f).unwrap(), 1.0);
        let flipped: Vec<usize> = y.iter().map(|v| 1 - v).collect();
        let f = EvalFrame::new(flipped, y, a).unwrap();
        assert_eq!(accuracy(&f).unwrap(), 0.0);
    }

    #[test]
    fn one_wrong_cell_zeroes_worst_group() {
        let f = EvalFrame::new(
            vec![1, 1, 1, 0, 1, 1, 0, 0],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![0, 0, 0, 0, 1, 1, 1, 1],
        )
        .unwrap();
        assert!(worst_group_accuracy(&f).unwrap() > 0.0);
        let f = EvalFrame::new(
            vec![1, 1, 1, 1, 1, 1, 0, 0],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![0, 0, 0, 0, 1, 1, 1, 1],
        )
        .unwrap();
        assert_eq!(worst_group_accuracy(&f).unwrap(), 0.0);
    }

    #[test]
    fn errors_name_the_missing_group() {
        let f = EvalFrame::new(vec![1, 0], vec![1, 0], vec![0, 0]).unwrap();
        assert_eq!(dp_gap(&f).unwrap_err(), FairnessError::EmptyGroup(1));
        assert_eq!(
            eo_gap(&f).unwrap_err().to_string(),
            "cell (a=1, y=1) is empty"
        );
        assert!(matches!(
            EvalFrame::new(vec![2], vec![0], vec![0]),
            Err(FairnessError::NonBinary { column: "predictions", .. })
        ));
        assert_eq!(
            accuracy(&EvalFrame::new(vec![], vec![], vec![]).unwrap()),
            Err(FairnessError::Empty)
        );
    }
}
