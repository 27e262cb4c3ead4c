//! Thresholding, dice overlap and per-subject report aggregation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probability at or above which a pixel is foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape("BinaryMask", format!("{} bits for {h}x{w}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![0; h * w],
        }
    }

    /// Mask from a `[1, 1, H, W]` tensor holding exactly 0 or 1.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims();
        if n != 1 || c != 1 {
            return Err(Error::shape("BinaryMask::from_tensor", format!("{:?}", t.dims())));
        }
        let bits = t
            .data()
            .iter()
            .map(|&v| match v.as_f64() {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::InvalidArgument(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Ok(BinaryMask { h, w, bits })
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| T::of(b as f64)).collect();
        Tensor::from_vec([1, 1, self.h, self.w], data).expect("mask dims")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.w + j]
    }
}

/// `1` where `p >= 0.5`, else `0`. `prob` must be `[1, 1, H, W]` within `[0, 1]`.
pub fn binarize<T: Element>(prob: &Tensor<T>) -> Result<BinaryMask> {
    let [n, c, h, w] = prob.dims();
    if n != 1 || c != 1 {
        return Err(Error::shape("binarize", format!("expected [1, 1, H, W], got {:?}", prob.dims())));
    }
    let bits = prob
        .data()
        .iter()
        .map(|&p| {
            let p = p.as_f64();
            if (0.0..=1.0).contains(&p) {
                Ok(u8::from(p >= THRESHOLD))
            } else {
                Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(BinaryMask { h, w, bits })
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks agree perfectly (1.0).
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    let inter = pred
        .bits
        .iter()
        .zip(&truth.bits)
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count();
    let total = pred.count() + truth.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice of one test subject for one arch in one CV fold.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScore {
    pub subject: String,
    pub arch: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subject: String,
    pub arch: String,
    pub mean_dice: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub rows: Vec<ReportRow>,
    /// `(arch, mean of that arch's row values)` in first-seen arch order.
    pub averages: Vec<(String, f64)>,
}

/// Groups scores by (subject, arch), averaging runs within a group and rows within an arch.
/// Rows are ordered by arch, then subject, each in order of first appearance.
pub fn aggregate_report(per_run: &[RunScore]) -> Result<DiceReport> {
    if per_run.is_empty() {
        return Err(Error::InvalidArgument("aggregate_report: no runs".into()));
    }
    if let Some(bad) = per_run.iter().find(|r| !(0.0..=1.0).contains(&r.dice)) {
        return Err(Error::InvalidArgument(format!(
            "dice {} for subject {} outside [0, 1]",
            bad.dice, bad.subject
        )));
    }
    let mut archs: Vec<&str> = Vec::new();
    let mut subjects: Vec<&str> = Vec::new();
    for r in per_run {
        if !archs.contains(&r.arch.as_str()) {
            archs.push(&r.arch);
        }
        if !subjects.contains(&r.subject.as_str()) {
            subjects.push(&r.subject);
        }
    }
    let mut rows = Vec::new();
    let mut averages = Vec::new();
    for &arch in &archs {
        let mut values = Vec::new();
        for &subject in &subjects {
            let runs: Vec<f64> = per_run
                .iter()
                .filter(|r| r.arch == arch && r.subject == subject)
                .map(|r| r.dice)
                .collect();
            if runs.is_empty() {
                continue;
            }
            let mean = runs.iter().sum::<f64>() / runs.len() as f64;
            values.push(mean);
            rows.push(ReportRow {
                subject: subject.to_string(),
                arch: arch.to_string(),
                mean_dice: mean,
                runs: runs.len(),
            });
        }
        averages.push((arch.to_string(), values.iter().sum::<f64>() / values.len() as f64));
    }
    Ok(DiceReport { rows, averages })
}

impl DiceReport {
    pub fn average(&self, arch: &str) -> Option<f64> {
        self.averages.iter().find(|(a, _)| a == arch).map(|&(_, v)| v)
    }

    /// `subject,arch,mean_dice` rows at 4 decimals, then `average,<arch>,<value>` per arch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,arch,mean_dice\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.4}", r.subject, r.arch, r.mean_dice);
        }
        for (arch, v) in &self.averages {
            let _ = writeln!(out, "average,{arch},{v:.4}");
        }
        out
    }

    /// One line per subject with every arch side by side, then the averages.
    pub fn to_table(&self) -> String {
        let archs: Vec<&str> = self.averages.iter().map(|(a, _)| a.as_str()).collect();
        let mut subjects: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !subjects.contains(&r.subject.as_str()) {
                subjects.push(&r.subject);
            }
        }
        let mut out = format!("{:<10}", "subject");
        for a in &archs {
            let _ = write!(out, "{a:>10}");
        }
        out.push('\n');
        for s in subjects {
            let _ = write!(out, "{s:<10}");
            for a in &archs {
                match self.rows.iter().find(|r| r.subject == s && r.arch == *a) {
                    Some(r) => {
                        let _ = write!(out, "{:>10.2}", r.mean_dice);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "average");
        for (_, v) in &self.averages {
            let _ = write!(out, "{v:>10.2}");
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn mask(bits: &[u8], w: usize) -> BinaryMask {
        BinaryMask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    fn prob(values: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(binarize(&prob(&[0.5])).unwrap().bits(), &[1]);
        assert_eq!(binarize(&prob(&[0.4999])).unwrap().bits(), &[0]);
        assert_eq!(binarize(&prob(&[1.0; 6])).unwrap().bits(), &[1; 6]);
        assert_eq!(binarize(&prob(&[0.0, 0.25, 0.75])).unwrap().bits(), &[0, 0, 1]);
    }

    #[test]
    fn binarize_rejects_out_of_range() {
        assert!(binarize(&prob(&[1.5])).is_err());
        assert!(binarize(&prob(&[-0.1])).is_err());
        assert!(binarize(&prob(&[f32::NAN])).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 0, 0, 1, 0], 3);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1, 0, 1], 3);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let truth = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let pred = mask(&[0, 0, 1, 1, 1, 1, 0, 0], 4);
        assert_eq!(dice(&pred, &truth).unwrap(), 0.5);
        let empty = BinaryMask::zeros(2, 3);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &a).unwrap(), 0.0);
        assert!(dice(&a, &BinaryMask::zeros(3, 2)).is_err());
    }

    fn score(subject: &str, arch: &str, dice: f64) -> RunScore {
        RunScore {
            subject: subject.into(),
            arch: arch.into(),
            dice,
        }
    }

    #[test]
    fn table_two_averages() {
        let dilated = [0.53, 0.62, 0.65, 0.57, 0.50, 0.51];
        let plain = [0.50, 0.60, 0.64, 0.53, 0.43, 0.40];
        let mut runs = Vec::new();
        for (i, (&d, &p)) in dilated.iter().zip(&plain).enumerate() {
            runs.push(score(&(i + 1).to_string(), "unet", p));
            runs.push(score(&(i + 1).to_string(), "dilated", d));
        }
        let report = aggregate_report(&runs).unwrap();
        assert_eq!(format!("{:.2}", report.average("dilated").unwrap()), "0.56");
        assert_eq!(format!("{:.2}", report.average("unet").unwrap()), "0.52");
        assert_eq!(report.rows.len(), 12);
    }

    #[test]
    fn single_run_rows_equal_their_run() {
        let report = aggregate_report(&[score("3", "unet", 0.42)]).unwrap();
        assert_eq!(report.rows[0].mean_dice, 0.42);
        assert_eq!(report.average("unet"), Some(0.42));
    }

    #[test]
    fn rows_average_their_runs() {
        let runs: Vec<_> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&d| score("1", "unet", d)).collect();
        let report = aggregate_report(&runs).unwrap();
        assert!((report.rows[0].mean_dice - 0.6).abs() < 1e-12);
        assert_eq!(report.rows[0].runs, 5);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(aggregate_report(&[]).is_err());
        assert!(aggregate_report(&[score("1", "unet", 1.5)]).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = aggregate_report(&[
            score("1", "unet", 0.5),
            score("2", "unet", 0.25),
            score("1", "dilated", 0.75),
            score("2", "dilated", 0.5),
        ])
        .unwrap();
        assert_eq!(
            report.to_csv(),
            "subject,arch,mean_dice\n1,unet,0.5000\n2,unet,0.2500\n1,dilated,0.7500\n\
             2,dilated,0.5000\naverage,unet,0.3750\naverage,dilated,0.6250\n"
        );
        let table = report.to_table();
        assert!(table.lines().last().unwrap().starts_with("average"));
        assert_eq!(table.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(bits in prop::collection::vec((0u8..2, 0u8..2), 1..64)) {
            let (a, b): (Vec<u8>, Vec<u8>) = bits.into_iter().unzip();
            let (a, b) = (mask(&a, 1), mask(&b, 1));
            let ab = dice(&a, &b).unwrap();
            prop_assert_eq!(ab, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn binarize_is_binary(p in prop::collection::vec(0.0f32..=1.0, 1..64)) {
            let m = binarize(&prob(&p)).unwrap();
            prop_assert!(m.bits().iter().all(|&b| b <= 1));
        }

        #[test]
        fn average_ignores_row_order(values in prop::collection::vec(0.0f64..=1.0, 1..12), seed in 0u64..1000) {
            let runs: Vec<_> = values.iter().enumerate().map(|(i, &d)| score(&i.to_string(), "unet", d)).collect();
            let mut shuffled = runs.clone();
            crate::rng::Rng::new(seed).shuffle(&mut shuffled);
            let a = aggregate_report(&runs).unwrap().average("unet").unwrap();
            let b = aggregate_report(&shuffled).unwrap().average("unet").unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((a - mean).abs() < 1e-9);
        }
    }
}
