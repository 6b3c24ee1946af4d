//! qEASL estimation and responder labeling.
//!
//! A tumor voxel counts as enhancing when its arterial-phase intensity
//! exceeds the parenchymal reference, the mean of three parenchymal ROI
//! intensities. Responders are patients whose averaged enhancing volume
//! drops by strictly more than 65% from baseline to follow-up.

use serde::{Deserialize, Serialize};

/// Relative qEASL reduction a responder must strictly exceed.
pub const RESPONDER_REDUCTION: f64 = 0.65;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QeaslError {
    #[error("tumor has no voxels")]
    EmptyTumor,
    #[error("no estimates to average")]
    EmptyList,
    #[error("baseline qEASL must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("follow-up qEASL must be non-negative, got {0}")]
    NegativeFollowup(f64),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
}

/// Binary treatment-response class. Class index 0 is the non-responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NR")]
    NonResponder,
    #[serde(rename = "R")]
    Responder,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::NonResponder => 0,
            Label::Responder => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::NonResponder
        } else {
            Label::Responder
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::NonResponder => "NR",
            Label::Responder => "R",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeaslMeasurement {
    pub tumor_intensities: Vec<f64>,
    pub roi_means: [f64; 3],
    pub voxel_volume: f64,
}

impl QeaslMeasurement {
    pub fn validate(&self) -> Result<(), QeaslError> {
        if !(self.voxel_volume > 0.0 && self.voxel_volume.is_finite()) {
            return Err(QeaslError::InvalidMeasurement(format!(
                "voxel_volume must be positive and finite, got {}",
                self.voxel_volume
            )));
        }
        if self.roi_means.iter().any(|v| !v.is_finite()) {
            return Err(QeaslError::InvalidMeasurement("non-finite ROI mean".into()));
        }
        if self.tumor_intensities.iter().any(|v| !v.is_finite()) {
            return Err(QeaslError::InvalidMeasurement("non-finite tumor intensity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QeaslEstimate {
    /// cm³
    pub enhancing_volume: f64,
    /// cm³
    pub total_volume: f64,
    pub fraction: f64,
}

/// Parenchymal reference intensity: ROI mean plus `k_sigma` population
/// standard deviations of the three ROI means.
pub fn parenchymal_reference(roi_means: &[f64; 3], k_sigma: f64) -> f64 {
    let mean = roi_means.iter().sum::<f64>() / 3.0;
    if k_sigma == 0.0 {
        return mean;
    }
    let var = roi_means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
    mean + k_sigma * var.sqrt()
}

pub fn measure_qeasl(m: &QeaslMeasurement, k_sigma: f64) -> Result<QeaslEstimate, QeaslError> {
    m.validate()?;
    if m.tumor_intensities.is_empty() {
        return Err(QeaslError::EmptyTumor);
    }
    let reference = parenchymal_reference(&m.roi_means, k_sigma);
    let enhancing = m.tumor_intensities.iter().filter(|&&v| v > reference).count();
    let total = m.tumor_intensities.len();
    Ok(QeaslEstimate {
        enhancing_volume: enhancing as f64 * m.voxel_volume,
        total_volume: total as f64 * m.voxel_volume,
        fraction: enhancing as f64 / total as f64,
    })
}

/// Mean enhancing volume (cm³) over repeated estimates.
pub fn average_qeasl(estimates: &[QeaslEstimate]) -> Result<f64, QeaslError> {
    if estimates.is_empty() {
        return Err(QeaslError::EmptyList);
    }
    Ok(estimates.iter().map(|e| e.enhancing_volume).sum::<f64>() / estimates.len() as f64)
}

pub fn responder_label(baseline: f64, followup: f64) -> Result<Label, QeaslError> {
    if !(baseline > 0.0) {
        return Err(QeaslError::NonPositiveBaseline(baseline));
    }
    if !(followup >= 0.0) {
        return Err(QeaslError::NegativeFollowup(followup));
    }
    let reduction = (baseline - followup) / baseline;
    Ok(if reduction > RESPONDER_REDUCTION {
        Label::Responder
    } else {
        Label::NonResponder
    })
}

/// Label a patient from its baseline and follow-up measurement series.
pub fn label_from_measurements(
    baseline: &[QeaslMeasurement],
    followup: &[QeaslMeasurement],
    k_sigma: f64,
) -> Result<Label, QeaslError> {
    let estimate = |ms: &[QeaslMeasurement]| -> Result<f64, QeaslError> {
        let est = ms.iter().map(|m| measure_qeasl(m, k_sigma)).collect::<Result<Vec<_>, _>>()?;
        average_qeasl(&est)
    };
    responder_label(estimate(baseline)?, estimate(followup)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn meas(intensities: Vec<f64>, roi: [f64; 3], vv: f64) -> QeaslMeasurement {
        QeaslMeasurement { tumor_intensities: intensities, roi_means: roi, voxel_volume: vv }
    }

    #[test]
    fn half_enhancing() {
        let e = measure_qeasl(&meas(vec![10.0, 20.0, 30.0, 40.0], [24.0, 25.0, 26.0], 1.0), 0.0).unwrap();
        assert_eq!(e, QeaslEstimate { enhancing_volume: 2.0, total_volume: 4.0, fraction: 0.5 });
    }

    #[test]
    fn below_every_roi_is_not_enhancing() {
        let e = measure_qeasl(&meas(vec![1.0, 2.0, 3.0], [24.0, 25.0, 26.0], 0.5), 0.0).unwrap();
        assert_eq!(e.enhancing_volume, 0.0);
        assert_eq!(e.fraction, 0.0);
    }

    #[test]
    fn voxel_at_reference_is_not_enhancing() {
        let e = measure_qeasl(&meas(vec![25.0, 25.5], [24.0, 25.0, 26.0], 1.0), 0.0).unwrap();
        assert_eq!(e.enhancing_volume, 1.0);
    }

    #[test]
    fn k_sigma_raises_threshold() {
        // population std of [24,25,26] = sqrt(2/3)
        let p = parenchymal_reference(&[24.0, 25.0, 26.0], 1.0);
        assert!((p - (25.0 + (2.0f64 / 3.0).sqrt())).abs() < 1e-12);
        let e = measure_qeasl(&meas(vec![25.5, 26.0], [24.0, 25.0, 26.0], 1.0), 1.0).unwrap();
        assert_eq!(e.enhancing_volume, 1.0);
    }

    #[test]
    fn empty_tumor_errors() {
        assert_eq!(measure_qeasl(&meas(vec![], [1.0, 1.0, 1.0], 1.0), 0.0), Err(QeaslError::EmptyTumor));
    }

    #[test]
    fn rejects_bad_voxel_volume() {
        assert!(matches!(
            measure_qeasl(&meas(vec![1.0], [1.0, 1.0, 1.0], 0.0), 0.0),
            Err(QeaslError::InvalidMeasurement(_))
        ));
    }

    #[test]
    fn brute_force_count_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let intensities: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..200.0)).collect();
            let roi = [rng.random_range(80.0..120.0), rng.random_range(80.0..120.0), rng.random_range(80.0..120.0)];
            let vv = rng.random_range(0.01..1.0);
            let threshold = (roi[0] + roi[1] + roi[2]) / 3.0;
            let mut count = 0usize;
            for v in &intensities {
                if *v > threshold {
                    count += 1;
                }
            }
            let e = measure_qeasl(&meas(intensities, roi, vv), 0.0).unwrap();
            assert_eq!(e.enhancing_volume, count as f64 * vv);
            assert_eq!(e.total_volume, 1000.0 * vv);
        }
    }

    fn est(v: f64) -> QeaslEstimate {
        QeaslEstimate { enhancing_volume: v, total_volume: v.max(1.0) * 2.0, fraction: 0.0 }
    }

    #[test]
    fn averages() {
        assert_eq!(average_qeasl(&[est(40.17)]).unwrap(), 40.17);
        assert!((average_qeasl(&[est(40.0), est(40.2), est(40.31)]).unwrap() - 40.17).abs() < 1e-12);
        assert_eq!(average_qeasl(&[est(2.0), est(3.0), est(4.0)]).unwrap(), 3.0);
        assert_eq!(average_qeasl(&[]), Err(QeaslError::EmptyList));
    }

    #[test]
    fn figure_examples() {
        assert_eq!(responder_label(40.17, 2.94).unwrap(), Label::Responder);
        assert_eq!(responder_label(246.12, 424.86).unwrap(), Label::NonResponder);
        assert_eq!(responder_label(100.0, 35.0).unwrap(), Label::NonResponder);
        assert_eq!(responder_label(0.0, 1.0), Err(QeaslError::NonPositiveBaseline(0.0)));
    }

    proptest! {
        #[test]
        fn voxel_volume_scale_equivariance(
            intensities in proptest::collection::vec(0.0f64..100.0, 1..200),
            roi in proptest::array::uniform3(20.0f64..80.0),
            vv in 0.01f64..10.0,
        ) {
            let a = measure_qeasl(&meas(intensities.clone(), roi, vv), 0.0).unwrap();
            let b = measure_qeasl(&meas(intensities, roi, 2.0 * vv), 0.0).unwrap();
            prop_assert_eq!(b.enhancing_volume, 2.0 * a.enhancing_volume);
            prop_assert_eq!(b.total_volume, 2.0 * a.total_volume);
            prop_assert_eq!(a.fraction, b.fraction);
            prop_assert!((0.0..=1.0).contains(&a.fraction));
            prop_assert!(a.enhancing_volume <= a.total_volume);
        }

        #[test]
        fn label_scale_invariance(b in 0.1f64..1000.0, f in 0.0f64..1000.0, k in 0u32..20) {
            // power-of-two scaling keeps the reduction ratio exact
            let s = f64::powi(2.0, k as i32 - 10);
            prop_assert_eq!(responder_label(b, f).unwrap(), responder_label(b * s, f * s).unwrap());
        }
    }
}
