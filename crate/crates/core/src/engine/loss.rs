/// Probability floor inside the distillation logarithms.
pub const KD_FLOOR: f64 = 1e-8;

/// `KL(teacher || student)` with both distributions floored at [`KD_FLOOR`].
pub fn kd_loss(teacher: &[f64], student: &[f64]) -> f64 {
    assert_eq!(teacher.len(), student.len(), "distributions over different candidate sets");
    teacher
        .iter()
        .zip(student)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.max(KD_FLOOR).ln() - q.max(KD_FLOOR).ln()))
        .sum()
}

/// Mean of [`kd_loss`] over paired rows.
pub fn kd_loss_mean(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> f64 {
    assert_eq!(teacher.len(), student.len());
    if teacher.is_empty() {
        return 0.0;
    }
    teacher.iter().zip(student).map(|(p, q)| kd_loss(p, q)).sum::<f64>() / teacher.len() as f64
}

pub fn total_loss(ce: f64, kd: f64, lambda: f64) -> f64 {
    ce + lambda * kd
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert!((kd_loss(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        let want = 0.25 * (0.25f64 / 0.7).ln() + 0.75 * (0.25f64 / 0.1).ln();
        let got = kd_loss(&[0.25; 4], &[0.7, 0.1, 0.1, 0.1]);
        assert!((got - want).abs() < 1e-12 && (got - 0.4298).abs() < 1e-4);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kd_loss(&p, &p), 0.0);
        assert!(kd_loss(&[0.5, 0.5], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.5, 0.3, 1.0), 0.8);
        assert_eq!(total_loss(0.5, 0.3, 0.0), 0.5);
        assert_eq!(total_loss(0.5, 0.0, 7.0), 0.5);
    }
}
