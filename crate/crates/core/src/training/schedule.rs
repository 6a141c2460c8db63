/// Piecewise-constant learning rate halved at each milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn new(base: f64, mut milestones: Vec<usize>) -> Self {
        milestones.sort_unstable();
        Self { base, milestones }
    }

    /// Halvings at 1/2, 3/4 and 7/8 of the run.
    pub fn default_milestones(iters: usize) -> Vec<usize> {
        vec![iters / 2, iters * 3 / 4, iters * 7 / 8]
    }

    pub fn milestones(&self) -> &[usize] {
        &self.milestones
    }

    /// Rate used for the update that produces step `step + 1` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base * 0.5f64.powi(halvings as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_at_milestones() {
        let s = LrSchedule::new(2e-4, LrSchedule::default_milestones(1000));
        assert_eq!(s.lr(0), 2e-4);
        assert_eq!(s.lr(499), 2e-4);
        assert_eq!(s.lr(500), 1e-4);
        assert_eq!(s.lr(750), 5e-5);
        assert_eq!(s.lr(10_000), 2.5e-5);
        let mut prev = f64::INFINITY;
        for step in 0..1200 {
            assert!(s.lr(step) <= prev);
            prev = s.lr(step);
        }
    }
}
