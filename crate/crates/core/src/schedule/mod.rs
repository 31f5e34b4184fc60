//! Scheduling matrices, active sets, sliding windows and CAT noise-level draws.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Per-frame diffusion steps on the sampling grid.
pub type FrameSteps = Vec<usize>;

/// `S[k][l] = clip(T - l + u k, 0, T)` for frames `k = 0..K` and columns `l = 0..=L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulingMatrix {
    frames: usize,
    steps: usize,
    u: usize,
    entries: Vec<usize>,
}

pub fn build_schedule(frames: usize, steps: usize, u: usize) -> Result<SchedulingMatrix> {
    if frames == 0 || steps == 0 {
        return Err(Error::Validation("schedule needs K >= 1 and T >= 1".into()));
    }
    let last = steps + u * (frames - 1);
    let cols = last + 1;
    let mut entries = Vec::with_capacity(frames * cols);
    for k in 0..frames {
        for l in 0..cols {
            let v = (steps + u * k).saturating_sub(l);
            entries.push(v.min(steps));
        }
    }
    Ok(SchedulingMatrix { frames, steps, u, entries })
}

impl SchedulingMatrix {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of diffusion steps `T` on the sampling grid.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn u(&self) -> usize {
        self.u
    }

    /// Last column index `L`; there are `L + 1` columns.
    pub fn last_column(&self) -> usize {
        self.steps + self.u * (self.frames - 1)
    }

    pub fn columns(&self) -> usize {
        self.last_column() + 1
    }

    pub fn get(&self, k: usize, l: usize) -> usize {
        self.entries[k * self.columns() + l]
    }

    pub fn row(&self, k: usize) -> &[usize] {
        let c = self.columns();
        &self.entries[k * c..(k + 1) * c]
    }

    pub fn column(&self, l: usize) -> FrameSteps {
        (0..self.frames).map(|k| self.get(k, l)).collect()
    }

    /// Frames whose step decreases between columns `l` and `l + 1`.
    pub fn active_set(&self, l: usize) -> Result<Vec<usize>> {
        if l >= self.last_column() {
            return Err(Error::OutOfRange(format!(
                "iteration {l} outside 0..{}",
                self.last_column()
            )));
        }
        Ok((0..self.frames).filter(|&k| self.get(k, l + 1) < self.get(k, l)).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for k in 0..self.frames {
            let row: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Training-time noise-level distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatConfig {
    pub rho: f64,
    pub rho_c: f64,
    pub c_max: usize,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self { rho: 0.5, rho_c: 0.0, c_max: 0 }
    }
}

impl CatConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.rho_c) {
            return Err(Error::Validation("rho and rho_c must lie in [0, 1]".into()));
        }
        if self.c_max > frames {
            return Err(Error::Validation(format!("c_max {} exceeds K = {frames}", self.c_max)));
        }
        if self.rho_c > 0.0 && self.c_max == 0 {
            return Err(Error::Validation("rho_c > 0 needs c_max >= 1".into()));
        }
        Ok(())
    }
}

/// i.i.d. uniform levels on `1..=T`, sorted with probability `rho`, then an
/// optional clean-context clamp of the first `C ~ U{1..C_max}` frames.
pub fn sample_cat_levels(frames: usize, steps: usize, cat: &CatConfig, rng: &mut RngStream) -> Result<FrameSteps> {
    cat.validate(frames)?;
    if steps == 0 {
        return Err(Error::Validation("T must be >= 1".into()));
    }
    let mut t: FrameSteps = (0..frames).map(|_| rng.int_inclusive(1, steps)).collect();
    if rng.bernoulli(cat.rho) {
        t.sort_unstable();
    }
    if rng.bernoulli(cat.rho_c) {
        let c = rng.int_inclusive(1, cat.c_max);
        t[..c].iter_mut().for_each(|v| *v = 0);
    }
    Ok(t)
}

/// One window of a sliding-window run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    /// Shift to the next window start; 0 for the final window.
    pub advance: usize,
}

/// Nominal advance `ceil(K / u)`, at least 1.
pub fn window_advance(frames: usize, u: usize) -> usize {
    if u == 0 {
        0
    } else {
        frames.div_ceil(u).max(1)
    }
}

pub fn sliding_window(total: usize, frames: usize, u: usize) -> Result<Vec<Window>> {
    if frames == 0 || total < frames {
        return Err(Error::Validation(format!("need total frames {total} >= window {frames} >= 1")));
    }
    if total == frames {
        return Ok(vec![Window { start: 0, advance: 0 }]);
    }
    if u == 0 {
        return Err(Error::Capacity(format!(
            "u = 0 covers a single window of {frames} frames but {total} were requested; \
             run full-sequence assimilation on chunks of at most {frames} frames"
        )));
    }
    let a = window_advance(frames, u);
    let mut starts = vec![0];
    while starts.last().unwrap() + frames < total {
        let next = (starts.last().unwrap() + a).min(total - frames);
        starts.push(next);
    }
    Ok(starts
        .iter()
        .enumerate()
        .map(|(i, &s)| Window { start: s, advance: starts.get(i + 1).map_or(0, |n| n - s) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_table() {
        let s = build_schedule(3, 4, 2).unwrap();
        assert_eq!(s.columns(), 9);
        assert_eq!(s.row(0), &[4, 3, 2, 1, 0, 0, 0, 0, 0]);
        assert_eq!(s.row(1), &[4, 4, 4, 3, 2, 1, 0, 0, 0]);
        assert_eq!(s.row(2), &[4, 4, 4, 4, 4, 3, 2, 1, 0]);
        assert_eq!(s.active_set(3).unwrap(), vec![0, 1]);
        assert!(s.active_set(8).is_err());
    }

    #[test]
    fn synchronous_and_filtering_extremes() {
        let s = build_schedule(4, 6, 0).unwrap();
        for k in 0..4 {
            assert_eq!(s.row(k), &[6, 5, 4, 3, 2, 1, 0]);
        }
        for l in 0..s.last_column() {
            assert_eq!(s.active_set(l).unwrap(), vec![0, 1, 2, 3]);
        }
        let s = build_schedule(3, 4, 4).unwrap();
        // frame 1 starts exactly when frame 0 reaches 0
        assert_eq!(s.get(0, 4), 0);
        assert_eq!(s.get(1, 4), 4);
        assert_eq!(s.get(1, 5), 3);
        let s = build_schedule(5, 8, 8).unwrap();
        for l in 0..s.last_column() {
            assert_eq!(s.active_set(l).unwrap().len(), 1);
        }
    }

    #[test]
    fn active_width_bound() {
        for u in 1..=6 {
            let s = build_schedule(7, 12, u).unwrap();
            for l in 0..s.last_column() {
                assert!(s.active_set(l).unwrap().len() <= 12usize.div_ceil(u) + 1);
            }
        }
    }

    #[test]
    fn csv_dump() {
        let s = build_schedule(2, 2, 1).unwrap();
        assert_eq!(s.to_csv(), "2,1,0,0\n2,2,1,0\n");
    }

    #[test]
    fn cat_extremes() {
        let mut rng = RngStream::new(0, 0);
        let sorted = CatConfig { rho: 1.0, rho_c: 0.0, c_max: 0 };
        let clamp = CatConfig { rho: 0.0, rho_c: 1.0, c_max: 2 };
        for _ in 0..500 {
            let t = sample_cat_levels(6, 10, &sorted, &mut rng).unwrap();
            assert!(t.windows(2).all(|w| w[0] <= w[1]));
            assert!(t.iter().all(|&v| (1..=10).contains(&v)));
            let t = sample_cat_levels(6, 10, &clamp, &mut rng).unwrap();
            assert_eq!(t[0], 0);
            assert!(t[2..].iter().all(|&v| v >= 1));
        }
        assert!(CatConfig { rho: 1.5, rho_c: 0.0, c_max: 0 }.validate(3).is_err());
        assert!(CatConfig { rho: 0.5, rho_c: 0.1, c_max: 4 }.validate(3).is_err());
    }

    #[test]
    fn iid_levels_are_uniform() {
        let mut rng = RngStream::new(5, 0);
        let cat = CatConfig { rho: 0.0, rho_c: 0.0, c_max: 0 };
        let mut counts = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            let t = sample_cat_levels(1, 10, &cat, &mut rng).unwrap();
            counts[t[0] - 1] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn windows() {
        assert_eq!(sliding_window(5, 5, 0).unwrap(), vec![Window { start: 0, advance: 0 }]);
        assert!(matches!(sliding_window(6, 5, 0), Err(Error::Capacity(_))));
        let w = sliding_window(8, 4, 4).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let w = sliding_window(50, 30, 10).unwrap();
        let starts: Vec<_> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 3, 6, 9, 12, 15, 18, 20]);
        assert_eq!(w[0].advance, 3);
        assert_eq!(w.last().unwrap().advance, 0);
    }
}
