//! Local-linear kernel smoothers on binned data.
//!
//! Observations sharing a time point are pooled into one bin holding the count
//! and the sum of responses. Weighted least squares on bin means with count
//! weights is identical to the fit on the raw points.

use nalgebra::{DMatrix, Matrix3, Vector3};

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Distinct time points with an index mapping for raw observations.
#[derive(Debug, Clone)]
pub struct TimeBins {
    pub centers: Vec<f64>,
}

impl TimeBins {
    /// Groups times into bins. Exact duplicates share a bin; if more than
    /// `max_bins` distinct values exist, times are rounded onto an equispaced
    /// grid of `max_bins` points spanning `[lower, upper]`.
    pub fn from_times<'a, I>(times: I, lower: f64, upper: f64, max_bins: usize) -> Self
    where
        I: IntoIterator<Item = &'a f64>,
    {
        let mut all: Vec<f64> = times.into_iter().copied().collect();
        all.sort_by(f64::total_cmp);
        let tol = 1e-12 * (upper - lower).abs().max(1.0);
        all.dedup_by(|a, b| (*a - *b).abs() <= tol);
        if all.len() > max_bins && max_bins >= 2 {
            let h = (upper - lower) / (max_bins - 1) as f64;
            let centers = (0..max_bins).map(|i| lower + h * i as f64).collect();
            return TimeBins { centers };
        }
        TimeBins { centers: all }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Index of the bin nearest to `t`.
    pub fn index(&self, t: f64) -> usize {
        let c = &self.centers;
        match c.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= c.len() => c.len() - 1,
            Err(i) => {
                if (t - c[i - 1]).abs() <= (c[i] - t).abs() {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Index range of bins with centers strictly inside `(x - h, x + h)`.
    fn window(&self, x: f64, h: f64) -> std::ops::Range<usize> {
        let c = &self.centers;
        let lo = c.partition_point(|v| *v <= x - h);
        let hi = c.partition_point(|v| *v < x + h);
        lo..hi
    }
}

/// Per-bin sufficient statistics for a one-dimensional smooth.
#[derive(Debug, Clone)]
pub struct Binned1d {
    pub bins: TimeBins,
    pub count: Vec<f64>,
    pub sum: Vec<f64>,
}

impl Binned1d {
    pub fn new(bins: TimeBins) -> Self {
        let n = bins.len();
        Binned1d {
            bins,
            count: vec![0.0; n],
            sum: vec![0.0; n],
        }
    }

    pub fn add(&mut self, t: f64, y: f64) {
        let i = self.bins.index(t);
        self.count[i] += 1.0;
        self.sum[i] += y;
    }

    /// Local-linear estimate at `x` with bandwidth `h`.
    ///
    /// If fewer than two occupied bins fall inside the window, the bandwidth is
    /// widened to reach the ten nearest occupied bins; the second return value
    /// reports whether that happened.
    pub fn local_linear(&self, x: f64, h: f64) -> Option<(f64, bool)> {
        if let Some(v) = self.fit_at(x, h) {
            return Some((v, false));
        }
        let mut dists: Vec<f64> = self
            .bins
            .centers
            .iter()
            .zip(&self.count)
            .filter(|(_, c)| **c > 0.0)
            .map(|(t, _)| (t - x).abs())
            .collect();
        if dists.len() < 2 {
            return None;
        }
        dists.sort_by(f64::total_cmp);
        let reach = dists[dists.len().min(10) - 1];
        let wide = reach * (1.0 + 1e-6) + 1e-12;
        self.fit_at(x, wide.max(h)).map(|v| (v, true))
    }

    fn fit_at(&self, x: f64, h: f64) -> Option<f64> {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut occupied = 0;
        for i in self.bins.window(x, h) {
            let c = self.count[i];
            if c <= 0.0 {
                continue;
            }
            let d = self.bins.centers[i] - x;
            let w = c * epanechnikov(d / h);
            if w <= 0.0 {
                continue;
            }
            occupied += 1;
            let mean = self.sum[i] / c;
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * mean;
            t1 += w * d * mean;
        }
        if occupied == 0 {
            return None;
        }
        let det = s0 * s2 - s1 * s1;
        if occupied >= 2 && det > 1e-12 * s0 * s2.max(f64::MIN_POSITIVE) {
            Some((s2 * t0 - s1 * t1) / det)
        } else {
            None
        }
    }
}

/// Per-cell sufficient statistics for a two-dimensional smooth on a bin × bin grid.
#[derive(Debug, Clone)]
pub struct Binned2d {
    pub bins: TimeBins,
    pub count: DMatrix<f64>,
    pub sum: DMatrix<f64>,
}

impl Binned2d {
    pub fn new(bins: TimeBins) -> Self {
        let n = bins.len();
        Binned2d {
            bins,
            count: DMatrix::zeros(n, n),
            sum: DMatrix::zeros(n, n),
        }
    }

    pub fn add_indexed(&mut self, a: usize, b: usize, y: f64) {
        self.count[(a, b)] += 1.0;
        self.sum[(a, b)] += y;
    }

    /// Local-linear surface estimate at `(x, y)` with a product Epanechnikov kernel.
    ///
    /// Widens the bandwidth geometrically until the local plane is identified.
    pub fn local_linear(&self, x: f64, y: f64, h: f64, max_h: f64) -> Option<(f64, bool)> {
        let mut bw = h;
        let mut widened = false;
        loop {
            if let Some(v) = self.fit_at(x, y, bw) {
                return Some((v, widened));
            }
            if bw >= max_h {
                return None;
            }
            bw = (bw * 1.5).min(max_h);
            widened = true;
        }
    }

    fn fit_at(&self, x: f64, y: f64, h: f64) -> Option<f64> {
        let mut a = Matrix3::<f64>::zeros();
        let mut rhs = Vector3::<f64>::zeros();
        let c = &self.bins.centers;
        let rows = self.bins.window(x, h);
        let cols = self.bins.window(y, h);
        let mut occupied = 0;
        for i in rows {
            let dx = c[i] - x;
            let kx = epanechnikov(dx / h);
            if kx <= 0.0 {
                continue;
            }
            for j in cols.clone() {
                let n = self.count[(i, j)];
                if n <= 0.0 {
                    continue;
                }
                let dy = c[j] - y;
                let w = n * kx * epanechnikov(dy / h);
                if w <= 0.0 {
                    continue;
                }
                occupied += 1;
                let mean = self.sum[(i, j)] / n;
                let z = Vector3::new(1.0, dx, dy);
                a += z * z.transpose() * w;
                rhs += z * (w * mean);
            }
        }
        if occupied < 3 {
            return None;
        }
        // scale-free conditioning check on the normal equations
        let d = Vector3::new(a[(0, 0)], a[(1, 1)], a[(2, 2)]).map(|v| v.max(f64::MIN_POSITIVE).sqrt().recip());
        let scaled = Matrix3::from_diagonal(&d) * a * Matrix3::from_diagonal(&d);
        if scaled.determinant() < 1e-10 {
            return None;
        }
        let sol = a.lu().solve(&rhs)?;
        Some(sol[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_linear_reproduces_lines_exactly() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.7).collect();
        let mut b = Binned1d::new(TimeBins::from_times(&times, 0.0, 35.0, 400));
        for t in &times {
            b.add(*t, 3.0 - 0.5 * t);
            b.add(*t, 3.0 - 0.5 * t);
        }
        for x in [0.0, 5.3, 20.0, 34.3] {
            let (v, widened) = b.local_linear(x, 3.0).unwrap();
            assert!(!widened);
            assert!((v - (3.0 - 0.5 * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn narrow_bandwidth_is_widened() {
        let times = [0.0, 1.0, 2.0, 10.0, 11.0];
        let mut b = Binned1d::new(TimeBins::from_times(&times, 0.0, 11.0, 400));
        for t in times {
            b.add(t, 2.0);
        }
        let (v, widened) = b.local_linear(6.0, 0.5).unwrap();
        assert!(widened);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn plane_is_reproduced_in_two_dimensions() {
        let times: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let bins = TimeBins::from_times(&times, 0.0, 20.0, 400);
        let mut b = Binned2d::new(bins);
        for i in 0..21 {
            for j in 0..21 {
                if i != j {
                    b.add_indexed(i, j, 1.0 + 0.2 * i as f64 - 0.1 * j as f64);
                }
            }
        }
        let (v, _) = b.local_linear(7.0, 7.0, 3.0, 20.0).unwrap();
        assert!((v - (1.0 + 1.4 - 0.7)).abs() < 1e-10);
    }

    #[test]
    fn many_distinct_times_are_rounded_to_a_grid() {
        let times: Vec<f64> = (0..1000).map(|i| i as f64 * 0.0101).collect();
        let bins = TimeBins::from_times(&times, 0.0, 10.1, 101);
        assert_eq!(bins.len(), 101);
        assert_eq!(bins.index(5.04), 50);
    }
}
