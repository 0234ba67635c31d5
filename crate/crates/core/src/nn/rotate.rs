use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, Mutex, OnceLock};

/// Bilinear resampling that rotates a square image about its center.
///
/// Content turns counter-clockwise by `angle` when rows are drawn top-down
/// (row index grows toward −y). Samples falling outside the source are
/// zero. Multiples of 90° are exact pixel permutations.
#[derive(Debug)]
pub struct RotationMap {
    side: usize,
    angle: f64,
    taps: Vec<Tap>,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    dst: u32,
    src: u32,
    w: f64,
}

impl RotationMap {
    pub fn new(side: usize, angle: f64) -> Self {
        let mut taps = Vec::with_capacity(side * side * 4);
        let quarter = (angle / FRAC_PI_2).round();
        if (angle - quarter * FRAC_PI_2).abs() < 1e-12 {
            let k = (quarter as i64).rem_euclid(4);
            let n = side;
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = match k {
                        0 => (i, j),
                        1 => (j, n - 1 - i),
                        2 => (n - 1 - i, n - 1 - j),
                        _ => (n - 1 - j, i),
                    };
                    taps.push(Tap {
                        dst: (i * n + j) as u32,
                        src: (si * n + sj) as u32,
                        w: 1.0,
                    });
                }
            }
        } else {
            let c = (side as f64 - 1.0) / 2.0;
            let (s, co) = angle.sin_cos();
            for i in 0..side {
                for j in 0..side {
                    let u = j as f64 - c;
                    let v = c - i as f64;
                    let us = co * u + s * v;
                    let vs = -s * u + co * v;
                    let js = us + c;
                    let is = c - vs;
                    let i0 = is.floor();
                    let j0 = js.floor();
                    let fi = is - i0;
                    let fj = js - j0;
                    let dst = (i * side + j) as u32;
                    for (di, dj, w) in [
                        (0, 0, (1.0 - fi) * (1.0 - fj)),
                        (0, 1, (1.0 - fi) * fj),
                        (1, 0, fi * (1.0 - fj)),
                        (1, 1, fi * fj),
                    ] {
                        let si = i0 as i64 + di;
                        let sj = j0 as i64 + dj;
                        if w == 0.0 || si < 0 || sj < 0 || si >= side as i64 || sj >= side as i64 {
                            continue;
                        }
                        taps.push(Tap {
                            dst,
                            src: (si as usize * side + sj as usize) as u32,
                            w,
                        });
                    }
                }
            }
        }
        RotationMap { side, angle, taps }
    }

    /// Shared map for `(side, angle)`, built once per process.
    pub fn cached(side: usize, angle: f64) -> Arc<RotationMap> {
        type Cache = Mutex<HashMap<(usize, u64), Arc<RotationMap>>>;
        static CACHE: OnceLock<Cache> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (side, angle.to_bits());
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry(key)
            .or_insert_with(|| Arc::new(RotationMap::new(side, angle)))
            .clone()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Rotates every `side × side` plane of `input` (channel-major).
    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        let plane = self.side * self.side;
        debug_assert_eq!(input.len(), out.len());
        debug_assert_eq!(input.len() % plane, 0);
        out.fill(0.0);
        for (src, dst) in input.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            for t in &self.taps {
                dst[t.dst as usize] += t.w * src[t.src as usize];
            }
        }
    }

    /// Adjoint of [`apply`](Self::apply), accumulated into `grad_in`.
    pub fn apply_transpose_add(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let plane = self.side * self.side;
        for (g, gi) in grad_out.chunks_exact(plane).zip(grad_in.chunks_exact_mut(plane)) {
            for t in &self.taps {
                gi[t.src as usize] += t.w * g[t.dst as usize];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn exact_quarter_turns_compose() {
        let n = 6;
        let img: Vec<f64> = (0..n * n).map(|v| v as f64).collect();
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        RotationMap::new(n, PI / 2.0).apply(&img, &mut a);
        RotationMap::new(n, PI / 2.0).apply(&a, &mut b);
        let mut half = vec![0.0; n * n];
        RotationMap::new(n, PI).apply(&img, &mut half);
        assert_eq!(b, half);
        let rev: Vec<f64> = img.iter().rev().copied().collect();
        assert_eq!(half, rev);
    }

    #[test]
    fn bilinear_matches_exact_near_quarter_turn() {
        // A tiny offset from 90° takes the bilinear path.
        let n = 8;
        let img: Vec<f64> = (0..n * n).map(|v| (v as f64 * 0.3).sin()).collect();
        let mut exact = vec![0.0; n * n];
        let mut approx = vec![0.0; n * n];
        RotationMap::new(n, PI / 2.0).apply(&img, &mut exact);
        RotationMap::new(n, PI / 2.0 + 1e-9).apply(&img, &mut approx);
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let n = 7;
        let map = RotationMap::new(n, 0.6);
        let x: Vec<f64> = (0..n * n).map(|v| (v as f64 * 0.7).cos()).collect();
        let y: Vec<f64> = (0..n * n).map(|v| (v as f64 * 1.3).sin()).collect();
        let mut ax = vec![0.0; n * n];
        map.apply(&x, &mut ax);
        let mut aty = vec![0.0; n * n];
        map.apply_transpose_add(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
