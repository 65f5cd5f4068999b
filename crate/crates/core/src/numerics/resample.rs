//! Separable bilinear resampling with half-pixel sample centers.

/// One output cell as a weighted sum of source cells.
#[derive(Clone, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: pos - lo as f64 }
        })
        .collect()
}

/// Precomputed sparse linear map from an `a×b` grid to a `p×q` grid, applied
/// independently to every channel of a row-major `cells×channels` buffer.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    /// Per output cell: (source cell, weight) with zero weights dropped.
    weights: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let ty = taps(src.0, dst.0);
        let tx = taps(src.1, dst.1);
        let mut weights = Vec::with_capacity(dst.0 * dst.1);
        for y in &ty {
            for x in &tx {
                let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |r: usize, c: usize, w: f64| {
                    if w != 0.0 {
                        let idx = r * src.1 + c;
                        match cell.iter_mut().find(|(i, _)| *i == idx) {
                            Some(entry) => entry.1 += w,
                            None => cell.push((idx, w)),
                        }
                    }
                };
                push(y.lo, x.lo, (1.0 - y.frac) * (1.0 - x.frac));
                push(y.lo, x.hi, (1.0 - y.frac) * x.frac);
                push(y.hi, x.lo, y.frac * (1.0 - x.frac));
                push(y.hi, x.hi, y.frac * x.frac);
                weights.push(cell);
            }
        }
        Resampler { src, dst, weights }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// Resample `src.0·src.1` rows of `channels` values each.
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let mut out = vec![0.0; self.weights.len() * channels];
        for (o, cell) in self.weights.iter().enumerate() {
            let orow = &mut out[o * channels..(o + 1) * channels];
            for &(s, w) in cell {
                let srow = &x[s * channels..(s + 1) * channels];
                for (ov, &sv) in orow.iter_mut().zip(srow) {
                    *ov += w * sv;
                }
            }
        }
        out
    }

    /// Adjoint of [`Resampler::apply`].
    pub fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return g.to_vec();
        }
        let mut out = vec![0.0; self.src.0 * self.src.1 * channels];
        for (o, cell) in self.weights.iter().enumerate() {
            let grow = &g[o * channels..(o + 1) * channels];
            for &(s, w) in cell {
                for (ov, &gv) in out[s * channels..(s + 1) * channels].iter_mut().zip(grow) {
                    *ov += w * gv;
                }
            }
        }
        out
    }
}
