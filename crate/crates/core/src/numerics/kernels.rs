//! Dense loops shared by the forward and backward passes.

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if k == 0 {
        return c;
    }
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            *cv = dot(arow, brow);
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[inline]
pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_inplace(&mut out);
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−[y ln σ(z) + (1−y) ln(1−σ(z))]`.
#[inline]
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `exp(entropy(p))`.
pub fn perplexity(p: &[f64]) -> f64 {
    entropy(p).exp()
}

/// `(V − perplexity(p)) / V`.
pub fn diversity(p: &[f64]) -> f64 {
    let v = p.len() as f64;
    (v - perplexity(p)) / v
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub t: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn tout(&self) -> usize {
        (self.t + 2 * self.padding - self.k) / self.stride + 1
    }

    fn src(&self, to: usize, kk: usize) -> Option<usize> {
        let pos = (to * self.stride + kk).checked_sub(self.padding)?;
        (pos < self.t).then_some(pos)
    }
}

pub fn conv1d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let tout = g.tout();
    let cpg_in = g.cin / g.groups;
    let cpg_out = g.cout / g.groups;
    let mut out = vec![0.0; tout * g.cout];
    for to in 0..tout {
        for o in 0..g.cout {
            let base = (o / cpg_out) * cpg_in;
            let mut s = 0.0;
            for kk in 0..g.k {
                let Some(src) = g.src(to, kk) else { continue };
                let xrow = &x[src * g.cin + base..src * g.cin + base + cpg_in];
                for (ci, xv) in xrow.iter().enumerate() {
                    s += w[(o * cpg_in + ci) * g.k + kk] * xv;
                }
            }
            out[to * g.cout + o] = s;
        }
    }
    out
}

pub fn conv1d_grad_input(gy: &[f64], w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cpg_in = g.cin / g.groups;
    let cpg_out = g.cout / g.groups;
    for to in 0..g.tout() {
        for o in 0..g.cout {
            let dy = gy[to * g.cout + o];
            if dy == 0.0 {
                continue;
            }
            let base = (o / cpg_out) * cpg_in;
            for kk in 0..g.k {
                let Some(src) = g.src(to, kk) else { continue };
                for ci in 0..cpg_in {
                    dx[src * g.cin + base + ci] += dy * w[(o * cpg_in + ci) * g.k + kk];
                }
            }
        }
    }
}

pub fn conv1d_grad_weight(gy: &[f64], x: &[f64], g: &ConvGeom, dw: &mut [f64]) {
    let cpg_in = g.cin / g.groups;
    let cpg_out = g.cout / g.groups;
    for to in 0..g.tout() {
        for o in 0..g.cout {
            let dy = gy[to * g.cout + o];
            if dy == 0.0 {
                continue;
            }
            let base = (o / cpg_out) * cpg_in;
            for kk in 0..g.k {
                let Some(src) = g.src(to, kk) else { continue };
                for ci in 0..cpg_in {
                    dw[(o * cpg_in + ci) * g.k + kk] += dy * x[src * g.cin + base + ci];
                }
            }
        }
    }
}

pub fn conv_transpose1d(
    x: &[f64],
    w: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let tout = (t - 1) * stride + k;
    let mut out = vec![0.0; tout * cout];
    for ti in 0..t {
        for c in 0..cin {
            let xv = x[ti * cin + c];
            for kk in 0..k {
                let row = &mut out[(ti * stride + kk) * cout..(ti * stride + kk + 1) * cout];
                for (o, ov) in row.iter_mut().enumerate() {
                    *ov += xv * w[(c * cout + o) * k + kk];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0]; // 3x1
        assert_eq!(mm(&a, &b, 2, 3, 1), vec![-2.0, -2.0]);
        assert_eq!(mm_nt(&a, &b, 2, 3, 1), vec![-2.0, -2.0]);
        let at = transpose(&a, 2, 3);
        assert_eq!(mm_tn(&at, &b, 3, 2, 1), vec![-2.0, -2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_output_length() {
        let g = ConvGeom { t: 8, cin: 1, cout: 1, k: 3, stride: 2, padding: 1, groups: 1 };
        assert_eq!(g.tout(), 4);
    }

    #[test]
    fn diversity_examples() {
        assert!(diversity(&[0.25; 4]).abs() < 1e-15);
        assert!((diversity(&[1.0, 0.0, 0.0, 0.0]) - 0.75).abs() < 1e-15);
        assert!((diversity(&[0.5, 0.5, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!(bce_logit(800.0, 1.0).abs() < 1e-12);
        assert!((bce_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((bce_logit(0.0, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
