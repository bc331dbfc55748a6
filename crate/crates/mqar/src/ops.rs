//! Dense building blocks with hand-written reverse passes.
//!
//! Activations are row-major `(rows, features)`; weights are `(in, out)`.

use gka::numerics::dot;

/// `x (n × din) · w (din × dout)`.
pub fn matmul(x: &[f64], n: usize, w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (i, xi) in xr.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let wi = &w[i * dout..(i + 1) * dout];
            yr.iter_mut().zip(wi).for_each(|(y, w)| *y += xi * w);
        }
    }
    y
}

/// `dy (n × dout) · wᵀ`.
pub fn matmul_grad_input(dy: &[f64], n: usize, w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for r in 0..n {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for i in 0..din {
            let wi = &w[i * dout..(i + 1) * dout];
            dx[r * din + i] = dot(wi, dyr);
        }
    }
    dx
}

/// `dw += xᵀ dy`.
pub fn matmul_grad_weight(x: &[f64], dy: &[f64], n: usize, din: usize, dout: usize, dw: &mut [f64]) {
    for r in 0..n {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for i in 0..din {
            let xi = x[r * din + i];
            if xi == 0.0 {
                continue;
            }
            let dwi = &mut dw[i * dout..(i + 1) * dout];
            dwi.iter_mut().zip(dyr).for_each(|(d, g)| *d += xi * g);
        }
    }
}

pub fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(y, b)| *y += b);
    }
}

pub fn bias_grad(dy: &[f64], db: &mut [f64]) {
    for row in dy.chunks(db.len()) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// RMS normalization with a learned scale. Returns the output and `1/rms` per row.
pub fn rmsnorm(x: &[f64], d: usize, scale: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for i in 0..d {
            yr[i] = xr[i] * r * scale[i];
        }
    }
    (y, inv)
}

pub fn rmsnorm_backward(x: &[f64], inv: &[f64], d: usize, scale: &[f64], dy: &[f64], dscale: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (row, r) in inv.iter().enumerate() {
        let xr = &x[row * d..(row + 1) * d];
        let dyr = &dy[row * d..(row + 1) * d];
        let mut dot = 0.0;
        for i in 0..d {
            let xh = xr[i] * r;
            dscale[i] += dyr[i] * xh;
            dot += dyr[i] * scale[i] * xh;
        }
        let m = dot / d as f64;
        for i in 0..d {
            let xh = xr[i] * r;
            dx[row * d + i] = r * (dyr[i] * scale[i] - xh * m);
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * sigmoid(*v)).collect()
}

pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(v, g)| {
            let s = sigmoid(*v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Causal depthwise convolution over time within each sequence.
///
/// `x` is `(batch·time, c)`, `w` is `(c, width)`; tap `width − 1` multiplies the current step.
pub fn causal_conv(x: &[f64], batch: usize, time: usize, c: usize, w: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..time {
            let yr = &mut y[(b * time + t) * c..(b * time + t + 1) * c];
            for j in 0..width {
                let Some(src) = (t + j + 1).checked_sub(width) else { continue };
                let xr = &x[(b * time + src) * c..(b * time + src + 1) * c];
                for ch in 0..c {
                    yr[ch] += w[ch * width + j] * xr[ch];
                }
            }
        }
    }
    y
}

pub fn causal_conv_backward(
    x: &[f64],
    batch: usize,
    time: usize,
    c: usize,
    w: &[f64],
    width: usize,
    dy: &[f64],
    dw: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..time {
            let dyr = &dy[(b * time + t) * c..(b * time + t + 1) * c];
            for j in 0..width {
                let Some(src) = (t + j + 1).checked_sub(width) else { continue };
                let base = (b * time + src) * c;
                for ch in 0..c {
                    dw[ch * width + j] += dyr[ch] * x[base + ch];
                    dx[base + ch] += dyr[ch] * w[ch * width + j];
                }
            }
        }
    }
    dx
}

/// Row-wise L2 normalization; zero rows stay zero. Returns the norms.
pub fn l2_normalize(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in y.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (y, norms)
}

/// Gradient through `x / ‖x‖` given the normalized rows `y`.
pub fn l2_normalize_backward(y: &[f64], norms: &[f64], d: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (row, n) in norms.iter().enumerate() {
        if *n == 0.0 {
            continue;
        }
        let yr = &y[row * d..(row + 1) * d];
        let dyr = &dy[row * d..(row + 1) * d];
        let yd = dot(yr, dyr);
        for i in 0..d {
            dx[row * d + i] = (dyr[i] - yr[i] * yd) / n;
        }
    }
    dx
}

/// Mean cross-entropy over rows; returns `(loss, dlogits, correct)`.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[usize]) -> (f64, Vec<f64>, usize) {
    let n = targets.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[*tgt];
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - m).exp() / z / n as f64;
        }
        g[*tgt] -= 1.0 / n as f64;
        if argmax(row) == *tgt {
            correct += 1;
        }
    }
    (loss / n.max(1) as f64, grad, correct)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `(b·t, h·d)` to `(b, h, t, d)`.
pub fn to_heads(x: &[f64], batch: usize, time: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..time {
            for h in 0..heads {
                let src = ((b * time + t) * heads + h) * d;
                let dst = ((b * heads + h) * time + t) * d;
                y[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    y
}

/// Inverse of [`to_heads`].
pub fn from_heads(x: &[f64], batch: usize, time: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..time {
            for h in 0..heads {
                let dst = ((b * time + t) * heads + h) * d;
                let src = ((b * heads + h) * time + t) * d;
                y[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    y
}
