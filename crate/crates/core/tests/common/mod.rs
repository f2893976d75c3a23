#![allow(dead_code)]

use nalgebra::DMatrix;

/// Direct time-domain FDN with scalar per-line gains:
/// `s_i(n) = Σ_j U_ij g_j s_j(n − m_i) + b_i x(n − m_i)`, `y(n) = Σ_i c_i s_i(n)`.
pub fn time_domain_ir(delays: &[usize], u: &DMatrix<f64>, gains: &[f64], b: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    let n = delays.len();
    // Line i holds the values fed into it; sample t leaves the line m_i later.
    let mut lines: Vec<Vec<f64>> = delays.iter().map(|&m| vec![0.0; m]).collect();
    let mut heads = vec![0usize; n];
    let mut y = Vec::with_capacity(len);
    let mut out = vec![0.0; n];
    for t in 0..len {
        for i in 0..n {
            out[i] = lines[i][heads[i]];
        }
        y.push(out.iter().zip(c).map(|(s, c)| s * c).sum());
        let x = if t == 0 { 1.0 } else { 0.0 };
        for i in 0..n {
            let fb: f64 = (0..n).map(|j| u[(i, j)] * gains[j] * out[j]).sum();
            lines[i][heads[i]] = fb + b[i] * x;
            heads[i] = (heads[i] + 1) % delays[i];
        }
    }
    y
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
