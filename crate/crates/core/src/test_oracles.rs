//! Independent brute-force oracles used only by unit tests. Kept free of any
//! code path they are checking: plain nested loops, no padding tricks, no
//! lane-split reductions.

/// Seven nested loops, zero padding, stride 1, 3x3x3 kernel.
pub fn naive_conv3d(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = d * h * w;
    let mut out = vec![0.0; batch * cout * plane];
    for n in 0..batch {
        for f in 0..cout {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = bias[f];
                        for c in 0..cin {
                            for kd in 0..3isize {
                                for kh in 0..3isize {
                                    for kw in 0..3isize {
                                        let (iz, iy, ix) = (z + kd - 1, y + kh - 1, x + kw - 1);
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let iv = input[(n * cin + c) * plane
                                            + (iz as usize * h + iy as usize) * w
                                            + ix as usize];
                                        let wv = weight[((f * cin + c) * 3 + kd as usize) * 9
                                            + kh as usize * 3
                                            + kw as usize];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[(n * cout + f) * plane
                            + (z as usize * h + y as usize) * w
                            + x as usize] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Blockwise 2x2x2 max scan; returns (pooled, within-plane argmax).
pub fn naive_maxpool3d(
    input: &[f64],
    planes: usize,
    d: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for p in 0..planes {
        let ch = &input[p * d * h * w..(p + 1) * d * h * w];
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * oz + dz) * h + (2 * oy + dy)) * w + 2 * ox + dx;
                                if ch[idx] > best {
                                    best = ch[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}
