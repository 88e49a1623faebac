//! Fixed 2-D sinusoidal positional encoding for the frame grid.

use crate::grad::Tensor;

/// Encoding for an `h × w` grid at width `d_model` (must be divisible by 4:
/// half the channels encode x, half y, each as sin/cos pairs). Cell centers
/// are normalized to `[0,1]`; frequencies span geometrically from one cycle
/// per frame up to two cycles per cell, so the code discriminates at
/// sub-cell scale. Returns shape `[h*w, d_model]`.
pub fn grid_positional_encoding(h: usize, w: usize, d_model: usize) -> Tensor {
    assert!(d_model % 4 == 0, "d_model {} must be divisible by 4", d_model);
    let half = d_model / 2;
    let pairs = half / 2;
    let f_max = 2.0 * h.max(w) as f64;
    let freq = |i: usize| -> f64 {
        if pairs == 1 {
            1.0
        } else {
            f_max.powf((pairs - 1 - i) as f64 / (pairs - 1) as f64)
        }
    };
    let mut data = vec![0.0; h * w * d_model];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * d_model;
            let xn = (x as f64 + 0.5) / w as f64;
            let yn = (y as f64 + 0.5) / h as f64;
            for i in 0..pairs {
                let ang_x = xn * freq(i) * std::f64::consts::TAU;
                let ang_y = yn * freq(i) * std::f64::consts::TAU;
                data[row + 2 * i] = ang_x.sin();
                data[row + 2 * i + 1] = ang_x.cos();
                data[row + half + 2 * i] = ang_y.sin();
                data[row + half + 2 * i + 1] = ang_y.cos();
            }
        }
    }
    Tensor::new(vec![h * w, d_model], data).expect("positional encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let a = grid_positional_encoding(3, 4, 8);
        assert_eq!(a.shape(), &[12, 8]);
        let b = grid_positional_encoding(3, 4, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_cells_get_distinct_codes() {
        let pe = grid_positional_encoding(4, 4, 16);
        let d = pe.data();
        for i in 0..16 {
            for j in (i + 1)..16 {
                let same = (0..16).all(|k| (d[i * 16 + k] - d[j * 16 + k]).abs() < 1e-12);
                assert!(!same, "cells {} and {} share an encoding", i, j);
            }
        }
    }
}
