//! Fixed sinusoidal positional encodings (1-d for token sequences, 2-d for
//! flattened spatial grids). Added to attention queries/keys only.

use ndarray::Array2;

/// Standard transformer sinusoidal table, `len x dim`.
pub fn sinusoidal_1d(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// 2-d grid encoding for `h*w` tokens in row-major order: the first half of
/// the channels encodes the row index, the rest the column index.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Array2<f64> {
    let dy = dim / 2;
    let dx = dim - dy;
    let pey = sinusoidal_1d(h, dy);
    let pex = sinusoidal_1d(w, dx);
    let mut pe = Array2::<f64>::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..dy {
                pe[[row, i]] = pey[[y, i]];
            }
            for i in 0..dx {
                pe[[row, dy + i]] = pex[[x, i]];
            }
        }
    }
    pe
}
