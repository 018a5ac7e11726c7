//! Exact Euclidean distance transform (two-pass lower-envelope algorithm)
//! and boundary extraction.

use ndarray::Array2;

const BIG: f64 = 1e20;

/// 1-d squared distance transform by lower envelope of parabolas.
fn dt1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -BIG;
    z[1] = BIG;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = BIG;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = ((q as isize - p as isize) * (q as isize - p as isize)) as f64 + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest `true` site, per pixel.
/// Pixels of an all-false mask get [`BIG`]-scale values.
pub fn squared_edt(sites: &Array2<bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut g = Array2::<f64>::zeros((h, w));
    // columns: 1-d transform over rows of the 0/BIG indicator
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if sites[[y, x]] { 0.0 } else { BIG };
        }
        dt1d(&col_in, &mut col_out);
        for y in 0..h {
            g[[y, x]] = col_out[y];
        }
    }
    // rows: add horizontal displacement
    let mut row_in = vec![0.0f64; w];
    let mut row_out = vec![0.0f64; w];
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            row_in[x] = g[[y, x]];
        }
        dt1d(&row_in, &mut row_out);
        for x in 0..w {
            out[[y, x]] = row_out[x];
        }
    }
    out
}

/// Foreground pixels with at least one background 4-neighbor; the image
/// border counts as background.
pub fn boundary_mask(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        let up = y == 0 || !mask[[y - 1, x]];
        let down = y + 1 == h || !mask[[y + 1, x]];
        let left = x == 0 || !mask[[y, x - 1]];
        let right = x + 1 == w || !mask[[y, x + 1]];
        up || down || left || right
    })
}

/// Pixel coordinates of the boundary of a mask.
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    boundary_mask(mask)
        .indexed_iter()
        .filter_map(|((y, x), &b)| b.then_some((y, x)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_bruteforce_on_random_masks() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let sites = Array2::from_shape_fn((17, 13), |_| rng.gen_bool(0.2));
            if sites.iter().all(|&s| !s) {
                continue;
            }
            let fast = squared_edt(&sites);
            let pts: Vec<(usize, usize)> =
                sites.indexed_iter().filter_map(|(p, &s)| s.then_some(p)).collect();
            for ((y, x), d) in fast.indexed_iter() {
                let brute = pts
                    .iter()
                    .map(|&(sy, sx)| {
                        let dy = y as f64 - sy as f64;
                        let dx = x as f64 - sx as f64;
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(*d, brute, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn boundary_of_solid_block_is_its_ring() {
        let mut mask = Array2::from_elem((6, 6), false);
        for y in 1..5 {
            for x in 1..5 {
                mask[[y, x]] = true;
            }
        }
        let b = boundary_mask(&mask);
        assert!(!b[[2, 2]] && !b[[3, 3]], "interior is not boundary");
        assert!(b[[1, 1]] && b[[1, 4]] && b[[4, 1]] && b[[4, 4]]);
        assert_eq!(boundary_pixels(&mask).len(), 12);
    }

    #[test]
    fn border_pixels_are_boundary() {
        let mask = Array2::from_elem((4, 4), true);
        let b = boundary_mask(&mask);
        assert!(b[[0, 0]] && b[[0, 3]] && b[[3, 0]]);
        assert!(!b[[1, 1]] && !b[[2, 2]]);
    }
}
