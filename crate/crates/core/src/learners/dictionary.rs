//! Polynomial feature dictionary for the lasso.

use nalgebra::DMatrix;

/// Number of dictionary columns for `p` inputs: `3p + p(p−1)/2`.
pub fn dictionary_width(p: usize) -> usize {
    3 * p + p * p.saturating_sub(1) / 2
}

/// Linears, squares, cubes, then pairwise interactions in lexicographic order.
pub fn extended_dictionary(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut out = DMatrix::<f64>::zeros(n, dictionary_width(p));
    fill_dictionary(x, 0, p, &mut out, 0);
    out
}

/// Dictionary applied separately to `blocks` equal contiguous column groups
/// and concatenated. With `blocks = 1` this is [`extended_dictionary`].
///
/// For stacked current and lagged covariates this expands each period on
/// its own, without cross-period interactions.
pub fn blockwise_dictionary(x: &DMatrix<f64>, blocks: usize) -> DMatrix<f64> {
    let (n, p) = x.shape();
    assert!(blocks >= 1 && p % blocks == 0, "columns must split evenly into blocks");
    let w = p / blocks;
    let q = dictionary_width(w);
    let mut out = DMatrix::<f64>::zeros(n, q * blocks);
    for b in 0..blocks {
        fill_dictionary(x, b * w, w, &mut out, b * q);
    }
    out
}

fn fill_dictionary(x: &DMatrix<f64>, c0: usize, p: usize, out: &mut DMatrix<f64>, o: usize) {
    let n = x.nrows();
    for j in 0..p {
        let src = x.column(c0 + j);
        for i in 0..n {
            let v = src[i];
            out[(i, o + j)] = v;
            out[(i, o + p + j)] = v * v;
            out[(i, o + 2 * p + j)] = v * v * v;
        }
    }
    let mut c = o + 3 * p;
    for j in 0..p {
        for k in (j + 1)..p {
            for i in 0..n {
                out[(i, c)] = x[(i, c0 + j)] * x[(i, c0 + k)];
            }
            c += 1;
        }
    }
}
