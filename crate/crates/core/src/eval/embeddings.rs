use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{invalid, Error, Result};

/// PCA projections of a set of embedding vectors.
#[derive(Debug, Clone)]
pub struct Reduction {
    /// `[n, k]` with `k = min(128, dim, n - 1)`, components in decreasing variance.
    pub reduced: Array2<f64>,
    /// `[n, 2]` (or `[n, k]` when `k < 2`).
    pub coords: Array2<f64>,
    /// Variance captured by each of the `k` components.
    pub explained_variance: Vec<f64>,
    /// Unit-norm principal directions as rows, `[k, dim]`.
    pub components: Array2<f64>,
}

/// Centred PCA to at most `max_components`.
///
/// Eigenvectors come from the smaller of the covariance and Gram matrices.
/// Each direction's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn pca(x: &Array2<f64>, max_components: usize) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    pca_via(x, max_components, x.ncols() > x.nrows())
}

fn pca_via(
    x: &Array2<f64>,
    max_components: usize,
    use_gram: bool,
) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return invalid(format!("PCA needs at least 2 vectors, got {n}"));
    }
    if d == 0 || !x.iter().all(|v| v.is_finite()) {
        return invalid("PCA input must be non-empty and finite");
    }
    let k = max_components.min(d).min(n - 1).max(1);
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centred = x - &mean;
    let m = DMatrix::from_row_iterator(n, d, centred.iter().copied());
    let mut dirs = DMatrix::<f64>::zeros(k, d);
    let mut variances = Vec::with_capacity(k);
    if !use_gram {
        let cov = m.transpose() * &m / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        for (row, &i) in order.iter().take(k).enumerate() {
            dirs.set_row(row, &eig.eigenvectors.column(i).transpose());
            variances.push(eig.eigenvalues[i].max(0.0));
        }
    } else {
        // Right singular vectors from the Gram matrix: v = X^T u / |X^T u|.
        let gram = &m * m.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        for (row, &i) in order.iter().take(k).enumerate() {
            let v = m.transpose() * eig.eigenvectors.column(i);
            let norm = v.norm();
            let v = if norm > 0.0 { v / norm } else { v };
            dirs.set_row(row, &v.transpose());
            variances.push(eig.eigenvalues[i].max(0.0) / (n - 1) as f64);
        }
    }
    for mut row in dirs.row_iter_mut() {
        let pivot = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            row.neg_mut();
        }
    }
    let proj = &m * dirs.transpose();
    let reduced = Array2::from_shape_fn((n, k), |(i, j)| proj[(i, j)]);
    let components = Array2::from_shape_fn((k, d), |(i, j)| dirs[(i, j)]);
    Ok((reduced, components, variances))
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// PCA to 128 dimensions, then PCA of that to 2-D coordinates.
pub fn reduce_embeddings(x: &Array2<f64>) -> Result<Reduction> {
    let (reduced, components, explained_variance) = pca(x, 128)?;
    let coords = if reduced.ncols() <= 2 {
        reduced.clone()
    } else {
        pca(&reduced, 2)?.0
    };
    Ok(Reduction {
        reduced,
        coords,
        explained_variance,
        components,
    })
}

/// Writes a little-endian float64 C-order `.npy` (format 1.0).
pub fn write_npy(path: impl AsRef<Path>, x: &Array2<f64>) -> Result<()> {
    write_npy_dyn(path, &x.view().into_dyn())
}

/// [`write_npy`] for any number of dimensions.
pub fn write_npy_dyn(path: impl AsRef<Path>, x: &ndarray::ArrayViewD<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    let shape = match x.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64 bytes.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + 8 * x.len());
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in x.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scatter plot of 2-D coordinates as a standalone SVG, one colour per class.
pub fn scatter_svg(coords: &Array2<f64>, classes: &[String]) -> Result<String> {
    if coords.ncols() < 2 || coords.nrows() != classes.len() {
        return invalid("scatter needs [n, 2] coordinates and one class per row");
    }
    const SIZE: f64 = 480.0;
    const PAD: f64 = 40.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut names: Vec<&str> = classes.iter().map(String::as_str).collect();
    names.sort_unstable();
    names.dedup();
    let range = |j: usize| {
        let col = coords.column(j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (range(0), range(1));
    let mut svg = String::new();
    let w = SIZE + 2.0 * PAD + 120.0;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#,
        SIZE + 2.0 * PAD
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, class) in classes.iter().enumerate() {
        let c = palette[names.binary_search(&class.as_str()).unwrap_or(0) % palette.len()];
        let px = PAD + (coords[[i, 0]] - x0) / xs * SIZE;
        let py = PAD + SIZE - (coords[[i, 1]] - y0) / ys * SIZE;
        let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{c}" fill-opacity="0.7"/>"#);
    }
    for (k, name) in names.iter().enumerate() {
        let y = PAD + 18.0 * k as f64;
        let c = palette[k % palette.len()];
        let _ = writeln!(svg, r#"<circle cx="{}" cy="{y}" r="5" fill="{c}"/>"#, SIZE + PAD + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{name}</text>"#, SIZE + PAD + 30.0, y + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// CSV of `id,class,x,y`.
pub fn write_coords_csv(writer: impl Write, ids: &[String], classes: &[String], coords: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "class", "x", "y"])?;
    for i in 0..coords.nrows() {
        let y = if coords.ncols() > 1 { coords[[i, 1]] } else { 0.0 };
        w.write_record([
            ids[i].as_str(),
            classes[i].as_str(),
            &format!("{:?}", coords[[i, 0]]),
            &format!("{y:?}"),
        ])?;
    }
    w.flush().map_err(|e| Error::Validation(format!("cannot write coordinates: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_dimensional_input_is_an_orthonormal_change_of_basis() {
        let x = random(50, 2, 1);
        let r = reduce_embeddings(&x).unwrap();
        let c = &r.components;
        let gram = c.dot(&c.t());
        for i in 0..2 {
            for j in 0..2 {
                assert!((gram[[i, j]] - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
        // Pairwise distances are preserved.
        for (a, b) in [(0, 1), (3, 17), (10, 49)] {
            let d_in = (&x.row(a) - &x.row(b)).mapv(|v| v * v).sum();
            let d_out = (&r.coords.row(a) - &r.coords.row(b)).mapv(|v| v * v).sum();
            assert!((d_in - d_out).abs() < 1e-10);
        }
    }

    fn reconstruction_error(x: &Array2<f64>, k: usize) -> f64 {
        let (proj, comps, _) = pca(x, k).unwrap();
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let back = proj.dot(&comps) + &mean;
        (x - &back).mapv(|v| v * v).sum()
    }

    #[test]
    fn more_components_never_reconstruct_worse() {
        let x = random(200, 150, 2);
        let e128 = reconstruction_error(&x, 128);
        let e64 = reconstruction_error(&x, 64);
        assert!(e128 <= e64);
        let r = reduce_embeddings(&x).unwrap();
        assert_eq!(r.reduced.dim(), (200, 128));
        assert_eq!(r.coords.dim(), (200, 2));
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        let x = random(20, 8, 3);
        let (a, ca, va) = pca_via(&x, 5, false).unwrap();
        let (b, cb, vb) = pca_via(&x, 5, true).unwrap();
        for (p, q) in a.iter().zip(&b).chain(ca.iter().zip(&cb)).chain(va.iter().zip(&vb)) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        let (_, _, v) = pca(&random(12, 30, 4), 100).unwrap();
        assert_eq!(v.len(), 11);
        assert!(pca(&random(1, 4, 0), 2).is_err());
    }

    #[test]
    fn npy_header_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.npy");
        let x = random(3, 4, 5);
        write_npy(&p, &x).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 8 * 12);
        let first = f64::from_le_bytes(bytes[10 + hlen..18 + hlen].try_into().unwrap());
        assert_eq!(first, x[[0, 0]]);
    }

    #[test]
    fn svg_has_one_point_per_row() {
        let x = random(7, 2, 6);
        let classes: Vec<String> = (0..7).map(|i| if i % 2 == 0 { "a" } else { "b" }.into()).collect();
        let svg = scatter_svg(&x, &classes).unwrap();
        assert_eq!(svg.matches("r=\"3\"").count(), 7);
    }
}
