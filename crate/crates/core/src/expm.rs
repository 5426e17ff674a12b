//! Dense matrix exponential by scaling and squaring with diagonal Padé
//! approximants of degree 3, 5, 7, 9 or 13 (Higham, 2005).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(U, V)` for a low-degree approximant, where `U` collects the odd terms.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut odd = DMatrix::<f64>::identity(n, n) * b[1];
    let mut even = DMatrix::<f64>::identity(n, n) * b[0];
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 1..b.len() / 2 {
        power = &power * &a2;
        odd += &power * b[2 * k + 1];
        even += &power * b[2 * k];
    }
    (a * odd, even)
}

fn pade_13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &B13;
    let w1 = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let w2 = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = a * (&a6 * w1 + w2);
    let z1 = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let z2 = &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let v = &a6 * z1 + z2;
    (u, v)
}

/// `exp(A)` for a square, finite `A`.
pub fn matrix_exponential(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "matrix exponential of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential of a non-finite matrix".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = one_norm(a);

    let (u, v, squarings) = if let Some(&(m, _)) = THETA.iter().find(|&&(_, t)| norm <= t) {
        let b: &[f64] = match m {
            3 => &B3,
            5 => &B5,
            7 => &B7,
            _ => &B9,
        };
        let (u, v) = pade_low(a, b);
        (u, v, 0)
    } else {
        let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
        let scaled = a * 2f64.powi(-s);
        let (u, v) = pade_13(&scaled);
        (u, v, s)
    };

    let numerator = &v + &u;
    let denominator = v - u;
    let mut result = denominator
        .lu()
        .solve(&numerator)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        (a - b).iter().map(|v| v.abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn zero_gives_identity() {
        let e = matrix_exponential(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e, DMatrix::identity(4, 4));
    }

    #[test]
    fn diagonal_at_every_degree() {
        for scale in [1e-3, 0.1, 0.5, 1.5, 4.0, 30.0, 300.0] {
            let d = [-1.0, 0.3, -2.2, 1.1].map(|x| x * scale);
            let a = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&d));
            let e = matrix_exponential(&a).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let expected = if i == j { d[i].exp() } else { 0.0 };
                    let err = (e[(i, j)] - expected).abs();
                    assert!(err <= 1e-12 * expected.abs().max(1.0), "scale {scale}: ({i},{j}) err {err}");
                }
            }
        }
    }

    #[test]
    fn nilpotent_truncates() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&a).unwrap();
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn rotation_generator() {
        for theta in [0.01, 0.7, 3.0, 25.0] {
            let a = DMatrix::from_row_slice(2, 2, &[0.0, -theta, theta, 0.0]);
            let e = matrix_exponential(&a).unwrap();
            let (s, c) = theta.sin_cos();
            let expected = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            assert!(max_rel_err(&e, &expected) < 1e-12, "theta {theta}");
        }
    }

    #[test]
    fn similarity_transform() {
        // A = S D S^-1 with a well-conditioned S.
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, -0.1, 1.0, 0.3, 0.0, 0.25, 1.0]);
        let s_inv = s.clone().try_inverse().unwrap();
        let d = [-0.5f64, -3.0, -12.0];
        let a = &s * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&d)) * &s_inv;
        let expected =
            &s * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(3, d.iter().map(|x| x.exp()))) * &s_inv;
        assert!(max_rel_err(&matrix_exponential(&a).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matrix_exponential(&a).is_err());
        assert!(matrix_exponential(&DMatrix::zeros(2, 3)).is_err());
        assert!(matches!(
            matrix_exponential(&DMatrix::from_element(1, 1, 1000.0)),
            Err(Error::Numerical(_))
        ));
    }
}
