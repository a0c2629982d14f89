use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Width of the coordinate embedding for `bands` frequency bands.
pub fn embed_width(bands: usize) -> usize {
    2 + 4 * bands
}

/// Fourier features of 2D coordinates.
///
/// Row layout: `[x, sin(2^0 x), cos(2^0 x), .., sin(2^(L-1) x), cos(2^(L-1) x)]`
/// where each term is the 2-vector of both axes. Expects `|x| <= 1`.
pub fn fourier_embed<T: Scalar>(x: &Tensor<T>, bands: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 2 || d[1] != 2 {
        return Err(Error::Shape(format!("fourier_embed expects [N, 2], got {d:?}")));
    }
    let width = embed_width(bands);
    let mut out = Vec::with_capacity(d[0] * width);
    for p in x.as_slice().chunks(2) {
        out.extend_from_slice(p);
        for l in 0..bands {
            let f = lit::<T>((1u64 << l) as f64);
            let (a, b) = (p[0] * f, p[1] * f);
            out.extend([a.sin(), b.sin(), a.cos(), b.cos()]);
        }
    }
    Tensor::new([d[0], width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn width_formula() {
        let x = Tensor::<f32>::zeros([5, 2]).unwrap();
        assert_eq!(fourier_embed(&x, 10).unwrap().dims(), &[5, 42]);
        assert_eq!(fourier_embed(&x, 0).unwrap().dims(), &[5, 2]);
    }

    #[test]
    fn origin_gives_zero_sines_and_unit_cosines() {
        let x = Tensor::<f64>::zeros([1, 2]).unwrap();
        let e = fourier_embed(&x, 3).unwrap();
        assert_eq!(
            e.as_slice(),
            &[0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 1., 1.]
        );
    }

    #[test]
    fn single_band_symmetry() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, -1.0]).unwrap();
        let e = fourier_embed(&x, 1).unwrap();
        let s1 = 1f64.sin();
        let c1 = 1f64.cos();
        assert_eq!(e.as_slice(), &[1.0, -1.0, s1, -s1, c1, c1]);
    }

    #[test]
    fn rejects_wrong_shape() {
        assert!(fourier_embed(&Tensor::<f32>::zeros([3]).unwrap(), 2).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_and_lipschitz(
            a in -1.0f64..1.0, b in -1.0f64..1.0, da in -1e-3f64..1e-3, db in -1e-3f64..1e-3,
            bands in 0usize..=20,
        ) {
            let x = Tensor::new([1, 2], vec![a, b]).unwrap();
            let e1 = fourier_embed(&x, bands).unwrap();
            prop_assert_eq!(e1.dims()[1], 2 + 4 * bands);
            prop_assert!(e1.bitwise_eq(&fourier_embed(&x, bands).unwrap()));
            let (a2, b2) = ((a + da).clamp(-1.0, 1.0), (b + db).clamp(-1.0, 1.0));
            let y = Tensor::new([1, 2], vec![a2, b2]).unwrap();
            let e2 = fourier_embed(&y, bands).unwrap();
            // each component is at most 2^(L-1)-Lipschitz in one coordinate
            let lip = if bands == 0 { 1.0 } else { (1u64 << (bands - 1)) as f64 };
            let step = (a2 - a).abs().max((b2 - b).abs());
            prop_assert!(e1.max_abs_diff(&e2).unwrap() <= lip * step + 1e-12);
        }
    }
}
