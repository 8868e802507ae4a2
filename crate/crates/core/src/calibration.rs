//! Unified geometric calibration: each branch is ℓ2-normalized, then the
//! two are concatenated as `[adapter; clip]`.

use crate::error::{Error, Result};

/// Norms at or below this are treated as corrupt features.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("feature branch"));
    }
    let norm = l2_norm(v);
    if norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateFeature {
            norm,
            eps: DEGENERATE_NORM,
        });
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// `[adapter/‖adapter‖ ; clip/‖clip‖]`. An empty slice means the branch is absent.
pub fn ugc_fuse(adapter: &[f64], clip: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(adapter.len() + clip.len());
    fuse_into(adapter, clip, &mut out)?;
    Ok(out)
}

/// Same as [`ugc_fuse`] for f32 storage, promoting to f64 first.
pub fn ugc_fuse_f32(adapter: &[f32], clip: &[f32]) -> Result<Vec<f64>> {
    let a: Vec<f64> = adapter.iter().map(|&v| v as f64).collect();
    let c: Vec<f64> = clip.iter().map(|&v| v as f64).collect();
    ugc_fuse(&a, &c)
}

fn fuse_into(adapter: &[f64], clip: &[f64], out: &mut Vec<f64>) -> Result<()> {
    if adapter.is_empty() && clip.is_empty() {
        return Err(Error::InvalidArgument(
            "both feature branches are absent".into(),
        ));
    }
    out.clear();
    out.extend_from_slice(adapter);
    out.extend_from_slice(clip);
    let (head, tail) = out.split_at_mut(adapter.len());
    if !head.is_empty() {
        normalize_in_place(head)?;
    }
    if !tail.is_empty() {
        normalize_in_place(tail)?;
    }
    Ok(())
}

/// Row-wise [`ugc_fuse`].
pub fn ugc_fuse_batch<'a>(
    pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
) -> Result<Vec<Vec<f64>>> {
    pairs.into_iter().map(|(a, c)| ugc_fuse(a, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn unit_vector_unchanged() {
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn fuse_hand_example() {
        let f = ugc_fuse(&[3.0, 4.0], &[1.0, 0.0]).unwrap();
        assert_eq!(f, vec![0.6, 0.8, 1.0, 0.0]);
        assert!((l2_norm(&f) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_branch() {
        assert_eq!(ugc_fuse(&[0.0, 5.0], &[]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(ugc_fuse(&[], &[0.0, -2.0]).unwrap(), vec![0.0, -1.0]);
    }

    #[test]
    fn symmetric_pair() {
        let f = ugc_fuse(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        for v in f {
            assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn errors() {
        assert!(ugc_fuse(&[], &[]).is_err());
        assert!(matches!(
            ugc_fuse(&[1.0], &[0.0, 0.0]),
            Err(Error::DegenerateFeature { .. })
        ));
        assert!(matches!(
            ugc_fuse(&[f64::INFINITY], &[1.0]),
            Err(Error::NonFinite(_))
        ));
    }
}
