use crate::error::{Error, Result};

/// Number of winners kept by a hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WinnerCount {
    /// Full width: plain ReLU.
    Dense,
    Top(usize),
}

impl WinnerCount {
    /// Winner count for a layer of `width` neurons.
    pub fn resolve(self, width: usize) -> usize {
        match self {
            WinnerCount::Dense => width,
            WinnerCount::Top(k) => k.min(width),
        }
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, WinnerCount::Top(_))
    }
}

/// ReLU, retain mask, then top-`k` among the surviving strictly positive
/// values. Ties at the k-th value go to the lowest index.
///
/// Returns the activation vector and the ascending winner indices.
pub fn kwinner_forward(z: &[f64], k: usize, retain: Option<&[bool]>) -> Result<(Vec<f64>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-winner needs k >= 1".into()));
    }
    if k > z.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds layer width {}",
            z.len()
        )));
    }
    if let Some(mask) = retain {
        if mask.len() != z.len() {
            return Err(Error::Shape {
                op: "kwinner_forward",
                left: (z.len(), 1),
                right: (mask.len(), 1),
            });
        }
    }
    let mut scratch = Vec::with_capacity(z.len());
    let winners = select_winners(z, k, retain, &mut scratch);
    let mut out = vec![0.0; z.len()];
    for &j in &winners {
        out[j] = z[j];
    }
    Ok((out, winners))
}

/// Core selection used by the batched forward pass. `scratch` is reused
/// between calls to avoid allocation.
pub(crate) fn select_winners(
    z: &[f64],
    k: usize,
    retain: Option<&[bool]>,
    scratch: &mut Vec<usize>,
) -> Vec<usize> {
    scratch.clear();
    for (j, &v) in z.iter().enumerate() {
        if v > 0.0 && retain.map_or(true, |m| m[j]) {
            scratch.push(j);
        }
    }
    if scratch.len() > k {
        let by_rank = |a: &usize, b: &usize| z[*b].total_cmp(&z[*a]).then(a.cmp(b));
        scratch.select_nth_unstable_by(k - 1, by_rank);
        scratch.truncate(k);
    }
    let mut winners = scratch.clone();
    winners.sort_unstable();
    winners
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_two() {
        let (a, w) = kwinner_forward(&[3.0, 1.0, 4.0, 1.0, 5.0], 2, None).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 4.0, 0.0, 5.0]);
        assert_eq!(w, vec![2, 4]);
    }

    #[test]
    fn relu_kills_everything() {
        for k in 1..=3 {
            let (a, w) = kwinner_forward(&[-1.0, -2.0, -3.0], k, None).unwrap();
            assert_eq!(a, vec![0.0; 3]);
            assert!(w.is_empty());
        }
    }

    #[test]
    fn masked_neuron_cannot_win() {
        let mask = [true, true, true, true, false];
        let (a, w) = kwinner_forward(&[3.0, 1.0, 4.0, 1.0, 5.0], 2, Some(&mask)).unwrap();
        assert_eq!(a, vec![3.0, 0.0, 4.0, 0.0, 0.0]);
        assert_eq!(w, vec![0, 2]);
    }

    #[test]
    fn fewer_positive_than_k() {
        let (a, w) = kwinner_forward(&[-1.0, 2.0, 0.0, 3.0], 3, None).unwrap();
        assert_eq!(a, vec![0.0, 2.0, 0.0, 3.0]);
        assert_eq!(w, vec![1, 3]);
    }

    #[test]
    fn ties_resolved_by_lowest_index() {
        let (_, w) = kwinner_forward(&[1.0, 2.0, 2.0, 2.0], 2, None).unwrap();
        assert_eq!(w, vec![1, 2]);
    }

    #[test]
    fn k_larger_than_width_rejected() {
        assert!(kwinner_forward(&[1.0, 2.0], 3, None).is_err());
        assert!(kwinner_forward(&[1.0, 2.0], 0, None).is_err());
    }
}
