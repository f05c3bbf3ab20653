use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, BinaryMask};

/// Where a set of mask proposals came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalOrigin {
    Builtin,
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposalSet {
    pub masks: Vec<BinaryMask>,
    pub origin: ProposalOrigin,
}

/// Fraction of a proposal that must lie inside the mask to count as contained.
pub const CONTAINMENT: f64 = 0.99;

/// Indices selected by the union rule: every proposal (almost) contained in
/// `t`, plus the proposal with the highest IoU (lowest index on ties).
pub fn selected_proposals(
    t: &BinaryMask,
    proposals: &[BinaryMask],
    containment: f64,
) -> Result<Vec<usize>> {
    if proposals.is_empty() {
        return Err(Error::Empty(
            "proposal refinement needs at least one mask proposal".into(),
        ));
    }
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for (i, m) in proposals.iter().enumerate() {
        if m.dim() != t.dim() {
            return Err(Error::ShapeMismatch(format!(
                "proposal {i} is {:?}, mask is {:?}",
                m.dim(),
                t.dim()
            )));
        }
        let iou = masks::iou(m, t);
        if iou > best_iou {
            best = i;
            best_iou = iou;
        }
        if masks::area(m) > 0 && masks::containment(m, t) >= containment {
            out.push(i);
        }
    }
    if !out.contains(&best) {
        out.push(best);
        out.sort_unstable();
    }
    Ok(out)
}

/// Union of the [`selected_proposals`].
pub fn refine_with_proposals(
    t: &BinaryMask,
    proposals: &[BinaryMask],
    containment: f64,
) -> Result<BinaryMask> {
    let sel = selected_proposals(t, proposals, containment)?;
    let mut out = BinaryMask::from_elem(t.dim(), false);
    for i in sel {
        out.zip_mut_with(&proposals[i], |o, &m| *o |= m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    #[test]
    fn single_equal_proposal() {
        let t = rect(8, 8, 1, 1, 5, 6);
        assert_eq!(
            refine_with_proposals(&t, std::slice::from_ref(&t), CONTAINMENT).unwrap(),
            t
        );
    }

    #[test]
    fn contained_best_and_disjoint() {
        let t = rect(8, 8, 0, 0, 6, 6);
        let m1 = rect(8, 8, 0, 0, 2, 2);
        let m2 = rect(8, 8, 1, 1, 7, 7);
        let m3 = rect(8, 8, 7, 0, 8, 3);
        let got = refine_with_proposals(&t, &[m1.clone(), m2.clone(), m3], CONTAINMENT).unwrap();
        let want = BinaryMask::from_shape_fn((8, 8), |p| m1[p] || m2[p]);
        assert_eq!(got, want);
    }

    #[test]
    fn falls_back_to_best_proposal() {
        let t = rect(8, 8, 2, 2, 5, 5);
        let a = rect(8, 8, 1, 1, 6, 6);
        let b = rect(8, 8, 0, 0, 8, 8);
        assert_eq!(
            refine_with_proposals(&t, &[b, a.clone()], CONTAINMENT).unwrap(),
            a
        );
        assert!(refine_with_proposals(&t, &[], CONTAINMENT).is_err());
    }

    /// Enumerates every subset and keeps the one that satisfies the
    /// membership rule written out pixel by pixel.
    fn oracle(t: &[Vec<bool>], props: &[Vec<Vec<bool>>]) -> Vec<Vec<bool>> {
        let (h, w) = (t.len(), t[0].len());
        let count = |m: &Vec<Vec<bool>>, f: &dyn Fn(usize, usize) -> bool| {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| m[y][x] && f(y, x))
                .count()
        };
        let ious: Vec<f64> = props
            .iter()
            .map(|m| {
                let inter = count(m, &|y, x| t[y][x]);
                let a = count(m, &|_, _| true);
                let b = t.iter().flatten().filter(|&&v| v).count();
                let uni = a + b - inter;
                if uni == 0 {
                    0.0
                } else {
                    inter as f64 / uni as f64
                }
            })
            .collect();
        let top = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let arg = ious.iter().position(|&v| v == top).unwrap();
        let member = |i: usize| {
            let a = count(&props[i], &|_, _| true);
            let inside = count(&props[i], &|y, x| t[y][x]);
            i == arg || (a > 0 && inside as f64 >= 0.99 * a as f64)
        };
        let n = props.len();
        let mut answer = None;
        for bits in 0u32..(1 << n) {
            if (0..n).all(|i| ((bits >> i) & 1 == 1) == member(i)) {
                assert!(answer.is_none());
                answer = Some(bits);
            }
        }
        let bits = answer.unwrap();
        let mut out = vec![vec![false; w]; h];
        for i in (0..n).filter(|i| (bits >> i) & 1 == 1) {
            for y in 0..h {
                for x in 0..w {
                    out[y][x] |= props[i][y][x];
                }
            }
        }
        out
    }

    fn to_vec(m: &BinaryMask) -> Vec<Vec<bool>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn blob() -> impl Strategy<Value = (usize, usize, usize, usize)> {
        (0usize..16, 0usize..16, 1usize..10, 1usize..10)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_subset_enumeration(
            size in 4usize..=16,
            t_rects in prop::collection::vec(blob(), 1..3),
            p_rects in prop::collection::vec(prop::collection::vec(blob(), 1..3), 1..=8),
        ) {
            let paint = |rs: &[(usize, usize, usize, usize)]| {
                BinaryMask::from_shape_fn((size, size), |(y, x)| {
                    rs.iter().any(|&(y0, x0, hh, ww)| {
                        let (y0, x0) = (y0 % size, x0 % size);
                        y >= y0 && y < y0 + hh && x >= x0 && x < x0 + ww
                    })
                })
            };
            let t = paint(&t_rects);
            let props: Vec<BinaryMask> = p_rects.iter().map(|r| paint(r)).collect();
            let got = refine_with_proposals(&t, &props, CONTAINMENT).unwrap();
            let want = oracle(&to_vec(&t), &props.iter().map(to_vec).collect::<Vec<_>>());
            prop_assert_eq!(to_vec(&got), want);
        }
    }
}
