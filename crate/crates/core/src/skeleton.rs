//! Articulated-body skeletons and the fixed joint attention mask.
//!
//! Each joint attends to itself, its kinematic neighbours and its left/right
//! counterpart. Nothing else.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_count: usize,
    pub names: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub symmetric_pairs: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NameCount { expected: usize, found: usize },
    IndexOutOfRange { kind: &'static str, pair: [usize; 2] },
    SelfEdge(usize),
    DuplicateEdge([usize; 2]),
    SelfPair(usize),
    DuplicatePair([usize; 2]),
    JointInSeveralPairs(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NameCount { expected, found } => {
                write!(f, "expected {expected} joint names, found {found}")
            }
            Violation::IndexOutOfRange { kind, pair } => {
                write!(f, "{kind} [{}, {}] references a joint out of range", pair[0], pair[1])
            }
            Violation::SelfEdge(j) => write!(f, "self-edge at joint {j}"),
            Violation::DuplicateEdge(e) => write!(f, "duplicate edge [{}, {}]", e[0], e[1]),
            Violation::SelfPair(j) => write!(f, "joint {j} paired with itself"),
            Violation::DuplicatePair(p) => write!(f, "duplicate symmetric pair [{}, {}]", p[0], p[1]),
            Violation::JointInSeveralPairs(j) => {
                write!(f, "joint {j} appears in more than one symmetric pair")
            }
        }
    }
}

fn unordered(p: [usize; 2]) -> [usize; 2] {
    [p[0].min(p[1]), p[0].max(p[1])]
}

/// Every breach of the skeleton invariants, in a stable order.
pub fn validate_spec(spec: &SkeletonSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let j = spec.joint_count;
    if spec.names.len() != j {
        out.push(Violation::NameCount {
            expected: j,
            found: spec.names.len(),
        });
    }
    let mut seen = HashSet::new();
    for e in &spec.edges {
        if e[0] >= j || e[1] >= j {
            out.push(Violation::IndexOutOfRange { kind: "edge", pair: *e });
        } else if e[0] == e[1] {
            out.push(Violation::SelfEdge(e[0]));
        } else if !seen.insert(unordered(*e)) {
            out.push(Violation::DuplicateEdge(*e));
        }
    }
    let mut seen = HashSet::new();
    let mut paired = HashSet::new();
    for p in &spec.symmetric_pairs {
        if p[0] >= j || p[1] >= j {
            out.push(Violation::IndexOutOfRange {
                kind: "symmetric pair",
                pair: *p,
            });
        } else if p[0] == p[1] {
            out.push(Violation::SelfPair(p[0]));
        } else if !seen.insert(unordered(*p)) {
            out.push(Violation::DuplicatePair(*p));
        } else {
            for joint in p {
                if !paired.insert(*joint) {
                    out.push(Violation::JointInSeveralPairs(*joint));
                }
            }
        }
    }
    out
}

impl SkeletonSpec {
    /// 16-joint MPII layout with the usual kinematic tree and six left/right pairs.
    pub fn mpii() -> Self {
        let names = [
            "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
            "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
            "l_elbow", "l_wrist",
        ];
        SkeletonSpec {
            joint_count: 16,
            names: names.iter().map(|s| s.to_string()).collect(),
            edges: vec![
                [0, 1],
                [1, 2],
                [2, 6],
                [3, 6],
                [3, 4],
                [4, 5],
                [6, 7],
                [7, 8],
                [8, 9],
                [7, 12],
                [7, 13],
                [10, 11],
                [11, 12],
                [13, 14],
                [14, 15],
            ],
            symmetric_pairs: vec![[0, 5], [1, 4], [2, 3], [10, 15], [11, 14], [12, 13]],
        }
    }

    /// Five-joint figure used for desk-scale runs.
    pub fn toy5() -> Self {
        SkeletonSpec {
            joint_count: 5,
            names: ["head_top", "neck", "l_hand", "r_hand", "pelvis"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            edges: vec![[0, 1], [1, 2], [1, 3], [1, 4]],
            symmetric_pairs: vec![[2, 3]],
        }
    }

    /// Built-in skeleton for a joint count, if there is one.
    pub fn builtin(joint_count: usize) -> Option<Self> {
        match joint_count {
            16 => Some(Self::mpii()),
            5 => Some(Self::toy5()),
            _ => None,
        }
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.edges.iter().filter(|e| e.contains(&joint)).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SkeletonSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }
}

/// Constant J×J mask over keypoint tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointMask {
    mask: AttentionMask,
}

pub fn compile_joint_mask(spec: &SkeletonSpec) -> Result<JointMask> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        return Err(Error::Validation(violations.iter().map(ToString::to_string).collect()));
    }
    let j = spec.joint_count;
    let mut bits = vec![false; j * j];
    for i in 0..j {
        bits[i * j + i] = true;
    }
    for [a, b] in spec.edges.iter().chain(&spec.symmetric_pairs) {
        bits[a * j + b] = true;
        bits[b * j + a] = true;
    }
    Ok(JointMask {
        mask: AttentionMask::from_bits(j, j, bits)?,
    })
}

impl JointMask {
    pub fn joints(&self) -> usize {
        self.mask.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j)
    }

    pub fn as_mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Fully connected mask; the graph stack then matches plain attention.
    pub fn dense(joints: usize) -> Self {
        JointMask {
            mask: AttentionMask::all_ones(joints, joints),
        }
    }

    pub fn identity(joints: usize) -> Self {
        JointMask {
            mask: AttentionMask::identity(joints),
        }
    }

    pub fn total(&self) -> usize {
        self.mask.total_support()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_joint_graph_is_complete() {
        let spec = SkeletonSpec {
            joint_count: 2,
            names: vec!["a".into(), "b".into()],
            edges: vec![[0, 1]],
            symmetric_pairs: vec![],
        };
        let m = compile_joint_mask(&spec).unwrap();
        assert_eq!(m.as_mask().bits(), &[true, true, true, true]);
    }

    #[test]
    fn left_shoulder_row() {
        let spec = SkeletonSpec::mpii();
        let m = compile_joint_mask(&spec).unwrap();
        let l_shoulder = 13;
        let kept: Vec<usize> = (0..16).filter(|j| m.get(l_shoulder, *j)).collect();
        // itself, thorax (kinematic neighbour), right shoulder (symmetric), left elbow
        assert_eq!(kept, vec![7, 12, 13, 14]);
    }

    #[test]
    fn mpii_row_support_recount() {
        let spec = SkeletonSpec::mpii();
        let m = compile_joint_mask(&spec).unwrap();
        for i in 0..16 {
            let degree = spec.edges.iter().filter(|e| e[0] == i || e[1] == i).count();
            let partner = spec.symmetric_pairs.iter().any(|p| p.contains(&i)) as usize;
            assert_eq!(m.as_mask().row_support()[i], 1 + degree + partner, "joint {i}");
        }
    }

    #[test]
    fn violations() {
        assert!(validate_spec(&SkeletonSpec::mpii()).is_empty());
        assert!(validate_spec(&SkeletonSpec::toy5()).is_empty());

        let mut spec = SkeletonSpec::toy5();
        spec.edges.push([0, 0]);
        let v: Vec<String> = validate_spec(&spec).iter().map(ToString::to_string).collect();
        assert_eq!(v, vec!["self-edge at joint 0"]);

        let mut spec = SkeletonSpec::toy5();
        spec.symmetric_pairs.push([2, 4]);
        let v = validate_spec(&spec);
        assert_eq!(v, vec![Violation::JointInSeveralPairs(2)]);

        let mut spec = SkeletonSpec::toy5();
        spec.edges.push([1, 0]);
        spec.edges.push([0, 9]);
        spec.names.pop();
        assert_eq!(validate_spec(&spec).len(), 3);
        assert!(matches!(compile_joint_mask(&spec), Err(Error::Validation(v)) if v.len() == 3));
    }

    #[test]
    fn json_round_trip() {
        let spec = SkeletonSpec::mpii();
        let back: SkeletonSpec = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        let v: serde_json::Value = serde_json::from_str(&spec.to_json()).unwrap();
        for key in ["joint_count", "names", "edges", "symmetric_pairs"] {
            assert!(v.get(key).is_some());
        }
    }

    fn random_spec() -> impl Strategy<Value = SkeletonSpec> {
        (2usize..12).prop_flat_map(|j| {
            let pairs: Vec<[usize; 2]> = (0..j).flat_map(|a| (a + 1..j).map(move |b| [a, b])).collect();
            let n = pairs.len();
            (
                Just(j),
                Just(pairs),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(any::<bool>(), j / 2),
            )
                .prop_map(|(j, pairs, edge_sel, sym_sel)| {
                    let edges = pairs.iter().zip(&edge_sel).filter(|(_, s)| **s).map(|(p, _)| *p).collect();
                    let symmetric_pairs = (0..j / 2)
                        .filter(|k| sym_sel[*k])
                        .map(|k| [2 * k, 2 * k + 1])
                        .collect();
                    SkeletonSpec {
                        joint_count: j,
                        names: (0..j).map(|i| format!("j{i}")).collect(),
                        edges,
                        symmetric_pairs,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn compiled_masks_are_symmetric_with_full_diagonal(spec in random_spec()) {
            let m = compile_joint_mask(&spec).unwrap();
            let j = spec.joint_count;
            for a in 0..j {
                prop_assert!(m.get(a, a));
                for b in 0..j {
                    prop_assert_eq!(m.get(a, b), m.get(b, a));
                }
            }
            prop_assert_eq!(compile_joint_mask(&spec).unwrap(), m.clone());
            let bound = j + 2 * spec.edges.len() + 2 * spec.symmetric_pairs.len();
            let edge_set: HashSet<[usize; 2]> = spec.edges.iter().map(|e| unordered(*e)).collect();
            let overlap = spec.symmetric_pairs.iter().filter(|p| edge_set.contains(&unordered(**p))).count();
            prop_assert!(m.total() <= bound);
            prop_assert_eq!(m.total(), bound - 2 * overlap);
        }
    }
}
