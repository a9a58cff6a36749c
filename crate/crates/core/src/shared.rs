//! Sequence aggregation, the shared projection and classifier, and score
//! fusion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::Modality;

/// Reduction of a `T×D` sequence to one instance vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Avg,
    Max,
    /// Elementwise product across positions.
    Mul,
    /// Row-major flattening to `T·D`.
    Concat,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Avg,
        Aggregation::Max,
        Aggregation::Mul,
        Aggregation::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Avg => "avg",
            Aggregation::Max => "max",
            Aggregation::Mul => "mul",
            Aggregation::Concat => "concat",
        }
    }

    /// Width of the aggregated vector for a `t×d` sequence.
    pub fn out_width(self, t: usize, d: usize) -> usize {
        match self {
            Aggregation::Concat => t * d,
            _ => d,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = CcsError;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                CcsError::Config(format!(
                    "unknown aggregation {s:?}, expected one of avg, max, mul, concat"
                ))
            })
    }
}

/// Reduces `x` (`T×D`) to a `1×D` row, or `1×T·D` for concat.
pub fn aggregate(g: &mut Graph, x: Var, kind: Aggregation) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(CcsError::Contract(format!(
            "aggregate expects a T×D matrix, got {shape:?}"
        )));
    }
    let t = shape[0];
    match kind {
        Aggregation::Avg => {
            let s = g.sum_rows(x)?;
            Ok(g.scale(s, 1.0 / t as f64))
        }
        Aggregation::Max => g.max_rows(x),
        Aggregation::Mul => {
            let mut acc = g.slice_rows(x, 0, 1)?;
            for r in 1..t {
                let row = g.slice_rows(x, r, 1)?;
                acc = g.mul(acc, row)?;
            }
            Ok(acc)
        }
        Aggregation::Concat => g.reshape(x, &[1, shape[0] * shape[1]]),
    }
}

/// Projection `z → z·W_proj + b_proj` shared by both modalities, followed by
/// a classifier. The classifier is shared too unless `cls_o` holds a
/// separate motion head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub cls_o: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundShared {
    pub w_proj: Var,
    pub b_proj: Var,
    pub w_cls: Var,
    pub b_cls: Var,
    pub cls_o: Option<(Var, Var)>,
}

impl SharedParams {
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_proj: usize,
        n_classes: usize,
        share_classifier: bool,
        rng: &mut R,
    ) -> Self {
        let glorot = |a: usize, b: usize, rng: &mut R| {
            Tensor::uniform(&[a, b], (6.0 / (a + b) as f64).sqrt(), rng)
        };
        let w_proj = glorot(d_in, d_proj, rng);
        let w_cls = glorot(d_proj, n_classes, rng);
        let cls_o = (!share_classifier).then(|| {
            (
                glorot(d_proj, n_classes, rng),
                Tensor::zeros(&[1, n_classes]),
            )
        });
        SharedParams {
            w_proj,
            b_proj: Tensor::zeros(&[1, d_proj]),
            w_cls,
            b_cls: Tensor::zeros(&[1, n_classes]),
            cls_o,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w_cls.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundShared {
        BoundShared {
            w_proj: g.param(self.w_proj.clone()),
            b_proj: g.param(self.b_proj.clone()),
            w_cls: g.param(self.w_cls.clone()),
            b_cls: g.param(self.b_cls.clone()),
            cls_o: self
                .cls_o
                .as_ref()
                .map(|(w, b)| (g.param(w.clone()), g.param(b.clone()))),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_proj, &self.b_proj, &self.w_cls, &self.b_cls];
        if let Some((w, b)) = &self.cls_o {
            v.extend([w, b]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_proj,
            &mut self.b_proj,
            &mut self.w_cls,
            &mut self.b_cls,
        ];
        if let Some((w, b)) = &mut self.cls_o {
            v.extend([w, b]);
        }
        v
    }
}

impl BoundShared {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_proj, self.b_proj, self.w_cls, self.b_cls];
        if let Some((w, b)) = self.cls_o {
            v.extend([w, b]);
        }
        v
    }

    /// Maps aggregated rows `z` (`K×width`) to embeddings `K×D'` and logits
    /// `K×n`.
    pub fn project_and_classify(
        &self,
        g: &mut Graph,
        z: Var,
        modality: Modality,
    ) -> Result<(Var, Var)> {
        let emb = g.affine(z, self.w_proj, self.b_proj)?;
        let (w, b) = match (modality, self.cls_o) {
            (Modality::O, Some(head)) => head,
            _ => (self.w_cls, self.b_cls),
        };
        let logits = g.affine(emb, w, b)?;
        Ok((emb, logits))
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CcsError::Contract(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `w·p_f + (1−w)·p_o`.
pub fn fuse_scores(p_f: &[f64], p_o: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(CcsError::Contract(format!(
            "fusion weight must lie in [0, 1], got {w}"
        )));
    }
    if p_f.len() != p_o.len() {
        return Err(CcsError::dim("fuse_scores", &[p_f.len()], &[p_o.len()]));
    }
    check_simplex(p_f, "p_f")?;
    check_simplex(p_o, "p_o")?;
    Ok(p_f
        .iter()
        .zip(p_o)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agg(x: &Tensor, kind: Aggregation) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = aggregate(&mut g, v, kind).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn constant_sequence_average() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]]).unwrap();
        assert_eq!(agg(&x, Aggregation::Avg).data(), &[1.5, -2.0]);
    }

    #[test]
    fn max_by_hand() {
        let x = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(agg(&x, Aggregation::Max).data(), &[3.0, 4.0]);
    }

    #[test]
    fn mul_matches_sequential_fold() {
        let x = Tensor::uniform(&[3, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        let got = agg(&x, Aggregation::Mul);
        for c in 0..4 {
            let want = (0..3).fold(1.0, |acc, r| acc * x.get(r, c));
            assert!((got.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_flattens_row_major() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let got = agg(&x, Aggregation::Concat);
        assert_eq!(got.shape(), &[1, 4]);
        assert_eq!(got.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Aggregation::Concat.out_width(2, 2), 4);
    }

    #[test]
    fn parse_names() {
        for a in Aggregation::ALL {
            assert_eq!(a.name().parse::<Aggregation>().unwrap(), a);
        }
        assert!(matches!(
            "median".parse::<Aggregation>(),
            Err(CcsError::Config(_))
        ));
        assert_eq!(Aggregation::default(), Aggregation::Avg);
    }

    fn head(d: usize, dp: usize, n: usize, share: bool) -> SharedParams {
        SharedParams::init(d, dp, n, share, &mut ChaCha8Rng::seed_from_u64(2))
    }

    fn run_head(p: &SharedParams, z: &Tensor, m: Modality) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let zv = g.constant(z.clone());
        let (e, l) = b.project_and_classify(&mut g, zv, m).unwrap();
        (g.value(e).clone(), g.value(l).clone())
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut p = head(3, 3, 4, true);
        p.w_proj = Tensor::zeros(&[3, 3]);
        p.w_cls = Tensor::zeros(&[3, 4]);
        p.b_cls = Tensor::filled(&[1, 4], 0.7);
        let z = Tensor::row_vector(vec![1.0, -1.0, 2.0]).unwrap();
        let (_, logits) = run_head(&p, &z, Modality::F);
        assert_eq!(logits.data(), &[0.7; 4]);
        assert!(softmax(logits.data())
            .iter()
            .all(|&q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shared_head_treats_modalities_alike() {
        let p = head(3, 3, 4, true);
        let z = Tensor::row_vector(vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(run_head(&p, &z, Modality::F), run_head(&p, &z, Modality::O));
        let p = head(3, 3, 4, false);
        let (ef, lf) = run_head(&p, &z, Modality::F);
        let (eo, lo) = run_head(&p, &z, Modality::O);
        assert_eq!(ef, eo);
        assert_ne!(lf, lo);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = head(3, 3, 4, true);
        let z = Tensor::row_vector(vec![0.3, -1.0]).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let zv = g.constant(z);
        let err = b.project_and_classify(&mut g, zv, Modality::F).unwrap_err();
        assert!(matches!(err, CcsError::Dimension { .. }));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = head(3, 2, 4, false);
        let params: Vec<Tensor> = p
            .tensors()
            .into_iter()
            .map(|t| Tensor::uniform(t.shape(), 0.8, &mut r))
            .collect();
        let zf = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let zo = Tensor::uniform(&[3, 3], 1.0, &mut r);
        let report = grad_check(
            |g, v| {
                let b = BoundShared {
                    w_proj: v[0],
                    b_proj: v[1],
                    w_cls: v[2],
                    b_cls: v[3],
                    cls_o: Some((v[4], v[5])),
                };
                let (f, o) = (g.constant(zf.clone()), g.constant(zo.clone()));
                let (ef, lf) = b.project_and_classify(g, f, Modality::F)?;
                let (_, lo) = b.project_and_classify(g, o, Modality::O)?;
                let lf = g.log_softmax(lf)?;
                let lo = g.log_softmax(lo)?;
                let a = g.sum(lf);
                let b2 = g.sum(lo);
                let sq = g.mul(ef, ef)?;
                let c = g.mean(sq);
                let s = g.add(a, b2)?;
                g.add(s, c)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn fusion_cases() {
        let p = [0.3, 0.7];
        assert_eq!(fuse_scores(&p, &p, 0.5).unwrap(), p.to_vec());
        let pf = [0.8, 0.2];
        let po = [0.4, 0.6];
        assert_eq!(fuse_scores(&pf, &po, 1.0).unwrap(), pf.to_vec());
        let f = fuse_scores(&pf, &po, 0.5).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fusion_rejects_non_simplex() {
        assert!(matches!(
            fuse_scores(&[0.8, 0.3], &[0.5, 0.5], 0.5),
            Err(CcsError::Contract(_))
        ));
        assert!(fuse_scores(&[1.2, -0.2], &[0.5, 0.5], 0.5).is_err());
        assert!(fuse_scores(&[0.5, 0.5], &[0.5, 0.5], 1.5).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-3;
            let mut p: Vec<f64> = v.iter().map(|x| (x + 1e-3 / v.len() as f64) / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            p
        })
    }

    proptest! {
        #[test]
        fn fused_scores_stay_on_simplex(pf in simplex(5), po in simplex(5), w in 0.0f64..=1.0) {
            let f = fuse_scores(&pf, &po, w).unwrap();
            prop_assert!(f.iter().all(|&v| v >= 0.0));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn avg_ignores_order_and_concat_does_not(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[4, 3], 1.0, &mut r);
            let perm = [2, 0, 3, 1];
            let px = x.select_rows(&perm);
            let a = agg(&x, Aggregation::Avg);
            let b = agg(&px, Aggregation::Avg);
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            prop_assert_ne!(agg(&x, Aggregation::Concat), agg(&px, Aggregation::Concat));
        }
    }
}
