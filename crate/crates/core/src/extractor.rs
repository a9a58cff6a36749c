//! Per-modality feature networks and TSN-style segment sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::Modality;

/// One stream's features for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures {
    pub modality: Modality,
    /// `T×D`.
    pub features: Tensor,
    pub id: usize,
    pub label: usize,
}

/// `relu(x·w1 + b1)·w2 + b2`, applied position-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundExtractor {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], scale, rng)
}

impl ExtractorParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d: usize, rng: &mut R) -> Self {
        ExtractorParams {
            w1: glorot(d_in, hidden, rng),
            b1: Tensor::zeros(&[1, hidden]),
            w2: glorot(hidden, d, rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundExtractor {
        BoundExtractor {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl BoundExtractor {
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let h = g.affine(frames, self.w1, self.b1)?;
        let h = g.relu(h);
        g.affine(h, self.w2, self.b2)
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Runs the extractor on `frames` outside any training graph.
pub fn extract(
    params: &ExtractorParams,
    frames: &Tensor,
    modality: Modality,
    id: usize,
    label: usize,
) -> Result<SequenceFeatures> {
    let mut g = Graph::new();
    let bound = BoundExtractor {
        w1: g.constant(params.w1.clone()),
        b1: g.constant(params.b1.clone()),
        w2: g.constant(params.w2.clone()),
        b2: g.constant(params.b2.clone()),
    };
    let x = g.constant(frames.clone());
    let out = bound.forward(&mut g, x)?;
    Ok(SequenceFeatures {
        modality,
        features: g.value(out).clone(),
        id,
        label,
    })
}

/// Start rows of one snippet per span.
pub fn segment_offsets<R: Rng + ?Sized>(
    length: usize,
    k_segments: usize,
    snippet: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_segments(length, k_segments, snippet)?;
    let span = length / k_segments;
    Ok((0..k_segments)
        .map(|s| s * span + rng.random_range(0..=span - snippet))
        .collect())
}

/// Start rows of the snippet centred in each span.
pub fn centered_offsets(length: usize, k_segments: usize, snippet: usize) -> Result<Vec<usize>> {
    check_segments(length, k_segments, snippet)?;
    let span = length / k_segments;
    Ok((0..k_segments)
        .map(|s| s * span + (span - snippet) / 2)
        .collect())
}

fn check_segments(length: usize, k_segments: usize, snippet: usize) -> Result<()> {
    if k_segments == 0 || snippet == 0 {
        return Err(CcsError::Config(
            "segment count and snippet length must be positive".into(),
        ));
    }
    if length < k_segments * snippet {
        return Err(CcsError::Config(format!(
            "sequence of length {length} cannot hold {k_segments} snippets of {snippet}"
        )));
    }
    Ok(())
}

/// Gathers the snippets starting at `offsets` into one `(k·snippet)×D` matrix.
pub fn take_snippets(frames: &Tensor, offsets: &[usize], snippet: usize) -> Tensor {
    let rows: Vec<usize> = offsets.iter().flat_map(|&o| o..o + snippet).collect();
    frames.select_rows(&rows)
}

/// Splits `frames` into `k_segments` equal spans and draws one contiguous
/// snippet uniformly from each.
pub fn sample_segments<R: Rng + ?Sized>(
    frames: &Tensor,
    k_segments: usize,
    snippet: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let offsets = segment_offsets(frames.rows(), k_segments, snippet, rng)?;
    Ok(take_snippets(frames, &offsets, snippet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut p = ExtractorParams::init(3, 4, 2, &mut rng());
        p.w1 = Tensor::zeros(&[3, 4]);
        p.w2 = Tensor::zeros(&[4, 2]);
        p.b2 = Tensor::row_vector(vec![0.5, -1.5]).unwrap();
        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng());
        let out = extract(&p, &x, Modality::F, 0, 0).unwrap();
        for r in 0..5 {
            assert_eq!(out.features.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_weights_pass_nonnegative_input() {
        let p = ExtractorParams {
            w1: Tensor::identity(3),
            b1: Tensor::zeros(&[1, 3]),
            w2: Tensor::identity(3),
            b2: Tensor::zeros(&[1, 3]),
        };
        let x = Tensor::from_rows(&[vec![0.0, 1.0, 2.5], vec![3.0, 0.25, 0.0]]).unwrap();
        let out = extract(&p, &x, Modality::O, 4, 1).unwrap();
        assert_eq!(out.features, x);
        assert_eq!((out.id, out.label, out.modality), (4, 1, Modality::O));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = ExtractorParams::init(3, 4, 2, &mut rng());
        let x = Tensor::zeros(&[5, 4]);
        let err = extract(&p, &x, Modality::F, 0, 0).unwrap_err();
        assert!(matches!(err, CcsError::Dimension { .. }), "{err}");
    }

    #[test]
    fn sum_gradient_matches_finite_differences() {
        let mut r = rng();
        let p = ExtractorParams::init(3, 6, 4, &mut r);
        let params: Vec<Tensor> = vec![
            p.w1.clone(),
            Tensor::uniform(&[1, 6], 0.3, &mut r),
            p.w2.clone(),
            Tensor::uniform(&[1, 4], 0.3, &mut r),
        ];
        let x = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let report = grad_check(
            |g, v| {
                let b = BoundExtractor {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let xv = g.constant(x.clone());
                let out = b.forward(g, xv)?;
                Ok(g.sum(out))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.kink_margin > 1e-4);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn row_permutation_commutes() {
        let mut r = rng();
        let p = ExtractorParams::init(3, 6, 4, &mut r);
        let x = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let a = extract(&p, &x.select_rows(&perm), Modality::F, 0, 0).unwrap();
        let b = extract(&p, &x, Modality::F, 0, 0).unwrap();
        assert_eq!(a.features, b.features.select_rows(&perm));
        assert!(a.features.is_finite());
    }

    #[test]
    fn forced_and_degenerate_segments() {
        let x = Tensor::uniform(&[30, 2], 1.0, &mut rng());
        assert_eq!(sample_segments(&x, 3, 10, &mut rng()).unwrap(), x);
        assert_eq!(sample_segments(&x, 1, 30, &mut rng()).unwrap(), x);
        let err = sample_segments(&x, 4, 10, &mut rng()).unwrap_err();
        assert!(matches!(err, CcsError::Config(_)));
    }

    #[test]
    fn segments_are_deterministic_per_seed() {
        let x = Tensor::uniform(&[60, 2], 1.0, &mut rng());
        let a = sample_segments(&x, 3, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_segments(&x, 3, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[30, 2]);
    }

    #[test]
    fn every_offset_is_reachable() {
        let mut seen = [[false; 11]; 3];
        let mut r = rng();
        for _ in 0..10_000 {
            let offs = segment_offsets(60, 3, 10, &mut r).unwrap();
            for (s, &o) in offs.iter().enumerate() {
                let local = o - s * 20;
                assert!(local <= 10);
                seen[s][local] = true;
            }
        }
        assert!(seen.iter().all(|s| s.iter().all(|&b| b)));
    }

    #[test]
    fn centered_offsets_sit_mid_span() {
        assert_eq!(centered_offsets(60, 3, 10).unwrap(), vec![5, 25, 45]);
    }
}
