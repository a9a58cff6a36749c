//! The assembled two-stream network: extractors, connection block,
//! aggregation and the shared head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connection::{BoundConnection, ConnectionMode, ConnectionParams};
use crate::error::{CcsError, Result};
use crate::extractor::{centered_offsets, take_snippets, BoundExtractor, ExtractorParams};
use crate::numeric::{Graph, Tensor, Var};
use crate::shared::{aggregate, softmax, Aggregation, BoundShared, SharedParams};
use crate::Modality;

/// Architecture of a model; everything needed to rebuild parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_in: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub d: usize,
    pub e: usize,
    pub d_proj: usize,
    pub segments: usize,
    pub snippet: usize,
    pub aggregation: Aggregation,
    pub connection: bool,
    pub connection_mode: ConnectionMode,
    pub share_classifier: bool,
}

impl ModelSpec {
    /// Positions per training sequence.
    pub fn train_length(&self) -> usize {
        self.segments * self.snippet
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("n_classes", self.n_classes),
            ("hidden", self.hidden),
            ("d", self.d),
            ("e", self.e),
            ("d_proj", self.d_proj),
            ("segments", self.segments),
            ("snippet", self.snippet),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CcsError::Config(format!("{name} must be positive")));
        }
        if self.e > self.d {
            return Err(CcsError::Config(format!(
                "embedding width e = {} exceeds feature width d = {}",
                self.e, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub ext_f: ExtractorParams,
    pub ext_o: ExtractorParams,
    pub conn: ConnectionParams,
    pub shared: SharedParams,
}

/// A model's parameters as graph leaves.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub ext_f: BoundExtractor,
    pub ext_o: BoundExtractor,
    pub conn: BoundConnection,
    pub shared: BoundShared,
}

/// Graph nodes produced by one batch forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Connected per-instance sequences.
    pub xf: Vec<Var>,
    pub xo: Vec<Var>,
    /// `K×D'` embeddings.
    pub emb_f: Var,
    pub emb_o: Var,
    /// `K×n` logits.
    pub logits_f: Var,
    pub logits_o: Var,
}

const EXT_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
const CONN_NAMES: [&str; 4] = ["w_phi", "w_kappa", "w_f", "w_o"];
const SHARED_NAMES: [&str; 6] = ["w_proj", "b_proj", "w_cls", "b_cls", "w_cls_o", "b_cls_o"];

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ext_f = ExtractorParams::init(spec.d_in, spec.hidden, spec.d, rng);
        let ext_o = ExtractorParams::init(spec.d_in, spec.hidden, spec.d, rng);
        let conn = ConnectionParams::init(spec.d, spec.e, rng)?;
        let width = spec.aggregation.out_width(spec.train_length(), spec.d);
        let shared = SharedParams::init(
            width,
            spec.d_proj,
            spec.n_classes,
            spec.share_classifier,
            rng,
        );
        Ok(Model {
            spec,
            ext_f,
            ext_o,
            conn,
            shared,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        v.extend(self.ext_f.tensors());
        v.extend(self.ext_o.tensors());
        v.extend(self.conn.tensors());
        v.extend(self.shared.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.extend(self.ext_f.tensors_mut());
        v.extend(self.ext_o.tensors_mut());
        v.extend(self.conn.tensors_mut());
        v.extend(self.shared.tensors_mut());
        v
    }

    /// Parameter names, in the order of [`Model::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(EXT_NAMES.iter().map(|n| format!("ext_f.{n}")));
        v.extend(EXT_NAMES.iter().map(|n| format!("ext_o.{n}")));
        v.extend(CONN_NAMES.iter().map(|n| format!("conn.{n}")));
        let shared = if self.shared.cls_o.is_some() { 6 } else { 4 };
        v.extend(SHARED_NAMES[..shared].iter().map(|n| format!("shared.{n}")));
        v
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(spec: ModelSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = crate::seed::stream(0, &[]);
        let mut model = Model::init(spec, &mut rng)?;
        let names = model.names();
        if names.len() != named.len() {
            return Err(CcsError::Integrity(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(model.tensors_mut()).zip(named) {
            if *want != name || slot.shape() != t.shape() {
                return Err(CcsError::Integrity(format!(
                    "parameter {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            ext_f: self.ext_f.bind(g),
            ext_o: self.ext_o.bind(g),
            conn: self.conn.bind(g),
            shared: self.shared.bind(g),
        }
    }

    /// Runs the network on `K` paired sequences of equal length.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        frames_f: &[&Tensor],
        frames_o: &[&Tensor],
    ) -> Result<Forward> {
        let k = frames_f.len();
        if k == 0 || frames_o.len() != k {
            return Err(CcsError::Contract(format!(
                "forward needs matching nonempty stream lists, got {k} and {}",
                frames_o.len()
            )));
        }
        let t = frames_f[0].rows();
        let stack = |frames: &[&Tensor]| -> Result<Tensor> {
            let width = frames[0].cols();
            let mut data = Vec::with_capacity(k * t * width);
            for f in frames {
                if f.rows() != t || f.cols() != width {
                    return Err(CcsError::dim("forward", frames[0].shape(), f.shape()));
                }
                data.extend_from_slice(f.data());
            }
            Tensor::new(vec![k * t, width], data)
        };
        let sf = g.constant(stack(frames_f)?);
        let so = g.constant(stack(frames_o)?);
        let hf = b.ext_f.forward(g, sf)?;
        let ho = b.ext_o.forward(g, so)?;

        let mut xf = Vec::with_capacity(k);
        let mut xo = Vec::with_capacity(k);
        let mut zf = Vec::with_capacity(k);
        let mut zo = Vec::with_capacity(k);
        for i in 0..k {
            let f = g.slice_rows(hf, i * t, t)?;
            let o = g.slice_rows(ho, i * t, t)?;
            let (f, o) = if self.spec.connection {
                b.conn.forward(g, f, o, self.spec.connection_mode)?
            } else {
                crate::connection::connect_disabled(f, o)
            };
            zf.push(aggregate(g, f, self.spec.aggregation)?);
            zo.push(aggregate(g, o, self.spec.aggregation)?);
            xf.push(f);
            xo.push(o);
        }
        let zf = g.concat_rows(&zf)?;
        let zo = g.concat_rows(&zo)?;
        let (emb_f, logits_f) = b.shared.project_and_classify(g, zf, Modality::F)?;
        let (emb_o, logits_o) = b.shared.project_and_classify(g, zo, Modality::O)?;
        Ok(Forward {
            xf,
            xo,
            emb_f,
            emb_o,
            logits_f,
            logits_o,
        })
    }

    /// The sequence an evaluation pass sees: the full sequence, or the
    /// centred snippets when the aggregation fixes the length.
    pub fn eval_view(&self, frames: &Tensor) -> Result<Tensor> {
        if self.spec.aggregation == Aggregation::Concat {
            let offs = centered_offsets(frames.rows(), self.spec.segments, self.spec.snippet)?;
            Ok(take_snippets(frames, &offs, self.spec.snippet))
        } else {
            Ok(frames.clone())
        }
    }

    /// Per-stream class probabilities for one instance.
    pub fn stream_probs(
        &self,
        frames_f: &Tensor,
        frames_o: &Tensor,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let vf = self.eval_view(frames_f)?;
        let vo = self.eval_view(frames_o)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.forward(&mut g, &b, &[&vf], &[&vo])?;
        Ok((
            softmax(g.value(out.logits_f).data()),
            softmax(g.value(out.logits_o).data()),
        ))
    }
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        v.extend(self.ext_f.vars());
        v.extend(self.ext_o.vars());
        v.extend(self.conn.vars());
        v.extend(self.shared.vars());
        v
    }

    /// Rebuilds the bound model from leaves in [`Model::tensors`] order.
    pub fn from_vars(v: &[Var]) -> Result<Self> {
        if v.len() != 16 && v.len() != 18 {
            return Err(CcsError::Contract(format!(
                "expected 16 or 18 parameter leaves, got {}",
                v.len()
            )));
        }
        let ext = |o: usize| BoundExtractor {
            w1: v[o],
            b1: v[o + 1],
            w2: v[o + 2],
            b2: v[o + 3],
        };
        Ok(BoundModel {
            ext_f: ext(0),
            ext_o: ext(4),
            conn: BoundConnection {
                w_phi: v[8],
                w_kappa: v[9],
                w_f: v[10],
                w_o: v[11],
            },
            shared: BoundShared {
                w_proj: v[12],
                b_proj: v[13],
                w_cls: v[14],
                b_cls: v[15],
                cls_o: (v.len() == 18).then(|| (v[16], v[17])),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn spec() -> ModelSpec {
        ModelSpec {
            d_in: 5,
            n_classes: 3,
            hidden: 6,
            d: 4,
            e: 2,
            d_proj: 4,
            segments: 2,
            snippet: 3,
            aggregation: Aggregation::Avg,
            connection: true,
            connection_mode: ConnectionMode::Attention,
            share_classifier: true,
        }
    }

    #[test]
    fn names_match_tensors() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for share in [true, false] {
            let m = Model::init(
                ModelSpec {
                    share_classifier: share,
                    ..spec()
                },
                &mut r,
            )
            .unwrap();
            assert_eq!(m.names().len(), m.tensors().len());
            let named: Vec<(String, Tensor)> = m
                .names()
                .into_iter()
                .zip(m.tensors().into_iter().cloned())
                .collect();
            assert_eq!(Model::from_named(m.spec.clone(), named).unwrap(), m);
        }
    }

    #[test]
    fn from_named_rejects_wrong_shapes() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(spec(), &mut r).unwrap();
        let mut named: Vec<(String, Tensor)> = m
            .names()
            .into_iter()
            .zip(m.tensors().into_iter().cloned())
            .collect();
        named[0].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            Model::from_named(m.spec.clone(), named),
            Err(CcsError::Integrity(_))
        ));
    }

    #[test]
    fn batch_forward_matches_single_instances() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::init(spec(), &mut r).unwrap();
        m.conn.w_f = Tensor::uniform(&[4, 4], 0.5, &mut r);
        m.conn.w_o = Tensor::uniform(&[4, 4], 0.5, &mut r);
        let ff: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[6, 5], 1.0, &mut r))
            .collect();
        let fo: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[6, 5], 1.0, &mut r))
            .collect();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let out = m
            .forward(
                &mut g,
                &b,
                &ff.iter().collect::<Vec<_>>(),
                &fo.iter().collect::<Vec<_>>(),
            )
            .unwrap();
        let lf = g.value(out.logits_f).clone();
        for i in 0..3 {
            let (pf, _) = m.stream_probs(&ff[i], &fo[i]).unwrap();
            let want = softmax(lf.row(i));
            for (a, w) in pf.iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_evaluates_centred_snippets() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let m = Model::init(
            ModelSpec {
                aggregation: Aggregation::Concat,
                ..spec()
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(m.shared.w_proj.rows(), 6 * 4);
        let f = Tensor::uniform(&[10, 5], 1.0, &mut r);
        assert_eq!(m.eval_view(&f).unwrap().rows(), 6);
        let (pf, po) = m.stream_probs(&f, &f).unwrap();
        assert_eq!((pf.len(), po.len()), (3, 3));
    }
}
