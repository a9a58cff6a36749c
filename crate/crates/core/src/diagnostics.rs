//! Gradient and coupling checks on a tiny model with a random in-memory
//! batch.

use serde::Serialize;

use crate::error::{CcsError, Result};
use crate::losses::PositiveMining;
use crate::model::{BoundModel, Model, ModelSpec};
use crate::numeric::{
    analytic_gradients, compare_with_numeric, GradCheckReport, Graph, Tensor, Var,
};
use crate::sampler::BatchSpec;
use crate::seed;
use crate::trainer::{objective, BatchInputs, ModelDims, TrainConfig};

/// Deliberate corruption of the analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Negates the analytic gradient of one parameter tensor.
    SignFlip { param: usize },
}

/// A small model, a batch and the config its objective is built from.
#[derive(Clone, Debug)]
pub struct TinyProblem {
    pub model: Model,
    pub inputs: BatchInputs,
    pub cfg: TrainConfig,
}

pub const TINY_LENGTH: usize = 4;
pub const TINY_D: usize = 8;
pub const TINY_E: usize = 4;
pub const TINY_CLASSES: usize = 3;
pub const TINY_D_IN: usize = 5;

impl TinyProblem {
    /// `T = 4, D = 8, E = 4, n = 3`, batch `N = 3, M = 2`. Connection output
    /// maps are random rather than zero so every path carries gradient.
    pub fn new(seed_value: u64, connection: bool) -> Result<Self> {
        let mut rng = seed::stream(seed_value, &[seed::TAG_INIT]);
        let cfg = TrainConfig {
            batch: BatchSpec { n: 3, m: 2 },
            connection,
            model: ModelDims {
                hidden: 2 * TINY_D,
                d: TINY_D,
                e: TINY_E,
                d_proj: TINY_D,
                segments: 1,
                snippet: TINY_LENGTH,
                ..ModelDims::default()
            },
            seed: seed_value,
            ..TrainConfig::default()
        };
        let spec: ModelSpec = cfg.model_spec(TINY_D_IN, TINY_CLASSES);
        let mut model = Model::init(spec, &mut rng)?;
        model.conn.w_phi = Tensor::uniform(&[TINY_D, TINY_E], 0.5, &mut rng);
        model.conn.w_kappa = Tensor::uniform(&[TINY_D, TINY_E], 0.5, &mut rng);
        model.conn.w_f = Tensor::uniform(&[TINY_D, TINY_D], 0.3, &mut rng);
        model.conn.w_o = Tensor::uniform(&[TINY_D, TINY_D], 0.3, &mut rng);
        for t in model.tensors_mut() {
            if t.rows() == 1 {
                *t = Tensor::uniform(t.shape(), 0.2, &mut rng);
            }
        }
        let k = cfg.batch.instances();
        let labels: Vec<usize> = (0..k).map(|i| i / cfg.batch.m).collect();
        let mut frames = || -> Vec<Tensor> {
            (0..k)
                .map(|_| Tensor::uniform(&[TINY_LENGTH, TINY_D_IN], 1.0, &mut rng))
                .collect()
        };
        let frames_f = frames();
        let frames_o = frames();
        Ok(TinyProblem {
            model,
            inputs: BatchInputs {
                frames_f,
                frames_o,
                labels,
            },
            cfg,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.model.tensors().into_iter().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.model.names()
    }

    /// The full objective as a function of the parameter leaves.
    pub fn objective_fn(&self) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + '_ {
        move |g, v| {
            let bound = BoundModel::from_vars(v)?;
            Ok(objective(g, &self.model, &bound, &self.inputs, &self.cfg)?.total)
        }
    }

    /// Checks every parameter gradient of the objective against central
    /// differences, optionally corrupting the analytic side first.
    pub fn gradcheck(&self, eps: f64, tol: f64, fault: Option<Fault>) -> Result<GradCheckReport> {
        let f = self.objective_fn();
        let params = self.params();
        let (value, mut analytic, kink_margin) = analytic_gradients(&f, &params)?;
        if !value.is_finite() {
            return Err(CcsError::NonFinite(format!("objective is {value}")));
        }
        if let Some(Fault::SignFlip { param }) = fault {
            let g = analytic.get_mut(param).ok_or_else(|| {
                CcsError::Config(format!("fault target {param} is not a parameter index"))
            })?;
            for v in g.data_mut() {
                *v = -*v;
            }
        }
        let checks = compare_with_numeric(&f, &params, &analytic, eps, tol)?;
        Ok(GradCheckReport {
            eps,
            tol,
            params: checks,
            kink_margin,
        })
    }

    /// Moves the triplet margin so that one anchor's hinge argument sits
    /// `offset` above zero. Returns the anchor's row.
    pub fn place_on_hinge(&mut self, offset: f64) -> Result<usize> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let ff: Vec<&Tensor> = self.inputs.frames_f.iter().collect();
        let fo: Vec<&Tensor> = self.inputs.frames_o.iter().collect();
        let out = self.model.forward(&mut g, &bound, &ff, &fo)?;
        let d = g.sq_dist(out.emb_f, out.emb_o)?;
        let d = g.value(d);
        let labels = &self.inputs.labels;
        let k = labels.len();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..k {
            let dp = (0..k)
                .filter(|&j| labels[j] == labels[i])
                .map(|j| d.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let dn = (0..k)
                .filter(|&j| labels[j] != labels[i])
                .map(|j| d.get(i, j))
                .fold(f64::INFINITY, f64::min);
            let gap = dn - dp;
            if gap > 0.0 && best.is_none_or(|(_, b)| gap < b) {
                best = Some((i, gap));
            }
        }
        let (anchor, gap) = best.ok_or_else(|| {
            CcsError::Contract("no anchor has its negative farther than its positive".into())
        })?;
        self.cfg.margins.alpha1 = gap + offset;
        self.cfg.margins.alpha3 = self.cfg.margins.alpha3.max(self.cfg.margins.alpha2 + 1e-3);
        self.cfg.positive_mining = PositiveMining::Hardest;
        Ok(anchor)
    }

    fn motion_embeddings(&self, model: &Model) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let ff: Vec<&Tensor> = self.inputs.frames_f.iter().collect();
        let fo: Vec<&Tensor> = self.inputs.frames_o.iter().collect();
        let out = model.forward(&mut g, &bound, &ff, &fo)?;
        Ok(g.value(out.emb_o).clone())
    }

    /// Frobenius norm of the central-difference Jacobian of the motion
    /// embeddings with respect to the appearance extractor parameters.
    pub fn coupling_response(&self, eps: f64) -> Result<f64> {
        let mut sq = 0.0;
        let mut probe = self.model.clone();
        for p in 0..4 {
            for k in 0..self.model.ext_f.tensors()[p].numel() {
                let base = self.model.ext_f.tensors()[p].data()[k];
                probe.ext_f.tensors_mut()[p].data_mut()[k] = base + eps;
                let plus = self.motion_embeddings(&probe)?;
                probe.ext_f.tensors_mut()[p].data_mut()[k] = base - eps;
                let minus = self.motion_embeddings(&probe)?;
                probe.ext_f.tensors_mut()[p].data_mut()[k] = base;
                sq += plus
                    .data()
                    .iter()
                    .zip(minus.data())
                    .map(|(a, b)| ((a - b) / (2.0 * eps)).powi(2))
                    .sum::<f64>();
            }
        }
        Ok(sq.sqrt())
    }

    /// Norm of `∂ l3_o / ∂ θ_f`: the motion-stream cross-entropy
    /// differentiated with respect to the appearance extractor.
    pub fn cross_stream_gradient(&self) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let obj = objective(&mut g, &self.model, &bound, &self.inputs, &self.cfg)?;
        g.backward(obj.l3_o)?;
        Ok(bound
            .ext_f
            .vars()
            .iter()
            .map(|&v| g.grad_or_zeros(v).norm().powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// Gradient checks at `count` evaluation points whose kink margin exceeds
/// `min_margin`, trying successive seeds from `first_seed`.
pub fn gradcheck_points(
    first_seed: u64,
    count: usize,
    min_margin: f64,
    eps: f64,
    tol: f64,
) -> Result<Vec<(u64, GradCheckReport)>> {
    let mut out = Vec::with_capacity(count);
    let mut s = first_seed;
    let limit = first_seed + 1000;
    while out.len() < count {
        if s >= limit {
            return Err(CcsError::Contract(format!(
                "no point with kink margin above {min_margin} among 1000 seeds"
            )));
        }
        let problem = TinyProblem::new(s, true)?;
        let report = problem.gradcheck(eps, tol, None)?;
        if report.kink_margin > min_margin {
            out.push((s, report));
        }
        s += 1;
    }
    Ok(out)
}
