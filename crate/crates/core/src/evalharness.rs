//! Accuracy, per-stream versus fused comparison, confusion matrices and the
//! ablation grid.

use std::io::Write;
use std::thread;

use serde::Serialize;

use crate::error::{CcsError, Result};
use crate::model::Model;
use crate::shared::{fuse_scores, Aggregation};
use crate::synthdata::{Dataset, Instance};
use crate::trainer::{fit, TrainConfig};

/// Anything that produces per-stream class probabilities for an instance.
pub trait Scorer: Sync {
    fn n_classes(&self) -> usize;
    fn stream_probs(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl Scorer for Model {
    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn stream_probs(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
        Model::stream_probs(self, &inst.frames_f, &inst.frames_o)
    }
}

/// First index of the largest entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceScores {
    pub id: usize,
    pub label: usize,
    pub p_f: Vec<f64>,
    pub p_o: Vec<f64>,
    pub p_fused: Vec<f64>,
    pub pred_f: usize,
    pub pred_o: usize,
    pub pred_fused: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub fusion_weight: f64,
    pub acc_f: f64,
    pub acc_o: f64,
    pub acc_fused: f64,
    /// Fused predictions; rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Fused accuracy per category; `None` when a category has no instances.
    pub per_category: Vec<Option<f64>>,
    pub instances: Vec<InstanceScores>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores every instance on its full sequence. Instances are scored on
/// worker threads and gathered back in input order.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    instances: &[&Instance],
    fusion_weight: f64,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(CcsError::Contract(
            "evaluate needs at least one instance".into(),
        ));
    }
    let n = scorer.n_classes();
    let workers = thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(8);
    let chunk = instances.len().div_ceil(workers);
    let probs: Vec<Result<(Vec<f64>, Vec<f64>)>> = thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|inst| scorer.stream_probs(inst))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });

    let mut confusion = vec![vec![0usize; n]; n];
    let mut scores = Vec::with_capacity(instances.len());
    let (mut hit_f, mut hit_o, mut hit_fused) = (0usize, 0usize, 0usize);
    for (inst, p) in instances.iter().zip(probs) {
        let (p_f, p_o) = p?;
        if inst.label >= n || p_f.len() != n || p_o.len() != n {
            return Err(CcsError::dim("evaluate", &[n], &[p_f.len(), p_o.len()]));
        }
        let p_fused = fuse_scores(&p_f, &p_o, fusion_weight)?;
        let (pred_f, pred_o, pred_fused) = (argmax(&p_f), argmax(&p_o), argmax(&p_fused));
        hit_f += usize::from(pred_f == inst.label);
        hit_o += usize::from(pred_o == inst.label);
        hit_fused += usize::from(pred_fused == inst.label);
        confusion[inst.label][pred_fused] += 1;
        scores.push(InstanceScores {
            id: inst.id,
            label: inst.label,
            p_f,
            p_o,
            p_fused,
            pred_f,
            pred_o,
            pred_fused,
        });
    }
    let total = instances.len() as f64;
    let per_category = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let count: usize = row.iter().sum();
            (count > 0).then(|| row[c] as f64 / count as f64)
        })
        .collect();
    Ok(EvalReport {
        n,
        fusion_weight,
        acc_f: hit_f as f64 / total,
        acc_o: hit_o as f64 / total,
        acc_fused: hit_fused as f64 / total,
        confusion,
        per_category,
        instances: scores,
    })
}

/// Component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// No connection block, cross-entropy only.
    Baseline,
    /// Connection block, cross-entropy only.
    #[serde(rename = "CB")]
    Cb,
    /// Ranking losses, no connection block.
    #[serde(rename = "CS")]
    Cs,
    All,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Cb, Variant::Cs, Variant::All];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Cb => "CB",
            Variant::Cs => "CS",
            Variant::All => "All",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (connection, ranking) = match self {
            Variant::Baseline => (false, false),
            Variant::Cb => (true, false),
            Variant::Cs => (false, true),
            Variant::All => (true, true),
        };
        cfg.connection = connection;
        cfg.ranking_losses = ranking;
        cfg
    }
}

/// One trained run of the grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub acc_f: f64,
    pub acc_o: f64,
    pub acc_fused: f64,
    pub epochs: usize,
}

/// Mean and sample standard deviation per group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub variant: String,
    pub runs: usize,
    pub acc_f_mean: f64,
    pub acc_f_std: f64,
    pub acc_o_mean: f64,
    pub acc_o_std: f64,
    pub acc_fused_mean: f64,
    pub acc_fused_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<Summary>,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarise(runs: &[RunResult], groups: &[String]) -> Vec<Summary> {
    groups
        .iter()
        .map(|name| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| &r.variant == name).collect();
            let col =
                |f: fn(&RunResult) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (acc_f_mean, acc_f_std) = col(|r| r.acc_f);
            let (acc_o_mean, acc_o_std) = col(|r| r.acc_o);
            let (acc_fused_mean, acc_fused_std) = col(|r| r.acc_fused);
            Summary {
                variant: name.clone(),
                runs: rs.len(),
                acc_f_mean,
                acc_f_std,
                acc_o_mean,
                acc_o_std,
                acc_fused_mean,
                acc_fused_std,
            }
        })
        .collect()
}

/// Trains every labelled config on its own thread and collects the results
/// in input order.
fn run_all(dataset: &Dataset, jobs: Vec<(String, TrainConfig)>) -> Result<Vec<RunResult>> {
    let results: Vec<Result<RunResult>> = thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(label, cfg)| {
                s.spawn(move || {
                    let out = fit(dataset, &cfg)?;
                    Ok(RunResult {
                        variant: label,
                        seed: cfg.seed,
                        acc_f: out.report.acc_f,
                        acc_o: out.report.acc_o,
                        acc_fused: out.report.acc_fused,
                        epochs: out.checkpoint.epoch,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CcsError::Config("at least one seed is required".into()));
    }
    Ok(())
}

/// Baseline, CB, CS and All, each trained once per seed.
pub fn ablation_grid(dataset: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<GridReport> {
    check_seeds(seeds)?;
    let jobs = Variant::ALL
        .iter()
        .flat_map(|&v| {
            seeds.iter().map(move |&seed| {
                let mut cfg = v.apply(base);
                cfg.seed = seed;
                (v.name().to_string(), cfg)
            })
        })
        .collect();
    let runs = run_all(dataset, jobs)?;
    let groups: Vec<String> = Variant::ALL.iter().map(|v| v.name().to_string()).collect();
    let summary = summarise(&runs, &groups);
    Ok(GridReport { runs, summary })
}

/// The base config trained once per aggregation kind and seed. The
/// `variant` column holds the aggregation name.
pub fn aggregation_comparison(
    dataset: &Dataset,
    base: &TrainConfig,
    kinds: &[Aggregation],
    seeds: &[u64],
) -> Result<GridReport> {
    check_seeds(seeds)?;
    let jobs = kinds
        .iter()
        .flat_map(|&k| {
            seeds.iter().map(move |&seed| {
                let mut cfg = base.clone();
                cfg.aggregation = k;
                cfg.seed = seed;
                (k.name().to_string(), cfg)
            })
        })
        .collect();
    let runs = run_all(dataset, jobs)?;
    let groups: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
    let summary = summarise(&runs, &groups);
    Ok(GridReport { runs, summary })
}

#[derive(Serialize)]
struct RunRow<'a> {
    variant: &'a str,
    seed: u64,
    acc_f: f64,
    acc_o: f64,
    acc_fused: f64,
}

/// `variant,seed,acc_f,acc_o,acc_fused`.
pub fn write_runs_csv<W: Write>(runs: &[RunResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if runs.is_empty() {
        w.write_record(["variant", "seed", "acc_f", "acc_o", "acc_fused"])?;
    }
    for r in runs {
        w.serialize(RunRow {
            variant: &r.variant,
            seed: r.seed,
            acc_f: r.acc_f,
            acc_o: r.acc_o,
            acc_fused: r.acc_fused,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One row per group with mean and standard deviation columns.
pub fn write_summary_csv<W: Write>(summary: &[Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn inst(id: usize, label: usize) -> Instance {
        Instance {
            id,
            label,
            frames_f: Tensor::zeros(&[1, 1]),
            frames_o: Tensor::zeros(&[1, 1]),
        }
    }

    struct Uniform(usize);

    impl Scorer for Uniform {
        fn n_classes(&self) -> usize {
            self.0
        }
        fn stream_probs(&self, _: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
            let p = vec![1.0 / self.0 as f64; self.0];
            Ok((p.clone(), p))
        }
    }

    /// Puts almost all mass on the true label in one stream and on a
    /// neighbour in the other.
    struct Oracle(usize);

    impl Scorer for Oracle {
        fn n_classes(&self) -> usize {
            self.0
        }
        fn stream_probs(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
            let n = self.0;
            let mut pf = vec![0.01 / (n - 1) as f64; n];
            pf[inst.label] = 0.99;
            let mut po = vec![0.4 / (n - 1) as f64; n];
            po[inst.label] = 0.1;
            po[(inst.label + 1) % n] += 0.5;
            Ok((pf, po))
        }
    }

    #[test]
    fn uniform_scorer_sits_at_chance() {
        // Ties go to index 0, so exactly the label-0 quarter is correct.
        let pool: Vec<Instance> = (0..400).map(|i| inst(i, i % 4)).collect();
        let refs: Vec<&Instance> = pool.iter().collect();
        let r = evaluate(&Uniform(4), &refs, 0.5).unwrap();
        assert!((r.acc_fused - 0.25).abs() <= 0.05);
        assert_eq!(r.acc_fused, 0.25);
    }

    #[test]
    fn oracle_scorer_is_perfect_when_fused() {
        let pool: Vec<Instance> = (0..40).map(|i| inst(i, i % 4)).collect();
        let refs: Vec<&Instance> = pool.iter().collect();
        let r = evaluate(&Oracle(4), &refs, 0.5).unwrap();
        assert_eq!((r.acc_f, r.acc_o, r.acc_fused), (1.0, 0.0, 1.0));
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c, if i == j { 10 } else { 0 });
            }
        }
        assert!(r.per_category.iter().all(|&a| a == Some(1.0)));
    }

    #[test]
    fn report_is_consistent_with_stored_scores() {
        let pool: Vec<Instance> = (0..30).map(|i| inst(i, i % 3)).collect();
        let refs: Vec<&Instance> = pool.iter().collect();
        let r = evaluate(&Oracle(3), &refs, 0.3).unwrap();
        let recomputed = r
            .instances
            .iter()
            .filter(|s| {
                let fused: Vec<f64> = s
                    .p_f
                    .iter()
                    .zip(&s.p_o)
                    .map(|(a, b)| 0.3 * a + 0.7 * b)
                    .collect();
                argmax(&fused) == s.label
            })
            .count() as f64
            / 30.0;
        assert_eq!(recomputed, r.acc_fused);
        let total: usize = r.confusion.iter().flatten().sum();
        let trace: usize = (0..3).map(|i| r.confusion[i][i]).sum();
        assert_eq!(total, 30);
        assert_eq!(trace as f64 / total as f64, r.acc_fused);
        assert!(r.to_json().unwrap().contains("\"acc_fused\""));
    }

    #[test]
    fn empty_category_has_no_accuracy() {
        let pool = [inst(0, 0), inst(1, 2)];
        let refs: Vec<&Instance> = pool.iter().collect();
        let r = evaluate(&Oracle(3), &refs, 0.5).unwrap();
        assert_eq!(r.per_category[1], None);
        assert!(evaluate(&Oracle(3), &[], 0.5).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn single_value_has_zero_spread() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn variants_toggle_components() {
        let base = TrainConfig::default();
        let flags: Vec<(bool, bool)> = Variant::ALL
            .iter()
            .map(|v| {
                let c = v.apply(&base);
                (c.connection, c.ranking_losses)
            })
            .collect();
        assert_eq!(
            flags,
            vec![(false, false), (true, false), (false, true), (true, true)]
        );
    }

    #[test]
    fn runs_csv_header() {
        let mut buf = Vec::new();
        write_runs_csv(
            &[RunResult {
                variant: "All".into(),
                seed: 1,
                acc_f: 0.5,
                acc_o: 0.25,
                acc_fused: 1.0,
                epochs: 3,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "variant,seed,acc_f,acc_o,acc_fused\nAll,1,0.5,0.25,1.0\n"
        );
    }
}
