//! Synthetic paired-modality instances.
//!
//! Categories come in pairs `(2k, 2k+1)`. Each category prototype has an
//! appearance component and a motion component in a small latent space. In
//! even pairs both categories share the appearance component, in odd pairs
//! they share the motion component, so every pair is indistinguishable from
//! one modality alone and separable from both. Each frame is the prototype
//! component plus isotropic Gaussian noise, lifted to the observation width by
//! a fixed random linear map per modality.
//!
//! On disk a dataset is a `manifest.json` plus one binary payload per
//! instance:
//!
//! ```text
//! u32 magic = 0x43435331, u32 L, u32 D_in, u32 modality count = 2   (LE)
//! L*D_in f64 appearance rows, then L*D_in f64 motion rows            (LE)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::numeric::Tensor;
use crate::Modality;

pub const NOISE_SIGMA: f64 = 0.5;
/// Width of the latent space the prototypes live in.
pub const LATENT_DIM: usize = 4;
/// Standard deviation of prototype components.
pub const PROTOTYPE_SCALE: f64 = 0.18;
pub const PAYLOAD_MAGIC: u32 = 0x4343_5331;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Category count; even and at least 4.
    pub n: usize,
    pub per_class: usize,
    /// Raw positions per instance.
    pub length: usize,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 8,
            per_class: 40,
            length: 60,
            d_in: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || !self.n.is_multiple_of(2) {
            return Err(CcsError::Config(format!(
                "category count must be even and at least 4, got {}",
                self.n
            )));
        }
        if self.per_class < 2 {
            return Err(CcsError::Config(format!(
                "need at least 2 instances per category, got {}",
                self.per_class
            )));
        }
        if self.length == 0 || self.d_in == 0 {
            return Err(CcsError::Config("length and d_in must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub label: usize,
    /// `L×D_in` appearance observations.
    pub frames_f: Tensor,
    /// `L×D_in` motion observations.
    pub frames_o: Tensor,
}

impl Instance {
    pub fn frames(&self, m: Modality) -> &Tensor {
        match m {
            Modality::F => &self.frames_f,
            Modality::O => &self.frames_o,
        }
    }
}

/// Two labels that share their prototype in `modality`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub labels: [usize; 2],
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: usize,
    pub label: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub per_class: usize,
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "D_in")]
    pub d_in: usize,
    pub seed: u64,
    pub confusable_pairs: Vec<ConfusablePair>,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.manifest.n
    }

    pub fn d_in(&self) -> usize {
        self.manifest.d_in
    }

    /// Instance indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.manifest.n];
        for (i, inst) in self.instances.iter().enumerate() {
            groups[inst.label].push(i);
        }
        groups
    }
}

/// Latent prototypes and lifts behind a generated dataset.
#[derive(Clone, Debug)]
pub struct Prototypes {
    /// `n×LATENT_DIM` appearance components.
    pub appearance: Tensor,
    /// `n×LATENT_DIM` motion components.
    pub motion: Tensor,
    /// `LATENT_DIM×D_in` lift per modality.
    pub lift_f: Tensor,
    pub lift_o: Tensor,
}

impl Prototypes {
    pub fn component(&self, m: Modality) -> &Tensor {
        match m {
            Modality::F => &self.appearance,
            Modality::O => &self.motion,
        }
    }

    pub fn lift(&self, m: Modality) -> &Tensor {
        match m {
            Modality::F => &self.lift_f,
            Modality::O => &self.lift_o,
        }
    }

    /// Noise-free observation row of `label` in modality `m`.
    pub fn lifted(&self, label: usize, m: Modality) -> Vec<f64> {
        lift_row(self.component(m).row(label), self.lift(m))
    }
}

fn lift_row(latent: &[f64], lift: &Tensor) -> Vec<f64> {
    let d_in = lift.cols();
    let mut out = vec![0.0; d_in];
    for (k, &z) in latent.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(lift.row(k)) {
            *o += z * w;
        }
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, dist: &Normal<f64>, n: usize) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn draw_prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Prototypes {
    let comp = Normal::new(0.0, PROTOTYPE_SCALE).expect("valid sigma");
    let mut appearance = Vec::with_capacity(cfg.n * LATENT_DIM);
    let mut motion = Vec::with_capacity(cfg.n * LATENT_DIM);
    for k in 0..cfg.n / 2 {
        let shared = draw(rng, &comp, LATENT_DIM);
        let first = draw(rng, &comp, LATENT_DIM);
        let second = draw(rng, &comp, LATENT_DIM);
        let (shared_into, split_into) = if k % 2 == 0 {
            (&mut appearance, &mut motion)
        } else {
            (&mut motion, &mut appearance)
        };
        shared_into.extend_from_slice(&shared);
        shared_into.extend_from_slice(&shared);
        split_into.extend_from_slice(&first);
        split_into.extend_from_slice(&second);
    }
    let lift_dist = Normal::new(0.0, 1.0).expect("valid sigma");
    let lift_f = draw(rng, &lift_dist, LATENT_DIM * cfg.d_in);
    let lift_o = draw(rng, &lift_dist, LATENT_DIM * cfg.d_in);
    let t = |data: Vec<f64>, rows: usize, cols: usize| {
        Tensor::new(vec![rows, cols], data).expect("consistent shape")
    };
    Prototypes {
        appearance: t(appearance, cfg.n, LATENT_DIM),
        motion: t(motion, cfg.n, LATENT_DIM),
        lift_f: t(lift_f, LATENT_DIM, cfg.d_in),
        lift_o: t(lift_o, LATENT_DIM, cfg.d_in),
    }
}

/// Prototypes a dataset with this config is generated from.
pub fn prototypes(cfg: &SynthConfig) -> Result<Prototypes> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(draw_prototypes(cfg, &mut rng))
}

/// Labels sharing a prototype component, with the modality they share.
pub fn confusable_pairs(n: usize) -> Vec<ConfusablePair> {
    (0..n / 2)
        .map(|k| ConfusablePair {
            labels: [2 * k, 2 * k + 1],
            modality: if k % 2 == 0 { Modality::F } else { Modality::O },
        })
        .collect()
}

fn instance_file(id: usize) -> String {
    format!("inst_{id:06}.bin")
}

/// Samples `per_class` noisy observations of every category prototype.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = draw_prototypes(cfg, &mut rng);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut instances = Vec::with_capacity(cfg.n * cfg.per_class);
    let mut entries = Vec::with_capacity(cfg.n * cfg.per_class);
    for label in 0..cfg.n {
        for j in 0..cfg.per_class {
            let id = label * cfg.per_class + j;
            let mut observe = |m: Modality| {
                let base = protos.component(m).row(label);
                let mut data = Vec::with_capacity(cfg.length * cfg.d_in);
                for _ in 0..cfg.length {
                    let latent: Vec<f64> =
                        base.iter().map(|&b| b + noise.sample(&mut rng)).collect();
                    data.extend(lift_row(&latent, protos.lift(m)));
                }
                Tensor::new(vec![cfg.length, cfg.d_in], data).expect("consistent shape")
            };
            let frames_f = observe(Modality::F);
            let frames_o = observe(Modality::O);
            instances.push(Instance {
                id,
                label,
                frames_f,
                frames_o,
            });
            entries.push(InstanceEntry {
                id,
                label,
                file: instance_file(id),
            });
        }
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            n: cfg.n,
            per_class: cfg.per_class,
            length: cfg.length,
            d_in: cfg.d_in,
            seed: cfg.seed,
            confusable_pairs: confusable_pairs(cfg.n),
            instances: entries,
        },
        instances,
    })
}

fn encode_payload(inst: &Instance) -> Vec<u8> {
    let (l, d) = (inst.frames_f.rows(), inst.frames_f.cols());
    let mut buf = Vec::with_capacity(16 + 16 * l * d);
    for h in [PAYLOAD_MAGIC, l as u32, d as u32, 2] {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in inst.frames_f.data().iter().chain(inst.frames_o.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_payload(
    bytes: &[u8],
    file: &str,
    manifest: &DatasetManifest,
) -> Result<(Tensor, Tensor)> {
    if bytes.len() < 16 {
        return Err(CcsError::Integrity(format!(
            "{file}: {} bytes, shorter than the 16-byte header",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != PAYLOAD_MAGIC {
        return Err(CcsError::Parse {
            offset: 0,
            message: format!("{file}: bad magic {:#010x}", word(0)),
        });
    }
    let (l, d, count) = (word(1) as usize, word(2) as usize, word(3));
    if count != 2 {
        return Err(CcsError::Parse {
            offset: 12,
            message: format!("{file}: modality count {count}, expected 2"),
        });
    }
    if l != manifest.length || d != manifest.d_in {
        return Err(CcsError::Integrity(format!(
            "{file}: header {l}x{d} disagrees with manifest {}x{}",
            manifest.length, manifest.d_in
        )));
    }
    let expected = 16 + 2 * l * d * 8;
    if bytes.len() != expected {
        return Err(CcsError::Integrity(format!(
            "{file}: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(CcsError::Parse {
            offset: (16 + 8 * pos) as u64,
            message: format!("{file}: non-finite value"),
        });
    }
    let (f, o) = values.split_at(l * d);
    Ok((
        Tensor::new(vec![l, d], f.to_vec())?,
        Tensor::new(vec![l, d], o.to_vec())?,
    ))
}

/// Writes the manifest and instance payloads into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (inst, entry) in dataset.instances.iter().zip(&dataset.manifest.instances) {
        fs::write(dir.join(&entry.file), encode_payload(inst))?;
    }
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}

/// Reads a dataset written by [`save`]. Accepts either the directory or the
/// manifest path.
pub fn load(path: &Path) -> Result<Dataset> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CcsError::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: format!("{}: {e}", manifest_path.display()),
    })?;

    if manifest.version != MANIFEST_VERSION {
        return Err(CcsError::Integrity(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    if manifest.instances.len() != manifest.n * manifest.per_class {
        return Err(CcsError::Integrity(format!(
            "manifest lists {} instances, expected {} x {}",
            manifest.instances.len(),
            manifest.n,
            manifest.per_class
        )));
    }
    let mut counts = vec![0usize; manifest.n];
    for e in &manifest.instances {
        if e.label >= manifest.n {
            return Err(CcsError::Integrity(format!(
                "instance {} has label {} outside 0..{}",
                e.id, e.label, manifest.n
            )));
        }
        counts[e.label] += 1;
    }
    if counts.iter().any(|&c| c != manifest.per_class) {
        return Err(CcsError::Integrity(format!(
            "per-category counts {counts:?} disagree with per_class {}",
            manifest.per_class
        )));
    }

    let mut instances = Vec::with_capacity(manifest.instances.len());
    for e in &manifest.instances {
        let bytes = fs::read(dir.join(&e.file))?;
        let (frames_f, frames_o) = decode_payload(&bytes, &e.file, &manifest)?;
        instances.push(Instance {
            id: e.id,
            label: e.label,
            frames_f,
            frames_o,
        });
    }
    Ok(Dataset {
        manifest,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n: 4,
            per_class: 3,
            length: 6,
            d_in: 5,
            seed: 1,
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let odd = SynthConfig { n: 5, ..small() };
        assert!(matches!(generate(&odd), Err(CcsError::Config(_))));
        let two = SynthConfig { n: 2, ..small() };
        assert!(matches!(generate(&two), Err(CcsError::Config(_))));
        let one = SynthConfig {
            per_class: 1,
            ..small()
        };
        assert!(matches!(generate(&one), Err(CcsError::Config(_))));
    }

    #[test]
    fn pairs_share_the_declared_component() {
        let p = prototypes(&SynthConfig::default()).unwrap();
        for pair in confusable_pairs(8) {
            let [a, b] = pair.labels;
            let shared = p.component(pair.modality);
            let split = p.component(pair.modality.other());
            assert_eq!(shared.row(a), shared.row(b));
            assert_ne!(split.row(a), split.row(b));
        }
    }

    #[test]
    fn shapes_ids_and_labels() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.instances.len(), 12);
        for (i, inst) in d.instances.iter().enumerate() {
            assert_eq!(inst.id, i);
            assert!(inst.label < 4);
            assert_eq!(inst.frames_f.shape(), &[6, 5]);
            assert_eq!(inst.frames_o.shape(), &[6, 5]);
            assert!(inst.frames_f.is_finite() && inst.frames_o.is_finite());
        }
        assert_eq!(
            d.by_label().iter().map(Vec::len).collect::<Vec<_>>(),
            vec![3; 4]
        );
    }

    #[test]
    fn manifest_json_field_names() {
        let d = generate(&small()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&d.manifest).unwrap();
        for key in [
            "version",
            "n",
            "per_class",
            "L",
            "D_in",
            "seed",
            "confusable_pairs",
            "instances",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["instances"][0]["file"], "inst_000000.bin");
    }

    #[test]
    fn byte_offset_counts_lines() {
        let text = "ab\ncd\nef";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 1), 6);
    }
}
