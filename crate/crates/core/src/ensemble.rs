//! Leave-one-patient-out ensembles and pixel-wise fusion of their members.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_test_patches, fit_slice, stitch, MaskVolume, PatchSample, SizePolicy, Volume};
use crate::error::{Error, Result};
use crate::eval::{mean_sd, score_volume, MetricReport};
use crate::network::{load_checkpoint, save_checkpoint, ModelSpec, ModelState};
use crate::tensor::Tensor;
use crate::trainer::{train, LearningCurve, TrainConfig};

/// One member's data split: it trains on every patient except `val_patient`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LopoSplit {
    pub member_id: String,
    pub train_patients: Vec<String>,
    pub val_patient: String,
}

/// Member `Mi` (1-based) validates on the `(N + 1 - i)`-th patient.
pub fn make_lopo_splits(patients: &[String]) -> Result<Vec<LopoSplit>> {
    if patients.len() < 2 {
        return Err(Error::InvalidInput(format!("LOPO needs at least 2 patients, got {}", patients.len())));
    }
    let mut seen = HashSet::new();
    for p in patients {
        if !seen.insert(p) {
            return Err(Error::InvalidInput(format!("duplicate patient id `{p}`")));
        }
    }
    let n = patients.len();
    Ok((1..=n)
        .map(|i| {
            let val = n - i;
            LopoSplit {
                member_id: format!("M{i}"),
                train_patients: patients.iter().enumerate().filter(|&(k, _)| k != val).map(|(_, p)| p.clone()).collect(),
                val_patient: patients[val].clone(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    /// Hard voting; even ties fall back to the mean probability.
    #[default]
    Majority,
    /// Threshold the mean probability.
    MeanProb,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MAJORITY" => Ok(Fusion::Majority),
            "MEAN_PROB" | "MEAN" => Ok(Fusion::MeanProb),
            _ => Err(Error::config(format!("unknown fusion rule `{s}` (expected MAJORITY or MEAN_PROB)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Majority => "MAJORITY",
            Fusion::MeanProb => "MEAN_PROB",
        }
    }
}

/// Fuses equally shaped member probability maps into a binary map. Under
/// majority voting a pixel is positive when at least `floor(N/2) + 1`
/// members reach `threshold`; an exact half split is decided by the mean
/// probability reaching 0.5.
pub fn fuse(members: &[&[f32]], fusion: Fusion, threshold: f32) -> Result<Vec<u8>> {
    let first = members.first().ok_or_else(|| Error::InvalidInput("fusion needs at least one member".into()))?;
    if let Some(bad) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::shape(format!("member maps differ in size: {} vs {}", first.len(), bad.len())));
    }
    if members.iter().any(|m| m.iter().any(|p| !(0.0..=1.0).contains(p))) {
        return Err(Error::InvalidInput("member probabilities must lie in [0, 1]".into()));
    }
    let n = members.len() as u128;
    // Exact integer sums keep the mean independent of member order and multiplicity.
    let mean_reaches = |i: usize, t: f32| members.iter().map(|m| fixed(m[i])).sum::<u128>() >= n * fixed(t);
    Ok((0..first.len())
        .map(|i| match fusion {
            Fusion::MeanProb => mean_reaches(i, threshold) as u8,
            Fusion::Majority => {
                let votes = members.iter().filter(|m| m[i] >= threshold).count() as u128;
                if 2 * votes == n {
                    mean_reaches(i, 0.5) as u8
                } else {
                    (votes > n / 2) as u8
                }
            }
        })
        .collect())
}

/// A probability in [0, 1] as a multiple of 2^-100, truncated.
fn fixed(p: f32) -> u128 {
    (p.clamp(0.0, 1.0) as f64 * 2f64.powi(100)) as u128
}

/// Architecture and training settings of one member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

/// `n` member configurations whose initialisation and training seeds are
/// offset by the member index.
pub fn member_configs(spec: &ModelSpec, train: &TrainConfig, n: usize) -> Vec<MemberConfig> {
    (0..n as u64)
        .map(|i| MemberConfig {
            spec: spec.clone().with_seed(spec.init_seed.wrapping_add(i)),
            train: TrainConfig { seed: train.seed.wrapping_add(i), ..train.clone() },
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Member {
    pub split: LopoSplit,
    pub config: MemberConfig,
    pub state: ModelState<f32>,
    pub val_dsc: Option<f64>,
    pub best_epoch: usize,
    pub curve: LearningCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub member_id: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct EnsembleBundle {
    pub members: Vec<Member>,
    pub failures: Vec<MemberFailure>,
    pub fusion: Fusion,
    pub vote_threshold: f32,
}

impl EnsembleBundle {
    /// Wraps a single trained model.
    pub fn single(state: ModelState<f32>) -> Self {
        let split = LopoSplit { member_id: "M1".into(), train_patients: Vec::new(), val_patient: String::new() };
        let config = MemberConfig { spec: state.spec().clone(), train: TrainConfig::default() };
        EnsembleBundle {
            members: vec![Member { split, config, state, val_dsc: None, best_epoch: 0, curve: LearningCurve::default() }],
            failures: Vec::new(),
            fusion: Fusion::Majority,
            vote_threshold: 0.5,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && !self.members.is_empty()
    }

    /// Mean and population SD of the member validation DSCs.
    pub fn val_dsc_summary(&self) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.members.iter().filter_map(|m| m.val_dsc).collect();
        (!v.is_empty()).then(|| mean_sd(&v))
    }

    fn input_size(&self) -> Result<(usize, usize)> {
        let first = self.members.first().ok_or_else(|| Error::InvalidInput("bundle has no members".into()))?;
        let size = first.state.spec().input_size;
        if self.members.iter().any(|m| m.state.spec().input_size != size) {
            return Err(Error::InvalidInput("bundle members disagree on input size".into()));
        }
        Ok(size)
    }
}

/// Trains one member per split, at most `jobs` at a time. Members are
/// independent, so the bundle equals a sequential run. A member that fails
/// is recorded in `failures` and left out of `members`.
pub fn train_ensemble(
    splits: &[LopoSplit],
    patches: &BTreeMap<String, Vec<PatchSample>>,
    configs: &[MemberConfig],
    jobs: usize,
) -> Result<EnsembleBundle> {
    if splits.is_empty() || splits.len() != configs.len() {
        return Err(Error::InvalidInput(format!("{} splits for {} member configs", splits.len(), configs.len())));
    }
    for split in splits {
        for p in split.train_patients.iter().chain([&split.val_patient]) {
            if !patches.contains_key(p) {
                return Err(Error::InvalidInput(format!("no patches for patient `{p}`")));
            }
        }
    }
    let seeds: HashSet<(u64, u64)> = configs.iter().map(|c| (c.spec.init_seed, c.train.seed)).collect();
    if seeds.len() != configs.len() {
        return Err(Error::config("ensemble members need distinct seeds"));
    }
    let run = |(split, cfg): (&LopoSplit, &MemberConfig)| -> Result<Member> {
        let train_set: Vec<PatchSample> =
            split.train_patients.iter().flat_map(|p| patches[p].iter().cloned()).collect();
        let val_set = &patches[&split.val_patient];
        let model = ModelState::<f32>::build(&cfg.spec)?;
        let out = train(model, &train_set, val_set, &cfg.train)?;
        Ok(Member {
            split: split.clone(),
            config: cfg.clone(),
            state: out.state,
            val_dsc: out.best_val_dsc,
            best_epoch: out.best_epoch,
            curve: out.curve,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Member>> = pool.install(|| splits.par_iter().zip(configs).map(run).collect());
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (split, r) in splits.iter().zip(results) {
        match r {
            Ok(m) => members.push(m),
            Err(e) => failures.push(MemberFailure { member_id: split.member_id.clone(), message: e.to_string() }),
        }
    }
    Ok(EnsembleBundle { members, failures, fusion: Fusion::Majority, vote_threshold: 0.5 })
}

/// Fused mask of a volume together with the members' mean probability.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePrediction {
    pub mask: MaskVolume,
    pub mean_prob: Vec<f32>,
}

/// Member probabilities for a batch of equally sized patches.
fn member_probs(state: &ModelState<f32>, patches: &[Vec<f32>], ph: usize, pw: usize, batch: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch.max(1)) {
        let data: Vec<f32> = chunk.iter().flatten().copied().collect();
        let probs = state.predict(&Tensor::new(vec![chunk.len(), 1, ph, pw], data)?)?;
        out.extend(probs.data().chunks(ph * pw).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Segments a normalised volume slice by slice: tiles each slice into
/// model-sized patches, runs every member, fuses and stitches. Slices that do
/// not tile are handled per `policy`; resampled predictions are mapped back to
/// the original extent.
pub fn predict_volume(bundle: &EnsembleBundle, volume: &Volume, policy: SizePolicy) -> Result<VolumePrediction> {
    let (ph, pw) = bundle.input_size()?;
    if ph != pw {
        return Err(Error::InvalidInput("volume prediction needs square model inputs".into()));
    }
    let [slices, h, w] = volume.dims;
    let mut mask = Vec::with_capacity(slices * h * w);
    let mut mean_prob = Vec::with_capacity(slices * h * w);
    for s in 0..slices {
        let (img, _, fh, fw) = fit_slice(volume.slice(s), None, h, w, ph, policy)?;
        let tiles = extract_test_patches(&img, fh, fw, ph)?;
        let inputs: Vec<Vec<f32>> = tiles.iter().map(|t| t.data.clone()).collect();
        let per_member: Vec<Vec<Vec<f32>>> = bundle
            .members
            .par_iter()
            .map(|m| member_probs(&m.state, &inputs, ph, pw, 16))
            .collect::<Result<_>>()?;
        let mut fused_tiles = Vec::with_capacity(tiles.len());
        let mut prob_tiles = Vec::with_capacity(tiles.len());
        for (k, t) in tiles.iter().enumerate() {
            let maps: Vec<&[f32]> = per_member.iter().map(|m| m[k].as_slice()).collect();
            let fused = fuse(&maps, bundle.fusion, bundle.vote_threshold)?;
            let n = maps.len() as f32;
            let mean: Vec<f32> = (0..ph * pw).map(|i| maps.iter().map(|m| m[i]).sum::<f32>() / n).collect();
            fused_tiles.push(crate::data::TestPatch { row: t.row, col: t.col, data: fused });
            prob_tiles.push(crate::data::TestPatch { row: t.row, col: t.col, data: mean });
        }
        let slice_mask = stitch(&fused_tiles, fh, fw, ph)?;
        let slice_prob = stitch(&prob_tiles, fh, fw, ph)?;
        if (fh, fw) == (h, w) {
            mask.extend(slice_mask);
            mean_prob.extend(slice_prob);
        } else {
            mask.extend(crate::data::resize_nearest(&slice_mask, fh, fw, h, w));
            mean_prob.extend(crate::data::resize_bilinear(&slice_prob, fh, fw, h, w));
        }
    }
    Ok(VolumePrediction { mask: MaskVolume::new(volume.dims, mask)?, mean_prob })
}

/// A named evaluation case: normalised volume and its truth mask.
pub struct EvalCase<'a> {
    pub name: &'a str,
    pub volume: &'a Volume,
    pub truth: &'a MaskVolume,
}

/// Predicts and scores every case, at most `jobs` volumes at a time.
pub fn evaluate_bundle(bundle: &EnsembleBundle, cases: &[EvalCase<'_>], policy: SizePolicy, jobs: usize) -> Result<MetricReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let scores = pool.install(|| {
        cases
            .par_iter()
            .map(|c| {
                let pred = predict_volume(bundle, c.volume, policy)?;
                score_volume(c.name, &pred.mask, Some(&pred.mean_prob), c.truth)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MetricReport::from_scores(scores))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestMember {
    member_id: String,
    checkpoint: PathBuf,
    train_patients: Vec<String>,
    val_patient: String,
    init_seed: u64,
    train_seed: u64,
    val_dsc: Option<f64>,
    best_epoch: usize,
    config: MemberConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    fusion: Fusion,
    vote_threshold: f32,
    complete: bool,
    val_dsc_mean: Option<f64>,
    val_dsc_sd: Option<f64>,
    members: Vec<ManifestMember>,
    failures: Vec<MemberFailure>,
}

pub const BUNDLE_MANIFEST: &str = "bundle.json";

/// Writes member checkpoints, learning curves and `bundle.json` into `dir`.
pub fn save_bundle(bundle: &EnsembleBundle, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut members = Vec::new();
    for m in &bundle.members {
        let file = format!("{}.amc1", m.split.member_id);
        save_checkpoint(&m.state, &dir.join(&file))?;
        m.curve.write_csv(&dir.join(format!("{}_curve.csv", m.split.member_id)))?;
        members.push(ManifestMember {
            member_id: m.split.member_id.clone(),
            checkpoint: PathBuf::from(file),
            train_patients: m.split.train_patients.clone(),
            val_patient: m.split.val_patient.clone(),
            init_seed: m.config.spec.init_seed,
            train_seed: m.config.train.seed,
            val_dsc: m.val_dsc,
            best_epoch: m.best_epoch,
            config: m.config.clone(),
        });
    }
    let summary = bundle.val_dsc_summary();
    let manifest = Manifest {
        fusion: bundle.fusion,
        vote_threshold: bundle.vote_threshold,
        complete: bundle.is_complete(),
        val_dsc_mean: summary.map(|s| s.0),
        val_dsc_sd: summary.map(|s| s.1),
        members,
        failures: bundle.failures.clone(),
    };
    let path = dir.join(BUNDLE_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a bundle manifest, or a bare `AMC1` checkpoint as a one-member
/// bundle. Checkpoint paths resolve relative to the manifest.
pub fn load_bundle(path: &Path) -> Result<EnsembleBundle> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(b"AMC1") {
        return Ok(EnsembleBundle::single(load_checkpoint(path)?));
    }
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut members = Vec::new();
    for m in manifest.members {
        let state = load_checkpoint(&base.join(&m.checkpoint))?;
        members.push(Member {
            split: LopoSplit { member_id: m.member_id, train_patients: m.train_patients, val_patient: m.val_patient },
            config: m.config,
            state,
            val_dsc: m.val_dsc,
            best_epoch: m.best_epoch,
            curve: LearningCurve::default(),
        });
    }
    if members.is_empty() {
        return Err(Error::format(path, "bundle lists no members"));
    }
    Ok(EnsembleBundle { members, failures: manifest.failures, fusion: manifest.fusion, vote_threshold: manifest.vote_threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("P{i}")).collect()
    }

    #[test]
    fn lopo_pairing() {
        let splits = make_lopo_splits(&ids(10)).unwrap();
        assert_eq!(splits.len(), 10);
        assert_eq!(splits[0].val_patient, "P10");
        assert_eq!(splits[0].train_patients, ids(9));
        assert_eq!(splits[9].val_patient, "P1");
        let two = make_lopo_splits(&ids(2)).unwrap();
        assert_eq!((two[0].val_patient.as_str(), two[1].val_patient.as_str()), ("P2", "P1"));
        assert!(make_lopo_splits(&ids(1)).is_err());
        assert!(make_lopo_splits(&["A".into(), "A".into()]).is_err());
    }

    #[test]
    fn majority_and_ties() {
        let a = [0.9f32, 0.2, 0.6];
        let b = [0.8f32, 0.1, 0.4];
        let c = [0.2f32, 0.7, 0.3];
        assert_eq!(fuse(&[&a, &b, &c], Fusion::Majority, 0.5).unwrap(), [1, 0, 0]);
        // Two members split 1-1: mean decides.
        assert_eq!(fuse(&[&a, &c], Fusion::Majority, 0.5).unwrap(), [1, 0, 0]);
        assert_eq!(fuse(&[&[0.9f32][..], &[0.2f32][..]], Fusion::Majority, 0.5).unwrap(), [1]);
        assert_eq!(fuse(&[&a, &b, &c], Fusion::MeanProb, 0.5).unwrap(), [1, 0, 0]);
        assert!(fuse(&[], Fusion::Majority, 0.5).is_err());
        assert!(fuse(&[&a, &a[..2]], Fusion::Majority, 0.5).is_err());
    }

    #[test]
    fn seeds_differ_per_member() {
        let cfgs = member_configs(&ModelSpec::default().with_seed(10), &TrainConfig { seed: 3, ..Default::default() }, 3);
        let seeds: Vec<_> = cfgs.iter().map(|c| (c.spec.init_seed, c.train.seed)).collect();
        assert_eq!(seeds, [(10, 3), (11, 4), (12, 5)]);
    }
}
