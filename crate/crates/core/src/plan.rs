//! Corpus-level perturbation: derive a requested number of incorrect scenes
//! from the correct scenes of a corpus, split across perturbation kinds.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::grammar::Grammar;
use crate::perturb::{
    perturb_extra, perturb_replace, perturb_scatter, perturb_swap, PartLibrary, PerturbError,
    PerturbationKind,
};
use crate::raster::RasterImage;
use crate::seed;
use crate::synth::{self, CorpusError, Correctness, ManifestEntry, Scene};

/// Source scenes tried per requested perturbation before giving up.
pub const MAX_SOURCE_ATTEMPTS: usize = 8;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid mix: {0}")]
    Mix(String),
    #[error("the corpus has no unperturbed correct scene to start from")]
    NoCorrectScenes,
    #[error("scatter needs background images, but none are registered for {classes}")]
    NoBackgrounds { classes: String },
    #[error("no grammar for class `{0}`")]
    NoGrammar(String),
    #[error("could not apply {kind} to any of {attempts} source scenes: {last}")]
    NoSource {
        kind: PerturbationKind,
        attempts: usize,
        last: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

/// Relative weights of perturbation kinds, e.g. `swap=0.4,replace=0.3,extra=0.3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbMix {
    entries: Vec<(PerturbationKind, f64)>,
}

impl PerturbMix {
    pub fn new(entries: Vec<(PerturbationKind, f64)>) -> Result<Self, PlanError> {
        if entries.is_empty() {
            return Err(PlanError::Mix("no kinds given".into()));
        }
        for (i, (k, w)) in entries.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(PlanError::Mix(format!("weight of {k} must be finite and >= 0, got {w}")));
            }
            if entries[..i].iter().any(|(other, _)| other == k) {
                return Err(PlanError::Mix(format!("{k} is listed twice")));
            }
        }
        if entries.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(PlanError::Mix("weights sum to zero".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(PerturbationKind, f64)] {
        &self.entries
    }

    /// Splits `n` by largest remainder; ties go to the kind listed first.
    pub fn allocate(&self, n: usize) -> Vec<(PerturbationKind, usize)> {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        let quotas: Vec<f64> = self.entries.iter().map(|(_, w)| w / total * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        self.entries.iter().map(|(k, _)| *k).zip(counts).collect()
    }
}

impl FromStr for PerturbMix {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (name, weight) = item
                .split_once('=')
                .ok_or_else(|| PlanError::Mix(format!("`{item}` is not of the form kind=weight")))?;
            let kind = match name.trim() {
                "swap" => PerturbationKind::Swap,
                "replace" => PerturbationKind::Replace,
                "extra" => PerturbationKind::Extra,
                "scatter" => PerturbationKind::Scatter,
                other => return Err(PlanError::Mix(format!("unknown kind `{other}`"))),
            };
            let w: f64 = weight
                .trim()
                .parse()
                .map_err(|_| PlanError::Mix(format!("`{weight}` is not a number")))?;
            entries.push((kind, w));
        }
        Self::new(entries)
    }
}

/// Adds `count` incorrect scenes to the corpus at `dir` and returns their ids.
///
/// Sources are the correct scenes without provenance. Each new scene is
/// named `<source>-<kind>-<n>` with `n` its position in the plan.
pub fn perturb_corpus(
    dir: &Path,
    grammars: &BTreeMap<String, Grammar>,
    mix: &PerturbMix,
    count: usize,
    base_seed: u64,
) -> Result<Vec<String>, PlanError> {
    let manifest = synth::read_manifest(dir)?;
    let mut sources: Vec<(ManifestEntry, Scene)> = Vec::new();
    for e in manifest.scenes.iter().filter(|e| e.correctness == Correctness::Correct) {
        let scene = synth::load_scene(dir, e)?;
        if scene.annotation.provenance.is_empty() {
            sources.push((e.clone(), scene));
        }
    }
    if sources.is_empty() {
        return Err(PlanError::NoCorrectScenes);
    }
    let plan = mix.allocate(count);
    let wants_scatter = plan.iter().any(|&(k, n)| k == PerturbationKind::Scatter && n > 0);
    let scatter_ok = |e: &ManifestEntry| {
        manifest
            .backgrounds
            .get(&e.class_name)
            .is_some_and(|b| !b.is_empty())
    };
    if wants_scatter && !sources.iter().any(|(e, _)| scatter_ok(e)) {
        let mut classes: Vec<&str> = sources.iter().map(|(e, _)| e.class_name.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        return Err(PlanError::NoBackgrounds {
            classes: classes.join(", "),
        });
    }
    let mut libraries: BTreeMap<&str, PartLibrary> = BTreeMap::new();
    for (e, _) in &sources {
        if !libraries.contains_key(e.class_name.as_str()) {
            let g = grammars
                .get(&e.class_name)
                .ok_or_else(|| PlanError::NoGrammar(e.class_name.clone()))?;
            libraries.insert(e.class_name.as_str(), PartLibrary::from_grammar(g)?);
        }
    }

    let kinds = plan.iter().flat_map(|&(k, n)| std::iter::repeat_n(k, n));
    let mut made = Vec::with_capacity(count);
    for (i, kind) in kinds.enumerate() {
        let mut rng = seed::rng_for(base_seed, &format!("plan/{i}"));
        let pool: Vec<&(ManifestEntry, Scene)> = sources
            .iter()
            .filter(|(e, _)| kind != PerturbationKind::Scatter || scatter_ok(e))
            .collect();
        let mut last = String::new();
        let mut done = None;
        for attempt in 0..MAX_SOURCE_ATTEMPTS {
            let (entry, scene) = *pool.choose(&mut rng).expect("pool is not empty");
            let grammar = &grammars[&entry.class_name];
            let library = &libraries[entry.class_name.as_str()];
            let op_seed = seed::derive_seed(base_seed, &format!("op/{i}/{attempt}"));
            match apply(kind, dir, scene, grammar, library, &manifest.backgrounds, op_seed, &mut rng) {
                Ok(s) => {
                    done = Some(s.renamed(&format!("{}-{kind}-{i:04}", entry.scene_id)));
                    break;
                }
                Err(e) => last = e,
            }
        }
        let scene = done.ok_or(PlanError::NoSource {
            kind,
            attempts: MAX_SOURCE_ATTEMPTS,
            last,
        })?;
        made.push(scene);
    }
    synth::append_corpus(&made, dir)?;
    Ok(made.into_iter().map(|s| s.annotation.scene_id).collect())
}

#[allow(clippy::too_many_arguments)]
fn apply<R: Rng>(
    kind: PerturbationKind,
    dir: &Path,
    scene: &Scene,
    grammar: &Grammar,
    library: &PartLibrary,
    backgrounds: &BTreeMap<String, Vec<String>>,
    op_seed: u64,
    rng: &mut R,
) -> Result<Scene, String> {
    let parts = &scene.annotation.parts;
    let vocab = grammar.vocabulary();
    match kind {
        PerturbationKind::Swap => {
            let pairs: Vec<(usize, usize)> = (0..parts.len())
                .flat_map(|a| (a + 1..parts.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| parts[a].label != parts[b].label)
                .collect();
            let &(a, b) = pairs
                .choose(rng)
                .ok_or("scene has no two differently labelled parts")?;
            perturb_swap(scene, a, b, op_seed).map_err(|e| e.to_string())
        }
        PerturbationKind::Replace => {
            if parts.is_empty() {
                return Err("scene has no parts".into());
            }
            let target = rng.random_range(0..parts.len());
            let others: Vec<_> = vocab.iter().filter(|l| **l != parts[target].label).collect();
            let label = *others
                .choose(rng)
                .ok_or("vocabulary has a single label")?;
            perturb_replace(scene, target, label, grammar, library, op_seed).map_err(|e| e.to_string())
        }
        PerturbationKind::Extra => {
            let label = vocab.choose(rng).expect("vocabulary is never empty");
            perturb_extra(scene, label, grammar, library, op_seed).map_err(|e| e.to_string())
        }
        PerturbationKind::Scatter => {
            let list = backgrounds
                .get(&scene.annotation.class_name)
                .filter(|l| !l.is_empty())
                .ok_or("no backgrounds for the scene's class")?;
            let rel = list.choose(rng).expect("list is not empty");
            let bg = RasterImage::load(&dir.join(rel)).map_err(|e| e.to_string())?;
            perturb_scatter(scene, &bg, rel, op_seed).map_err(|e| e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render;
    use crate::synth::{generate_scenes, write_corpus, JitterSpec};
    use PerturbationKind::*;

    #[test]
    fn mix_parsing() {
        let m: PerturbMix = "swap=0.4, replace=0.3,extra=0.3".parse().unwrap();
        assert_eq!(m.entries().len(), 3);
        for bad in ["", "swap", "swap=x", "blend=1", "swap=-1", "swap=0", "swap=1,swap=2"] {
            assert!(bad.parse::<PerturbMix>().is_err(), "{bad}");
        }
    }

    #[test]
    fn largest_remainder_allocation() {
        let m: PerturbMix = "swap=0.4,replace=0.3,extra=0.3".parse().unwrap();
        assert_eq!(m.allocate(200), vec![(Swap, 80), (Replace, 60), (Extra, 60)]);
        assert_eq!(m.allocate(10), vec![(Swap, 4), (Replace, 3), (Extra, 3)]);
        assert_eq!(m.allocate(1), vec![(Swap, 1), (Replace, 0), (Extra, 0)]);
        let thirds: PerturbMix = "swap=1,replace=1,extra=1".parse().unwrap();
        assert_eq!(thirds.allocate(4), vec![(Swap, 2), (Replace, 1), (Extra, 1)]);
        for n in 0..50 {
            assert_eq!(thirds.allocate(n).iter().map(|(_, c)| c).sum::<usize>(), n);
        }
    }

    fn corpus(dir: &Path) -> BTreeMap<String, Grammar> {
        let g = Grammar::bundled("face").unwrap();
        let j = JitterSpec {
            seed: 4,
            center_sigma: 0.05,
            size_sigma: 0.05,
            drop_prob: 0.3,
        };
        let ids: Vec<String> = (0..6).map(|i| format!("face-{i:03}")).collect();
        let scenes = generate_scenes(&g, 224, 224, &j, &ids, 2).unwrap();
        write_corpus(&scenes, dir).unwrap();
        BTreeMap::from([("face".to_owned(), g)])
    }

    #[test]
    fn corpus_perturbation() {
        let tmp = tempfile::tempdir().unwrap();
        let grammars = corpus(tmp.path());
        let mix: PerturbMix = "swap=0.4,replace=0.3,extra=0.3".parse().unwrap();
        let ids = perturb_corpus(tmp.path(), &grammars, &mix, 10, 1).unwrap();
        assert_eq!(ids.len(), 10);
        assert!(ids[0].ends_with("-swap-0000") && ids[9].ends_with("-extra-0009"));
        let m = synth::read_manifest(tmp.path()).unwrap();
        assert_eq!((m.counts.correct, m.counts.incorrect), (6, 10));
        for id in &ids {
            let e = m.entry(id).unwrap();
            let s = synth::load_scene(tmp.path(), e).unwrap();
            assert_eq!(s.annotation.provenance.len(), 1);
        }
    }

    #[test]
    fn scatter_requires_backgrounds() {
        let tmp = tempfile::tempdir().unwrap();
        let grammars = corpus(tmp.path());
        let mix: PerturbMix = "scatter=1".parse().unwrap();
        let err = perturb_corpus(tmp.path(), &grammars, &mix, 2, 1).unwrap_err();
        assert!(err.to_string().contains("background"), "{err}");
        let bg = render::background(224, 224, 8).unwrap();
        synth::add_backgrounds(tmp.path(), "face", &[("bg-000".into(), bg)]).unwrap();
        let ids = perturb_corpus(tmp.path(), &grammars, &mix, 2, 1).unwrap();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mix: PerturbMix = "swap=1,replace=1,extra=1".parse().unwrap();
        for d in [a.path(), b.path()] {
            let g = corpus(d);
            perturb_corpus(d, &g, &mix, 5, 9).unwrap();
        }
        assert_eq!(
            synth::manifest_digest(a.path()).unwrap(),
            synth::manifest_digest(b.path()).unwrap()
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(&[], tmp.path()).unwrap();
        let mix: PerturbMix = "swap=1".parse().unwrap();
        assert!(matches!(
            perturb_corpus(tmp.path(), &BTreeMap::new(), &mix, 1, 0),
            Err(PlanError::NoCorrectScenes)
        ));
    }
}
