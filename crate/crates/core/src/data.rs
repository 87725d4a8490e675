//! Synthetic speakers and corpora.
//!
//! Each token has a prototype feature vector. A speaker renders a token
//! sequence as frames: blank frames around and between tokens, a jittered
//! number of frames per token, a fixed linear warp of the prototype, additive
//! noise, and occasionally the acoustics of a different token while the label
//! keeps the intended one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::collapse;
use crate::par::{self, Parallelism};
use crate::rng::RngStream;
use crate::tensor::Matrix;
use crate::vocab::{Vocab, BLANK};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub const ALLOWED_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
const PROTOTYPE_ATTEMPTS: usize = 10_000;
const MAX_COSINE: f64 = 0.5;
const BASE_FRAMES: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intelligibility {
    VeryLow,
    Low,
    Medium,
    Control,
}

impl Intelligibility {
    pub const ALL: [Intelligibility; 4] = [
        Intelligibility::VeryLow,
        Intelligibility::Low,
        Intelligibility::Medium,
        Intelligibility::Control,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Intelligibility::VeryLow => "very-low",
            Intelligibility::Low => "low",
            Intelligibility::Medium => "medium",
            Intelligibility::Control => "control",
        }
    }

    /// (warp strength, substitution probability, jitter half-width, noise).
    fn severity(self) -> (f64, f64, f64, f64) {
        match self {
            Intelligibility::Control => (0.0, 0.0, 0.0, 0.12),
            Intelligibility::Medium => (0.3, 0.03, 0.2, 0.14),
            Intelligibility::Low => (0.5, 0.06, 0.3, 0.16),
            Intelligibility::VeryLow => (0.7, 0.1, 0.4, 0.18),
        }
    }
}

impl std::str::FromStr for Intelligibility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Intelligibility::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown intelligibility level {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub intelligibility: Intelligibility,
    /// `d x d` warp applied to every prototype.
    pub distortion: Matrix,
    /// token -> (token whose acoustics are produced instead, probability).
    pub substitutions: BTreeMap<usize, (usize, f64)>,
    /// Frame-count multiplier is uniform on `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub noise_scale: f64,
}

impl SpeakerProfile {
    pub fn new(speaker_id: &str, level: Intelligibility, feature_dim: usize, vocab_size: usize, rng: &mut RngStream) -> Self {
        let (warp, sub_p, jitter, noise_scale) = level.severity();
        let distortion = if warp == 0.0 {
            Matrix::identity(feature_dim)
        } else {
            let q = random_orthogonal(feature_dim, rng);
            Matrix::identity(feature_dim)
                .scale(1.0 - warp)
                .add(&q.scale(warp))
                .expect("square")
        };
        let mut substitutions = BTreeMap::new();
        if sub_p > 0.0 && vocab_size > 2 {
            // A derangement of the non-blank tokens.
            let mut ids: Vec<usize> = (1..vocab_size).collect();
            rng.shuffle(&mut ids);
            for (i, &from) in ids.iter().enumerate() {
                substitutions.insert(from, (ids[(i + 1) % ids.len()], sub_p));
            }
        }
        SpeakerProfile {
            speaker_id: speaker_id.to_string(),
            intelligibility: level,
            distortion,
            substitutions,
            jitter,
            noise_scale,
        }
    }
}

fn random_orthogonal(d: usize, rng: &mut RngStream) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&basis).expect("square basis")
}

/// `vocab_size x d` prototypes: unit rows with pairwise cosine at most 0.5,
/// and a zero row for the blank.
pub fn gen_prototypes(vocab_size: usize, feature_dim: usize, rng: &mut RngStream) -> Result<Matrix> {
    if vocab_size < 2 || feature_dim < 2 {
        return Err(Error::Config(format!(
            "prototypes need vocabulary and feature sizes >= 2 (got {vocab_size}, {feature_dim})"
        )));
    }
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; feature_dim]];
    let mut attempts = 0;
    while rows.len() < vocab_size {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {vocab_size} separated prototypes in {feature_dim} dimensions"
            )));
        }
        let v: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.into_iter().map(|x| x / norm).collect();
        let separated = rows[1..]
            .iter()
            .all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= MAX_COSINE);
        if separated {
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    AdaptTrain,
    NonnormTest,
    NormTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::AdaptTrain => "adapt-train",
            Split::NonnormTest => "nonnorm-test",
            Split::NormTest => "norm-test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Pretrain, Split::AdaptTrain, Split::NonnormTest, Split::NormTest]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub features: Matrix,
    pub frame_labels: Vec<usize>,
    pub reference: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    speaker: String,
    split: Split,
    features: Vec<Vec<f64>>,
    frame_labels: Vec<usize>,
    reference: Vec<usize>,
}

impl Utterance {
    fn to_record(&self) -> UtteranceRecord {
        UtteranceRecord {
            id: self.id.clone(),
            speaker: self.speaker.clone(),
            split: self.split,
            features: (0..self.features.rows()).map(|r| self.features.row(r).to_vec()).collect(),
            frame_labels: self.frame_labels.clone(),
            reference: self.reference.clone(),
        }
    }

    fn from_record(r: UtteranceRecord, feature_dim: usize) -> Result<Self> {
        let features = if r.features.is_empty() {
            Matrix::zeros(0, feature_dim)
        } else {
            Matrix::from_rows(&r.features)?
        };
        let u = Utterance {
            id: r.id,
            speaker: r.speaker,
            split: r.split,
            features,
            frame_labels: r.frame_labels,
            reference: r.reference,
        };
        u.validate(feature_dim)?;
        Ok(u)
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.features.rows() == 0 || self.features.cols() != feature_dim {
            return Err(Error::Data(format!(
                "utterance {} has features {:?}, expected at least one frame of width {feature_dim}",
                self.id,
                self.features.shape()
            )));
        }
        if self.features.rows() != self.frame_labels.len() {
            return Err(Error::Data(format!(
                "utterance {} has {} frames but {} frame labels",
                self.id,
                self.features.rows(),
                self.frame_labels.len()
            )));
        }
        if collapse(&self.frame_labels) != self.reference {
            return Err(Error::Data(format!("utterance {} frame labels do not collapse to its reference", self.id)));
        }
        Ok(())
    }
}

/// Renders `tokens` as one utterance of `profile`.
pub fn synth_utterance(
    id: &str,
    split: Split,
    profile: &SpeakerProfile,
    tokens: &[usize],
    prototypes: &Matrix,
    rng: &mut RngStream,
) -> Result<Utterance> {
    if tokens.is_empty() {
        return Err(Error::Data(format!("utterance {id}: empty token sequence")));
    }
    let d = prototypes.cols();
    if profile.distortion.shape() != (d, d) {
        return Err(Error::shape("speaker distortion", (d, d), profile.distortion.shape()));
    }
    let mut frame_labels = Vec::new();
    let mut sources = Vec::new();
    let mut push = |label: usize, source: usize, n: usize| {
        for _ in 0..n {
            frame_labels.push(label);
            sources.push(source);
        }
    };
    push(BLANK, BLANK, 1);
    for &t in tokens {
        if t == BLANK || t >= prototypes.rows() {
            return Err(Error::Data(format!("utterance {id}: token {t} is blank or outside the vocabulary")));
        }
        let m = 1.0 + profile.jitter * (2.0 * rng.uniform() - 1.0);
        let frames = ((BASE_FRAMES * m).round() as usize).max(1);
        let source = match profile.substitutions.get(&t) {
            Some(&(other, p)) if rng.uniform() < p => other,
            _ => t,
        };
        push(t, source, frames);
        push(BLANK, BLANK, 1);
    }

    let warped = prototypes.matmul(&profile.distortion.transpose())?;
    let mut features = Matrix::zeros(sources.len(), d);
    for (r, &s) in sources.iter().enumerate() {
        let proto = warped.row(s).to_vec();
        for (c, x) in features.row_mut(r).iter_mut().enumerate() {
            *x = proto[c] + profile.noise_scale * rng.normal();
        }
    }
    Ok(Utterance {
        id: id.to_string(),
        speaker: profile.speaker_id.clone(),
        split,
        features,
        reference: tokens.to_vec(),
        frame_labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub intelligibility: Intelligibility,
}

/// Parses `level[:id],...`, e.g. `very-low,low:lo2`.
pub fn parse_speakers(spec: &str) -> Result<Vec<SpeakerSpec>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (level, id) = match part.split_once(':') {
            Some((l, i)) => (l.trim(), i.trim().to_string()),
            None => (part, part.to_string()),
        };
        let intelligibility: Intelligibility = level.parse()?;
        if intelligibility == Intelligibility::Control {
            return Err(Error::Config("the control speaker is generated implicitly".into()));
        }
        if id.is_empty() || id == CONTROL_SPEAKER || out.iter().any(|s: &SpeakerSpec| s.id == id) {
            return Err(Error::Config(format!("speaker id {id:?} is empty or repeated")));
        }
        out.push(SpeakerSpec { id, intelligibility });
    }
    if out.is_empty() {
        return Err(Error::Config("at least one non-normative speaker is required".into()));
    }
    Ok(out)
}

pub const CONTROL_SPEAKER: &str = "control";
pub const DEFAULT_SPEAKERS: &str = "very-low,low,medium";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub pretrain: usize,
    pub norm_test: usize,
    /// Per non-normative speaker.
    pub adapt_train: usize,
    /// Per non-normative speaker.
    pub nonnorm_test: usize,
    pub fractions: Vec<f64>,
    pub speakers: Vec<SpeakerSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            feature_dim: 16,
            vocab_size: 12,
            pretrain: 600,
            norm_test: 100,
            adapt_train: 400,
            nonnorm_test: 100,
            fractions: ALLOWED_FRACTIONS.to_vec(),
            speakers: parse_speakers(DEFAULT_SPEAKERS).expect("default speakers"),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for &f in &self.fractions {
            if !ALLOWED_FRACTIONS.contains(&f) {
                return Err(Error::Config(format!("fraction {f} is not one of {ALLOWED_FRACTIONS:?}")));
            }
        }
        if self.pretrain == 0 || self.norm_test == 0 || self.adapt_train == 0 || self.nonnorm_test == 0 {
            return Err(Error::Config("every split needs at least one utterance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: CorpusSpec,
    pub prototypes: Matrix,
    pub profiles: Vec<SpeakerProfile>,
    /// Adapt-train ids per speaker; a fraction `f` uses the first
    /// `round(f * n)` of them, so smaller fractions nest in larger ones.
    pub adapt_order: BTreeMap<String, Vec<String>>,
}

pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
}

struct Job {
    id: String,
    split: Split,
    profile: usize,
    min_len: usize,
    max_len: usize,
}

/// Generates a corpus. The result depends only on `(spec, seed)`.
pub fn make_corpus(spec: &CorpusSpec, seed: u64, mode: Parallelism) -> Result<Corpus> {
    spec.validate()?;
    let root = RngStream::new(seed, 0);
    let prototypes = gen_prototypes(spec.vocab_size, spec.feature_dim, &mut root.derive_label("prototypes"))?;

    let mut profiles = vec![SpeakerProfile::new(
        CONTROL_SPEAKER,
        Intelligibility::Control,
        spec.feature_dim,
        spec.vocab_size,
        &mut root.derive_label("speaker/control"),
    )];
    for s in &spec.speakers {
        profiles.push(SpeakerProfile::new(
            &s.id,
            s.intelligibility,
            spec.feature_dim,
            spec.vocab_size,
            &mut root.derive_label(&format!("speaker/{}", s.id)),
        ));
    }

    let mut jobs = Vec::new();
    let mut add = |prefix: &str, split, profile, n, min_len, max_len| {
        for i in 0..n {
            jobs.push(Job {
                id: format!("{prefix}-{i:05}"),
                split,
                profile,
                min_len,
                max_len,
            });
        }
    };
    add("pretrain", Split::Pretrain, 0, spec.pretrain, 1, 8);
    add("normtest", Split::NormTest, 0, spec.norm_test, 3, 8);
    for (k, s) in spec.speakers.iter().enumerate() {
        add(&format!("{}-adapt", s.id), Split::AdaptTrain, k + 1, spec.adapt_train, 1, 2);
        add(&format!("{}-test", s.id), Split::NonnormTest, k + 1, spec.nonnorm_test, 3, 8);
    }

    let mut seen = BTreeSet::new();
    for j in &jobs {
        if !seen.insert(j.id.as_str()) {
            return Err(Error::Data(format!("utterance id {} appears in more than one split", j.id)));
        }
    }

    let results = par::map(mode, &jobs, |_, job| {
        let mut rng = root.derive_label(&format!("utt/{}", job.id));
        let len = job.min_len + rng.below(job.max_len - job.min_len + 1);
        let tokens: Vec<usize> = (0..len).map(|_| 1 + rng.below(spec.vocab_size - 1)).collect();
        synth_utterance(&job.id, job.split, &profiles[job.profile], &tokens, &prototypes, &mut rng)
    });
    let utterances = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut adapt_order = BTreeMap::new();
    for s in &spec.speakers {
        let mut ids: Vec<String> = utterances
            .iter()
            .filter(|u| u.split == Split::AdaptTrain && u.speaker == s.id)
            .map(|u| u.id.clone())
            .collect();
        root.derive_label(&format!("order/{}", s.id)).shuffle(&mut ids);
        adapt_order.insert(s.id.clone(), ids);
    }

    Ok(Corpus {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            seed,
            spec: spec.clone(),
            prototypes,
            profiles,
            adapt_order,
        },
        vocab: Vocab::synthetic(spec.vocab_size),
        utterances,
    })
}

impl Corpus {
    pub fn feature_dim(&self) -> usize {
        self.manifest.spec.feature_dim
    }

    pub fn split(&self, split: Split, speaker: Option<&str>) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split && speaker.is_none_or(|s| u.speaker == s))
            .collect()
    }

    /// Non-normative speaker ids in generation order.
    pub fn speakers(&self) -> Vec<&str> {
        self.manifest.spec.speakers.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn check_speaker(&self, speaker: &str) -> Result<()> {
        if self.manifest.adapt_order.contains_key(speaker) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "speaker {speaker:?} is not in the corpus (have {:?})",
                self.speakers()
            )))
        }
    }

    /// The nested adapt-train subset for `fraction` (0 gives nothing).
    pub fn adapt_subset(&self, speaker: &str, fraction: f64) -> Result<Vec<&Utterance>> {
        if fraction != 0.0 && !ALLOWED_FRACTIONS.contains(&fraction) {
            return Err(Error::Config(format!("fraction {fraction} is not one of 0 or {ALLOWED_FRACTIONS:?}")));
        }
        self.check_speaker(speaker)?;
        let order = &self.manifest.adapt_order[speaker];
        let by_id: BTreeMap<&str, &Utterance> = self.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
        order[..fraction_count(fraction, order.len())]
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("manifest lists missing utterance {id}")))
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CORPUS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for u in &self.utterances {
            serde_json::to_writer(&mut w, &u.to_record()).map_err(|e| Error::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported format version {}",
                dir.join(MANIFEST_FILE).display(),
                manifest.format_version
            )));
        }
        let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
        let path = dir.join(CORPUS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut utterances = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?;
            let u = Utterance::from_record(rec, manifest.spec.feature_dim)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if u.reference.iter().any(|&t| t >= vocab.len()) {
                return Err(Error::Data(format!("{} line {}: token outside vocabulary", path.display(), n + 1)));
            }
            utterances.push(u);
        }
        Ok(Corpus {
            manifest,
            vocab,
            utterances,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            pretrain: 20,
            norm_test: 5,
            adapt_train: 16,
            nonnorm_test: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn prototypes_are_unit_and_separated() {
        let p = gen_prototypes(12, 16, &mut RngStream::new(1, 0)).unwrap();
        assert!(p.row(0).iter().all(|&x| x == 0.0));
        for i in 1..12 {
            let n: f64 = p.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 1..i {
                let c: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                assert!(c <= 0.5);
            }
        }
        assert_eq!(p, gen_prototypes(12, 16, &mut RngStream::new(1, 0)).unwrap());
        let two = gen_prototypes(2, 16, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(two.rows(), 2);
        assert!(matches!(gen_prototypes(40, 2, &mut RngStream::new(1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn clean_control_frames_are_prototypes() {
        let protos = gen_prototypes(5, 8, &mut RngStream::new(3, 0)).unwrap();
        let mut profile = SpeakerProfile::new("c", Intelligibility::Control, 8, 5, &mut RngStream::new(4, 0));
        profile.noise_scale = 0.0;
        let u = synth_utterance("u", Split::Pretrain, &profile, &[2, 4, 4], &protos, &mut RngStream::new(5, 0)).unwrap();
        for (r, &l) in u.frame_labels.iter().enumerate() {
            assert_eq!(u.features.row(r), protos.row(l));
        }
        // Oracle classifier: nearest prototype by dot product.
        let scores = u.features.matmul(&protos.transpose()).unwrap();
        let scores = Matrix::from_fn(scores.rows(), scores.cols(), |r, c| {
            if u.features.row(r).iter().all(|&x| x == 0.0) {
                if c == 0 { 1.0 } else { 0.0 }
            } else {
                scores.get(r, c)
            }
        });
        assert_eq!(crate::model::decode_greedy(&scores), vec![2, 4, 4]);
        assert_eq!(u.frame_labels.len(), 1 + 3 * 4);
        assert!(synth_utterance("e", Split::Pretrain, &profile, &[], &protos, &mut RngStream::new(5, 0)).is_err());
    }

    #[test]
    fn corpus_nesting_and_disjointness() {
        let c = make_corpus(&small_spec(), 9, Parallelism::Sequential).unwrap();
        let mut prev: Vec<String> = Vec::new();
        for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let ids: Vec<String> = c.adapt_subset("very-low", f).unwrap().iter().map(|u| u.id.clone()).collect();
            assert_eq!(ids.len(), fraction_count(f, 16));
            assert_eq!(&ids[..prev.len()], &prev[..]);
            prev = ids;
        }
        let pre: BTreeSet<_> = c.split(Split::Pretrain, None).iter().map(|u| u.id.clone()).collect();
        assert!(c.split(Split::NormTest, None).iter().all(|u| !pre.contains(&u.id)));
        assert!(c.adapt_subset("very-low", 0.3).is_err());
        assert!(c.adapt_subset("nobody", 0.5).is_err());
        for u in &c.utterances {
            u.validate(16).unwrap();
        }
    }

    #[test]
    fn corpus_is_deterministic_and_round_trips() {
        let a = make_corpus(&small_spec(), 11, Parallelism::Sequential).unwrap();
        let b = make_corpus(&small_spec(), 11, Parallelism::Parallel).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn speaker_spec_parsing() {
        let s = parse_speakers("very-low, low:lo2").unwrap();
        assert_eq!(s[1].id, "lo2");
        assert_eq!(s[0].intelligibility, Intelligibility::VeryLow);
        assert!(parse_speakers("").is_err());
        assert!(parse_speakers("loud").is_err());
        assert!(parse_speakers("low,low").is_err());
        assert!(parse_speakers("control").is_err());
    }
}
