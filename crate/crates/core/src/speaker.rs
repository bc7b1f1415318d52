//! Speaker enrollment and nearest-centroid identification over utterance
//! embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, UtteranceRecord};
use crate::error::{Error, Result};
use crate::model::Embedding;
use crate::train::Checkpoint;

/// Label reported when no profile clears the threshold.
pub const UNKNOWN_SPEAKER: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Unit-norm mean of the enrolled embeddings.
    pub centroid: Vec<f64>,
    pub n_enrolled: usize,
}

/// Profiles tied to the checkpoint whose embeddings produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub fingerprint: String,
    pub profiles: BTreeMap<String, SpeakerProfile>,
}

impl ProfileStore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let store: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Profile(format!("{}: {e}", path.display())))?;
        for p in store.profiles.values() {
            let norm = p.centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            if p.n_enrolled == 0 || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Profile(format!(
                    "profile `{}` is not a unit centroid with enrollments",
                    p.speaker_id
                )));
            }
        }
        Ok(store)
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Builds centroids from `(speaker_id, embedding)` pairs. Degenerate
/// embeddings are skipped; a speaker left with none is an error.
pub fn enroll_embeddings(
    fingerprint: &str,
    items: impl IntoIterator<Item = (String, Embedding)>,
) -> Result<ProfileStore> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut seen = 0;
    for (speaker, emb) in items {
        seen += 1;
        if speaker.is_empty() {
            return Err(Error::Profile("record without a speaker id".into()));
        }
        let entry = sums
            .entry(speaker)
            .or_insert_with(|| (vec![0.0; emb.vector.len()], 0));
        if emb.degenerate {
            continue;
        }
        if entry.0.len() != emb.vector.len() {
            return Err(Error::Profile("embedding dimensions differ".into()));
        }
        for (s, x) in entry.0.iter_mut().zip(&emb.vector) {
            *s += x;
        }
        entry.1 += 1;
    }
    if seen == 0 {
        return Err(Error::Profile("nothing to enroll".into()));
    }
    let mut profiles = BTreeMap::new();
    for (speaker, (sum, n)) in sums {
        let centroid = match (n, normalized(&sum)) {
            (1.., Some(c)) => c,
            _ => {
                return Err(Error::Profile(format!(
                    "speaker `{speaker}` has no usable embedding"
                )))
            }
        };
        profiles.insert(
            speaker.clone(),
            SpeakerProfile {
                speaker_id: speaker,
                centroid,
                n_enrolled: n,
            },
        );
    }
    Ok(ProfileStore {
        fingerprint: fingerprint.to_string(),
        profiles,
    })
}

/// Enrolls every record's speaker using embeddings from `ck`.
pub fn enroll(ck: &Checkpoint, records: &[UtteranceRecord]) -> Result<ProfileStore> {
    if records.is_empty() {
        return Err(Error::Profile("nothing to enroll".into()));
    }
    let items = records
        .iter()
        .map(|r| {
            let w = load_wav(&r.audio_path).map_err(|e| e.for_utterance(&r.id))?;
            let emb = ck.model.embed(&w).map_err(|e| e.for_utterance(&r.id))?;
            Ok((r.speaker_id.clone(), emb))
        })
        .collect::<Result<Vec<_>>>()?;
    enroll_embeddings(&ck.fingerprint(), items)
}

/// Outcome of [`identify`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Identification {
    /// Best-matching speaker, or `None` below the threshold.
    pub speaker: Option<String>,
    /// Cosine similarity to the best centroid.
    pub similarity: f64,
    /// Best minus second-best similarity; absent with a single profile.
    pub margin: Option<f64>,
}

impl Identification {
    pub fn label(&self) -> &str {
        self.speaker.as_deref().unwrap_or(UNKNOWN_SPEAKER)
    }
}

/// Nearest centroid by cosine similarity. Ties go to the smaller id.
pub fn identify_embedding(store: &ProfileStore, query: &[f64], threshold: f64) -> Result<Identification> {
    if store.profiles.is_empty() {
        return Err(Error::Profile("profile store is empty".into()));
    }
    let q = normalized(query).unwrap_or_else(|| vec![0.0; query.len()]);
    let mut scored: Vec<(&str, f64)> = Vec::with_capacity(store.profiles.len());
    for (id, p) in &store.profiles {
        if p.centroid.len() != q.len() {
            return Err(Error::Profile(format!(
                "profile `{id}` has dimension {}, query {}",
                p.centroid.len(),
                q.len()
            )));
        }
        let sim = p.centroid.iter().zip(&q).map(|(a, b)| a * b).sum();
        scored.push((id, sim));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (best_id, best) = scored[0];
    Ok(Identification {
        speaker: (best >= threshold).then(|| best_id.to_string()),
        similarity: best,
        margin: scored.get(1).map(|s| best - s.1),
    })
}

/// Identifies the speaker of a WAV file. The store must come from `ck`.
pub fn identify(
    ck: &Checkpoint,
    store: &ProfileStore,
    wav: impl AsRef<Path>,
    threshold: f64,
) -> Result<Identification> {
    if store.fingerprint != ck.fingerprint() {
        return Err(Error::Profile(
            "profiles were enrolled with a different checkpoint (fingerprint mismatch)".into(),
        ));
    }
    let w = load_wav(wav)?;
    let emb = ck.model.embed(&w)?;
    identify_embedding(store, &emb.vector, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Embedding {
            vector: v.iter().map(|x| x / n).collect(),
            degenerate: false,
        }
    }

    fn two() -> ProfileStore {
        enroll_embeddings(
            "fp",
            [
                ("A".to_string(), emb(&[1.0, 0.0, 0.0])),
                ("B".to_string(), emb(&[0.6, 0.8, 0.0])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn centroid_of_one_equals_embedding() {
        let e = emb(&[1.0, 2.0, 2.0]);
        let s = enroll_embeddings("fp", [("x".to_string(), e.clone())]).unwrap();
        assert_eq!(s.profiles["x"].centroid, e.vector);
        let s3 = enroll_embeddings("fp", vec![("x".to_string(), e.clone()); 3]).unwrap();
        for (a, b) in s3.profiles["x"].centroid.iter().zip(&e.vector) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s3.profiles["x"].n_enrolled, 3);
        assert_eq!(two().profiles.len(), 2);
    }

    #[test]
    fn identification_rules() {
        let s = two();
        let id = identify_embedding(&s, &[1.0, 0.0, 0.0], 0.25).unwrap();
        assert_eq!(id.label(), "A");
        assert!((id.similarity - 1.0).abs() < 1e-12);
        assert!((id.margin.unwrap() - 0.4).abs() < 1e-12);

        let id = identify_embedding(&s, &[0.0, 0.0, 1.0], 0.25).unwrap();
        assert_eq!(id.label(), UNKNOWN_SPEAKER);

        let q: Vec<f64> = [0.9 * 1.0 + 0.1 * 0.6, 0.1 * 0.8, 0.0].to_vec();
        assert_eq!(identify_embedding(&s, &q, 0.25).unwrap().label(), "A");
    }

    #[test]
    fn degenerate_only_speaker_is_rejected() {
        let zero = Embedding {
            vector: vec![0.0; 3],
            degenerate: true,
        };
        assert!(enroll_embeddings("fp", [("z".to_string(), zero)]).is_err());
        assert!(enroll_embeddings("fp", Vec::new()).is_err());
    }

    #[test]
    fn store_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("profiles.json");
        let s = two();
        s.save(&p).unwrap();
        assert_eq!(ProfileStore::load(&p).unwrap(), s);
    }
}
