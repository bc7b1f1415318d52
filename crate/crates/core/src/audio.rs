//! Audio ingestion, utterance manifests and the synthetic toy corpus.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::CharVocab;

/// The only accepted input rate.
pub const SAMPLE_RATE: u32 = 16_000;

pub const MANIFEST_HEADER: &str = "id\taudio_path\ttranscript\tspeaker_id\tduration";

/// Mono audio samples with their rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Audio("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16 kHz, mono, 16-bit PCM RIFF/WAVE file; sample `s` maps to `s / 32768`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => wav_err("format=unsupported, expected PCM".into()),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err("format=float, expected PCM".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(wav_err(format!("bits={}, expected 16", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(wav_err(format!("channels={}, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(format!(
            "sample_rate={}, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(format!("truncated data chunk ({e}); header declares {declared} samples")))?;
    if samples.len() < declared {
        return Err(wav_err(format!(
            "truncated data chunk: header declares {declared} samples, found {}",
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(wav_err("empty data chunk".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes to 16-bit PCM (`round(x * 32768)`, clamped) and writes a mono WAV.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in &w.samples {
        writer.write_sample(quantize_pcm16(s)).map_err(map)?;
    }
    writer.finalize().map_err(map)
}

pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Output of [`normalize_wave`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub wave: Waveform,
    /// Input had zero variance; samples are all zero.
    pub degenerate: bool,
}

/// Zero mean, unit population variance.
pub fn normalize_wave(w: &Waveform) -> Normalized {
    let n = w.samples.len() as f64;
    let mean = w.samples.iter().sum::<f64>() / n;
    let var = w.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    // Variance below this is rounding noise around a constant signal.
    let degenerate = var <= f64::EPSILON * mean.abs().max(1.0).powi(2);
    let samples = if degenerate {
        vec![0.0; w.samples.len()]
    } else {
        let inv = 1.0 / var.sqrt();
        w.samples.iter().map(|s| (s - mean) * inv).collect()
    };
    Normalized {
        wave: Waveform {
            samples,
            sample_rate: w.sample_rate,
        },
        degenerate,
    }
}

/// One row of an utterance manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// Resolved against the manifest's directory when relative.
    pub audio_path: PathBuf,
    pub transcript: String,
    pub speaker_id: String,
    pub duration: f64,
}

/// Parses a tab-separated manifest, resolving relative audio paths against
/// the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base, &CharVocab::english())
}

pub fn parse_manifest(
    text: &str,
    path: &Path,
    base: &Path,
    vocab: &CharVocab,
) -> Result<Vec<UtteranceRecord>> {
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("bad header {h:?}, expected {MANIFEST_HEADER:?}"))),
        None => return Err(err(1, "missing header".into())),
    }
    const COLUMNS: [&str; 5] = ["id", "audio_path", "transcript", "speaker_id", "duration"];
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > COLUMNS.len() {
            return Err(err(line_no, format!("{} columns, expected 5", fields.len())));
        }
        for (k, name) in COLUMNS.iter().enumerate() {
            // An empty transcript is allowed (unlabeled audio).
            let missing = fields.get(k).is_none_or(|f| f.is_empty() && *name != "transcript");
            if missing {
                return Err(err(line_no, format!("missing column {name}")));
            }
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(err(line_no, format!("duplicate id {id:?}")));
        }
        let transcript = fields[2].to_string();
        if let Some(c) = transcript.chars().find(|&c| !vocab.contains(c)) {
            return Err(err(line_no, format!("out-of-vocabulary transcript character {c:?}")));
        }
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| err(line_no, format!("bad duration {:?}", fields[4])))?;
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(err(line_no, format!("duration must be positive, got {duration}")));
        }
        let audio = Path::new(fields[1]);
        let audio_path = if audio.is_absolute() {
            audio.to_path_buf()
        } else {
            base.join(audio)
        };
        records.push(UtteranceRecord {
            id,
            audio_path,
            transcript,
            speaker_id: fields[3].to_string(),
            duration,
        });
    }
    Ok(records)
}

/// Writes a manifest; audio paths are written as given.
pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\n",
            r.id,
            r.audio_path.display(),
            r.transcript,
            r.speaker_id,
            r.duration
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Seconds, `(min, max)`.
    pub duration_range: (f64, f64),
    pub vocabulary: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utterances_per_speaker: 10,
            duration_range: (0.6, 1.0),
            vocabulary: crate::vocab::ENGLISH_CHARS.to_string(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<CharVocab> {
        if self.n_speakers == 0 {
            return Err(Error::Config("n_speakers must be >= 1".into()));
        }
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad duration range ({lo}, {hi})")));
        }
        Ok(CharVocab::new(self.vocabulary.chars())?)
    }
}

/// Seconds each character occupies in synthetic audio.
pub const SYNTH_CHAR_SECONDS: f64 = 0.08;
const SYNTH_LEAD_SECONDS: f64 = 0.04;

const WORDS: &[&str] = &[
    "a", "an", "as", "at", "be", "by", "do", "go", "he", "if", "in", "is", "it", "me", "my",
    "no", "of", "on", "or", "so", "to", "up", "us", "we", "and", "are", "bed", "box", "but",
    "can", "cat", "day", "dog", "eat", "for", "fox", "get", "had", "has", "her", "him", "his",
    "how", "its", "jam", "job", "key", "let", "man", "may", "new", "not", "now", "old", "one",
    "our", "out", "put", "ran", "red", "run", "sat", "see", "she", "sun", "the", "top", "two",
    "use", "van", "was", "way", "who", "why", "yes", "you", "zoo", "it's", "back", "blue",
    "book", "call", "come", "door", "fish", "good", "hand", "help", "home", "jump", "just",
    "kind", "know", "like", "look", "make", "milk", "next", "over", "play", "quiz", "read",
    "said", "some", "take", "that", "them", "then", "they", "this", "time", "tree", "very",
    "walk", "want", "well", "what", "when", "with", "word", "work", "year", "zero",
];

/// Base (pitch) frequency of synthetic speaker `s`.
pub fn speaker_base_frequency(s: usize) -> f64 {
    90.0 + 35.0 * s as f64
}

/// Tone frequency for the character at vocabulary position `i`.
fn char_tone_frequency(i: usize) -> f64 {
    320.0 + 115.0 * i as f64
}

fn word_pool(vocab: &CharVocab, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pool: Vec<String> = WORDS
        .iter()
        .filter(|w| w.chars().all(|c| vocab.contains(c)))
        .map(|w| w.to_string())
        .collect();
    if !pool.is_empty() {
        return pool;
    }
    let letters: Vec<char> = vocab.chars().iter().copied().filter(|&c| c != ' ').collect();
    if letters.is_empty() {
        return vec![" ".into()];
    }
    (0..32)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect()
        })
        .collect()
}

fn synth_transcript(pool: &[String], slots: usize, spaced: bool, rng: &mut ChaCha8Rng) -> String {
    let mut text = String::new();
    for _ in 0..4 * pool.len().max(8) {
        let w = &pool[rng.gen_range(0..pool.len())];
        let sep = usize::from(spaced && !text.is_empty());
        let len = text.chars().count();
        if len + sep + w.chars().count() > slots {
            if len > 0 {
                break;
            }
            continue;
        }
        if sep == 1 {
            text.push(' ');
        }
        text.push_str(w);
        if !spaced {
            break;
        }
    }
    if text.is_empty() {
        // Nothing fits: fall back to the shortest word and let the clip grow.
        text = pool.iter().min_by_key(|w| w.chars().count()).cloned().unwrap_or_default();
    }
    text
}

/// Renders `transcript` for speaker `s`: every character is a fixed tone
/// amplitude-modulated at the speaker's base frequency, over a speaker
/// specific harmonic hum. Spaces are hum only.
fn render(
    transcript: &str,
    vocab: &CharVocab,
    speaker: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = speaker_base_frequency(speaker);
    let tau = std::f64::consts::TAU;
    let weights = match speaker % 3 {
        0 => [0.6, 0.3, 0.1],
        1 => [0.2, 0.6, 0.2],
        _ => [0.1, 0.3, 0.6],
    };
    let char_len = (SYNTH_CHAR_SECONDS * sr).round() as usize;
    let lead = (SYNTH_LEAD_SECONDS * sr).round() as usize;
    let chars: Vec<char> = transcript.chars().collect();
    (0..n_samples)
        .map(|n| {
            let t = n as f64 / sr;
            let hum: f64 = weights
                .iter()
                .enumerate()
                .map(|(h, a)| a * (tau * (h + 1) as f64 * f0 * t).sin())
                .sum();
            let mut x = 0.3 * hum;
            if n >= lead {
                let k = (n - lead) / char_len;
                if let Some(&c) = chars.get(k) {
                    if c != ' ' {
                        let i = vocab.label(c).expect("transcript within vocabulary") - 1;
                        let f = char_tone_frequency(i);
                        let am = 0.6 + 0.4 * (tau * f0 * t).sin();
                        x += 0.5 * am * (tau * f * t).sin();
                    }
                }
            }
            x += 0.01 * (rng.gen::<f64>() * 2.0 - 1.0);
            x
        })
        .collect()
}

/// Writes `n_speakers * utterances_per_speaker` WAV files under
/// `out_dir/wav/` plus `out_dir/manifest.tsv`. Output depends only on `spec`.
pub fn synth_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let vocab = spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = word_pool(&vocab, &mut rng);
    let spaced = vocab.contains(' ');
    let sr = SAMPLE_RATE as f64;
    let (lo, hi) = spec.duration_range;

    let mut records = Vec::new();
    for s in 0..spec.n_speakers {
        for u in 0..spec.utterances_per_speaker {
            let mut utt_rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ ((s as u64) << 32 | u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let d = if hi > lo { utt_rng.gen_range(lo..=hi) } else { lo };
            let slots = ((d - 2.0 * SYNTH_LEAD_SECONDS) / SYNTH_CHAR_SECONDS).floor().max(0.0) as usize;
            let transcript = synth_transcript(&pool, slots, spaced, &mut utt_rng);
            let needed = ((2.0 * SYNTH_LEAD_SECONDS + transcript.chars().count() as f64 * SYNTH_CHAR_SECONDS) * sr).ceil() as usize;
            let n_samples = ((d * sr).round() as usize).max(needed);
            let mut samples = render(&transcript, &vocab, s, n_samples, &mut utt_rng);
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.9 {
                samples.iter_mut().for_each(|v| *v *= 0.9 / peak);
            }
            let id = format!("spk{s}_utt{u:03}");
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(out_dir.join(&rel), &Waveform::new(samples, SAMPLE_RATE)?)?;
            records.push(UtteranceRecord {
                id,
                audio_path: rel,
                transcript,
                speaker_id: format!("spk{s}"),
                duration: n_samples as f64 / sr,
            });
        }
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_wave(&wave(&[2.0, 0.0, 2.0, 0.0]));
        assert_eq!(n.wave.samples(), &[1.0, -1.0, 1.0, -1.0]);
        assert!(!n.degenerate);

        let n = normalize_wave(&wave(&[1.0, -1.0, 1.0, -1.0]));
        assert_eq!(n.wave.samples(), &[1.0, -1.0, 1.0, -1.0]);

        let n = normalize_wave(&wave(&[5.0, 5.0, 5.0]));
        assert_eq!(n.wave.samples(), &[0.0, 0.0, 0.0]);
        assert!(n.degenerate);
    }

    #[test]
    fn empty_and_non_finite_waves_are_rejected() {
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![f64::NAN], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn pcm_scaling() {
        assert_eq!(quantize_pcm16(32767.0 / 32768.0), 32767);
        assert_eq!(quantize_pcm16(0.0), 0);
        assert_eq!(quantize_pcm16(-1.0), -32768);
        assert_eq!(quantize_pcm16(1.5), 32767);
    }

    fn parse(text: &str) -> Result<Vec<UtteranceRecord>> {
        parse_manifest(text, Path::new("m.tsv"), Path::new("/data"), &CharVocab::english())
    }

    #[test]
    fn manifest_parsing() {
        let text = format!("{MANIFEST_HEADER}\nu1\ta.wav\thello there\ts1\t1.5\nu2\t/abs/b.wav\tit's\ts2\t0.25\n");
        let recs = parse(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].audio_path, PathBuf::from("/data/a.wav"));
        assert_eq!(recs[1].audio_path, PathBuf::from("/abs/b.wav"));
        assert_eq!(recs[1].duration, 0.25);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let missing = format!("{MANIFEST_HEADER}\nu1\ta.wav\thi\ts1\t1\nu2\tb.wav\thi\n");
        let e = parse(&missing).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("speaker_id"), "{e}");

        let dup = format!("{MANIFEST_HEADER}\nu1\ta.wav\thi\ts1\t1\nu1\tb.wav\thi\ts1\t1\n");
        let e = parse(&dup).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("duplicate id \"u1\""), "{e}");

        let oov = format!("{MANIFEST_HEADER}\nu1\ta.wav\tHi\ts1\t1\n");
        let e = parse(&oov).unwrap_err().to_string();
        assert!(e.contains(":2:") && e.contains("'H'"), "{e}");

        let bad_header = "id\tpath\n";
        assert!(parse(bad_header).unwrap_err().to_string().contains(":1:"));

        let zero = format!("{MANIFEST_HEADER}\nu1\ta.wav\thi\ts1\t0\n");
        assert!(parse(&zero).is_err());
    }

    #[test]
    fn speakers_have_distinct_base_frequencies() {
        assert_ne!(speaker_base_frequency(0), speaker_base_frequency(1));
    }
}
