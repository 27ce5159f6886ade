use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::{Backend, EmbeddingVector, GatewayError, GenParams};
use crate::text::{fnv1a64, sha256_hex, tokens};

/// Number of hash buckets in mock embeddings.
pub const MOCK_EMBEDDING_DIM: usize = 256;

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "could", "did",
    "do", "does", "for", "from", "had", "has", "have", "he", "her", "here", "his", "i", "if", "in", "is", "it", "its",
    "just", "me", "more", "my", "no", "not", "of", "on", "or", "our", "she", "should", "so", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "to", "us", "very", "was", "we", "were",
    "what", "which", "who", "will", "with", "would", "you", "your",
];

/// Deterministic stand-in for a model server.
///
/// `generate` returns the fixture entry for the prompt when one exists (keyed
/// by the SHA-256 hex digest of the prompt, see [`MockBackend::fixture_key`]).
/// Otherwise it answers by rule:
///
/// * judge prompts (containing "Select the K best critical questions") get K
///   of the numbered candidates back, picked by a seeded hash;
/// * questioner prompts get N lines `Is claim <i> about <w1 w2 w3> justified?`,
///   where N is the sum of the counts in the goal sentence, `w1..w3` are the
///   first three content words of the essay, and `i` runs upward from an
///   offset derived from the seed and the prompt.
///
/// `embed` is a hashed bag of words: lowercase tokens split on
/// non-alphanumerics, FNV-1a 64 modulo 256 buckets, counts, L2-normalised.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    seed: u64,
    fixture: HashMap<String, String>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, fixture: HashMap::new() }
    }

    pub fn with_fixture(mut self, fixture: HashMap<String, String>) -> Self {
        self.fixture = fixture;
        self
    }

    /// Loads a JSON object mapping prompt digests to responses.
    pub fn with_fixture_file(self, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path)
            .map_err(|e| GatewayError::Descriptor(format!("fixture {}: {e}", path.display())))?;
        let map: HashMap<String, String> = serde_json::from_str(&json)
            .map_err(|e| GatewayError::Descriptor(format!("fixture {}: {e}", path.display())))?;
        Ok(self.with_fixture(map))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fixture_key(prompt: &str) -> String {
        sha256_hex(prompt.as_bytes())
    }

    /// The response `generate` gives for `prompt`.
    pub fn respond(&self, prompt: &str) -> String {
        if let Some(hit) = self.fixture.get(&Self::fixture_key(prompt)) {
            return hit.clone();
        }
        mock_generate_rules(self.seed, prompt)
    }
}

impl Backend for MockBackend {
    fn generate(&self, _params: &GenParams, prompt: &str) -> Result<String, GatewayError> {
        Ok(self.respond(prompt))
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        texts.iter().map(|t| EmbeddingVector::new(hashed_bow_embedding(t))).collect()
    }
}

/// L2-normalised bucket counts; all zeros for a text without tokens.
pub fn hashed_bow_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; MOCK_EMBEDDING_DIM];
    for t in tokens(text) {
        v[(fnv1a64(&t) % MOCK_EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn judge_goal() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Select the (\d+) best critical questions").unwrap())
}

fn count_phrase() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+) critical questions").unwrap())
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\.\s+(.*\S)\s*$").unwrap())
}

/// Lines of the block that starts right after the line equal to `header`.
fn section<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
    prompt.lines().skip_while(|l| l.trim() != header).skip(1).take_while(|l| !l.trim().is_empty()).collect()
}

/// Rule-based completion used when no fixture entry matches.
pub fn mock_generate_rules(seed: u64, prompt: &str) -> String {
    if let Some(k) = judge_goal().captures(prompt).and_then(|c| c[1].parse::<usize>().ok()) {
        return judge_rules(seed, prompt, k);
    }
    let n: usize = prompt
        .lines()
        .find(|l| l.contains("generate") && count_phrase().is_match(l))
        .map(|goal| count_phrase().captures_iter(goal).filter_map(|c| c[1].parse::<usize>().ok()).sum())
        .unwrap_or(3);

    let essay = section(prompt, "Essay:").join(" ");
    let mut words: Vec<String> =
        tokens(&essay).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).take(3).collect();
    if words.is_empty() {
        words.push("the essay".into());
    }
    let topic = words.join(" ");
    let offset = fnv1a64(&format!("{seed}\u{0}{prompt}")) % 100;
    (1..=n as u64).map(|i| format!("Is claim {} about {topic} justified?", offset + i)).collect::<Vec<_>>().join("\n")
}

fn judge_rules(seed: u64, prompt: &str, k: usize) -> String {
    let candidates: Vec<&str> = section(prompt, "Candidate questions:")
        .into_iter()
        .filter_map(|l| numbered_line().captures(l).map(|c| c.get(1).unwrap().as_str()))
        .collect();
    let mut ranked: Vec<(u64, usize)> =
        candidates.iter().enumerate().map(|(i, c)| (fnv1a64(&format!("{seed}\u{0}{c}")), i)).collect();
    ranked.sort();
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &(_, i))| format!("{}. {}", rank + 1, candidates[i]))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn questioner(n: usize) -> String {
        format!(
            "Essay:\nThe economy of our nation grows slowly.\n\nYou are a critical judge.\n\n\
             Your task is to generate {n} critical questions to evaluate the arguments in the given essay."
        )
    }

    #[test]
    fn rule_output_has_requested_count() {
        let out = mock_generate_rules(7, &questioner(4));
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.ends_with('?')));
        assert!(lines[0].contains("about economy nation grows justified?"), "{}", lines[0]);
    }

    #[test]
    fn counts_are_summed_for_split_goals() {
        let p = "Essay:\nX.\n\nYour task is to generate 4 critical questions without considering the schemes and 4 critical questions using the provided scheme.";
        assert_eq!(mock_generate_rules(1, p).lines().count(), 8);
    }

    #[test]
    fn deterministic_in_seed_and_prompt() {
        let b = MockBackend::new(7);
        let p = GenParams::new("m");
        assert_eq!(b.generate(&p, &questioner(3)).unwrap(), b.generate(&p, &questioner(3)).unwrap());
    }

    #[test]
    fn fixture_hit_is_verbatim() {
        let prompt = questioner(2);
        let mut map = HashMap::new();
        map.insert(MockBackend::fixture_key(&prompt), "  canned\nresponse ".to_string());
        let b = MockBackend::new(0).with_fixture(map);
        assert_eq!(b.respond(&prompt), "  canned\nresponse ");
        assert_ne!(b.respond(&questioner(3)), "  canned\nresponse ");
    }

    #[test]
    fn judge_returns_k_candidates() {
        let p = "Essay:\nX.\n\nCandidate questions:\n1. Why A?\n2. Why B?\n3. Why C?\n4. Why D?\n\n\
                 Select the 3 best critical questions that should be raised.";
        let out = mock_generate_rules(5, p);
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 3);
        for l in lines {
            let text = l.split_once(". ").unwrap().1;
            assert!(["Why A?", "Why B?", "Why C?", "Why D?"].contains(&text));
        }
    }

    #[test]
    fn identical_text_identical_embedding() {
        let b = MockBackend::new(3);
        let v = b.embed("m", &["a b".into(), "a b".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        let norm: f64 = v[0].values().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenless_text_embeds_to_zero() {
        assert!(hashed_bow_embedding("?!").iter().all(|&x| x == 0.0));
    }
}
