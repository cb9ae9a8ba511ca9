use std::sync::OnceLock;

use rand::Rng;

use super::ProjectId;

static RAW: &str = include_str!("../../data/words.txt");

/// The bundled project-id word list.
pub fn word_list() -> &'static [&'static str] {
    static WORDS: OnceLock<Vec<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| RAW.lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

impl ProjectId {
    /// Four distinct words drawn uniformly from the bundled list.
    pub fn generate(rng: &mut impl Rng) -> ProjectId {
        let words = word_list();
        let picked: Vec<&str> = rand::seq::index::sample(rng, words.len(), 4)
            .into_iter()
            .map(|i| words[i])
            .collect();
        ProjectId(picked.join("-"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn word_list_is_clean() {
        let words = word_list();
        assert!(words.len() >= 1900, "{}", words.len());
        assert!(words.iter().all(|w| w.bytes().all(|b| b.is_ascii_lowercase())));
        for w in ["until", "pants", "trunks", "unsolved", "pouncing", "siamese", "deluxe", "reggae"] {
            assert!(words.contains(&w), "{w}");
        }
    }

    #[test]
    fn generated_ids_are_valid_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let id = ProjectId::generate(&mut a);
            assert_eq!(id, ProjectId::generate(&mut b));
            assert!(id.as_str().parse::<ProjectId>().is_ok());
            let parts: Vec<&str> = id.as_str().split('-').collect();
            let mut dedup = parts.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), 4);
        }
    }
}
