//! Caption word extraction, word dropping, word embeddings, and category
//! expansion for query ensembling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::synth::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Adjective,
    Verb,
    Other,
}

/// Which tagged words survive extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordFilter {
    All,
    NounAdjVerb,
    #[default]
    NounAdj,
}

impl WordFilter {
    fn keeps(self, tag: PosTag) -> bool {
        match self {
            Self::All => true,
            Self::NounAdjVerb => tag != PosTag::Other,
            Self::NounAdj => matches!(tag, PosTag::Noun | PosTag::Adjective),
        }
    }
}

/// Case-insensitive word to part-of-speech table. Unknown words are `Other`.
#[derive(Clone, Debug)]
pub struct Lexicon {
    tags: HashMap<String, PosTag>,
}

const NOUNS: &[&str] = &[
    "circle", "circles", "square", "squares", "triangle", "triangles", "bar", "bars", "background",
    "shape", "shapes", "object", "objects", "person", "child", "girl", "boy", "woman", "man",
    "people", "dog", "cat", "grass", "lawn", "turf", "bottle", "fan", "water", "ceiling", "floor",
];
const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "cyan", "orange", "pink", "brown", "gray", "grey",
    "black", "white", "small", "large", "big", "bright", "dark",
];
const VERBS: &[&str] = &["is", "are", "sits", "sit", "lies", "lie", "shows", "show", "has", "have"];

impl Default for Lexicon {
    fn default() -> Self {
        let mut tags = HashMap::new();
        for (words, tag) in [(NOUNS, PosTag::Noun), (ADJECTIVES, PosTag::Adjective), (VERBS, PosTag::Verb)] {
            for w in words {
                tags.insert(w.to_string(), tag);
            }
        }
        Self { tags }
    }
}

impl Lexicon {
    /// Default lexicon extended with every colour and shape of a scene config.
    pub fn for_scenes(config: &SceneConfig) -> Self {
        let mut lex = Self::default();
        for c in config.colors.iter().chain(&config.background_colors) {
            lex.insert(&c.name, PosTag::Adjective);
        }
        for s in &config.shapes {
            lex.insert(s.name(), PosTag::Noun);
        }
        lex
    }

    pub fn insert(&mut self, word: &str, tag: PosTag) {
        self.tags.insert(word.to_lowercase(), tag);
    }

    pub fn tag(&self, word: &str) -> PosTag {
        self.tags.get(&word.to_lowercase()).copied().unwrap_or(PosTag::Other)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lower-cased caption tokens kept by `filter`, in order, duplicates kept.
pub fn extract_words(caption: &str, filter: WordFilter, lexicon: &Lexicon) -> Vec<String> {
    tokenize(caption)
        .into_iter()
        .filter(|w| filter.keeps(lexicon.tag(w)))
        .collect()
}

/// Keeps each word independently with probability `keep_prob`. Never returns
/// an empty list: if everything was dropped, one word is kept uniformly.
pub fn drop_words<R: Rng + ?Sized>(words: &[String], keep_prob: f64, rng: &mut R) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::InvalidArgument(format!("keep probability {keep_prob} outside [0, 1]")));
    }
    if words.is_empty() {
        return Err(Error::InvalidArgument("cannot drop words from an empty list".into()));
    }
    let kept: Vec<String> = words
        .iter()
        .filter(|_| rng.random_bool(keep_prob))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Ok(vec![words[rng.random_range(0..words.len())].clone()]);
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Unknown words are an error.
    #[default]
    Strict,
    /// Unknown words map to a fixed pseudo-random vector derived from the word.
    Hashed,
}

/// Word-level embedding table. The table is trained jointly with the vision
/// model; a frozen provider simply never receives updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProvider {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    table: Array2<f32>,
    pub oov: OovPolicy,
}

impl EmbeddingProvider {
    pub fn new(vocab: Vec<String>, table: Array2<f32>, oov: OovPolicy) -> Result<Self> {
        if table.nrows() != vocab.len() {
            return Err(Error::Shape(format!(
                "{} vocabulary words for {} embedding rows",
                vocab.len(),
                table.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.to_lowercase(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            vocab,
            index,
            table,
            oov,
        })
    }

    /// Standard-normal rows, deterministic in `seed`.
    pub fn random(vocab: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Array2::from_shape_simple_fn((vocab.len(), dim), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        Self::new(vocab, table, OovPolicy::Strict)
    }

    /// Sorted, de-duplicated vocabulary of every tagged lexicon word seen in
    /// the given captions plus `extra` words.
    pub fn vocabulary<'a>(
        captions: impl IntoIterator<Item = &'a str>,
        extra: impl IntoIterator<Item = String>,
    ) -> Vec<String> {
        let mut set: std::collections::BTreeSet<String> = extra.into_iter().collect();
        for c in captions {
            set.extend(tokenize(c));
        }
        set.into_iter().collect()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f32> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Array2<f32> {
        &mut self.table
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn vector(&self, word: &str) -> Result<Array1<f64>> {
        if let Some(i) = self.index_of(word) {
            return Ok(self.table.row(i).mapv(f64::from));
        }
        match self.oov {
            OovPolicy::Strict => Err(Error::OutOfVocabulary(word.to_string())),
            OovPolicy::Hashed => {
                let digest = Sha256::digest(word.to_lowercase().as_bytes());
                let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Array1::from_shape_simple_fn(self.dim(), || StandardNormal.sample(&mut rng)))
            }
        }
    }

    /// `K x D` matrix, row `k` embedding `words[k]`.
    pub fn embed_words(&self, words: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((words.len(), self.dim()));
        for (k, w) in words.iter().enumerate() {
            out.row_mut(k).assign(&self.vector(w)?);
        }
        Ok(out)
    }

    /// Mean of the word vectors of a (possibly multi-word) phrase.
    pub fn embed_phrase(&self, phrase: &str) -> Result<Array1<f64>> {
        let words = tokenize(phrase);
        if words.is_empty() {
            return Err(Error::InvalidArgument(format!("phrase `{phrase}` has no words")));
        }
        let m = self.embed_words(&words)?;
        Ok(m.mean_axis(ndarray::Axis(0)).expect("non-empty"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub phrases: Vec<String>,
}

/// Text queries grouped into categories; scores of a category's phrases are
/// reduced by per-pixel max.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryQueries {
    pub categories: Vec<Category>,
}

impl CategoryQueries {
    /// One single-phrase category per name.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let q = Self {
            categories: names
                .iter()
                .map(|n| Category {
                    name: n.as_ref().to_string(),
                    phrases: vec![n.as_ref().to_string()],
                })
                .collect(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::InvalidArgument("no query categories".into()));
        }
        for c in &self.categories {
            if c.phrases.is_empty() || c.phrases.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::InvalidArgument(format!("category `{}` has an empty phrase list or phrase", c.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Synonym and prompt rewrite tables, loadable from TOML with `[synonyms]`
/// and `[prompts]` tables of string lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptMaps {
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub prompts: BTreeMap<String, Vec<String>>,
}

impl PromptMaps {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    /// The published synonym and polysemy examples shipped with the crate.
    pub fn published_examples() -> Self {
        Self::from_toml(include_str!("../data/prompt_examples.toml")).expect("bundled fixture parses")
    }
}

/// Replaces each name by its synonym list (or itself), then rewrites each
/// phrase through the prompt map. Category count and order are preserved.
pub fn expand_categories<S: AsRef<str>>(
    names: &[S],
    synonyms: &BTreeMap<String, Vec<String>>,
    prompts: &BTreeMap<String, Vec<String>>,
) -> Result<CategoryQueries> {
    if names.is_empty() {
        return Err(Error::InvalidArgument("no category names".into()));
    }
    let mut categories = Vec::with_capacity(names.len());
    for name in names {
        let name = name.as_ref();
        let base = synonyms.get(name).cloned().unwrap_or_else(|| vec![name.to_string()]);
        let phrases: Vec<String> = base
            .into_iter()
            .flat_map(|p| prompts.get(&p).cloned().unwrap_or_else(|| vec![p]))
            .filter(|p| !p.trim().is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(Error::InvalidArgument(format!("category `{name}` expands to nothing")));
        }
        categories.push(Category {
            name: name.to_string(),
            phrases,
        });
    }
    Ok(CategoryQueries { categories })
}

/// How a multi-word phrase becomes query vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseEmbedding {
    /// Every word of the phrase is its own query row.
    #[default]
    PerWord,
    /// One row per phrase: the mean of its word vectors.
    Mean,
}

/// Query rows plus the category each row belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbeddings {
    pub rows: Array2<f64>,
    pub row_category: Vec<usize>,
    pub row_text: Vec<String>,
}

pub fn embed_queries(
    queries: &CategoryQueries,
    provider: &EmbeddingProvider,
    strategy: PhraseEmbedding,
) -> Result<QueryEmbeddings> {
    queries.validate()?;
    let mut vecs = Vec::new();
    let mut row_category = Vec::new();
    let mut row_text = Vec::new();
    for (ci, cat) in queries.categories.iter().enumerate() {
        for phrase in &cat.phrases {
            match strategy {
                PhraseEmbedding::Mean => {
                    vecs.push(provider.embed_phrase(phrase)?);
                    row_category.push(ci);
                    row_text.push(phrase.clone());
                }
                PhraseEmbedding::PerWord => {
                    let words = tokenize(phrase);
                    if words.is_empty() {
                        return Err(Error::InvalidArgument(format!("phrase `{phrase}` has no words")));
                    }
                    for w in words {
                        vecs.push(provider.vector(&w)?);
                        row_category.push(ci);
                        row_text.push(w);
                    }
                }
            }
        }
    }
    let d = provider.dim();
    let mut rows = Array2::zeros((vecs.len(), d));
    for (k, v) in vecs.iter().enumerate() {
        rows.row_mut(k).assign(v);
    }
    Ok(QueryEmbeddings {
        rows,
        row_category,
        row_text,
    })
}
