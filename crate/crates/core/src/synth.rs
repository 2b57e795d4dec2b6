//! Planted-evidence corpora for offline end-to-end checks.
//!
//! Every word is a random pseudo-word, unique across the set. Each query
//! carries a salt word found only in its gold document and gold entity; the
//! answer is a mock fixture triggered by an answer-key word that sits in a
//! gold segment but never in the question. Ideal retrieval is therefore known
//! in advance.
//!
//! Layouts:
//! - `Direct`: salt, gold entity and answer key share the image section.
//! - `OneHop`: the answer key sits in a segment reached only through the
//!   edge from the salted entity to its neighbor.
//! - `Noisy`: like `Direct`, plus entity-free filler sections.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{ChatFixture, EmbeddingBackend, FixtureFile, MockChatBackend, MockEmbeddingBackend};
use crate::corpus::{segment_document, ChunkPolicy, Corpus, Document, ImageAsset, Section, SegmentId};
use crate::extraction::{ANSWER_TEMPLATE, EXTRACT_TEMPLATE, MATCH_TEMPLATE};
use crate::harness::DatasetRecord;
use crate::pipeline::{build_corpus, build_index, write_build, Artifacts, BuildOptions, Engine, PipelineError, SceneGraphSource};
use crate::retrieval::ElementId;
use crate::scenegraph::{ingest_scene_graph, render_scene_graph_block, VisualGraph};

/// Reply of the mock answer template when no answer key is in the prompt.
pub const UNKNOWN_ANSWER: &str = "unknown";

const QUESTION_WORDS: [&str; 4] = ["which", "code", "belongs", "to"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedLayout {
    Direct,
    OneHop,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub docs: usize,
    pub queries: usize,
    pub layout: PlantedLayout,
    /// Filler sections per document in the noisy layout.
    pub noise_sections: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { docs: 200, queries: 50, layout: PlantedLayout::Direct, noise_sections: 4, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSet {
    pub documents: Vec<Document>,
    pub fixtures: FixtureFile,
    pub scene_graphs: BTreeMap<String, VisualGraph>,
    pub dataset: Vec<DatasetRecord>,
    /// One segment per section.
    pub policy: ChunkPolicy,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), used: QUESTION_WORDS.iter().map(|w| w.to_string()).collect() }
    }

    /// Fresh consonant-vowel pseudo-word of 6 to 9 letters.
    fn word(&mut self) -> String {
        const C: &[u8] = b"bcdfghjklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let len = self.rng.gen_range(6..=9);
            let w: String = (0..len)
                .map(|i| {
                    let set = if i % 2 == 0 { C } else { V };
                    set[self.rng.gen_range(0..set.len())] as char
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> String {
        (0..n).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    fn name(&mut self) -> String {
        self.word().to_uppercase()
    }
}

fn entity(name: &str, kind: &str, desc: &str) -> String {
    format!("(\"entity\"|{name}|{kind}|{desc})")
}

fn relationship(a: &str, b: &str, desc: &str, strength: u8) -> String {
    format!("(\"relationship\"|{a}|{b}|{desc}|{strength})")
}

fn scene_graph(image_id: &str) -> VisualGraph {
    let block = "- <object-0>: statue, (0.1, 0.2, 0.5, 0.9)\n- <object-1>: building, (0.4, 0.1, 0.95, 0.8)\n\
                 - <relation-0>: <object-0> near <object-1>";
    ingest_scene_graph(block, image_id).expect("static scene graph").graph
}

struct Gold {
    salt: String,
    key: String,
    answer: String,
}

impl PlantedSet {
    pub fn generate(opts: &SynthOptions) -> Self {
        assert!(opts.queries <= opts.docs && opts.docs > 0, "need 0 < queries <= docs");
        let mut w = Words::new(opts.seed);
        let stride = opts.docs / opts.queries.max(1);
        let mut documents = Vec::with_capacity(opts.docs);
        let mut chat = Vec::new();
        let mut scene_graphs = BTreeMap::new();
        let mut dataset = Vec::new();

        for d in 0..opts.docs {
            let doc_id = format!("doc{d:04}");
            let image_id = format!("img{d:04}");
            let query_no = (opts.queries > 0 && d % stride == 0 && d / stride < opts.queries).then_some(d / stride);
            let gold = query_no.map(|_| Gold { salt: w.word(), key: w.word(), answer: format!("{} {}", w.word(), w.word()) });
            let salt = gold.as_ref().map(|g| format!(" {}", g.salt)).unwrap_or_default();
            let key = gold.as_ref().map(|g| format!(" {}", g.key)).unwrap_or_default();
            let (a, b) = (w.name(), w.name());
            let mut sections = Vec::new();
            let mut extract = |tag: String, records: Vec<String>| {
                chat.push(ChatFixture { template_id: EXTRACT_TEMPLATE.into(), trigger: tag, response: records.join("\n") });
            };

            // Image section: the salted entity `a`.
            let tag0 = w.word();
            let direct = opts.layout != PlantedLayout::OneHop;
            let s0_key = if direct { key.as_str() } else { "" };
            sections.push(Section {
                heading: String::new(),
                text: format!("{tag0} {a} {}{salt}. {b} {}{s0_key}.", w.words(4), w.words(4)),
                image_ids: vec![image_id.clone()],
            });
            let desc_a = format!("{}{salt}", w.words(3));
            let mut matches = vec![
                format!("(\"matching\"|<image>|{a}|8)"),
                format!("(\"matching\"|<object-0>|{a}|9)"),
            ];
            if direct {
                extract(tag0, vec![
                    entity(&a, "artifact", &desc_a),
                    entity(&b, "place", &w.words(3)),
                    relationship(&a, &b, &w.words(3), 7),
                ]);
                matches.push(format!("(\"matching\"|<object-1>|{b}|7)"));
                matches.push(format!("(\"matching\"|<relation-0>|{a}|{b}|6)"));
            } else {
                extract(tag0, vec![entity(&a, "artifact", &desc_a)]);
                // `b` is the neighbor holding the answer key.
                let tag1 = w.word();
                sections.push(Section {
                    heading: String::new(),
                    text: format!("{tag1} {b} {}{key}.", w.words(5)),
                    image_ids: vec![],
                });
                extract(tag1, vec![entity(&b, "place", &w.words(2))]);
                let tag2 = w.word();
                sections.push(Section {
                    heading: String::new(),
                    text: format!("{tag2} {a} {b} {}.", w.words(5)),
                    image_ids: vec![],
                });
                extract(tag2, vec![
                    entity(&a, "artifact", &w.words(2)),
                    entity(&b, "place", &w.words(2)),
                    relationship(&a, &b, &w.words(3), 6),
                ]);
            }
            if opts.layout == PlantedLayout::Noisy {
                for _ in 0..opts.noise_sections {
                    sections.push(Section { heading: String::new(), text: format!("{}.", w.words(10)), image_ids: vec![] });
                }
            }
            chat.push(ChatFixture { template_id: MATCH_TEMPLATE.into(), trigger: image_id.clone(), response: matches.join("\n") });
            scene_graphs.insert(image_id.clone(), scene_graph(&image_id));

            let doc = Document {
                doc_id: doc_id.clone(),
                title: format!("{}{salt}", w.words(2)),
                sections,
                images: vec![ImageAsset { image_id: image_id.clone(), uri: format!("images/{image_id}.jpg"), caption: None }],
            };

            if let (Some(q), Some(g)) = (query_no, gold) {
                chat.push(ChatFixture { template_id: ANSWER_TEMPLATE.into(), trigger: g.key.clone(), response: g.answer.clone() });
                let policy = planted_policy();
                let segs = segment_document(&doc, &policy);
                let containing = |needle: &str| -> Vec<SegmentId> {
                    segs.iter()
                        .filter(|s| s.text.split(|c: char| !c.is_alphanumeric()).any(|t| t == needle))
                        .map(|s| s.segment_id.clone())
                        .collect()
                };
                let mut gold_segments = containing(&g.salt);
                gold_segments.extend(containing(&g.key));
                gold_segments.sort();
                gold_segments.dedup();
                dataset.push(DatasetRecord {
                    id: format!("q{q:03}"),
                    question: format!("Which code belongs to {}?", g.salt),
                    image_id: Some(image_id.clone()),
                    gold_doc_id: doc_id.clone(),
                    gold_answers: vec![g.answer],
                    gold_elements: vec![ElementId::Entity(a.clone())],
                    gold_segments,
                    split: None,
                });
            }
            documents.push(doc);
        }
        let fallbacks = [(EXTRACT_TEMPLATE, ""), (MATCH_TEMPLATE, ""), (ANSWER_TEMPLATE, UNKNOWN_ANSWER)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { documents, fixtures: FixtureFile { chat, fallbacks }, scene_graphs, dataset, policy: planted_policy() }
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::from_documents(self.documents.clone())
    }

    pub fn chat_backend(&self) -> MockChatBackend {
        MockChatBackend::from_fixtures(self.fixtures.clone())
    }

    pub fn build_options(&self, parallelism: usize) -> BuildOptions {
        BuildOptions { policy: self.policy, parallelism, ..BuildOptions::default() }
    }

    /// Builds graphs and index in memory and returns a ready engine.
    pub fn engine(&self, dim: usize, parallelism: usize) -> Result<Engine, PipelineError> {
        let corpus = self.corpus();
        let chat = self.chat_backend();
        let build = build_corpus(&corpus, &self.build_options(parallelism), &chat, &SceneGraphSource::Memory(self.scene_graphs.clone()));
        if let Some((doc, err)) = build.failures.first() {
            return Err(PipelineError::MissingArtifact(format!("planted document {doc} failed to build: {err}")));
        }
        let artifacts = Artifacts::from_build(&corpus, &build);
        let embedder: Arc<dyn EmbeddingBackend> = Arc::new(MockEmbeddingBackend::new(dim));
        let index = build_index(&artifacts, embedder.as_ref(), parallelism)?;
        Ok(Engine::new(artifacts, index, embedder, Arc::new(chat)))
    }

    /// Writes `corpus.jsonl`, `fixtures.json`, `dataset.jsonl` and
    /// `scene_graphs/<image_id>.txt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        let sg_dir = dir.join("scene_graphs");
        std::fs::create_dir_all(&sg_dir)?;
        self.corpus().write_jsonl(dir.join("corpus.jsonl")).map_err(std::io::Error::other)?;
        self.fixtures.save(dir.join("fixtures.json"))?;
        crate::harness::save_dataset(dir.join("dataset.jsonl"), &self.dataset)?;
        for (id, vg) in &self.scene_graphs {
            std::fs::write(sg_dir.join(format!("{id}.txt")), render_scene_graph_block(vg))?;
        }
        Ok(())
    }

    /// Runs the offline build for a written set: graphs under `out`.
    pub fn build_dir(&self, out: impl AsRef<Path>, parallelism: usize) -> Result<(), PipelineError> {
        let corpus = self.corpus();
        let build = build_corpus(&corpus, &self.build_options(parallelism), &self.chat_backend(), &SceneGraphSource::Memory(self.scene_graphs.clone()));
        write_build(out, &corpus, &build)
    }
}

/// Every section becomes its own segment: text sections hold at most 10
/// tokens and two of them never fit together.
pub fn planted_policy() -> ChunkPolicy {
    ChunkPolicy { max_tokens: 12, min_tokens: 1, include_headings: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_salts_unique() {
        let opts = SynthOptions { docs: 20, queries: 5, ..SynthOptions::default() };
        let a = PlantedSet::generate(&opts);
        assert_eq!(a, PlantedSet::generate(&opts));
        assert_eq!(a.dataset.len(), 5);
        for rec in &a.dataset {
            let salt = rec.question.trim_end_matches('?').rsplit(' ').next().unwrap();
            let holders: Vec<_> = a
                .documents
                .iter()
                .filter(|d| d.full_text().contains(salt) || d.title.contains(salt))
                .map(|d| d.doc_id.as_str())
                .collect();
            assert_eq!(holders, vec![rec.gold_doc_id.as_str()]);
            assert!(!rec.gold_segments.is_empty());
        }
    }

    #[test]
    fn one_hop_key_is_outside_the_salted_segment() {
        let set = PlantedSet::generate(&SynthOptions { docs: 4, queries: 2, layout: PlantedLayout::OneHop, ..SynthOptions::default() });
        let rec = &set.dataset[0];
        assert_eq!(rec.gold_segments.len(), 2);
    }
}
