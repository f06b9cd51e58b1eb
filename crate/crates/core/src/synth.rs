//! Seeded generator of small knowledge-based QA tasks.
//!
//! Each image shows one creature, a procedurally named entity, drawn in a
//! colour at a random grid cell. Most questions ask about a fact of the
//! creature ("what food the koli eats") that is stated only in the knowledge
//! base; the rest ask for its colour, which the image alone answers.
//! Distractor facts share subjects with real facts under other relations or
//! describe creatures that never appear in any image.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::Triplet;
use crate::reader::AnswerSpace;
use crate::tensor::Tensor;

const SYLLABLES: [&str; 14] = [
    "ka", "lo", "mi", "ru", "te", "zo", "fi", "ba", "ne", "su", "ga", "po", "vy", "dex",
];
const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "orange"];
const QUESTION_RELATIONS: [(&str, [&str; 6]); 4] = [
    ("eats", ["grass", "fish", "seeds", "insects", "fruit", "leaves"]),
    ("lives in", ["cave", "sea", "forest", "desert", "river", "swamp"]),
    ("fears", ["fire", "thunder", "eagles", "wolves", "snakes", "rain"]),
    ("likes", ["music", "sun", "snow", "honey", "mud", "wind"]),
];
const OTHER_RELATIONS: [(&str, [&str; 6]); 2] = [
    ("is a", ["mammal", "bird", "reptile", "amphibian", "rodent", "beetle"]),
    ("has", ["wings", "fur", "scales", "horns", "tail", "shell"]),
];
/// Two phrasings per question relation, in relation order; `{e}` marks the
/// creature slot.
const KNOWLEDGE_TEMPLATES: [[&str; 2]; 4] = [
    ["what food the {e} eats", "the {e} eats which food"],
    ["where the {e} lives in", "the {e} lives in which place"],
    ["what thing the {e} fears", "the {e} fears which thing"],
    ["what thing the {e} likes", "the {e} likes which thing"],
];
const COLOR_TEMPLATES: [&str; 2] = ["what color is the {e}", "the {e} has which color"];
/// Word used in place of the name when the question only points at the image.
const DEICTIC: &str = "animal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub kb_size: usize,
    /// Fraction of questions that need a knowledge fact.
    pub knowledge_fraction: f64,
    /// Fraction of questions naming the creature instead of saying "animal".
    pub named_fraction: f64,
    pub n_entities: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub noise: f64,
    /// Share of `(entity, relation)` facts held out for validation questions.
    pub val_fact_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 2000,
            n_val: 500,
            kb_size: 500,
            knowledge_fraction: 0.8,
            named_fraction: 0.5,
            n_entities: 40,
            patch_grid: 4,
            patch_dim: 12,
            noise: 0.05,
            val_fact_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Input("n_train and n_val must be at least 1".into()));
        }
        for (name, v) in [
            ("knowledge_fraction", self.knowledge_fraction),
            ("named_fraction", self.named_fraction),
            ("val_fact_fraction", self.val_fact_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.n_entities < 2 || self.patch_grid == 0 || self.patch_dim < 2 {
            return Err(Error::Input("need at least 2 entities, a non-empty grid and patch_dim >= 2".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Input("noise must be non-negative".into()));
        }
        let gold = self.n_entities * QUESTION_RELATIONS.len();
        if self.kb_size < gold {
            return Err(Error::Input(format!(
                "kb_size {} is below the {gold} gold facts",
                self.kb_size
            )));
        }
        Ok(())
    }
}

/// What a question asks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ask {
    Color,
    /// Index into the question relations.
    Relation(usize),
}

/// A question template: what it asks, which phrasing, and whether the
/// creature is named.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Template {
    pub ask: Ask,
    pub phrasing: usize,
    pub named: bool,
}

impl Template {
    fn pattern(&self) -> &'static str {
        match self.ask {
            Ask::Color => COLOR_TEMPLATES[self.phrasing],
            Ask::Relation(r) => KNOWLEDGE_TEMPLATES[r][self.phrasing],
        }
    }

    pub fn render(&self, entity_name: &str) -> String {
        let filler = if self.named { entity_name } else { DEICTIC };
        self.pattern().replace("{e}", filler)
    }

    pub fn all() -> Vec<Template> {
        let mut out = Vec::new();
        let asks = std::iter::once(Ask::Color).chain((0..QUESTION_RELATIONS.len()).map(Ask::Relation));
        for ask in asks {
            for phrasing in 0..2 {
                for named in [false, true] {
                    out.push(Template { ask, phrasing, named });
                }
            }
        }
        out
    }
}

/// Entities, rendering vectors and the fact table of one generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub entity_names: Vec<String>,
    /// Names that appear only in distractor facts.
    pub phantom_names: Vec<String>,
    pub colors: Vec<String>,
    /// `[n_entities, patch_dim]`.
    pub entity_vectors: Vec<Vec<f64>>,
    /// `[n_colors, patch_dim]`.
    pub color_vectors: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub noise: f64,
    /// `facts[entity][relation]` is the object index within that relation.
    pub facts: Vec<Vec<usize>>,
    /// Knowledge-base row of each gold fact, `[entity][relation]`.
    pub fact_entry: Vec<Vec<usize>>,
    /// Knowledge-base row of each entity's "is a" fact, used as the nominal
    /// support of colour questions.
    pub identity_entry: Vec<usize>,
}

impl SynthWorld {
    pub fn relation_name(r: usize) -> &'static str {
        QUESTION_RELATIONS[r].0
    }

    pub fn object_name(r: usize, o: usize) -> &'static str {
        QUESTION_RELATIONS[r].1[o]
    }

    pub fn relation_count() -> usize {
        QUESTION_RELATIONS.len()
    }
}

/// A scene: which creature sits where, in which colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub entity: usize,
    pub color: usize,
    pub cell: usize,
}

/// One generated question.
#[derive(Clone, Debug, PartialEq)]
pub struct QaInstance {
    pub question: String,
    /// `[g*g, p]`, cells in row-major order.
    pub image: Tensor,
    pub answer: String,
    pub gold_entry_id: usize,
    pub needs_knowledge: bool,
    /// Generator-side provenance; absent for instances read from disk.
    pub meta: Option<InstanceMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMeta {
    pub entity: usize,
    pub template: Template,
    pub placement: Placement,
}

/// Everything [`generate`] produces.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<QaInstance>,
    pub val: Vec<QaInstance>,
    pub triplets: Vec<Triplet>,
    pub answers: AnswerSpace,
    pub world: SynthWorld,
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn pseudo_words(rng: &mut impl Rng, count: usize) -> Result<Vec<String>> {
    let mut all: Vec<String> = Vec::new();
    for a in SYLLABLES {
        for b in SYLLABLES {
            if a != b {
                all.push(format!("{a}{b}"));
            }
        }
    }
    if count > all.len() {
        return Err(Error::Input(format!(
            "world needs {count} names but only {} exist",
            all.len()
        )));
    }
    all.shuffle(rng);
    all.truncate(count);
    Ok(all)
}

/// Draws the image for a scene. Occupied cells hold entity plus colour
/// vectors with Gaussian noise; every other cell holds the background.
pub fn render(world: &SynthWorld, scene: &[Placement], rng: &mut impl Rng) -> Result<Tensor> {
    let cells = world.patch_grid * world.patch_grid;
    let p = world.patch_dim;
    let mut used = HashSet::new();
    if scene.len() > cells {
        return Err(Error::Input(format!("{} entities for {cells} cells", scene.len())));
    }
    let mut data: Vec<f64> = world.background.iter().copied().cycle().take(cells * p).collect();
    for pl in scene {
        if pl.cell >= cells || !used.insert(pl.cell) {
            return Err(Error::Input(format!("cell {} invalid or occupied twice", pl.cell)));
        }
        let noise = normal_vec(rng, p, world.noise);
        for j in 0..p {
            data[pl.cell * p + j] =
                world.entity_vectors[pl.entity][j] + world.color_vectors[pl.color][j] + noise[j];
        }
    }
    Tensor::new(vec![cells, p], data).map_err(Error::from)
}

/// Generates the train and validation splits, the knowledge triplets and
/// the answer space. Deterministic for a fixed configuration.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_rel = QUESTION_RELATIONS.len();
    let n_e = config.n_entities;
    let gold_count = n_e * n_rel;
    let hard_budget = (config.kb_size - gold_count).min(n_e * OTHER_RELATIONS.len());
    let phantom_facts = config.kb_size - gold_count - hard_budget;
    let n_phantoms = phantom_facts.div_ceil(n_rel + OTHER_RELATIONS.len());
    let names = pseudo_words(&mut rng, n_e + n_phantoms)?;
    let (entity_names, phantom_names) = (names[..n_e].to_vec(), names[n_e..].to_vec());

    // Entity codes fill the leading coordinates, colour codes the trailing third.
    let p = config.patch_dim;
    let color_dims = (p / 3).max(1);
    let padded = |v: Vec<f64>, offset: usize| {
        let mut out = vec![0.0; p];
        out[offset..offset + v.len()].copy_from_slice(&v);
        out
    };
    let entity_vectors: Vec<Vec<f64>> = (0..n_e)
        .map(|_| padded(normal_vec(&mut rng, p - color_dims, 1.0), 0))
        .collect();
    let color_vectors: Vec<Vec<f64>> = COLORS
        .iter()
        .map(|_| padded(normal_vec(&mut rng, color_dims, 1.0), p - color_dims))
        .collect();
    let background = normal_vec(&mut rng, p, 0.1);

    // Fact table and knowledge triplets, tagged so rows can be found after shuffling.
    let facts: Vec<Vec<usize>> = (0..n_e)
        .map(|_| (0..n_rel).map(|_| rng.random_range(0..6)).collect())
        .collect();
    #[derive(Clone, Copy, PartialEq)]
    enum Tag {
        Gold(usize, usize),
        Identity(usize),
        Other,
    }
    let mut tagged: Vec<(Triplet, Tag)> = Vec::with_capacity(config.kb_size);
    for e in 0..n_e {
        for r in 0..n_rel {
            let (rel, objs) = QUESTION_RELATIONS[r];
            tagged.push((Triplet::new(&entity_names[e], rel, objs[facts[e][r]]), Tag::Gold(e, r)));
        }
    }
    // Hard negatives: real creatures under relations no question asks about.
    // Every creature gets an "is a" fact first.
    let mut hard = Vec::new();
    for (k, (rel, objs)) in OTHER_RELATIONS.iter().enumerate() {
        for (e, name) in entity_names.iter().enumerate() {
            let tag = if k == 0 { Tag::Identity(e) } else { Tag::Other };
            hard.push((Triplet::new(name, rel, objs.choose(&mut rng).unwrap()), tag));
        }
    }
    if hard_budget < n_e {
        return Err(Error::Input(format!(
            "kb_size {} leaves room for {hard_budget} of the {n_e} identity facts",
            config.kb_size
        )));
    }
    tagged.extend(hard.into_iter().take(hard_budget));
    // Phantom creatures under every relation.
    let all_relations: Vec<(&str, [&str; 6])> =
        QUESTION_RELATIONS.iter().chain(OTHER_RELATIONS.iter()).copied().collect();
    'outer: for name in &phantom_names {
        for (rel, objs) in &all_relations {
            if tagged.len() == config.kb_size {
                break 'outer;
            }
            tagged.push((Triplet::new(name, rel, objs.choose(&mut rng).unwrap()), Tag::Other));
        }
    }
    tagged.shuffle(&mut rng);
    let mut fact_entry = vec![vec![0; n_rel]; n_e];
    let mut identity_entry = vec![0; n_e];
    for (row, (_, tag)) in tagged.iter().enumerate() {
        match *tag {
            Tag::Gold(e, r) => fact_entry[e][r] = row,
            Tag::Identity(e) => identity_entry[e] = row,
            Tag::Other => {}
        }
    }
    let triplets: Vec<Triplet> = tagged.into_iter().map(|(t, _)| t).collect();

    let world = SynthWorld {
        entity_names,
        phantom_names,
        colors: COLORS.iter().map(|s| s.to_string()).collect(),
        entity_vectors,
        color_vectors,
        background,
        patch_grid: config.patch_grid,
        patch_dim: p,
        noise: config.noise,
        facts,
        fact_entry,
        identity_entry,
    };

    // Held-out facts for validation; colour questions are split by
    // (entity, phrasing) pairs.
    let mut pairs: Vec<(usize, usize)> = (0..n_e).flat_map(|e| (0..n_rel).map(move |r| (e, r))).collect();
    pairs.shuffle(&mut rng);
    let n_val_pairs = ((pairs.len() as f64 * config.val_fact_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let val_facts: HashSet<(usize, usize)> = pairs[..n_val_pairs].iter().copied().collect();
    let mut color_pairs: Vec<(usize, usize)> = (0..n_e).flat_map(|e| (0..2).map(move |ph| (e, ph))).collect();
    color_pairs.shuffle(&mut rng);
    let n_val_color = ((color_pairs.len() as f64 * config.val_fact_fraction).round() as usize)
        .clamp(1, color_pairs.len() - 1);
    let val_colors: HashSet<(usize, usize)> = color_pairs[..n_val_color].iter().copied().collect();

    let make_split = |n: usize, val: bool, rng: &mut ChaCha8Rng| -> Result<Vec<QaInstance>> {
        let knowledge_pool: Vec<(usize, usize)> = pairs
            .iter()
            .copied()
            .filter(|pr| val_facts.contains(pr) == val)
            .collect();
        let color_pool: Vec<(usize, usize)> = color_pairs
            .iter()
            .copied()
            .filter(|pr| val_colors.contains(pr) == val)
            .collect();
        let cells = config.patch_grid * config.patch_grid;
        (0..n)
            .map(|_| {
                let needs_knowledge = rng.random_bool(config.knowledge_fraction);
                let named = rng.random_bool(config.named_fraction);
                let phrasing = rng.random_range(0..2);
                let (entity, template) = if needs_knowledge {
                    let &(e, r) = knowledge_pool.choose(rng).unwrap();
                    (e, Template { ask: Ask::Relation(r), phrasing, named })
                } else {
                    let &(e, ph) = color_pool.choose(rng).unwrap();
                    (e, Template { ask: Ask::Color, phrasing: ph, named })
                };
                let placement = Placement {
                    entity,
                    color: rng.random_range(0..COLORS.len()),
                    cell: rng.random_range(0..cells),
                };
                let image = render(&world, &[placement], rng)?;
                let (answer, gold) = match template.ask {
                    Ask::Color => (COLORS[placement.color].to_string(), world.identity_entry[entity]),
                    Ask::Relation(r) => (
                        SynthWorld::object_name(r, world.facts[entity][r]).to_string(),
                        world.fact_entry[entity][r],
                    ),
                };
                Ok(QaInstance {
                    question: template.render(&world.entity_names[entity]),
                    image,
                    answer,
                    gold_entry_id: gold,
                    needs_knowledge,
                    meta: Some(InstanceMeta {
                        entity,
                        template,
                        placement,
                    }),
                })
            })
            .collect()
    };
    let train = make_split(config.n_train, false, &mut rng)?;
    let val = make_split(config.n_val, true, &mut rng)?;

    let mut answers: BTreeSet<String> = COLORS.iter().map(|s| s.to_string()).collect();
    for (_, objs) in QUESTION_RELATIONS {
        answers.extend(objs.iter().map(|s| s.to_string()));
    }
    Ok(SynthData {
        train,
        val,
        triplets,
        answers: AnswerSpace::new(answers.into_iter().collect())?,
        world,
    })
}

/// Recovers `(entity, colour)` of the one occupied cell by nearest
/// neighbour over all combinations.
fn decode_image(world: &SynthWorld, image: &Tensor) -> Option<(usize, usize)> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let occupied: Vec<usize> = (0..image.rows())
        .filter(|&c| dist(image.row(c), &world.background) > 1e-12)
        .collect();
    let &[cell] = occupied.as_slice() else {
        return None;
    };
    let patch = image.row(cell);
    let mut best: Option<((usize, usize), f64)> = None;
    for (e, ev) in world.entity_vectors.iter().enumerate() {
        for (c, cv) in world.color_vectors.iter().enumerate() {
            let target: Vec<f64> = ev.iter().zip(cv).map(|(a, b)| a + b).collect();
            let d = dist(patch, &target);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((e, c), d));
            }
        }
    }
    best.map(|b| b.0)
}

/// Reads the question back into what it asks and whom it names.
fn parse_question(world: &SynthWorld, question: &str) -> Option<(Ask, Option<usize>)> {
    let words: Vec<&str> = question.split_whitespace().collect();
    for template in Template::all() {
        let pattern: Vec<&str> = template.pattern().split_whitespace().collect();
        if pattern.len() != words.len() {
            continue;
        }
        let mut named = None;
        let fits = pattern.iter().zip(&words).all(|(p, w)| {
            if *p == "{e}" {
                if *w == DEICTIC {
                    true
                } else if let Some(e) = world.entity_names.iter().position(|n| n == w) {
                    named = Some(e);
                    true
                } else {
                    false
                }
            } else {
                p == w
            }
        });
        if fits {
            return Some((template.ask, named));
        }
    }
    None
}

/// Rule-based answer from the image and one knowledge triplet, or `None`
/// when the two do not determine it.
pub fn oracle_answer(world: &SynthWorld, question: &str, image: &Tensor, entry: &Triplet) -> Option<String> {
    let (depicted, color) = decode_image(world, image)?;
    let (ask, named) = parse_question(world, question)?;
    let subject = named.unwrap_or(depicted);
    match ask {
        Ask::Color => (subject == depicted).then(|| world.colors[color].clone()),
        Ask::Relation(r) => {
            let (rel, objs) = QUESTION_RELATIONS[r];
            let about_subject = entry.subject == world.entity_names[subject] && entry.relation == rel;
            (about_subject && objs.contains(&entry.object.as_str())).then(|| entry.object.clone())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonInstance {
    question: String,
    image: Vec<Vec<Vec<f64>>>,
    answer: String,
    gold_entry_id: usize,
    needs_knowledge: bool,
}

/// Writes one JSON object per line; the image is a `g x g x p` array.
pub fn write_jsonl(path: &Path, instances: &[QaInstance], grid: usize) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        let rows = (0..grid)
            .map(|r| (0..grid).map(|c| inst.image.row(r * grid + c).to_vec()).collect())
            .collect();
        let json = JsonInstance {
            question: inst.question.clone(),
            image: rows,
            answer: inst.answer.clone(),
            gold_entry_id: inst.gold_entry_id,
            needs_knowledge: inst.needs_knowledge,
        };
        serde_json::to_writer(&mut out, &json)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaInstance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let json: JsonInstance = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let grid = json.image.len();
        let p = json.image.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if grid == 0 || p == 0 || json.image.iter().any(|r| r.len() != grid || r.iter().any(|c| c.len() != p)) {
            return Err(parse("image must be a non-empty g x g x p array".into()));
        }
        let data = json.image.into_iter().flatten().flatten().collect();
        out.push(QaInstance {
            question: json.question,
            image: Tensor::new(vec![grid * grid, p], data)?,
            answer: json.answer,
            gold_entry_id: json.gold_entry_id,
            needs_knowledge: json.needs_knowledge,
            meta: None,
        });
    }
    Ok(out)
}

/// Counts instances per template, for summaries.
pub fn template_histogram(instances: &[QaInstance]) -> HashMap<Template, usize> {
    let mut h = HashMap::new();
    for inst in instances {
        if let Some(m) = &inst.meta {
            *h.entry(m.template).or_default() += 1;
        }
    }
    h
}
