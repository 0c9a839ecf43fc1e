//! Task generators with ground truth derived from the scene.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{render_scene, Color, Object, SceneSpec, Shape, CORNER_WORDS};
use super::vocab::Vocab;
use super::Sample;
use crate::error::{CromeError, Result};
use crate::params::derive_seed;

pub const QUESTIONS_PER_IMAGE: usize = 4;
pub const GRID: usize = 2;

const NUMBER_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Caption,
    CountQa,
    AttributeQa,
    McQa,
    /// Held-out four-way position question; only the fine-tuning stage sees it.
    PositionMc,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Caption,
        TaskKind::CountQa,
        TaskKind::AttributeQa,
        TaskKind::McQa,
        TaskKind::PositionMc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::CountQa => "count-qa",
            TaskKind::AttributeQa => "attribute-qa",
            TaskKind::McQa => "mc-qa",
            TaskKind::PositionMc => "position-mc",
        }
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(self, TaskKind::McQa | TaskKind::PositionMc)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = CromeError;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TaskKind::ALL.iter().map(|k| k.name()).collect();
                CromeError::Config(format!("unknown task kind {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The scene and plain-text question/answer behind one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene: SceneSpec,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub kind: TaskKind,
    pub samples: Vec<Sample>,
    pub truths: Vec<GroundTruth>,
}

pub fn caption(scene: &SceneSpec) -> String {
    scene
        .objects()
        .map(|(_, o)| format!("{} {}", o.color.word(), o.shape.word()))
        .collect::<Vec<_>>()
        .join(" , ")
}

/// Caption with each object's position word, used only by the text corpus.
pub fn positioned_description(scene: &SceneSpec) -> String {
    scene
        .objects()
        .map(|(i, o)| format!("{} {} {}", o.color.word(), o.shape.word(), CORNER_WORDS[i]))
        .collect::<Vec<_>>()
        .join(" , ")
}

struct Qa {
    question: String,
    answer: String,
    choices: Option<Vec<String>>,
}

fn count_questions(scene: &SceneSpec) -> Vec<Qa> {
    let mut out = vec![Qa {
        question: "how many shapes are there ?".into(),
        answer: NUMBER_WORDS[scene.count_where(|_| true)].into(),
        choices: None,
    }];
    for c in Color::ALL {
        out.push(Qa {
            question: format!("how many {} shapes are there ?", c.word()),
            answer: NUMBER_WORDS[scene.count_where(|o| o.color == c)].into(),
            choices: None,
        });
    }
    for s in Shape::ALL {
        out.push(Qa {
            question: format!("how many {} are there ?", s.plural()),
            answer: NUMBER_WORDS[scene.count_where(|o| o.shape == s)].into(),
            choices: None,
        });
    }
    out
}

fn unique_by<T: PartialEq + Copy>(scene: &SceneSpec, key: impl Fn(&Object) -> T, value: T) -> Option<Object> {
    let mut hits = scene.objects().filter(|(_, o)| key(o) == value);
    match (hits.next(), hits.next()) {
        (Some((_, o)), None) => Some(o),
        _ => None,
    }
}

fn attribute_questions(scene: &SceneSpec) -> Vec<Qa> {
    let mut out = Vec::new();
    for s in Shape::ALL {
        if let Some(o) = unique_by(scene, |o| o.shape, s) {
            out.push(Qa {
                question: format!("what color is the {} ?", s.word()),
                answer: o.color.word().into(),
                choices: None,
            });
        }
    }
    for c in Color::ALL {
        if let Some(o) = unique_by(scene, |o| o.color, c) {
            out.push(Qa {
                question: format!("what shape is {} ?", c.word()),
                answer: o.shape.word().into(),
                choices: None,
            });
        }
    }
    out
}

fn shuffled_choices<R: Rng + ?Sized>(words: &[&str], rng: &mut R) -> Vec<String> {
    let mut choices: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    choices.shuffle(rng);
    choices
}

fn mc_questions<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> Vec<Qa> {
    let colors: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
    Shape::ALL
        .iter()
        .filter_map(|&s| unique_by(scene, |o| o.shape, s).map(|o| (s, o)))
        .map(|(s, o)| Qa {
            question: format!("what color is the {} ?", s.word()),
            answer: o.color.word().into(),
            choices: Some(shuffled_choices(&colors, rng)),
        })
        .collect()
}

/// Scene with exactly one triangle.
fn position_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    let mut scene = SceneSpec::random(GRID, 1, 3, rng);
    let occupied: Vec<usize> = scene.objects().map(|(i, _)| i).collect();
    let pick = occupied[rng.random_range(0..occupied.len())];
    for &i in &occupied {
        let cell = scene.cells[i].as_mut().expect("occupied");
        if i == pick {
            cell.shape = Shape::Triangle;
        } else if cell.shape == Shape::Triangle {
            cell.shape = if rng.random_bool(0.5) { Shape::Square } else { Shape::Circle };
        }
    }
    scene
}

fn position_question<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> Qa {
    let cell = scene
        .objects()
        .find(|(_, o)| o.shape == Shape::Triangle)
        .map(|(i, _)| i)
        .expect("position scenes hold one triangle");
    Qa {
        question: "where is the triangle ?".into(),
        answer: CORNER_WORDS[cell].into(),
        choices: Some(shuffled_choices(&CORNER_WORDS, rng)),
    }
}

/// Scene plus the (up to four) questions asked about it.
fn image_record(kind: TaskKind, seed: u64, index: usize) -> (SceneSpec, Vec<Qa>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{kind}/{index}")));
    loop {
        let scene = match kind {
            TaskKind::PositionMc => position_scene(&mut rng),
            _ => SceneSpec::random(GRID, 1, GRID * GRID, &mut rng),
        };
        let mut qas = match kind {
            TaskKind::Caption => vec![Qa { question: String::new(), answer: caption(&scene), choices: None }],
            TaskKind::CountQa => count_questions(&scene),
            TaskKind::AttributeQa => attribute_questions(&scene),
            TaskKind::McQa => mc_questions(&scene, &mut rng),
            TaskKind::PositionMc => vec![position_question(&scene, &mut rng)],
        };
        if qas.is_empty() {
            // e.g. no uniquely identifiable shape; redraw from the same stream
            continue;
        }
        qas.shuffle(&mut rng);
        let keep = rng.random_range(1..=qas.len().min(QUESTIONS_PER_IMAGE));
        qas.truncate(keep);
        return (scene, qas);
    }
}

/// Generates `n` samples. Record `i` depends only on `(seed, kind, i)`.
pub fn generate_dataset(kind: TaskKind, n: usize, seed: u64, image_size: usize) -> Result<GeneratedDataset> {
    if n == 0 {
        return Err(CromeError::Data("dataset size must be positive".into()));
    }
    let vocab = Vocab::standard();
    let mut samples = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    let mut index = 0;
    while samples.len() < n {
        let (scene, qas) = image_record(kind, seed, index);
        index += 1;
        let image = render_scene(&scene, image_size)?;
        for qa in qas {
            if samples.len() == n {
                break;
            }
            samples.push(Sample {
                image: image.clone(),
                instruction: vocab.tokenize(&qa.question)?,
                target: vocab.tokenize(&qa.answer)?,
                choices: qa.choices,
                tag: kind.name().to_string(),
            });
            truths.push(GroundTruth { scene: scene.clone(), question: qa.question, answer: qa.answer });
        }
    }
    Ok(GeneratedDataset { kind, samples, truths })
}

/// Re-derives the answer to a grammar question by parsing it against the
/// scene. Independent of the generators above.
pub fn derive_answer(scene: &SceneSpec, question: &str) -> Result<String> {
    let words: Vec<&str> = question.split_whitespace().collect();
    let color = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
    let shape = |w: &str| Shape::ALL.into_iter().find(|s| s.word() == w);
    let plural = |w: &str| Shape::ALL.into_iter().find(|s| s.plural() == w);
    let count = |n: usize| NUMBER_WORDS[n].to_string();
    let only = |objs: Vec<(usize, Object)>| -> Result<(usize, Object)> {
        match objs.as_slice() {
            [one] => Ok(*one),
            _ => Err(CromeError::Data(format!("question {question:?} has no unique referent"))),
        }
    };
    let objs = |pred: &dyn Fn(&Object) -> bool| scene.objects().filter(|(_, o)| pred(o)).collect::<Vec<_>>();
    match words.as_slice() {
        [] => Ok(caption(scene)),
        ["how", "many", "shapes", "are", "there", "?"] => Ok(count(objs(&|_| true).len())),
        ["how", "many", c, "shapes", "are", "there", "?"] if color(c).is_some() => {
            let c = color(c).unwrap();
            Ok(count(objs(&|o| o.color == c).len()))
        }
        ["how", "many", p, "are", "there", "?"] if plural(p).is_some() => {
            let s = plural(p).unwrap();
            Ok(count(objs(&|o| o.shape == s).len()))
        }
        ["what", "color", "is", "the", s, "?"] if shape(s).is_some() => {
            let s = shape(s).unwrap();
            Ok(only(objs(&|o| o.shape == s))?.1.color.word().into())
        }
        ["what", "shape", "is", c, "?"] if color(c).is_some() => {
            let c = color(c).unwrap();
            Ok(only(objs(&|o| o.color == c))?.1.shape.word().into())
        }
        ["where", "is", "the", s, "?"] if shape(s).is_some() && scene.grid == 2 => {
            let s = shape(s).unwrap();
            Ok(CORNER_WORDS[only(objs(&|o| o.shape == s))?.0].into())
        }
        _ => Err(CromeError::Data(format!("question {question:?} outside the task grammar"))),
    }
}

/// Text-only record for language-model pretraining: the model reads
/// `prefix` and is trained on `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRecord {
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

/// Text corpus for the language-model stage. Each record is
/// `question ∥ positioned description → answer`; the description takes the
/// place the visual tokens occupy in the multimodal stages.
pub fn text_corpus(n: usize, seed: u64) -> Result<Vec<TextRecord>> {
    let vocab = Vocab::standard();
    let mut out = Vec::with_capacity(n);
    let mut index = 0;
    while out.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("text/{index}")));
        index += 1;
        let scene = SceneSpec::random(GRID, 1, GRID * GRID, &mut rng);
        let mut qas = vec![Qa { question: String::new(), answer: caption(&scene), choices: None }];
        qas.extend(count_questions(&scene));
        qas.extend(attribute_questions(&scene));
        for s in Shape::ALL {
            if let Some((i, _)) = scene.objects().find(|(_, o)| o.shape == s).filter(|_| unique_by(&scene, |o| o.shape, s).is_some()) {
                qas.push(Qa {
                    question: format!("where is the {} ?", s.word()),
                    answer: CORNER_WORDS[i].into(),
                    choices: None,
                });
            }
        }
        let qa = &qas[rng.random_range(0..qas.len())];
        let description = positioned_description(&scene);
        let mut prefix = vocab.tokenize(&qa.question)?;
        prefix.extend(vocab.tokenize(&description)?);
        out.push(TextRecord { prefix, target: vocab.tokenize(&qa.answer)? });
    }
    Ok(out)
}
