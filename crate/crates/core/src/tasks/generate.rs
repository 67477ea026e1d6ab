use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{render, Color, Scene, SceneObject, Shape, SizeClass};
use super::{AnswerType, DataConfig, Dataset, Record, Split, Splits, TaskKind, PRETRAIN_CLASSES};
use crate::error::Result;

/// Independent random streams derived from one seed.
const SCENE_STREAM: u64 = 0;
const PIXEL_STREAM: u64 = 1;
const QUESTION_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate(kind: TaskKind, config: &DataConfig, seed: u64) -> Result<Splits> {
    match kind {
        TaskKind::Vqa => generate_vqa_dataset(config, seed),
        TaskKind::Oracle => generate_oracle_dataset(config, seed),
        TaskKind::Pretrain => generate_pretrain_dataset(config, seed),
    }
}

fn has_unique_attribute(scene: &Scene) -> bool {
    scene.objects.iter().any(|o| {
        scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1
            || scene.objects.iter().filter(|p| p.color == o.color).count() == 1
    })
}

/// Deterministic VQA set. Question types rotate exist → count → attribute, and
/// existence answers alternate yes/no. Every scene has at least one object whose shape
/// or colour is unique, so an attribute question can always be asked.
pub fn generate_vqa_dataset(config: &DataConfig, seed: u64) -> Result<Splits> {
    config.validate()?;
    let mut scene_rng = stream(seed, SCENE_STREAM);
    let mut q_rng = stream(seed, QUESTION_STREAM);
    let mut scenes = Vec::with_capacity(config.scenes);
    let mut records = Vec::new();
    let mut slot = 0usize;
    let mut want_yes = true;
    for id in 0..config.scenes {
        let scene = loop {
            let s = Scene::random(id, config.image_size, config.max_objects, &mut scene_rng);
            if has_unique_attribute(&s) {
                break s;
            }
        };
        for _ in 0..config.questions_per_scene {
            let (family, question, answer) = match slot % 3 {
                0 => {
                    let q = existence_question(&scene, want_yes, &mut q_rng);
                    want_yes = !want_yes;
                    q
                }
                1 => count_question(&scene, &mut q_rng),
                _ => attribute_question(&scene, &mut q_rng),
            };
            slot += 1;
            let answer_type = Some(AnswerType::of_answer(&answer));
            records.push(Record { scene: id, family: family.into(), question, answer, answer_type, target: None });
        }
        scenes.push(scene);
    }
    split(TaskKind::Vqa, config, seed, scenes, records)
}

fn random_attrs<R: Rng + ?Sized>(rng: &mut R) -> (Shape, Color) {
    (Shape::ALL[rng.gen_range(0..4)], Color::ALL[rng.gen_range(0..4)])
}

fn existence_question<R: Rng + ?Sized>(scene: &Scene, want_yes: bool, rng: &mut R) -> (&'static str, String, String) {
    let template = rng.gen_range(0..3);
    let matches = |shape: Shape, color: Color, o: &SceneObject| match template {
        0 => o.shape == shape && o.color == color,
        1 => o.shape == shape,
        _ => o.color == color,
    };
    let (mut shape, mut color) = {
        let o = scene.objects.choose(rng).expect("scene has objects");
        (o.shape, o.color)
    };
    if !want_yes {
        for _ in 0..32 {
            let (s, c) = random_attrs(rng);
            if !scene.objects.iter().any(|o| matches(s, c, o)) {
                (shape, color) = (s, c);
                break;
            }
        }
    }
    let exists = scene.objects.iter().any(|o| matches(shape, color, o));
    let question = match template {
        0 => format!("is there a {color} {shape}?"),
        1 => format!("is there a {shape}?"),
        _ => format!("is there a {color} object?"),
    };
    ("exist", question, if exists { "yes" } else { "no" }.to_string())
}

fn count_question<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> (&'static str, String, String) {
    let template = rng.gen_range(0..3);
    let (shape, color) = if rng.gen_bool(0.7) {
        let o = scene.objects.choose(rng).expect("scene has objects");
        (o.shape, o.color)
    } else {
        random_attrs(rng)
    };
    let count = scene
        .objects
        .iter()
        .filter(|o| match template {
            0 => o.shape == shape,
            1 => o.color == color,
            _ => o.shape == shape && o.color == color,
        })
        .count();
    let question = match template {
        0 => format!("how many {} are there?", shape.plural()),
        1 => format!("how many {color} objects are there?"),
        _ => format!("how many {color} {} are there?", shape.plural()),
    };
    ("count", question, count.to_string())
}

fn attribute_question<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> (&'static str, String, String) {
    let mut options: Vec<(&'static str, String, String)> = Vec::new();
    for o in &scene.objects {
        if scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1 {
            options.push(("color", format!("what color is the {}?", o.shape), o.color.to_string()));
        }
        if scene.objects.iter().filter(|p| p.color == o.color).count() == 1 {
            options.push(("shape", format!("what shape is the {} object?", o.color), o.shape.to_string()));
        }
    }
    let i = rng.gen_range(0..options.len());
    options.swap_remove(i)
}

#[derive(Clone, Copy)]
enum OracleFamily {
    Color,
    Shape,
    Biggest,
    LeftOf,
    OnLeft,
}

/// Family rotation; colour questions appear twice per cycle because only the crop
/// carries colour.
const ORACLE_CYCLE: [OracleFamily; 6] = [
    OracleFamily::Color,
    OracleFamily::Biggest,
    OracleFamily::Color,
    OracleFamily::LeftOf,
    OracleFamily::Shape,
    OracleFamily::OnLeft,
];

/// Deterministic oracle set: yes/no/n-a questions about a hidden target object.
pub fn generate_oracle_dataset(config: &DataConfig, seed: u64) -> Result<Splits> {
    config.validate()?;
    let mut scene_rng = stream(seed, SCENE_STREAM);
    let mut q_rng = stream(seed, QUESTION_STREAM);
    let mut scenes = Vec::with_capacity(config.scenes);
    let mut records = Vec::new();
    let mut slot = 0usize;
    let mut want_yes = true;
    for id in 0..config.scenes {
        let scene = Scene::random(id, config.image_size, config.max_objects, &mut scene_rng);
        for _ in 0..config.questions_per_scene {
            let target = q_rng.gen_range(0..scene.objects.len());
            let t = scene.objects[target];
            let family = ORACLE_CYCLE[slot % ORACLE_CYCLE.len()];
            slot += 1;
            let (name, question, answer) = match family {
                OracleFamily::Color => {
                    let color = if want_yes { t.color } else { other(&Color::ALL, t.color, &mut q_rng) };
                    want_yes = !want_yes;
                    ("color", format!("is it {color}?"), yes_no(color == t.color))
                }
                OracleFamily::Shape => {
                    let shape = if want_yes { t.shape } else { other(&Shape::ALL, t.shape, &mut q_rng) };
                    want_yes = !want_yes;
                    ("shape", format!("is it a {shape}?"), yes_no(shape == t.shape))
                }
                OracleFamily::Biggest => ("biggest", "is it the biggest?".to_string(), biggest_answer(&scene, target)),
                OracleFamily::LeftOf => {
                    let others: Vec<Shape> =
                        scene.objects.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, o)| o.shape).collect();
                    let shape = match others.choose(&mut q_rng) {
                        Some(&s) if q_rng.gen_bool(0.75) => s,
                        _ => Shape::ALL[q_rng.gen_range(0..4)],
                    };
                    ("left_of", format!("is it left of the {shape}?"), left_of_answer(&scene, target, shape))
                }
                OracleFamily::OnLeft => {
                    let left = t.bbox.center_x2() < scene.image_size;
                    ("on_left", "is it on the left?".to_string(), yes_no(left))
                }
            };
            records.push(Record {
                scene: id,
                family: name.into(),
                question,
                answer,
                answer_type: None,
                target: Some(target),
            });
        }
        scenes.push(scene);
    }
    split(TaskKind::Oracle, config, seed, scenes, records)
}

fn other<T: Copy + PartialEq, R: Rng + ?Sized>(all: &[T], not: T, rng: &mut R) -> T {
    let rest: Vec<T> = all.iter().copied().filter(|&x| x != not).collect();
    rest[rng.gen_range(0..rest.len())]
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// `yes` when the target's box area is strictly the largest, `n/a` when it ties for
/// the largest, `no` otherwise.
fn biggest_answer(scene: &Scene, target: usize) -> String {
    let area = scene.objects[target].bbox.area();
    let best = scene.objects.iter().map(|o| o.bbox.area()).max().unwrap_or(0);
    let ties = scene.objects.iter().filter(|o| o.bbox.area() == best).count();
    if area < best {
        "no".into()
    } else if ties > 1 {
        "n/a".into()
    } else {
        "yes".into()
    }
}

/// `n/a` unless exactly one other object has `shape`; otherwise compares centres.
fn left_of_answer(scene: &Scene, target: usize, shape: Shape) -> String {
    let refs: Vec<&SceneObject> =
        scene.objects.iter().enumerate().filter(|&(i, o)| i != target && o.shape == shape).map(|(_, o)| o).collect();
    match refs.as_slice() {
        [r] => yes_no(scene.objects[target].bbox.center_x2() < r.bbox.center_x2()),
        _ => "n/a".into(),
    }
}

/// Classification set: one large object plus up to two small distractors; the label
/// is the large object's shape and colour temperature.
pub fn generate_pretrain_dataset(config: &DataConfig, seed: u64) -> Result<Splits> {
    config.validate()?;
    let mut scene_rng = stream(seed, SCENE_STREAM);
    let mut scenes = Vec::with_capacity(config.scenes);
    let mut records = Vec::new();
    for id in 0..config.scenes {
        let scene = loop {
            let (shape, color) = random_attrs(&mut scene_rng);
            let mut specs = vec![(shape, color, SizeClass::Large)];
            for _ in 0..scene_rng.gen_range(0..=2usize.min(config.max_objects - 1)) {
                let (s, c) = random_attrs(&mut scene_rng);
                specs.push((s, c, SizeClass::Small));
            }
            let s = Scene::place(id, config.image_size, &specs, &mut scene_rng);
            if s.objects.first().map(|o| o.size) == Some(SizeClass::Large) {
                break s;
            }
        };
        let d = scene.objects[0];
        let label = PRETRAIN_CLASSES[d.shape.index() * 2 + usize::from(!d.color.is_warm())];
        records.push(Record {
            scene: id,
            family: "classify".into(),
            question: String::new(),
            answer: label.into(),
            answer_type: None,
            target: Some(0),
        });
        scenes.push(scene);
    }
    split(TaskKind::Pretrain, config, seed, scenes, records)
}

/// Render every scene and partition by scene 70/15/15 after a seeded shuffle.
fn split(kind: TaskKind, config: &DataConfig, seed: u64, scenes: Vec<Scene>, records: Vec<Record>) -> Result<Splits> {
    let mut pixel_rng = stream(seed, PIXEL_STREAM);
    let images: Vec<_> = scenes.iter().map(|s| render(s, &mut pixel_rng)).collect();
    let n = scenes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, SPLIT_STREAM));
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut assignment = vec![Split::Test; n];
    for (rank, &scene) in order.iter().enumerate() {
        assignment[scene] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let build = |which: Split| {
        let mut local = vec![usize::MAX; n];
        let mut ds = Dataset {
            kind,
            split: which,
            seed,
            image_size: config.image_size,
            scenes: Vec::new(),
            images: Vec::new(),
            records: Vec::new(),
        };
        for i in 0..n {
            if assignment[i] == which {
                local[i] = ds.scenes.len();
                ds.scenes.push(scenes[i].clone());
                ds.images.push(images[i].clone());
            }
        }
        for r in &records {
            if assignment[r.scene] == which {
                ds.records.push(Record { scene: local[r.scene], ..r.clone() });
            }
        }
        ds
    };
    Ok(Splits { train: build(Split::Train), val: build(Split::Val), test: build(Split::Test) })
}
