//! Recomputes answers from scene metadata and question text alone, without sharing
//! code with the generators.

use super::scene::{Color, Scene, SceneObject, Shape};
use crate::error::{Error, Result};
use crate::language::tokenize;

fn shape_word(word: &str) -> Option<Shape> {
    word.parse()
        .ok()
        .or_else(|| word.strip_suffix("es").and_then(|s| s.parse().ok()))
        .or_else(|| word.strip_suffix('s').and_then(|s| s.parse().ok()))
}

fn filters(words: &[String]) -> (Option<Shape>, Option<Color>) {
    let shape = words.iter().find_map(|w| shape_word(w));
    let color = words.iter().find_map(|w| w.parse::<Color>().ok());
    (shape, color)
}

fn matches(o: &SceneObject, shape: Option<Shape>, color: Option<Color>) -> bool {
    shape.map_or(true, |s| o.shape == s) && color.map_or(true, |c| o.color == c)
}

fn unparsed(question: &str) -> Error {
    Error::Validation(format!("checker cannot parse `{question}`"))
}

fn yes_no(b: bool) -> String {
    String::from(if b { "yes" } else { "no" })
}

/// Answer a VQA question about `scene`.
pub fn check_vqa(scene: &Scene, question: &str) -> Result<String> {
    let words = tokenize(question);
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let (shape, color) = filters(&words);
    match w.as_slice() {
        ["is", "there", ..] => Ok(yes_no(scene.objects.iter().any(|o| matches(o, shape, color)))),
        ["how", "many", ..] => Ok(scene.objects.iter().filter(|o| matches(o, shape, color)).count().to_string()),
        ["what", "color", ..] | ["what", "shape", ..] => {
            let found: Vec<&SceneObject> = scene.objects.iter().filter(|o| matches(o, shape, color)).collect();
            let [o] = found.as_slice() else {
                return Err(Error::Validation(format!("`{question}` has no unique referent")));
            };
            Ok(if w[1] == "color" { o.color.to_string() } else { o.shape.to_string() })
        }
        _ => Err(unparsed(question)),
    }
}

/// Answer an oracle question about object `target` of `scene`.
pub fn check_oracle(scene: &Scene, target: usize, question: &str) -> Result<String> {
    let t = scene.objects.get(target).ok_or_else(|| Error::Validation(format!("no object {target}")))?;
    let words = tokenize(question);
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let cx = |o: &SceneObject| (o.bbox.x_min + o.bbox.x_max) as f64 / 2.0;
    match w.as_slice() {
        ["is", "it", "the", "biggest"] => {
            let area = |o: &SceneObject| o.bbox.width() * o.bbox.height();
            let larger = scene.objects.iter().filter(|o| area(o) > area(t)).count();
            let equal = scene.objects.iter().filter(|o| area(o) == area(t)).count();
            Ok(match (larger, equal) {
                (0, 1) => "yes".into(),
                (0, _) => "n/a".into(),
                _ => "no".into(),
            })
        }
        ["is", "it", "on", "the", "left"] => Ok(yes_no(cx(t) < scene.image_size as f64 / 2.0)),
        ["is", "it", "left", "of", "the", s] => {
            let shape = shape_word(s).ok_or_else(|| unparsed(question))?;
            let refs: Vec<&SceneObject> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(i, o)| *i != target && o.shape == shape)
                .map(|(_, o)| o)
                .collect();
            Ok(if refs.len() == 1 { yes_no(cx(t) < cx(refs[0])) } else { "n/a".into() })
        }
        ["is", "it", "a", s] => Ok(yes_no(shape_word(s).ok_or_else(|| unparsed(question))? == t.shape)),
        ["is", "it", c] => Ok(yes_no(c.parse::<Color>()? == t.color)),
        _ => Err(unparsed(question)),
    }
}
