//! Rule-based instruction templates.

use serde::{Deserialize, Serialize};

use crate::pipeline::types::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predicate {
    Left,
    Right,
    Above,
    Below,
    Front,
    Behind,
}

impl Predicate {
    pub fn phrase(&self) -> &'static str {
        match self {
            Predicate::Left => "to the left of",
            Predicate::Right => "to the right of",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::Front => "in front of",
            Predicate::Behind => "behind",
        }
    }

    pub fn flipped(&self) -> Predicate {
        match self {
            Predicate::Left => Predicate::Right,
            Predicate::Right => Predicate::Left,
            Predicate::Above => Predicate::Below,
            Predicate::Below => Predicate::Above,
            Predicate::Front => Predicate::Behind,
            Predicate::Behind => Predicate::Front,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Top,
    Bottom,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Top => "top",
            Direction::Bottom => "bottom",
        }
    }
}

/// Lowercases every word except capitalised words after the first, which
/// are taken to be proper nouns. Collapses whitespace and strips trailing
/// punctuation.
pub fn normalize_phrase(s: &str) -> String {
    let s = s.trim().trim_end_matches(['.', '!', '?', ',', ';', ':']);
    s.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            let proper = i > 0 && w.chars().next().is_some_and(char::is_uppercase);
            if proper {
                w.to_string()
            } else {
                w.to_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn article(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn with_task(task: Task, noun_phrase: &str) -> String {
    match task {
        Task::Remove => format!("remove the {noun_phrase}"),
        Task::Add => format!("add {} {noun_phrase}", article(noun_phrase)),
    }
}

pub fn simple_instruction(label: &str, task: Task) -> String {
    with_task(task, &normalize_phrase(label))
}

/// Task prefix plus the caption with any leading article folded. Falls back
/// to the simple template when the caption is empty.
pub fn attribute_instruction(caption: &str, label: &str, task: Task) -> String {
    let caption = normalize_phrase(caption);
    let (lead, rest) = match caption.split_once(' ') {
        Some((first, rest)) if matches!(first, "a" | "an" | "the") => (Some(first), rest.to_string()),
        _ => (None, caption.clone()),
    };
    if rest.is_empty() {
        return simple_instruction(label, task);
    }
    match (task, lead) {
        (Task::Add, Some(a @ ("a" | "an"))) => format!("add {a} {rest}"),
        _ => with_task(task, &rest),
    }
}

/// `None` when the anchor caption is empty.
pub fn spatial_instruction(subject_label: &str, pred: Predicate, anchor_caption: &str, task: Task) -> Option<String> {
    let anchor = normalize_phrase(anchor_caption);
    let anchor = anchor
        .strip_prefix("the ")
        .or_else(|| anchor.strip_prefix("a "))
        .or_else(|| anchor.strip_prefix("an "))
        .unwrap_or(&anchor);
    if anchor.is_empty() {
        return None;
    }
    Some(format!("{} {} the {anchor}", simple_instruction(subject_label, task), pred.phrase()))
}

const NUMBER_WORDS: [&str; 10] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

pub fn number_word(k: usize) -> String {
    match k {
        1..=10 => NUMBER_WORDS[k - 1].to_string(),
        _ => k.to_string(),
    }
}

const IRREGULAR: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("knife", "knives"),
    ("leaf", "leaves"),
    ("shelf", "shelves"),
    ("ox", "oxen"),
    ("sheep", "sheep"),
    ("deer", "deer"),
    ("fish", "fish"),
    ("skis", "skis"),
    ("scissors", "scissors"),
];

fn pluralize_word(w: &str) -> String {
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == w) {
        return (*p).to_string();
    }
    let consonant_y = w.len() > 1 && w.ends_with('y') && !w[..w.len() - 1].ends_with(['a', 'e', 'i', 'o', 'u']);
    if consonant_y {
        format!("{}ies", &w[..w.len() - 1])
    } else if ["s", "x", "z", "ch", "sh"].iter().any(|s| w.ends_with(s)) {
        format!("{w}es")
    } else {
        format!("{w}s")
    }
}

/// Pluralizes the last word of a label.
pub fn pluralize(label: &str) -> String {
    let label = normalize_phrase(label);
    match label.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", pluralize_word(last)),
        None => pluralize_word(&label),
    }
}

pub fn multi_instance_instruction(label: &str, k: usize, direction: Direction, task: Task) -> String {
    let noun = if k == 1 { normalize_phrase(label) } else { pluralize(label) };
    match task {
        Task::Remove => format!("remove {} {noun} from the {}", number_word(k), direction.name()),
        Task::Add => format!("add {} {noun}", number_word(k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_templates() {
        assert_eq!(simple_instruction("cat", Task::Remove), "remove the cat");
        assert_eq!(simple_instruction("apple", Task::Add), "add an apple");
        assert_eq!(simple_instruction("dog", Task::Add), "add a dog");
        assert_eq!(simple_instruction("Umbrella", Task::Add), "add an umbrella");
    }

    #[test]
    fn attribute_templates() {
        assert_eq!(attribute_instruction("dark brown cow", "cow", Task::Remove), "remove the dark brown cow");
        assert_eq!(attribute_instruction("wooden vintage car", "car", Task::Add), "add a wooden vintage car");
        assert_eq!(attribute_instruction("a brown cow", "cow", Task::Remove), "remove the brown cow");
        assert_eq!(attribute_instruction("a brown cow", "cow", Task::Add), "add a brown cow");
        assert_eq!(attribute_instruction("the old oven", "oven", Task::Add), "add an old oven");
        assert_eq!(attribute_instruction("", "cat", Task::Remove), "remove the cat");
        assert_eq!(attribute_instruction("  ", "apple", Task::Add), "add an apple");
        assert_eq!(attribute_instruction("Black cat near Big Ben.", "cat", Task::Remove), "remove the black cat near Big Ben");
    }

    #[test]
    fn spatial_templates() {
        assert_eq!(
            spatial_instruction("person", Predicate::Right, "person in blue shirt", Task::Remove).unwrap(),
            "remove the person to the right of the person in blue shirt"
        );
        assert_eq!(
            spatial_instruction("bowl", Predicate::Left, "potted plant", Task::Add).unwrap(),
            "add a bowl to the left of the potted plant"
        );
        assert_eq!(
            spatial_instruction("cat", Predicate::Front, "a red sofa", Task::Remove).unwrap(),
            "remove the cat in front of the red sofa"
        );
        assert!(spatial_instruction("cat", Predicate::Above, "", Task::Remove).is_none());
        for p in [Predicate::Left, Predicate::Above, Predicate::Front] {
            assert_eq!(p.flipped().flipped(), p);
            assert_ne!(p.flipped(), p);
        }
    }

    #[test]
    fn multi_templates() {
        assert_eq!(multi_instance_instruction("car", 2, Direction::Right, Task::Remove), "remove two cars from the right");
        assert_eq!(multi_instance_instruction("apple", 2, Direction::Left, Task::Add), "add two apples");
        assert_eq!(multi_instance_instruction("car", 1, Direction::Top, Task::Remove), "remove one car from the top");
        assert_eq!(multi_instance_instruction("person", 3, Direction::Bottom, Task::Add), "add three people");
        assert_eq!(multi_instance_instruction("bus", 12, Direction::Left, Task::Add), "add 12 buses");
    }

    #[test]
    fn plurals() {
        for (s, p) in [
            ("box", "boxes"),
            ("bench", "benches"),
            ("dish", "dishes"),
            ("berry", "berries"),
            ("toy", "toys"),
            ("knife", "knives"),
            ("sheep", "sheep"),
            ("potted plant", "potted plants"),
            ("wine glass", "wine glasses"),
        ] {
            assert_eq!(pluralize(s), p);
        }
    }
}
