//! Closed toy language: activity names, task names, query templates and the
//! fixed prompts. Everything the model can read or say comes from here.

use serde::{Deserialize, Serialize};

use crate::model::Vocabulary;

const VERBS: [&str; 8] = ["cut", "wash", "move", "open", "fold", "check", "clean", "stack"];
const ADJECTIVES: [&str; 8] = ["red", "small", "old", "green", "large", "blue", "wooden", "metal"];
const OBJECTS: [&str; 40] = [
    "onion", "cup", "box", "knife", "board", "bowl", "towel", "plate", "bottle", "spoon", "lid", "pan",
    "brush", "drawer", "shirt", "bag", "book", "pot", "glass", "jar", "rag", "tray", "bucket", "hammer",
    "screw", "wheel", "chain", "pipe", "plank", "paper", "lamp", "phone", "key", "pen", "sock", "mat",
    "rope", "fork", "kettle", "basket",
];
const PREPOSITIONS: [&str; 4] = ["on", "near", "under", "beside"];
const PLACES: [&str; 8] = ["table", "sink", "floor", "shelf", "counter", "bench", "stove", "desk"];

const TASKS: [&str; 8] = [
    "cooking dinner",
    "fixing the bike",
    "cleaning the kitchen",
    "packing a bag",
    "doing the laundry",
    "building a shelf",
    "making tea",
    "tidying the desk",
];

pub const MAX_ACTIVITIES: usize = OBJECTS.len();

/// Leading tokens of every assembled sequence.
pub const SYSTEM_PROMPT: &str = "you are a helpful video assistant";
/// Standing instruction of narration streams.
pub const NARRATION_QUERY: &str = "please narrate what i do in real time";
pub const NARRATION_PREFIX: &str = "now you";
/// Words of the per-frame baseline's prompt for the next frame.
pub const PER_FRAME_PROMPT: &str = "anything new to say about this frame";

const PAST_NONE: &str = "you have not finished anything yet";
const CURRENT_BACKGROUND: &str = "you are taking a short break";
const FUTURE_NONE: &str = "you will finish soon";

/// Name of activity `id`: "{verb} the {adjective} {object} {preposition} the {place}".
/// Objects are unique per activity, so names are too.
pub fn activity_phrase(id: usize) -> String {
    assert!(id < MAX_ACTIVITIES, "activity id {id} out of range");
    format!(
        "{} the {} {} {} the {}",
        VERBS[(id * 3) % VERBS.len()],
        ADJECTIVES[(id * 5 + 1) % ADJECTIVES.len()],
        OBJECTS[id],
        PREPOSITIONS[(id / 2) % PREPOSITIONS.len()],
        PLACES[(id * 7 + 3) % PLACES.len()],
    )
}

pub fn narration_text(activity: usize) -> String {
    format!("{NARRATION_PREFIX} {}", activity_phrase(activity))
}

pub fn task_names() -> &'static [&'static str] {
    &TASKS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tense {
    Past,
    Current,
    Future,
}

/// A query pattern with an optional `{task}` slot and a response rule
/// determined by its tense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub tense: Tense,
    pub pattern: String,
}

impl QueryTemplate {
    pub fn new(tense: Tense, pattern: &str) -> Self {
        Self { tense, pattern: pattern.to_string() }
    }

    pub fn render(&self, task: &str) -> String {
        self.pattern.replace("{task}", task)
    }
}

/// Five templates per tense.
pub fn default_templates() -> Vec<QueryTemplate> {
    use Tense::*;
    [
        (Past, "what have i done so far"),
        (Past, "what did i just finish"),
        (Past, "which step did i complete last"),
        (Past, "tell me what i finished while {task}"),
        (Past, "what was my last step in {task}"),
        (Current, "what am i doing now"),
        (Current, "what is happening right now"),
        (Current, "which step am i on"),
        (Current, "tell me my current step in {task}"),
        (Current, "what step of {task} is this"),
        (Future, "what should i do next"),
        (Future, "what comes next"),
        (Future, "which step follows"),
        (Future, "tell me the next step in {task}"),
        (Future, "what is next for {task}"),
    ]
    .into_iter()
    .map(|(t, p)| QueryTemplate::new(t, p))
    .collect()
}

pub(crate) fn past_response(finished: Option<usize>) -> String {
    match finished {
        Some(a) => format!("you just finished {}", activity_phrase(a)),
        None => PAST_NONE.to_string(),
    }
}

pub(crate) fn current_response(active: Option<usize>) -> String {
    match active {
        Some(a) => format!("right now you {}", activity_phrase(a)),
        None => CURRENT_BACKGROUND.to_string(),
    }
}

pub(crate) fn future_response(next: Option<usize>) -> String {
    match next {
        Some(a) => format!("next you will {}", activity_phrase(a)),
        None => FUTURE_NONE.to_string(),
    }
}

/// Every word that can appear in a sample or an assembled sequence.
pub fn all_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut add = |text: &str| words.extend(text.split_whitespace().map(str::to_string));
    for list in [&VERBS[..], &ADJECTIVES, &OBJECTS, &PREPOSITIONS, &PLACES, &TASKS] {
        list.iter().for_each(|w| add(w));
    }
    for text in [
        SYSTEM_PROMPT,
        NARRATION_QUERY,
        NARRATION_PREFIX,
        PER_FRAME_PROMPT,
        PAST_NONE,
        CURRENT_BACKGROUND,
        FUTURE_NONE,
        "the you just finished right now next will",
    ] {
        add(text);
    }
    for t in default_templates() {
        add(&t.pattern.replace("{task}", ""));
    }
    words.sort();
    words.dedup();
    words
}

/// The vocabulary over [`all_words`].
pub fn vocabulary(shared_stream_eos: bool) -> Vocabulary {
    Vocabulary::with_options(all_words(), shared_stream_eos)
}
