//! Template grammar turning instructions into grounded intents.
//!
//! Coverage is the fixed pattern table in [`PATTERNS`]; anything else is
//! reported as unparseable and becomes a clarification.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryStore;
use crate::model::RobotId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Pick,
    Place,
    Deliver,
    Find,
    Inspect,
    Guide,
    Status,
    PrepareScene,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedIntent {
    pub verb: Option<Verb>,
    pub object_query: Option<String>,
    /// Free-text property such as "sour" when no object is named.
    pub attribute_query: Option<String>,
    pub destination: Option<String>,
    /// Pickup location for guiding.
    pub origin: Option<String>,
    pub person: Option<String>,
    /// Robot a status or inspection request is about.
    pub subject_robot: Option<RobotId>,
    pub explicit_robot: Option<RobotId>,
}

impl GroundedIntent {
    pub fn verb(&self) -> Verb {
        self.verb.expect("grounded intents always carry a verb")
    }

    /// Verb-specific required fields.
    pub fn validate(&self) -> Result<(), GroundError> {
        let missing = |what: &str| Err(GroundError::Incomplete(what.to_owned()));
        let has_target = self.object_query.is_some() || self.attribute_query.is_some();
        match self.verb {
            None => missing("verb"),
            Some(Verb::Deliver) if self.object_query.is_none() || self.destination.is_none() => missing("object and destination"),
            Some(Verb::Guide) if self.origin.is_none() || self.destination.is_none() || self.person.is_none() => {
                missing("person, pickup and destination")
            }
            Some(Verb::Pick | Verb::Find) if !has_target => missing("object"),
            Some(Verb::Place) if !has_target || self.destination.is_none() => missing("object and destination"),
            Some(Verb::Status) if self.subject_robot.is_none() => missing("robot"),
            Some(Verb::Inspect) if self.subject_robot.is_none() && self.destination.is_none() => missing("inspection target"),
            Some(Verb::PrepareScene) if self.destination.is_none() => missing("scene"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroundError {
    #[error("instruction is empty")]
    Empty,
    #[error("no supported pattern matches `{0}`")]
    Unparseable(String),
    #[error("instruction lacks {0}")]
    Incomplete(String),
}

/// Supported forms with one example each; also rendered as the reference document.
pub const PATTERNS: &[(&str, &str, &str)] = &[
    ("guide", "receive <person> at <place> and guide them to <place>", "receive the visitor at the elevator and guide them to the meeting room"),
    ("guide", "guide <person> from <place> to <place>", "guide the visitor from the elevator to the meeting room"),
    ("deliver", "deliver|bring <object> to <place> [for <person>]", "deliver the coffee bottle to room 207"),
    ("pick", "pick [up] <object> [from <place>] [and place|put it on|in <target>]", "pick something sour from the table and place it on the plate"),
    ("place", "place|put <object> on|in <target>", "put the cup on the tray"),
    ("find", "find|locate|look for|where is <object>", "find the red mug"),
    ("status", "what is the status of <robot> | status of <robot>", "what is the status of go2"),
    ("inspect", "inspect|check <robot or place>", "inspect the corridor"),
    ("prepare_scene", "prepare <place> [with <object>]", "prepare the meeting room with the water bottle"),
];

/// Optional trailing robot binding: "..., using piper" / "... with go2".
const ROBOT_SUFFIX: &str = r"(?:,?\s+(?:using|with|by|on)\s+(?P<robot>[a-z0-9_\-]+))?";

struct Rule {
    verb: Verb,
    re: Regex,
}

fn rule(verb: Verb, body: &str) -> Rule {
    Rule { verb, re: Regex::new(&format!("^{body}{ROBOT_SUFFIX}$")).expect("grammar patterns are valid") }
}

static RULES: LazyLock<Vec<Rule>> = LazyLock::new(|| {
    let art = r"(?:(?:the|a|an)\s+)?";
    vec![
        rule(
            Verb::Guide,
            &format!(r"(?:receive|meet|greet)\s+{art}(?P<person>.+?)\s+at\s+{art}(?P<origin>.+?)\s+and\s+(?:guide|escort|lead|take)\s+(?:them|him|her)\s+to\s+{art}(?P<dest>.+?)"),
        ),
        rule(Verb::Guide, &format!(r"(?:guide|escort|lead)\s+{art}(?P<person>.+?)\s+from\s+{art}(?P<origin>.+?)\s+to\s+{art}(?P<dest>.+?)")),
        rule(Verb::Deliver, &format!(r"(?:deliver|bring)\s+{art}(?P<object>.+?)\s+to\s+{art}(?P<dest>.+?)(?:\s+for\s+{art}(?P<person>.+?))?")),
        rule(
            Verb::Pick,
            &format!(r"pick\s+(?:up\s+)?(?P<object>.+?)(?:\s+(?:from|off)\s+{art}(?P<origin>.+?))?(?:\s+and\s+(?:place|put)\s+it\s+(?:on|in|onto|into)\s+{art}(?P<dest>.+?))?"),
        ),
        rule(Verb::Place, &format!(r"(?:place|put)\s+(?P<object>.+?)\s+(?:on|in|onto|into)\s+{art}(?P<dest>.+?)")),
        rule(Verb::Find, &format!(r"(?:find|locate|look\s+for|where\s+is)\s+{art}(?P<object>.+?)")),
        rule(Verb::Status, r"(?:what\s+is|what's)\s+the\s+status\s+of\s+(?P<subject>[a-z0-9_\-]+)"),
        rule(Verb::Status, r"status\s+(?:of\s+)?(?P<subject>[a-z0-9_\-]+)"),
        rule(Verb::Inspect, &format!(r"(?:inspect|check(?:\s+on)?)\s+{art}(?P<subject>.+?)")),
        rule(Verb::PrepareScene, &format!(r"prepare\s+{art}(?P<dest>.+?)(?:\s+with\s+{art}(?P<object>.+?))?")),
    ]
});

/// Lowercase, collapse whitespace, drop a trailing period or "please".
fn normalize_text(text: &str) -> String {
    let lowered = text.trim().to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().filter(|w| *w != "please").collect();
    words.join(" ").trim_end_matches(['.', '!', '?']).trim().to_owned()
}

/// Place names become anchor keys: "Room 207" -> "room_207".
pub fn normalize_place(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join("_")
}

fn strip_article(text: &str) -> String {
    let t = text.trim();
    for a in ["the ", "a ", "an "] {
        if let Some(rest) = t.strip_prefix(a) {
            return rest.trim().to_owned();
        }
    }
    t.to_owned()
}

/// Splits "something sour" into an attribute query; named objects stay objects.
fn split_target(raw: &str) -> (Option<String>, Option<String>) {
    let t = strip_article(raw);
    for lead in ["something ", "anything ", "the thing that is ", "whatever is "] {
        if let Some(attr) = t.strip_prefix(lead) {
            return (None, Some(attr.trim().to_owned()));
        }
    }
    (Some(t), None)
}

/// Resolves a place phrase to a known anchor key when one exists.
fn resolve_place(memory: &MemoryStore, raw: &str) -> String {
    let key = normalize_place(raw);
    memory.anchor(&key).map(|a| a.name.to_lowercase()).unwrap_or(key)
}

/// Matches the instruction against the pattern table.
pub fn ground_instruction(text: &str, memory: &MemoryStore, robots: &BTreeSet<RobotId>) -> Result<GroundedIntent, GroundError> {
    let text = normalize_text(text);
    if text.is_empty() {
        return Err(GroundError::Empty);
    }
    for rule in RULES.iter() {
        let Some(caps) = rule.re.captures(&text) else { continue };
        let get = |name: &str| caps.name(name).map(|m| m.as_str().trim().to_owned()).filter(|s| !s.is_empty());
        let explicit_robot = get("robot").map(RobotId::new);
        if let Some(r) = &explicit_robot {
            // "with the water bottle" is an object, not a robot binding.
            if !robots.contains(r) {
                continue;
            }
        }
        let mut intent = GroundedIntent { verb: Some(rule.verb), explicit_robot, ..Default::default() };
        match rule.verb {
            Verb::Guide => {
                intent.person = get("person").map(|p| strip_article(&p));
                intent.origin = get("origin").map(|p| resolve_place(memory, &p));
                intent.destination = get("dest").map(|p| resolve_place(memory, &p));
            }
            Verb::Deliver => {
                intent.object_query = get("object").map(|o| strip_article(&o));
                intent.destination = get("dest").map(|p| resolve_place(memory, &p));
                intent.person = Some(get("person").map(|p| strip_article(&p)).unwrap_or_else(|| "recipient".to_owned()));
            }
            Verb::Pick | Verb::Place | Verb::Find => {
                let (object, attribute) = split_target(&get("object").unwrap_or_default());
                intent.object_query = object;
                intent.attribute_query = attribute;
                intent.origin = get("origin").map(|p| resolve_place(memory, &p));
                intent.destination = get("dest").map(|p| {
                    let key = normalize_place(&p);
                    if memory.anchor(&key).is_some() {
                        key
                    } else {
                        strip_article(&p)
                    }
                });
            }
            Verb::Status => {
                intent.subject_robot = get("subject").map(RobotId::new);
            }
            Verb::Inspect => {
                let subject = get("subject").unwrap_or_default();
                let id = RobotId::new(subject.clone());
                if robots.contains(&id) {
                    intent.subject_robot = Some(id);
                } else {
                    intent.destination = Some(resolve_place(memory, &subject));
                }
            }
            Verb::PrepareScene => {
                intent.destination = get("dest").map(|p| resolve_place(memory, &p));
                intent.object_query = get("object").map(|o| strip_article(&o));
            }
        }
        intent.validate()?;
        return Ok(intent);
    }
    Err(GroundError::Unparseable(text))
}

/// The grammar reference as plain text.
pub fn reference_text() -> String {
    let mut out = String::from("Supported instruction forms\n\n");
    for (verb, form, example) in PATTERNS {
        out.push_str(&format!("{verb:<14} {form}\n{:<14} e.g. \"{example}\"\n", ""));
    }
    out.push_str("\nAny form may end with \"using <robot>\" to bind a specific robot.\n");
    out.push_str("Place names map to anchors by lowercasing and joining words with '_'.\n");
    out.push_str("A delivery without \"for <person>\" hands over to the person labelled \"recipient\".\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::AnchorSource;
    use crate::model::Pose3;

    fn memory() -> MemoryStore {
        let mut m = MemoryStore::default();
        for (n, x) in [("room_207", 12.0), ("elevator", 20.0), ("meeting_room", 0.0), ("corridor", 6.0)] {
            m.register_anchor(n, Pose3::at(x, 0.0, 0.0), AnchorSource::User).unwrap();
        }
        m
    }

    fn robots() -> BTreeSet<RobotId> {
        ["piper", "go2", "g1"].into_iter().map(RobotId::new).collect()
    }

    fn ground(text: &str) -> GroundedIntent {
        ground_instruction(text, &memory(), &robots()).unwrap()
    }

    #[test]
    fn delivery() {
        let i = ground("Deliver the coffee bottle to Room 207");
        assert_eq!(i.verb(), Verb::Deliver);
        assert_eq!(i.object_query.as_deref(), Some("coffee bottle"));
        assert_eq!(i.destination.as_deref(), Some("room_207"));
        assert_eq!(i.person.as_deref(), Some("recipient"));
    }

    #[test]
    fn attribute_pick_and_place() {
        let i = ground("pick something sour from the table and place it on the plate");
        assert_eq!(i.verb(), Verb::Pick);
        assert_eq!(i.object_query, None);
        assert_eq!(i.attribute_query.as_deref(), Some("sour"));
        assert_eq!(i.destination.as_deref(), Some("plate"));
        assert_eq!(i.origin.as_deref(), Some("table"));
    }

    #[test]
    fn status_and_inspect() {
        let i = ground("what is the status of go2");
        assert_eq!((i.verb(), i.subject_robot), (Verb::Status, Some(RobotId::new("go2"))));
        let i = ground("inspect the corridor");
        assert_eq!((i.verb(), i.destination.as_deref()), (Verb::Inspect, Some("corridor")));
        let i = ground("check on go2");
        assert_eq!(i.subject_robot, Some(RobotId::new("go2")));
    }

    #[test]
    fn guide_forms() {
        let i = ground("receive the visitor at the elevator and guide them to the meeting room");
        assert_eq!(i.verb(), Verb::Guide);
        assert_eq!(i.person.as_deref(), Some("visitor"));
        assert_eq!(i.origin.as_deref(), Some("elevator"));
        assert_eq!(i.destination.as_deref(), Some("meeting_room"));
        assert_eq!(ground("guide the visitor from the elevator to the meeting room"), i);
    }

    #[test]
    fn explicit_robot_binding() {
        let i = ground("pick up the bottle using piper");
        assert_eq!(i.explicit_robot, Some(RobotId::new("piper")));
        assert_eq!(i.object_query.as_deref(), Some("bottle"));
        let i = ground("prepare the meeting room with the water bottle");
        assert_eq!(i.explicit_robot, None);
        assert_eq!(i.object_query.as_deref(), Some("water bottle"));
        assert_eq!(i.destination.as_deref(), Some("meeting_room"));
    }

    #[test]
    fn unsupported_text() {
        assert!(matches!(ground_instruction("sing a song", &memory(), &robots()), Err(GroundError::Unparseable(_))));
        assert_eq!(ground_instruction("  ", &memory(), &robots()), Err(GroundError::Empty));
    }

    #[test]
    fn every_documented_example_parses_to_its_verb() {
        for (verb, _, example) in PATTERNS {
            let i = ground(example);
            let got = serde_json::to_value(i.verb()).unwrap();
            assert_eq!(got.as_str().unwrap(), *verb, "{example}");
        }
    }
}
