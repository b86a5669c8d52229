//! Policy text and prompt rendering for every classification variant.
//!
//! Each variant renders into an optional system message and a user message.
//! The user message always ends with the two-line output directive that the
//! response parser keys on.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Post;

const DEFAULT_DEFINITION: &str = include_str!("../assets/ihra_definition.txt");
const DEFAULT_FULL_POLICY: &str = include_str!("../assets/ihra_full_policy.txt");

/// The core sentence shared by both policy forms.
pub const CORE_DEFINITION: &str = "Antisemitism is a certain perception of Jews, which may be expressed as hatred toward Jews.";

const POST_SLOT: &str = "{{post}}";

const PLAIN_INSTRUCTION: &str = "Classify the following Twitter post as antisemitic:";
const POLICY_INSTRUCTION: &str = "Classify the following Twitter post as antisemitic based on IHRA's definitions:";

const DIRECTIVE_LEAD: &str = "## At the very end of your response, add following:";
const COT_DIRECTIVE_LEAD: &str = "## Let's think step by step. And at the very end of your response, add following:";
const GUIDED_LEAD: &str = "## Let's analyze and think step by step:";
const GUIDED_DIRECTIVE_LEAD: &str = "## And at the very end of your response, add following:";

/// The two-line output directive every user message ends with.
pub const OUTPUT_DIRECTIVE: &str = "- First line must give a summary of your classified decision \"Summary:\"\n- Second line must give \"Antisemitic:\" (Yes|No)";

/// The five Guided-CoT thoughts, in order.
pub const GUIDED_THOUGHTS: [&str; 5] = [
    "Break the post into chunks and explain what is being conveyed",
    "Identify whether OP's post is sarcasm, criticism, quoted statements, news, coded language, ambiguous phrasing, or reporting etc.?",
    "Check if OP is calling out to promote antisemitism or using statements/narrative to spread awareness about antisemitism",
    "Assess whether the post potentially aligns with the IHRA definition of antisemitism and its contemporary examples",
    "Based on your analysis, decide whether OP's stance is favorable to the Jews community or not?",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("ablation must exclude a thought in 1..=5, got {0}")]
    InvalidThought(u8),
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
    #[error("post {0:?} has empty text")]
    EmptyPost(String),
    #[error("failed to read policy asset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("policy asset {0} is empty")]
    EmptyPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyText {
    /// The core IHRA definition only, as sent in the ZS-alpha system message.
    pub definition_only: String,
    /// Definition, explanatory note and the eleven contemporary examples.
    pub full_policy: String,
}

impl Default for PolicyText {
    fn default() -> Self {
        PolicyText {
            definition_only: DEFAULT_DEFINITION.trim().to_owned(),
            full_policy: DEFAULT_FULL_POLICY.trim().to_owned(),
        }
    }
}

impl PolicyText {
    /// Loads a policy pair from two UTF-8 text files.
    pub fn from_files(definition: &Path, full_policy: &Path) -> Result<Self, PromptError> {
        let read = |p: &Path| -> Result<String, PromptError> {
            let text = fs::read_to_string(p)
                .map_err(|source| PromptError::Io { path: p.display().to_string(), source })?;
            let text = text.trim().to_owned();
            if text.is_empty() {
                return Err(PromptError::EmptyPolicy(p.display().to_string()));
            }
            Ok(text)
        };
        Ok(PolicyText { definition_only: read(definition)?, full_policy: read(full_policy)? })
    }

    /// The bulleted contemporary examples contained in the full policy.
    pub fn example_bullets(&self) -> Vec<&str> {
        self.full_policy
            .lines()
            .filter_map(|l| l.trim_start().strip_prefix("* "))
            .collect()
    }
}

/// Identifies one prompting technique. `Ablation(n)` is Guided-CoT with
/// thought `n` (1-based) removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptVariant {
    ZsAs,
    ZsAlpha,
    ZsBeta,
    ZsCot,
    GuidedCot,
    Ablation(u8),
}

impl PromptVariant {
    pub fn ablation(excluded_thought: u8) -> Result<Self, PromptError> {
        if (1..=5).contains(&excluded_thought) {
            Ok(PromptVariant::Ablation(excluded_thought))
        } else {
            Err(PromptError::InvalidThought(excluded_thought))
        }
    }

    pub fn excluded_thought(self) -> Option<u8> {
        match self {
            PromptVariant::Ablation(n) => Some(n),
            _ => None,
        }
    }

    pub fn has_system_message(self) -> bool {
        !matches!(self, PromptVariant::ZsAs)
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::ZsAs => f.write_str("zs-as"),
            PromptVariant::ZsAlpha => f.write_str("zs-alpha"),
            PromptVariant::ZsBeta => f.write_str("zs-beta"),
            PromptVariant::ZsCot => f.write_str("zs-cot"),
            PromptVariant::GuidedCot => f.write_str("guided-cot"),
            PromptVariant::Ablation(n) => write!(f, "ablation:a{n}"),
        }
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "zs-as" => Ok(PromptVariant::ZsAs),
            "zs-alpha" => Ok(PromptVariant::ZsAlpha),
            "zs-beta" => Ok(PromptVariant::ZsBeta),
            "zs-cot" => Ok(PromptVariant::ZsCot),
            "guided-cot" => Ok(PromptVariant::GuidedCot),
            other => {
                let n = other
                    .strip_prefix("ablation:a")
                    .and_then(|d| d.parse::<u8>().ok())
                    .ok_or_else(|| PromptError::UnknownVariant(s.to_owned()))?;
                PromptVariant::ablation(n)
            }
        }
    }
}

impl Serialize for PromptVariant {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptVariant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub system_message: Option<String>,
    pub user_message: String,
    pub variant: PromptVariant,
}

impl RenderedPrompt {
    /// Total characters sent to the model, recorded in run metadata.
    pub fn char_len(&self) -> usize {
        self.system_message.as_deref().map_or(0, |s| s.chars().count()) + self.user_message.chars().count()
    }
}

fn numbered_thoughts(excluded: Option<u8>) -> String {
    GUIDED_THOUGHTS
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i as u8 + 1) != excluded)
        .enumerate()
        .map(|(n, (_, t))| format!("{}. {t}", n + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn user_template(variant: PromptVariant) -> String {
    match variant {
        PromptVariant::ZsAs => {
            format!("{PLAIN_INSTRUCTION}\n\n{POST_SLOT}\n\n{DIRECTIVE_LEAD}\n{OUTPUT_DIRECTIVE}")
        }
        PromptVariant::ZsAlpha | PromptVariant::ZsBeta => {
            format!("{POLICY_INSTRUCTION}\n\n{POST_SLOT}\n\n{DIRECTIVE_LEAD}\n{OUTPUT_DIRECTIVE}")
        }
        PromptVariant::ZsCot => {
            format!("{POLICY_INSTRUCTION}\n\n{POST_SLOT}\n\n{COT_DIRECTIVE_LEAD}\n{OUTPUT_DIRECTIVE}")
        }
        PromptVariant::GuidedCot | PromptVariant::Ablation(_) => format!(
            "{POLICY_INSTRUCTION}\n\n{POST_SLOT}\n\n{GUIDED_LEAD}\n{}\n\n{GUIDED_DIRECTIVE_LEAD}\n{OUTPUT_DIRECTIVE}",
            numbered_thoughts(variant.excluded_thought())
        ),
    }
}

pub fn render(variant: PromptVariant, post: &Post, policy: &PolicyText) -> Result<RenderedPrompt, PromptError> {
    if let PromptVariant::Ablation(n) = variant {
        if !(1..=5).contains(&n) {
            return Err(PromptError::InvalidThought(n));
        }
    }
    if post.text.trim().is_empty() {
        return Err(PromptError::EmptyPost(post.post_id.clone()));
    }
    let system_message = match variant {
        PromptVariant::ZsAs => None,
        PromptVariant::ZsAlpha => Some(policy.definition_only.clone()),
        _ => Some(policy.full_policy.clone()),
    };
    // Single substitution: a post that itself contains the slot marker is left intact.
    let user_message = user_template(variant).replacen(POST_SLOT, &post.text, 1);
    Ok(RenderedPrompt { system_message, user_message, variant })
}

/// The five single-thought ablations A1..A5.
pub fn list_ablation_suite() -> Vec<PromptVariant> {
    (1..=5).map(PromptVariant::Ablation).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    fn post(text: &str) -> Post {
        Post { post_id: "p".into(), text: text.into(), gold_label: Label::NonAntisemitic }
    }

    fn numbered_steps(msg: &str) -> Vec<String> {
        msg.lines()
            .filter_map(|l| {
                let (num, rest) = l.split_once(". ")?;
                num.parse::<u8>().ok().map(|_| rest.to_owned())
            })
            .collect()
    }

    #[test]
    fn zs_cot_contains_trigger_phrase() {
        let r = render(PromptVariant::ZsCot, &post("hello"), &PolicyText::default()).unwrap();
        assert!(r.user_message.contains("Let's think step by step"));
    }

    #[test]
    fn guided_cot_has_five_steps_and_directive() {
        let r = render(PromptVariant::GuidedCot, &post("x"), &PolicyText::default()).unwrap();
        assert_eq!(numbered_steps(&r.user_message), GUIDED_THOUGHTS);
        assert!(r.user_message.ends_with(OUTPUT_DIRECTIVE));
        assert!(r.user_message.contains("\n\nx\n\n"));
    }

    #[test]
    fn ablation_three_drops_promotion_thought_and_renumbers() {
        let r = render(PromptVariant::Ablation(3), &post("x"), &PolicyText::default()).unwrap();
        assert!(!r.user_message.contains("calling out to promote"));
        let steps = numbered_steps(&r.user_message);
        assert_eq!(steps.len(), 4);
        assert!(r.user_message.contains(&format!("3. {}", GUIDED_THOUGHTS[3])));
        assert!(r.user_message.contains(&format!("4. {}", GUIDED_THOUGHTS[4])));
        assert!(!r.user_message.contains("5. "));
    }

    #[test]
    fn invalid_ablation_rejected() {
        assert!(matches!(PromptVariant::ablation(0), Err(PromptError::InvalidThought(0))));
        assert!(matches!(
            render(PromptVariant::Ablation(6), &post("x"), &PolicyText::default()),
            Err(PromptError::InvalidThought(6))
        ));
        assert!(render(PromptVariant::ZsAs, &post("  "), &PolicyText::default()).is_err());
    }

    #[test]
    fn system_messages_per_variant() {
        let policy = PolicyText::default();
        let p = post("x");
        assert!(render(PromptVariant::ZsAs, &p, &policy).unwrap().system_message.is_none());
        assert_eq!(
            render(PromptVariant::ZsAlpha, &p, &policy).unwrap().system_message.as_deref(),
            Some(policy.definition_only.as_str())
        );
        for v in [PromptVariant::ZsBeta, PromptVariant::ZsCot, PromptVariant::GuidedCot, PromptVariant::Ablation(2)] {
            assert_eq!(render(v, &p, &policy).unwrap().system_message.as_deref(), Some(policy.full_policy.as_str()));
        }
    }

    #[test]
    fn ablation_suite_enumerates_each_thought_once() {
        let suite = list_ablation_suite();
        let excluded: Vec<u8> = suite.iter().filter_map(|v| v.excluded_thought()).collect();
        assert_eq!(excluded, [1, 2, 3, 4, 5]);

        let policy = PolicyText::default();
        let a1 = render(suite[0], &post("x"), &policy).unwrap();
        assert_eq!(numbered_steps(&a1.user_message), GUIDED_THOUGHTS[1..]);
        let a5 = render(suite[4], &post("x"), &policy).unwrap();
        assert!(!a5.user_message.contains("stance"));
    }

    #[test]
    fn variant_ids_round_trip_through_cli_form() {
        for s in ["zs-as", "zs-alpha", "zs-beta", "zs-cot", "guided-cot", "ablation:a1", "ablation:a5"] {
            let v: PromptVariant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert!("ablation:a9".parse::<PromptVariant>().is_err());
        assert!("few-shot".parse::<PromptVariant>().is_err());
        assert_eq!("ZS_BETA".parse::<PromptVariant>().unwrap(), PromptVariant::ZsBeta);
    }

    #[test]
    fn policy_contents() {
        let policy = PolicyText::default();
        assert!(policy.definition_only.contains(CORE_DEFINITION));
        assert!(policy.full_policy.contains(CORE_DEFINITION));
        let bullets = policy.example_bullets();
        assert_eq!(bullets.len(), 11);
        for b in &bullets {
            assert!(!policy.definition_only.contains(b));
        }
    }

    #[test]
    fn post_containing_slot_marker_is_not_resubstituted() {
        let r = render(PromptVariant::ZsBeta, &post("a {{post}} b"), &PolicyText::default()).unwrap();
        assert!(r.user_message.contains("a {{post}} b"));
    }
}
