#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub const VARIANTS: [&str; 8] =
    ["zs-beta", "zs-cot", "guided-cot", "ablation:a1", "ablation:a2", "ablation:a3", "ablation:a4", "ablation:a5"];

const TOPICS: [&str; 20] = [
    "harbour ferry schedule",
    "community bakery opening",
    "chess tournament results",
    "river cleanup volunteers",
    "library renovation plans",
    "school robotics club",
    "winter coat donation",
    "museum night tours",
    "city council budget",
    "marathon road closures",
    "farmers market prices",
    "solar panel rebates",
    "choir concert tickets",
    "bridge repair delays",
    "garden plot lottery",
    "film festival lineup",
    "bus route changes",
    "hospital parking fees",
    "stadium naming vote",
    "weekend storm warning",
];

pub fn post_id(i: usize) -> String {
    format!("p{:02}", i + 1)
}

/// Every third post (and the last) carries the positive gold label.
pub fn gold_positive(i: usize) -> bool {
    i.is_multiple_of(3) || i == 19
}

fn reply(model: &str, variant: &str, i: usize, run: usize, label: &str) -> String {
    let topic = TOPICS[i];
    let tone = ["measured", "brief", "detailed", "cautious", "direct"][(i + run) % 5];
    let reason = if label == "Yes" {
        format!("uses a stereotype about {topic} to demean a group")
    } else {
        format!("discusses {topic} without targeting any group")
    };
    let thinking = if model == "beta" { format!("<think>weighing the {topic} post, pass {run}</think>\n") } else { String::new() };
    format!(
        "{thinking}Summary: {model} gives a {tone} reading under {variant}; the post {reason}.\n\
         Notes: keywords {topic} {variant} {model} item{i}.\n\
         Antisemitic: {label}"
    )
}

/// Scripted replies for one model. `skill` shifts which posts it gets wrong.
fn script(model: &str, skill: usize) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    for (vi, variant) in VARIANTS.iter().enumerate() {
        for i in 0..20 {
            let truth = gold_positive(i);
            // A few deterministic mistakes that differ by model and variant.
            let wrong = (i * 7 + vi * 3 + skill).is_multiple_of(11);
            let label = |flip: bool| if truth ^ flip { "Yes" } else { "No" };
            let mut replies: Vec<Value> = (0..3).map(|r| Value::String(reply(model, variant, i, r, label(wrong)))).collect();
            // Dissenting minority run for self-consistency.
            replies.push(Value::String(reply(model, variant, i, 3, label(!wrong))));
            replies.push(Value::String(reply(model, variant, i, 4, label(wrong))));

            if model == "beta" && *variant == "zs-beta" && i == 2 {
                replies = vec![Value::String("I cannot classify content like this.".into())];
            }
            if model == "alpha" && *variant == "zs-cot" && i == 4 {
                replies = vec![json!({"text": "Summary: the post is long and the reasoning keeps", "finish_reason": "length"})];
            }
            if model == "beta" && *variant == "guided-cot" && i == 6 {
                replies[0] = Value::String("Summary: unclear.\nAntisemitic: Maybe".into());
            }
            if model == "alpha" && *variant == "zs-beta" && i == 8 {
                replies = vec![
                    Value::String(reply(model, variant, i, 0, "Yes")),
                    Value::String(reply(model, variant, i, 1, "No")),
                ];
            }
            out.insert(format!("{variant}/{}", post_id(i)), Value::Array(replies));
        }
    }
    out
}

/// Writes corpus, mock scripts and config into `dir`; returns the config path.
pub fn write_e2e_fixture(dir: &Path) -> PathBuf {
    let mut corpus = String::from("id,text,label\n");
    for i in 0..20 {
        let label = if gold_positive(i) { "1" } else { "0" };
        corpus.push_str(&format!("{},\"Synthetic post about the {} in town, number {}.\",{label}\n", post_id(i), TOPICS[i], i + 1));
    }
    std::fs::write(dir.join("posts.csv"), corpus).unwrap();
    for (model, skill) in [("alpha", 1), ("beta", 5)] {
        let body = serde_json::to_string_pretty(&script(model, skill)).unwrap();
        std::fs::write(dir.join(format!("mock_{model}.json")), body).unwrap();
    }
    let variants: Vec<String> = VARIANTS.iter().map(|v| format!("\"{v}\"")).collect();
    let config = format!(
        r#"corpus = "posts.csv"
out_dir = "out"
seed = 11
variants = [{}]

[[models]]
name = "alpha"
endpoint_url = "mock:mock_alpha.json"

[[models]]
name = "beta"
endpoint_url = "mock:mock_beta.json"
is_reasoning = true

[[decodes]]
mode = "greedy"

[[decodes]]
mode = "self_consistency"
num_runs = 30

[run]
parallel = 4
max_retries = 0
backoff_ms = 1

[analysis]
target_dim = 5
k = 3
transition_base = "zs-beta"
heatmap_max_rows = 12
heatmap_image = true
trust_k = 2

[embedding]
provider = "hashing"
dimension = 64
"#,
        variants.join(", ")
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    path
}
