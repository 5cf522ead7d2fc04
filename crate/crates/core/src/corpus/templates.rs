//! Report sentence templates. Visible (H&E) slots are encoded into tile
//! features and described in plain vocabulary; hidden slots never reach the
//! image side and are rendered with words that appear in no H&E sentence.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentenceTag {
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "NON_HE")]
    NonHe,
}

/// One categorical attribute and the sentence that reports it. `{}` in the
/// template is replaced by the value phrase.
#[derive(Debug)]
pub struct Slot {
    pub name: &'static str,
    pub template: &'static str,
    pub values: &'static [&'static str],
}

impl Slot {
    pub fn render(&self, value: usize) -> String {
        self.template.replace("{}", self.values[value])
    }
}

pub const VISIBLE_SLOTS: [Slot; 6] = [
    Slot {
        name: "architecture",
        template: "the lesion has a {} architecture",
        values: &["compound", "junctional", "dermal", "lentiginous"],
    },
    Slot {
        name: "nesting",
        template: "melanocytes are arranged in {}",
        values: &["regular nests", "irregular nests", "single cells", "confluent sheets"],
    },
    Slot {
        name: "atypia",
        template: "cytological atypia is {}",
        values: &["absent", "slight", "marked", "severe"],
    },
    Slot {
        name: "pigmentation",
        template: "pigmentation is {}",
        values: &["sparse", "patchy", "heavy"],
    },
    Slot {
        name: "margins",
        template: "the excision margins are {}",
        values: &["free", "involved"],
    },
    Slot {
        name: "maturation",
        template: "maturation with depth is {}",
        values: &["present", "lacking"],
    },
];

pub const HIDDEN_SLOTS: [Slot; 5] = [
    Slot {
        name: "history",
        template: "the patient reports {}",
        values: &["recent growth", "itching", "bleeding", "no complaints"],
    },
    Slot {
        name: "immunostain",
        template: "immunohistochemistry shows {}",
        values: &["sox10 positivity", "prame negativity", "elevated ki67"],
    },
    Slot {
        name: "molecular",
        template: "molecular testing revealed {}",
        values: &["a braf mutation", "an nras mutation", "no alteration"],
    },
    Slot {
        name: "prior",
        template: "a previous excision was {} elsewhere",
        values: &["complete", "incomplete"],
    },
    Slot {
        name: "advice",
        template: "re-excision is {}",
        values: &["advised", "not advised"],
    },
];

fn words_of(slots: &[Slot]) -> BTreeSet<&'static str> {
    let mut out = BTreeSet::new();
    for slot in slots {
        out.extend(slot.template.split_whitespace().filter(|w| *w != "{}"));
        for v in slot.values {
            out.extend(v.split_whitespace());
        }
    }
    out
}

/// Words that can only come from hidden-attribute sentences.
pub fn marker_words() -> BTreeSet<&'static str> {
    let he = words_of(&VISIBLE_SLOTS);
    words_of(&HIDDEN_SLOTS)
        .into_iter()
        .filter(|w| !he.contains(w))
        .collect()
}

/// Every word any template can produce.
pub fn all_words() -> BTreeSet<&'static str> {
    let mut w = words_of(&VISIBLE_SLOTS);
    w.extend(words_of(&HIDDEN_SLOTS));
    w
}
