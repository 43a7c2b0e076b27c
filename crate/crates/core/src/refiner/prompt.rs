use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::retrieval::ReferenceSet;
use crate::trajstore::{DisasterLevel, LevelLabels};

/// Seeded lookup table of one soft-prompt vector per disaster ordinal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisasterEncoder {
    pub table: Matrix,
}

impl DisasterEncoder {
    pub fn new(levels: usize, dim: usize, seed: u64) -> Result<Self> {
        if levels == 0 || dim == 0 {
            return Err(Error::invalid("disaster encoder needs at least one level and dimension"));
        }
        let mut rng = crate::derive_rng(seed, &["disaster-encoder"]);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite");
        let table = Matrix::from_vec(levels, dim, (0..levels * dim).map(|_| normal.sample(&mut rng)).collect());
        for a in 0..levels {
            for b in a + 1..levels {
                if table.row(a) == table.row(b) {
                    return Err(Error::Numerical("disaster encoder rows coincide".into()));
                }
            }
        }
        Ok(Self { table })
    }

    pub fn levels(&self) -> usize {
        self.table.rows()
    }

    pub fn encode(&self, level: DisasterLevel) -> Result<&[f64]> {
        if level.ordinal() >= self.levels() {
            return Err(Error::invalid(format!(
                "disaster level {level} outside 0..{}",
                self.levels()
            )));
        }
        Ok(self.table.row(level.ordinal()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum SlotRole {
    Query { step: usize },
    Predicted,
    ReferenceStep { reference: usize, step: usize },
    ReferenceNext { reference: usize },
    /// `class` is `None` for the immobility candidate.
    Candidate { class: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSlot {
    pub slot_id: usize,
    pub role: SlotRole,
    pub vector: Vec<f64>,
}

/// Structured facts the prompt text is rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptFacts {
    pub label: String,
    pub predicted_class: usize,
    /// Next class of each reference, in prompt order.
    pub reference_next: Vec<usize>,
    pub intentions: usize,
    pub immobility_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub id: String,
    pub level: DisasterLevel,
    pub text: String,
    pub slots: Vec<EmbeddingSlot>,
    /// `Z^d`; absent when the soft prompt is disabled.
    pub disaster_prefix: Option<Vec<f64>>,
    pub facts: PromptFacts,
}

pub struct PromptInputs<'a> {
    pub id: &'a str,
    pub level: DisasterLevel,
    pub labels: &'a LevelLabels,
    /// `Y_1 … Y_{T-1}`.
    pub query: &'a [Vec<f64>],
    /// `Ŷ_T` and its class.
    pub predicted: &'a [f64],
    pub predicted_class: usize,
    pub references: &'a ReferenceSet,
    /// Language anchor per class; with immobility the last row is its anchor.
    pub anchors: &'a Matrix,
    pub intentions: usize,
    pub immobility: bool,
    pub prefix: Option<&'a [f64]>,
}

const SYSTEM_PROMPT: &str = "You are now a discriminator of predicted human intentions in disaster scenarios, tasked with determining whether the given user's possible next intention is right based on the user's previous intention sequence, disaster level, a possible next intention and other reference intention sequences. Note that:
1. The intentions are token embeddings, that contain the intention information. It is wrapped in the \"``\", which means that any token in two \"`\" refers to the intention embedding rather than the text token.
2. Disaster level is divided into:
(1)\"no disaster\": Indicates that there is no effect on human mobility.
(2)\"minor disaster\": An individual's daily travel plans may not be affected much, but alternatives should be considered.
(3)\"general disaster\": Human mobility may be affected by disasters, causing certain activities to be adjusted or canceled for safety reasons.
(4)\"severe disaster\": Human movement will be greatly affected by the disaster, and the probability of staying still will increase.
3. Reference intention sequences are selected sequences from an intention sequence RAG. They are the most similar sequences to the given intention sequence. You can refer to these sequences to generate your answers but don't copy them exactly.
4. The given possible intention is not necessarily accurate, you need to judge whether it needs to change.
5. Both the user's previous intention sequence and the other reference intention sequences are in the format of a list like [`intention embedding 1`, `intention embedding 2`...].
";

const COT_PROMPT: &str = "Let's think step by step. You need to answer each of the three questions below, and if the answer to the first question is \"yes\", the following questions will be output as \"None\":
(1) Is the given possible next intent embedding right?
(2) If the answer to the previous question is \"yes\", this answer is set to \"None\". If the answer to the previous question is \"no\", please answer: Given the current disaster level, should the next intention be \"stay still\"?
(3) If the answer to the previous question is \"yes\", this answer is set to \"stay still\". If the answer to the previous question is \"no\", you need to give the index of the correct next intention embedding.
";

const ANSWER_PROMPT: &str = "Now give your answer. You should output the answer in a [\"no\", \"no\", \"2\"] format, nothing else.
Your answer:";

/// Placeholder for slot `id` inside the prompt text.
pub fn slot_marker(id: usize) -> String {
    format!("`e{id}`")
}

struct Builder {
    slots: Vec<EmbeddingSlot>,
}

impl Builder {
    fn push(&mut self, role: SlotRole, vector: Vec<f64>) -> String {
        let id = self.slots.len();
        self.slots.push(EmbeddingSlot {
            slot_id: id,
            role,
            vector,
        });
        slot_marker(id)
    }
}

pub fn build_prompt(inputs: &PromptInputs<'_>) -> Result<PromptBundle> {
    let label = inputs.labels.label(inputs.level)?.to_string();
    let classes = inputs.intentions + usize::from(inputs.immobility);
    if inputs.anchors.rows() != classes {
        return Err(Error::Dimension {
            expected: classes,
            actual: inputs.anchors.rows(),
        });
    }
    if inputs.predicted_class >= classes {
        return Err(Error::invalid(format!("predicted class {} outside 0..{classes}", inputs.predicted_class)));
    }
    let anchor = |c: usize| inputs.anchors.row(c).to_vec();
    let mut b = Builder { slots: Vec::new() };
    let mut text = String::from(SYSTEM_PROMPT);

    let query: Vec<String> = inputs
        .query
        .iter()
        .enumerate()
        .map(|(step, v)| b.push(SlotRole::Query { step }, v.clone()))
        .collect();
    let predicted = b.push(SlotRole::Predicted, inputs.predicted.to_vec());
    writeln!(text, "\nDisaster Level: {label}.").unwrap();
    writeln!(text, "Intention embedding sequence: [{}].", query.join(", ")).unwrap();
    writeln!(text, "The given possible next intention embedding for this sequence is {predicted}.").unwrap();

    let refs: Vec<_> = inputs.references.iter().collect();
    if refs.is_empty() {
        writeln!(text, "\nThere are 0 reference sequences for this sequence.").unwrap();
    } else {
        writeln!(
            text,
            "\nYou need to refer to the following sequence to distinguish whether the given possible next intention embedding is right:"
        )
        .unwrap();
    }
    let mut reference_next = Vec::with_capacity(refs.len());
    for (r, reference) in refs.iter().enumerate() {
        let steps: Vec<String> = reference
            .history
            .iter()
            .enumerate()
            .map(|(step, &c)| b.push(SlotRole::ReferenceStep { reference: r, step }, anchor(c)))
            .collect();
        let next = b.push(SlotRole::ReferenceNext { reference: r }, anchor(reference.next));
        reference_next.push(reference.next);
        let ref_label = inputs.labels.label(reference.tag.level())?;
        writeln!(text, "Reference Sequence {}:", r + 1).unwrap();
        writeln!(text, "Disaster Level: {ref_label}.").unwrap();
        writeln!(text, "Intention embedding sequence: [{}].", steps.join(", ")).unwrap();
        writeln!(text, "The given possible next intention embedding for this sequence is {next}.").unwrap();
    }

    text.push('\n');
    text.push_str(COT_PROMPT);
    let mut candidates = Vec::with_capacity(classes);
    for c in 0..inputs.intentions {
        let m = b.push(SlotRole::Candidate { class: Some(c) }, anchor(c));
        candidates.push(format!("{c}: {m}"));
    }
    if inputs.immobility {
        let m = b.push(SlotRole::Candidate { class: None }, anchor(inputs.intentions));
        candidates.push(format!("\"stay still\": {m}"));
    }
    writeln!(
        text,
        "The indexes and embeddings of the intentions you can choose from are {}.",
        candidates.join(", ")
    )
    .unwrap();
    text.push('\n');
    text.push_str(ANSWER_PROMPT);

    Ok(PromptBundle {
        id: inputs.id.to_string(),
        level: inputs.level,
        text,
        slots: b.slots,
        disaster_prefix: inputs.prefix.map(<[f64]>::to_vec),
        facts: PromptFacts {
            label,
            predicted_class: inputs.predicted_class,
            reference_next,
            intentions: inputs.intentions,
            immobility_class: inputs.immobility.then_some(inputs.intentions),
        },
    })
}

impl PromptBundle {
    /// `Concat(Z^d, Z^h)`: the prefix row (if any) followed by every slot vector.
    pub fn assembled_input(&self) -> Vec<Vec<f64>> {
        self.disaster_prefix
            .iter()
            .cloned()
            .chain(self.slots.iter().map(|s| s.vector.clone()))
            .collect()
    }

    /// Prompt text with every slot marker replaced by its vector as a list of
    /// 16-digit hexadecimal IEEE-754 bit patterns.
    pub fn wire_text(&self) -> String {
        let mut out = self.text.clone();
        // Replace from the highest id so `e1` never matches inside `e12`.
        for slot in self.slots.iter().rev() {
            let hex: Vec<String> = slot.vector.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
            out = out.replace(&slot_marker(slot.slot_id), &format!("`[{}]`", hex.join(",")));
        }
        out
    }

    /// Number of "``"-wrapped markers in the text.
    pub fn marker_count(&self) -> usize {
        self.text.matches("`e").count()
    }
}
