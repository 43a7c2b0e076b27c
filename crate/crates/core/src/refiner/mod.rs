//! Prompt assembly, answer parsing and refinement backends.
//!
//! A prompt carries the query's intention embeddings, the predicted next
//! intention, retrieved reference sequences and every candidate intention.
//! A backend answers with a three-part list:
//!
//! ```
//! use intentmob::refiner::{parse_answer, Correction};
//!
//! let d = parse_answer(r#"["no", "no", "2"]"#, 8, true).unwrap();
//! assert_eq!(d.correction, Correction::Class(2));
//! assert!(parse_answer(r#"["yes", "no", "2"]"#, 8, true).is_err());
//! ```

mod answer;
mod backend;
mod prompt;

use serde::{Deserialize, Serialize};

pub use answer::{parse_answer, Correction, RefinementDecision};
pub use backend::{
    HttpBackend, RefinerBackend, StubBackend, StubRules, Transport, UreqTransport, WireRequest,
    WireResponse, WireSlot,
};
pub use prompt::{
    build_prompt, slot_marker, DisasterEncoder, EmbeddingSlot, PromptBundle, PromptFacts,
    PromptInputs, SlotRole,
};

use crate::error::{Error, Result};
use crate::intention::IntentionSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    /// Last answer text received, if any.
    pub raw_answer: Option<String>,
    pub retries: u32,
    /// No parseable answer arrived; the prediction was kept.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub id: String,
    pub predicted_class: usize,
    pub class: usize,
    /// `X̂_T`: the intention vector of `class`.
    pub vector: Vec<f64>,
    pub decision: Option<RefinementDecision>,
    pub provenance: Provenance,
}

fn apply(space: &IntentionSpace, predicted: usize, decision: &RefinementDecision) -> Result<usize> {
    match decision.correction {
        Correction::Keep => Ok(predicted),
        Correction::Class(c) => Ok(c),
        Correction::StayStill => space
            .immobility_class()
            .ok_or_else(|| Error::Answer("\"stay still\" without an immobility class".into())),
    }
}

/// Asks `backend` about `prompt` and applies the answer.
///
/// Transport failures and unparseable answers are retried up to
/// `backend.retries()` times. If every attempt failed in transport the
/// error is returned; if any answer arrived but none parsed, the prediction
/// is kept and the result is flagged as a fallback.
pub fn refine(backend: &dyn RefinerBackend, prompt: &PromptBundle, space: &IntentionSpace) -> Result<Refinement> {
    let predicted = prompt.facts.predicted_class;
    let stay = space.immobility_class().is_some();
    let mut raw_answer = None;
    let mut last_error = None;
    for attempt in 0..=backend.retries() {
        match backend.answer(prompt) {
            Ok(text) => {
                match parse_answer(&text, space.intention_count(), stay) {
                    Ok(decision) => {
                        let class = apply(space, predicted, &decision)?;
                        return Ok(Refinement {
                            id: prompt.id.clone(),
                            predicted_class: predicted,
                            class,
                            vector: space.class_vector(class)?,
                            decision: Some(decision),
                            provenance: Provenance {
                                backend: backend.id().to_string(),
                                raw_answer: Some(text),
                                retries: attempt,
                                fallback: false,
                            },
                        });
                    }
                    Err(e) => {
                        raw_answer = Some(text);
                        last_error = Some(e);
                    }
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    let retries = backend.retries();
    if raw_answer.is_none() {
        let message = last_error.map_or_else(String::new, |e| e.to_string());
        return Err(Error::Backend {
            backend: backend.id().to_string(),
            retries,
            message,
        });
    }
    Ok(Refinement {
        id: prompt.id.clone(),
        predicted_class: predicted,
        class: predicted,
        vector: space.class_vector(predicted)?,
        decision: None,
        provenance: Provenance {
            backend: backend.id().to_string(),
            raw_answer,
            retries,
            fallback: true,
        },
    })
}

/// The refinement-disabled path: the prediction passes through unchanged.
pub fn identity_refinement(prompt: &PromptBundle, space: &IntentionSpace) -> Result<Refinement> {
    let class = prompt.facts.predicted_class;
    Ok(Refinement {
        id: prompt.id.clone(),
        predicted_class: class,
        class,
        vector: space.class_vector(class)?,
        decision: Some(RefinementDecision::KEEP),
        provenance: Provenance {
            backend: "identity".into(),
            raw_answer: None,
            retries: 0,
            fallback: false,
        },
    })
}

/// Refines every prompt with at most `concurrency` requests in flight.
/// Results come back in prompt order.
pub fn refine_all(
    backend: &dyn RefinerBackend,
    prompts: &[PromptBundle],
    space: &IntentionSpace,
    concurrency: usize,
) -> Vec<Result<Refinement>> {
    let workers = concurrency.max(1).min(prompts.len().max(1));
    if workers == 1 {
        return prompts.iter().map(|p| refine(backend, p, space)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut done: Vec<(usize, Result<Refinement>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(p) = prompts.get(i) else { break };
                        out.push((i, refine(backend, p, space)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("refinement worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intention::ImmobilityVector;
    use crate::nn::Matrix;
    use crate::retrieval::{CorpusTag, Reference, ReferenceSet};
    use crate::trajstore::{DisasterLevel, LevelLabels};
    use std::sync::Mutex;
    use std::time::Duration;

    /// Five centroid classes and immobility class 5.
    fn space() -> IntentionSpace {
        IntentionSpace {
            centroids: (0..5).map(|i| vec![i as f64]).collect(),
            immobility: Some(ImmobilityVector {
                vector: vec![2.0, 8.0],
                offset: 8.0,
            }),
            silhouette: 0.0,
        }
    }

    fn prompt(level: u8, next: &[usize], predicted: usize) -> PromptBundle {
        let refs = ReferenceSet {
            source: next
                .iter()
                .map(|&n| Reference {
                    tag: CorpusTag::SourceDisaster(level),
                    id: format!("r{n}"),
                    distance: 0.0,
                    history: vec![0],
                    next: n,
                })
                .collect(),
            target: vec![],
        };
        let labels = LevelLabels::default();
        build_prompt(&PromptInputs {
            id: "q",
            level: DisasterLevel(level),
            labels: &labels,
            query: &[vec![0.0]],
            predicted: &[0.0],
            predicted_class: predicted,
            references: &refs,
            anchors: &Matrix::zeros(6, 1),
            intentions: 5,
            immobility: true,
            prefix: None,
        })
        .unwrap()
    }

    #[test]
    fn stub_rules() {
        let stub = StubBackend::default();
        assert_eq!(stub.answer(&prompt(4, &[5, 5, 5], 4)).unwrap(), r#"["no","yes","stay still"]"#);
        assert_eq!(stub.answer(&prompt(0, &[2, 2, 5], 5)).unwrap(), r#"["no","no","2"]"#);
        assert_eq!(stub.answer(&prompt(0, &[1, 2, 3], 2)).unwrap(), r#"["yes","None","None"]"#);
    }

    #[test]
    fn stub_without_references_keeps() {
        let stub = StubBackend::default();
        assert_eq!(stub.decide(&prompt(4, &[], 1)), RefinementDecision::KEEP);
    }

    #[test]
    fn decisions_map_to_vectors() {
        let s = space();
        let stub = StubBackend::default();
        let keep = refine(&stub, &prompt(0, &[1, 2, 3], 2), &s).unwrap();
        assert_eq!((keep.class, keep.vector.clone()), (2, vec![2.0, 0.0]));
        let stay = refine(&stub, &prompt(3, &[5, 5, 1], 1), &s).unwrap();
        assert_eq!((stay.class, stay.vector), (5, vec![2.0, 8.0]));
        let class = refine(&stub, &prompt(0, &[3, 3, 3], 1), &s).unwrap();
        assert_eq!((class.class, class.vector), (3, vec![3.0, 0.0]));
    }

    struct Scripted {
        replies: Mutex<Vec<std::result::Result<String, String>>>,
    }

    impl Transport for Scripted {
        fn post(&self, body: &str, _: Duration) -> std::result::Result<String, String> {
            let req: WireRequest = serde_json::from_str(body).unwrap();
            assert!(!req.embedding_slots.is_empty());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn http(replies: Vec<std::result::Result<String, String>>) -> HttpBackend<Scripted> {
        HttpBackend::new(Scripted {
            replies: Mutex::new(replies),
        })
    }

    fn answer(text: &str) -> std::result::Result<String, String> {
        Ok(serde_json::to_string(&WireResponse { answer: text.into() }).unwrap())
    }

    #[test]
    fn transport_pass_through() {
        let b = http(vec![answer(r#"["no","no","1"]"#)]);
        let r = refine(&b, &prompt(0, &[], 2), &space()).unwrap();
        assert_eq!(r.decision, Some(RefinementDecision::class(1)));
        assert_eq!(r.provenance.retries, 0);
    }

    #[test]
    fn retries_after_timeouts() {
        let b = http(vec![Err("timed out".into()), Err("timed out".into()), answer(r#"["yes","None","None"]"#)]);
        let r = refine(&b, &prompt(0, &[], 2), &space()).unwrap();
        assert_eq!(r.provenance.retries, 2);
        assert!(!r.provenance.fallback);
    }

    #[test]
    fn garbage_falls_back() {
        let b = http(vec![answer("maybe"), Ok("<html>".into()), answer("[]")]);
        let r = refine(&b, &prompt(0, &[], 2), &space()).unwrap();
        assert!(r.provenance.fallback);
        assert_eq!(r.class, 2);
        assert_eq!(r.provenance.raw_answer.as_deref(), Some("[]"));
    }

    #[test]
    fn transport_failure_surfaces_retry_count() {
        let b = http(vec![Err("down".into()), Err("down".into()), Err("down".into())]);
        let err = refine(&b, &prompt(0, &[], 2), &space()).unwrap_err();
        assert!(matches!(err, Error::Backend { retries: 2, .. }), "{err}");
    }

    #[test]
    fn concurrent_results_keep_order() {
        let s = space();
        let prompts: Vec<PromptBundle> = (0..20)
            .map(|i| {
                let mut p = prompt(0, &[i % 5, i % 5, i % 5], 0);
                p.id = format!("p{i}");
                p
            })
            .collect();
        let stub = StubBackend::default();
        let serial = refine_all(&stub, &prompts, &s, 1);
        let parallel = refine_all(&stub, &prompts, &s, 4);
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
        }
        assert_eq!(parallel[7].as_ref().unwrap().id, "p7");
    }
}
