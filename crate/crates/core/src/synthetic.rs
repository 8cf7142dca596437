//! Deterministic toy biomedical data: a pretraining corpus and small
//! dialogue, summarization, entity-linking and NER datasets built from one
//! shared set of facts.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::corpus::{
    write_documents, write_kb, write_linking_dataset, write_ner_dataset, write_seq2seq_dataset, Document,
    EntityAnnotation, KnowledgeBase, LinkingExample, NerExample, SourceTargetPair,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

struct Disease {
    names: &'static [&'static str],
    drug: &'static str,
    symptom: &'static str,
    gene: &'static str,
}

const DISEASES: &[Disease] = &[
    Disease { names: &["diabetes", "diabetes mellitus", "sugar diabetes"], drug: "metformin", symptom: "thirst", gene: "tcf7l2" },
    Disease { names: &["asthma", "bronchial asthma"], drug: "albuterol", symptom: "wheezing", gene: "il13" },
    Disease { names: &["hypertension", "high blood pressure"], drug: "lisinopril", symptom: "headache", gene: "agt" },
    Disease { names: &["pneumonia", "lung infection"], drug: "amoxicillin", symptom: "cough", gene: "sftpb" },
    Disease { names: &["migraine", "migraine headache"], drug: "sumatriptan", symptom: "nausea", gene: "cacna1a" },
    Disease { names: &["anemia", "iron deficiency anemia"], drug: "ferrous sulfate", symptom: "fatigue", gene: "tmprss6" },
    Disease { names: &["arthritis", "rheumatoid arthritis"], drug: "methotrexate", symptom: "joint pain", gene: "ptpn22" },
    Disease { names: &["influenza", "flu"], drug: "oseltamivir", symptom: "fever", gene: "ifitm3" },
    Disease { names: &["eczema", "atopic dermatitis"], drug: "hydrocortisone", symptom: "itching", gene: "flg" },
    Disease { names: &["gout", "gouty arthritis"], drug: "allopurinol", symptom: "swelling", gene: "slc2a9" },
    Disease { names: &["epilepsy", "seizure disorder"], drug: "levetiracetam", symptom: "seizures", gene: "scn1a" },
    Disease { names: &["hypothyroidism", "underactive thyroid"], drug: "levothyroxine", symptom: "weight gain", gene: "tshr" },
    Disease { names: &["angina", "angina pectoris"], drug: "nitroglycerin", symptom: "chest pain", gene: "lpa" },
    Disease { names: &["psoriasis", "plaque psoriasis"], drug: "methoxsalen", symptom: "scaling", gene: "il23r" },
    Disease { names: &["tuberculosis", "tb infection"], drug: "isoniazid", symptom: "night sweats", gene: "nramp1" },
    Disease { names: &["depression", "major depression"], drug: "sertraline", symptom: "insomnia", gene: "slc6a4" },
    Disease { names: &["osteoporosis", "bone loss"], drug: "alendronate", symptom: "fractures", gene: "lrp5" },
    Disease { names: &["glaucoma", "open angle glaucoma"], drug: "latanoprost", symptom: "blurred vision", gene: "myoc" },
    Disease { names: &["malaria", "plasmodium infection"], drug: "chloroquine", symptom: "chills", gene: "hbb" },
    Disease { names: &["heart failure", "cardiac failure"], drug: "furosemide", symptom: "edema", gene: "ttn" },
];

const COUNTS: &[&str] = &["twelve", "forty", "sixty", "ninety", "two hundred", "many"];

fn sentence(r: &mut Rng, d: &Disease) -> String {
    let name = *d.names.choose(r).expect("names");
    let count = *COUNTS.choose(r).expect("counts");
    let (drug, symptom, gene) = (d.drug, d.symptom, d.gene);
    match r.random_range(0..8) {
        0 => format!("{drug} is commonly used to treat {name}."),
        1 => format!("patients with {name} often report {symptom}."),
        2 => format!("variants in {gene} are associated with {name}."),
        3 => format!("the study enrolled {count} patients with {name}."),
        4 => format!("treatment with {drug} reduced {symptom} in most patients."),
        5 => format!("{name} remains a common cause of hospital visits."),
        6 => format!("doctors monitor {symptom} during therapy for {name}."),
        _ => format!("early diagnosis of {name} improves outcomes."),
    }
}

/// `n` documents of three to six sentences, each centred on one disease.
pub fn corpus(seed: u64, n: usize) -> Vec<Document> {
    (0..n)
        .map(|id| {
            let mut r = rng::seeded(rng::mix(seed, id as u64));
            let d = DISEASES.choose(&mut r).expect("diseases");
            let k = r.random_range(3..=6);
            let mut sents: Vec<String> = (0..k)
                .map(|_| {
                    if r.random_bool(0.2) {
                        let other = DISEASES.choose(&mut r).unwrap();
                        sentence(&mut r, other)
                    } else {
                        sentence(&mut r, d)
                    }
                })
                .collect();
            for s in &mut sents {
                capitalize(s);
            }
            Document::new(id, sents.join(" "))
        })
        .collect()
}

fn capitalize(s: &mut String) {
    if let Some(c) = s.chars().next() {
        let up: String = c.to_uppercase().collect();
        s.replace_range(..c.len_utf8(), &up);
    }
}

pub fn dialogue(seed: u64, n: usize) -> Vec<SourceTargetPair> {
    let mut r = rng::seeded(rng::mix(seed, 0xd1a1));
    (0..n)
        .map(|_| {
            let d = DISEASES.choose(&mut r).unwrap();
            let name = d.names.choose(&mut r).unwrap();
            let source = match r.random_range(0..3) {
                0 => format!("I have {} and my doctor says it is {name}. What should I take?", d.symptom),
                1 => format!("My {name} is getting worse and the {} keeps me awake. Any advice?", d.symptom),
                _ => format!("What medicine helps with {name}?"),
            };
            SourceTargetPair::new(source, format!("{} is usually prescribed for {}.", d.drug, d.names[0]))
        })
        .collect()
}

pub fn summarization(seed: u64, n: usize) -> Vec<SourceTargetPair> {
    let mut r = rng::seeded(rng::mix(seed, 0x5a11));
    (0..n)
        .map(|_| {
            let d = DISEASES.choose(&mut r).unwrap();
            let k = r.random_range(3..=4);
            let mut sents: Vec<String> = (0..k).map(|_| sentence(&mut r, d)).collect();
            for s in &mut sents {
                capitalize(s);
            }
            SourceTargetPair::new(
                sents.join(" "),
                format!("{} treats {} and {}.", d.drug, d.names[0], d.symptom),
            )
        })
        .collect()
}

/// A knowledge base with one concept per disease and drug, and linking
/// examples whose mentions are any of a concept's names.
pub fn linking(seed: u64, n: usize) -> (KnowledgeBase, Vec<LinkingExample>) {
    let mut kb = KnowledgeBase::default();
    for (i, d) in DISEASES.iter().enumerate() {
        for name in d.names {
            kb.insert(format!("D{:03}", i + 1), name.to_string());
        }
        kb.insert(format!("R{:03}", i + 1), d.drug.to_string());
    }
    let mut r = rng::seeded(rng::mix(seed, 0x11c));
    let lefts = ["the patient was diagnosed with", "history of", "she was started on", "no evidence of", "admitted for"];
    let rights = ["last year", "and discharged", "per guidelines", "", "without complications"];
    let examples = (0..n)
        .map(|_| {
            let i = r.random_range(0..DISEASES.len());
            let d = &DISEASES[i];
            let (mention, gold) = if r.random_bool(0.75) {
                (d.names.choose(&mut r).unwrap().to_string(), format!("D{:03}", i + 1))
            } else {
                (d.drug.to_string(), format!("R{:03}", i + 1))
            };
            LinkingExample {
                context_left: lefts.choose(&mut r).unwrap().to_string(),
                mention,
                context_right: rights.choose(&mut r).unwrap().to_string(),
                gold_concept: gold,
            }
        })
        .collect();
    (kb, examples)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Sentences with disease, chemical, symptom and gene entities, including
/// nested ("lung infection" inside a longer disease mention) and
/// discontinuous ("chest ... pain") ones.
pub fn ner(seed: u64, n: usize) -> Vec<NerExample> {
    let mut r = rng::seeded(rng::mix(seed, 0x4e5));
    (0..n)
        .map(|_| {
            let d = DISEASES.choose(&mut r).unwrap();
            let e = DISEASES.choose(&mut r).unwrap();
            let name = *d.names.choose(&mut r).unwrap();
            let nd = words(name).len();
            let ns = words(d.symptom).len();
            let mut ents = Vec::new();
            let text = match r.random_range(0..5) {
                0 => {
                    // "<drug> relieved <symptom> in <disease>"
                    let dr = words(d.drug).len();
                    ents.push(EntityAnnotation::new((0..dr).collect(), "CHEM"));
                    ents.push(EntityAnnotation::new((dr + 1..dr + 1 + ns).collect(), "SYM"));
                    let s = dr + 2 + ns;
                    ents.push(EntityAnnotation::new((s..s + nd).collect(), "DIS"));
                    format!("{} relieved {} in {name}", d.drug, d.symptom)
                }
                1 => {
                    // "variants in <gene> cause <disease>"
                    ents.push(EntityAnnotation::new(vec![2], "GENE"));
                    ents.push(EntityAnnotation::new((4..4 + nd).collect(), "DIS"));
                    format!("variants in {} cause {name}", d.gene)
                }
                2 => {
                    // nested: "<gene> related <disease>" is a disease containing the gene
                    ents.push(EntityAnnotation::new(vec![2], "GENE"));
                    ents.push(EntityAnnotation::new((2..4 + nd).collect(), "DIS"));
                    format!("patients with {} related {name} improved", d.gene)
                }
                3 => {
                    // discontinuous: "chest and abdominal pain"
                    ents.push(EntityAnnotation::new(vec![2, 5], "SYM"));
                    ents.push(EntityAnnotation::new(vec![4, 5], "SYM"));
                    "she reported chest and abdominal pain after exercise".to_string()
                }
                _ => {
                    // two diseases joined
                    let ne = words(e.names[0]).len();
                    ents.push(EntityAnnotation::new((0..nd).collect(), "DIS"));
                    ents.push(EntityAnnotation::new((nd + 3..nd + 3 + ne).collect(), "DIS"));
                    format!("{name} was distinguished from {} clinically", e.names[0])
                }
            };
            NerExample {
                words: words(&text),
                entities: ents,
            }
        })
        .collect()
}

/// Sizes of the generated bundle.
#[derive(Debug, Clone, Copy)]
pub struct BundleSizes {
    pub documents: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for BundleSizes {
    fn default() -> Self {
        Self {
            documents: 500,
            train: 48,
            dev: 12,
            test: 12,
        }
    }
}

fn split<T: Clone>(v: &[T], s: BundleSizes) -> [Vec<T>; 3] {
    [
        v[..s.train].to_vec(),
        v[s.train..s.train + s.dev].to_vec(),
        v[s.train + s.dev..s.train + s.dev + s.test].to_vec(),
    ]
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `corpus.txt` and `tasks/<name>/{train,dev,test}.jsonl` (plus
/// `tasks/linking/kb.tsv`) under `dir`.
pub fn write_bundle(dir: &Path, seed: u64, sizes: BundleSizes) -> Result<()> {
    mkdir(dir)?;
    write_documents(dir.join("corpus.txt"), &corpus(seed, sizes.documents))?;
    let total = sizes.train + sizes.dev + sizes.test;
    let names = ["train", "dev", "test"];
    for (task, pairs) in [("dialogue", dialogue(seed, total)), ("summarization", summarization(seed, total))] {
        let d = dir.join("tasks").join(task);
        mkdir(&d)?;
        for (name, part) in names.iter().zip(split(&pairs, sizes)) {
            write_seq2seq_dataset(d.join(format!("{name}.jsonl")), &part)?;
        }
    }
    let d = dir.join("tasks/linking");
    mkdir(&d)?;
    let (kb, ex) = linking(seed, total);
    write_kb(d.join("kb.tsv"), &kb)?;
    for (name, part) in names.iter().zip(split(&ex, sizes)) {
        write_linking_dataset(d.join(format!("{name}.jsonl")), &part)?;
    }
    let d = dir.join("tasks/ner");
    mkdir(&d)?;
    for (name, part) in names.iter().zip(split(&ner(seed, total), sizes)) {
        write_ner_dataset(d.join(format!("{name}.jsonl")), &part)?;
    }
    Ok(())
}
