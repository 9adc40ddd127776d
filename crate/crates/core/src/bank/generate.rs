use std::collections::BTreeSet;
use std::io::Write;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Action,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub prompt_version: u32,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub kind: DescriptionKind,
    /// Action label the texts describe.
    pub label: String,
    /// Objects named in the request (relation sets only).
    #[serde(default)]
    pub objects: Vec<String>,
    pub texts: Vec<String>,
    pub provenance: Provenance,
}

/// A prompt plus the remediation hints accumulated by refinement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub base: String,
    pub hints: Vec<String>,
}

impl Prompt {
    pub fn action(label: &str) -> Self {
        Self {
            base: format!("Given action label {label}, please generate descriptions inside a car cabin."),
            hints: Vec::new(),
        }
    }

    pub fn relation(action_descriptions: &[String], objects: &[String]) -> Self {
        Self {
            base: format!(
                "Given action descriptions {} and related objects {}, please describe the relations between these objects.",
                action_descriptions.join(" "),
                objects.join(", ")
            ),
            hints: Vec::new(),
        }
    }

    pub fn text(&self) -> String {
        if self.hints.is_empty() {
            return self.base.clone();
        }
        let mut s = self.base.clone();
        s.push_str("\nRequirements:");
        for h in &self.hints {
            s.push_str("\n- ");
            s.push_str(h);
        }
        s
    }

    /// Appends each failure's remediation hint (once).
    pub fn refine(&self, failures: &[RuleFailure]) -> Self {
        let mut hints = self.hints.clone();
        for f in failures {
            let h = f.remediation();
            if !hints.contains(&h) {
                hints.push(h);
            }
        }
        Self { base: self.base.clone(), hints }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleFailure {
    WrongCount { expected: usize, got: usize },
    Empty,
    Duplicate,
    TooShort { min: usize },
    TooLong { max: usize },
    MissingTerm(String),
    Banned(String),
    LowDiversity,
    TooFewObjects { objects: Vec<String>, min: usize },
}

impl RuleFailure {
    pub fn remediation(&self) -> String {
        match self {
            RuleFailure::WrongCount { expected, .. } => format!("Return exactly {expected} descriptions."),
            RuleFailure::Empty => "Every description must be a non-empty sentence.".into(),
            RuleFailure::Duplicate => "Each description must be distinct.".into(),
            RuleFailure::TooShort { min } => format!("Write at least {min} characters per description."),
            RuleFailure::TooLong { max } => format!("Keep each description under {max} characters."),
            RuleFailure::MissingTerm(t) => format!("Mention \"{t}\" explicitly in every description."),
            RuleFailure::Banned(t) => format!("Do not use the phrase \"{t}\"."),
            RuleFailure::LowDiversity => "Vary the wording across descriptions.".into(),
            RuleFailure::TooFewObjects { objects, min } => {
                format!("Name at least {min} of: {} in every description.", objects.join(", "))
            }
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            RuleFailure::WrongCount { .. } => "wrong_count",
            RuleFailure::Empty => "empty",
            RuleFailure::Duplicate => "duplicate",
            RuleFailure::TooShort { .. } => "too_short",
            RuleFailure::TooLong { .. } => "too_long",
            RuleFailure::MissingTerm(_) => "missing_term",
            RuleFailure::Banned(_) => "banned",
            RuleFailure::LowDiversity => "low_diversity",
            RuleFailure::TooFewObjects { .. } => "too_few_objects",
        }
    }
}

/// Machine-checkable description rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Validator {
    pub action_count: usize,
    pub relation_count: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Terms every action description must contain besides its label.
    pub action_terms: Vec<String>,
    pub banned: Vec<String>,
    /// Minimum distinct-word ratio over all words of a set.
    pub min_diversity: f64,
    pub min_objects_named: usize,
}

impl Default for Validator {
    fn default() -> Self {
        Self {
            action_count: 3,
            relation_count: 2,
            min_chars: 16,
            max_chars: 240,
            action_terms: vec!["cabin".into()],
            banned: vec!["as an ai".into(), "lorem ipsum".into(), "i cannot".into()],
            min_diversity: 0.3,
            min_objects_named: 2,
        }
    }
}

fn words(t: &str) -> Vec<String> {
    t.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(String::from).collect()
}

impl Validator {
    fn common(&self, expected: usize, texts: &[String]) -> Vec<RuleFailure> {
        let mut f = Vec::new();
        if texts.len() != expected {
            f.push(RuleFailure::WrongCount { expected, got: texts.len() });
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            f.push(RuleFailure::Empty);
        }
        if texts.iter().collect::<BTreeSet<_>>().len() != texts.len() {
            f.push(RuleFailure::Duplicate);
        }
        if texts.iter().any(|t| !t.trim().is_empty() && t.chars().count() < self.min_chars) {
            f.push(RuleFailure::TooShort { min: self.min_chars });
        }
        if texts.iter().any(|t| t.chars().count() > self.max_chars) {
            f.push(RuleFailure::TooLong { max: self.max_chars });
        }
        for b in &self.banned {
            if texts.iter().any(|t| t.to_lowercase().contains(b.as_str())) {
                f.push(RuleFailure::Banned(b.clone()));
            }
        }
        let all: Vec<String> = texts.iter().flat_map(|t| words(t)).collect();
        if !all.is_empty() {
            let distinct = all.iter().collect::<BTreeSet<_>>().len();
            if (distinct as f64) < self.min_diversity * all.len() as f64 {
                f.push(RuleFailure::LowDiversity);
            }
        }
        f
    }

    pub fn check_action(&self, label: &str, texts: &[String]) -> Vec<RuleFailure> {
        let mut f = self.common(self.action_count, texts);
        for term in std::iter::once(label).chain(self.action_terms.iter().map(String::as_str)) {
            let t = term.to_lowercase();
            if texts.iter().any(|x| !x.to_lowercase().contains(&t)) {
                f.push(RuleFailure::MissingTerm(term.to_string()));
            }
        }
        f
    }

    pub fn check_relation(&self, objects: &[String], texts: &[String]) -> Vec<RuleFailure> {
        let mut f = self.common(self.relation_count, texts);
        let min = self.min_objects_named.min(objects.len());
        let named = |t: &String| {
            let lower = t.to_lowercase();
            objects.iter().filter(|o| lower.contains(&o.to_lowercase())).count()
        };
        if texts.iter().any(|t| named(t) < min) {
            f.push(RuleFailure::TooFewObjects { objects: objects.to_vec(), min });
        }
        f
    }
}

/// What a generator is asked to produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub kind: DescriptionKind,
    pub label: String,
    pub objects: Vec<String>,
    pub count: usize,
    pub attempt: usize,
}

pub trait DescriptionGenerator {
    fn id(&self) -> String;
    fn generate(&mut self, prompt: &Prompt, request: &Request) -> Result<Vec<String>>;
}

/// Deterministic sentence templates that satisfy the default rules.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator;

const ACTION_TEMPLATES: [&str; 4] = [
    "A driver is {label} inside the car cabin while seated behind the wheel.",
    "Inside the cabin, the person in the driver seat keeps {label} during the trip.",
    "The camera shows someone {label} within the vehicle cabin, hands moving near the steering area.",
    "While the car cabin stays quiet, the driver continues {label} for several seconds.",
];

const RELATION_TEMPLATES: [&str; 3] = [
    "While {label}, the {first} interacts with the {rest} close to the driver seat.",
    "During {label}, the {rest} stays within reach of the {first} in the cabin.",
    "The {first} handles the {rest} as part of {label}.",
];

fn fill(t: &str, label: &str, objects: &[String]) -> String {
    let first = objects.first().map(String::as_str).unwrap_or("driver");
    let rest = if objects.len() > 1 { objects[1..].join(" and the ") } else { "surroundings".into() };
    t.replace("{label}", label).replace("{first}", first).replace("{rest}", &rest)
}

impl DescriptionGenerator for TemplateGenerator {
    fn id(&self) -> String {
        "template-v1".into()
    }

    fn generate(&mut self, _prompt: &Prompt, r: &Request) -> Result<Vec<String>> {
        let pool: &[&str] = match r.kind {
            DescriptionKind::Action => &ACTION_TEMPLATES,
            DescriptionKind::Relation => &RELATION_TEMPLATES,
        };
        Ok(pool.iter().cycle().take(r.count).map(|t| fill(t, &r.label, &r.objects)).collect())
    }
}

/// Replays canned responses in order, then falls back to the template engine.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    pub responses: Vec<Vec<String>>,
    pub calls: usize,
}

impl ScriptedGenerator {
    pub fn new(responses: Vec<Vec<String>>) -> Self {
        Self { responses, calls: 0 }
    }
}

impl DescriptionGenerator for ScriptedGenerator {
    fn id(&self) -> String {
        "mock-scripted".into()
    }

    fn generate(&mut self, prompt: &Prompt, r: &Request) -> Result<Vec<String>> {
        self.calls += 1;
        match self.responses.get(self.calls - 1) {
            Some(resp) => Ok(resp.clone()),
            None => TemplateGenerator.generate(prompt, r),
        }
    }
}

/// Template output, replaced by empty strings with probability `invalid_rate`.
#[derive(Debug, Clone)]
pub struct FlakyGenerator {
    pub invalid_rate: f64,
    rng: ChaCha8Rng,
}

impl FlakyGenerator {
    pub fn new(invalid_rate: f64, seed: u64) -> Self {
        Self { invalid_rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl DescriptionGenerator for FlakyGenerator {
    fn id(&self) -> String {
        format!("mock-flaky-{}", self.invalid_rate)
    }

    fn generate(&mut self, prompt: &Prompt, r: &Request) -> Result<Vec<String>> {
        if self.rng.gen_bool(self.invalid_rate) {
            return Ok(vec![String::new(); r.count]);
        }
        TemplateGenerator.generate(prompt, r)
    }
}

/// Runs a command per request: the prompt text goes to stdin, a JSON array
/// of strings is read from stdout. The request is also exposed through
/// `CABIN_REQUEST` as JSON.
#[derive(Debug, Clone)]
pub struct ExternalGenerator {
    pub program: String,
    pub args: Vec<String>,
}

impl DescriptionGenerator for ExternalGenerator {
    fn id(&self) -> String {
        format!("external:{}", self.program)
    }

    fn generate(&mut self, prompt: &Prompt, r: &Request) -> Result<Vec<String>> {
        let fail = |m: String| Error::Generator(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("CABIN_REQUEST", serde_json::to_string(r).expect("request serializes"))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(prompt.text().as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("stdout is not a JSON string array: {e}")))
    }
}

fn run_loop(
    kind: DescriptionKind,
    label: &str,
    objects: &[String],
    generator: &mut dyn DescriptionGenerator,
    prompt: Prompt,
    max_retries: usize,
    check: impl Fn(&[String]) -> Vec<RuleFailure>,
    count: usize,
) -> Result<DescriptionSet> {
    let mut prompt = prompt;
    let mut last = Vec::new();
    for attempt in 0..=max_retries {
        let req = Request { kind, label: label.to_string(), objects: objects.to_vec(), count, attempt };
        let texts = generator.generate(&prompt, &req)?;
        let failures = check(&texts);
        if failures.is_empty() {
            return Ok(DescriptionSet {
                kind,
                label: label.to_string(),
                objects: objects.to_vec(),
                texts,
                provenance: Provenance {
                    generator: generator.id(),
                    prompt_version: PROMPT_VERSION,
                    attempts: attempt + 1,
                },
            });
        }
        log::debug!(
            "{label}: attempt {} failed {:?}",
            attempt + 1,
            failures.iter().map(RuleFailure::code).collect::<Vec<_>>()
        );
        prompt = prompt.refine(&failures);
        last = failures;
    }
    Err(Error::ValidationExhausted {
        label: label.to_string(),
        attempts: max_retries + 1,
        last_failures: last.iter().map(RuleFailure::remediation).collect(),
    })
}

pub fn generate_action_descriptions(
    label: &str,
    generator: &mut dyn DescriptionGenerator,
    prompt: Prompt,
    validator: &Validator,
    max_retries: usize,
) -> Result<DescriptionSet> {
    run_loop(
        DescriptionKind::Action,
        label,
        &[],
        generator,
        prompt,
        max_retries,
        |t| validator.check_action(label, t),
        validator.action_count,
    )
}

/// An empty object set yields an empty set without calling the generator.
pub fn generate_relation_descriptions(
    action: &DescriptionSet,
    objects: &[String],
    generator: &mut dyn DescriptionGenerator,
    prompt: Prompt,
    validator: &Validator,
    max_retries: usize,
) -> Result<DescriptionSet> {
    if objects.is_empty() {
        return Ok(DescriptionSet {
            kind: DescriptionKind::Relation,
            label: action.label.clone(),
            objects: Vec::new(),
            texts: Vec::new(),
            provenance: Provenance { generator: generator.id(), prompt_version: PROMPT_VERSION, attempts: 0 },
        });
    }
    run_loop(
        DescriptionKind::Relation,
        &action.label,
        objects,
        generator,
        prompt,
        max_retries,
        |t| validator.check_relation(objects, t),
        validator.relation_count,
    )
}
