//! Rule-based parser used when no LLM is available. The vocabulary
//! (intensifiers, refinement deltas, synonyms, verbs) is data, loaded from
//! `data/grammar.json` unless overridden.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{clamp_unit, EditInstruction, EditMode, IpmError, MemoryBank, ParsedTurn, ParserSource};
use crate::taxonomy::{normalize_phrase, LabelSpec, Taxonomy};

const BUILTIN: &str = include_str!("../../data/grammar.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub version: u32,
    pub default_strength: f64,
    /// Phrase → absolute strength, e.g. "slightly" → 0.25.
    pub intensifiers: Vec<(String, f64)>,
    /// Bare refinements → signed delta, e.g. "a bit more" → +0.15.
    pub refinements: Vec<(String, f64)>,
    /// Extra words mapped onto a comparative adjective.
    pub synonyms: BTreeMap<String, String>,
    pub reset_words: Vec<String>,
    pub reset_all_phrases: Vec<String>,
    pub set_words: Vec<String>,
    pub separators: Vec<String>,
    pub clarification: String,
    pub suggestion_count: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig::from_json(BUILTIN).expect("builtin grammar is valid")
    }
}

impl GrammarConfig {
    pub fn from_json(s: &str) -> Result<Self, IpmError> {
        let g: GrammarConfig = serde_json::from_str(s).map_err(|e| IpmError::Config(format!("grammar: {e}")))?;
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<(), IpmError> {
        let bad = |what: &str, v: f64| IpmError::Config(format!("grammar: {what} {v} out of range"));
        if !(0.0..=1.0).contains(&self.default_strength) {
            return Err(bad("default strength", self.default_strength));
        }
        for (_, s) in &self.intensifiers {
            if !(0.0..=1.0).contains(s) {
                return Err(bad("intensifier", *s));
            }
        }
        for (_, d) in &self.refinements {
            if !(-1.0..=1.0).contains(d) {
                return Err(bad("refinement", *d));
            }
        }
        Ok(())
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.to_lowercase().chars() {
        match c {
            ',' | ';' => {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            }
            c if c.is_alphanumeric() || c == '\'' || c == '.' || c == '%' => spaced.push(c),
            _ => spaced.push(' '),
        }
    }
    spaced.split_whitespace().map(|t| t.trim_matches('.').to_string()).filter(|t| !t.is_empty()).collect()
}

fn words(phrase: &str) -> Vec<String> {
    tokenize(phrase)
}

/// First unused occurrence of `phrase` in `tokens`.
fn find(tokens: &[String], used: &[bool], phrase: &[String]) -> Option<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - phrase.len()).find(|&i| (0..phrase.len()).all(|k| !used[i + k] && tokens[i + k] == phrase[k]))
}

fn take(tokens: &[String], used: &mut [bool], phrase: &[String]) -> bool {
    match find(tokens, used, phrase) {
        Some(i) => {
            used[i..i + phrase.len()].iter_mut().for_each(|u| *u = true);
            true
        }
        None => false,
    }
}

/// Plain forms of a comparative: "bigger" → big, "wider" → wide,
/// "pointier" → pointy.
fn base_forms(comparative: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(stem) = comparative.strip_suffix("ier") {
        out.push(format!("{stem}y"));
    } else if let Some(stem) = comparative.strip_suffix("er") {
        out.push(stem.to_string());
        out.push(format!("{stem}e"));
        let b = stem.as_bytes();
        if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
            out.push(stem[..stem.len() - 1].to_string());
        }
    }
    out
}

struct Vocabulary<'a> {
    /// Alias token sequences, longest first.
    aliases: Vec<(Vec<String>, &'a LabelSpec)>,
    adjectives: BTreeMap<String, String>,
}

impl<'a> Vocabulary<'a> {
    fn new(taxonomy: &'a Taxonomy, grammar: &GrammarConfig) -> Self {
        let mut aliases = Vec::new();
        for label in &taxonomy.labels {
            let mut names: Vec<String> = label.aliases.iter().map(|a| normalize_phrase(a)).collect();
            names.push(normalize_phrase(&label.phrase));
            names.push(normalize_phrase(&label.key));
            names.sort();
            names.dedup();
            for n in names {
                aliases.push((words(&n), label));
            }
        }
        // stable: longest alias first, taxonomy order otherwise
        aliases.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

        let mut adjectives = BTreeMap::new();
        let comparatives: Vec<String> = taxonomy.labels.iter().flat_map(|l| l.adjectives().map(String::from)).collect();
        for c in &comparatives {
            for base in base_forms(c) {
                adjectives.entry(base).or_insert_with(|| c.clone());
            }
        }
        for (word, c) in &grammar.synonyms {
            adjectives.insert(word.clone(), c.clone());
        }
        for c in comparatives {
            adjectives.insert(c.clone(), c);
        }
        Vocabulary { aliases, adjectives }
    }

    fn attributes(&self, tokens: &[String], used: &mut [bool]) -> Vec<&'a LabelSpec> {
        let mut found: Vec<(usize, &LabelSpec)> = Vec::new();
        for (alias, label) in &self.aliases {
            while let Some(i) = find(tokens, used, alias) {
                used[i..i + alias.len()].iter_mut().for_each(|u| *u = true);
                found.push((i, *label));
            }
        }
        found.sort_by_key(|(i, _)| *i);
        let mut out: Vec<&LabelSpec> = Vec::new();
        for (_, l) in found {
            if !out.iter().any(|o| o.key == l.key) {
                out.push(l);
            }
        }
        out
    }

    fn adjective(&self, tokens: &[String], used: &mut [bool]) -> Option<String> {
        for (i, t) in tokens.iter().enumerate() {
            if !used[i] {
                if let Some(c) = self.adjectives.get(t) {
                    used[i] = true;
                    return Some(c.clone());
                }
            }
        }
        None
    }
}

#[derive(Debug, Default)]
struct Clause<'a> {
    attributes: Vec<&'a LabelSpec>,
    adjective: Option<String>,
    intensity: Option<f64>,
    delta: Option<f64>,
    reset: bool,
    set_to: Option<f64>,
}

fn parse_number(token: &str) -> Option<f64> {
    let (digits, divisor) = match token.strip_suffix('%') {
        Some(d) => (d, 100.0),
        None => (token, 1.0),
    };
    digits.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v / divisor)
}

fn clause<'a>(tokens: &[String], vocab: &Vocabulary<'a>, g: &GrammarConfig) -> Clause<'a> {
    let mut used = vec![false; tokens.len()];
    let mut c = Clause { attributes: vocab.attributes(tokens, &mut used), ..Default::default() };
    if g.set_words.iter().any(|w| find(tokens, &used, &words(w)).is_some()) {
        c.set_to = tokens.iter().filter_map(|t| parse_number(t)).next();
    }
    c.reset = g.reset_words.iter().any(|w| take(tokens, &mut used, &words(w)));
    let mut refinements: Vec<&(String, f64)> = g.refinements.iter().collect();
    refinements.sort_by(|a, b| words(&b.0).len().cmp(&words(&a.0).len()));
    for (phrase, delta) in refinements {
        if take(tokens, &mut used, &words(phrase)) {
            c.delta = Some(*delta);
            break;
        }
    }
    let mut intensifiers: Vec<&(String, f64)> = g.intensifiers.iter().collect();
    intensifiers.sort_by(|a, b| words(&b.0).len().cmp(&words(&a.0).len()));
    for (phrase, s) in intensifiers {
        if take(tokens, &mut used, &words(phrase)) {
            c.intensity = Some(*s);
            break;
        }
    }
    c.adjective = vocab.adjective(tokens, &mut used);
    c
}

fn split_clauses(tokens: Vec<String>, separators: &[String]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for t in tokens {
        if separators.iter().any(|s| *s == t) {
            out.push(Vec::new());
        } else {
            out.last_mut().unwrap().push(t);
        }
    }
    out.retain(|c| !c.is_empty());
    out
}

fn join_or(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} or {last}", init.join(", ")),
    }
}

/// Deterministic parse of one user turn against the bank.
pub fn fallback_parse(user_text: &str, bank: &MemoryBank, taxonomy: &Taxonomy, g: &GrammarConfig) -> ParsedTurn {
    let vocab = Vocabulary::new(taxonomy, g);
    let tokens = tokenize(user_text);
    let mut edits: Vec<EditInstruction> = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let mut reset_all = false;

    let mut probe = vec![false; tokens.len()];
    let mentions_attribute = !vocab.attributes(&tokens, &mut probe).is_empty();
    if !mentions_attribute
        && g.reset_all_phrases.iter().any(|p| find(&tokens, &vec![false; tokens.len()], &words(p)).is_some())
    {
        reset_all = true;
        notes.push("Resetting every attribute to the starting face.".into());
    }

    let mut clauses: Vec<Clause> = if reset_all {
        Vec::new()
    } else {
        split_clauses(tokens, &g.separators).iter().map(|c| clause(c, &vocab, g)).collect()
    };
    // "make the eyes and the nose bigger": bare attributes borrow the nearest
    // adjective, preferring the one that follows
    for i in 0..clauses.len() {
        let c = &clauses[i];
        if c.attributes.is_empty() || c.adjective.is_some() || c.delta.is_some() || c.reset || c.set_to.is_some() {
            continue;
        }
        let donor = (i + 1..clauses.len()).chain((0..i).rev()).find(|&j| clauses[j].adjective.is_some());
        if let Some(j) = donor {
            let (adj, intensity) = (clauses[j].adjective.clone(), clauses[j].intensity);
            clauses[i].adjective = adj;
            clauses[i].intensity = clauses[i].intensity.or(intensity);
        }
    }

    // strengths as they stand during this turn, for feedback
    let mut current: BTreeMap<String, f64> = bank.entries.iter().map(|(k, a)| (k.clone(), a.strength)).collect();
    let mut last = bank.last_edited.clone();
    for c in clauses {
        let targets: Vec<&LabelSpec> = if !c.attributes.is_empty() {
            c.attributes.clone()
        } else if c.delta.is_some() || c.adjective.is_some() {
            match last.as_deref().and_then(|k| taxonomy.get(k)) {
                Some(l) => vec![l],
                None => {
                    notes.push(
                        "I'm not sure which feature you mean. Name one first, e.g. \"make the nose bigger\".".into(),
                    );
                    continue;
                }
            }
        } else {
            continue;
        };

        for label in targets {
            // prompt this attribute already has, in the bank or earlier this turn
            let earlier = edits.iter().rev().find(|e| e.attribute_key == label.key).map(|e| e.prompt.clone());
            let stored = earlier.or_else(|| bank.get(&label.key).map(|a| a.prompt.clone()));
            let mut push = |e: EditInstruction, notes: &mut Vec<String>| {
                let level = match e.mode {
                    EditMode::Absolute => e.strength,
                    EditMode::Delta => clamp_unit(current.get(&e.attribute_key).copied().unwrap_or(0.0) + e.strength),
                };
                current.insert(e.attribute_key.clone(), level);
                notes.push(match e.mode {
                    EditMode::Absolute if level == 0.0 => format!("Resetting the {}.", label.phrase),
                    EditMode::Absolute => format!("Going for {} at strength {level:.2}.", e.prompt),
                    EditMode::Delta => {
                        format!("Adjusting {} by {:+.2}, now at strength {level:.2}.", e.prompt, e.strength)
                    }
                });
                last = Some(e.attribute_key.clone());
                edits.push(e);
            };

            if let Some(n) = c.set_to {
                match stored {
                    Some(prompt) => {
                        let s = clamp_unit(n);
                        if s != n {
                            notes.push(format!("Strength {n} is outside 0 to 1; using {s}."));
                        }
                        push(
                            EditInstruction {
                                attribute_key: label.key.clone(),
                                prompt,
                                strength: s,
                                mode: EditMode::Absolute,
                            },
                            &mut notes,
                        );
                    }
                    None => notes.push(format!(
                        "The {} hasn't been edited yet; tell me how it should change first.",
                        label.phrase
                    )),
                }
            } else if c.reset {
                let prompt = stored.unwrap_or_else(|| label.phrase.clone());
                push(
                    EditInstruction {
                        attribute_key: label.key.clone(),
                        prompt,
                        strength: 0.0,
                        mode: EditMode::Absolute,
                    },
                    &mut notes,
                );
            } else if let Some(adj) = &c.adjective {
                if label.adjectives().any(|a| a == adj) {
                    let strength = c.intensity.unwrap_or(g.default_strength);
                    let prompt = label.prompt_for(adj);
                    push(
                        EditInstruction {
                            attribute_key: label.key.clone(),
                            prompt,
                            strength,
                            mode: EditMode::Absolute,
                        },
                        &mut notes,
                    );
                } else {
                    let options: Vec<&str> = label.adjectives().collect();
                    notes.push(format!("The {} can't be made {adj}; try {}.", label.phrase, join_or(&options)));
                }
            } else if let Some(delta) = c.delta {
                match stored {
                    Some(prompt) => push(
                        EditInstruction {
                            attribute_key: label.key.clone(),
                            prompt,
                            strength: delta,
                            mode: EditMode::Delta,
                        },
                        &mut notes,
                    ),
                    None => notes.push(format!(
                        "The {} hasn't been edited yet; tell me how it should change first.",
                        label.phrase
                    )),
                }
            } else {
                let options: Vec<&str> = label.adjectives().collect();
                notes.push(format!("How should the {} change? For example {}.", label.phrase, join_or(&options)));
            }
        }
    }

    let feedback = if notes.is_empty() { g.clarification.clone() } else { notes.join(" ") };
    let edited: Vec<&str> = edits.iter().map(|e| e.attribute_key.as_str()).collect();
    let suggestions = taxonomy
        .labels
        .iter()
        .filter(|l| !edited.contains(&l.key.as_str()))
        .filter_map(|l| l.adjectives().next().map(|a| format!("make the {} {a}", l.phrase)))
        .take(g.suggestion_count)
        .collect();
    ParsedTurn { feedback, edits, suggestions, parser_source: ParserSource::Fallback, reset_all }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipm::apply_turn;
    use crate::taxonomy::builtin_taxonomy;

    fn parse(text: &str, bank: &MemoryBank) -> ParsedTurn {
        fallback_parse(text, bank, &builtin_taxonomy(), &GrammarConfig::default())
    }

    fn only_edit(p: &ParsedTurn) -> &EditInstruction {
        assert_eq!(p.edits.len(), 1, "{p:?}");
        &p.edits[0]
    }

    #[test]
    fn slightly_bigger_nose() {
        let p = parse("make the nose slightly bigger", &MemoryBank::new());
        let e = only_edit(&p);
        assert_eq!(
            (e.attribute_key.as_str(), e.prompt.as_str(), e.strength, e.mode),
            ("nose", "bigger nose", 0.25, EditMode::Absolute)
        );
    }

    #[test]
    fn anaphoric_refinement_resolves_to_last_attribute() {
        let first = parse("make the nose slightly bigger", &MemoryBank::new());
        let bank = apply_turn(&first, &MemoryBank::new()).bank;
        let p = parse("a bit more", &bank);
        let e = only_edit(&p);
        assert_eq!(
            (e.attribute_key.as_str(), e.prompt.as_str(), e.strength, e.mode),
            ("nose", "bigger nose", 0.15, EditMode::Delta)
        );
        let applied = apply_turn(&p, &bank);
        assert_eq!(applied.edits[0].strength, 0.25 + 0.15);
        let less = parse("a bit less", &applied.bank);
        assert_eq!(only_edit(&less).strength, -0.15);
    }

    #[test]
    fn chat_asks_for_clarification() {
        let p = parse("hello there", &MemoryBank::new());
        assert!(p.edits.is_empty());
        assert_eq!(p.feedback, GrammarConfig::default().clarification);
        assert!(!p.reset_all);
    }

    #[test]
    fn bare_refinement_without_history() {
        let p = parse("a bit more", &MemoryBank::new());
        assert!(p.edits.is_empty());
        assert!(p.feedback.contains("not sure"));
    }

    #[test]
    fn intensifiers_and_base_forms() {
        let e = parse("give her very dark eyeshadow", &MemoryBank::new());
        let e = only_edit(&e);
        assert_eq!((e.prompt.as_str(), e.strength), ("darker eyeshadow", 0.75));
        let p = parse("I want a wide jaw", &MemoryBank::new());
        assert_eq!(only_edit(&p).prompt, "wider jaw");
        let p = parse("make the eyes wider", &MemoryBank::new());
        assert_eq!((only_edit(&p).prompt.as_str(), only_edit(&p).strength), ("wider eyes", 0.5));
        let p = parse("make the chin a little pointy", &MemoryBank::new());
        assert_eq!((only_edit(&p).prompt.as_str(), only_edit(&p).strength), ("pointier chin", 0.25));
    }

    #[test]
    fn longest_alias_wins() {
        let p = parse("darker eye shadow", &MemoryBank::new());
        assert_eq!(only_edit(&p).attribute_key, "eyeshadow");
        let p = parse("lighter brow color", &MemoryBank::new());
        assert_eq!(only_edit(&p).attribute_key, "eyebrow_color");
    }

    #[test]
    fn conjunctions_split_and_share_adjectives() {
        let p = parse("make the eyes and the nose bigger", &MemoryBank::new());
        let keys: Vec<&str> = p.edits.iter().map(|e| e.attribute_key.as_str()).collect();
        assert_eq!(keys, ["eyes", "nose"]);
        assert!(p.edits.iter().all(|e| e.strength == 0.5));
        let p = parse("slightly fuller lips, then a darker lipstick", &MemoryBank::new());
        assert_eq!(p.edits.len(), 2);
        assert_eq!(p.edits[0].prompt, "fuller mouth");
        assert_eq!(p.edits[0].strength, 0.25);
        assert_eq!(p.edits[1].prompt, "darker lipstick");
    }

    #[test]
    fn reset_and_set() {
        let bank = apply_turn(&parse("make the nose bigger", &MemoryBank::new()), &MemoryBank::new()).bank;
        let p = parse("reset the nose", &bank);
        let e = only_edit(&p);
        assert_eq!((e.prompt.as_str(), e.strength, e.mode), ("bigger nose", 0.0, EditMode::Absolute));
        let p = parse("set nose strength to 0.8", &bank);
        assert_eq!(only_edit(&p).strength, 0.8);
        let p = parse("set nose strength to 70%", &bank);
        assert!((only_edit(&p).strength - 0.7).abs() < 1e-12);
        let p = parse("set nose strength to 3", &bank);
        assert_eq!(only_edit(&p).strength, 1.0);
        assert!(p.feedback.contains("outside"));
        let p = parse("set eyes strength to 0.3", &bank);
        assert!(p.edits.is_empty());
    }

    #[test]
    fn reset_everything() {
        let p = parse("reset everything", &MemoryBank::new());
        assert!(p.reset_all);
        assert!(p.edits.is_empty());
    }

    #[test]
    fn wrong_adjective_is_explained() {
        let p = parse("make the nose darker", &MemoryBank::new());
        assert!(p.edits.is_empty());
        assert!(p.feedback.contains("can't be made darker"));
    }

    #[test]
    fn builtin_grammar_values() {
        let g = GrammarConfig::default();
        let lookup = |k: &str| g.intensifiers.iter().find(|(p, _)| p == k).unwrap().1;
        assert_eq!((lookup("slightly"), lookup("somewhat"), lookup("very")), (0.25, 0.5, 0.75));
        assert_eq!(g.default_strength, 0.5);
        assert!(g.refinements.contains(&("a bit more".to_string(), 0.15)));
        assert!(g.refinements.contains(&("a bit less".to_string(), -0.15)));
    }

    #[test]
    fn bad_grammar_rejected() {
        let mut g = GrammarConfig::default();
        g.intensifiers.push(("insanely".into(), 1.5));
        assert!(g.check().is_err());
    }
}
