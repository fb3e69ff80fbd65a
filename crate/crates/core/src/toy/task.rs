//! Synthetic task family for the toy environment.
//!
//! A query asks for the sum of two symbols over a 24-letter alphabet
//! (arithmetic mod 24, rendered as letters). Every trajectory drafts the
//! two operands plus a draft cue for the sum. On easy queries the cue is
//! the true sum; on hard queries it is deterministically corrupted AND the
//! true sum is absent from the draft answer menu, so a direct answer can
//! never be correct. Opening a refine block re-derives the true cue and
//! unlocks an answer menu that contains it: refinement is the only route
//! to accuracy on hard queries.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Symbols are the lowercase letters `a..x`.
pub const ALPHABET_SIZE: u8 = 24;

/// Hard cap on actions per trajectory; the sampler masks choices that
/// could not finish within it.
pub const ACTION_BUDGET: usize = 64;

/// Candidate answers offered at each answer decision.
pub const MENU_SIZE: usize = 4;

pub fn symbol_char(symbol: u8) -> char {
    debug_assert!(symbol < ALPHABET_SIZE);
    (b'a' + symbol) as char
}

pub fn symbol_index(c: char) -> Option<u8> {
    let index = (c as u32).checked_sub('a' as u32)?;
    (index < ALPHABET_SIZE as u32).then_some(index as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// One toy query: sum `prompt_tokens` over the alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyQuery {
    pub id: String,
    /// The two operand symbols.
    pub prompt_tokens: Vec<u8>,
    /// The single-symbol true answer.
    pub oracle_answer: Vec<u8>,
    pub difficulty: Difficulty,
}

impl ToyQuery {
    pub fn new(id: &str, a: u8, b: u8, difficulty: Difficulty) -> Self {
        Self {
            id: id.to_string(),
            prompt_tokens: vec![a % ALPHABET_SIZE, b % ALPHABET_SIZE],
            oracle_answer: vec![task_rule(a, b)],
            difficulty,
        }
    }

    pub fn operands(&self) -> (u8, u8) {
        (self.prompt_tokens[0], self.prompt_tokens[1])
    }

    pub fn oracle(&self) -> u8 {
        self.oracle_answer[0]
    }

    /// The sum the draft phase writes down: correct on easy queries,
    /// deterministically wrong on hard ones.
    pub fn draft_cue(&self) -> u8 {
        let (a, b) = self.operands();
        match self.difficulty {
            Difficulty::Easy => self.oracle(),
            Difficulty::Hard => {
                let offset =
                    1 + (7 * a as u16 + 13 * b as u16) % (ALPHABET_SIZE as u16 - 1);
                ((self.oracle() as u16 + offset) % ALPHABET_SIZE as u16) as u8
            }
        }
    }

    /// Whether the drafted cue survives a re-derivation check. This is the
    /// observable evidence a policy can learn to react to.
    pub fn draft_cue_consistent(&self) -> bool {
        self.draft_cue() == self.oracle()
    }

    /// Answer candidates available before any refinement. On hard queries
    /// the true answer is excluded, capping draft accuracy at zero.
    pub fn draft_menu(&self) -> Vec<u8> {
        build_menu(
            self.draft_cue(),
            self.oracle(),
            self.difficulty == Difficulty::Hard,
        )
    }

    /// Answer candidates after at least one refinement; always contains
    /// the true answer as the refreshed cue.
    pub fn refined_menu(&self) -> Vec<u8> {
        build_menu(self.oracle(), self.oracle(), false)
    }

    /// Question text carrying everything a backend needs to reconstruct
    /// the query: operands plus the draft hint.
    pub fn question_text(&self) -> String {
        let (a, b) = self.operands();
        format!(
            "combine {} and {} (draft hint: {})",
            symbol_char(a),
            symbol_char(b),
            symbol_char(self.draft_cue()),
        )
    }

    pub fn oracle_text(&self) -> String {
        symbol_char(self.oracle()).to_string()
    }
}

/// The task rule: symbol addition mod the alphabet size.
pub fn task_rule(a: u8, b: u8) -> u8 {
    ((a as u16 + b as u16) % ALPHABET_SIZE as u16) as u8
}

/// Menu of `MENU_SIZE` distinct candidates starting at `cue`, stepping by
/// a stride coprime to the alphabet so the fill order is deterministic.
/// With `exclude_oracle` the true answer is skipped.
fn build_menu(cue: u8, oracle: u8, exclude_oracle: bool) -> Vec<u8> {
    let mut menu = vec![cue];
    let mut step = 1u16;
    while menu.len() < MENU_SIZE {
        let candidate = ((cue as u16 + 5 * step) % ALPHABET_SIZE as u16) as u8;
        step += 1;
        if menu.contains(&candidate) || (exclude_oracle && candidate == oracle) {
            continue;
        }
        menu.push(candidate);
    }
    menu
}

/// Deterministic task set: `n_easy` easy then `n_hard` hard queries.
pub fn make_task_set(seed: u64, n_easy: usize, n_hard: usize) -> Vec<ToyQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(n_easy + n_hard);
    for i in 0..n_easy {
        let a = rng.gen_range(0..ALPHABET_SIZE);
        let b = rng.gen_range(0..ALPHABET_SIZE);
        queries.push(ToyQuery::new(&format!("easy-{i}"), a, b, Difficulty::Easy));
    }
    for i in 0..n_hard {
        let a = rng.gen_range(0..ALPHABET_SIZE);
        let b = rng.gen_range(0..ALPHABET_SIZE);
        queries.push(ToyQuery::new(&format!("hard-{i}"), a, b, Difficulty::Hard));
    }
    queries
}

/// Exact-match accuracy: 1 iff the answer equals the oracle sequence.
pub fn oracle_judge(query: &ToyQuery, answer: &[u8]) -> f64 {
    if answer == query.oracle_answer.as_slice() {
        1.0
    } else {
        0.0
    }
}

/// Reconstruct a query from its `question_text`. Returns `None` for text
/// this task family did not produce.
pub fn parse_question_text(text: &str) -> Option<ToyQuery> {
    let rest = text.strip_prefix("combine ")?;
    let mut chars = rest.chars();
    let a = symbol_index(chars.next()?)?;
    let rest = chars.as_str().strip_prefix(" and ")?;
    let mut chars = rest.chars();
    let b = symbol_index(chars.next()?)?;
    let rest = chars.as_str().strip_prefix(" (draft hint: ")?;
    let mut chars = rest.chars();
    let hint = symbol_index(chars.next()?)?;
    if chars.as_str() != ")" {
        return None;
    }
    let difficulty = if hint == task_rule(a, b) {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    };
    let query = ToyQuery::new("parsed", a, b, difficulty);
    // The hint must match what this query would draft, otherwise the text
    // was not produced by this task family.
    (query.draft_cue() == hint).then_some(query)
}

/// One step of a toy trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyAction {
    Emit(u8),
    OpenRefine,
    CloseRefine,
    Answer(Vec<u8>),
    Stop,
}

/// Serialize actions into tag-grammar text. Emitted symbols become
/// space-separated tokens inside the think block; refine blocks wrap their
/// emitted symbols; the answer block holds the answer symbols.
pub fn render_trajectory(actions: &[ToyAction]) -> String {
    let mut think = String::new();
    let mut answer = String::new();
    let mut in_refine = false;
    for action in actions {
        match action {
            ToyAction::Emit(symbol) => {
                if !think.is_empty() && !think.ends_with('>') {
                    think.push(' ');
                }
                think.push(symbol_char(*symbol));
            }
            ToyAction::OpenRefine => {
                if !think.is_empty() {
                    think.push(' ');
                }
                think.push_str(crate::tag_grammar::REFINE_OPEN);
                in_refine = true;
            }
            ToyAction::CloseRefine => {
                think.push_str(crate::tag_grammar::REFINE_CLOSE);
                in_refine = false;
            }
            ToyAction::Answer(symbols) => {
                for symbol in symbols {
                    if !answer.is_empty() {
                        answer.push(' ');
                    }
                    answer.push(symbol_char(*symbol));
                }
            }
            ToyAction::Stop => {}
        }
    }
    debug_assert!(!in_refine, "render called on an unclosed refine block");
    format!(
        "{}{}{}{}{}{}",
        crate::tag_grammar::THINK_OPEN,
        think,
        crate::tag_grammar::THINK_CLOSE,
        crate::tag_grammar::ANSWER_OPEN,
        answer,
        crate::tag_grammar::ANSWER_CLOSE,
    )
}
