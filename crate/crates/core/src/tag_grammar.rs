//! Parser and constraint checker for tagged reasoning traces.
//!
//! A well-formed trace looks like
//! `<think>...<refine>...</refine>...</think><answer>...</answer>`: one think
//! pair, one answer pair after it, and any number of non-nested refine pairs
//! inside the think block. [`parse_trace`] is total over arbitrary input and
//! never fails; malformed structure simply yields fewer recognized spans and
//! a non-empty [`ParsedTrace::outside_text`]. [`check_constraints`] reduces a
//! parse to the three booleans that drive the format reward:
//!
//! - `c1`: both the think pair and the answer pair are present and closed.
//! - `c2`: every refine tag occurrence belongs to a properly paired,
//!   non-nested refine span inside the think block (vacuously true with no
//!   refine tags at all).
//! - `c3`: the think block precedes the answer block and nothing but
//!   whitespace appears outside the recognized structure.
//!
//! Tags are matched as exact byte literals; there is no case folding and no
//! attribute syntax. All spans are byte ranges into the original text.

use std::ops::Range;

use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const REFINE_OPEN: &str = "<refine>";
pub const REFINE_CLOSE: &str = "</refine>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Byte range of a span's content (tags excluded) within the raw text.
pub type Span = Range<usize>;

/// Structural decomposition of a trace.
///
/// Spans cover content only; the enclosing tag literals sit immediately
/// outside each range. Recognized spans never overlap except that every
/// refine span is contained in the think span. Text not covered by the
/// recognized structure (stray tags included) is concatenated into
/// `outside_text` in order of appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub raw_text: String,
    pub think_span: Option<Span>,
    pub answer_span: Option<Span>,
    pub refine_spans: Vec<Span>,
    pub outside_text: String,
}

impl ParsedTrace {
    pub fn think_text(&self) -> Option<&str> {
        self.think_span.clone().map(|s| &self.raw_text[s])
    }

    pub fn answer_text(&self) -> Option<&str> {
        self.answer_span.clone().map(|s| &self.raw_text[s])
    }

    pub fn refine_count(&self) -> usize {
        self.refine_spans.len()
    }
}

/// Outcome of the three structural checks. Each flag is computed from the
/// parse alone, independently of the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintReport {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
}

impl ConstraintReport {
    pub fn all(&self) -> bool {
        self.c1 && self.c2 && self.c3
    }
}

/// One refine segment with the think text that precedes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineSegment {
    /// Content between the refine tags.
    pub content: String,
    /// Think text from the start of the think block up to this segment's
    /// open tag, exactly as it appears (earlier refine segments included).
    pub preceding_context: String,
    /// Zero-based position of this segment among the trace's refine spans.
    pub index: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("refine offset {offset} exceeds think text length {len}")]
    OffsetOutOfBounds { offset: usize, len: usize },
    #[error("refine offsets must be non-decreasing (offset {offset} after {previous})")]
    UnorderedOffsets { offset: usize, previous: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    ThinkOpen,
    ThinkClose,
    RefineOpen,
    RefineClose,
    AnswerOpen,
    AnswerClose,
}

const TAG_LITERALS: [(&str, TagKind); 6] = [
    (THINK_OPEN, TagKind::ThinkOpen),
    (THINK_CLOSE, TagKind::ThinkClose),
    (REFINE_OPEN, TagKind::RefineOpen),
    (REFINE_CLOSE, TagKind::RefineClose),
    (ANSWER_OPEN, TagKind::AnswerOpen),
    (ANSWER_CLOSE, TagKind::AnswerClose),
];

/// All tag literal occurrences in `text`, in order.
fn lex(text: &str) -> Vec<(usize, TagKind, usize)> {
    let mut tokens = Vec::new();
    for (pos, _) in text.match_indices('<') {
        for (literal, kind) in TAG_LITERALS {
            if text[pos..].starts_with(literal) {
                tokens.push((pos, kind, literal.len()));
                break;
            }
        }
    }
    tokens
}

enum Mode {
    Outside,
    /// Inside an open think pair; `refine` holds an open refine pair's
    /// (content_start, open_tag_start) while one is open.
    InThink {
        open_start: usize,
        content_start: usize,
        pending_refines: Vec<Span>,
        refine: Option<(usize, usize)>,
    },
    InAnswer {
        open_start: usize,
        content_start: usize,
    },
}

/// Parse a trace into recognized spans plus leftover text.
///
/// Recognition is a single left-to-right pass: the first think pair and the
/// first answer pair win; later duplicates, tags nested in the wrong place,
/// and unclosed tags are left as plain text. A refine pair only becomes a
/// span when it is properly closed inside a think pair that itself closes.
pub fn parse_trace(text: &str) -> ParsedTrace {
    let tokens = lex(text);
    let mut mode = Mode::Outside;
    let mut think: Option<(Span, Span)> = None; // (content, extent incl. tags)
    let mut answer: Option<(Span, Span)> = None;
    let mut refine_spans = Vec::new();

    for (pos, kind, len) in tokens {
        match &mut mode {
            Mode::Outside => match kind {
                TagKind::ThinkOpen if think.is_none() => {
                    mode = Mode::InThink {
                        open_start: pos,
                        content_start: pos + len,
                        pending_refines: Vec::new(),
                        refine: None,
                    };
                }
                TagKind::AnswerOpen if answer.is_none() => {
                    mode = Mode::InAnswer {
                        open_start: pos,
                        content_start: pos + len,
                    };
                }
                _ => {} // stray tag; stays outside text
            },
            Mode::InThink {
                open_start,
                content_start,
                pending_refines,
                refine,
            } => match kind {
                TagKind::RefineOpen if refine.is_none() => {
                    *refine = Some((pos + len, pos));
                }
                TagKind::RefineClose => {
                    if let Some((ref_content_start, _)) = refine.take() {
                        pending_refines.push(ref_content_start..pos);
                    }
                    // Without an open refine the close tag is think content.
                }
                TagKind::ThinkClose => {
                    // An unclosed refine is abandoned: its open tag stays
                    // think content and never becomes a span.
                    think = Some((*content_start..pos, *open_start..pos + len));
                    refine_spans = std::mem::take(pending_refines);
                    mode = Mode::Outside;
                }
                // Think opens, answer tags, and nested refine opens are
                // content inside the think block.
                _ => {}
            },
            Mode::InAnswer {
                open_start,
                content_start,
            } => {
                if kind == TagKind::AnswerClose {
                    answer = Some((*content_start..pos, *open_start..pos + len));
                    mode = Mode::Outside;
                }
                // Any other tag is answer content.
            }
        }
    }

    // Unclosed think/answer at end of input yield no spans; their text falls
    // through to outside_text below.
    let mut extents: Vec<Span> = Vec::new();
    if let Some((_, extent)) = &think {
        extents.push(extent.clone());
    }
    if let Some((_, extent)) = &answer {
        extents.push(extent.clone());
    }
    extents.sort_by_key(|e| e.start);

    let mut outside_text = String::new();
    let mut cursor = 0;
    for extent in &extents {
        outside_text.push_str(&text[cursor..extent.start]);
        cursor = extent.end;
    }
    outside_text.push_str(&text[cursor..]);

    ParsedTrace {
        raw_text: text.to_string(),
        think_span: think.map(|(content, _)| content),
        answer_span: answer.map(|(content, _)| content),
        refine_spans,
        outside_text,
    }
}

/// Evaluate the three structural constraints on a parse.
pub fn check_constraints(trace: &ParsedTrace) -> ConstraintReport {
    let c1 = trace.think_span.is_some() && trace.answer_span.is_some();

    // c2: every refine tag occurrence must be the open or close tag of a
    // recognized refine span. Occurrences inside span content (nested opens,
    // bare closes) or outside the think block have no matching span tag.
    let open_positions: Vec<usize> = trace
        .refine_spans
        .iter()
        .map(|s| s.start - REFINE_OPEN.len())
        .collect();
    let close_positions: Vec<usize> = trace.refine_spans.iter().map(|s| s.end).collect();
    let c2 = trace
        .raw_text
        .match_indices(REFINE_OPEN)
        .all(|(pos, _)| open_positions.contains(&pos))
        && trace
            .raw_text
            .match_indices(REFINE_CLOSE)
            .all(|(pos, _)| close_positions.contains(&pos));

    let c3 = match (&trace.think_span, &trace.answer_span) {
        (Some(think), Some(answer)) => {
            think.end < answer.start && trace.outside_text.chars().all(char::is_whitespace)
        }
        _ => false,
    };

    ConstraintReport { c1, c2, c3 }
}

/// Format reward: `2 * (c1 * c2 * c3) - 1`, i.e. +1 when all three
/// constraints hold and -1 otherwise.
pub fn format_reward(report: &ConstraintReport) -> f64 {
    if report.all() {
        1.0
    } else {
        -1.0
    }
}

/// Collect the refine segments of a parse in order of appearance.
pub fn extract_refinements(trace: &ParsedTrace) -> Vec<RefineSegment> {
    let think_start = match &trace.think_span {
        Some(span) => span.start,
        None => return Vec::new(),
    };
    trace
        .refine_spans
        .iter()
        .enumerate()
        .map(|(index, span)| RefineSegment {
            content: trace.raw_text[span.clone()].to_string(),
            preceding_context: trace.raw_text[think_start..span.start - REFINE_OPEN.len()]
                .to_string(),
            index,
        })
        .collect()
}

/// Assemble a trace from parts, inserting each refine segment at the given
/// byte offset within the think text. Offsets must be non-decreasing and lie
/// within the think text; segment contents are inserted verbatim.
pub fn render_trace(
    think: &str,
    refines: &[(&str, usize)],
    answer: &str,
) -> Result<String, RenderError> {
    let mut previous = 0usize;
    for &(_, offset) in refines {
        if offset > think.len() {
            return Err(RenderError::OffsetOutOfBounds {
                offset,
                len: think.len(),
            });
        }
        if offset < previous {
            return Err(RenderError::UnorderedOffsets {
                offset,
                previous,
            });
        }
        previous = offset;
    }

    let mut out = String::with_capacity(think.len() + answer.len() + 64);
    out.push_str(THINK_OPEN);
    let mut cursor = 0;
    for &(content, offset) in refines {
        out.push_str(&think[cursor..offset]);
        out.push_str(REFINE_OPEN);
        out.push_str(content);
        out.push_str(REFINE_CLOSE);
        cursor = offset;
    }
    out.push_str(&think[cursor..]);
    out.push_str(THINK_CLOSE);
    out.push_str(ANSWER_OPEN);
    out.push_str(answer);
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constraints(text: &str) -> ConstraintReport {
        check_constraints(&parse_trace(text))
    }

    #[test]
    fn well_formed_trace_parses_into_spans() {
        let text = "<think>a<refine>b</refine>c</think><answer>d</answer>";
        let trace = parse_trace(text);
        assert_eq!(trace.think_text(), Some("a<refine>b</refine>c"));
        assert_eq!(trace.answer_text(), Some("d"));
        assert_eq!(trace.refine_spans.len(), 1);
        assert_eq!(&trace.raw_text[trace.refine_spans[0].clone()], "b");
        assert_eq!(trace.outside_text, "");
        let report = check_constraints(&trace);
        assert!(report.c1 && report.c2 && report.c3);
        assert_eq!(format_reward(&report), 1.0);
    }

    #[test]
    fn refine_outside_think_fails_c2() {
        let report = constraints("<think>a</think><refine>b</refine><answer>d</answer>");
        assert!(report.c1);
        assert!(!report.c2);
        assert_eq!(format_reward(&report), -1.0);
    }

    #[test]
    fn answer_before_think_fails_c3() {
        let report = constraints("<answer>d</answer><think>a</think>");
        assert!(report.c1);
        assert!(report.c2);
        assert!(!report.c3);
    }

    #[test]
    fn truncated_trace_has_no_spans() {
        let trace = parse_trace("<think>a<refine>b");
        assert_eq!(trace.think_span, None);
        assert_eq!(trace.answer_span, None);
        assert!(trace.refine_spans.is_empty());
        assert_eq!(trace.outside_text, "<think>a<refine>b");
        assert_eq!(format_reward(&check_constraints(&trace)), -1.0);
    }

    #[test]
    fn whitespace_between_blocks_is_accepted() {
        let report = constraints("<think>a</think>\n\n<answer>d</answer>");
        assert!(report.all());
    }

    #[test]
    fn non_whitespace_top_level_text_fails_c3() {
        let report = constraints("<think>a</think> x <answer>d</answer>");
        assert!(report.c1 && report.c2);
        assert!(!report.c3);
    }

    #[test]
    fn duplicate_think_pair_fails_c3() {
        let report = constraints("<think>a</think><think>b</think><answer>d</answer>");
        assert!(report.c1);
        assert!(!report.c3);
    }

    #[test]
    fn nested_refine_open_fails_c2() {
        let text = "<think><refine>a<refine>b</refine></think><answer>d</answer>";
        let trace = parse_trace(text);
        // The inner open is refine content; the single span closes at the
        // first close tag.
        assert_eq!(trace.refine_spans.len(), 1);
        let report = check_constraints(&trace);
        assert!(!report.c2);
    }

    #[test]
    fn bare_refine_close_inside_think_fails_c2() {
        let report = constraints("<think>a</refine>b</think><answer>d</answer>");
        assert!(report.c1);
        assert!(!report.c2);
        assert!(report.c3);
    }

    #[test]
    fn unclosed_refine_fails_c2_but_not_c1() {
        let report = constraints("<think>a<refine>b</think><answer>d</answer>");
        assert!(report.c1);
        assert!(!report.c2);
    }

    #[test]
    fn answer_pair_inside_think_is_content() {
        let trace = parse_trace("<think>a<answer>b</answer>c</think>");
        assert_eq!(trace.think_text(), Some("a<answer>b</answer>c"));
        assert_eq!(trace.answer_span, None);
        assert!(!check_constraints(&trace).c1);
    }

    #[test]
    fn think_pair_inside_answer_is_content() {
        let trace = parse_trace("<answer>a<think>b</think>c</answer>");
        assert_eq!(trace.answer_text(), Some("a<think>b</think>c"));
        assert_eq!(trace.think_span, None);
    }

    #[test]
    fn empty_input_fails_everything_but_c2() {
        let report = constraints("");
        assert!(!report.c1);
        assert!(report.c2);
        assert!(!report.c3);
    }

    #[test]
    fn extract_refinements_keeps_order_and_context() {
        let text = "<think>start<refine>one</refine>mid<refine>two</refine></think><answer>d</answer>";
        let segments = extract_refinements(&parse_trace(text));
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].content, "one");
        assert_eq!(segments[0].preceding_context, "start");
        assert_eq!(segments[0].index, 0);
        assert_eq!(segments[1].content, "two");
        assert_eq!(segments[1].preceding_context, "start<refine>one</refine>mid");
    }

    #[test]
    fn render_trace_roundtrips() {
        let rendered = render_trace("abcdef", &[("xy", 3), ("z", 5)], "ok").unwrap();
        assert_eq!(
            rendered,
            "<think>abc<refine>xy</refine>de<refine>z</refine>f</think><answer>ok</answer>"
        );
        let trace = parse_trace(&rendered);
        let segments = extract_refinements(&trace);
        assert_eq!(segments[0].content, "xy");
        assert_eq!(segments[1].content, "z");
        assert!(check_constraints(&trace).all());
    }

    #[test]
    fn render_trace_rejects_bad_offsets() {
        assert_eq!(
            render_trace("abc", &[("x", 4)], "ok"),
            Err(RenderError::OffsetOutOfBounds { offset: 4, len: 3 })
        );
        assert_eq!(
            render_trace("abc", &[("x", 2), ("y", 1)], "ok"),
            Err(RenderError::UnorderedOffsets {
                offset: 1,
                previous: 2
            })
        );
    }

    #[test]
    fn tags_are_case_sensitive_exact_literals() {
        let trace = parse_trace("<THINK>a</THINK><answer>d</answer>");
        assert_eq!(trace.think_span, None);
        assert!(!check_constraints(&trace).c1);
    }

    #[test]
    fn span_offsets_are_byte_accurate_with_multibyte_text() {
        let text = "<think>héllo</think><answer>día</answer>";
        let trace = parse_trace(text);
        assert_eq!(trace.think_text(), Some("héllo"));
        assert_eq!(trace.answer_text(), Some("día"));
        assert!(check_constraints(&trace).all());
    }
}
