//! Deterministic marker-based decomposition.
//!
//! Clauses are split on `,`, `;`, `then`, `and then`, `before`, `after`
//! and `while`. A clause containing `twice` is emitted two times. A clause
//! reduced to a bare `again` (or "do it again") repeats the previous clause;
//! `again` on the first clause repeats that clause. "A after B" is reordered
//! to B, A since B happens first; a leading "after B, A" already reads in
//! chronological order.

use crate::error::{Error, Result};
use crate::text::{DecomposedPrompt, Source, MAX_PARTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Connector {
    Start,
    Sequence,
    After,
}

#[derive(Debug, PartialEq)]
enum Token {
    Word(String),
    Break,
}

fn tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch == ',' || ch == ';' {
                if !word.is_empty() {
                    out.push(Token::Word(std::mem::take(&mut word)));
                }
                out.push(Token::Break);
            } else {
                word.push(ch);
            }
        }
        let word = word.trim_end_matches(['.', '!', '?']);
        if !word.is_empty() {
            out.push(Token::Word(word.to_string()));
        }
    }
    out
}

const FILLERS: [&str; 6] = ["do", "does", "it", "that", "the", "same"];

pub fn decompose_rules(full_text: &str) -> Result<DecomposedPrompt> {
    let trimmed = full_text.trim();
    if trimmed.is_empty() {
        return Err(Error::validation("prompt text is empty"));
    }

    let mut clauses: Vec<(Vec<String>, Connector)> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut connector = Connector::Start;
    let mut close = |current: &mut Vec<String>, connector: Connector, next: Connector| -> Connector {
        while current.first().is_some_and(|w| w.eq_ignore_ascii_case("and")) {
            current.remove(0);
        }
        while current.last().is_some_and(|w| w.eq_ignore_ascii_case("and")) {
            current.pop();
        }
        if current.is_empty() {
            // An empty clause passes its connector on, except that a bare
            // separator never overrides a pending `after`.
            return if connector == Connector::After { connector } else { next };
        }
        clauses.push((std::mem::take(current), connector));
        next
    };
    for tok in tokens(trimmed) {
        match tok {
            Token::Break => connector = close(&mut current, connector, Connector::Sequence),
            Token::Word(w) => match w.to_ascii_lowercase().as_str() {
                "then" | "before" | "while" => connector = close(&mut current, connector, Connector::Sequence),
                "after" => connector = close(&mut current, connector, Connector::After),
                _ => current.push(w),
            },
        }
    }
    close(&mut current, connector, Connector::Sequence);

    let mut parts: Vec<String> = Vec::new();
    for (words, conn) in clauses {
        let twice = words.iter().any(|w| w.eq_ignore_ascii_case("twice"));
        let again = words.iter().any(|w| w.eq_ignore_ascii_case("again"));
        let kept: Vec<&String> = words
            .iter()
            .filter(|w| !w.eq_ignore_ascii_case("twice") && !w.eq_ignore_ascii_case("again"))
            .collect();
        let bare = kept
            .iter()
            .all(|w| FILLERS.iter().any(|f| w.eq_ignore_ascii_case(f)));
        let clause = kept.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
        let mut emitted: Vec<String> = Vec::new();
        if again && bare {
            if let Some(prev) = parts.last() {
                emitted.push(prev.clone());
            }
        } else if !clause.is_empty() {
            emitted.push(clause.clone());
            if twice || (again && parts.is_empty()) {
                emitted.push(clause);
            }
        }
        if emitted.is_empty() {
            continue;
        }
        if conn == Connector::After && !parts.is_empty() {
            let at = parts.len() - 1;
            for (k, e) in emitted.into_iter().enumerate() {
                parts.insert(at + k, e);
            }
        } else {
            parts.extend(emitted);
        }
    }
    parts.truncate(MAX_PARTS);
    if parts.is_empty() {
        parts.push(trimmed.to_string());
    }
    DecomposedPrompt::new(full_text, parts, Source::Rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(t: &str) -> Vec<String> {
        decompose_rules(t).unwrap().parts
    }

    #[test]
    fn no_markers_single_part() {
        assert_eq!(parts("a man walks forward"), vec!["a man walks forward"]);
    }

    #[test]
    fn sequence_in_textual_order() {
        assert_eq!(
            parts("walks forward, then squats, then stands back up"),
            vec!["walks forward", "squats", "stands back up"]
        );
        assert_eq!(parts("jumps and then sits; rests"), vec!["jumps", "sits", "rests"]);
        assert_eq!(parts("waves while walking"), vec!["waves", "walking"]);
        assert_eq!(parts("waves before walking"), vec!["waves", "walking"]);
    }

    #[test]
    fn repetition() {
        assert_eq!(parts("waves twice"), vec!["waves", "waves"]);
        assert_eq!(parts("squats, then does it again"), vec!["squats", "squats"]);
        assert_eq!(parts("squats, then walks, then squats again"), vec!["squats", "walks", "squats"]);
        assert_eq!(parts("waves again"), vec!["waves", "waves"]);
    }

    #[test]
    fn after_reorders_to_chronology() {
        assert_eq!(parts("a person squats after a person waves"), vec!["a person waves", "a person squats"]);
        assert_eq!(parts("after waving, the person squats"), vec!["waving", "the person squats"]);
        assert_eq!(parts("walks, then sits after jumping"), vec!["walks", "jumping", "sits"]);
    }

    #[test]
    fn empty_rejected_and_clamped() {
        assert!(decompose_rules("   ").is_err());
        let long = vec!["step"; 30].join(", then ");
        assert_eq!(parts(&long).len(), MAX_PARTS);
        assert_eq!(parts("then"), vec!["then"]);
    }

    #[test]
    fn idempotent_on_parts() {
        for t in [
            "a person walks forward, then a person squats",
            "waves twice, then after a jump, sits again",
            "runs; turns left and then waves",
        ] {
            for p in parts(t) {
                assert_eq!(parts(&p), vec![p.clone()], "{t}");
            }
        }
    }
}
