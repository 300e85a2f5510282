//! A small Python lexer: enough structure to find comments, string
//! literals, names and logical line ends. Not a full tokenizer.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal at byte {0}")]
    UnterminatedString(usize),
    #[error("unbalanced bracket at byte {0}")]
    UnbalancedBracket(usize),
    #[error("unclosed bracket at end of input")]
    UnclosedBracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Name,
    Number,
    Str,
    Comment,
    /// Line break. `logical` is false inside brackets.
    Newline {
        logical: bool,
    },
    /// Horizontal whitespace or a backslash continuation.
    Space,
    Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: Kind,
    pub text: &'a str,
    /// Bracket nesting depth; brackets carry the depth outside them.
    pub depth: usize,
}

impl Token<'_> {
    pub fn is_trivia(&self) -> bool {
        matches!(self.kind, Kind::Space | Kind::Comment | Kind::Newline { .. })
    }
}

fn is_string_prefix(s: &str) -> bool {
    s.len() <= 2
        && s.chars()
            .all(|c| matches!(c.to_ascii_lowercase(), 'r' | 'b' | 'u' | 'f'))
}

pub fn lex(src: &str) -> Result<Vec<Token<'_>>, LexError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = src[i..].chars().next().expect("in bounds");
        let kind = match c {
            '#' => {
                while i < bytes.len() && bytes[i] != b'\n' && bytes[i] != b'\r' {
                    i += 1;
                }
                Kind::Comment
            }
            '\r' | '\n' => {
                i += if src[i..].starts_with("\r\n") { 2 } else { 1 };
                Kind::Newline { logical: depth == 0 }
            }
            ' ' | '\t' | '\x0c' => {
                while i < bytes.len() && matches!(bytes[i], b' ' | b'\t' | b'\x0c') {
                    i += 1;
                }
                Kind::Space
            }
            '\\' if src[i + 1..].starts_with('\n') || src[i + 1..].starts_with("\r\n") => {
                i += if src[i + 1..].starts_with('\n') { 2 } else { 3 };
                Kind::Space
            }
            '"' | '\'' => {
                i = scan_string(src, i)?;
                Kind::Str
            }
            c if c.is_alphabetic() || c == '_' => {
                while i < bytes.len() {
                    let ch = src[i..].chars().next().expect("in bounds");
                    if ch.is_alphanumeric() || ch == '_' {
                        i += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                let word = &src[start..i];
                if i < bytes.len() && matches!(bytes[i], b'"' | b'\'') && is_string_prefix(word) {
                    i = scan_string(src, i)?;
                    Kind::Str
                } else {
                    Kind::Name
                }
            }
            c if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) => {
                i += 1;
                while i < bytes.len() {
                    let b = bytes[i];
                    let exp_sign = matches!(b, b'+' | b'-') && matches!(bytes[i - 1], b'e' | b'E');
                    if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                Kind::Number
            }
            '(' | '[' | '{' => {
                i += 1;
                tokens.push(Token {
                    kind: Kind::Op,
                    text: &src[start..i],
                    depth,
                });
                depth += 1;
                continue;
            }
            ')' | ']' | '}' => {
                depth = depth.checked_sub(1).ok_or(LexError::UnbalancedBracket(start))?;
                i += 1;
                Kind::Op
            }
            c => {
                i += c.len_utf8();
                Kind::Op
            }
        };
        tokens.push(Token {
            kind,
            text: &src[start..i],
            depth,
        });
    }
    if depth != 0 {
        return Err(LexError::UnclosedBracket);
    }
    Ok(tokens)
}

/// Returns the byte index just past the string literal whose opening quote
/// is at `at`.
fn scan_string(src: &str, at: usize) -> Result<usize, LexError> {
    let bytes = src.as_bytes();
    let quote = bytes[at];
    let triple = bytes.get(at + 1) == Some(&quote) && bytes.get(at + 2) == Some(&quote);
    let mut i = at + if triple { 3 } else { 1 };
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'\\' {
            // Also true of raw strings: the escaped quote never closes.
            i += 2;
            continue;
        }
        if !triple && (b == b'\n' || b == b'\r') {
            return Err(LexError::UnterminatedString(at));
        }
        if b == quote {
            if !triple {
                return Ok(i + 1);
            }
            if bytes.get(i + 1) == Some(&quote) && bytes.get(i + 2) == Some(&quote) {
                return Ok(i + 3);
            }
        }
        i += 1;
    }
    Err(LexError::UnterminatedString(at))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<(Kind, &str)> {
        lex(src).unwrap().into_iter().map(|t| (t.kind, t.text)).collect()
    }

    #[test]
    fn tokens_tile_the_source() {
        let src = "def f(a, b=1.5e-3):\n    s = r'\\d+' + \"\"\"x\n\"\"\"  # note\n    return f'{a}'\n";
        let toks = lex(src).unwrap();
        let joined: String = toks.iter().map(|t| t.text).collect();
        assert_eq!(joined, src);
    }

    #[test]
    fn recognizes_strings_comments_and_numbers() {
        let k = kinds("x = b'ab' # c\n");
        assert!(k.contains(&(Kind::Str, "b'ab'")));
        assert!(k.contains(&(Kind::Comment, "# c")));
        assert_eq!(kinds("1.5e-3")[0], (Kind::Number, "1.5e-3"));
        assert!(kinds("'#not comment'").iter().all(|(k, _)| *k == Kind::Str));
    }

    #[test]
    fn newlines_inside_brackets_are_not_logical() {
        let toks = lex("f(\n1)\n").unwrap();
        let nl: Vec<_> = toks
            .iter()
            .filter_map(|t| match t.kind {
                Kind::Newline { logical } => Some(logical),
                _ => None,
            })
            .collect();
        assert_eq!(nl, vec![false, true]);
    }

    #[test]
    fn bracket_depth_is_recorded() {
        let toks = lex("print('a', g('b'))").unwrap();
        let depths: Vec<_> = toks.iter().filter(|t| t.kind == Kind::Str).map(|t| t.depth).collect();
        assert_eq!(depths, vec![1, 2]);
    }

    #[test]
    fn escaped_quotes_do_not_close() {
        assert_eq!(kinds(r#""a\"b""#), vec![(Kind::Str, r#""a\"b""#)]);
    }

    #[test]
    fn errors_on_malformed_input() {
        assert_eq!(lex("'abc\n"), Err(LexError::UnterminatedString(0)));
        assert_eq!(lex("x)"), Err(LexError::UnbalancedBracket(1)));
        assert_eq!(lex("f(x"), Err(LexError::UnclosedBracket));
        assert!(lex("'''open").is_err());
    }
}
