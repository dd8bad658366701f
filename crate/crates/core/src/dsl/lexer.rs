use super::{Diagnostic, Span};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    LBrace,
    RBrace,
    Str(String),
    Ident(String),
    Number(u64),
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::LBrace => "`{`".to_string(),
            Tok::RBrace => "`}`".to_string(),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Eof => "end of file".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub(crate) fn tokenize(text: &str, source: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let span = Span::new(line, col);
        match c {
            c if c.is_whitespace() => {
                bump!();
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '{' => {
                bump!();
                tokens.push(Token { tok: Tok::LBrace, span });
            }
            '}' => {
                bump!();
                tokens.push(Token { tok: Tok::RBrace, span });
            }
            '"' => {
                bump!();
                let mut value = String::new();
                loop {
                    match bump!() {
                        None => {
                            return Err(Diagnostic::error(source, span, "unterminated string"));
                        }
                        Some('"') => break,
                        Some('\\') => {
                            let esc_span = Span::new(line, col);
                            match bump!() {
                                Some('"') => value.push('"'),
                                Some('\\') => value.push('\\'),
                                Some(other) => {
                                    return Err(Diagnostic::error(
                                        source,
                                        esc_span,
                                        format!("unknown escape `\\{other}` in string"),
                                    ));
                                }
                                None => {
                                    return Err(Diagnostic::error(source, span, "unterminated string"));
                                }
                            }
                        }
                        Some(ch) => value.push(ch),
                    }
                }
                tokens.push(Token { tok: Tok::Str(value), span });
            }
            c if c.is_ascii_digit() => {
                let mut digits = String::new();
                while let Some(&d) = chars.peek() {
                    if !d.is_ascii_digit() {
                        break;
                    }
                    digits.push(d);
                    bump!();
                }
                let n = digits
                    .parse::<u64>()
                    .map_err(|_| Diagnostic::error(source, span, format!("number {digits} is too large")))?;
                tokens.push(Token { tok: Tok::Number(n), span });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut word = String::new();
                while let Some(&d) = chars.peek() {
                    if !(d.is_ascii_alphanumeric() || d == '_') {
                        break;
                    }
                    word.push(d);
                    bump!();
                }
                tokens.push(Token { tok: Tok::Ident(word), span });
            }
            other => {
                return Err(Diagnostic::error(
                    source,
                    span,
                    format!("unexpected character {other:?}"),
                ));
            }
        }
    }
    tokens.push(Token { tok: Tok::Eof, span: Span::new(line, col) });
    Ok(tokens)
}
