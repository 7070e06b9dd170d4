//! Surface-syntax parser: s-expressions with `do`, `when` and `seq` sugar.
//!
//! Surface programs cannot name trusted-computing-base constructors; any
//! unknown head is a parse error. Bare identifiers resolve to lattice
//! element names first and variables otherwise; `(var x)` always means the
//! variable `x`.

use std::rc::Rc;

use thiserror::Error;

use crate::lattice::Lattice;
use crate::term::{build, fresh_var, Flavor, LabelBinOp, Term, TermRef};

#[derive(Debug, Error)]
#[error("parse error at {line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone)]
enum SExp {
    Atom(String, usize, usize),
    List(Vec<SExp>, usize, usize),
}

impl SExp {
    fn pos(&self) -> (usize, usize) {
        match self {
            SExp::Atom(_, l, c) | SExp::List(_, l, c) => (*l, *c),
        }
    }
}

fn err<T>(pos: (usize, usize), msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line: pos.0,
        col: pos.1,
        msg: msg.into(),
    })
}

struct Lexer<'a> {
    src: &'a str,
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
    consumed: usize,
}

#[derive(Debug)]
enum Token {
    LParen(usize, usize),
    RParen(usize, usize),
    Atom(String, usize, usize),
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src,
            chars: src.chars().peekable(),
            line: 1,
            col: 1,
            consumed: 0,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        self.consumed += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn next_token(&mut self) -> Result<Option<Token>, ParseError> {
        loop {
            match self.chars.peek() {
                None => return Ok(None),
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some(';') => {
                    while let Some(c) = self.bump() {
                        if c == '\n' {
                            break;
                        }
                    }
                }
                Some('(') => {
                    let (l, c) = (self.line, self.col);
                    self.bump();
                    return Ok(Some(Token::LParen(l, c)));
                }
                Some(')') => {
                    let (l, c) = (self.line, self.col);
                    self.bump();
                    return Ok(Some(Token::RParen(l, c)));
                }
                Some(_) => {
                    let (l, c) = (self.line, self.col);
                    let start = self.consumed;
                    while let Some(&ch) = self.chars.peek() {
                        if ch.is_whitespace() || ch == '(' || ch == ')' || ch == ';' {
                            break;
                        }
                        self.bump();
                    }
                    let atom = self.src[start..self.consumed].to_string();
                    return Ok(Some(Token::Atom(atom, l, c)));
                }
            }
        }
    }
}

fn parse_sexp(src: &str) -> Result<SExp, ParseError> {
    let mut lex = Lexer::new(src);
    let mut stack: Vec<(Vec<SExp>, usize, usize)> = Vec::new();
    let mut top: Option<SExp> = None;
    loop {
        let tok = lex.next_token()?;
        match tok {
            None => break,
            Some(Token::LParen(l, c)) => stack.push((Vec::new(), l, c)),
            Some(Token::RParen(l, c)) => {
                let (items, ll, lc) = match stack.pop() {
                    Some(v) => v,
                    None => return err((l, c), "unmatched `)`"),
                };
                let node = SExp::List(items, ll, lc);
                match stack.last_mut() {
                    Some((parent, _, _)) => parent.push(node),
                    None => {
                        if top.is_some() {
                            return err((l, c), "trailing content after top-level form");
                        }
                        top = Some(node);
                    }
                }
            }
            Some(Token::Atom(a, l, c)) => {
                let node = SExp::Atom(a, l, c);
                match stack.last_mut() {
                    Some((parent, _, _)) => parent.push(node),
                    None => {
                        if top.is_some() {
                            return err((l, c), "trailing content after top-level form");
                        }
                        top = Some(node);
                    }
                }
            }
        }
    }
    if let Some((_, l, c)) = stack.pop() {
        return err((l, c), "unclosed `(`");
    }
    match top {
        Some(s) => Ok(s),
        None => err((1, 1), "empty input"),
    }
}

/// Parse a surface program against the given lattice.
pub fn parse_program(lat: &Lattice, src: &str) -> Result<TermRef, ParseError> {
    let sexp = parse_sexp(src)?;
    lower(lat, &sexp)
}

fn flavor(s: &SExp) -> Result<Flavor, ParseError> {
    match s {
        SExp::Atom(a, _, _) if a == "fi" => Ok(Flavor::Fi),
        SExp::Atom(a, _, _) if a == "fs" => Ok(Flavor::Fs),
        _ => err(s.pos(), "expected flavor token `fi` or `fs`"),
    }
}

fn ident(s: &SExp) -> Result<String, ParseError> {
    match s {
        SExp::Atom(a, _, _) => Ok(a.clone()),
        _ => err(s.pos(), "expected identifier"),
    }
}

fn lower(lat: &Lattice, s: &SExp) -> Result<TermRef, ParseError> {
    match s {
        SExp::Atom(a, l, c) => {
            if let Some(lbl) = lat.label(a) {
                return Ok(build::label_lit(lbl));
            }
            if a.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '\'') {
                Ok(build::var(a))
            } else {
                err((*l, *c), format!("invalid identifier `{a}`"))
            }
        }
        SExp::List(items, l, c) => {
            let pos = (*l, *c);
            let head = match items.first() {
                Some(SExp::Atom(h, _, _)) => h.as_str(),
                Some(other) => return err(other.pos(), "expected a form head"),
                None => return err(pos, "empty form"),
            };
            let args = &items[1..];
            let arity = |n: usize| -> Result<(), ParseError> {
                if args.len() == n {
                    Ok(())
                } else {
                    err(pos, format!("`{head}` expects {n} argument(s), got {}", args.len()))
                }
            };
            match head {
                "lam" => {
                    arity(2)?;
                    Ok(build::lam(&ident(&args[0])?, lower(lat, &args[1])?))
                }
                "app" => {
                    if args.len() < 2 {
                        return err(pos, "`app` expects at least 2 arguments");
                    }
                    let mut t = lower(lat, &args[0])?;
                    for a in &args[1..] {
                        t = build::app(t, lower(lat, a)?);
                    }
                    Ok(t)
                }
                "fix" => {
                    arity(1)?;
                    Ok(Rc::new(Term::Fix(lower(lat, &args[0])?)))
                }
                "if" => {
                    arity(3)?;
                    Ok(build::if_(
                        lower(lat, &args[0])?,
                        lower(lat, &args[1])?,
                        lower(lat, &args[2])?,
                    ))
                }
                "bool" => {
                    arity(1)?;
                    match ident(&args[0])?.as_str() {
                        "true" => Ok(build::bool_lit(true)),
                        "false" => Ok(build::bool_lit(false)),
                        other => err(args[0].pos(), format!("expected true/false, got `{other}`")),
                    }
                }
                "unit" => {
                    arity(0)?;
                    Ok(build::unit())
                }
                "var" => {
                    arity(1)?;
                    Ok(build::var(&ident(&args[0])?))
                }
                "lop" => {
                    arity(3)?;
                    let op = match ident(&args[0])?.as_str() {
                        "join" => LabelBinOp::Join,
                        "meet" => LabelBinOp::Meet,
                        "flows" => LabelBinOp::Flows,
                        other => {
                            return err(args[0].pos(), format!("unknown label op `{other}`"))
                        }
                    };
                    Ok(build::lop(op, lower(lat, &args[1])?, lower(lat, &args[2])?))
                }
                "return" => {
                    arity(1)?;
                    Ok(build::ret(lower(lat, &args[0])?))
                }
                "bind" => {
                    arity(2)?;
                    Ok(build::bind(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "do" => lower_do(lat, args, pos),
                "getLabel" => {
                    arity(0)?;
                    Ok(build::get_label())
                }
                "label" => {
                    arity(2)?;
                    Ok(build::label(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "unlabel" => {
                    arity(1)?;
                    Ok(build::unlabel(lower(lat, &args[0])?))
                }
                "labelOf" => {
                    arity(1)?;
                    Ok(build::label_of(lower(lat, &args[0])?))
                }
                "toLabeled" => {
                    arity(2)?;
                    Ok(build::to_labeled(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "newRef" => {
                    arity(3)?;
                    Ok(build::new_ref(
                        flavor(&args[0])?,
                        lower(lat, &args[1])?,
                        lower(lat, &args[2])?,
                    ))
                }
                "readRef" => {
                    arity(2)?;
                    Ok(build::read_ref(flavor(&args[0])?, lower(lat, &args[1])?))
                }
                "writeRef" => {
                    arity(3)?;
                    Ok(build::write_ref(
                        flavor(&args[0])?,
                        lower(lat, &args[1])?,
                        lower(lat, &args[2])?,
                    ))
                }
                "labelOfRef" => {
                    arity(2)?;
                    Ok(build::label_of_ref(flavor(&args[0])?, lower(lat, &args[1])?))
                }
                "copyRef" => {
                    arity(2)?;
                    Ok(build::copy_ref(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "upgrade" => {
                    arity(2)?;
                    Ok(build::upgrade(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "downgrade" => {
                    arity(2)?;
                    Ok(build::downgrade(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "withRefs" => {
                    arity(2)?;
                    Ok(build::with_refs(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "fork" => {
                    arity(1)?;
                    Ok(build::fork(lower(lat, &args[0])?))
                }
                "bag" => {
                    let elems = args
                        .iter()
                        .map(|a| lower(lat, a))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(build::bag(elems))
                }
                "when" => {
                    arity(2)?;
                    Ok(build::when(lower(lat, &args[0])?, lower(lat, &args[1])?))
                }
                "seq" => {
                    if args.len() < 2 {
                        return err(pos, "`seq` expects at least 2 arguments");
                    }
                    let mut terms = args
                        .iter()
                        .map(|a| lower(lat, a))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mut t = terms.pop().expect("nonempty");
                    while let Some(prev) = terms.pop() {
                        t = build::seq(prev, t);
                    }
                    Ok(t)
                }
                other => err(pos, format!("unknown form `{other}`")),
            }
        }
    }
}

/// `(do step... last)` where a step is `(x <- e)` or a plain expression.
fn lower_do(lat: &Lattice, steps: &[SExp], pos: (usize, usize)) -> Result<TermRef, ParseError> {
    if steps.is_empty() {
        return err(pos, "`do` expects at least one step");
    }
    let (last, init) = steps.split_last().expect("nonempty");
    if let Some((x, _)) = binder_step(last) {
        return err(last.pos(), format!("last `do` step cannot bind (`{x} <-`)"));
    }
    let mut t = lower(lat, last)?;
    for step in init.iter().rev() {
        t = match binder_step(step) {
            Some((x, e)) => build::bind_to(lower(lat, e)?, &x, t),
            None => build::bind(lower(lat, step)?, build::lam(&fresh_var("_"), t)),
        };
    }
    Ok(t)
}

fn binder_step(s: &SExp) -> Option<(String, &SExp)> {
    if let SExp::List(items, _, _) = s {
        if items.len() == 3 {
            if let (SExp::Atom(x, _, _), SExp::Atom(arrow, _, _)) = (&items[0], &items[1]) {
                if arrow == "<-" {
                    return Some((x.clone(), &items[2]));
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::alpha_eq;

    fn lat() -> Lattice {
        Lattice::two_point()
    }

    #[test]
    fn parses_get_label() {
        let t = parse_program(&lat(), "(getLabel)").unwrap();
        assert_eq!(*t, Term::GetLabel);
    }

    #[test]
    fn parses_label_constant() {
        let lat = lat();
        let t = parse_program(&lat, "(label H (bool true))").unwrap();
        let h = lat.label("H").unwrap();
        assert_eq!(*t, *build::label(build::label_lit(h), build::bool_lit(true)));
    }

    #[test]
    fn do_block_desugars_to_bind() {
        let lat = lat();
        let t = parse_program(&lat, "(do (x <- (return (bool true))) (return (var x)))").unwrap();
        let expected = build::bind_to(
            build::ret(build::bool_lit(true)),
            "x",
            build::ret(build::var("x")),
        );
        assert!(alpha_eq(&t, &expected), "got {t:?}");
    }

    #[test]
    fn when_and_seq_desugar() {
        let lat = lat();
        let t = parse_program(&lat, "(when (bool true) (return (unit)))").unwrap();
        assert_eq!(
            *t,
            *build::if_(
                build::bool_lit(true),
                build::ret(build::unit()),
                build::ret(build::unit())
            )
        );
        let s = parse_program(&lat, "(seq (return (unit)) (getLabel))").unwrap();
        match &*s {
            Term::Bind(_, k) => assert!(matches!(&**k, Term::Lam(..))),
            other => panic!("expected bind, got {other:?}"),
        }
    }

    #[test]
    fn rejects_tcb_heads_and_unknown_forms() {
        for src in ["(Lb H (bool true))", "(LIO (bool true))", "(diverge)", "(wrap x)"] {
            assert!(parse_program(&lat(), src).is_err(), "{src} should not parse");
        }
    }

    #[test]
    fn reports_line_and_column() {
        let e = parse_program(&lat(), "(do\n  (x <- (return (bool true)))\n  (oops))").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("oops"));
    }

    #[test]
    fn flavored_reference_ops() {
        let lat = lat();
        let t = parse_program(&lat, "(newRef fs H (bool true))").unwrap();
        match &*t {
            Term::NewRef(Flavor::Fs, l, v) => {
                assert_eq!(**l, Term::LabelLit(lat.label("H").unwrap()));
                assert_eq!(**v, Term::True);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn surface_programs_contain_no_tcb_nodes() {
        let lat = lat();
        let srcs = [
            "(do (r <- (newRef fs H (unit))) (readRef fs r) (writeRef fs r (unit)))",
            "(toLabeled H (unlabel (var x)))",
            "(withRefs (bag r1 r2) (upgrade r1 H))",
            "(seq (fork (return (unit))) (return (bool false)))",
        ];
        for s in srcs {
            let t = parse_program(&lat, s).unwrap();
            assert!(!t.contains_tcb(), "{s}");
        }
    }
}
